//! End-to-end runs of the command-line verbs on the smoke config.

use std::fs;
use std::path::{Path, PathBuf};

use actpatch::checkpoint::load_checkpoint;
use actpatch::cli::{main_with, DOWNSTREAM_CHECKPOINT, EFFECTIVE_CONFIG, LOSS_LOG, PATCHER_CHECKPOINT, REPORT_MD, REPORT_TSV};
use actpatch::config::ExperimentConfig;
use actpatch::harness::EvalReport;
use actpatch::world::DatasetManifest;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(verb: &str, out: &Path, extra: &[&str]) -> i32 {
    let cfg = configs().join("smoke.cfg");
    let mut args = vec!["actpatch", verb, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    main_with(args)
}

fn report(dir: &Path) -> EvalReport {
    EvalReport::parse_tsv(&fs::read_to_string(dir.join(REPORT_TSV)).unwrap()).unwrap()
}

#[test]
fn desk_config_file_is_the_default() {
    let cfg = ExperimentConfig::load(&configs().join("desk.cfg"), &[], None).unwrap();
    assert_eq!(cfg.fingerprint(), ExperimentConfig::default().fingerprint());
    assert_eq!(cfg.effective(), ExperimentConfig::default().effective());
}

#[test]
fn pipeline_from_data_to_zero_shot() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |n: &str| tmp.path().join(n);

    assert_eq!(run("gen-data", &d("data"), &[]), 0);
    for f in ["manifest.tsv", "dataset.meta", "saliency.tsv", EFFECTIVE_CONFIG] {
        assert!(d("data").join(f).exists(), "{f}");
    }
    let manifest = DatasetManifest::read(&d("data")).unwrap();
    assert_eq!(manifest.rows.len(), 640 + 120 + 40);

    assert_eq!(run("train-patcher", &d("kp"), &[]), 0);
    let kp = d("kp").join(PATCHER_CHECKPOINT);
    assert!(!load_checkpoint(&kp).unwrap().is_empty());
    assert!(fs::read_to_string(d("kp").join(LOSS_LOG)).unwrap().lines().count() > 1);

    let from = format!("train.checkpoint={}", kp.display());
    assert_eq!(run("train-downstream", &d("fuse"), &["--set", "train.mode=fuse", "--set", &from]), 0);
    let fused = d("fuse").join(DOWNSTREAM_CHECKPOINT);
    assert!(fused.exists());

    let with = format!("eval.checkpoint={}", fused.display());
    assert_eq!(run("eval-bench", &d("bench"), &["--set", &with]), 0);
    let r = report(&d("bench"));
    for m in ["AA", "VR", "OR"] {
        assert!(r.rows.iter().any(|row| row.metric == m), "{m}");
    }
    assert!(d("bench").join(REPORT_MD).exists());

    assert_eq!(run("eval-retrieval", &d("ret"), &["--set", &with]), 0);
    let r = report(&d("ret"));
    assert!(r.rows.iter().all(|row| (0.0..=1.0).contains(&row.value.parse::<f64>().unwrap())));
    assert!(r.rows.iter().any(|row| row.metric == "R1_avg"));

    assert_eq!(run("zero-shot", &d("zs"), &["--set", &with]), 0);
    let r = report(&d("zs"));
    assert_eq!(r.rows.iter().filter(|row| row.task == "zero_shot").count(), 3);

    // Without a checkpoint the backbone is evaluated.
    assert_eq!(run("eval-bench", &d("bb"), &[]), 0);
    assert_eq!(report(&d("bb")).value("backbone", "bench", "VR"), Some(0.5));
}

#[test]
fn commands_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(run("train-patcher", &a, &["--seed", "3"]), 0);
    assert_eq!(run("train-patcher", &b, &["--seed", "3"]), 0);
    for f in [PATCHER_CHECKPOINT, LOSS_LOG, EFFECTIVE_CONFIG] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 3);
}

#[test]
fn export_report_writes_seed_and_median_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rep");
    assert_eq!(run("export-report", &out, &[]), 0);
    assert!(out.join("report_seed1.tsv").exists());
    let r = report(&out);
    for tag in ["backbone", "kp[vtc]", "kp[vtc+dvdm]", "paxion", "kp+finetune", "kp[vtc]+kf", "side-tune"] {
        assert!(r.rows.iter().any(|row| row.model_tag == tag), "{tag}");
    }
    assert!(fs::read_to_string(out.join(REPORT_MD)).unwrap().contains("| model |"));
}

#[test]
fn runtime_failures_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = format!("eval.checkpoint={}", tmp.path().join("none.paxl").display());
    assert_eq!(run("eval-bench", &tmp.path().join("x"), &["--set", &missing]), 2);
}
