//! Command-line front end: one verb per pipeline stage, driven by a config file.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::backbone::Backbone;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::gradsuite::{grad_suite_tsv, run_grad_suite};
use crate::harness::{
    bench_report, eval_retrieval, retrieval_report, zero_shot_classify, BackboneModel, EvalReport, FusedModel,
    PatcherModel, SideTunedModel, VideoModel,
};
use crate::suite::{
    build_world, heldout_candidates, median_report, prepare, run_seed, saliency_tsv, BACKBONE, ENSEMBLE,
    KP_FINETUNE, PAXION, SIDE_TUNE,
};
use crate::train::{
    checkpoint_tensors, model_from_tensors, train_downstream, train_patcher, LoadedModel, Mode,
    RunRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Verb {
    GenData,
    TrainPatcher,
    TrainDownstream,
    EvalBench,
    EvalRetrieval,
    ZeroShot,
    GradCheck,
    ExportReport,
}

#[derive(Debug, Parser)]
#[command(name = "actpatch", version, about = "Action-knowledge patching lab")]
pub struct Cli {
    #[arg(value_enum)]
    pub verb: Verb,
    /// Experiment config file.
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory; defaults to runs/<config fingerprint>.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.epochs=1`; repeatable, last wins.
    #[arg(long = "set", value_name = "K=V")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub const EFFECTIVE_CONFIG: &str = "config.effective";
pub const PATCHER_CHECKPOINT: &str = "patcher.paxl";
pub const DOWNSTREAM_CHECKPOINT: &str = "downstream.paxl";
pub const LOSS_LOG: &str = "loss.tsv";
pub const REPORT_TSV: &str = "report.tsv";
pub const REPORT_MD: &str = "report.md";
pub const GRAD_TSV: &str = "grad_check.tsv";

/// Parses `args` (program name first), runs the verb and maps the outcome to
/// the exit code: 0 success, 1 invalid input, 2 failure at run time.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

/// Runs one command and returns its summary lines.
pub fn run(cli: &Cli) -> Result<Vec<String>> {
    let cfg = ExperimentConfig::load(&cli.config, &cli.overrides, cli.seed).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
        other => other,
    })?;
    validate_for(cli.verb, &cfg)?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{:016x}", cfg.fingerprint())));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(&out.join(EFFECTIVE_CONFIG), cfg.effective())?;
    match cli.verb {
        Verb::GenData => gen_data(&cfg, &out),
        Verb::TrainPatcher => train_patcher_cmd(&cfg, &out),
        Verb::TrainDownstream => train_downstream_cmd(&cfg, &out),
        Verb::EvalBench => eval_cmd(&cfg, &out, EvalKind::Bench),
        Verb::EvalRetrieval => eval_cmd(&cfg, &out, EvalKind::Retrieval),
        Verb::ZeroShot => eval_cmd(&cfg, &out, EvalKind::ZeroShot),
        Verb::GradCheck => grad_check_cmd(&cfg, &out),
        Verb::ExportReport => export_report(&cfg, &out),
    }
}

/// Input checks that must fail before anything is written.
fn validate_for(verb: Verb, cfg: &ExperimentConfig) -> Result<()> {
    match verb {
        Verb::TrainPatcher if cfg.train.mode != Mode::None => Err(Error::Config(format!(
            "train.mode: train-patcher needs `none`, got `{}`",
            cfg.train.mode.name()
        ))),
        Verb::TrainDownstream => {
            if cfg.train.mode == Mode::None {
                return Err(Error::Config("train.mode: train-downstream needs fuse|finetune|sidetune".into()));
            }
            if cfg.input_checkpoint.is_none() {
                return Err(Error::Config(format!(
                    "train.checkpoint: mode `{}` requires a patcher checkpoint",
                    cfg.train.mode.name()
                )));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let (ds, _, th) = build_world(cfg)?;
    ds.manifest.write(out)?;
    let mut clips = ds.train.clone();
    clips.extend(ds.eval.iter().cloned());
    clips.extend(ds.heldout.iter().cloned());
    write(&out.join("saliency.tsv"), &saliency_tsv(&clips))?;
    ds.export_frames(&out.join("frames"))?;
    let gated = clips.iter().filter(|c| c.saliency.is_some_and(|s| s.gated)).count();
    Ok(vec![
        format!("train\t{}", ds.train.len()),
        format!("eval\t{}", ds.eval.len()),
        format!("heldout_domain\t{}", ds.heldout.len()),
        format!("gated\t{gated}"),
        format!("gate_delta\t{:?}", th.delta),
        format!("gate_theta\t{:?}", th.theta),
        format!("fingerprint\t{:016x}", ds.manifest.fingerprint),
    ])
}

fn run_summary(rec: &RunRecord) -> Vec<String> {
    let mut lines = vec![format!("steps\t{}", rec.log.len())];
    if let Some((_, last)) = rec.log.last() {
        lines.push(format!("final_vtc\t{:.6}", last.vtc));
        lines.push(format!("final_vac\t{:.6}", last.vac));
        lines.push(format!("final_atm\t{:.6}", last.atm));
        lines.push(format!("final_total\t{:.6}", last.total));
    }
    lines.push(format!("config_fp\t{:016x}", rec.config_fp));
    lines
}

fn train_patcher_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let prep = prepare(cfg)?;
    let pcfg = cfg.train.patcher_config(&prep.backbone);
    let trained = train_patcher(&cfg.train, &pcfg, &prep.train)?;
    let ckpt = out.join(PATCHER_CHECKPOINT);
    save_checkpoint(
        &checkpoint_tensors(&trained.params, &pcfg, Mode::None, cfg.fingerprint()),
        &ckpt,
    )?;
    write(&out.join(LOSS_LOG), &trained.record.loss_tsv())?;
    let mut lines = run_summary(&trained.record);
    lines.push(format!("checkpoint\t{}", ckpt.display()));
    Ok(lines)
}

fn load_model(path: &Path, backbone: &Backbone) -> Result<LoadedModel> {
    let m = model_from_tensors(load_checkpoint(path)?)?;
    if m.patcher.input_dim != backbone.embed_dim() || m.patcher.model_dim != backbone.joint_dim() {
        return Err(Error::Config(format!(
            "{}: checkpoint widths {}→{} do not match the backbone {}→{}",
            path.display(),
            m.patcher.input_dim,
            m.patcher.model_dim,
            backbone.embed_dim(),
            backbone.joint_dim()
        )));
    }
    Ok(m)
}

fn train_downstream_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let prep = prepare(cfg)?;
    let path = cfg.input_checkpoint.as_deref().expect("validated");
    let input = load_model(path, &prep.backbone)?;
    let tc = cfg.downstream(cfg.train.mode, cfg.train.annotation);
    let trained = train_downstream(&tc, &input.patcher, &input.params, &prep.train)?;
    let ckpt = out.join(DOWNSTREAM_CHECKPOINT);
    save_checkpoint(
        &checkpoint_tensors(&trained.params, &input.patcher, tc.mode, cfg.fingerprint()),
        &ckpt,
    )?;
    write(&out.join(LOSS_LOG), &trained.record.loss_tsv())?;
    let mut lines = run_summary(&trained.record);
    lines.push(format!("checkpoint\t{}", ckpt.display()));
    Ok(lines)
}

/// Scoring model for a loaded checkpoint, chosen by its training mode.
fn model_for<'a>(m: &'a LoadedModel, backbone: &'a Backbone, cfg: &ExperimentConfig) -> Box<dyn VideoModel + 'a> {
    match m.mode {
        Mode::None | Mode::Finetune => Box::new(PatcherModel {
            tag: if m.mode == Mode::None { "kp".into() } else { KP_FINETUNE.into() },
            backbone,
            config: m.patcher.clone(),
            params: &m.params,
            head: cfg.eval.head,
        }),
        Mode::Fuse => Box::new(FusedModel {
            tag: PAXION.into(),
            backbone,
            config: m.patcher.clone(),
            params: &m.params,
        }),
        Mode::Sidetune => Box::new(SideTunedModel {
            tag: SIDE_TUNE.into(),
            backbone,
            config: m.patcher.clone(),
            params: &m.params,
        }),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum EvalKind {
    Bench,
    Retrieval,
    ZeroShot,
}

fn eval_cmd(cfg: &ExperimentConfig, out: &Path, kind: EvalKind) -> Result<Vec<String>> {
    let (ds, bb, _) = build_world(cfg)?;
    let loaded = match &cfg.eval.checkpoint {
        Some(p) => Some(load_model(p, &bb)?),
        None => None,
    };
    let backbone_model = BackboneModel { backbone: &bb };
    let model: Box<dyn VideoModel + '_> = match &loaded {
        Some(m) => model_for(m, &bb, cfg),
        None => Box::new(BackboneModel { backbone: &bb }),
    };
    let (seed, fp) = (cfg.seed, cfg.fingerprint());
    let mut report = EvalReport::default();
    match kind {
        EvalKind::Bench => report.extend(bench_report(model.as_ref(), &bb, &ds.eval, &ds.probes, seed, fp)?),
        EvalKind::Retrieval => {
            for &task in &cfg.eval.tasks {
                let r = eval_retrieval(model.as_ref(), &bb, &ds.eval, task, &cfg.eval.ks)?;
                report.extend(retrieval_report(&r, &model.tag(), seed, fp));
            }
        }
        EvalKind::ZeroShot => {
            let cands = heldout_candidates(&bb)?;
            let tau = cfg.train.temperature;
            let r = zero_shot_classify(model.as_ref(), None, &bb, &ds.heldout, &cands, tau)?;
            report.push(&model.tag(), "zero_shot", "accuracy", r.accuracy, r.n, seed, fp);
            if loaded.is_some() {
                let e = zero_shot_classify(model.as_ref(), Some(&backbone_model), &bb, &ds.heldout, &cands, tau)?;
                let tag = if model.tag() == PAXION { ENSEMBLE.to_string() } else { format!("{}+ensemble", model.tag()) };
                report.push(&tag, "zero_shot", "accuracy", e.accuracy, e.n, seed, fp);
                let b = zero_shot_classify(&backbone_model, None, &bb, &ds.heldout, &cands, tau)?;
                report.push(BACKBONE, "zero_shot", "accuracy", b.accuracy, b.n, seed, fp);
            }
        }
    }
    emit(&report, out)
}

fn emit(report: &EvalReport, out: &Path) -> Result<Vec<String>> {
    report.write_tsv(&out.join(REPORT_TSV))?;
    report.write_markdown(&out.join(REPORT_MD))?;
    Ok(report
        .rows
        .iter()
        .map(|r| format!("{}\t{}\t{}\t{}", r.model_tag, r.task, r.metric, r.value))
        .collect())
}

fn grad_check_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let checks = run_grad_suite(cfg.seed)?;
    write(&out.join(GRAD_TSV), &grad_suite_tsv(&checks))?;
    let failing: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.op.as_str()).collect();
    if !failing.is_empty() {
        return Err(Error::NotApplicable(format!("gradient check failed for {}", failing.join(", "))));
    }
    Ok(checks.iter().map(|c| format!("{}\t{:e}", c.op, c.max_rel_err)).collect())
}

/// Runs the full experiment for every suite seed and writes per-seed and median reports.
fn export_report(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    let prep = prepare(cfg)?;
    let fp = cfg.fingerprint();
    let mut outcomes = Vec::new();
    for &seed in &cfg.suite_seeds {
        let o = run_seed(&prep, cfg, seed)?;
        o.report.write_tsv(&out.join(format!("report_seed{seed}.tsv")))?;
        outcomes.push(o);
    }
    let median = median_report(&outcomes, fp);
    emit(&median, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(args)
    }

    #[test]
    fn verbs_and_flags_parse() {
        let c = parse(&[
            "actpatch",
            "train-patcher",
            "--config",
            "a.cfg",
            "--set",
            "train.epochs=1",
            "--set",
            "seed=4",
            "--seed",
            "9",
        ])
        .unwrap();
        assert_eq!(c.verb, Verb::TrainPatcher);
        assert_eq!(c.overrides, vec!["train.epochs=1", "seed=4"]);
        assert_eq!(c.seed, Some(9));
        assert!(c.out.is_none());
        for v in [
            "gen-data",
            "train-downstream",
            "eval-bench",
            "eval-retrieval",
            "zero-shot",
            "grad-check",
            "export-report",
        ] {
            assert!(parse(&["actpatch", v, "--config", "x"]).is_ok(), "{v}");
        }
    }

    #[test]
    fn unknown_verb_and_missing_config_are_rejected() {
        assert!(parse(&["actpatch", "train", "--config", "x"]).is_err());
        assert!(parse(&["actpatch", "gen-data"]).is_err());
        assert_eq!(main_with(["actpatch", "bogus", "--config", "x"]), 1);
    }

    #[test]
    fn bad_input_exits_one_without_writing() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        fs::write(&cfg, "seed = 1\n").unwrap();
        let out = dir.path().join("out");
        let o = out.to_str().unwrap();
        let c = cfg.to_str().unwrap();
        assert_eq!(main_with(["actpatch", "gen-data", "--config", c, "--out", o, "--set", "nope.key=1"]), 1);
        assert_eq!(main_with(["actpatch", "train-downstream", "--config", c, "--out", o, "--set", "train.mode=fuse"]), 1);
        assert!(!out.exists());
        assert_eq!(main_with(["actpatch", "gen-data", "--config", "/nonexistent/c.cfg", "--out", o]), 1);
    }
}
