//! Acceptance run: every criterion at its pinned threshold, one verdict line each.

use std::process::ExitCode;
use std::time::Instant;

use actpatch::backbone::Backbone;
use actpatch::checkpoint::{decode, encode};
use actpatch::config::ExperimentConfig;
use actpatch::fuser::init_sidetune;
use actpatch::gradsuite::{run_grad_suite, GRAD_TOL};
use actpatch::harness::{bench_report, BackboneModel, EvalReport, Head, PatcherModel};
use actpatch::objectives::{
    calibrate_desk_thresholds, delta_from_sims, saliency, saliency_theta_vv,
};
use actpatch::patcher::{param_count, PatcherConfig, Variant};
use actpatch::suite::{
    build_world, median_report, prepare, run_seed, SeedOutcome, BACKBONE, ENSEMBLE, KP_DVDM, KP_FINETUNE,
    KP_VTC, KP_VTC_KF, PAXION,
};
use actpatch::tensor::count_params;
use actpatch::train::{checkpoint_tensors, train_downstream, train_patcher, Mode};
use actpatch::world::{build_dataset, generate_clip, ActionKind, WorldConfig};
use actpatch::{Error, Result};

// Criterion 1
const GRAD_MAX_SECS: f64 = 60.0;
// Criterion 2
const BACKBONE_OR_MIN: f64 = 0.95;
const BACKBONE_AA_RANGE: (f64, f64) = (0.45, 0.55);
const BACKBONE_VR: f64 = 0.50;
const BACKBONE_MAX_SECS: f64 = 30.0;
// Criterion 3
const PATCHED_AA_MIN: f64 = 0.85;
const PATCHED_VR_MIN: f64 = 0.80;
const VTC_ONLY_GAP: f64 = 0.15;
const TRAIN_RUN_MAX_SECS: f64 = 300.0;
// Criterion 4
const HAND_TOL: f64 = 1e-12;
// Criterion 5 (plus the template-task ordering margin)
const TEMPLATE_GAIN_MIN: f64 = 0.20;
// Criterion 6
const FINETUNE_TEMPORAL_TIE: f64 = 0.02;
const VTC_KF_TEMPORAL_GAP: f64 = 0.05;
// Criterion 7
const ENSEMBLE_SLACK: f64 = 0.01;
// Criterion 9
const PARAM_RATIO_RANGE: (f64, f64) = (1.0 / 3.0, 2.0 / 3.0);
const SIDETUNE_EXTRA_PARAMS: usize = 1;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn grad_oracle() -> Result<Verdict> {
    let t = Instant::now();
    let checks = run_grad_suite(1)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.op.as_str()).collect();
    verdict(
        failing.is_empty() && worst <= GRAD_TOL && secs < GRAD_MAX_SECS,
        format!(
            "{} ops x 5 points, max rel err {worst:.2e} (tol {GRAD_TOL:e}), failing {failing:?}, {secs:.1}s",
            checks.len()
        ),
    )
}

fn backbone_pathology(cfg: &ExperimentConfig) -> Result<Verdict> {
    let t = Instant::now();
    let (ds, bb, _) = build_world(cfg)?;
    let r = bench_report(&BackboneModel { backbone: &bb }, &bb, &ds.eval, &ds.probes, cfg.seed, cfg.fingerprint())?;
    let secs = t.elapsed().as_secs_f64();
    let get = |m: &str| r.value(BACKBONE, "bench", m).unwrap_or(f64::NAN);
    let (aa, vr, or) = (get("AA"), get("VR"), get("OR"));
    verdict(
        or >= BACKBONE_OR_MIN
            && (BACKBONE_AA_RANGE.0..=BACKBONE_AA_RANGE.1).contains(&aa)
            && vr == BACKBONE_VR
            && secs < BACKBONE_MAX_SECS
            && ds.eval.len() == 600,
        format!("OR {or:.3}, AA {aa:.3}, VR {vr:.3} on {} eval clips, {secs:.1}s", ds.eval.len()),
    )
}

fn med(r: &EvalReport, model: &str, task: &str, metric: &str) -> Result<f64> {
    r.value(model, task, metric).ok_or_else(|| Error::Unknown {
        kind: "report row",
        name: format!("{model}/{task}/{metric}"),
    })
}

fn patching_trend(m: &EvalReport, outcomes: &[SeedOutcome]) -> Result<Verdict> {
    let aa = med(m, KP_DVDM, "bench", "AA")?;
    let vr = med(m, KP_DVDM, "bench", "VR")?;
    let aa_v = med(m, KP_VTC, "bench", "AA")?;
    let vr_v = med(m, KP_VTC, "bench", "VR")?;
    let slowest = outcomes
        .iter()
        .flat_map(|o| o.timings.iter())
        .filter(|(name, _)| name.starts_with("patch") || name.starts_with("downstream"))
        .map(|(_, s)| *s)
        .fold(0.0, f64::max);
    verdict(
        aa >= PATCHED_AA_MIN
            && vr >= PATCHED_VR_MIN
            && aa - aa_v > VTC_ONLY_GAP
            && vr - vr_v > VTC_ONLY_GAP
            && slowest < TRAIN_RUN_MAX_SECS,
        format!(
            "vtc+dvdm AA {aa:.3} VR {vr:.3}; vtc-only AA {aa_v:.3} VR {vr_v:.3}; slowest run {slowest:.1}s"
        ),
    )
}

fn saliency_gating(cfg: &ExperimentConfig) -> Result<Verdict> {
    let world = cfg.world.clone();
    let bb = Backbone::new(&world, &cfg.backbone)?;
    let th = calibrate_desk_thresholds(&bb, cfg.calibration_draws, world.seed)?;
    let clean = WorldConfig {
        noise_std: 0.0,
        ..world.clone()
    };
    let (mut statics, mut static_ok, mut dirs, mut dir_ok) = (0, 0, 0, 0);
    for e in world.lexicon.entries() {
        for o in 0..world.num_objects {
            let clip = generate_clip(&clean, o, e.id, 1_000 + o as u64)?;
            let s = saliency(&bb, &clip, th)?;
            match e.kind {
                ActionKind::Static => {
                    statics += 1;
                    static_ok += usize::from(!s.gated);
                }
                ActionKind::Directional => {
                    dirs += 1;
                    dir_ok += usize::from(s.gated);
                }
                ActionKind::Symmetric => {}
            }
        }
    }
    let delta = delta_from_sims(&[0.8, 0.8, 0.2, 0.2])?;
    let same = vec![vec![0.3, 0.4], vec![0.5, -0.1], vec![0.3, 0.4], vec![0.5, -0.1]];
    let theta = saliency_theta_vv(&same)?;
    let hand = (delta - 0.6).abs() <= HAND_TOL && (theta - 1.0).abs() <= HAND_TOL;
    verdict(
        statics > 0 && dirs > 0 && static_ok == statics && dir_ok == dirs && hand,
        format!(
            "static ungated {static_ok}/{statics}, directional gated {dir_ok}/{dirs} (delta {:.4}, theta {}); hand delta {delta}, theta {theta}",
            th.delta, th.theta
        ),
    )
}

fn fusion_trend(m: &EvalReport) -> Result<Verdict> {
    let full = |t| med(m, t, "full", "R1_avg");
    let temporal = |t| med(m, t, "temporal", "R1_v2t");
    let (pax, bb, ft) = (full(PAXION)?, full(BACKBONE)?, full(KP_FINETUNE)?);
    let (pax_t, bb_t) = (temporal(PAXION)?, temporal(BACKBONE)?);
    let (pax_tm, bb_tm) = (med(m, PAXION, "template", "R1_v2t")?, med(m, BACKBONE, "template", "R1_v2t")?);
    verdict(
        pax >= bb.max(ft) && pax_t - bb_t > pax - bb && pax_tm > bb_tm + TEMPLATE_GAIN_MIN,
        format!(
            "full R1 paxion {pax:.3} vs backbone {bb:.3}, kp+finetune {ft:.3}; gain temporal {:.3} > full {:.3}; template {pax_tm:.3} vs backbone {bb_tm:.3}",
            pax_t - bb_t,
            pax - bb
        ),
    )
}

fn ablation_ordering(m: &EvalReport) -> Result<Verdict> {
    let (pax_t, ft_t, kf_t) = (
        med(m, PAXION, "temporal", "R1_v2t")?,
        med(m, KP_FINETUNE, "temporal", "R1_v2t")?,
        med(m, KP_VTC_KF, "temporal", "R1_v2t")?,
    );
    let (pax, ft) = (med(m, PAXION, "full", "R1_avg")?, med(m, KP_FINETUNE, "full", "R1_avg")?);
    verdict(
        ft_t >= pax_t - FINETUNE_TEMPORAL_TIE && pax > ft && kf_t < pax_t - VTC_KF_TEMPORAL_GAP,
        format!(
            "temporal kp+finetune {ft_t:.3} vs paxion {pax_t:.3}, kp[vtc]+kf {kf_t:.3}; full paxion {pax:.3} vs kp+finetune {ft:.3}"
        ),
    )
}

fn zero_shot_shift(m: &EvalReport) -> Result<Verdict> {
    let z = |t| med(m, t, "zero_shot", "accuracy");
    let (bb, kp, pax, ens) = (z(BACKBONE)?, z(KP_DVDM)?, z(PAXION)?, z(ENSEMBLE)?);
    verdict(
        kp < bb && kp < pax && kp < ens && (bb - pax).abs() < bb - kp && ens >= bb - ENSEMBLE_SLACK && ens >= pax,
        format!("backbone {bb:.3}, patcher alone {kp:.3}, fuser {pax:.3}, ensemble {ens:.3}"),
    )
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.counts.train = 640;
    cfg.counts.eval = 120;
    cfg.counts.heldout = 40;
    cfg.train.epochs = 1;
    cfg.calibration_draws = 50;
    cfg
}

/// Checkpoint bytes and bench report of one small patching plus fusing run.
fn small_run(cfg: &ExperimentConfig) -> Result<(Vec<u8>, Vec<u8>, String)> {
    let prep = prepare(cfg)?;
    let pcfg = cfg.train.patcher_config(&prep.backbone);
    let kp = train_patcher(&cfg.train, &pcfg, &prep.train)?;
    let kp_bytes = encode(&checkpoint_tensors(&kp.params, &pcfg, Mode::None, cfg.fingerprint()))?;
    let tc = cfg.downstream(Mode::Fuse, cfg.train.annotation);
    let fused = train_downstream(&tc, &pcfg, &kp.params, &prep.train)?;
    let fused_bytes = encode(&checkpoint_tensors(&fused.params, &pcfg, Mode::Fuse, cfg.fingerprint()))?;
    let model = PatcherModel {
        tag: KP_DVDM.into(),
        backbone: &prep.backbone,
        config: pcfg,
        params: &kp.params,
        head: Head::MaxTokens,
    };
    let report = bench_report(&model, &prep.backbone, &prep.dataset.eval, &prep.dataset.probes, 1, cfg.fingerprint())?;
    Ok((kp_bytes, fused_bytes, report.to_tsv() + &kp.record.loss_tsv()))
}

fn determinism() -> Result<Verdict> {
    let cfg = small_config();
    let a = small_run(&cfg)?;
    let b = small_run(&cfg)?;
    let runs_equal = a == b;

    let decoded = decode(&a.0)?;
    let round_trip = encode(&decoded)? == a.0;
    let mut corrupt = a.0.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x40;
    let rejected = matches!(decode(&corrupt), Err(Error::CorruptCheckpoint(_)));

    let full = ExperimentConfig::default();
    let m1 = build_dataset(&full.world, full.counts)?.manifest;
    let m2 = build_dataset(&full.world, full.counts)?.manifest;
    let manifest_equal = m1.to_tsv() == m2.to_tsv() && m1.meta() == m2.meta();
    let dir = std::env::temp_dir().join(format!("actpatch-acceptance-{}", std::process::id()));
    m1.write(&dir.join("a"))?;
    m2.write(&dir.join("b"))?;
    let bytes = |p: &str| std::fs::read(dir.join(p)).map_err(|e| Error::NotApplicable(e.to_string()));
    let files_equal = bytes("a/manifest.tsv")? == bytes("b/manifest.tsv")? && bytes("a/dataset.meta")? == bytes("b/dataset.meta")?;
    let _ = std::fs::remove_dir_all(&dir);

    verdict(
        runs_equal && round_trip && rejected && manifest_equal && files_equal,
        format!(
            "repeat runs identical {runs_equal}, round trip {round_trip}, corrupt rejected {rejected}, manifest identical {}",
            manifest_equal && files_equal
        ),
    )
}

fn parameter_efficiency() -> Result<Verdict> {
    let kp = param_count(&PatcherConfig::desk(Variant::Perceiver))?;
    let tr = param_count(&PatcherConfig::desk(Variant::Transformer))?;
    let ratio = kp as f64 / tr as f64;

    let mut cfg = small_config();
    cfg.counts.train = 64;
    let prep = prepare(&cfg)?;
    let pcfg = cfg.train.patcher_config(&prep.backbone);
    let mut tc = cfg.train.clone();
    tc.epochs = 0;
    let base = train_patcher(&tc, &pcfg, &prep.train)?.params;
    let count = |mode| -> Result<usize> {
        let mut d = cfg.downstream(mode, cfg.train.annotation);
        d.epochs = 0;
        Ok(count_params(&train_downstream(&d, &pcfg, &base, &prep.train)?.params))
    };
    let extra = count(Mode::Sidetune)? as i64 - count(Mode::Finetune)? as i64;
    verdict(
        (PARAM_RATIO_RANGE.0..=PARAM_RATIO_RANGE.1).contains(&ratio)
            && extra == SIDETUNE_EXTRA_PARAMS as i64
            && count_params(&init_sidetune()) == SIDETUNE_EXTRA_PARAMS,
        format!("perceiver {kp} / transformer {tr} = {ratio:.3}; side-tune adds {extra}"),
    )
}

fn report(id: usize, name: &str, v: Result<Verdict>) -> bool {
    let (pass, detail) = match v {
        Ok(v) => (v.pass, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("criterion {id} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() -> ExitCode {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let mut ok = true;
    ok &= report(1, "gradient oracle", grad_oracle());
    ok &= report(2, "backbone pathology", backbone_pathology(&cfg));

    let suite = (|| -> Result<(EvalReport, Vec<SeedOutcome>)> {
        let prep = prepare(&cfg)?;
        let outcomes = cfg
            .suite_seeds
            .iter()
            .map(|&s| run_seed(&prep, &cfg, s))
            .collect::<Result<Vec<_>>>()?;
        Ok((median_report(&outcomes, cfg.fingerprint()), outcomes))
    })();
    let suite = suite.map_err(|e| e.to_string());
    let with_suite = |f: &dyn Fn(&EvalReport, &[SeedOutcome]) -> Result<Verdict>| match &suite {
        Ok((m, o)) => f(m, o),
        Err(e) => Err(Error::NotApplicable(format!("suite run failed: {e}"))),
    };
    ok &= report(3, "patching trend", with_suite(&|m, o| patching_trend(m, o)));
    ok &= report(4, "saliency gating", saliency_gating(&cfg));
    ok &= report(5, "fusion trend", with_suite(&|m, _| fusion_trend(m)));
    ok &= report(6, "ablation ordering", with_suite(&|m, _| ablation_ordering(m)));
    ok &= report(7, "zero-shot domain shift", with_suite(&|m, _| zero_shot_shift(m)));
    ok &= report(8, "determinism and formats", determinism());
    ok &= report(9, "parameter efficiency", parameter_efficiency());
    println!("acceptance: {} in {:.1}s", if ok { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
