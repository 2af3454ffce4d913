//! The full experiment: patching with and without the dynamics objectives,
//! downstream heads, probes, retrieval and zero-shot transfer.

use std::fmt::Write as _;
use std::time::Instant;

use crate::backbone::Backbone;
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::harness::{
    bench_report, eval_retrieval, retrieval_report, zero_shot_classify, BackboneModel, EvalReport,
    FusedModel, Head, PatcherModel, SideTunedModel, Task, VideoModel,
};
use crate::objectives::{calibrate_desk_thresholds, saliency, GatePreset, GateThresholds};
use crate::patcher::PatcherConfig;
use crate::tensor::ParamSet;
use crate::train::{encode_clips, train_downstream, train_patcher, Annotation, EncodedClip, Mode, Objectives, TrainConfig};
use crate::world::{build_dataset, ClipInstance, Dataset, TEMPLATE_OBJECT};

pub const BACKBONE: &str = "backbone";
pub const KP_VTC: &str = "kp[vtc]";
pub const KP_DVDM: &str = "kp[vtc+dvdm]";
pub const PAXION: &str = "paxion";
pub const KP_FINETUNE: &str = "kp+finetune";
pub const KP_VTC_KF: &str = "kp[vtc]+kf";
pub const SIDE_TUNE: &str = "side-tune";
pub const ENSEMBLE: &str = "paxion+ensemble";

/// Dataset, backbone and pre-encoded training clips shared by every seed.
pub struct Prepared {
    pub dataset: Dataset,
    pub backbone: Backbone,
    pub thresholds: GateThresholds,
    pub train: Vec<EncodedClip>,
}

pub fn gate_thresholds(cfg: &ExperimentConfig, backbone: &Backbone) -> Result<GateThresholds> {
    match cfg.gate {
        GatePreset::Paper => Ok(GateThresholds::PAPER),
        GatePreset::Desk => calibrate_desk_thresholds(backbone, cfg.calibration_draws, cfg.world.seed),
    }
}

/// Scores and gates every clip of the dataset in place.
pub fn attach_saliency(dataset: &mut Dataset, backbone: &Backbone, th: GateThresholds) -> Result<()> {
    for clip in dataset
        .train
        .iter_mut()
        .chain(dataset.eval.iter_mut())
        .chain(dataset.heldout.iter_mut())
    {
        clip.saliency = Some(saliency(backbone, clip, th)?);
    }
    Ok(())
}

pub const SALIENCY_HEADER: &str = "clip_id\tdelta_vt\ttheta_vv\tgated";

/// Saliency scores as TSV; clips without scores are skipped.
pub fn saliency_tsv(clips: &[ClipInstance]) -> String {
    let mut s = String::from(SALIENCY_HEADER);
    s.push('\n');
    for c in clips {
        if let Some(sc) = c.saliency {
            let _ = writeln!(s, "{}\t{:?}\t{:?}\t{}", c.clip_id, sc.delta_vt, sc.theta_vv, u8::from(sc.gated));
        }
    }
    s
}

/// Dataset with saliency attached, the backbone and the gate thresholds.
pub fn build_world(cfg: &ExperimentConfig) -> Result<(Dataset, Backbone, GateThresholds)> {
    let mut dataset = build_dataset(&cfg.world, cfg.counts)?;
    let backbone = Backbone::new(&cfg.world, &cfg.backbone)?;
    let thresholds = gate_thresholds(cfg, &backbone)?;
    attach_saliency(&mut dataset, &backbone, thresholds)?;
    Ok((dataset, backbone, thresholds))
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (dataset, backbone, thresholds) = build_world(cfg)?;
    let train = encode_clips(&backbone, &dataset.train, thresholds)?;
    Ok(Prepared {
        dataset,
        backbone,
        thresholds,
        train,
    })
}

/// Template texts of the held-out actions, the zero-shot candidates.
pub fn heldout_candidates(backbone: &Backbone) -> Result<Vec<Vec<String>>> {
    let world = backbone.world();
    world
        .heldout_action_ids()
        .iter()
        .map(|&a| Ok(vec![TEMPLATE_OBJECT.to_string(), world.lexicon.get(a)?.name.clone()]))
        .collect()
}

/// Report rows of one training seed plus wall-clock per stage.
pub struct SeedOutcome {
    pub seed: u64,
    pub report: EvalReport,
    pub timings: Vec<(String, f64)>,
}

struct Trained {
    params: ParamSet,
}

fn fused<'a>(tag: &str, prep: &'a Prepared, pcfg: &PatcherConfig, params: &'a ParamSet) -> FusedModel<'a> {
    FusedModel {
        tag: tag.into(),
        backbone: &prep.backbone,
        config: pcfg.clone(),
        params,
    }
}

fn patcher<'a>(tag: &str, prep: &'a Prepared, pcfg: &PatcherConfig, params: &'a ParamSet) -> PatcherModel<'a> {
    PatcherModel {
        tag: tag.into(),
        backbone: &prep.backbone,
        config: pcfg.clone(),
        params,
        head: Head::MaxTokens,
    }
}

/// Runs every training and evaluation stage for one seed.
pub fn run_seed(prep: &Prepared, cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome> {
    let fp = cfg.fingerprint();
    let bb = &prep.backbone;
    let eval = &prep.dataset.eval;
    let probes = &prep.dataset.probes;
    let mut timings = Vec::new();
    let mut report = EvalReport::default();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let base = TrainConfig {
        seed,
        mode: Mode::None,
        ..cfg.train.clone()
    };
    let pcfg = base.patcher_config(bb);
    let patch_with = |objectives| -> Result<Trained> {
        let c = TrainConfig {
            objectives,
            ..base.clone()
        };
        Ok(Trained {
            params: train_patcher(&c, &pcfg, &prep.train)?.params,
        })
    };
    let dvdm = patch_with(Objectives::ALL)?;
    lap("patch kp[vtc+dvdm]", &mut timings);
    let vtc = patch_with(Objectives::VTC)?;
    lap("patch kp[vtc]", &mut timings);

    let backbone_model = BackboneModel { backbone: bb };
    report.extend(bench_report(&backbone_model, bb, eval, probes, seed, fp)?);
    report.extend(bench_report(&patcher(KP_VTC, prep, &pcfg, &vtc.params), bb, eval, probes, seed, fp)?);
    report.extend(bench_report(&patcher(KP_DVDM, prep, &pcfg, &dvdm.params), bb, eval, probes, seed, fp)?);
    lap("bench", &mut timings);

    let ks = &cfg.eval.ks;
    for annotation in [Annotation::Full, Annotation::Template] {
        let run = |mode, from: &ParamSet| -> Result<ParamSet> {
            let c = TrainConfig {
                seed,
                ..cfg.downstream(mode, annotation)
            };
            Ok(train_downstream(&c, &pcfg, from, &prep.train)?.params)
        };
        let paxion = run(Mode::Fuse, &dvdm.params)?;
        let finetune = run(Mode::Finetune, &dvdm.params)?;
        let vtc_kf = run(Mode::Fuse, &vtc.params)?;
        let side = run(Mode::Sidetune, &dvdm.params)?;
        lap(&format!("downstream {}", annotation.name()), &mut timings);

        let models: Vec<Box<dyn VideoModel + '_>> = vec![
            Box::new(BackboneModel { backbone: bb }),
            Box::new(patcher(KP_DVDM, prep, &pcfg, &dvdm.params)),
            Box::new(fused(PAXION, prep, &pcfg, &paxion)),
            Box::new(patcher(KP_FINETUNE, prep, &pcfg, &finetune)),
            Box::new(fused(KP_VTC_KF, prep, &pcfg, &vtc_kf)),
            Box::new(SideTunedModel {
                tag: SIDE_TUNE.into(),
                backbone: bb,
                config: pcfg.clone(),
                params: &side,
            }),
        ];
        let tasks: &[Task] = match annotation {
            Annotation::Full => &[Task::Full],
            Annotation::Template => &[Task::Template, Task::Temporal],
        };
        for &task in tasks {
            for m in &models {
                let r = eval_retrieval(m.as_ref(), bb, eval, task, ks)?;
                report.extend(retrieval_report(&r, &m.tag(), seed, fp));
            }
        }
        lap(&format!("retrieval {}", annotation.name()), &mut timings);

        if annotation == Annotation::Full {
            let cands = heldout_candidates(bb)?;
            let heldout = &prep.dataset.heldout;
            let tau = cfg.train.temperature;
            let pax = fused(PAXION, prep, &pcfg, &paxion);
            let rows: Vec<(&str, Result<_>)> = vec![
                (BACKBONE, zero_shot_classify(&backbone_model, None, bb, heldout, &cands, tau)),
                (
                    KP_DVDM,
                    zero_shot_classify(&patcher(KP_DVDM, prep, &pcfg, &paxion), None, bb, heldout, &cands, tau),
                ),
                (PAXION, zero_shot_classify(&pax, None, bb, heldout, &cands, tau)),
                (ENSEMBLE, zero_shot_classify(&pax, Some(&backbone_model), bb, heldout, &cands, tau)),
            ];
            for (tag, r) in rows {
                let r = r?;
                report.push(tag, "zero_shot", "accuracy", r.accuracy, r.n, seed, fp);
            }
            lap("zero-shot", &mut timings);
        }
    }
    Ok(SeedOutcome { seed, report, timings })
}

/// Median of a non-empty list.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-row medians over seeds; rows are matched on (model, task, metric).
pub fn median_report(outcomes: &[SeedOutcome], config_fp: u64) -> EvalReport {
    let mut out = EvalReport::default();
    let Some(first) = outcomes.first() else {
        return out;
    };
    for row in &first.report.rows {
        let vals: Vec<f64> = outcomes
            .iter()
            .filter_map(|o| o.report.value(&row.model_tag, &row.task, &row.metric))
            .collect();
        out.push(&row.model_tag, &row.task, &row.metric, median(&vals), row.n, 0, config_fp);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[0.3, 0.1, 0.2]), 0.2);
        assert_eq!(median(&[0.4, 0.1, 0.2, 0.3]), 0.25);
    }

    #[test]
    fn heldout_candidates_are_template_texts() {
        let cfg = ExperimentConfig::default();
        let bb = Backbone::new(&cfg.world, &cfg.backbone).unwrap();
        let c = heldout_candidates(&bb).unwrap();
        assert_eq!(c.len(), 4);
        assert!(c.iter().all(|t| t[0] == TEMPLATE_OBJECT));
    }

    #[test]
    fn saliency_tsv_has_one_row_per_scored_clip() {
        let mut cfg = ExperimentConfig::default();
        cfg.counts.train = 40;
        cfg.counts.eval = 20;
        cfg.counts.heldout = 8;
        let mut ds = build_dataset(&cfg.world, cfg.counts).unwrap();
        let bb = Backbone::new(&cfg.world, &cfg.backbone).unwrap();
        attach_saliency(&mut ds, &bb, GateThresholds::PAPER).unwrap();
        let tsv = saliency_tsv(&ds.train);
        assert_eq!(tsv.lines().count(), 41);
        assert!(tsv.starts_with(SALIENCY_HEADER));
    }
}
