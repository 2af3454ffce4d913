//! Patches action knowledge, then fuses it with the backbone on the full
//! annotation task and compares retrieval against the backbone alone.

use actpatch::config::ExperimentConfig;
use actpatch::harness::{eval_retrieval, retrieval_report, BackboneModel, EvalReport, FusedModel, Task};
use actpatch::suite::{prepare, BACKBONE, PAXION};
use actpatch::train::{train_downstream, train_patcher, Annotation, Mode};

fn main() -> actpatch::Result<()> {
    let cfg = ExperimentConfig::default();
    let prep = prepare(&cfg)?;
    let bb = &prep.backbone;
    let pcfg = cfg.train.patcher_config(bb);
    let kp = train_patcher(&cfg.train, &pcfg, &prep.train)?;
    let fused = train_downstream(&cfg.downstream(Mode::Fuse, Annotation::Full), &pcfg, &kp.params, &prep.train)?;
    let model = FusedModel { tag: PAXION.into(), backbone: bb, config: pcfg, params: &fused.params };
    let fp = cfg.fingerprint();
    let mut report = EvalReport::default();
    let r = eval_retrieval(&BackboneModel { backbone: bb }, bb, &prep.dataset.eval, Task::Full, &cfg.eval.ks)?;
    report.extend(retrieval_report(&r, BACKBONE, cfg.seed, fp));
    let r = eval_retrieval(&model, bb, &prep.dataset.eval, Task::Full, &cfg.eval.ks)?;
    report.extend(retrieval_report(&r, PAXION, cfg.seed, fp));
    print!("{}", report.to_markdown());
    Ok(())
}
