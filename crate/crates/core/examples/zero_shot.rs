//! Zero-shot classification of held-out actions with the backbone, the
//! fused model and their ensemble.

use actpatch::config::ExperimentConfig;
use actpatch::harness::{zero_shot_classify, BackboneModel, FusedModel};
use actpatch::suite::{heldout_candidates, prepare};
use actpatch::train::{train_downstream, train_patcher, Annotation, Mode};

fn main() -> actpatch::Result<()> {
    let cfg = ExperimentConfig::default();
    let prep = prepare(&cfg)?;
    let bb = &prep.backbone;
    let pcfg = cfg.train.patcher_config(bb);
    let kp = train_patcher(&cfg.train, &pcfg, &prep.train)?;
    let fused = train_downstream(&cfg.downstream(Mode::Fuse, Annotation::Full), &pcfg, &kp.params, &prep.train)?;
    let backbone = BackboneModel { backbone: bb };
    let paxion = FusedModel { tag: "paxion".into(), backbone: bb, config: pcfg, params: &fused.params };
    let cands = heldout_candidates(bb)?;
    let tau = cfg.train.temperature;
    let heldout = &prep.dataset.heldout;
    let rows = [
        ("backbone", zero_shot_classify(&backbone, None, bb, heldout, &cands, tau)?),
        ("fused", zero_shot_classify(&paxion, None, bb, heldout, &cands, tau)?),
        ("ensemble", zero_shot_classify(&paxion, Some(&backbone), bb, heldout, &cands, tau)?),
    ];
    for (name, r) in rows {
        println!("{name:9} accuracy {:.3} over {} clips", r.accuracy, r.n);
    }
    Ok(())
}
