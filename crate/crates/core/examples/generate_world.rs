//! Builds the synthetic action world, scores saliency and prints a split summary.

use actpatch::config::ExperimentConfig;
use actpatch::suite::build_world;
use actpatch::world::ActionKind;

fn main() -> actpatch::Result<()> {
    let cfg = ExperimentConfig::default();
    let (ds, _, th) = build_world(&cfg)?;
    println!("gate thresholds: delta {:.4}, theta {:.2}", th.delta, th.theta);
    for (name, clips) in [("train", &ds.train), ("eval", &ds.eval), ("heldout", &ds.heldout)] {
        let count = |k| clips.iter().filter(|c| c.kind == k).count();
        let gated = clips.iter().filter(|c| c.saliency.is_some_and(|s| s.gated)).count();
        println!(
            "{name:8} {:5} clips: static {:4}, directional {:4}, symmetric {:4}, gated {gated}",
            clips.len(),
            count(ActionKind::Static),
            count(ActionKind::Directional),
            count(ActionKind::Symmetric),
        );
    }
    let c = &ds.train[0];
    println!("first clip {}: {:?}, frames {:?}", c.clip_id, c.annotation, c.frames.shape());
    println!("manifest rows: {}", ds.manifest.to_tsv().lines().count() - 1);
    Ok(())
}
