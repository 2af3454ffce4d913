//! Action-knowledge probes on the frozen backbone: object recognition passes,
//! antonym and reversal probes sit at chance.

use actpatch::config::ExperimentConfig;
use actpatch::harness::{bench_report, BackboneModel};
use actpatch::suite::build_world;

fn main() -> actpatch::Result<()> {
    let cfg = ExperimentConfig::default();
    let (ds, bb, _) = build_world(&cfg)?;
    let r = bench_report(&BackboneModel { backbone: &bb }, &bb, &ds.eval, &ds.probes, cfg.seed, cfg.fingerprint())?;
    print!("{}", r.to_markdown());
    Ok(())
}
