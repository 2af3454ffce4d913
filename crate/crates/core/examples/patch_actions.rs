//! Trains the knowledge patcher with and without the dynamics objectives and
//! compares the probe scores.

use actpatch::config::ExperimentConfig;
use actpatch::harness::{bench_report, Head, PatcherModel};
use actpatch::suite::{prepare, KP_DVDM, KP_VTC};
use actpatch::train::{train_patcher, Objectives, TrainConfig};

fn main() -> actpatch::Result<()> {
    let cfg = ExperimentConfig::default();
    let prep = prepare(&cfg)?;
    let pcfg = cfg.train.patcher_config(&prep.backbone);
    for (tag, objectives) in [(KP_VTC, Objectives::VTC), (KP_DVDM, Objectives::ALL)] {
        let tc = TrainConfig { objectives, ..cfg.train.clone() };
        let trained = train_patcher(&tc, &pcfg, &prep.train)?;
        if let Some((step, last)) = trained.record.log.last() {
            println!("{tag}: step {step}, vtc {:.3}, vac {:.3}, atm {:.3}", last.vtc, last.vac, last.atm);
        }
        let model = PatcherModel {
            tag: tag.into(),
            backbone: &prep.backbone,
            config: pcfg.clone(),
            params: &trained.params,
            head: Head::MaxTokens,
        };
        let r = bench_report(&model, &prep.backbone, &prep.dataset.eval, &prep.dataset.probes, tc.seed, cfg.fingerprint())?;
        print!("{}", r.to_markdown());
    }
    Ok(())
}
