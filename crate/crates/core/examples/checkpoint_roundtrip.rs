//! Saves a freshly initialised patcher as a PAXL checkpoint, reloads it and
//! shows that a flipped byte is rejected.

use actpatch::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use actpatch::config::ExperimentConfig;
use actpatch::suite::prepare;
use actpatch::train::{checkpoint_tensors, model_from_tensors, train_patcher, Mode, TrainConfig};

fn main() -> actpatch::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.counts.train = 64;
    cfg.counts.eval = 32;
    cfg.counts.heldout = 8;
    let prep = prepare(&cfg)?;
    let pcfg = cfg.train.patcher_config(&prep.backbone);
    let tc = TrainConfig { epochs: 0, ..cfg.train.clone() };
    let params = train_patcher(&tc, &pcfg, &prep.train)?.params;
    let tensors = checkpoint_tensors(&params, &pcfg, Mode::None, cfg.fingerprint());

    let path = std::env::temp_dir().join("actpatch-example.paxl");
    save_checkpoint(&tensors, &path)?;
    let loaded = load_checkpoint(&path)?;
    let bytes = encode(&tensors)?;
    println!("{} tensors, {} bytes, matches file: {}", loaded.len(), bytes.len(), encode(&loaded)? == bytes);
    let model = model_from_tensors(loaded)?;
    println!("mode {}, config fingerprint {:016x}", model.mode.name(), model.config_fp);

    let mut corrupt = bytes.clone();
    corrupt[bytes.len() / 2] ^= 1;
    match decode(&corrupt) {
        Err(e) => println!("corrupt copy rejected: {e}"),
        Ok(_) => println!("corrupt copy accepted"),
    }
    let _ = std::fs::remove_file(&path);
    Ok(())
}
