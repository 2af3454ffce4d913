//! Experiment configuration: `[section]` headers with `key = value` lines,
//! dotted overrides, and a fingerprint over the effective settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::harness::{Head, Task};
use crate::objectives::GatePreset;
use crate::patcher::Variant;
use crate::rng::fnv1a64;
use crate::tensor::OptimPreset;
use crate::train::{Annotation, Mode, Objectives, TrainConfig};
use crate::world::{SplitCounts, WorldConfig};

/// Every accepted key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "1"),
    ("world.num_objects", "24"),
    ("world.frames_per_clip", "8"),
    ("world.state_dim", "12"),
    ("world.patches_per_frame", "9"),
    ("world.noise_std", "0.02"),
    ("world.seed", "7"),
    ("world.heldout_actions", "spin-cw,spin-ccw,rotate-oscillate,rest"),
    ("world.heldout_objects_per_action", "2"),
    ("data.train", "9600"),
    ("data.eval", "600"),
    ("data.heldout", "200"),
    ("data.max_repeats", "32"),
    ("backbone.embed_dim", "48"),
    ("backbone.joint_dim", "32"),
    ("backbone.epsilon", "0.05"),
    ("backbone.dir_scale", "1.0"),
    ("backbone.pose_gain", "2.0"),
    ("backbone.energy_gain", "4.0"),
    ("backbone.patch_jitter", "0.5"),
    ("backbone.heldout_jitter", "1.0"),
    ("backbone.seed", "11"),
    ("train.objectives", "vtc,vac,atm"),
    ("train.variant", "perceiver"),
    ("train.mode", "none"),
    ("train.epochs", "3"),
    ("train.downstream_epochs", "2"),
    ("train.batch_size", "32"),
    ("train.temperature", "0.05"),
    ("train.lambda_vac", "1.0"),
    ("train.lambda_atm", "1.0"),
    ("train.annotation", "full"),
    ("train.latents", "8"),
    ("train.heads", "1"),
    ("train.max_clips", "0"),
    ("train.downstream_clips", "1200"),
    ("train.checkpoint", ""),
    ("optim.preset", "desk"),
    ("optim.lr", ""),
    ("gate.preset", "desk"),
    ("gate.calibration_draws", "200"),
    ("eval.checkpoint", ""),
    ("eval.head", "max"),
    ("eval.ks", "1,5"),
    ("eval.tasks", "full,template,temporal"),
    ("suite.seeds", "1,2,3"),
];

/// Raw key/value settings in file order, before typing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    DEFAULTS.iter().any(|(k, _)| *k == key)
}

impl RawConfig {
    /// Parses the config text. Keys outside a section are top-level.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header `{line}`")))?
                    .trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(err(format!("bad section name `{name}`")));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(err("empty key".into()));
            }
            let key = if section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            if !known(&key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not `key=value`")))?;
        let k = k.trim();
        if !known(k) {
            return Err(Error::Unknown {
                kind: "config key",
                name: k.to_string(),
            });
        }
        self.values.insert(k.to_string(), v.trim().to_string());
        Ok(())
    }

    fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| {
            DEFAULTS
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .expect("key listed in DEFAULTS")
        })
    }

    /// All keys with their effective values, one `key = value` per line, sorted.
    pub fn effective(&self) -> String {
        let mut keys: Vec<&str> = DEFAULTS.iter().map(|(k, _)| *k).collect();
        keys.sort_unstable();
        let mut s = String::new();
        for k in keys {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(self.get(k));
            s.push('\n');
        }
        s
    }
}

fn parse_num<T: std::str::FromStr>(raw: &RawConfig, key: &str) -> Result<T> {
    let v = raw.get(key);
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(raw: &RawConfig, key: &str) -> Result<Vec<T>> {
    raw.get(key)
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{s}`")))
        })
        .collect()
}

fn opt_path(raw: &RawConfig, key: &str) -> Option<PathBuf> {
    let v = raw.get(key);
    (!v.is_empty()).then(|| PathBuf::from(v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub head: Head,
    pub ks: Vec<usize>,
    pub tasks: Vec<Task>,
}

/// Fully typed configuration of every command.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub counts: SplitCounts,
    pub backbone: BackboneConfig,
    /// Patching run settings; downstream runs derive from it.
    pub train: TrainConfig,
    pub downstream_epochs: usize,
    pub downstream_clips: usize,
    pub input_checkpoint: Option<PathBuf>,
    pub gate: GatePreset,
    pub calibration_draws: usize,
    pub eval: EvalConfig,
    pub suite_seeds: Vec<u64>,
    effective: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_raw(&RawConfig::default()).expect("defaults are valid")
    }
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let seed: u64 = parse_num(raw, "seed")?;
        let world = WorldConfig {
            num_objects: parse_num(raw, "world.num_objects")?,
            frames_per_clip: parse_num(raw, "world.frames_per_clip")?,
            state_dim: parse_num(raw, "world.state_dim")?,
            patches_per_frame: parse_num(raw, "world.patches_per_frame")?,
            noise_std: parse_num(raw, "world.noise_std")?,
            seed: parse_num(raw, "world.seed")?,
            heldout_actions: parse_list(raw, "world.heldout_actions")?,
            heldout_objects_per_action: parse_num(raw, "world.heldout_objects_per_action")?,
            ..WorldConfig::default()
        };
        world.validate()?;
        let counts = SplitCounts {
            train: parse_num(raw, "data.train")?,
            eval: parse_num(raw, "data.eval")?,
            heldout: parse_num(raw, "data.heldout")?,
            max_repeats: parse_num(raw, "data.max_repeats")?,
        };
        let backbone = BackboneConfig {
            embed_dim: parse_num(raw, "backbone.embed_dim")?,
            joint_dim: parse_num(raw, "backbone.joint_dim")?,
            epsilon: parse_num(raw, "backbone.epsilon")?,
            dir_scale: parse_num(raw, "backbone.dir_scale")?,
            pose_gain: parse_num(raw, "backbone.pose_gain")?,
            energy_gain: parse_num(raw, "backbone.energy_gain")?,
            patch_jitter: parse_num(raw, "backbone.patch_jitter")?,
            heldout_jitter: parse_num(raw, "backbone.heldout_jitter")?,
            seed: parse_num(raw, "backbone.seed")?,
        };
        backbone.validate()?;
        let lr = raw.get("optim.lr");
        let train = TrainConfig {
            objectives: Objectives::parse(raw.get("train.objectives"))?,
            variant: Variant::parse(raw.get("train.variant")).map_err(|e| Error::Config(format!("train.variant: {e}")))?,
            mode: Mode::parse(raw.get("train.mode"))?,
            epochs: parse_num(raw, "train.epochs")?,
            batch_size: parse_num(raw, "train.batch_size")?,
            optim: OptimPreset::parse(raw.get("optim.preset"))?,
            lr: if lr.is_empty() { None } else { Some(parse_num(raw, "optim.lr")?) },
            seed,
            temperature: parse_num(raw, "train.temperature")?,
            lambda_vac: parse_num(raw, "train.lambda_vac")?,
            lambda_atm: parse_num(raw, "train.lambda_atm")?,
            annotation: Annotation::parse(raw.get("train.annotation"))?,
            latents: parse_num(raw, "train.latents")?,
            heads: parse_num(raw, "train.heads")?,
            max_clips: parse_num(raw, "train.max_clips")?,
        };
        train.validate()?;
        let head = match raw.get("eval.head") {
            "max" => Head::MaxTokens,
            "mean" => Head::MeanPooled,
            other => return Err(Error::Config(format!("eval.head: expected max|mean, got `{other}`"))),
        };
        let ks: Vec<usize> = parse_list(raw, "eval.ks")?;
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::Config("eval.ks must list positive ranks".into()));
        }
        let tasks = raw
            .get("eval.tasks")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| Task::parse(s).map_err(|_| Error::Config(format!("eval.tasks: unknown task `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        let suite_seeds: Vec<u64> = parse_list(raw, "suite.seeds")?;
        if suite_seeds.is_empty() {
            return Err(Error::Config("suite.seeds must list at least one seed".into()));
        }
        Ok(Self {
            seed,
            world,
            counts,
            backbone,
            train,
            downstream_epochs: parse_num(raw, "train.downstream_epochs")?,
            downstream_clips: parse_num(raw, "train.downstream_clips")?,
            input_checkpoint: opt_path(raw, "train.checkpoint"),
            gate: GatePreset::parse(raw.get("gate.preset")).map_err(|_| {
                Error::Config(format!("gate.preset: expected paper|desk, got `{}`", raw.get("gate.preset")))
            })?,
            calibration_draws: parse_num(raw, "gate.calibration_draws")?,
            eval: EvalConfig {
                checkpoint: opt_path(raw, "eval.checkpoint"),
                head,
                ks,
                tasks,
            },
            suite_seeds,
            effective: raw.effective(),
        })
    }

    /// Reads `path` and applies the overrides in order; the last one wins.
    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut raw = RawConfig::read(path)?;
        for o in overrides {
            raw.set(o)?;
        }
        if let Some(s) = seed {
            raw.set(&format!("seed={s}"))?;
        }
        Self::from_raw(&raw)
    }

    /// Effective settings as `key = value` lines.
    pub fn effective(&self) -> &str {
        &self.effective
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.effective.as_bytes())
    }

    /// The downstream variant of the patching settings.
    pub fn downstream(&self, mode: Mode, annotation: Annotation) -> TrainConfig {
        TrainConfig {
            mode,
            annotation,
            epochs: self.downstream_epochs,
            max_clips: self.downstream_clips,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_desk_setup() {
        let c = ExperimentConfig::default();
        assert_eq!(c.world, WorldConfig::default());
        assert_eq!(c.backbone, BackboneConfig::default());
        assert_eq!(c.train.objectives, Objectives::ALL);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.downstream_epochs, 2);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.optim, OptimPreset::Desk);
        assert_eq!(c.gate, GatePreset::Desk);
        assert_eq!(c.suite_seeds, vec![1, 2, 3]);
    }

    #[test]
    fn sections_comments_and_top_level_keys() {
        let raw = RawConfig::parse(
            "seed = 5 # trailing\n\n[train]\nobjectives = vtc\nepochs = 1\n[world]\nnoise_std = 0.0\n",
        )
        .unwrap();
        let c = ExperimentConfig::from_raw(&raw).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.train.seed, 5);
        assert_eq!(c.train.objectives, Objectives::VTC);
        assert_eq!(c.train.epochs, 1);
        assert_eq!(c.world.noise_std, 0.0);
    }

    #[test]
    fn unknown_keys_and_bad_lines_are_rejected() {
        assert!(matches!(
            RawConfig::parse("[train]\nepochz = 3\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(RawConfig::parse("[train\n").is_err());
        assert!(RawConfig::parse("just words\n").is_err());
        let mut raw = RawConfig::default();
        assert!(raw.set("train.nope=1").unwrap_err().is_validation());
        assert!(raw.set("no equals sign").is_err());
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut raw = RawConfig::default();
        raw.set("train.epochs=three").unwrap();
        assert!(ExperimentConfig::from_raw(&raw).unwrap_err().is_validation());
        let mut raw = RawConfig::default();
        raw.set("train.variant=lstm").unwrap();
        assert!(ExperimentConfig::from_raw(&raw).unwrap_err().is_validation());
        let mut raw = RawConfig::default();
        raw.set("world.heldout_actions=teleport").unwrap();
        assert!(ExperimentConfig::from_raw(&raw).unwrap_err().is_validation());
    }

    #[test]
    fn last_override_wins_and_fingerprint_tracks_values() {
        let mut raw = RawConfig::default();
        let base = ExperimentConfig::from_raw(&raw).unwrap().fingerprint();
        raw.set("train.epochs=1").unwrap();
        raw.set("train.epochs=3").unwrap();
        let same = ExperimentConfig::from_raw(&raw).unwrap();
        assert_eq!(same.train.epochs, 3);
        assert_eq!(same.fingerprint(), base);
        raw.set("train.epochs=4").unwrap();
        assert_ne!(ExperimentConfig::from_raw(&raw).unwrap().fingerprint(), base);
    }

    #[test]
    fn effective_config_reparses_to_the_same_config() {
        let mut raw = RawConfig::default();
        raw.set("optim.lr=0.002").unwrap();
        let c = ExperimentConfig::from_raw(&raw).unwrap();
        let again = ExperimentConfig::from_raw(&RawConfig::parse(c.effective()).unwrap()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.train.lr, Some(0.002));
    }
}
