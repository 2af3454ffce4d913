//! Procedural action world: toy clips of objects undergoing actions, their
//! annotations and the probe transforms (antonym, reversal, object swap).

mod dataset;
mod lexicon;

pub use dataset::{
    build_dataset, Dataset, DatasetManifest, ManifestRow, Probes, Split, SplitCounts,
};
pub use lexicon::{ActionEntry, ActionKind, ActionLexicon, Trajectory, POSE_CHANNELS, REST, SPEED_CHANNEL};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::objectives::SaliencyScore;
use crate::rng::{gaussian, fnv1a64, SeedTree};
use crate::tensor::Tensor;

pub const TEMPLATE_OBJECT: &str = "something";

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub num_objects: usize,
    pub frames_per_clip: usize,
    /// Width of the pose block (the object one-hot block is prepended).
    pub state_dim: usize,
    pub patches_per_frame: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub lexicon: ActionLexicon,
    /// Actions reserved for the held-out domain, by name.
    pub heldout_actions: Vec<String>,
    /// Each held-out action co-occurs with this many dedicated objects.
    pub heldout_objects_per_action: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_objects: 24,
            frames_per_clip: 8,
            state_dim: 12,
            patches_per_frame: 9,
            noise_std: 0.02,
            seed: 7,
            lexicon: ActionLexicon::default(),
            heldout_actions: ["spin-cw", "spin-ccw", "rotate-oscillate", "rest"]
                .map(String::from)
                .to_vec(),
            heldout_objects_per_action: 2,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.frames_per_clip;
        if n < 2 || !n.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "world.frames_per_clip must be even and >= 2, got {n}"
            )));
        }
        if self.patches_per_frame == 0 {
            return Err(Error::Config("world.patches_per_frame must be >= 1".into()));
        }
        if self.num_objects == 0 {
            return Err(Error::Config("world.num_objects must be >= 1".into()));
        }
        if self.state_dim < POSE_CHANNELS {
            return Err(Error::Config(format!(
                "world.state_dim must be >= {POSE_CHANNELS}, got {}",
                self.state_dim
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("world.noise_std must be >= 0".into()));
        }
        for name in &self.heldout_actions {
            self.lexicon.by_name(name)?;
        }
        if self.heldout_actions.len() * self.heldout_objects_per_action > self.num_objects {
            return Err(Error::Config(
                "held-out actions need more dedicated objects than exist".into(),
            ));
        }
        Ok(())
    }

    pub fn frame_width(&self) -> usize {
        self.num_objects + self.state_dim
    }

    /// Visual token count P.
    pub fn tokens_per_clip(&self) -> usize {
        self.frames_per_clip * self.patches_per_frame
    }

    pub fn object_name(&self, id: usize) -> String {
        format!("obj{id:02}")
    }

    pub fn heldout_action_ids(&self) -> Vec<usize> {
        self.heldout_actions
            .iter()
            .map(|n| self.lexicon.by_name(n).expect("validated").id)
            .collect()
    }

    pub fn in_domain_action_ids(&self) -> Vec<usize> {
        let held = self.heldout_action_ids();
        (0..self.lexicon.len()).filter(|a| !held.contains(a)).collect()
    }

    /// Objects that co-occur with the held-out action at `rank` in `heldout_actions`.
    pub fn heldout_objects(&self, rank: usize) -> Vec<usize> {
        let k = self.heldout_objects_per_action;
        let first = self.num_objects - self.heldout_actions.len() * k + rank * k;
        (first..first + k).collect()
    }

    pub fn canonical(&self) -> String {
        format!(
            "num_objects={};frames_per_clip={};state_dim={};patches_per_frame={};noise_std={:?};seed={};lexicon={};heldout_actions={};heldout_objects_per_action={}",
            self.num_objects,
            self.frames_per_clip,
            self.state_dim,
            self.patches_per_frame,
            self.noise_std,
            self.seed,
            self.lexicon
                .entries()
                .iter()
                .map(|e| e.name.as_str())
                .collect::<Vec<_>>()
                .join(","),
            self.heldout_actions.join(","),
            self.heldout_objects_per_action,
        )
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.canonical().as_bytes())
    }
}

/// One synthetic video.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipInstance {
    pub clip_id: String,
    pub object_id: usize,
    pub action_id: usize,
    pub kind: ActionKind,
    /// N × (num_objects + state_dim): object one-hot, then pose block.
    pub frames: Tensor,
    pub annotation: Vec<String>,
    pub template_annotation: Vec<String>,
    pub reversed: bool,
    pub split: Split,
    pub salient_gt: bool,
    pub instance_seed: u64,
    pub saliency: Option<SaliencyScore>,
}

impl ClipInstance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        self.frames.row(i)
    }
}

/// `2πk(t + ½)/N`, evaluated on the mirrored index for the second half so the
/// palindrome holds exactly in floating point.
fn oscillation_phase(cycles: usize, t: usize, n: usize) -> f64 {
    let t = t.min(n - 1 - t);
    2.0 * std::f64::consts::PI * cycles as f64 * (t as f64 + 0.5) / n as f64
}

fn pose_value(traj: Trajectory, channel: usize, t: usize, n: usize) -> f64 {
    match traj {
        Trajectory::Ramp {
            channel: c,
            start,
            end,
        } if c == channel => {
            // weighted form so that reversing a ramp reproduces its antonym bit for bit
            (start * (n - 1 - t) as f64 + end * t as f64) / (n - 1) as f64
        }
        Trajectory::Oscillate { channel: c, cycles } if c == channel => {
            REST + 0.5 * oscillation_phase(cycles, t, n).cos()
        }
        _ => REST,
    }
}

/// Magnitude of the pose velocity in channel units per clip, over 2π.
fn speed_value(traj: Trajectory, t: usize, n: usize) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    match traj {
        Trajectory::Ramp { start, end, .. } => (end - start).abs() / two_pi,
        Trajectory::Oscillate { cycles, .. } => {
            0.5 * cycles as f64 * oscillation_phase(cycles, t, n).sin().abs()
        }
        Trajectory::Hold => 0.0,
    }
}

/// Deterministic in every argument. Noise touches the pose block only.
pub fn generate_clip(
    config: &WorldConfig,
    object_id: usize,
    action_id: usize,
    instance_seed: u64,
) -> Result<ClipInstance> {
    if object_id >= config.num_objects {
        return Err(Error::Unknown {
            kind: "object id",
            name: object_id.to_string(),
        });
    }
    let action = config.lexicon.get(action_id)?;
    let n = config.frames_per_clip;
    let width = config.frame_width();
    let mut rng = SeedTree::new(config.seed)
        .child("clip-noise")
        .index(instance_seed)
        .rng();
    let mut data = vec![0.0; n * width];
    for t in 0..n {
        let row = &mut data[t * width..(t + 1) * width];
        row[object_id] = 1.0;
        let pose = &mut row[config.num_objects..];
        for (c, v) in pose.iter_mut().enumerate() {
            *v = if c == SPEED_CHANNEL {
                speed_value(action.trajectory, t, n)
            } else {
                pose_value(action.trajectory, c, t, n)
            };
        }
        if config.noise_std > 0.0 {
            for v in pose.iter_mut() {
                *v += config.noise_std * gaussian(&mut rng);
            }
        }
    }
    let object = config.object_name(object_id);
    Ok(ClipInstance {
        clip_id: format!("{object}-{}-{instance_seed}", action.name),
        object_id,
        action_id,
        kind: action.kind,
        frames: Tensor::matrix(n, width, data)?,
        annotation: vec![object, action.name.clone()],
        template_annotation: vec![TEMPLATE_OBJECT.into(), action.name.clone()],
        reversed: false,
        split: Split::Train,
        salient_gt: action.kind == ActionKind::Directional,
        instance_seed,
        saliency: None,
    })
}

/// Frames in reverse order with the reversal flag toggled.
pub fn reverse_clip(clip: &ClipInstance) -> ClipInstance {
    let n = clip.frames.rows();
    let w = clip.frames.cols();
    let mut data = Vec::with_capacity(n * w);
    for t in (0..n).rev() {
        data.extend_from_slice(clip.frames.row(t));
    }
    ClipInstance {
        frames: Tensor::matrix(n, w, data).expect("same shape"),
        reversed: !clip.reversed,
        ..clip.clone()
    }
}

/// Swaps the action token (last) of an annotation for its antonym.
pub fn antonym_annotation(lexicon: &ActionLexicon, tokens: &[String]) -> Result<Vec<String>> {
    let last = tokens
        .last()
        .ok_or_else(|| Error::NotApplicable("empty annotation".into()))?;
    let action = lexicon.by_name(last)?;
    let anti = action.antonym.ok_or_else(|| {
        Error::NotApplicable(format!("`{}` is {} and has no antonym", action.name, action.kind.name()))
    })?;
    let mut out = tokens.to_vec();
    *out.last_mut().expect("non-empty") = lexicon.get(anti)?.name.clone();
    Ok(out)
}

pub fn make_antonym_annotation(lexicon: &ActionLexicon, clip: &ClipInstance) -> Result<Vec<String>> {
    antonym_annotation(lexicon, &clip.annotation)
}

/// Replaces the object token with a uniformly drawn different object.
pub fn object_replace(
    config: &WorldConfig,
    clip: &ClipInstance,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>> {
    if config.num_objects < 2 {
        return Err(Error::NotApplicable(
            "object replacement needs at least two objects".into(),
        ));
    }
    let mut other = rng.random_range(0..config.num_objects - 1);
    if other >= clip.object_id {
        other += 1;
    }
    let mut out = clip.annotation.clone();
    out[0] = config.object_name(other);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> WorldConfig {
        WorldConfig {
            noise_std: 0.0,
            ..WorldConfig::default()
        }
    }

    fn id(cfg: &WorldConfig, name: &str) -> usize {
        cfg.lexicon.by_name(name).unwrap().id
    }

    #[test]
    fn fall_is_a_decreasing_ramp() {
        let cfg = noiseless();
        let clip = generate_clip(&cfg, 3, id(&cfg, "fall"), 11).unwrap();
        let vert: Vec<f64> = (0..8).map(|t| clip.frame(t)[cfg.num_objects]).collect();
        assert_eq!(vert[0], 1.0);
        assert!((vert[1] - 0.857_142_857_142_857_1).abs() < 1e-12);
        assert_eq!(vert[7], 0.0);
        assert!(vert.windows(2).all(|w| w[1] < w[0]));
        let rev = reverse_clip(&clip);
        let vert: Vec<f64> = (0..8).map(|t| rev.frame(t)[cfg.num_objects]).collect();
        assert!(vert.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn directional_channel_strictly_monotone_under_noise() {
        let cfg = WorldConfig::default();
        for e in cfg.lexicon.entries() {
            if let Trajectory::Ramp { channel, start, end } = e.trajectory {
                let clip = generate_clip(&cfg, 0, e.id, 5).unwrap();
                let v: Vec<f64> = (0..8).map(|t| clip.frame(t)[cfg.num_objects + channel]).collect();
                if end > start {
                    assert!(v.windows(2).all(|w| w[1] > w[0]), "{}", e.name);
                } else {
                    assert!(v.windows(2).all(|w| w[1] < w[0]), "{}", e.name);
                }
            }
        }
    }

    #[test]
    fn static_frames_identical_and_symmetric_palindromic() {
        let cfg = noiseless();
        let hold = generate_clip(&cfg, 1, id(&cfg, "hold"), 2).unwrap();
        for t in 1..8 {
            assert_eq!(hold.frame(t), hold.frame(0));
        }
        assert_eq!(reverse_clip(&hold).frames, hold.frames);
        for name in ["shake", "wiggle", "rotate-oscillate", "bounce-in-place"] {
            let c = generate_clip(&cfg, 1, id(&cfg, name), 2).unwrap();
            assert_eq!(reverse_clip(&c).frames, c.frames, "{name}");
            assert_ne!(c.frame(0), c.frame(1), "{name} should move");
        }
    }

    #[test]
    fn antonym_clip_is_time_reversal() {
        let cfg = noiseless();
        for e in cfg.lexicon.entries() {
            if let Some(a) = e.antonym {
                let c = generate_clip(&cfg, 4, e.id, 9).unwrap();
                let anti = generate_clip(&cfg, 4, a, 9).unwrap();
                assert_eq!(reverse_clip(&c).frames, anti.frames, "{}", e.name);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_one_hot_exact() {
        let cfg = WorldConfig::default();
        let a = generate_clip(&cfg, 5, 0, 42).unwrap();
        let b = generate_clip(&cfg, 5, 0, 42).unwrap();
        assert_eq!(a, b);
        for t in 0..8 {
            let f = a.frame(t);
            assert_eq!(f[5], 1.0);
            assert_eq!(f[..cfg.num_objects].iter().sum::<f64>(), 1.0);
        }
        assert!(generate_clip(&cfg, 24, 0, 1).is_err());
        assert!(generate_clip(&cfg, 0, 26, 1).is_err());
    }

    #[test]
    fn reversal_is_an_involution() {
        let cfg = WorldConfig::default();
        let c = generate_clip(&cfg, 2, 7, 3).unwrap();
        let r = reverse_clip(&c);
        assert!(r.reversed);
        assert_eq!(reverse_clip(&r), c);
    }

    #[test]
    fn antonym_annotation_examples() {
        let cfg = noiseless();
        let lex = &cfg.lexicon;
        let book: Vec<String> = vec!["book".into(), "fall".into()];
        assert_eq!(antonym_annotation(lex, &book).unwrap(), vec!["book", "rise"]);
        let cup: Vec<String> = vec!["cup".into(), "open".into()];
        assert_eq!(antonym_annotation(lex, &cup).unwrap(), vec!["cup", "close"]);
        let twice = antonym_annotation(lex, &antonym_annotation(lex, &book).unwrap()).unwrap();
        assert_eq!(twice, book);
        let shake = generate_clip(&cfg, 0, id(&cfg, "shake"), 0).unwrap();
        assert!(matches!(
            make_antonym_annotation(lex, &shake),
            Err(Error::NotApplicable(_))
        ));
    }

    #[test]
    fn object_replacement_changes_only_the_object() {
        let cfg = WorldConfig::default();
        let clip = generate_clip(&cfg, 3, 0, 1).unwrap();
        let mut rng = SeedTree::new(1).rng();
        for _ in 0..200 {
            let r = object_replace(&cfg, &clip, &mut rng).unwrap();
            assert_ne!(r[0], clip.annotation[0]);
            assert_eq!(r[1], clip.annotation[1]);
        }
        let two = WorldConfig {
            num_objects: 2,
            heldout_actions: vec![],
            ..WorldConfig::default()
        };
        let c = generate_clip(&two, 1, 0, 1).unwrap();
        assert_eq!(object_replace(&two, &c, &mut rng).unwrap()[0], "obj00");
        let one = WorldConfig {
            num_objects: 1,
            heldout_actions: vec![],
            ..WorldConfig::default()
        };
        let c = generate_clip(&one, 0, 0, 1).unwrap();
        assert!(object_replace(&one, &c, &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = WorldConfig {
            frames_per_clip: 7,
            ..WorldConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(WorldConfig::default().validate().is_ok());
        assert_eq!(WorldConfig::default().heldout_objects(0), vec![16, 17]);
        assert_eq!(WorldConfig::default().heldout_objects(3), vec![22, 23]);
    }
}
