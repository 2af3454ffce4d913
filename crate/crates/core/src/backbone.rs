//! Frozen mock video-language encoder.
//!
//! Each frame is lifted to a feature vector `[object one-hot; g·(pose − rest); h·(pose − rest)²]`
//! and mapped to `patches_per_frame` tokens by per-patch projections `A + Δ_p` with
//! `Σ_p Δ_p = 0`. The pooled visual feature is the projected token mean, so it sees the
//! object and the direction-free motion energy of a clip but nothing about frame order.
//! Action words embed the same direction-free signature plus a small `±ε·dir` term shared
//! by antonym pairs, which keeps antonyms nearly collinear in text space.

use std::collections::BTreeMap;

use crate::checkpoint::NamedTensors;
use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, SeedTree};
use crate::tensor::{cosine, dot, l2_normalize, matmul, param_hash, ParamSet, Tensor};
use crate::world::{
    generate_clip, ClipInstance, Split, Trajectory, WorldConfig, REST, SPEED_CHANNEL, TEMPLATE_OBJECT,
};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Token width D.
    pub embed_dim: usize,
    /// Joint embedding width d.
    pub joint_dim: usize,
    pub epsilon: f64,
    pub dir_scale: f64,
    pub pose_gain: f64,
    pub energy_gain: f64,
    /// Scale of the per-patch deviations Δ_p for the training domain.
    pub patch_jitter: f64,
    /// Scale of the alternate deviations used to render the held-out domain.
    pub heldout_jitter: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            embed_dim: 48,
            joint_dim: 32,
            epsilon: 0.05,
            dir_scale: 1.0,
            pose_gain: 2.0,
            energy_gain: 4.0,
            patch_jitter: 0.5,
            heldout_jitter: 1.0,
            seed: 11,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.joint_dim == 0 {
            return Err(Error::Config("backbone dims must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("backbone.epsilon must be > 0".into()));
        }
        for (k, v) in [
            ("dir_scale", self.dir_scale),
            ("pose_gain", self.pose_gain),
            ("energy_gain", self.energy_gain),
            ("patch_jitter", self.patch_jitter),
            ("heldout_jitter", self.heldout_jitter),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("backbone.{k} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        format!(
            "embed_dim={};joint_dim={};epsilon={:?};dir_scale={:?};pose_gain={:?};energy_gain={:?};patch_jitter={:?};heldout_jitter={:?};seed={}",
            self.embed_dim,
            self.joint_dim,
            self.epsilon,
            self.dir_scale,
            self.pose_gain,
            self.energy_gain,
            self.patch_jitter,
            self.heldout_jitter,
            self.seed
        )
    }
}

/// Output of [`Backbone::encode_clip`].
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneEncoding {
    /// P×D, ordered by (frame, patch).
    pub visual_tokens: Tensor,
    /// Unit d-vector.
    pub pooled_visual: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    world: WorldConfig,
    /// D×F shared projection.
    base: Tensor,
    /// Per-patch deviations, training rendering.
    deltas: Vec<Tensor>,
    /// Per-patch deviations, held-out rendering.
    deltas_alt: Vec<Tensor>,
    /// d×D; used for both the visual and the text side.
    proj: Tensor,
    vocab: BTreeMap<String, Vec<f64>>,
}

fn gaussian_matrix(tree: SeedTree, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = gaussian_vec(&mut tree.rng(), rows * cols, std);
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

fn zero_sum_deltas(tree: SeedTree, count: usize, rows: usize, cols: usize, std: f64) -> Vec<Tensor> {
    let mut ds: Vec<Tensor> = (0..count)
        .map(|p| gaussian_matrix(tree.index(p as u64), rows, cols, std))
        .collect();
    let mut mean = vec![0.0; rows * cols];
    for d in &ds {
        for (m, v) in mean.iter_mut().zip(d.data()) {
            *m += v / count as f64;
        }
    }
    for d in &mut ds {
        for (v, m) in d.data_mut().iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    ds
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| dot(m.row(i), v)).collect()
}

/// Sum of each column over rows, accumulated in sorted order so that any
/// permutation of the rows gives a bit-identical result.
fn sorted_column_mean(t: &Tensor) -> Vec<f64> {
    let (m, n) = (t.rows(), t.cols());
    (0..n)
        .map(|j| {
            let mut col: Vec<f64> = (0..m).map(|i| t.data()[i * n + j]).collect();
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / m as f64
        })
        .collect()
}

/// Random orthogonal n×n matrix (Gram–Schmidt on a Gaussian draw).
fn random_orthogonal(tree: SeedTree, n: usize) -> Tensor {
    let g = gaussian_vec(&mut tree.rng(), n * n, 1.0);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v: Vec<f64> = (0..n).map(|i| g[i * n + j]).collect();
        for _ in 0..2 {
            for c in &cols {
                let p = dot(c, &v);
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= p * y);
            }
        }
        cols.push(l2_normalize(&v).expect("Gaussian draw is full rank"));
    }
    let data = (0..n).flat_map(|i| cols.iter().map(move |c| c[i])).collect();
    Tensor::matrix(n, n, data).expect("square")
}

fn transpose(t: &Tensor) -> Tensor {
    let (m, n) = (t.rows(), t.cols());
    let data = (0..n)
        .flat_map(|j| (0..m).map(move |i| (i, j)))
        .map(|(i, j)| t.data()[i * n + j])
        .collect();
    Tensor::matrix(n, m, data).expect("same size")
}

impl Backbone {
    /// Before the random rotations, token space splits into a content block
    /// (objects and motion energy) and a pose block carrying the centered pose
    /// linearly; the projection maps the pose block isometrically onto its own
    /// joint-space block. Rotations in both spaces hide the layout but keep
    /// the pose block orthogonal to everything else.
    pub fn new(world: &WorldConfig, config: &BackboneConfig) -> Result<Self> {
        world.validate()?;
        config.validate()?;
        let dd = config.embed_dim;
        let m = world.state_dim;
        if dd <= m || config.joint_dim <= m {
            return Err(Error::Config(format!(
                "backbone embed_dim ({dd}) and joint_dim ({}) must exceed world.state_dim ({m})",
                config.joint_dim
            )));
        }
        let k = world.num_objects;
        let f = k + 2 * m;
        let content = dd - m;
        let joint_content = config.joint_dim - m;
        let tree = SeedTree::new(config.seed).child("backbone");

        let content_std = 1.0 / (content as f64).sqrt();
        let draws = gaussian_vec(&mut tree.child("base").rng(), content * (k + m), content_std);
        let mut base_pre = vec![0.0; dd * f];
        for i in 0..content {
            for (j, col) in (0..k).chain(k + m..f).enumerate() {
                base_pre[i * f + col] = draws[i * (k + m) + j];
            }
        }
        for c in 0..m {
            base_pre[(content + c) * f + k + c] = 1.0;
        }
        let draws = gaussian_vec(&mut tree.child("proj").rng(), joint_content * content, content_std);
        let mut proj_pre = vec![0.0; config.joint_dim * dd];
        for i in 0..joint_content {
            proj_pre[i * dd..i * dd + content].copy_from_slice(&draws[i * content..(i + 1) * content]);
        }
        for c in 0..m {
            proj_pre[(joint_content + c) * dd + content + c] = 1.0;
        }
        let rot_tokens = random_orthogonal(tree.child("rotate-tokens"), dd);
        let rot_joint = random_orthogonal(tree.child("rotate-joint"), config.joint_dim);
        let base = matmul(&rot_tokens, &Tensor::matrix(dd, f, base_pre)?)?;
        let proj = matmul(
            &matmul(&rot_joint, &Tensor::matrix(config.joint_dim, dd, proj_pre)?)?,
            &transpose(&rot_tokens),
        )?;

        let unit = 1.0 / (dd as f64).sqrt();
        let np = world.patches_per_frame;
        let deltas = zero_sum_deltas(tree.child("patch"), np, dd, f, unit * config.patch_jitter);
        let deltas_alt =
            zero_sum_deltas(tree.child("patch-heldout"), np, dd, f, unit * config.heldout_jitter);

        let column = |t: &Tensor, j: usize| -> Vec<f64> { (0..dd).map(|i| t.data()[i * f + j]).collect() };
        let mut vocab = BTreeMap::new();
        let mut something = vec![0.0; dd];
        for o in 0..k {
            let col = column(&base, o);
            something.iter_mut().zip(&col).for_each(|(s, c)| *s += c / k as f64);
            vocab.insert(world.object_name(o), col);
        }
        vocab.insert(TEMPLATE_OBJECT.to_string(), something);

        let mut bb = Self {
            config: config.clone(),
            world: world.clone(),
            base,
            deltas,
            deltas_alt,
            proj,
            vocab: BTreeMap::new(),
        };
        let clean = WorldConfig {
            noise_std: 0.0,
            ..world.clone()
        };
        for e in world.lexicon.entries() {
            let clip = generate_clip(&clean, 0, e.id, 0)?;
            let mut mean_feat = vec![0.0; f];
            for t in 0..clip.num_frames() {
                for (acc, v) in mean_feat.iter_mut().zip(bb.features(clip.frame(t))) {
                    *acc += v / clip.num_frames() as f64;
                }
            }
            // the action word carries the clip's direction-free signature, not the object
            mean_feat[..k].iter_mut().for_each(|v| *v = 0.0);
            let mut emb = matvec(&bb.base, &mean_feat);
            if let (Some(_), Trajectory::Ramp { channel, start, end }) = (e.antonym, e.trajectory) {
                // the direction word points along the pose axis it moves, signed by travel
                let axis = column(&bb.base, k + channel);
                let sign = (end - start).signum();
                for (x, u) in emb.iter_mut().zip(&axis) {
                    *x += sign * config.epsilon * config.dir_scale * u;
                }
            }
            vocab.insert(e.name.clone(), emb);
        }
        bb.vocab = vocab;
        Ok(bb)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn world(&self) -> &WorldConfig {
        &self.world
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn joint_dim(&self) -> usize {
        self.config.joint_dim
    }

    pub fn tokens_per_clip(&self) -> usize {
        self.world.tokens_per_clip()
    }

    /// Lifted frame features `[one-hot; g·c; h·c²]` with `c = pose − rest`.
    pub fn features(&self, frame: &[f64]) -> Vec<f64> {
        let k = self.world.num_objects;
        let m = self.world.state_dim;
        let mut out = Vec::with_capacity(k + 2 * m);
        out.extend_from_slice(&frame[..k]);
        let centered: Vec<f64> = frame[k..]
            .iter()
            .enumerate()
            .map(|(c, v)| if c == SPEED_CHANNEL { *v } else { v - REST })
            .collect();
        out.extend(centered.iter().map(|c| self.config.pose_gain * c));
        out.extend(centered.iter().map(|c| self.config.energy_gain * c * c));
        out
    }

    /// Word embedding (D-vector) of one token.
    pub fn token_embedding(&self, token: &str) -> Result<&[f64]> {
        self.vocab
            .get(token)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Unknown {
                kind: "token",
                name: token.to_string(),
            })
    }

    /// Sum of token embeddings, projected to d and L2-normalized.
    pub fn encode_text(&self, tokens: &[String]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::NotApplicable("empty annotation".into()));
        }
        let mut sum = vec![0.0; self.embed_dim()];
        for tok in tokens {
            for (s, v) in sum.iter_mut().zip(self.token_embedding(tok)?) {
                *s += v;
            }
        }
        l2_normalize(&matvec(&self.proj, &sum))
    }

    fn check_frames(&self, clip: &ClipInstance) -> Result<()> {
        let w = self.world.frame_width();
        if clip.frames.rank() != 2 || clip.frames.cols() != w {
            return Err(Error::Shape {
                op: "encode_clip",
                left: clip.frames.shape().to_vec(),
                right: vec![self.world.frames_per_clip, w],
            });
        }
        Ok(())
    }

    pub fn encode_clip(&self, clip: &ClipInstance) -> Result<BackboneEncoding> {
        self.check_frames(clip)?;
        let deltas = if clip.split == Split::HeldoutDomain {
            &self.deltas_alt
        } else {
            &self.deltas
        };
        let dd = self.embed_dim();
        let n = clip.num_frames();
        let np = deltas.len();
        let mut data = Vec::with_capacity(n * np * dd);
        for t in 0..n {
            let phi = self.features(clip.frame(t));
            let shared = matvec(&self.base, &phi);
            for d in deltas {
                let dev = matvec(d, &phi);
                data.extend(shared.iter().zip(&dev).map(|(a, b)| a + b));
            }
        }
        let visual_tokens = Tensor::matrix(n * np, dd, data)?;
        let mean = sorted_column_mean(&visual_tokens);
        let pooled_visual = l2_normalize(&matvec(&self.proj, &mean))?;
        Ok(BackboneEncoding {
            visual_tokens,
            pooled_visual,
        })
    }

    /// Per-frame unit d-vectors used by the saliency scores.
    pub fn frame_encodings(&self, clip: &ClipInstance) -> Result<Vec<Vec<f64>>> {
        self.check_frames(clip)?;
        (0..clip.num_frames())
            .map(|t| {
                let phi = self.features(clip.frame(t));
                l2_normalize(&matvec(&self.proj, &matvec(&self.base, &phi)))
            })
            .collect()
    }

    /// Cosine of a pooled visual and a text embedding.
    pub fn similarity(&self, v: &[f64], t: &[f64]) -> Result<f64> {
        cosine(v, t)
    }

    /// Every fixed tensor, with the `backbone.` prefix used in checkpoints.
    pub fn tensors(&self) -> NamedTensors {
        let mut out: NamedTensors = vec![
            ("backbone.base".into(), self.base.clone()),
            ("backbone.text_proj".into(), self.proj.clone()),
            ("backbone.visual_proj".into(), self.proj.clone()),
            ("backbone.epsilon".into(), Tensor::scalar(self.config.epsilon)),
        ];
        for (p, d) in self.deltas.iter().enumerate() {
            out.push((format!("backbone.patch_delta.{p}"), d.clone()));
        }
        for (p, d) in self.deltas_alt.iter().enumerate() {
            out.push((format!("backbone.patch_delta_heldout.{p}"), d.clone()));
        }
        for (tok, emb) in &self.vocab {
            out.push((format!("backbone.token.{tok}"), Tensor::vector(emb.clone())));
        }
        out
    }

    pub fn param_hash(&self) -> u64 {
        let set: ParamSet = self.tensors().into_iter().collect();
        param_hash(&set)
    }

    /// Token matrix of a clip with its frame blocks in reverse order.
    pub fn reverse_tokens(&self, tokens: &Tensor) -> Tensor {
        let np = self.world.patches_per_frame;
        let dd = tokens.cols();
        let n = tokens.rows() / np;
        let block = np * dd;
        let mut data = Vec::with_capacity(tokens.len());
        for t in (0..n).rev() {
            data.extend_from_slice(&tokens.data()[t * block..(t + 1) * block]);
        }
        Tensor::matrix(tokens.rows(), dd, data).expect("same shape")
    }

    /// Projects a D-vector to the joint space without normalizing.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        matvec(&self.proj, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::reverse_clip;

    fn setup() -> (WorldConfig, Backbone) {
        let w = WorldConfig::default();
        let b = Backbone::new(&w, &BackboneConfig::default()).unwrap();
        (w, b)
    }

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    #[test]
    fn antonym_texts_nearly_collapse() {
        let (_, b) = setup();
        let fall = b.encode_text(&toks("obj03 fall")).unwrap();
        let rise = b.encode_text(&toks("obj03 rise")).unwrap();
        let other = b.encode_text(&toks("obj07 fall")).unwrap();
        assert!(cosine(&fall, &rise).unwrap() >= 0.99);
        assert!(cosine(&fall, &other).unwrap() <= 0.8);
        assert_eq!(fall, b.encode_text(&toks("obj03 fall")).unwrap());
        assert!(b.encode_text(&toks("obj03 levitate")).is_err());
    }

    #[test]
    fn antonym_embedding_gap_is_two_epsilon() {
        let (_, b) = setup();
        let f = b.token_embedding("fall").unwrap();
        let r = b.token_embedding("rise").unwrap();
        let gap: f64 = f.iter().zip(r).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((gap - 2.0 * 0.05).abs() < 1e-12, "{gap}");
    }

    #[test]
    fn pooled_visual_is_reversal_invariant_bit_exact() {
        let (w, b) = setup();
        for a in 0..w.lexicon.len() {
            let c = generate_clip(&w, a % w.num_objects, a, 3).unwrap();
            let e = b.encode_clip(&c).unwrap();
            let r = b.encode_clip(&reverse_clip(&c)).unwrap();
            assert_eq!(e.pooled_visual, r.pooled_visual);
            assert_eq!(b.reverse_tokens(&e.visual_tokens), r.visual_tokens);
            assert!((b.similarity(&e.pooled_visual, &e.pooled_visual).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn static_clip_frame_blocks_identical() {
        let (w, b) = setup();
        let clean = WorldConfig {
            noise_std: 0.0,
            ..w.clone()
        };
        let hold = clean.lexicon.by_name("hold").unwrap().id;
        let c = generate_clip(&clean, 2, hold, 1).unwrap();
        let e = b.encode_clip(&c).unwrap();
        let block = w.patches_per_frame * b.embed_dim();
        let d = e.visual_tokens.data();
        for t in 1..w.frames_per_clip {
            assert_eq!(&d[t * block..(t + 1) * block], &d[..block]);
        }
    }

    #[test]
    fn heldout_rendering_changes_tokens_not_pool() {
        let (w, b) = setup();
        let mut c = generate_clip(&w, 5, 0, 1).unwrap();
        let a = b.encode_clip(&c).unwrap();
        c.split = Split::HeldoutDomain;
        let h = b.encode_clip(&c).unwrap();
        assert_ne!(a.visual_tokens, h.visual_tokens);
        for (x, y) in a.pooled_visual.iter().zip(&h.pooled_visual) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let (w, b) = setup();
        let again = Backbone::new(&w, &BackboneConfig::default()).unwrap();
        assert_eq!(b.param_hash(), again.param_hash());
        let other = Backbone::new(
            &w,
            &BackboneConfig {
                seed: 12,
                ..BackboneConfig::default()
            },
        )
        .unwrap();
        assert_ne!(b.param_hash(), other.param_hash());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (w, b) = setup();
        let mut c = generate_clip(&w, 0, 0, 0).unwrap();
        c.frames = Tensor::zeros(&[8, 5]);
        assert!(matches!(b.encode_clip(&c), Err(Error::Shape { .. })));
    }
}
