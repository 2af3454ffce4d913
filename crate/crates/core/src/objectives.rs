//! Contrastive and discriminative training losses, and the state-change
//! saliency scores that decide which clips enter the reversal loss.

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::tensor::{cosine, Graph, Var};
use crate::world::{generate_clip, ActionKind, ClipInstance, WorldConfig};

pub const DEFAULT_TEMPERATURE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaliencyScore {
    pub delta_vt: f64,
    pub theta_vv: f64,
    pub gated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateThresholds {
    pub delta: f64,
    pub theta: f64,
}

impl GateThresholds {
    pub const PAPER: GateThresholds = GateThresholds {
        delta: 0.003,
        theta: 0.95,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatePreset {
    Paper,
    /// δ threshold calibrated on the world; θ threshold kept at 0.95.
    Desk,
}

impl GatePreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            other => Err(Error::Unknown {
                kind: "gate preset",
                name: other.into(),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Paper => "paper",
            Self::Desk => "desk",
        }
    }
}

fn check_even(n: usize) -> Result<()> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::NotApplicable(format!(
            "saliency needs an even, non-zero frame count, got {n}"
        )));
    }
    Ok(())
}

/// `|(Σ_{i<N/2} S(v_i, t) − Σ_{j≥N/2} S(v_j, t)) / (N/2)|` given per-frame similarities.
pub fn delta_from_sims(sims: &[f64]) -> Result<f64> {
    check_even(sims.len())?;
    let h = sims.len() / 2;
    let first: f64 = sims[..h].iter().sum();
    let second: f64 = sims[h..].iter().sum();
    Ok(((first - second) / h as f64).abs())
}

pub fn saliency_delta_vt(frame_encodings: &[Vec<f64>], text: &[f64]) -> Result<f64> {
    let sims = frame_encodings
        .iter()
        .map(|v| cosine(v, text))
        .collect::<Result<Vec<_>>>()?;
    delta_from_sims(&sims)
}

fn half_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b / rows.len() as f64;
        }
    }
    m
}

/// Cosine between the mean of the first and of the second half of the encodings.
pub fn saliency_theta_vv(frame_encodings: &[Vec<f64>]) -> Result<f64> {
    check_even(frame_encodings.len())?;
    let h = frame_encodings.len() / 2;
    let a = half_mean(&frame_encodings[..h]);
    let b = half_mean(&frame_encodings[h..]);
    let eps = 1e-12;
    if crate::tensor::norm(&a) < eps || crate::tensor::norm(&b) < eps {
        return Err(Error::Degenerate("saliency_theta_vv"));
    }
    cosine(&a, &b)
}

pub fn gate(delta_vt: f64, theta_vv: f64, th: GateThresholds) -> bool {
    delta_vt > th.delta && theta_vv < th.theta
}

pub fn saliency(backbone: &Backbone, clip: &ClipInstance, th: GateThresholds) -> Result<SaliencyScore> {
    let frames = backbone.frame_encodings(clip)?;
    let text = backbone.encode_text(&clip.annotation)?;
    let delta_vt = saliency_delta_vt(&frames, &text)?;
    let theta_vv = saliency_theta_vv(&frames)?;
    Ok(SaliencyScore {
        delta_vt,
        theta_vv,
        gated: gate(delta_vt, theta_vv, th),
    })
}

/// Desk thresholds: δ at the midpoint between the largest static-clip δ and the
/// smallest directional-clip δ over `draws` noise-free clips; θ stays at 0.95.
pub fn calibrate_desk_thresholds(backbone: &Backbone, draws: usize, seed: u64) -> Result<GateThresholds> {
    let world = backbone.world();
    let clean = WorldConfig {
        noise_std: 0.0,
        ..world.clone()
    };
    let statics: Vec<usize> = kinds(world, ActionKind::Static);
    let directional: Vec<usize> = kinds(world, ActionKind::Directional);
    if statics.is_empty() || directional.is_empty() {
        return Err(Error::Config(
            "calibration needs static and directional actions".into(),
        ));
    }
    let tree = crate::rng::SeedTree::new(seed).child("gate-calibration");
    let mut max_static = 0.0f64;
    let mut min_dir = f64::INFINITY;
    for i in 0..draws {
        let object = i % world.num_objects;
        let (pool, is_static) = if i % 2 == 0 {
            (&directional, false)
        } else {
            (&statics, true)
        };
        let action = pool[(i / 2) % pool.len()];
        let clip = generate_clip(&clean, object, action, tree.index(i as u64).seed())?;
        let s = saliency(backbone, &clip, GateThresholds::PAPER)?;
        if is_static {
            max_static = max_static.max(s.delta_vt);
        } else {
            min_dir = min_dir.min(s.delta_vt);
        }
    }
    if !(min_dir > max_static) {
        return Err(Error::Config(format!(
            "saliency does not separate directional ({min_dir}) from static ({max_static}) clips"
        )));
    }
    Ok(GateThresholds {
        delta: 0.5 * (max_static + min_dir),
        theta: GateThresholds::PAPER.theta,
    })
}

fn kinds(world: &WorldConfig, kind: ActionKind) -> Vec<usize> {
    world
        .lexicon
        .entries()
        .iter()
        .filter(|e| e.kind == kind)
        .map(|e| e.id)
        .collect()
}

/// Per-step loss values as logged.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub vtc: f64,
    pub vac: f64,
    pub atm: f64,
    pub atm_gated_count: usize,
    pub total: f64,
}

/// Symmetric InfoNCE over a B×B similarity matrix whose diagonal holds the positives.
pub fn vtc_loss(g: &mut Graph, sim: Var, tau: f64) -> Result<Var> {
    let t = g.value(sim);
    let b = t.rows();
    if t.rank() != 2 || t.cols() != b {
        return Err(Error::Shape {
            op: "vtc_loss",
            left: t.shape().to_vec(),
            right: vec![b, b],
        });
    }
    if b < 2 {
        return Err(Error::NotApplicable("contrastive loss needs a batch of at least 2".into()));
    }
    let logits = g.scale(sim, 1.0 / tau);
    let rows = directional_ce(g, logits, b)?;
    let lt = g.transpose(logits)?;
    let cols = directional_ce(g, lt, b)?;
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, 0.5))
}

fn directional_ce(g: &mut Graph, logits: Var, b: usize) -> Result<Var> {
    let mut terms = Vec::with_capacity(b);
    for i in 0..b {
        let r = g.row(logits, i)?;
        terms.push(g.cross_entropy(r, i)?);
    }
    g.mean_of(&terms)
}

/// Video-to-text InfoNCE with antonym texts as extra negatives.
///
/// `sim` is B×B (video i against text j); `anti` is B×K (video i against the
/// antonym text of the k-th directional clip); `has_antonym[i]` marks the rows
/// that enter the mean. Returns `None` when no row has an antonym.
pub fn vac_loss(
    g: &mut Graph,
    sim: Var,
    anti: Option<Var>,
    has_antonym: &[bool],
    tau: f64,
) -> Result<Option<Var>> {
    let anti = match anti {
        Some(a) if has_antonym.iter().any(|x| *x) => a,
        _ => return Ok(None),
    };
    let b = g.value(sim).rows();
    if has_antonym.len() != b || g.value(anti).rows() != b {
        return Err(Error::Shape {
            op: "vac_loss",
            left: g.value(sim).shape().to_vec(),
            right: g.value(anti).shape().to_vec(),
        });
    }
    let mut terms = Vec::new();
    for (i, &has) in has_antonym.iter().enumerate() {
        if !has {
            continue;
        }
        let pos = g.row(sim, i)?;
        let neg = g.row(anti, i)?;
        let cand = g.concat(&[pos, neg])?;
        let logits = g.scale(cand, 1.0 / tau);
        terms.push(g.cross_entropy(logits, i)?);
    }
    Ok(Some(g.mean_of(&terms)?))
}

/// Two-way reversal discrimination over the gated instances. `orig[i]` and
/// `reversed[i]` are scalar similarities of the clip and of its reversal
/// against the clip's own text. Returns `None` when nothing is gated.
pub fn atm_loss(
    g: &mut Graph,
    orig: &[Var],
    reversed: &[Var],
    gated: &[bool],
    tau: f64,
) -> Result<Option<Var>> {
    if orig.len() != reversed.len() || orig.len() != gated.len() {
        return Err(Error::Shape {
            op: "atm_loss",
            left: vec![orig.len()],
            right: vec![reversed.len(), gated.len()],
        });
    }
    let mut terms = Vec::new();
    for i in 0..orig.len() {
        if gated[i] {
            let pair = g.concat(&[orig[i], reversed[i]])?;
            let logits = g.scale(pair, 1.0 / tau);
            terms.push(g.cross_entropy(logits, 0)?);
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    Ok(Some(g.mean_of(&terms)?))
}
