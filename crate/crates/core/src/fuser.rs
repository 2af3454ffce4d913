//! Downstream heads: the knowledge fuser, side-tuning blend and backbone ensemble.

use crate::error::{Error, Result};
use crate::patcher::{init_block, Block};
use crate::rng::SeedTree;
use crate::tensor::{count_params, Graph, ParamSet, Tensor, Var};

pub const PREFIX: &str = "fuser.";
pub const SIDETUNE_PARAM: &str = "sidetune.a";

/// Seed-deterministic fuser weights of width `dim`, names prefixed with `fuser.`.
/// The value and output projections start at identity plus Gaussian noise, so
/// an untrained fuser already mixes the patched tokens into the pooled feature.
pub fn init_fuser(dim: usize, init_std: f64, seed: u64) -> ParamSet {
    let mut p = ParamSet::new();
    init_block(&mut p, SeedTree::new(seed).child("fuser-init"), PREFIX, dim, dim, dim, init_std);
    for k in ["fuser.w_v", "fuser.w_o"] {
        if let Some(t) = p.get_mut(k) {
            let data = t.data_mut();
            for i in 0..dim {
                data[i * dim + i] += 1.0;
            }
        }
    }
    p
}

pub fn fuser_param_count(dim: usize) -> usize {
    count_params(&init_fuser(dim, 0.02, 0))
}

/// Side-tuning starts at an even blend.
pub fn init_sidetune() -> ParamSet {
    ParamSet::from([(SIDETUNE_PARAM.to_string(), Tensor::scalar(0.0))])
}

/// Fuser bound to a graph.
pub struct BoundFuser {
    block: Block,
    heads: usize,
}

impl BoundFuser {
    pub fn bind(g: &mut Graph, params: &ParamSet, heads: usize) -> Result<Self> {
        Ok(Self {
            block: Block::bind(g, params, PREFIX)?,
            heads,
        })
    }

    /// The pooled backbone feature (1×d) queries the patched tokens (l×d); the
    /// block output is L2-normalized into the fused feature (1×d).
    pub fn forward(&self, g: &mut Graph, pooled: Var, patched: Var) -> Result<Var> {
        let (tp, tv) = (g.value(pooled), g.value(patched));
        if tp.rank() != 2 || tp.rows() != 1 || tp.cols() != tv.cols() {
            return Err(Error::Shape {
                op: "fuser_forward",
                left: tp.shape().to_vec(),
                right: tv.shape().to_vec(),
            });
        }
        let q = g.matmul(pooled, self.block_wq())?;
        let mixed = self.block.attend(g, q, patched, self.heads)?;
        let out = self.block.finish(g, pooled, Some(mixed))?;
        g.normalize_rows(out)
    }

    fn block_wq(&self) -> Var {
        self.block.w_q()
    }
}

/// `α·v* + (1 − α)·v` with `α = sigmoid(a)`, for 1×d rows.
pub fn side_tune_blend(g: &mut Graph, a: Var, pooled: Var, patched_mean: Var) -> Result<Var> {
    let alpha = g.sigmoid(a);
    let diff = g.sub(pooled, patched_mean)?;
    let scaled = g.scale_by(diff, alpha)?;
    g.add(patched_mean, scaled)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain-value [`side_tune_blend`].
pub fn side_tune_blend_value(a: f64, pooled: &[f64], patched_mean: &[f64]) -> Vec<f64> {
    let alpha = sigmoid(a);
    pooled
        .iter()
        .zip(patched_mean)
        .map(|(p, v)| alpha * p + (1.0 - alpha) * v)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub p_a: Vec<f64>,
    pub p_b: Vec<f64>,
    pub combined: Vec<f64>,
    pub class: usize,
}

fn check_distribution(p: &[f64], which: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 || p.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::NotApplicable(format!(
            "{which} is not a probability vector (sum {s})"
        )));
    }
    Ok(())
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Sums two class distributions and takes the argmax, ties to the lowest index.
pub fn ensemble_predict(p_a: &[f64], p_b: &[f64]) -> Result<EnsemblePrediction> {
    if p_a.len() != p_b.len() || p_a.is_empty() {
        return Err(Error::Shape {
            op: "ensemble_predict",
            left: vec![p_a.len()],
            right: vec![p_b.len()],
        });
    }
    check_distribution(p_a, "p_a")?;
    check_distribution(p_b, "p_b")?;
    let combined: Vec<f64> = p_a.iter().zip(p_b).map(|(a, b)| a + b).collect();
    Ok(EnsemblePrediction {
        p_a: p_a.to_vec(),
        p_b: p_b.to_vec(),
        class: argmax(&combined),
        combined,
    })
}
