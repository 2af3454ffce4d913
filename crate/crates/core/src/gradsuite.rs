//! Finite-difference checks of every differentiable operation, loss and head.

use std::fmt::Write as _;

use crate::error::Result;
use crate::fuser::{init_fuser, init_sidetune, side_tune_blend, BoundFuser, SIDETUNE_PARAM};
use crate::objectives::{atm_loss, vac_loss, vtc_loss};
use crate::patcher::{init_params, sim_max_tokens, BoundPatcher, PatcherConfig, Variant};
use crate::rng::{gaussian_vec, SeedTree};
use crate::tensor::gradcheck::grad_check_params;
use crate::tensor::{Graph, ParamSet, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-5;
pub const GRAD_STEP: f64 = 1e-6;
/// Step of the network-sized checks: their scalar sums thousands of outputs, so
/// at the small step cancellation error reaches the tolerance on tiny gradients.
pub const NET_STEP: f64 = 1e-4;
pub const GRAD_POINTS: usize = 5;
/// Entries probed per parameter tensor of the network-sized checks.
const NET_SAMPLES: usize = 6;
/// Entries probed per tensor of the small single-op checks (all of them).
const ALL: usize = usize::MAX;
/// Weight scale of the network-sized checks; larger than the training init so
/// that no gradient sits near the relative-error floor.
const NET_STD: f64 = 0.3;

/// Worst entry of one operation over all points.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: String,
    pub points: usize,
    pub entries: usize,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRAD_TOL
    }
}

type Build = fn(&mut Graph, &ParamSet, SeedTree) -> Result<Var>;

struct Case {
    op: &'static str,
    shapes: &'static [(&'static str, &'static [usize])],
    build: Build,
    samples: usize,
    std: f64,
}

fn random(tree: SeedTree, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), gaussian_vec(&mut tree.rng(), n, std)).expect("matching length")
}

/// Contracts `out` with fixed random weights so every output entry reaches the scalar.
fn weigh(g: &mut Graph, out: Var, tree: SeedTree) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(random(tree.child("weights"), &shape, 1.0));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn p(g: &mut Graph, params: &ParamSet, name: &str) -> Result<Var> {
    g.param(params, name)
}

fn desk(variant: Variant) -> PatcherConfig {
    PatcherConfig {
        init_std: NET_STD,
        ..PatcherConfig::desk(variant)
    }
}

fn tokens(g: &mut Graph, cfg: &PatcherConfig, tree: SeedTree) -> Var {
    g.constant(random(tree.child("tokens"), &[cfg.tokens(), cfg.input_dim], 1.0))
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            op: "matmul",
            shapes: &[("a", &[3, 4]), ("b", &[4, 2])],
            build: |g, ps, t| {
                let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
                let c = g.matmul(a, b)?;
                weigh(g, c, t)
            },
            samples: ALL,
            std: 1.0,
        },
        Case {
            op: "add_sub_mul",
            shapes: &[("a", &[2, 3]), ("b", &[2, 3]), ("c", &[2, 3])],
            build: |g, ps, t| {
                let (a, b, c) = (p(g, ps, "a")?, p(g, ps, "b")?, p(g, ps, "c")?);
                let s = g.add(a, b)?;
                let d = g.sub(s, c)?;
                let m = g.mul(d, b)?;
                weigh(g, m, t)
            },
            samples: ALL,
            std: 1.0,
        },
        Case {
            op: "add_row_scale",
            shapes: &[("a", &[3, 4]), ("bias", &[4]), ("s", &[1])],
            build: |g, ps, t| {
                let (a, b, s) = (p(g, ps, "a")?, p(g, ps, "bias")?, p(g, ps, "s")?);
                let r = g.add_row(a, b)?;
                let r = g.scale_by(r, s)?;
                let r = g.scale(r, 0.7);
                let r = g.add_const(r, 0.3);
                weigh(g, r, t)
            },
            samples: ALL,
            std: 1.0,
        },
        Case {
            op: "transpose_reshape",
            shapes: &[("a", &[3, 4])],
            build: |g, ps, t| {
                let a = p(g, ps, "a")?;
                let tr = g.transpose(a)?;
                let r = g.reshape(tr, vec![2, 6])?;
                weigh(g, r, t)
            },
            samples: ALL,
            std: 1.0,
        },
        Case {
            op: "softmax",
            shapes: &[("a", &[3, 5])],
            build: |g, ps, t| {
                let a = p(g, ps, "a")?;
                let s = g.softmax_rows(a)?;
                weigh(g, s, t)
            },
            samples: ALL,
            std: 1.0,
        },
        Case {
            op: "layer_norm",
            shapes: &[("x", &[3, 6]), ("gamma", &[6]), ("beta", &[6])],
            build: |g, ps, t| {
                let (x, ga, be) = (p(g, ps, "x")?, p(g, ps, "gamma")?, p(g, ps, "beta")?);
                let y = g.layer_norm(x, ga, be, 1e-5)?;
                weigh(g, y, t)
            },
            samples: ALL,
            std: 1.0,
        },
        Case {
            op: "gelu_sigmoid",
            shapes: &[("a", &[2, 5])],
            build: |g, ps, t| {
                let a = p(g, ps, "a")?;
                let x = g.gelu(a);
                let y = g.sigmoid(a);
                let s = g.add(x, y)?;
                weigh(g, s, t)
            },
            samples: ALL,
            std: 1.0,
        },
        Case {
            op: "normalize_rows",
            shapes: &[("a", &[3, 4])],
            build: |g, ps, t| {
                let a = p(g, ps, "a")?;
                let n = g.normalize_rows(a)?;
                weigh(g, n, t)
            },
            samples: ALL,
            std: 1.0,
        },
        Case {
            op: "cosine",
            shapes: &[("u", &[8]), ("v", &[8])],
            build: |g, ps, _| {
                let (u, v) = (p(g, ps, "u")?, p(g, ps, "v")?);
                g.cosine(u, v)
            },
            samples: ALL,
            std: 1.0,
        },
        Case {
            op: "max_mean_rows",
            shapes: &[("a", &[4, 5])],
            build: |g, ps, t| {
                let a = p(g, ps, "a")?;
                let m = g.max_cols(a)?;
                let r = g.mean_rows(a)?;
                let s = g.add(m, r)?;
                weigh(g, s, t)
            },
            samples: ALL,
            std: 1.0,
        },
        Case {
            op: "cross_entropy",
            shapes: &[("z", &[6])],
            build: |g, ps, _| {
                let z = p(g, ps, "z")?;
                g.cross_entropy(z, 2)
            },
            samples: ALL,
            std: 1.0,
        },
        Case {
            op: "indexing",
            shapes: &[("a", &[3, 4]), ("b", &[3, 2])],
            build: |g, ps, t| {
                let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
                let s = g.slice_cols(a, 1, 2)?;
                let c = g.concat_cols(&[s, b])?;
                let r0 = g.row(c, 0)?;
                let r2 = g.row(c, 2)?;
                let st = g.stack_rows(&[r2, r0])?;
                let flat = g.concat(&[st, b])?;
                let w = weigh(g, flat, t)?;
                let e = g.select(a, 5)?;
                let m = g.mean_of(&[w, e])?;
                Ok(m)
            },
            samples: ALL,
            std: 1.0,
        },
        Case {
            op: "attention_perceiver",
            shapes: &[],
            build: |g, ps, t| {
                let cfg = desk(Variant::Perceiver);
                let bound = BoundPatcher::bind(g, &cfg, ps)?;
                let x = tokens(g, &cfg, t);
                let v = bound.forward(g, x)?;
                weigh(g, v, t)
            },
            samples: NET_SAMPLES,
            std: NET_STD,
        },
        Case {
            op: "attention_transformer",
            shapes: &[],
            build: |g, ps, t| {
                let cfg = desk(Variant::Transformer);
                let bound = BoundPatcher::bind(g, &cfg, ps)?;
                let x = tokens(g, &cfg, t);
                let v = bound.forward(g, x)?;
                weigh(g, v, t)
            },
            samples: NET_SAMPLES,
            std: NET_STD,
        },
        Case {
            op: "vtc_loss",
            shapes: &[("sim", &[4, 4])],
            build: |g, ps, _| {
                let s = p(g, ps, "sim")?;
                vtc_loss(g, s, 0.05)
            },
            samples: ALL,
            std: 0.05,
        },
        Case {
            op: "vac_loss",
            shapes: &[("sim", &[4, 4]), ("anti", &[4, 3])],
            build: |g, ps, _| {
                let (s, a) = (p(g, ps, "sim")?, p(g, ps, "anti")?);
                let l = vac_loss(g, s, Some(a), &[true, false, true, true], 0.05)?;
                Ok(l.expect("rows with antonyms"))
            },
            samples: ALL,
            std: 0.05,
        },
        Case {
            op: "atm_loss",
            shapes: &[("orig", &[3]), ("rev", &[3])],
            build: |g, ps, _| {
                let (o, r) = (p(g, ps, "orig")?, p(g, ps, "rev")?);
                let os: Vec<Var> = (0..3).map(|i| g.select(o, i)).collect::<Result<_>>()?;
                let rs: Vec<Var> = (0..3).map(|i| g.select(r, i)).collect::<Result<_>>()?;
                let l = atm_loss(g, &os, &rs, &[true, true, false], 0.05)?;
                Ok(l.expect("gated rows"))
            },
            samples: ALL,
            std: 0.05,
        },
        Case {
            op: "max_token_head",
            shapes: &[("v", &[4, 6]), ("texts", &[6, 3])],
            build: |g, ps, t| {
                let (v, x) = (p(g, ps, "v")?, p(g, ps, "texts")?);
                let s = sim_max_tokens(g, v, x)?;
                weigh(g, s, t)
            },
            samples: ALL,
            std: 1.0,
        },
        Case {
            op: "fuser",
            shapes: &[("pooled", &[1, 32])],
            build: |g, ps, t| {
                let cfg = desk(Variant::Perceiver);
                let bound = BoundPatcher::bind(g, &cfg, ps)?;
                let fuser = BoundFuser::bind(g, ps, cfg.heads)?;
                let x = tokens(g, &cfg, t);
                let v = bound.forward(g, x)?;
                let q = p(g, ps, "pooled")?;
                let f = fuser.forward(g, q, v)?;
                weigh(g, f, t)
            },
            samples: NET_SAMPLES,
            std: NET_STD,
        },
        Case {
            op: "side_tune",
            shapes: &[("pooled", &[1, 32])],
            build: |g, ps, t| {
                let cfg = desk(Variant::Perceiver);
                let bound = BoundPatcher::bind(g, &cfg, ps)?;
                let x = tokens(g, &cfg, t);
                let v = bound.forward(g, x)?;
                let m = g.mean_rows(v)?;
                let m = g.reshape(m, vec![1, 32])?;
                let a = p(g, ps, SIDETUNE_PARAM)?;
                let q = p(g, ps, "pooled")?;
                let b = side_tune_blend(g, a, q, m)?;
                weigh(g, b, t)
            },
            samples: NET_SAMPLES,
            std: NET_STD,
        },
    ]
}

fn point_params(case: &Case, tree: SeedTree) -> Result<ParamSet> {
    let mut ps = ParamSet::new();
    for (name, shape) in case.shapes {
        ps.insert(name.to_string(), random(tree.child(name), shape, case.std));
    }
    let seed = tree.child("init").seed();
    match case.op {
        "attention_perceiver" | "side_tune" => ps.extend(init_params(&desk(Variant::Perceiver), seed)?),
        "attention_transformer" => ps.extend(init_params(&desk(Variant::Transformer), seed)?),
        "fuser" => {
            ps.extend(init_params(&desk(Variant::Perceiver), seed)?);
            ps.extend(init_fuser(32, NET_STD, seed));
        }
        _ => {}
    }
    if case.op == "side_tune" {
        let mut st = init_sidetune();
        if let Some(a) = st.get_mut(SIDETUNE_PARAM) {
            a.data_mut()[0] = random(tree.child("a"), &[1], 1.0).item();
        }
        ps.extend(st);
    }
    Ok(ps)
}

/// Names of the checked operations, in report order.
pub fn op_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.op).collect()
}

/// Runs every check at [`GRAD_POINTS`] points derived from `seed`.
pub fn run_grad_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let root = SeedTree::new(seed).child("grad-suite");
    let mut out = Vec::new();
    for case in cases() {
        let mut worst = 0.0f64;
        let mut entries = 0;
        for k in 0..GRAD_POINTS {
            let tree = root.child(case.op).index(k as u64);
            let ps = point_params(&case, tree)?;
            let build = case.build;
            let step = if case.samples == NET_SAMPLES { NET_STEP } else { GRAD_STEP };
            let report = grad_check_params(
                |g, p| build(g, p, tree),
                &ps,
                step,
                GRAD_TOL,
                case.samples,
                tree.child("picks"),
            )?;
            entries += report.entries.len();
            worst = worst.max(report.max_rel_err());
        }
        out.push(OpCheck {
            op: case.op.to_string(),
            points: GRAD_POINTS,
            entries,
            max_rel_err: worst,
        });
    }
    Ok(out)
}

pub const GRAD_HEADER: &str = "op\tpoints\tentries\tmax_rel_err\tpassed";

pub fn grad_suite_tsv(checks: &[OpCheck]) -> String {
    let mut s = String::from(GRAD_HEADER);
    s.push('\n');
    for c in checks {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:e}\t{}",
            c.op,
            c.points,
            c.entries,
            c.max_rel_err,
            u8::from(c.passed())
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_builds_a_scalar() {
        for case in cases() {
            let tree = SeedTree::new(3).child(case.op);
            let ps = point_params(&case, tree).unwrap();
            let mut g = Graph::new();
            let y = (case.build)(&mut g, &ps, tree).unwrap();
            assert_eq!(g.value(y).len(), 1, "{}", case.op);
        }
    }

    #[test]
    fn tsv_has_a_row_per_op() {
        let checks = vec![OpCheck {
            op: "matmul".into(),
            points: 5,
            entries: 70,
            max_rel_err: 2.5e-9,
        }];
        let tsv = grad_suite_tsv(&checks);
        assert_eq!(tsv, format!("{GRAD_HEADER}\nmatmul\t5\t70\t2.5e-9\t1\n"));
    }
}

