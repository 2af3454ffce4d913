//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;

use super::{Graph, ParamSet, Tensor, Var};
use crate::error::Result;
use crate::rng::SeedTree;

#[derive(Debug, Clone)]
pub struct EntryCheck {
    pub label: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<EntryCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&EntryCheck> {
        self.entries.iter().filter(|e| e.rel_err > self.tol).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks d f / d point for a scalar-valued graph function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    assert!(h > 0.0 && h <= 1e-3, "step must lie in (0, 1e-3]");
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g.grad(x).expect("leaf requires grad").to_vec();

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p, false);
        let y = f(&mut g, x)?;
        Ok(g.scalar(y))
    };
    let mut entries = Vec::with_capacity(point.len());
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        entries.push(EntryCheck {
            label: "x".into(),
            index: i,
            analytic: *a,
            numeric,
            rel_err: relative_error(*a, numeric),
        });
    }
    Ok(GradCheckReport { entries, tol })
}

/// Checks gradients w.r.t. named parameters. At most `samples_per_tensor`
/// entries of each tensor are probed, chosen from `seed`.
pub fn grad_check_params<F>(
    f: F,
    params: &ParamSet,
    h: f64,
    tol: f64,
    samples_per_tensor: usize,
    seed: SeedTree,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    assert!(h > 0.0 && h <= 1e-3, "step must lie in (0, 1e-3]");
    let mut g = Graph::new();
    let y = f(&mut g, params)?;
    g.backward(y)?;
    let grads = g.param_grads();

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let y = f(&mut g, p)?;
        Ok(g.scalar(y))
    };
    let mut entries = Vec::new();
    for (name, t) in params {
        let Some(grad) = grads.get(name) else {
            continue;
        };
        let mut rng = seed.child(name).rng();
        let picks: Vec<usize> = if t.len() <= samples_per_tensor {
            (0..t.len()).collect()
        } else {
            let mut v = sample(&mut rng, t.len(), samples_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        for i in picks {
            let mut work = params.clone();
            work.get_mut(name).expect("present").data_mut()[i] += h;
            let fp = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[i] -= 2.0 * h;
            let fm = eval(&work)?;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grad.data()[i];
            entries.push(EntryCheck {
                label: name.clone(),
                index: i,
                analytic,
                numeric,
                rel_err: relative_error(analytic, numeric),
            });
        }
    }
    Ok(GradCheckReport { entries, tol })
}
