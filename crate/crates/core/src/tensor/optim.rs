use std::collections::BTreeMap;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimPreset {
    /// lr 1e-5, weight decay 0.05.
    Paper,
    /// lr 1e-3, weight decay 0.01; small models only converge in minutes at this rate.
    Desk,
}

impl OptimPreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            other => Err(Error::Config(format!(
                "optim.preset: expected paper|desk, got `{other}`"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Paper => "paper",
            Self::Desk => "desk",
        }
    }

    pub fn code(self) -> f64 {
        match self {
            Self::Paper => 0.0,
            Self::Desk => 1.0,
        }
    }

    pub fn config(self) -> AdamWConfig {
        let (lr, weight_decay) = match self {
            Self::Paper => (1e-5, 0.05),
            Self::Desk => (1e-3, 0.01),
        };
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter. Parameters missing from `grads` are
    /// treated as having a zero gradient (they still decay).
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| Error::Unknown {
                kind: "parameter",
                name: name.clone(),
            })?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let n = p.len();
            let g: &[f64] = grads.get(name).map_or(&[], Tensor::data);
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (i, theta) in p.data_mut().iter_mut().enumerate() {
                let gi = g.get(i).copied().unwrap_or(0.0);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let update = if m_hat == 0.0 {
                    0.0
                } else {
                    m_hat / (v_hat.sqrt() + c.eps)
                };
                *theta -= c.lr * update + c.lr * c.weight_decay * *theta;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name.into(), Tensor::scalar(v));
        p
    }

    fn cfg(lr: f64, wd: f64, eps: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            weight_decay: wd,
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut params = ParamSet::new();
        params.insert("w".into(), Tensor::vector(vec![0.5, -2.0, 3.0]));
        let before = params.clone();
        let grads: ParamSet = [("w".to_string(), Tensor::zeros(&[3]))].into();
        let mut opt = AdamW::new(cfg(0.1, 0.0, 1e-8));
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params, before);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_bias_corrected() {
        let mut params = one("w", 1.0);
        let grads = one("w", 1.0);
        let mut opt = AdamW::new(cfg(0.1, 0.0, 0.0));
        opt.step(&mut params, &grads).unwrap();
        assert!((params["w"].item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn pure_decoupled_decay() {
        let mut params = one("w", 1.0);
        let grads = one("w", 0.0);
        let mut opt = AdamW::new(cfg(0.1, 0.05, 1e-8));
        opt.step(&mut params, &grads).unwrap();
        assert!((params["w"].item() - 0.995).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = one("w", 1.0);
        let grads: ParamSet = [("w".to_string(), Tensor::zeros(&[2]))].into();
        let mut opt = AdamW::new(cfg(0.1, 0.0, 1e-8));
        assert!(opt.step(&mut params, &grads).is_err());
        assert_eq!(opt.steps(), 0);
    }
}
