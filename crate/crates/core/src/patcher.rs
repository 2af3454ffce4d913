//! Knowledge patcher heads over frozen visual tokens, and the two video-text
//! similarity heads.
//!
//! Block layout for both variants: attention, residual, layer norm, two-layer
//! GELU feed-forward, residual, layer norm. Fixed sinusoidal encodings of the
//! frame index are added to the input tokens.

use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, SeedTree};
use crate::tensor::{count_params, l2_normalize, norm, Graph, ParamSet, Tensor, Var};

pub const PREFIX: &str = "patcher.";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Perceiver,
    Transformer,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "perceiver" => Ok(Self::Perceiver),
            "transformer" => Ok(Self::Transformer),
            other => Err(Error::Unknown {
                kind: "patcher variant",
                name: other.into(),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Perceiver => "perceiver",
            Self::Transformer => "transformer",
        }
    }

    pub fn code(self) -> f64 {
        match self {
            Self::Perceiver => 0.0,
            Self::Transformer => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatcherConfig {
    pub variant: Variant,
    /// Input token width D.
    pub input_dim: usize,
    /// Output width d, shared with the text embedding.
    pub model_dim: usize,
    pub latents: usize,
    pub heads: usize,
    pub frames: usize,
    pub patches_per_frame: usize,
    pub init_std: f64,
}

impl PatcherConfig {
    pub fn desk(variant: Variant) -> Self {
        Self {
            variant,
            input_dim: 48,
            model_dim: 32,
            latents: 8,
            heads: 1,
            frames: 8,
            patches_per_frame: 9,
            init_std: 0.02,
        }
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.patches_per_frame
    }

    /// Width the attention runs at.
    fn attn_dim(&self) -> usize {
        match self.variant {
            Variant::Perceiver => self.model_dim,
            Variant::Transformer => self.input_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.attn_dim().is_multiple_of(self.heads) {
            return bad(format!(
                "patcher.heads ({}) must divide the attention width ({})",
                self.heads,
                self.attn_dim()
            ));
        }
        if self.model_dim == 0 || self.input_dim == 0 || self.tokens() == 0 {
            return bad("patcher dims must be positive".into());
        }
        if self.variant == Variant::Perceiver {
            if self.latents == 0 || self.latents >= self.tokens() {
                return bad(format!(
                    "patcher.latents ({}) must lie in [1, {})",
                    self.latents,
                    self.tokens()
                ));
            }
            if self.model_dim > self.input_dim {
                return bad("perceiver model_dim must not exceed the token width".into());
            }
        }
        Ok(())
    }

    /// Output token count.
    pub fn output_tokens(&self) -> usize {
        match self.variant {
            Variant::Perceiver => self.latents,
            Variant::Transformer => self.tokens(),
        }
    }
}

fn name(s: &str) -> String {
    format!("{PREFIX}{s}")
}

fn gaussian(tree: SeedTree, key: &str, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), gaussian_vec(&mut tree.child(key).rng(), n, std)).expect("positive dims")
}

/// Attention, feed-forward and layer-norm parameters of one block, under `prefix`.
pub(crate) fn init_block(
    out: &mut ParamSet,
    tree: SeedTree,
    prefix: &str,
    q_in: usize,
    kv_in: usize,
    width: usize,
    std: f64,
) {
    let mut put = |k: &str, t: Tensor| {
        out.insert(format!("{prefix}{k}"), t);
    };
    put("w_q", gaussian(tree, "w_q", &[q_in, width], std));
    put("w_k", gaussian(tree, "w_k", &[kv_in, width], std));
    put("w_v", gaussian(tree, "w_v", &[kv_in, width], std));
    put("w_o", gaussian(tree, "w_o", &[width, width], std));
    put("ln1.gamma", Tensor::filled(&[width], 1.0));
    put("ln1.beta", Tensor::zeros(&[width]));
    put("ffn.w1", gaussian(tree, "ffn.w1", &[width, 4 * width], std));
    put("ffn.b1", Tensor::zeros(&[4 * width]));
    put("ffn.w2", gaussian(tree, "ffn.w2", &[4 * width, width], std));
    put("ffn.b2", Tensor::zeros(&[width]));
    put("ln2.gamma", Tensor::filled(&[width], 1.0));
    put("ln2.beta", Tensor::zeros(&[width]));
}

/// Seed-deterministic initialization, names prefixed with `patcher.`.
pub fn init_params(cfg: &PatcherConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let tree = SeedTree::new(seed).child("patcher-init");
    let mut p = ParamSet::new();
    match cfg.variant {
        Variant::Perceiver => {
            p.insert(
                name("latents"),
                gaussian(tree, "latents", &[cfg.latents, cfg.model_dim], cfg.init_std),
            );
            init_block(&mut p, tree, PREFIX, cfg.model_dim, cfg.input_dim, cfg.model_dim, cfg.init_std);
        }
        Variant::Transformer => {
            init_block(&mut p, tree, PREFIX, cfg.input_dim, cfg.input_dim, cfg.input_dim, cfg.init_std);
            p.insert(
                name("out.w"),
                gaussian(tree, "out.w", &[cfg.input_dim, cfg.model_dim], cfg.init_std),
            );
            p.insert(name("out.b"), Tensor::zeros(&[cfg.model_dim]));
        }
    }
    Ok(p)
}

pub fn param_count(cfg: &PatcherConfig) -> Result<usize> {
    Ok(count_params(&init_params(cfg, 0)?))
}

/// Sinusoidal encoding of the frame index, repeated over the patches of a frame.
pub fn position_table(frames: usize, patches_per_frame: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(frames * patches_per_frame * dim);
    for t in 0..frames {
        let row: Vec<f64> = (0..dim)
            .map(|j| {
                let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
                let x = t as f64 * freq;
                if j % 2 == 0 {
                    x.sin()
                } else {
                    x.cos()
                }
            })
            .collect();
        for _ in 0..patches_per_frame {
            data.extend_from_slice(&row);
        }
    }
    Tensor::matrix(frames * patches_per_frame, dim, data).expect("positive dims")
}

/// Bound parameter handles of one block.
pub(crate) struct Block {
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    ln1: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    ln2: (Var, Var),
}

impl Block {
    pub(crate) fn w_q(&self) -> Var {
        self.w_q
    }

    pub(crate) fn bind(g: &mut Graph, params: &ParamSet, prefix: &str) -> Result<Self> {
        let mut p = |k: &str| g.param(params, &format!("{prefix}{k}"));
        Ok(Self {
            w_q: p("w_q")?,
            w_k: p("w_k")?,
            w_v: p("w_v")?,
            w_o: p("w_o")?,
            ln1: (p("ln1.gamma")?, p("ln1.beta")?),
            w1: p("ffn.w1")?,
            b1: p("ffn.b1")?,
            w2: p("ffn.w2")?,
            b2: p("ffn.b2")?,
            ln2: (p("ln2.gamma")?, p("ln2.beta")?),
        })
    }

    /// Multi-head attention of the projected query rows over `kv` rows, then `w_o`.
    pub(crate) fn attend(&self, g: &mut Graph, q_proj: Var, kv: Var, heads: usize) -> Result<Var> {
        let k = g.matmul(kv, self.w_k)?;
        let v = g.matmul(kv, self.w_v)?;
        let width = g.value(q_proj).cols();
        let dh = width / heads;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q_proj, k, v)
            } else {
                (
                    g.slice_cols(q_proj, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax_rows(scores)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        g.matmul(o, self.w_o)
    }

    fn ffn(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let f = g.matmul(x, self.w1)?;
        let f = g.add_row(f, self.b1)?;
        let f = g.gelu(f);
        let f = g.matmul(f, self.w2)?;
        g.add_row(f, self.b2)
    }

    pub(crate) fn norm1(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.ln1.0, self.ln1.1, LN_EPS)
    }

    /// Pre-norm tail: `h + FFN(LN2(h))` with `h = residual + mixed`.
    pub(crate) fn finish_pre(&self, g: &mut Graph, residual: Var, mixed: Option<Var>) -> Result<Var> {
        let h = match mixed {
            Some(m) => g.add(residual, m)?,
            None => residual,
        };
        let n = g.layer_norm(h, self.ln2.0, self.ln2.1, LN_EPS)?;
        let f = self.ffn(g, n)?;
        g.add(h, f)
    }

    /// Post-norm tail: `LN2(h + FFN(h))` with `h = LN1(residual + mixed)`.
    pub(crate) fn finish(&self, g: &mut Graph, residual: Var, mixed: Option<Var>) -> Result<Var> {
        let pre = match mixed {
            Some(m) => g.add(residual, m)?,
            None => residual,
        };
        let h = g.layer_norm(pre, self.ln1.0, self.ln1.1, LN_EPS)?;
        let f = self.ffn(g, h)?;
        let r = g.add(h, f)?;
        g.layer_norm(r, self.ln2.0, self.ln2.1, LN_EPS)
    }
}

/// A patcher bound to a graph: parameter leaves are shared by every clip
/// forwarded through it, and the latent query projection is computed once.
pub struct BoundPatcher {
    cfg: PatcherConfig,
    block: Block,
    pos: Var,
    latents: Option<Var>,
    latent_q: Option<Var>,
    out: Option<(Var, Var)>,
    sever: bool,
}

impl BoundPatcher {
    pub fn bind(g: &mut Graph, cfg: &PatcherConfig, params: &ParamSet) -> Result<Self> {
        cfg.validate()?;
        let block = Block::bind(g, params, PREFIX)?;
        let pos = g.constant(position_table(cfg.frames, cfg.patches_per_frame, cfg.input_dim));
        let (latents, latent_q, out) = match cfg.variant {
            Variant::Perceiver => {
                let l = g.param(params, &name("latents"))?;
                let n = block.norm1(g, l)?;
                let q = g.matmul(n, block.w_q)?;
                (Some(l), Some(q), None)
            }
            Variant::Transformer => {
                let w = g.param(params, &name("out.w"))?;
                let b = g.param(params, &name("out.b"))?;
                (None, None, Some((w, b)))
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            block,
            pos,
            latents,
            latent_q,
            out,
            sever: false,
        })
    }

    /// Diagnostic mode with the attention mixing term removed.
    pub fn severed(mut self) -> Self {
        self.sever = true;
        self
    }

    pub fn config(&self) -> &PatcherConfig {
        &self.cfg
    }

    /// P×D frozen tokens to l×d (Perceiver) or P×d (Transformer) patched tokens.
    pub fn forward(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let t = g.value(tokens);
        let expect = [self.cfg.tokens(), self.cfg.input_dim];
        if t.shape() != expect {
            return Err(Error::Shape {
                op: "patcher_forward",
                left: t.shape().to_vec(),
                right: expect.to_vec(),
            });
        }
        let x = g.add(tokens, self.pos)?;
        match self.cfg.variant {
            Variant::Perceiver => {
                let latents = self.latents.expect("perceiver binds latents");
                let mixed = if self.sever {
                    None
                } else {
                    let q = self.latent_q.expect("perceiver binds queries");
                    Some(self.block.attend(g, q, x, self.cfg.heads)?)
                };
                self.block.finish_pre(g, latents, mixed)
            }
            Variant::Transformer => {
                let mixed = if self.sever {
                    None
                } else {
                    let n = self.block.norm1(g, x)?;
                    let q = g.matmul(n, self.block.w_q)?;
                    Some(self.block.attend(g, q, n, self.cfg.heads)?)
                };
                let h = self.block.finish_pre(g, x, mixed)?;
                let (w, b) = self.out.expect("transformer binds output projection");
                let o = g.matmul(h, w)?;
                g.add_row(o, b)
            }
        }
    }
}

/// One-shot forward without keeping the graph.
pub fn patch(cfg: &PatcherConfig, params: &ParamSet, tokens: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = BoundPatcher::bind(&mut g, cfg, params)?;
    let x = g.constant(tokens.clone());
    let v = bound.forward(&mut g, x)?;
    Ok(g.value(v).clone())
}

/// Max over token rows of the row-text cosine, for every text column of `texts` (d×B).
/// Gradient flows to the argmax row; ties go to the lowest row.
pub fn sim_max_tokens(g: &mut Graph, v: Var, texts: Var) -> Result<Var> {
    let n = g.normalize_rows(v)?;
    let s = g.matmul(n, texts)?;
    g.max_cols(s)
}

/// Cosine of the mean token row with every text column of `texts` (d×B).
pub fn sim_mean_pooled(g: &mut Graph, v: Var, texts: Var) -> Result<Var> {
    let m = g.mean_rows(v)?;
    let d = g.value(m).len();
    let m = g.reshape(m, vec![1, d])?;
    let n = g.normalize_rows(m)?;
    let s = g.matmul(n, texts)?;
    let b = g.value(s).len();
    g.reshape(s, vec![b])
}

/// Plain-value version of [`sim_max_tokens`] for one unit text vector.
pub fn max_token_similarity(v: &Tensor, text: &[f64]) -> Result<f64> {
    if v.cols() != text.len() {
        return Err(Error::Shape {
            op: "sim_max_tokens",
            left: v.shape().to_vec(),
            right: vec![text.len()],
        });
    }
    let mut best = f64::NEG_INFINITY;
    for i in 0..v.rows() {
        let row = v.row(i);
        let n = norm(row);
        if n < 1e-12 {
            return Err(Error::Degenerate("sim_max_tokens"));
        }
        let c = crate::tensor::dot(row, text) / n;
        if c > best {
            best = c;
        }
    }
    Ok(best)
}

/// Plain-value version of [`sim_mean_pooled`] for one unit text vector.
pub fn mean_pooled_similarity(v: &Tensor, text: &[f64]) -> Result<f64> {
    let pooled = mean_row(v);
    let u = l2_normalize(&pooled).map_err(|_| Error::Degenerate("sim_mean_pooled"))?;
    Ok(crate::tensor::dot(&u, text))
}

pub fn mean_row(v: &Tensor) -> Vec<f64> {
    let (m, n) = (v.rows(), v.cols());
    let mut out = vec![0.0; n];
    for i in 0..m {
        for (o, x) in out.iter_mut().zip(v.row(i)) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= m as f64);
    out
}

/// Stacks unit text vectors as the columns of a d×B matrix.
pub fn text_columns(texts: &[Vec<f64>]) -> Result<Tensor> {
    let b = texts.len();
    let d = texts.first().map(Vec::len).ok_or_else(|| Error::NotApplicable("no texts".into()))?;
    let mut data = vec![0.0; d * b];
    for (j, t) in texts.iter().enumerate() {
        if t.len() != d {
            return Err(Error::Shape {
                op: "text_columns",
                left: vec![d],
                right: vec![t.len()],
            });
        }
        for (i, x) in t.iter().enumerate() {
            data[i * b + j] = *x;
        }
    }
    Tensor::matrix(d, b, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_vec;

    fn tokens(seed: u64) -> Tensor {
        let data = gaussian_vec(&mut SeedTree::new(seed).rng(), 72 * 48, 0.3);
        Tensor::matrix(72, 48, data).unwrap()
    }

    #[test]
    fn perceiver_output_shape_and_param_counts() {
        let cfg = PatcherConfig::desk(Variant::Perceiver);
        let p = init_params(&cfg, 1).unwrap();
        let out = patch(&cfg, &p, &tokens(3)).unwrap();
        assert_eq!(out.shape(), &[8, 32]);
        let tcfg = PatcherConfig::desk(Variant::Transformer);
        let tp = init_params(&tcfg, 1).unwrap();
        assert_eq!(patch(&tcfg, &tp, &tokens(3)).unwrap().shape(), &[72, 32]);
        let (np, nt) = (count_params(&p), count_params(&tp));
        assert_eq!(np, 13_856);
        assert_eq!(nt, 29_648);
        let r = np as f64 / nt as f64;
        assert!((1.0 / 3.0..=2.0 / 3.0).contains(&r));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = PatcherConfig::desk(Variant::Perceiver);
        assert_eq!(init_params(&cfg, 5).unwrap(), init_params(&cfg, 5).unwrap());
        assert_ne!(init_params(&cfg, 5).unwrap(), init_params(&cfg, 6).unwrap());
    }

    #[test]
    fn severed_value_path_ignores_tokens() {
        let cfg = PatcherConfig::desk(Variant::Perceiver);
        let mut p = init_params(&cfg, 2).unwrap();
        for k in ["patcher.w_v", "patcher.w_o"] {
            let t = p.get_mut(k).unwrap();
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let a = patch(&cfg, &p, &tokens(1)).unwrap();
        let b = patch(&cfg, &p, &tokens(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frame_order_changes_perceiver_output() {
        let cfg = PatcherConfig::desk(Variant::Perceiver);
        let p = init_params(&cfg, 2).unwrap();
        let t = tokens(4);
        let mut rev = Vec::new();
        for f in (0..8).rev() {
            rev.extend_from_slice(&t.data()[f * 9 * 48..(f + 1) * 9 * 48]);
        }
        let rev = Tensor::matrix(72, 48, rev).unwrap();
        let a = patch(&cfg, &p, &t).unwrap();
        let b = patch(&cfg, &p, &rev).unwrap();
        let delta = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(delta > 0.0);
    }

    #[test]
    fn severed_transformer_is_per_token() {
        let cfg = PatcherConfig::desk(Variant::Transformer);
        let p = init_params(&cfg, 2).unwrap();
        let t = tokens(5);
        let mut g = Graph::new();
        let bound = BoundPatcher::bind(&mut g, &cfg, &p).unwrap().severed();
        let x = g.constant(t.clone());
        let full = bound.forward(&mut g, x).unwrap();
        let full = g.value(full).clone();
        // changing one token leaves every other output row untouched
        let mut t2 = t.clone();
        t2.data_mut()[0] += 1.0;
        let x2 = g.constant(t2);
        let other = bound.forward(&mut g, x2).unwrap();
        let other = g.value(other).clone();
        assert_ne!(full.row(0), other.row(0));
        for i in 1..72 {
            assert_eq!(full.row(i), other.row(i));
        }
    }

    #[test]
    fn multi_head_runs_and_differs() {
        let mut cfg = PatcherConfig::desk(Variant::Perceiver);
        cfg.heads = 4;
        let p = init_params(&cfg, 2).unwrap();
        let out = patch(&cfg, &p, &tokens(1)).unwrap();
        assert_eq!(out.shape(), &[8, 32]);
        cfg.heads = 3;
        assert!(init_params(&cfg, 2).is_err());
    }

    #[test]
    fn similarity_head_examples() {
        let texts = text_columns(&[vec![1.0, 0.0]]).unwrap();
        // rows with cosines 0.2, 0.9, 0.5 against [1, 0]
        let rows: Vec<Vec<f64>> = [0.2f64, 0.9, 0.5]
            .iter()
            .map(|c| vec![*c, (1.0 - c * c).sqrt()])
            .collect();
        let v = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::new();
        let vv = g.leaf(v.clone(), true);
        let tt = g.constant(texts.clone());
        let s = sim_max_tokens(&mut g, vv, tt).unwrap();
        assert!((g.value(s).data()[0] - 0.9).abs() < 1e-12);
        assert!((max_token_similarity(&v, &[1.0, 0.0]).unwrap() - 0.9).abs() < 1e-12);

        let eq = Tensor::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap();
        let mut g = Graph::new();
        let vv = g.leaf(eq, true);
        let tt = g.constant(texts.clone());
        let s = sim_max_tokens(&mut g, vv, tt).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        let grad = g.grad(vv).unwrap();
        assert!(grad[0] != 0.0 && grad[2] == 0.0 && grad[3] == 0.0);

        let two = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = mean_pooled_similarity(&two, &[1.0, 0.0]).unwrap();
        assert!((m - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let one = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert!((mean_pooled_similarity(&one, &[1.0, 0.0]).unwrap() - 0.6).abs() < 1e-12);
        let cancel = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, -2.0]]).unwrap();
        assert!(matches!(
            mean_pooled_similarity(&cancel, &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
        let mut g = Graph::new();
        let vv = g.leaf(cancel, true);
        let tt = g.constant(texts);
        assert!(sim_mean_pooled(&mut g, vv, tt).is_err());
    }
}
