//! Training loops for the patcher and the downstream heads.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::backbone::Backbone;
use crate::checkpoint::NamedTensors;
use crate::error::{Error, Result};
use crate::fuser::{init_fuser, init_sidetune, side_tune_blend, BoundFuser, SIDETUNE_PARAM};
use crate::objectives::{
    atm_loss, gate, saliency_delta_vt, saliency_theta_vv, vac_loss, vtc_loss, GateThresholds,
    LossBreakdown, DEFAULT_TEMPERATURE,
};
use crate::patcher::{init_params, sim_max_tokens, text_columns, BoundPatcher, PatcherConfig, Variant};
use crate::rng::{fnv1a64, SeedTree};
use crate::tensor::{AdamW, AdamWConfig, Graph, OptimPreset, ParamSet, Tensor, Var};
use crate::world::{make_antonym_annotation, ActionKind, ClipInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objectives {
    pub vtc: bool,
    pub vac: bool,
    pub atm: bool,
}

impl Objectives {
    pub const VTC: Objectives = Objectives {
        vtc: true,
        vac: false,
        atm: false,
    };
    pub const ALL: Objectives = Objectives {
        vtc: true,
        vac: true,
        atm: true,
    };

    /// Comma-separated subset of `vtc`, `vac`, `atm`; `dvdm` stands for `vac,atm`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut o = Objectives {
            vtc: false,
            vac: false,
            atm: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "vtc" => o.vtc = true,
                "vac" => o.vac = true,
                "atm" => o.atm = true,
                "dvdm" => {
                    o.vac = true;
                    o.atm = true;
                }
                other => {
                    return Err(Error::Config(format!(
                        "train.objectives: unknown objective `{other}`"
                    )))
                }
            }
        }
        if !(o.vtc || o.vac || o.atm) {
            return Err(Error::Config("train.objectives: empty objective set".into()));
        }
        Ok(o)
    }

    pub fn name(self) -> String {
        let mut parts = Vec::new();
        if self.vtc {
            parts.push("vtc");
        }
        if self.vac {
            parts.push("vac");
        }
        if self.atm {
            parts.push("atm");
        }
        parts.join(",")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Patching run.
    None,
    Fuse,
    Finetune,
    Sidetune,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Mode::None),
            "fuse" => Ok(Mode::Fuse),
            "finetune" => Ok(Mode::Finetune),
            "sidetune" => Ok(Mode::Sidetune),
            other => Err(Error::Config(format!(
                "train.mode: expected none|fuse|finetune|sidetune, got `{other}`"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::Fuse => "fuse",
            Mode::Finetune => "finetune",
            Mode::Sidetune => "sidetune",
        }
    }

    pub fn code(self) -> f64 {
        match self {
            Mode::None => 0.0,
            Mode::Fuse => 1.0,
            Mode::Finetune => 2.0,
            Mode::Sidetune => 3.0,
        }
    }

    pub fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(Mode::None),
            1 => Ok(Mode::Fuse),
            2 => Ok(Mode::Finetune),
            3 => Ok(Mode::Sidetune),
            _ => Err(Error::CorruptCheckpoint(format!("unknown mode code {c}"))),
        }
    }
}

/// Which text form a run trains against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Annotation {
    /// `[object, action]`.
    Full,
    /// `["something", action]`.
    Template,
}

impl Annotation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Annotation::Full),
            "template" => Ok(Annotation::Template),
            other => Err(Error::Config(format!(
                "train.annotation: expected full|template, got `{other}`"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Annotation::Full => "full",
            Annotation::Template => "template",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objectives: Objectives,
    pub variant: Variant,
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimPreset,
    /// Replaces the preset's learning rate.
    pub lr: Option<f64>,
    pub seed: u64,
    pub temperature: f64,
    pub lambda_vac: f64,
    pub lambda_atm: f64,
    pub annotation: Annotation,
    pub latents: usize,
    pub heads: usize,
    /// Training clips used, counted from the front of the split; 0 keeps all.
    pub max_clips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objectives: Objectives::ALL,
            variant: Variant::Perceiver,
            mode: Mode::None,
            epochs: 3,
            batch_size: 32,
            optim: OptimPreset::Desk,
            lr: None,
            seed: 1,
            temperature: DEFAULT_TEMPERATURE,
            lambda_vac: 1.0,
            lambda_atm: 1.0,
            annotation: Annotation::Full,
            latents: 8,
            heads: 1,
            max_clips: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if !(self.temperature > 0.0) || self.lr.is_some_and(|lr| !(lr > 0.0)) {
            return Err(Error::Config("train.temperature and optim.lr must be positive".into()));
        }
        if !(self.lambda_vac >= 0.0 && self.lambda_atm >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Patcher shape for a backbone.
    pub fn patcher_config(&self, backbone: &Backbone) -> PatcherConfig {
        let world = backbone.world();
        PatcherConfig {
            variant: self.variant,
            input_dim: backbone.embed_dim(),
            model_dim: backbone.joint_dim(),
            latents: self.latents,
            heads: self.heads,
            frames: world.frames_per_clip,
            patches_per_frame: world.patches_per_frame,
            init_std: 0.02,
        }
    }

    pub fn optim_config(&self) -> AdamWConfig {
        let mut c = self.optim.config();
        if let Some(lr) = self.lr {
            c.lr = lr;
        }
        c
    }

    pub fn canonical(&self) -> String {
        format!(
            "objectives={};variant={};mode={};epochs={};batch_size={};optim={};lr={:?};seed={};tau={:?};lambda_vac={:?};lambda_atm={:?};annotation={};latents={};heads={};max_clips={}",
            self.objectives.name(),
            self.variant.name(),
            self.mode.name(),
            self.epochs,
            self.batch_size,
            self.optim.name(),
            self.optim_config().lr,
            self.seed,
            self.temperature,
            self.lambda_vac,
            self.lambda_atm,
            self.annotation.name(),
            self.latents,
            self.heads,
            self.max_clips
        )
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.canonical().as_bytes())
    }
}

/// Frozen-backbone outputs of one clip, computed once before training.
#[derive(Debug, Clone)]
pub struct EncodedClip {
    pub clip_id: String,
    pub action_id: usize,
    pub kind: ActionKind,
    /// P×D.
    pub tokens: Tensor,
    /// P×D with the frame blocks reversed.
    pub reversed_tokens: Tensor,
    /// Unit d-vector v*.
    pub pooled: Vec<f64>,
    pub text_full: Vec<f64>,
    pub text_template: Vec<f64>,
    pub antonym_full: Option<Vec<f64>>,
    pub antonym_template: Option<Vec<f64>>,
    pub gated: bool,
}

impl EncodedClip {
    pub fn text(&self, a: Annotation) -> &[f64] {
        match a {
            Annotation::Full => &self.text_full,
            Annotation::Template => &self.text_template,
        }
    }

    pub fn antonym(&self, a: Annotation) -> Option<&[f64]> {
        match a {
            Annotation::Full => self.antonym_full.as_deref(),
            Annotation::Template => self.antonym_template.as_deref(),
        }
    }
}

/// Runs the frozen backbone over `clips`. The gate uses the clip's stored
/// saliency when present and recomputes it otherwise.
pub fn encode_clips(backbone: &Backbone, clips: &[ClipInstance], th: GateThresholds) -> Result<Vec<EncodedClip>> {
    let lex = &backbone.world().lexicon;
    clips
        .iter()
        .map(|clip| {
            let enc = backbone.encode_clip(clip)?;
            let text_full = backbone.encode_text(&clip.annotation)?;
            let text_template = backbone.encode_text(&clip.template_annotation)?;
            let (antonym_full, antonym_template) = match make_antonym_annotation(lex, clip) {
                Ok(full) => {
                    let mut tmpl = clip.template_annotation.clone();
                    tmpl[1] = full[1].clone();
                    (Some(backbone.encode_text(&full)?), Some(backbone.encode_text(&tmpl)?))
                }
                Err(Error::NotApplicable(_)) => (None, None),
                Err(e) => return Err(e),
            };
            let gated = match clip.saliency {
                Some(s) => s.gated,
                None => {
                    let frames = backbone.frame_encodings(clip)?;
                    let d = saliency_delta_vt(&frames, &text_full)?;
                    let t = saliency_theta_vv(&frames)?;
                    gate(d, t, th)
                }
            };
            Ok(EncodedClip {
                clip_id: clip.clip_id.clone(),
                action_id: clip.action_id,
                kind: clip.kind,
                reversed_tokens: backbone.reverse_tokens(&enc.visual_tokens),
                tokens: enc.visual_tokens,
                pooled: enc.pooled_visual,
                text_full,
                text_template,
                antonym_full,
                antonym_template,
                gated,
            })
        })
        .collect()
}

/// Loss of one batch under `cfg`. Patching runs use the configured objective
/// set; downstream runs use VTC through the mode's video representation.
pub fn batch_loss(
    g: &mut Graph,
    cfg: &TrainConfig,
    pcfg: &PatcherConfig,
    params: &ParamSet,
    batch: &[&EncodedClip],
) -> Result<(Var, LossBreakdown)> {
    let tau = cfg.temperature;
    let texts: Vec<Vec<f64>> = batch.iter().map(|c| c.text(cfg.annotation).to_vec()).collect();
    let tcols = g.constant(text_columns(&texts)?);
    let patcher = BoundPatcher::bind(g, pcfg, params)?;
    let mut patched = Vec::with_capacity(batch.len());
    for c in batch {
        let x = g.constant(c.tokens.clone());
        patched.push(patcher.forward(g, x)?);
    }

    let sim = match cfg.mode {
        Mode::None | Mode::Finetune => {
            let mut rows = Vec::with_capacity(batch.len());
            for v in &patched {
                rows.push(sim_max_tokens(g, *v, tcols)?);
            }
            g.stack_rows(&rows)?
        }
        Mode::Fuse => {
            let fuser = BoundFuser::bind(g, params, cfg.heads)?;
            let mut rows = Vec::with_capacity(batch.len());
            for (c, v) in batch.iter().zip(&patched) {
                let q = g.constant(Tensor::matrix(1, c.pooled.len(), c.pooled.clone())?);
                let f = fuser.forward(g, q, *v)?;
                rows.push(g.reshape(f, vec![c.pooled.len()])?);
            }
            let f = g.stack_rows(&rows)?;
            g.matmul(f, tcols)?
        }
        Mode::Sidetune => {
            let a = g.param(params, SIDETUNE_PARAM)?;
            let mut rows = Vec::with_capacity(batch.len());
            for (c, v) in batch.iter().zip(&patched) {
                let d = c.pooled.len();
                let q = g.constant(Tensor::matrix(1, d, c.pooled.clone())?);
                let m = g.mean_rows(*v)?;
                let m = g.reshape(m, vec![1, d])?;
                let blend = side_tune_blend(g, a, q, m)?;
                let n = g.normalize_rows(blend)?;
                rows.push(g.reshape(n, vec![d])?);
            }
            let f = g.stack_rows(&rows)?;
            g.matmul(f, tcols)?
        }
    };

    let objectives = if cfg.mode == Mode::None {
        cfg.objectives
    } else {
        Objectives::VTC
    };
    let mut out = LossBreakdown::default();
    let mut terms: Vec<Var> = Vec::new();

    let vtc = vtc_loss(g, sim, tau)?;
    out.vtc = g.scalar(vtc);
    if objectives.vtc {
        terms.push(vtc);
    }

    if objectives.vac {
        let has: Vec<bool> = batch.iter().map(|c| c.antonym(cfg.annotation).is_some()).collect();
        let antonyms: Vec<Vec<f64>> = batch
            .iter()
            .filter_map(|c| c.antonym(cfg.annotation).map(<[f64]>::to_vec))
            .collect();
        let anti = if antonyms.is_empty() {
            None
        } else {
            let acols = g.constant(text_columns(&antonyms)?);
            let mut rows = Vec::with_capacity(batch.len());
            for v in &patched {
                rows.push(sim_max_tokens(g, *v, acols)?);
            }
            Some(g.stack_rows(&rows)?)
        };
        if let Some(l) = vac_loss(g, sim, anti, &has, tau)? {
            out.vac = g.scalar(l);
            terms.push(g.scale(l, cfg.lambda_vac));
        }
    }

    if objectives.atm {
        let b = batch.len();
        let mut orig = Vec::new();
        let mut rev = Vec::new();
        for (i, c) in batch.iter().enumerate() {
            if !c.gated {
                continue;
            }
            orig.push(g.select(sim, i * b + i)?);
            let x = g.constant(c.reversed_tokens.clone());
            let vr = patcher.forward(g, x)?;
            let t = g.constant(Tensor::matrix(texts[i].len(), 1, texts[i].clone())?);
            rev.push(sim_max_tokens(g, vr, t)?);
        }
        out.atm_gated_count = orig.len();
        let flags = vec![true; orig.len()];
        if let Some(l) = atm_loss(g, &orig, &rev, &flags, tau)? {
            out.atm = g.scalar(l);
            terms.push(g.scale(l, cfg.lambda_atm));
        }
    }

    let total = if terms.len() == 1 {
        terms[0]
    } else {
        let s = g.concat(&terms)?;
        g.sum(s)
    };
    out.total = g.scalar(total);
    Ok((total, out))
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config_fp: u64,
    pub log: Vec<(u64, LossBreakdown)>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<std::path::PathBuf>,
}

pub const LOSS_LOG_HEADER: &str = "step\tvtc\tvac\tatm\tatm_gated_count\ttotal";

impl RunRecord {
    /// Loss log as TSV; values use the shortest round-trip decimal form.
    pub fn loss_tsv(&self) -> String {
        let mut s = String::from(LOSS_LOG_HEADER);
        s.push('\n');
        for (step, l) in &self.log {
            let _ = writeln!(
                s,
                "{step}\t{:?}\t{:?}\t{:?}\t{}\t{:?}",
                l.vtc, l.vac, l.atm, l.atm_gated_count, l.total
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ParamSet,
    pub record: RunRecord,
}

fn training_subset<'a>(cfg: &TrainConfig, data: &'a [EncodedClip]) -> &'a [EncodedClip] {
    if cfg.max_clips > 0 && cfg.max_clips < data.len() {
        &data[..cfg.max_clips]
    } else {
        data
    }
}

fn run_loop(cfg: &TrainConfig, pcfg: &PatcherConfig, mut params: ParamSet, data: &[EncodedClip]) -> Result<Trained> {
    let start = Instant::now();
    let data = training_subset(cfg, data);
    if data.len() < 2 {
        return Err(Error::Config("training needs at least 2 clips".into()));
    }
    let mut opt = AdamW::new(cfg.optim_config());
    let shuffle = SeedTree::new(cfg.seed).child("shuffle");
    let mut log = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut shuffle.index(epoch as u64).rng());
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&EncodedClip> = chunk.iter().map(|&i| &data[i]).collect();
            let mut g = Graph::new();
            let (loss, breakdown) = batch_loss(&mut g, cfg, pcfg, &params, &batch)?;
            if !breakdown.total.is_finite() {
                return Err(Error::NanLoss { step: step as usize });
            }
            g.backward(loss)?;
            opt.step(&mut params, &g.param_grads())?;
            log.push((step, breakdown));
            step += 1;
        }
    }
    Ok(Trained {
        params,
        record: RunRecord {
            config_fp: cfg.fingerprint(),
            log,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            checkpoint: None,
        },
    })
}

/// Trains a fresh patcher on the configured objective set.
pub fn train_patcher(cfg: &TrainConfig, pcfg: &PatcherConfig, data: &[EncodedClip]) -> Result<Trained> {
    cfg.validate()?;
    if cfg.mode != Mode::None {
        return Err(Error::Config(format!(
            "train-patcher expects train.mode = none, got `{}`",
            cfg.mode.name()
        )));
    }
    let params = init_params(pcfg, SeedTree::new(cfg.seed).child("patcher-init").seed())?;
    run_loop(cfg, pcfg, params, data)
}

/// Continues from a trained patcher in one of the downstream modes, with VTC only.
pub fn train_downstream(
    cfg: &TrainConfig,
    pcfg: &PatcherConfig,
    patcher: &ParamSet,
    data: &[EncodedClip],
) -> Result<Trained> {
    cfg.validate()?;
    let mut params = patcher.clone();
    match cfg.mode {
        Mode::None => {
            return Err(Error::Config(
                "train-downstream expects train.mode = fuse|finetune|sidetune".into(),
            ))
        }
        Mode::Finetune => {}
        Mode::Fuse => params.extend(init_fuser(
            pcfg.model_dim,
            pcfg.init_std,
            SeedTree::new(cfg.seed).child("fuser-init").seed(),
        )),
        Mode::Sidetune => params.extend(init_sidetune()),
    }
    run_loop(cfg, pcfg, params, data)
}

/// Trained parameters plus the metadata needed to rebuild the model.
pub fn checkpoint_tensors(params: &ParamSet, pcfg: &PatcherConfig, mode: Mode, config_fp: u64) -> NamedTensors {
    let mut out: NamedTensors = params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    out.push((
        "meta.patcher".into(),
        Tensor::vector(vec![
            pcfg.variant.code(),
            pcfg.input_dim as f64,
            pcfg.model_dim as f64,
            pcfg.latents as f64,
            pcfg.heads as f64,
            pcfg.frames as f64,
            pcfg.patches_per_frame as f64,
            pcfg.init_std,
        ]),
    ));
    out.push(("meta.mode".into(), Tensor::scalar(mode.code())));
    out.push((
        "meta.config_fp".into(),
        Tensor::vector(vec![(config_fp >> 32) as f64, (config_fp & 0xffff_ffff) as f64]),
    ));
    out
}

/// A model restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub patcher: PatcherConfig,
    pub mode: Mode,
    pub config_fp: u64,
    pub params: ParamSet,
}

fn meta_err(msg: &str) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn model_from_tensors(tensors: NamedTensors) -> Result<LoadedModel> {
    let mut params = ParamSet::new();
    let mut meta_patcher = None;
    let mut mode = None;
    let mut fp = None;
    for (name, t) in tensors {
        match name.as_str() {
            "meta.patcher" => meta_patcher = Some(t),
            "meta.mode" => mode = Some(Mode::from_code(t.item())?),
            "meta.config_fp" => {
                let d = t.data();
                if d.len() != 2 {
                    return Err(meta_err("meta tensor has the wrong length"));
                }
                fp = Some(((d[0] as u64) << 32) | d[1] as u64);
            }
            _ => {
                params.insert(name, t);
            }
        }
    }
    let m = meta_patcher.ok_or_else(|| meta_err("missing meta tensor"))?;
    let d = m.data();
    if d.len() != 8 {
        return Err(meta_err("meta tensor has the wrong length"));
    }
    let variant = match d[0] as i64 {
        0 => Variant::Perceiver,
        1 => Variant::Transformer,
        _ => return Err(meta_err("unknown patcher variant")),
    };
    let patcher = PatcherConfig {
        variant,
        input_dim: d[1] as usize,
        model_dim: d[2] as usize,
        latents: d[3] as usize,
        heads: d[4] as usize,
        frames: d[5] as usize,
        patches_per_frame: d[6] as usize,
        init_std: d[7],
    };
    Ok(LoadedModel {
        patcher,
        mode: mode.ok_or_else(|| meta_err("missing meta tensor"))?,
        config_fp: fp.ok_or_else(|| meta_err("missing meta tensor"))?,
        params,
    })
}
