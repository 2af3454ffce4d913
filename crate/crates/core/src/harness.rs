//! Evaluation: binary probes, retrieval recall, zero-shot classification and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::fuser::{argmax, ensemble_predict, side_tune_blend_value, BoundFuser, SIDETUNE_PARAM};
use crate::patcher::{
    max_token_similarity, mean_pooled_similarity, mean_row, patch, BoundPatcher, PatcherConfig,
};
use crate::tensor::{cosine, softmax, Graph, ParamSet, Tensor};
use crate::world::{ActionKind, ClipInstance, Probes, TEMPLATE_OBJECT};

/// Similarity head used with token-matrix representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    MaxTokens,
    MeanPooled,
}

/// What a model makes of one clip; paired with a text by [`similarity`].
#[derive(Debug, Clone, PartialEq)]
pub enum VideoRep {
    /// Unit vector compared by cosine.
    Vector(Vec<f64>),
    Tokens(Tensor, Head),
    /// Ground truth as seen by an oracle: the depicted object and action names.
    Truth { object: String, action: String },
    Constant,
}

/// A text together with its frozen embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextRep {
    pub tokens: Vec<String>,
    pub emb: Vec<f64>,
}

impl TextRep {
    pub fn encode(backbone: &Backbone, tokens: &[String]) -> Result<Self> {
        Ok(Self {
            tokens: tokens.to_vec(),
            emb: backbone.encode_text(tokens)?,
        })
    }
}

pub fn similarity(rep: &VideoRep, text: &TextRep) -> Result<f64> {
    match rep {
        VideoRep::Vector(v) => cosine(v, &text.emb),
        VideoRep::Tokens(v, Head::MaxTokens) => max_token_similarity(v, &text.emb),
        VideoRep::Tokens(v, Head::MeanPooled) => mean_pooled_similarity(v, &text.emb),
        VideoRep::Truth { object, action } => {
            let obj_ok = text.tokens[0] == *object || text.tokens[0] == TEMPLATE_OBJECT;
            Ok(if obj_ok && text.tokens[1] == *action { 1.0 } else { 0.0 })
        }
        VideoRep::Constant => Ok(0.0),
    }
}

/// A scoring model. Implementations never modify parameters.
pub trait VideoModel {
    fn tag(&self) -> String;
    fn represent(&self, clip: &ClipInstance) -> Result<VideoRep>;
}

pub struct BackboneModel<'a> {
    pub backbone: &'a Backbone,
}

impl VideoModel for BackboneModel<'_> {
    fn tag(&self) -> String {
        "backbone".into()
    }

    fn represent(&self, clip: &ClipInstance) -> Result<VideoRep> {
        Ok(VideoRep::Vector(self.backbone.encode_clip(clip)?.pooled_visual))
    }
}

/// Patched tokens scored with a token head.
pub struct PatcherModel<'a> {
    pub tag: String,
    pub backbone: &'a Backbone,
    pub config: PatcherConfig,
    pub params: &'a ParamSet,
    pub head: Head,
}

impl VideoModel for PatcherModel<'_> {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn represent(&self, clip: &ClipInstance) -> Result<VideoRep> {
        let tokens = self.backbone.encode_clip(clip)?.visual_tokens;
        Ok(VideoRep::Tokens(patch(&self.config, self.params, &tokens)?, self.head))
    }
}

/// Patcher followed by the knowledge fuser.
pub struct FusedModel<'a> {
    pub tag: String,
    pub backbone: &'a Backbone,
    pub config: PatcherConfig,
    pub params: &'a ParamSet,
}

impl VideoModel for FusedModel<'_> {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn represent(&self, clip: &ClipInstance) -> Result<VideoRep> {
        let enc = self.backbone.encode_clip(clip)?;
        let mut g = Graph::new();
        let patcher = BoundPatcher::bind(&mut g, &self.config, self.params)?;
        let fuser = BoundFuser::bind(&mut g, self.params, self.config.heads)?;
        let x = g.constant(enc.visual_tokens);
        let v = patcher.forward(&mut g, x)?;
        let d = enc.pooled_visual.len();
        let q = g.constant(Tensor::matrix(1, d, enc.pooled_visual)?);
        let f = fuser.forward(&mut g, q, v)?;
        Ok(VideoRep::Vector(g.value(f).data().to_vec()))
    }
}

/// Side-tuning blend of the pooled backbone feature and the mean patched token.
pub struct SideTunedModel<'a> {
    pub tag: String,
    pub backbone: &'a Backbone,
    pub config: PatcherConfig,
    pub params: &'a ParamSet,
}

impl VideoModel for SideTunedModel<'_> {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn represent(&self, clip: &ClipInstance) -> Result<VideoRep> {
        let enc = self.backbone.encode_clip(clip)?;
        let a = self
            .params
            .get(SIDETUNE_PARAM)
            .ok_or_else(|| Error::Unknown {
                kind: "parameter",
                name: SIDETUNE_PARAM.into(),
            })?
            .item();
        let v = patch(&self.config, self.params, &enc.visual_tokens)?;
        let blend = side_tune_blend_value(a, &enc.pooled_visual, &mean_row(&v));
        Ok(VideoRep::Vector(blend))
    }
}

/// Reads the world's ground truth; reversing a directional clip turns it into its antonym.
pub struct OracleModel<'a> {
    pub backbone: &'a Backbone,
}

impl VideoModel for OracleModel<'_> {
    fn tag(&self) -> String {
        "oracle".into()
    }

    fn represent(&self, clip: &ClipInstance) -> Result<VideoRep> {
        let world = self.backbone.world();
        let lex = &world.lexicon;
        let mut action = lex.get(clip.action_id)?.name.clone();
        if clip.reversed && clip.kind == ActionKind::Directional {
            if let Some(anti) = lex.antonym_of(clip.action_id)? {
                action = lex.get(anti)?.name.clone();
            }
        }
        Ok(VideoRep::Truth {
            object: world.object_name(clip.object_id),
            action,
        })
    }
}

pub struct ConstantModel;

impl VideoModel for ConstantModel {
    fn tag(&self) -> String {
        "constant".into()
    }

    fn represent(&self, _clip: &ClipInstance) -> Result<VideoRep> {
        Ok(VideoRep::Constant)
    }
}

/// Accuracy of a binary probe with its query count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeScore {
    pub accuracy: f64,
    pub n: usize,
}

/// 1 when `a > b`, 0.5 on an exact tie, 0 otherwise.
pub fn binary_credit(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

fn mean_credit(credits: &[f64], probe: &str) -> Result<ProbeScore> {
    if credits.is_empty() {
        return Err(Error::NotApplicable(format!("{probe}: no probes in split")));
    }
    Ok(ProbeScore {
        accuracy: credits.iter().sum::<f64>() / credits.len() as f64,
        n: credits.len(),
    })
}

fn check_aligned(clips: &[ClipInstance], probes: &[Probes]) -> Result<()> {
    if clips.len() != probes.len() {
        return Err(Error::Shape {
            op: "probes",
            left: vec![clips.len()],
            right: vec![probes.len()],
        });
    }
    Ok(())
}

/// Action antonym: the true text against the antonym text.
pub fn score_aa(model: &dyn VideoModel, backbone: &Backbone, clips: &[ClipInstance], probes: &[Probes]) -> Result<ProbeScore> {
    check_aligned(clips, probes)?;
    let mut credits = Vec::new();
    for (clip, p) in clips.iter().zip(probes) {
        let Some(anti) = &p.antonym else { continue };
        let rep = model.represent(clip)?;
        let t = similarity(&rep, &TextRep::encode(backbone, &clip.annotation)?)?;
        let a = similarity(&rep, &TextRep::encode(backbone, anti)?)?;
        credits.push(binary_credit(t, a));
    }
    mean_credit(&credits, "action antonym")
}

/// Video reversal: the clip against its reversal under the clip's text.
pub fn score_vr(model: &dyn VideoModel, backbone: &Backbone, clips: &[ClipInstance], probes: &[Probes]) -> Result<ProbeScore> {
    check_aligned(clips, probes)?;
    let mut credits = Vec::new();
    for (clip, p) in clips.iter().zip(probes) {
        let Some(rev) = &p.reversed else { continue };
        let text = TextRep::encode(backbone, &clip.annotation)?;
        let o = similarity(&model.represent(clip)?, &text)?;
        let r = similarity(&model.represent(rev)?, &text)?;
        credits.push(binary_credit(o, r));
    }
    mean_credit(&credits, "video reversal")
}

/// Object replacement: the true text against the text naming another object.
pub fn score_or(model: &dyn VideoModel, backbone: &Backbone, clips: &[ClipInstance], probes: &[Probes]) -> Result<ProbeScore> {
    check_aligned(clips, probes)?;
    let mut credits = Vec::new();
    for (clip, p) in clips.iter().zip(probes) {
        let rep = model.represent(clip)?;
        let t = similarity(&rep, &TextRep::encode(backbone, &clip.annotation)?)?;
        let o = similarity(&rep, &TextRep::encode(backbone, &p.object_replaced)?)?;
        credits.push(binary_credit(t, o));
    }
    mean_credit(&credits, "object replacement")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Task {
    /// Object and action text.
    Full,
    /// Object hidden behind the placeholder word.
    Template,
    /// Directional clips only, with template text.
    Temporal,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Full => "full",
            Task::Template => "template",
            Task::Temporal => "temporal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Task::Full),
            "template" => Ok(Task::Template),
            "temporal" => Ok(Task::Temporal),
            other => Err(Error::Unknown {
                kind: "retrieval task",
                name: other.into(),
            }),
        }
    }

    pub fn text(self, clip: &ClipInstance) -> &[String] {
        match self {
            Task::Full => &clip.annotation,
            Task::Template | Task::Temporal => &clip.template_annotation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub task: Task,
    /// (k, recall) per requested k, video to text.
    pub v2t: Vec<(usize, f64)>,
    /// Text to video; full task only.
    pub t2v: Option<Vec<(usize, f64)>>,
    pub video_queries: usize,
    pub text_queries: usize,
    pub candidates: usize,
}

impl RetrievalResult {
    pub fn v2t_at(&self, k: usize) -> Option<f64> {
        self.v2t.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }

    pub fn t2v_at(&self, k: usize) -> Option<f64> {
        self.t2v.as_ref()?.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

/// Position of `target` when `scores` are ranked descending, ties to the lower index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|(j, x)| **x > s || (**x == s && *j < target))
        .count()
}

/// Clips of `clips` that enter `task`.
pub fn task_clips(clips: &[ClipInstance], task: Task) -> Vec<&ClipInstance> {
    clips
        .iter()
        .filter(|c| task != Task::Temporal || c.kind == ActionKind::Directional)
        .collect()
}

/// Recall@k with the distinct task texts of the split as the candidate pool.
pub fn eval_retrieval(
    model: &dyn VideoModel,
    backbone: &Backbone,
    clips: &[ClipInstance],
    task: Task,
    ks: &[usize],
) -> Result<RetrievalResult> {
    let clips = task_clips(clips, task);
    if clips.is_empty() {
        return Err(Error::NotApplicable(format!("{} retrieval: empty split", task.name())));
    }
    let mut pool: Vec<Vec<String>> = Vec::new();
    let mut index: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    let mut truth = Vec::with_capacity(clips.len());
    for c in &clips {
        let t = task.text(c).to_vec();
        let id = *index.entry(t.clone()).or_insert_with(|| {
            pool.push(t);
            pool.len() - 1
        });
        truth.push(id);
    }
    let both = task == Task::Full;
    for &k in ks {
        if k == 0 || k > pool.len() || (both && k > clips.len()) {
            return Err(Error::NotApplicable(format!(
                "recall@{k} exceeds the candidate pool of {}",
                pool.len()
            )));
        }
    }
    let texts: Vec<TextRep> = pool.iter().map(|t| TextRep::encode(backbone, t)).collect::<Result<_>>()?;
    let mut scores = Vec::with_capacity(clips.len());
    for c in &clips {
        let rep = model.represent(c)?;
        let row: Vec<f64> = texts.iter().map(|t| similarity(&rep, t)).collect::<Result<_>>()?;
        scores.push(row);
    }

    let v2t_ranks: Vec<usize> = scores.iter().zip(&truth).map(|(row, &t)| rank_of(row, t)).collect();
    let recall = |ranks: &[usize], k: usize| ranks.iter().filter(|r| **r < k).count() as f64 / ranks.len() as f64;
    let v2t = ks.iter().map(|&k| (k, recall(&v2t_ranks, k))).collect();

    let t2v = if both {
        let mut best = Vec::with_capacity(pool.len());
        for j in 0..pool.len() {
            let col: Vec<f64> = scores.iter().map(|row| row[j]).collect();
            let r = (0..clips.len())
                .filter(|&i| truth[i] == j)
                .map(|i| rank_of(&col, i))
                .min()
                .expect("every candidate comes from a clip");
            best.push(r);
        }
        Some(ks.iter().map(|&k| (k, recall(&best, k))).collect())
    } else {
        None
    };
    Ok(RetrievalResult {
        task,
        v2t,
        t2v,
        video_queries: clips.len(),
        text_queries: pool.len(),
        candidates: pool.len(),
    })
}

/// Class distribution over `texts` from a representation, at temperature `tau`.
pub fn class_probabilities(rep: &VideoRep, texts: &[TextRep], tau: f64) -> Result<Vec<f64>> {
    let logits: Vec<f64> = texts
        .iter()
        .map(|t| similarity(rep, t).map(|s| s / tau))
        .collect::<Result<_>>()?;
    Ok(softmax(&logits))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroShotResult {
    pub accuracy: f64,
    pub n: usize,
}

/// Zero-shot action classification. With `ensemble_with`, each clip is
/// assigned the argmax of the summed class distributions of both models.
pub fn zero_shot_classify(
    model: &dyn VideoModel,
    ensemble_with: Option<&dyn VideoModel>,
    backbone: &Backbone,
    clips: &[ClipInstance],
    candidates: &[Vec<String>],
    tau: f64,
) -> Result<ZeroShotResult> {
    if candidates.is_empty() {
        return Err(Error::NotApplicable("zero-shot: empty candidate list".into()));
    }
    if clips.is_empty() {
        return Err(Error::NotApplicable("zero-shot: empty split".into()));
    }
    let lex = &backbone.world().lexicon;
    let texts: Vec<TextRep> = candidates
        .iter()
        .map(|t| TextRep::encode(backbone, t))
        .collect::<Result<_>>()?;
    let mut correct = 0usize;
    for clip in clips {
        let name = &lex.get(clip.action_id)?.name;
        let truth = candidates
            .iter()
            .position(|c| c.last() == Some(name))
            .ok_or_else(|| Error::NotApplicable(format!("zero-shot: action `{name}` is not a candidate")))?;
        let p_a = class_probabilities(&model.represent(clip)?, &texts, tau)?;
        let pred = match ensemble_with {
            Some(other) => {
                let p_b = class_probabilities(&other.represent(clip)?, &texts, tau)?;
                ensemble_predict(&p_a, &p_b)?.class
            }
            None => argmax(&p_a),
        };
        correct += usize::from(pred == truth);
    }
    Ok(ZeroShotResult {
        accuracy: correct as f64 / clips.len() as f64,
        n: clips.len(),
    })
}

/// `value` rounded to 3 decimals, halves upward. The small slack absorbs
/// binary representation error in ratios such as 0.1235.
pub fn format_3dp(value: f64) -> String {
    let x = value * 1000.0;
    let fl = x.floor();
    let r = if x - fl >= 0.5 - 1e-9 { fl + 1.0 } else { fl };
    let out = r / 1000.0;
    let s = format!("{out:.3}");
    if s == "-0.000" { "0.000".into() } else { s }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model_tag: String,
    pub task: String,
    pub metric: String,
    /// Stored as printed.
    pub value: String,
    pub n: usize,
    pub seed: u64,
    pub config_fp: u64,
}

pub const REPORT_HEADER: &str = "model_tag\ttask\tmetric\tvalue\tn\tseed\tconfig_fp";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn push(&mut self, model_tag: &str, task: &str, metric: &str, value: f64, n: usize, seed: u64, config_fp: u64) {
        self.rows.push(ReportRow {
            model_tag: model_tag.into(),
            task: task.into(),
            metric: metric.into(),
            value: format_3dp(value),
            n,
            seed,
            config_fp,
        });
    }

    pub fn value(&self, model_tag: &str, task: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model_tag == model_tag && r.task == task && r.metric == metric)
            .and_then(|r| r.value.parse().ok())
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{:016x}",
                r.model_tag, r.task, r.metric, r.value, r.n, r.seed, r.config_fp
            );
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == REPORT_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "missing report header".into(),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let err = |msg: &str| Error::Parse {
                line: i + 1,
                msg: msg.into(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(err("expected 7 columns"));
            }
            f[3].parse::<f64>().map_err(|_| err("value is not a number"))?;
            rows.push(ReportRow {
                model_tag: f[0].into(),
                task: f[1].into(),
                metric: f[2].into(),
                value: f[3].into(),
                n: f[4].parse().map_err(|_| err("n is not an integer"))?,
                seed: f[5].parse().map_err(|_| err("seed is not an integer"))?,
                config_fp: u64::from_str_radix(f[6], 16).map_err(|_| err("config_fp is not hex"))?,
            });
        }
        Ok(Self { rows })
    }

    /// One table per task; models as rows, metrics as columns, in first-seen order.
    pub fn to_markdown(&self) -> String {
        let mut tasks: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !tasks.contains(&r.task.as_str()) {
                tasks.push(&r.task);
            }
        }
        let mut s = String::new();
        for task in tasks {
            let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.task == task).collect();
            let mut metrics: Vec<&str> = Vec::new();
            let mut models: Vec<&str> = Vec::new();
            for r in &rows {
                if !metrics.contains(&r.metric.as_str()) {
                    metrics.push(&r.metric);
                }
                if !models.contains(&r.model_tag.as_str()) {
                    models.push(&r.model_tag);
                }
            }
            let _ = writeln!(s, "### {task}\n");
            let _ = writeln!(s, "| model | {} |", metrics.join(" | "));
            let _ = writeln!(s, "|---|{}", "---|".repeat(metrics.len()));
            for m in models {
                let cells: Vec<&str> = metrics
                    .iter()
                    .map(|k| {
                        rows.iter()
                            .find(|r| r.model_tag == m && r.metric == *k)
                            .map_or("-", |r| r.value.as_str())
                    })
                    .collect();
                let _ = writeln!(s, "| {m} | {} |", cells.join(" | "));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_markdown(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_markdown()).map_err(|e| Error::io(path, e))
    }
}

/// Probe scores of one model as report rows.
pub fn bench_report(
    model: &dyn VideoModel,
    backbone: &Backbone,
    clips: &[ClipInstance],
    probes: &[Probes],
    seed: u64,
    config_fp: u64,
) -> Result<EvalReport> {
    let mut rep = EvalReport::default();
    let tag = model.tag();
    let aa = score_aa(model, backbone, clips, probes)?;
    let vr = score_vr(model, backbone, clips, probes)?;
    let or = score_or(model, backbone, clips, probes)?;
    rep.push(&tag, "bench", "AA", aa.accuracy, aa.n, seed, config_fp);
    rep.push(&tag, "bench", "VR", vr.accuracy, vr.n, seed, config_fp);
    rep.push(&tag, "bench", "OR", or.accuracy, or.n, seed, config_fp);
    Ok(rep)
}

/// Retrieval recalls of one model as report rows (`R1_v2t`, `R5_t2v`, ...);
/// two-way tasks also get the direction average `R{k}_avg`.
pub fn retrieval_report(result: &RetrievalResult, tag: &str, seed: u64, config_fp: u64) -> EvalReport {
    let mut rep = EvalReport::default();
    let task = result.task.name();
    for (k, r) in &result.v2t {
        rep.push(tag, task, &format!("R{k}_v2t"), *r, result.video_queries, seed, config_fp);
    }
    if let Some(t2v) = &result.t2v {
        for (k, r) in t2v {
            rep.push(tag, task, &format!("R{k}_t2v"), *r, result.text_queries, seed, config_fp);
        }
        for ((k, a), (_, b)) in result.v2t.iter().zip(t2v) {
            let n = result.video_queries + result.text_queries;
            rep.push(tag, task, &format!("R{k}_avg"), 0.5 * (a + b), n, seed, config_fp);
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::world::{build_dataset, Dataset, SplitCounts, WorldConfig};

    fn setup() -> (Backbone, Dataset) {
        let world = WorldConfig::default();
        let counts = SplitCounts {
            train: 48,
            eval: 120,
            heldout: 40,
            max_repeats: 32,
        };
        let ds = build_dataset(&world, counts).unwrap();
        let bb = Backbone::new(&world, &BackboneConfig::default()).unwrap();
        (bb, ds)
    }

    #[test]
    fn credit_rule() {
        assert_eq!(binary_credit(0.3, 0.2), 1.0);
        assert_eq!(binary_credit(0.2, 0.2), 0.5);
        assert_eq!(binary_credit(0.1, 0.2), 0.0);
    }

    #[test]
    fn oracle_and_constant_probes() {
        let (bb, ds) = setup();
        let oracle = OracleModel { backbone: &bb };
        for f in [score_aa, score_vr, score_or] {
            assert_eq!(f(&oracle, &bb, &ds.eval, &ds.probes).unwrap().accuracy, 1.0);
            assert_eq!(f(&ConstantModel, &bb, &ds.eval, &ds.probes).unwrap().accuracy, 0.5);
        }
    }

    #[test]
    fn backbone_reversal_is_exactly_chance() {
        let (bb, ds) = setup();
        let m = BackboneModel { backbone: &bb };
        assert_eq!(score_vr(&m, &bb, &ds.eval, &ds.probes).unwrap().accuracy, 0.5);
    }

    #[test]
    fn empty_split_is_an_error() {
        let (bb, _) = setup();
        assert!(score_aa(&ConstantModel, &bb, &[], &[]).is_err());
    }

    #[test]
    fn rank_ties_go_to_lower_index() {
        assert_eq!(rank_of(&[0.5, 0.5, 0.1], 0), 0);
        assert_eq!(rank_of(&[0.5, 0.5, 0.1], 1), 1);
        assert_eq!(rank_of(&[0.1, 0.9, 0.1], 2), 2);
    }

    #[test]
    fn exhaustive_recall_and_monotone() {
        let (bb, ds) = setup();
        let m = BackboneModel { backbone: &bb };
        let first = eval_retrieval(&m, &bb, &ds.eval, Task::Template, &[1]).unwrap();
        let c = first.candidates;
        let r = eval_retrieval(&m, &bb, &ds.eval, Task::Template, &[1, 5, c]).unwrap();
        assert_eq!(r.v2t_at(c), Some(1.0));
        assert!(r.v2t[0].1 <= r.v2t[1].1);
        assert!(r.t2v.is_none());
        assert!(eval_retrieval(&m, &bb, &ds.eval, Task::Template, &[c + 1]).is_err());
        let full = eval_retrieval(&m, &bb, &ds.eval, Task::Full, &[1, 5]).unwrap();
        assert!(full.t2v_at(1).unwrap() <= full.t2v_at(5).unwrap());
    }

    #[test]
    fn oracle_retrieval_is_perfect_and_constant_is_first_candidate() {
        let (bb, ds) = setup();
        let o = OracleModel { backbone: &bb };
        let r = eval_retrieval(&o, &bb, &ds.eval, Task::Full, &[1]).unwrap();
        assert_eq!(r.v2t_at(1), Some(1.0));
        assert_eq!(r.t2v_at(1), Some(1.0));
        let r = eval_retrieval(&ConstantModel, &bb, &ds.eval, Task::Temporal, &[1]).unwrap();
        let clips = task_clips(&ds.eval, Task::Temporal);
        let first = &clips[0].template_annotation;
        let expect = clips.iter().filter(|c| &c.template_annotation == first).count() as f64 / clips.len() as f64;
        assert_eq!(r.v2t_at(1), Some(expect));
    }

    #[test]
    fn zero_shot_ensemble_with_uninformative_path() {
        let (bb, ds) = setup();
        let lex = &bb.world().lexicon;
        let cands: Vec<Vec<String>> = bb
            .world()
            .heldout_action_ids()
            .iter()
            .map(|&a| vec![TEMPLATE_OBJECT.to_string(), lex.get(a).unwrap().name.clone()])
            .collect();
        let oracle = OracleModel { backbone: &bb };
        let alone = zero_shot_classify(&oracle, None, &bb, &ds.heldout, &cands, 0.05).unwrap();
        assert_eq!(alone.accuracy, 1.0);
        let ens = zero_shot_classify(&ConstantModel, Some(&oracle), &bb, &ds.heldout, &cands, 0.05).unwrap();
        assert_eq!(ens.accuracy, 1.0);
        assert!(zero_shot_classify(&oracle, None, &bb, &ds.heldout, &[], 0.05).is_err());
    }

    #[test]
    fn half_up_formatting() {
        assert_eq!(format_3dp(0.1235), "0.124");
        assert_eq!(format_3dp(0.0005), "0.001");
        assert_eq!(format_3dp(0.12349), "0.123");
        assert_eq!(format_3dp(1.0), "1.000");
        assert_eq!(format_3dp(0.5), "0.500");
        assert_eq!(format_3dp(2.0 / 3.0), "0.667");
    }

    #[test]
    fn report_round_trip_and_markdown() {
        let mut r = EvalReport::default();
        r.push("backbone", "bench", "AA", 0.5, 600, 1, 0xabc);
        r.push("backbone", "bench", "VR", 0.5, 300, 1, 0xabc);
        r.push("paxion", "full", "R1_v2t", 0.61234, 600, 1, 0xabc);
        let tsv = r.to_tsv();
        let back = EvalReport::parse_tsv(&tsv).unwrap();
        assert_eq!(back.to_tsv(), tsv);
        assert_eq!(back.value("paxion", "full", "R1_v2t"), Some(0.612));
        assert!(tsv.contains("0000000000000abc"));
        let md = r.to_markdown();
        assert!(md.contains("### bench"));
        assert!(md.contains("| backbone | 0.500 | 0.500 |"));
        assert!(EvalReport::parse_tsv("bad\n").is_err());
    }
}
