use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use super::{generate_clip, make_antonym_annotation, object_replace, reverse_clip, ActionKind, ClipInstance, WorldConfig};
use crate::error::{Error, Result};
use crate::rng::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Eval,
    HeldoutDomain,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::HeldoutDomain => "heldout_domain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            "heldout_domain" => Ok(Split::HeldoutDomain),
            other => Err(Error::Unknown {
                kind: "split",
                name: other.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub eval: usize,
    pub heldout: usize,
    /// Upper bound on clips per (object, action) pair within one split.
    pub max_repeats: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 2400,
            eval: 600,
            heldout: 200,
            max_repeats: 32,
        }
    }
}

/// Probe material attached to one eval clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Probes {
    /// Action token swapped for its antonym; directional clips only.
    pub antonym: Option<Vec<String>>,
    /// Time-reversed clip; directional clips only.
    pub reversed: Option<ClipInstance>,
    pub object_replaced: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub clip_id: String,
    pub object_id: usize,
    pub action_id: usize,
    pub action_name: String,
    pub kind: ActionKind,
    pub split: Split,
    pub num_frames: usize,
    pub salient_gt: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub fingerprint: u64,
    pub train: usize,
    pub eval: usize,
    pub heldout: usize,
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_HEADER: &str =
    "clip_id\tobject_id\taction_id\taction_name\tkind\tsplit\tnum_frames\tsalient_gt\tseed";

impl DatasetManifest {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.clip_id,
                r.object_id,
                r.action_id,
                r.action_name,
                r.kind.name(),
                r.split.name(),
                r.num_frames,
                r.salient_gt,
                r.seed
            );
        }
        out
    }

    pub fn meta(&self) -> String {
        format!(
            "fingerprint\t{:016x}\ntrain\t{}\neval\t{}\nheldout_domain\t{}\n",
            self.fingerprint, self.train, self.eval, self.heldout
        )
    }

    pub fn parse_rows(text: &str) -> Result<Vec<ManifestRow>> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == MANIFEST_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "manifest header mismatch".into(),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let bad = |msg: String| Error::Parse { line: lineno, msg };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 9 {
                return Err(bad(format!("expected 9 columns, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|e| bad(format!("`{s}`: {e}")));
            rows.push(ManifestRow {
                clip_id: f[0].to_string(),
                object_id: num(f[1])? as usize,
                action_id: num(f[2])? as usize,
                action_name: f[3].to_string(),
                kind: ActionKind::parse(f[4]).map_err(|e| bad(e.to_string()))?,
                split: Split::parse(f[5]).map_err(|e| bad(e.to_string()))?,
                num_frames: num(f[6])? as usize,
                salient_gt: f[7].parse().map_err(|e| bad(format!("`{}`: {e}", f[7])))?,
                seed: num(f[8])?,
            });
        }
        Ok(rows)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = dir.join("manifest.tsv");
        fs::write(&m, self.to_tsv()).map_err(|e| Error::io(&m, e))?;
        let meta = dir.join("dataset.meta");
        fs::write(&meta, self.meta()).map_err(|e| Error::io(&meta, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let m = dir.join("manifest.tsv");
        let text = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
        let rows = Self::parse_rows(&text)?;
        let meta_path = dir.join("dataset.meta");
        let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let mut out = DatasetManifest {
            fingerprint: 0,
            train: 0,
            eval: 0,
            heldout: 0,
            rows,
        };
        for (i, line) in meta.lines().enumerate() {
            let bad = |msg: String| Error::Parse { line: i + 1, msg };
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected key<TAB>value".into()))?;
            match k {
                "fingerprint" => {
                    out.fingerprint =
                        u64::from_str_radix(v, 16).map_err(|e| bad(e.to_string()))?
                }
                "train" => out.train = v.parse().map_err(|e| bad(format!("{e}")))?,
                "eval" => out.eval = v.parse().map_err(|e| bad(format!("{e}")))?,
                "heldout_domain" => out.heldout = v.parse().map_err(|e| bad(format!("{e}")))?,
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: WorldConfig,
    pub train: Vec<ClipInstance>,
    pub eval: Vec<ClipInstance>,
    /// Aligned with `eval`.
    pub probes: Vec<Probes>,
    pub heldout: Vec<ClipInstance>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[ClipInstance] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
            Split::HeldoutDomain => &self.heldout,
        }
    }

    /// Writes every clip as N×W little-endian f64 blocks plus an offset table.
    pub fn export_frames(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut index = String::from("clip_id\toffset\trows\tcols\n");
        for clip in self.train.iter().chain(&self.eval).chain(&self.heldout) {
            let _ = writeln!(
                index,
                "{}\t{}\t{}\t{}",
                clip.clip_id,
                blob.len(),
                clip.frames.rows(),
                clip.frames.cols()
            );
            for v in clip.frames.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let b = dir.join("frames.bin");
        fs::write(&b, blob).map_err(|e| Error::io(&b, e))?;
        let i = dir.join("frames_index.tsv");
        fs::write(&i, index).map_err(|e| Error::io(&i, e))
    }
}

/// Stratification units: one object with either an antonym pair or a lone action,
/// so both members of a pair always land together.
fn units(config: &WorldConfig, objects: &[usize], actions: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let mut out = Vec::new();
    for &o in objects {
        for &a in actions {
            match config.lexicon.get(a).expect("valid id").antonym {
                Some(b) if b < a && actions.contains(&b) => {}
                Some(b) if actions.contains(&b) => out.push((o, vec![a, b])),
                _ => out.push((o, vec![a])),
            }
        }
    }
    out
}

fn draw_pairs(
    units: &[(usize, Vec<usize>)],
    count: usize,
    max_repeats: usize,
    tree: SeedTree,
    what: &str,
) -> Result<Vec<(usize, usize)>> {
    let pairs: usize = units.iter().map(|u| u.1.len()).sum();
    if count > pairs * max_repeats {
        return Err(Error::Config(format!(
            "{what} count {count} exceeds capacity {} ({pairs} object-action pairs x {max_repeats} repeats)",
            pairs * max_repeats
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut round = 0u64;
    while out.len() < count {
        let mut order: Vec<usize> = (0..units.len()).collect();
        order.shuffle(&mut tree.index(round).rng());
        // whole units first so antonym pairs stay together; split one only if nothing else fits
        let mut leftover = Vec::new();
        for u in order {
            let (o, acts) = &units[u];
            if out.len() + acts.len() <= count {
                out.extend(acts.iter().map(|&a| (*o, a)));
            } else {
                leftover.push(u);
            }
        }
        for u in leftover {
            for &a in &units[u].1 {
                if out.len() < count {
                    out.push((units[u].0, a));
                }
            }
        }
        round += 1;
    }
    Ok(out)
}

fn make_split(
    config: &WorldConfig,
    split: Split,
    pairs: &[(usize, usize)],
    tree: SeedTree,
) -> Result<Vec<ClipInstance>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(o, a))| {
            let seed = tree.index(i as u64).seed();
            let mut clip = generate_clip(config, o, a, seed)?;
            clip.clip_id = format!("{}-{i:05}", split.name());
            clip.split = split;
            Ok(clip)
        })
        .collect()
}

fn row(c: &ClipInstance, config: &WorldConfig) -> ManifestRow {
    ManifestRow {
        clip_id: c.clip_id.clone(),
        object_id: c.object_id,
        action_id: c.action_id,
        action_name: config.lexicon.get(c.action_id).expect("valid").name.clone(),
        kind: c.kind,
        split: c.split,
        num_frames: c.num_frames(),
        salient_gt: c.salient_gt,
        seed: c.instance_seed,
    }
}

/// Stratified, deterministic splits. Train and eval cover the in-domain actions;
/// the held-out domain uses the reserved actions on their dedicated objects.
pub fn build_dataset(config: &WorldConfig, counts: SplitCounts) -> Result<Dataset> {
    config.validate()?;
    let tree = SeedTree::new(config.seed).child("dataset");
    let all_objects: Vec<usize> = (0..config.num_objects).collect();
    let in_domain = units(config, &all_objects, &config.in_domain_action_ids());
    let train_pairs = draw_pairs(&in_domain, counts.train, counts.max_repeats, tree.child("train-order"), "train")?;
    let eval_pairs = draw_pairs(&in_domain, counts.eval, counts.max_repeats, tree.child("eval-order"), "eval")?;
    let mut held_units = Vec::new();
    for (rank, a) in config.heldout_action_ids().into_iter().enumerate() {
        for o in config.heldout_objects(rank) {
            held_units.push((o, vec![a]));
        }
    }
    let held_pairs = draw_pairs(&held_units, counts.heldout, counts.max_repeats, tree.child("heldout-order"), "heldout_domain")?;

    let train = make_split(config, Split::Train, &train_pairs, tree.child("train"))?;
    let eval = make_split(config, Split::Eval, &eval_pairs, tree.child("eval"))?;
    let heldout = make_split(config, Split::HeldoutDomain, &held_pairs, tree.child("heldout"))?;

    let probe_tree = tree.child("object-replace");
    let probes = eval
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let directional = c.kind == ActionKind::Directional;
            Ok(Probes {
                antonym: if directional {
                    Some(make_antonym_annotation(&config.lexicon, c)?)
                } else {
                    None
                },
                reversed: directional.then(|| reverse_clip(c)),
                object_replaced: object_replace(config, c, &mut probe_tree.index(i as u64).rng())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = train
        .iter()
        .chain(&eval)
        .chain(&heldout)
        .map(|c| row(c, config))
        .collect();
    let manifest = DatasetManifest {
        fingerprint: config.fingerprint(),
        train: train.len(),
        eval: eval.len(),
        heldout: heldout.len(),
        rows,
    };
    Ok(Dataset {
        config: config.clone(),
        train,
        eval,
        probes,
        heldout,
        manifest,
    })
}
