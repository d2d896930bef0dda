//! SGG metrics: greedy triplet matching, R@K, mR@K (all / novel / base),
//! zero-shot R@K, and the SGDet / SGCls / PCls protocols.
//!
//! Metrics are exact rationals over integer counts; [`Metric::value`] gives
//! the nearest `f64`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{iou, CategorySpace, EntityCategoryId, PredicateId, SceneGraph};

pub type CategoryTriple = (EntityCategoryId, PredicateId, EntityCategoryId);

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid eval config: {0}")]
    BadConfig(String),
    #[error("dataset has no ground-truth triplets")]
    NoGroundTruth,
    #[error("no ground-truth triplets for any {0} predicate")]
    EmptySubset(Subset),
    #[error("image ids differ: missing from predictions {missing_predictions:?}, missing from ground truth {missing_ground_truth:?}")]
    ImageMismatch {
        missing_predictions: Vec<String>,
        missing_ground_truth: Vec<String>,
    },
    #[error("duplicate image id {0:?}")]
    DuplicateImage(String),
    #[error("image {0:?}: ground truth has no entities to substitute")]
    NoGroundTruthEntities(String),
    #[error("{path}:{line}: {message}")]
    SeenTriplets {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "sgdet")]
    SgDet,
    #[serde(rename = "sgcls")]
    SgCls,
    #[serde(rename = "pcls")]
    PCls,
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sgdet" => Ok(Self::SgDet),
            "sgcls" => Ok(Self::SgCls),
            "pcls" | "predcls" => Ok(Self::PCls),
            other => Err(format!("unknown protocol {other:?}")),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SgDet => "SGDet",
            Self::SgCls => "SGCls",
            Self::PCls => "PCls",
        })
    }
}

/// How R@K and zR@K aggregate over images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Matched GT summed over images divided by GT summed over images.
    #[default]
    Micro,
    /// Mean of per-image recalls over images with at least one GT triplet.
    PerImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subset {
    All,
    Novel,
    Base,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::All => "all",
            Self::Novel => "novel",
            Self::Base => "base",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub iou_threshold: f64,
    pub protocol: Protocol,
    pub averaging: Averaging,
    /// Category triples seen in training; zR@K is skipped when absent.
    #[serde(skip)]
    pub seen_triplets: Option<BTreeSet<CategoryTriple>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![20, 50, 100],
            iou_threshold: 0.5,
            protocol: Protocol::SgDet,
            averaging: Averaging::Micro,
            seen_triplets: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::BadConfig(format!(
                "K values must be positive and strictly ascending, got {:?}",
                self.ks
            )));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(EvalError::BadConfig(format!(
                "IoU threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// An exact ratio of counts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Metric(pub BigRational);

impl Metric {
    pub fn from_counts(num: usize, den: usize) -> Self {
        Metric(BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    pub fn value(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    /// Parses `"a/b"` or `"a"`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        let (n, d) = match s.split_once('/') {
            Some((n, d)) => (n.trim().parse::<BigInt>().ok()?, d.trim().parse::<BigInt>().ok()?),
            None => (s.parse::<BigInt>().ok()?, BigInt::from(1)),
        };
        if d.is_zero() {
            return None;
        }
        Some(Metric(BigRational::new(n, d)))
    }

    fn mean(items: &[Metric]) -> Metric {
        let sum = items
            .iter()
            .fold(BigRational::zero(), |acc, m| acc + &m.0);
        Metric(sum / BigRational::from_integer(BigInt::from(items.len())))
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Greedy matching of one image. Entry `i` is the GT relation claimed by the
/// `i`-th prediction in rank order ([`SceneGraph::ranked_relations`]).
pub fn match_triplets(pred: &SceneGraph, gt: &SceneGraph, threshold: f64) -> Vec<Option<usize>> {
    let mut claimed = vec![false; gt.relations.len()];
    pred.ranked_relations()
        .into_iter()
        .map(|r| {
            let (ps, po) = (pred.subject_of(r), pred.object_of(r));
            let hit = gt.relations.iter().enumerate().position(|(j, g)| {
                if claimed[j] || g.predicate_id != r.predicate_id {
                    return false;
                }
                let (gs, go) = (gt.subject_of(g), gt.object_of(g));
                gs.category_id == ps.category_id
                    && go.category_id == po.category_id
                    && iou(&ps.bbox, &gs.bbox) >= threshold
                    && iou(&po.bbox, &go.bbox) >= threshold
            });
            if let Some(j) = hit {
                claimed[j] = true;
            }
            hit
        })
        .collect()
}

/// Matching outcome of one image, as seen from its GT triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatches {
    pub image_id: String,
    pub gt_triples: Vec<CategoryTriple>,
    /// Rank (0-based) of the prediction that claimed each GT triplet.
    pub claim_rank: Vec<Option<usize>>,
}

impl ImageMatches {
    pub fn new(pred: &SceneGraph, gt: &SceneGraph, threshold: f64) -> Self {
        let mut claim_rank = vec![None; gt.relations.len()];
        for (rank, m) in match_triplets(pred, gt, threshold).into_iter().enumerate() {
            if let Some(j) = m {
                claim_rank[j] = Some(rank);
            }
        }
        Self {
            image_id: gt.image_id.clone(),
            gt_triples: gt.category_triples(),
            claim_rank,
        }
    }

    /// Greedy matching is prefix-consistent, so a GT triplet is matched within
    /// the top K exactly when its claiming rank is below K.
    fn hit(&self, j: usize, k: usize) -> bool {
        matches!(self.claim_rank[j], Some(r) if r < k)
    }

    fn counts(&self, k: usize, keep: impl Fn(&CategoryTriple) -> bool) -> (usize, usize) {
        let mut hit = 0;
        let mut total = 0;
        for (j, t) in self.gt_triples.iter().enumerate() {
            if keep(t) {
                total += 1;
                hit += self.hit(j, k) as usize;
            }
        }
        (hit, total)
    }
}

fn filtered_recall(
    images: &[ImageMatches],
    k: usize,
    averaging: Averaging,
    keep: impl Fn(&CategoryTriple) -> bool,
) -> Option<Metric> {
    let per_image: Vec<(usize, usize)> = images.iter().map(|m| m.counts(k, &keep)).collect();
    match averaging {
        Averaging::Micro => {
            let (hit, total) = per_image
                .iter()
                .fold((0, 0), |(h, t), (a, b)| (h + a, t + b));
            (total > 0).then(|| Metric::from_counts(hit, total))
        }
        Averaging::PerImage => {
            let recalls: Vec<Metric> = per_image
                .iter()
                .filter(|(_, t)| *t > 0)
                .map(|&(h, t)| Metric::from_counts(h, t))
                .collect();
            (!recalls.is_empty()).then(|| Metric::mean(&recalls))
        }
    }
}

pub fn recall_at_k(
    images: &[ImageMatches],
    k: usize,
    averaging: Averaging,
) -> Result<Metric, EvalError> {
    filtered_recall(images, k, averaging, |_| true).ok_or(EvalError::NoGroundTruth)
}

/// Recall of each predicate over the dataset; `None` for predicates with no
/// GT instance.
pub fn per_predicate_recall(
    images: &[ImageMatches],
    k: usize,
    num_predicates: usize,
) -> Vec<Option<Metric>> {
    let mut hit = vec![0usize; num_predicates];
    let mut total = vec![0usize; num_predicates];
    for m in images {
        for (j, t) in m.gt_triples.iter().enumerate() {
            if t.1 < num_predicates {
                total[t.1] += 1;
                hit[t.1] += m.hit(j, k) as usize;
            }
        }
    }
    hit.into_iter()
        .zip(total)
        .map(|(h, t)| (t > 0).then(|| Metric::from_counts(h, t)))
        .collect()
}

pub fn mean_recall_at_k(
    images: &[ImageMatches],
    k: usize,
    space: &CategorySpace,
    subset: Subset,
) -> Result<Metric, EvalError> {
    let per = per_predicate_recall(images, k, space.num_predicates());
    let selected: Vec<Metric> = per
        .into_iter()
        .enumerate()
        .filter(|(p, _)| match subset {
            Subset::All => true,
            Subset::Novel => space.is_novel(*p),
            Subset::Base => !space.is_novel(*p),
        })
        .filter_map(|(_, r)| r)
        .collect();
    if selected.is_empty() {
        return Err(EvalError::EmptySubset(subset));
    }
    Ok(Metric::mean(&selected))
}

/// R@K over GT triplets whose category triple was never seen in training.
/// `None` when there are no such triplets.
pub fn zero_shot_recall(
    images: &[ImageMatches],
    k: usize,
    seen: &BTreeSet<CategoryTriple>,
    averaging: Averaging,
) -> Option<Metric> {
    filtered_recall(images, k, averaging, |t| !seen.contains(t))
}

/// Replaces predicted entities with their best-IoU GT entity (ties to the
/// lower GT index): the box under SGCls, box and category under PCls.
pub fn apply_protocol(
    pred: &SceneGraph,
    gt: &SceneGraph,
    protocol: Protocol,
) -> Result<SceneGraph, EvalError> {
    if protocol == Protocol::SgDet {
        return Ok(pred.clone());
    }
    if gt.entities.is_empty() {
        return Err(EvalError::NoGroundTruthEntities(gt.image_id.clone()));
    }
    let mut out = pred.clone();
    for e in &mut out.entities {
        let mut best = 0;
        let mut best_iou = f64::NEG_INFINITY;
        for (j, g) in gt.entities.iter().enumerate() {
            let v = iou(&e.bbox, &g.bbox);
            if v > best_iou {
                best = j;
                best_iou = v;
            }
        }
        let g = &gt.entities[best];
        e.bbox = g.bbox;
        if protocol == Protocol::PCls {
            e.category_id = g.category_id;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMetrics {
    pub k: usize,
    pub recall: Metric,
    pub mean_recall: Metric,
    pub novel_mean_recall: Option<Metric>,
    pub base_mean_recall: Option<Metric>,
    pub zero_shot_recall: Option<Metric>,
    pub per_predicate: Vec<Option<Metric>>,
    pub matched: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub images: usize,
    pub gt_triplets: usize,
    pub per_k: Vec<KMetrics>,
}

/// Pairs predictions with ground truth by image id.
fn align<'a>(
    preds: &'a [SceneGraph],
    gts: &'a [SceneGraph],
) -> Result<Vec<(&'a SceneGraph, &'a SceneGraph)>, EvalError> {
    let mut by_id: HashMap<&str, &SceneGraph> = HashMap::new();
    for p in preds {
        if by_id.insert(p.image_id.as_str(), p).is_some() {
            return Err(EvalError::DuplicateImage(p.image_id.clone()));
        }
    }
    let mut seen = BTreeSet::new();
    let mut missing_predictions = Vec::new();
    let mut pairs = Vec::new();
    for g in gts {
        if !seen.insert(g.image_id.as_str()) {
            return Err(EvalError::DuplicateImage(g.image_id.clone()));
        }
        match by_id.get(g.image_id.as_str()) {
            Some(p) => pairs.push((*p, g)),
            None => missing_predictions.push(g.image_id.clone()),
        }
    }
    let mut missing_ground_truth: Vec<String> = preds
        .iter()
        .filter(|p| !seen.contains(p.image_id.as_str()))
        .map(|p| p.image_id.clone())
        .collect();
    missing_ground_truth.sort();
    if !missing_predictions.is_empty() || !missing_ground_truth.is_empty() {
        return Err(EvalError::ImageMismatch {
            missing_predictions,
            missing_ground_truth,
        });
    }
    Ok(pairs)
}

pub fn evaluate(
    preds: &[SceneGraph],
    gts: &[SceneGraph],
    space: &CategorySpace,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let pairs = align(preds, gts)?;
    let images: Vec<ImageMatches> = pairs
        .par_iter()
        .map(|(p, g)| {
            let adjusted = apply_protocol(p, g, cfg.protocol)?;
            Ok(ImageMatches::new(&adjusted, g, cfg.iou_threshold))
        })
        .collect::<Result<_, EvalError>>()?;
    let gt_triplets: usize = images.iter().map(|m| m.gt_triples.len()).sum();
    let has_split = !space.novel_predicate_ids().is_empty();
    let optional = |r: Result<Metric, EvalError>| match r {
        Ok(m) => Ok(Some(m)),
        Err(EvalError::EmptySubset(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let mut per_k = Vec::with_capacity(cfg.ks.len());
    for &k in &cfg.ks {
        let (novel, base) = if has_split {
            (
                optional(mean_recall_at_k(&images, k, space, Subset::Novel))?,
                optional(mean_recall_at_k(&images, k, space, Subset::Base))?,
            )
        } else {
            (None, None)
        };
        per_k.push(KMetrics {
            k,
            recall: recall_at_k(&images, k, cfg.averaging)?,
            mean_recall: mean_recall_at_k(&images, k, space, Subset::All)?,
            novel_mean_recall: novel,
            base_mean_recall: base,
            zero_shot_recall: cfg
                .seen_triplets
                .as_ref()
                .and_then(|s| zero_shot_recall(&images, k, s, cfg.averaging)),
            per_predicate: per_predicate_recall(&images, k, space.num_predicates()),
            matched: images.iter().map(|m| m.counts(k, |_| true).0).sum(),
        });
    }
    Ok(EvalReport {
        protocol: cfg.protocol,
        images: images.len(),
        gt_triplets,
        per_k,
    })
}

fn opt_value(m: &Option<Metric>) -> String {
    m.as_ref()
        .map(|m| format!("{:.4}", m.value()))
        .unwrap_or_else(|| "n/a".into())
}

impl EvalReport {
    /// Human-readable table, one row per K.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "protocol {}  images {}  gt triplets {}\n",
            self.protocol, self.images, self.gt_triplets
        );
        s.push_str(&format!(
            "{:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "K", "R@K", "mR@K", "novel", "base", "zR@K", "matched"
        ));
        for m in &self.per_k {
            s.push_str(&format!(
                "{:>5} {:>8.4} {:>8.4} {:>8} {:>8} {:>8} {:>8}\n",
                m.k,
                m.recall.value(),
                m.mean_recall.value(),
                opt_value(&m.novel_mean_recall),
                opt_value(&m.base_mean_recall),
                opt_value(&m.zero_shot_recall),
                m.matched
            ));
        }
        s
    }

    /// `key = value` lines with exact ratios; `n/a` marks undefined metrics.
    pub fn to_key_values(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        kv.insert("protocol".into(), self.protocol.to_string());
        kv.insert("images".into(), self.images.to_string());
        kv.insert("gt_triplets".into(), self.gt_triplets.to_string());
        let opt = |m: &Option<Metric>| m.as_ref().map_or("n/a".to_string(), Metric::to_string);
        for m in &self.per_k {
            kv.insert(format!("R@{}", m.k), m.recall.to_string());
            kv.insert(format!("mR@{}", m.k), m.mean_recall.to_string());
            kv.insert(format!("novel_mR@{}", m.k), opt(&m.novel_mean_recall));
            kv.insert(format!("base_mR@{}", m.k), opt(&m.base_mean_recall));
            kv.insert(format!("zR@{}", m.k), opt(&m.zero_shot_recall));
            kv.insert(format!("matched@{}", m.k), m.matched.to_string());
            for (p, r) in m.per_predicate.iter().enumerate() {
                kv.insert(format!("predicate_recall@{}.{p}", m.k), opt(r));
            }
        }
        kv
    }

    pub fn key_value_text(&self) -> String {
        self.to_key_values()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Category triples of a set of training graphs.
pub fn collect_seen_triplets(graphs: &[SceneGraph]) -> BTreeSet<CategoryTriple> {
    graphs.iter().flat_map(|g| g.category_triples()).collect()
}

/// Writes one `subject<TAB>predicate<TAB>object` line per triple, by name,
/// sorted by id.
pub fn save_seen_triplets(
    seen: &BTreeSet<CategoryTriple>,
    space: &CategorySpace,
    path: impl AsRef<Path>,
) -> Result<(), EvalError> {
    let path = path.as_ref();
    let mut s = String::new();
    for &(a, p, b) in seen {
        s.push_str(&format!(
            "{}\t{}\t{}\n",
            space.entity_names()[a],
            space.predicate_names()[p],
            space.entity_names()[b]
        ));
    }
    fs::write(path, s).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_seen_triplets(
    path: impl AsRef<Path>,
    space: &CategorySpace,
) -> Result<BTreeSet<CategoryTriple>, EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::SeenTriplets {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, got {}", f.len())));
        }
        let ent = |n: &str| {
            space
                .entity_id(n)
                .ok_or_else(|| err(format!("unknown entity category {n:?}")))
        };
        let pred = space
            .predicate_id(f[1])
            .ok_or_else(|| err(format!("unknown predicate {:?}", f[1])))?;
        out.insert((ent(f[0])?, pred, ent(f[2])?));
    }
    Ok(out)
}
