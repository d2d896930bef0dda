//! Relationship construction: candidate expansion, self-loop removal,
//! relation NMS and S^t ranking.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::conversion::{top_k_categories, CategoryScores};
use crate::model::{iou, Box2, SceneGraph};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PostprocessError {
    #[error("invalid post-processing config: {0}")]
    BadConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub top_k: usize,
    pub nms_iou: f64,
    pub self_loop_iou: f64,
    pub max_relations: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            top_k: 3,
            nms_iou: 0.5,
            self_loop_iou: 0.9,
            max_relations: 100,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<(), PostprocessError> {
        if self.top_k < 1 {
            return Err(PostprocessError::BadConfig("top_k must be at least 1"));
        }
        for t in [self.nms_iou, self.self_loop_iou] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(PostprocessError::BadConfig("thresholds must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Where a candidate came from: generated sequence and span index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpanSource {
    pub sequence: usize,
    pub span: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntityCandidate {
    pub category_id: usize,
    pub score: f64,
    pub bbox: Box2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateTriplet {
    pub subject: EntityCandidate,
    pub object: EntityCandidate,
    pub predicate_id: usize,
    pub predicate_score: f64,
    /// S^t = subject score x object score x predicate score.
    pub score: f64,
    pub source: SpanSource,
}

impl CandidateTriplet {
    pub fn new(
        subject: EntityCandidate,
        predicate: (usize, f64),
        object: EntityCandidate,
        source: SpanSource,
    ) -> Self {
        Self {
            subject,
            object,
            predicate_id: predicate.0,
            predicate_score: predicate.1,
            score: subject.score * object.score * predicate.1,
            source,
        }
    }

    pub fn categories(&self) -> (usize, usize, usize) {
        (
            self.subject.category_id,
            self.predicate_id,
            self.object.category_id,
        )
    }
}

/// Total ranking order: S^t descending, then source, then category ids.
pub fn rank_order(a: &CandidateTriplet, b: &CandidateTriplet) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.source.cmp(&b.source))
        .then(a.categories().cmp(&b.categories()))
}

/// Cross product of the top-k subject, predicate and object categories. All
/// candidates share the span's two grounded boxes.
pub fn expand_candidates(
    source: SpanSource,
    subject: &CategoryScores,
    object: &CategoryScores,
    predicate: &CategoryScores,
    boxes: (Box2, Box2),
    cfg: &PostprocessConfig,
) -> Vec<CandidateTriplet> {
    let subj = top_k_categories(subject, cfg.top_k);
    let obj = top_k_categories(object, cfg.top_k);
    let pred = top_k_categories(predicate, cfg.top_k);
    let mut out = Vec::with_capacity(subj.len() * obj.len() * pred.len());
    for &(sc, ss) in &subj {
        for &p in &pred {
            for &(oc, os) in &obj {
                out.push(CandidateTriplet::new(
                    EntityCandidate {
                        category_id: sc,
                        score: ss,
                        bbox: boxes.0,
                    },
                    p,
                    EntityCandidate {
                        category_id: oc,
                        score: os,
                        bbox: boxes.1,
                    },
                    source,
                ));
            }
        }
    }
    out
}

/// Drops candidates whose subject and object share a category and overlap
/// by at least the self-loop threshold.
pub fn remove_self_loops(
    cands: Vec<CandidateTriplet>,
    cfg: &PostprocessConfig,
) -> Vec<CandidateTriplet> {
    cands
        .into_iter()
        .filter(|c| {
            !(c.subject.category_id == c.object.category_id
                && iou(&c.subject.bbox, &c.object.bbox) >= cfg.self_loop_iou)
        })
        .collect()
}

/// True when `b` duplicates `a`: same three categories, and both subject
/// and object boxes overlap by at least `threshold`.
pub fn is_duplicate(a: &CandidateTriplet, b: &CandidateTriplet, threshold: f64) -> bool {
    a.categories() == b.categories()
        && iou(&a.subject.bbox, &b.subject.bbox) >= threshold
        && iou(&a.object.bbox, &b.object.bbox) >= threshold
}

/// Greedy NMS in rank order. Output is in rank order.
pub fn relation_nms(
    mut cands: Vec<CandidateTriplet>,
    cfg: &PostprocessConfig,
) -> Vec<CandidateTriplet> {
    cands.sort_by(rank_order);
    // Candidates are bucketed by category triple; only same-bucket pairs
    // can suppress each other.
    let mut kept_by_key: HashMap<(usize, usize, usize), Vec<usize>> = HashMap::new();
    let mut kept: Vec<CandidateTriplet> = Vec::new();
    for c in cands {
        let bucket = kept_by_key.entry(c.categories()).or_default();
        if bucket
            .iter()
            .any(|&k| is_duplicate(&kept[k], &c, cfg.nms_iou))
        {
            continue;
        }
        bucket.push(kept.len());
        kept.push(c);
    }
    kept
}

/// Category scores and grounded boxes of one parsed triplet span.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanPrediction {
    pub source: SpanSource,
    pub subject: CategoryScores,
    pub predicate: CategoryScores,
    pub object: CategoryScores,
    pub subject_box: Box2,
    pub object_box: Box2,
}

/// Final ranked candidates for one image: expansion over all spans of all
/// sequences, self-loop removal, NMS, ranking and truncation.
pub fn rank_candidates(spans: &[SpanPrediction], cfg: &PostprocessConfig) -> Vec<CandidateTriplet> {
    let mut cands = Vec::new();
    for s in spans {
        cands.extend(expand_candidates(
            s.source,
            &s.subject,
            &s.object,
            &s.predicate,
            (s.subject_box, s.object_box),
            cfg,
        ));
    }
    let mut kept = relation_nms(remove_self_loops(cands, cfg), cfg);
    kept.sort_by(rank_order);
    kept.truncate(cfg.max_relations);
    kept
}

/// Builds the ranked scene graph for one image. Identical entity records
/// (same category, box and score) are shared between relations.
pub fn construct_scene_graph(
    image_id: &str,
    spans: &[SpanPrediction],
    cfg: &PostprocessConfig,
) -> SceneGraph {
    let ranked = rank_candidates(spans, cfg);
    candidates_to_graph(image_id, &ranked)
}

pub fn candidates_to_graph(image_id: &str, ranked: &[CandidateTriplet]) -> SceneGraph {
    let mut g = SceneGraph::new(image_id);
    let mut index: HashMap<(usize, [u64; 4], u64), usize> = HashMap::new();
    let mut entity = |g: &mut SceneGraph, e: &EntityCandidate| -> usize {
        let key = (
            e.category_id,
            e.bbox.to_array().map(f64::to_bits),
            e.score.to_bits(),
        );
        *index
            .entry(key)
            .or_insert_with(|| g.add_entity(e.category_id, e.bbox, e.score))
    };
    for c in ranked {
        let s = entity(&mut g, &c.subject);
        let o = entity(&mut g, &c.object);
        if s == o {
            // identical records; the self-loop filter normally removes these
            continue;
        }
        g.add_relation(s, c.predicate_id, o, c.predicate_score);
    }
    g
}
