//! Scene graph domain types and box geometry.
//!
//! Boxes are normalized corner boxes `(x1, y1, x2, y2)` in `[0, 1]`. Geometry
//! functions accept degenerate boxes and report zero area for them, so parsed
//! or fuzzed data never has to be pre-filtered before calling [`iou`].

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Index into the entity category list.
pub type EntityCategoryId = usize;
/// Index into the predicate category list.
pub type PredicateId = usize;

/// Relative tolerance used when checking `triplet_score` against the product
/// of its component scores.
pub const SCORE_PRODUCT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2 {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Converts a pixel-space box to normalized coordinates.
    pub fn from_pixels(px: [f64; 4], width: f64, height: f64) -> Self {
        Self::new(px[0] / width, px[1] / height, px[2] / width, px[3] / height)
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// True when the corner ordering holds and every coordinate is in `[0, 1]`.
    pub fn is_valid(&self) -> bool {
        let coords = self.to_array();
        coords.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c))
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }
}

/// Intersection over union. Zero when the union is empty.
pub fn iou(a: &Box2, b: &Box2) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Generalized IoU: `iou - (enclosing - union) / enclosing`.
pub fn giou(a: &Box2, b: &Box2) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let enclosing = enclosing_box(a, b).area();
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if enclosing <= 0.0 {
        return iou;
    }
    iou - (enclosing - union) / enclosing
}

fn intersection_area(a: &Box2, b: &Box2) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

fn enclosing_box(a: &Box2, b: &Box2) -> Box2 {
    Box2::new(a.x1.min(b.x1), a.y1.min(b.y1), a.x2.max(b.x2), a.y2.max(b.y2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub category_id: EntityCategoryId,
    pub bbox: Box2,
    pub score: f64,
}

/// A relation between two entities of the owning [`SceneGraph`], referenced by
/// index into its entity list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationTriplet {
    pub subject: usize,
    pub object: usize,
    pub predicate_id: PredicateId,
    pub predicate_score: f64,
    /// Ranking score S^t: subject score x object score x predicate score.
    pub triplet_score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneGraph {
    pub image_id: String,
    pub entities: Vec<Entity>,
    pub relations: Vec<RelationTriplet>,
}

impl SceneGraph {
    pub fn new(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            ..Default::default()
        }
    }

    pub fn add_entity(&mut self, category_id: EntityCategoryId, bbox: Box2, score: f64) -> usize {
        self.entities.push(Entity {
            category_id,
            bbox,
            score,
        });
        self.entities.len() - 1
    }

    /// Adds a relation, deriving the triplet score from the endpoint scores.
    ///
    /// Panics if either endpoint index is out of range.
    pub fn add_relation(
        &mut self,
        subject: usize,
        predicate_id: PredicateId,
        object: usize,
        predicate_score: f64,
    ) {
        let triplet_score =
            self.entities[subject].score * self.entities[object].score * predicate_score;
        self.relations.push(RelationTriplet {
            subject,
            object,
            predicate_id,
            predicate_score,
            triplet_score,
        });
    }

    pub fn subject_of(&self, r: &RelationTriplet) -> &Entity {
        &self.entities[r.subject]
    }

    pub fn object_of(&self, r: &RelationTriplet) -> &Entity {
        &self.entities[r.object]
    }

    /// `(subject category, predicate, object category)` for every relation.
    pub fn category_triples(&self) -> Vec<(EntityCategoryId, PredicateId, EntityCategoryId)> {
        self.relations
            .iter()
            .map(|r| {
                (
                    self.entities[r.subject].category_id,
                    r.predicate_id,
                    self.entities[r.object].category_id,
                )
            })
            .collect()
    }

    /// Relations sorted by descending triplet score; stable for equal scores.
    pub fn ranked_relations(&self) -> Vec<&RelationTriplet> {
        let mut ranked: Vec<&RelationTriplet> = self.relations.iter().collect();
        ranked.sort_by(|a, b| b.triplet_score.total_cmp(&a.triplet_score));
        ranked
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CategorySpaceError {
    #[error("duplicate {kind} category name {name:?}")]
    DuplicateName { kind: &'static str, name: String },
    #[error("novel predicate id {0} is out of range")]
    NovelOutOfRange(usize),
    #[error("empty {0} category list")]
    Empty(&'static str),
}

/// Entity categories, predicate categories, and the base/novel predicate split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpace {
    entity_names: Vec<String>,
    predicate_names: Vec<String>,
    novel_predicate_ids: Vec<PredicateId>,
}

impl CategorySpace {
    pub fn new(
        entity_names: Vec<String>,
        predicate_names: Vec<String>,
        novel_predicate_ids: Vec<PredicateId>,
    ) -> Result<Self, CategorySpaceError> {
        if entity_names.is_empty() {
            return Err(CategorySpaceError::Empty("entity"));
        }
        if predicate_names.is_empty() {
            return Err(CategorySpaceError::Empty("predicate"));
        }
        check_unique("entity", &entity_names)?;
        check_unique("predicate", &predicate_names)?;
        let mut novel = novel_predicate_ids;
        novel.sort_unstable();
        novel.dedup();
        if let Some(&bad) = novel.iter().find(|&&id| id >= predicate_names.len()) {
            return Err(CategorySpaceError::NovelOutOfRange(bad));
        }
        Ok(Self {
            entity_names,
            predicate_names,
            novel_predicate_ids: novel,
        })
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    pub fn predicate_names(&self) -> &[String] {
        &self.predicate_names
    }

    pub fn num_entities(&self) -> usize {
        self.entity_names.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicate_names.len()
    }

    /// Sorted novel predicate ids.
    pub fn novel_predicate_ids(&self) -> &[PredicateId] {
        &self.novel_predicate_ids
    }

    pub fn base_predicate_ids(&self) -> Vec<PredicateId> {
        (0..self.predicate_names.len())
            .filter(|id| !self.is_novel(*id))
            .collect()
    }

    pub fn is_novel(&self, id: PredicateId) -> bool {
        self.novel_predicate_ids.binary_search(&id).is_ok()
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityCategoryId> {
        self.entity_names.iter().position(|n| n == name)
    }

    pub fn predicate_id(&self, name: &str) -> Option<PredicateId> {
        self.predicate_names.iter().position(|n| n == name)
    }

    /// Replaces the novel split with a seeded random choice of
    /// `ceil(fraction * |predicates|)` predicates.
    pub fn with_random_novel_split(mut self, fraction: f64, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = self.predicate_names.len();
        let take = ((fraction.clamp(0.0, 1.0) * n as f64).ceil() as usize).min(n);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut rng);
        ids.truncate(take);
        ids.sort_unstable();
        self.novel_predicate_ids = ids;
        self
    }
}

fn check_unique(kind: &'static str, names: &[String]) -> Result<(), CategorySpaceError> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(CategorySpaceError::DuplicateName {
                kind,
                name: n.clone(),
            });
        }
    }
    Ok(())
}

/// One problem found by [`validate_scene_graph`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    InvalidBox { entity: usize, bbox: Box2 },
    EntityCategoryOutOfRange { entity: usize, category_id: usize },
    InvalidEntityScore { entity: usize, score: f64 },
    EndpointOutOfRange { relation: usize, index: usize },
    SelfLoop { relation: usize, entity: usize },
    PredicateOutOfRange { relation: usize, predicate_id: usize },
    InvalidPredicateScore { relation: usize, score: f64 },
    TripletScoreMismatch { relation: usize, expected: f64, actual: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InvalidBox { entity, bbox } => {
                write!(f, "entity {entity}: invalid box {:?}", bbox.to_array())
            }
            Violation::EntityCategoryOutOfRange {
                entity,
                category_id,
            } => write!(f, "entity {entity}: category id {category_id} out of range"),
            Violation::InvalidEntityScore { entity, score } => {
                write!(f, "entity {entity}: invalid score {score}")
            }
            Violation::EndpointOutOfRange { relation, index } => {
                write!(f, "relation {relation}: endpoint {index} out of range")
            }
            Violation::SelfLoop { relation, entity } => {
                write!(f, "relation {relation}: subject and object are both entity {entity}")
            }
            Violation::PredicateOutOfRange {
                relation,
                predicate_id,
            } => write!(f, "relation {relation}: predicate id {predicate_id} out of range"),
            Violation::InvalidPredicateScore { relation, score } => {
                write!(f, "relation {relation}: invalid predicate score {score}")
            }
            Violation::TripletScoreMismatch {
                relation,
                expected,
                actual,
            } => write!(
                f,
                "relation {relation}: triplet score {actual} != product {expected}"
            ),
        }
    }
}

/// Checks every structural invariant of `g` against `space`. An empty result
/// means the graph is well formed.
///
/// Scores must be finite and non-negative; they are not capped at 1 because
/// exact-match amplification legitimately produces entity scores above 1.
pub fn validate_scene_graph(g: &SceneGraph, space: &CategorySpace) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, e) in g.entities.iter().enumerate() {
        if !e.bbox.is_valid() {
            out.push(Violation::InvalidBox {
                entity: i,
                bbox: e.bbox,
            });
        }
        if e.category_id >= space.num_entities() {
            out.push(Violation::EntityCategoryOutOfRange {
                entity: i,
                category_id: e.category_id,
            });
        }
        if !(e.score.is_finite() && e.score >= 0.0) {
            out.push(Violation::InvalidEntityScore {
                entity: i,
                score: e.score,
            });
        }
    }
    for (i, r) in g.relations.iter().enumerate() {
        let mut endpoints_ok = true;
        for index in [r.subject, r.object] {
            if index >= g.entities.len() {
                out.push(Violation::EndpointOutOfRange { relation: i, index });
                endpoints_ok = false;
            }
        }
        if r.subject == r.object {
            out.push(Violation::SelfLoop {
                relation: i,
                entity: r.subject,
            });
        }
        if r.predicate_id >= space.num_predicates() {
            out.push(Violation::PredicateOutOfRange {
                relation: i,
                predicate_id: r.predicate_id,
            });
        }
        if !(r.predicate_score.is_finite() && r.predicate_score >= 0.0) {
            out.push(Violation::InvalidPredicateScore {
                relation: i,
                score: r.predicate_score,
            });
        }
        if endpoints_ok {
            let expected =
                g.entities[r.subject].score * g.entities[r.object].score * r.predicate_score;
            let tol = SCORE_PRODUCT_TOLERANCE * expected.abs().max(1.0);
            if !((expected - r.triplet_score).abs() <= tol) {
                out.push(Violation::TripletScoreMismatch {
                    relation: i,
                    expected,
                    actual: r.triplet_score,
                });
            }
        }
    }
    out
}
