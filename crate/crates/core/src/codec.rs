//! Scene graph <-> token sequence codec.
//!
//! A graph is written as a prompt prefix followed by triplets of the form
//! `subject [ENT] predicate [REL] object [ENT]`, joined by alternating
//! `and` / `,` separators. [`parse_sequence`] recovers the triplet spans from
//! arbitrary (possibly malformed) generated sequences.

use std::collections::HashSet;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::model::{Box2, CategorySpace, SceneGraph};
use crate::tokenizer::{TokenId, Vocabulary};

/// Instruction text that precedes every scene graph sequence.
pub const PROMPT: &str = "generate the scene graph of";

/// Longest content run kept in front of an `[ENT]` or `[REL]` token.
pub const MAX_CONTENT_RUN: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("graph {0:?} has no relations to serialize")]
    NoRelations(String),
    #[error("category {0:?} does not tokenize to plain content tokens")]
    BadCategoryName(String),
    #[error("category id {0} is not in the category space")]
    UnknownCategory(usize),
    #[error("serialization prefix is empty")]
    EmptyPrefix,
    #[error("max triplets must be at least 1")]
    ZeroTriplets,
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TripletOrder {
    #[default]
    Annotation,
    Shuffle {
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SerializationConfig {
    pub prefix: Vec<TokenId>,
    pub max_triplets: usize,
    pub order: TripletOrder,
}

impl SerializationConfig {
    /// Default prompt prefix, annotation order, no practical triplet cap.
    pub fn new(vocab: &Vocabulary) -> Result<Self, CodecError> {
        let prefix = vocab.tokenize(PROMPT);
        if prefix.is_empty() {
            return Err(CodecError::EmptyPrefix);
        }
        Ok(Self {
            prefix,
            max_triplets: usize::MAX,
            order: TripletOrder::Annotation,
        })
    }

    fn validate(&self) -> Result<(), CodecError> {
        if self.prefix.is_empty() {
            return Err(CodecError::EmptyPrefix);
        }
        if self.max_triplets == 0 {
            return Err(CodecError::ZeroTriplets);
        }
        Ok(())
    }
}

/// Output of [`serialize_graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct SerializedGraph {
    /// Prompt tokens; not part of the generated text.
    pub prefix: Vec<TokenId>,
    /// Triplet tokens, the generation target.
    pub body: Vec<TokenId>,
    /// Ground-truth boxes in entity-span order (subject, object per triplet).
    pub boxes: Vec<Box2>,
}

impl SerializedGraph {
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut out = self.prefix.clone();
        out.extend_from_slice(&self.body);
        out
    }
}

/// Serializes `g` into a scene graph sequence.
pub fn serialize_graph(
    g: &SceneGraph,
    space: &CategorySpace,
    vocab: &Vocabulary,
    cfg: &SerializationConfig,
) -> Result<SerializedGraph, CodecError> {
    cfg.validate()?;
    if g.relations.is_empty() {
        return Err(CodecError::NoRelations(g.image_id.clone()));
    }
    let entity_tokens = |cat: usize| -> Result<Vec<TokenId>, CodecError> {
        let name = space
            .entity_names()
            .get(cat)
            .ok_or(CodecError::UnknownCategory(cat))?;
        name_tokens(vocab, name)
    };

    let mut order: Vec<usize> = (0..g.relations.len()).collect();
    if let TripletOrder::Shuffle { seed } = cfg.order {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    order.truncate(cfg.max_triplets);

    let sp = vocab.specials();
    let mut body = Vec::new();
    let mut boxes = Vec::with_capacity(order.len() * 2);
    for (n, &ri) in order.iter().enumerate() {
        if n > 0 {
            body.push(if n % 2 == 1 { sp.and } else { sp.comma });
        }
        let r = &g.relations[ri];
        let subj = g.subject_of(r);
        let obj = g.object_of(r);
        let pred_name = space
            .predicate_names()
            .get(r.predicate_id)
            .ok_or(CodecError::UnknownCategory(r.predicate_id))?;
        body.extend(entity_tokens(subj.category_id)?);
        body.push(sp.ent);
        body.extend(name_tokens(vocab, pred_name)?);
        body.push(sp.rel);
        body.extend(entity_tokens(obj.category_id)?);
        body.push(sp.ent);
        boxes.push(subj.bbox);
        boxes.push(obj.bbox);
    }
    Ok(SerializedGraph {
        prefix: cfg.prefix.clone(),
        body,
        boxes,
    })
}

fn name_tokens(vocab: &Vocabulary, name: &str) -> Result<Vec<TokenId>, CodecError> {
    let ids = vocab.tokenize(name);
    if ids.is_empty() || ids.len() > MAX_CONTENT_RUN || !ids.iter().all(|&t| vocab.is_content(t))
    {
        return Err(CodecError::BadCategoryName(name.to_string()));
    }
    Ok(ids)
}

/// Token ranges of one parsed triplet. Entity ranges end with their `[ENT]`
/// token, the predicate range with its `[REL]` token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TripletSpan {
    pub subject: Range<usize>,
    pub predicate: Range<usize>,
    pub object: Range<usize>,
}

impl TripletSpan {
    /// Range without the trailing delimiter.
    pub fn content(range: &Range<usize>) -> Range<usize> {
        range.start..range.end - 1
    }

    pub fn subject_content(&self) -> Range<usize> {
        Self::content(&self.subject)
    }

    pub fn predicate_content(&self) -> Range<usize> {
        Self::content(&self.predicate)
    }

    pub fn object_content(&self) -> Range<usize> {
        Self::content(&self.object)
    }

    /// Content token ids of the three components.
    pub fn key(&self, tokens: &[TokenId]) -> TripletKey {
        (
            tokens[self.subject_content()].to_vec(),
            tokens[self.predicate_content()].to_vec(),
            tokens[self.object_content()].to_vec(),
        )
    }

    /// Ordering, disjointness and minimum-length invariants.
    pub fn is_well_formed(&self, tokens: &[TokenId], vocab: &Vocabulary) -> bool {
        let sp = vocab.specials();
        let ranges = [&self.subject, &self.predicate, &self.object];
        let ordered = self.subject.end <= self.predicate.start
            && self.predicate.end <= self.object.start
            && self.object.end <= tokens.len();
        if !ordered || ranges.iter().any(|r| r.len() < 2) {
            return false;
        }
        let ends_ok = tokens[self.subject.end - 1] == sp.ent
            && tokens[self.predicate.end - 1] == sp.rel
            && tokens[self.object.end - 1] == sp.ent;
        let content_ok = ranges.iter().all(|r| {
            r.len() - 1 <= MAX_CONTENT_RUN
                && tokens[Self::content(r)].iter().all(|&t| vocab.is_content(t))
        });
        ends_ok && content_ok
    }
}

pub type TripletKey = (Vec<TokenId>, Vec<TokenId>, Vec<TokenId>);

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ParseStats {
    pub n_triplets: usize,
    pub n_unique_triplets: usize,
    pub n_rel_tokens: usize,
}

impl ParseStats {
    /// Triplets per `[REL]` token; 0 when no `[REL]` was seen.
    pub fn valid_fraction(&self) -> f64 {
        if self.n_rel_tokens == 0 {
            0.0
        } else {
            self.n_triplets as f64 / self.n_rel_tokens as f64
        }
    }
}

/// Greedy left-to-right pattern match of
/// `content+ [ENT] content+ [REL] content+ [ENT]`.
///
/// Never fails. Fragments that break the pattern (a `[REL]` without a
/// preceding entity, an empty content run, a separator in the middle of a
/// triplet) reset the scan. Every `[REL]` is counted. Content runs longer
/// than [`MAX_CONTENT_RUN`] keep only their last tokens.
pub fn parse_sequence(tokens: &[TokenId], vocab: &Vocabulary) -> (Vec<TripletSpan>, ParseStats) {
    let sp = vocab.specials();
    let mut spans = Vec::new();
    let mut stats = ParseStats::default();
    let mut run_start: Option<usize> = None;
    let mut subject: Option<Range<usize>> = None;
    let mut predicate: Option<Range<usize>> = None;

    for (i, &t) in tokens.iter().enumerate() {
        if t == sp.ent || t == sp.rel {
            if t == sp.rel {
                stats.n_rel_tokens += 1;
            }
            let Some(start) = run_start.take() else {
                subject = None;
                predicate = None;
                continue;
            };
            let start = start.max(i.saturating_sub(MAX_CONTENT_RUN));
            let span = start..i + 1;
            if t == sp.ent {
                match (subject.take(), predicate.take()) {
                    (Some(s), Some(p)) => spans.push(TripletSpan {
                        subject: s,
                        predicate: p,
                        object: span,
                    }),
                    _ => subject = Some(span),
                }
            } else if subject.is_some() && predicate.is_none() {
                predicate = Some(span);
            } else {
                subject = None;
                predicate = None;
            }
        } else if vocab.is_content(t) {
            run_start.get_or_insert(i);
        } else {
            run_start = None;
            subject = None;
            predicate = None;
        }
    }

    stats.n_triplets = spans.len();
    stats.n_unique_triplets = spans
        .iter()
        .map(|s| s.key(tokens))
        .collect::<HashSet<_>>()
        .len();
    (spans, stats)
}

/// One generated sequence together with its parse.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSequence {
    pub tokens: Vec<TokenId>,
    pub spans: Vec<TripletSpan>,
    pub stats: ParseStats,
}

impl ParsedSequence {
    pub fn new(tokens: Vec<TokenId>, vocab: &Vocabulary) -> Self {
        let (spans, stats) = parse_sequence(&tokens, vocab);
        Self {
            tokens,
            spans,
            stats,
        }
    }
}

/// Combines the parses of all sequences generated for one image. Unique
/// triplets are counted over the union of the sequences.
pub fn image_stats(sequences: &[ParsedSequence]) -> ParseStats {
    let mut unique = HashSet::new();
    let mut out = ParseStats::default();
    for s in sequences {
        out.n_triplets += s.stats.n_triplets;
        out.n_rel_tokens += s.stats.n_rel_tokens;
        unique.extend(s.spans.iter().map(|sp| sp.key(&s.tokens)));
    }
    out.n_unique_triplets = unique.len();
    out
}

/// Per-image averages over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceStatsSummary {
    pub images: usize,
    pub avg_triplets: f64,
    pub avg_unique_triplets: f64,
    pub avg_rel_tokens: f64,
    /// Total triplets over total `[REL]` tokens.
    pub valid_fraction: f64,
}

/// Aggregates per-image statistics into averages per image.
pub fn sequence_stats(per_image: &[ParseStats]) -> Result<SequenceStatsSummary, CodecError> {
    if per_image.is_empty() {
        return Err(CodecError::EmptyBatch);
    }
    let n = per_image.len() as f64;
    let trip: usize = per_image.iter().map(|s| s.n_triplets).sum();
    let uniq: usize = per_image.iter().map(|s| s.n_unique_triplets).sum();
    let rel: usize = per_image.iter().map(|s| s.n_rel_tokens).sum();
    Ok(SequenceStatsSummary {
        images: per_image.len(),
        avg_triplets: trip as f64 / n,
        avg_unique_triplets: uniq as f64 / n,
        avg_rel_tokens: rel as f64 / n,
        valid_fraction: if rel == 0 { 0.0 } else { trip as f64 / rel as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Box2;

    fn vocab() -> Vocabulary {
        Vocabulary::new([
            "[ENT]", "[REL]", "[UNK]", "[BOS]", "[EOS]", "and", ",", "generate", "the", "scene",
            "graph", "of", "person", "horse", "grass", "riding", "on", "standing", "a", "b", "c",
        ])
        .unwrap()
    }

    fn space() -> CategorySpace {
        CategorySpace::new(
            vec!["person".into(), "horse".into(), "grass".into()],
            vec!["riding".into(), "on".into(), "standing on".into()],
            vec![],
        )
        .unwrap()
    }

    fn graph(rels: &[(usize, usize, usize)]) -> SceneGraph {
        let mut g = SceneGraph::new("img");
        let bx = Box2::new(0.1, 0.1, 0.4, 0.4);
        for &(s, p, o) in rels {
            let si = g.add_entity(s, bx, 1.0);
            let oi = g.add_entity(o, bx, 1.0);
            g.add_relation(si, p, oi, 1.0);
        }
        g
    }

    #[test]
    fn serialize_single_relation() {
        let v = vocab();
        let cfg = SerializationConfig::new(&v).unwrap();
        let s = serialize_graph(&graph(&[(0, 0, 1)]), &space(), &v, &cfg).unwrap();
        assert_eq!(
            v.detokenize(&s.tokens()).unwrap(),
            "generate the scene graph of person [ENT] riding [REL] horse [ENT]"
        );
        assert_eq!(s.boxes.len(), 2);
    }

    #[test]
    fn serialize_alternates_separators() {
        let v = vocab();
        let cfg = SerializationConfig::new(&v).unwrap();
        let g = graph(&[(0, 0, 1), (1, 1, 2), (0, 2, 2)]);
        let s = serialize_graph(&g, &space(), &v, &cfg).unwrap();
        assert_eq!(
            v.detokenize(&s.body).unwrap(),
            "person [ENT] riding [REL] horse [ENT] and horse [ENT] on [REL] grass [ENT] , \
             person [ENT] standing on [REL] grass [ENT]"
        );
    }

    #[test]
    fn serialize_respects_max_triplets_and_rejects_empty() {
        let v = vocab();
        let mut cfg = SerializationConfig::new(&v).unwrap();
        cfg.max_triplets = 1;
        let s = serialize_graph(&graph(&[(0, 0, 1), (1, 1, 2)]), &space(), &v, &cfg).unwrap();
        assert_eq!(parse_sequence(&s.body, &v).0.len(), 1);
        assert!(matches!(
            serialize_graph(&graph(&[]), &space(), &v, &cfg),
            Err(CodecError::NoRelations(_))
        ));
    }

    #[test]
    fn shuffled_order_is_seeded() {
        let v = vocab();
        let mut cfg = SerializationConfig::new(&v).unwrap();
        cfg.order = TripletOrder::Shuffle { seed: 11 };
        let g = graph(&[(0, 0, 1), (1, 1, 2), (0, 2, 2), (2, 1, 0)]);
        let a = serialize_graph(&g, &space(), &v, &cfg).unwrap();
        let b = serialize_graph(&g, &space(), &v, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parse_single_triplet() {
        let v = vocab();
        let toks = v.tokenize("person [ENT] riding [REL] horse [ENT]");
        let (spans, stats) = parse_sequence(&toks, &v);
        assert_eq!(
            spans,
            vec![TripletSpan {
                subject: 0..2,
                predicate: 2..4,
                object: 4..6
            }]
        );
        assert_eq!(
            stats,
            ParseStats {
                n_triplets: 1,
                n_unique_triplets: 1,
                n_rel_tokens: 1
            }
        );
        assert_eq!(stats.valid_fraction(), 1.0);
    }

    #[test]
    fn parse_missing_subject() {
        let v = vocab();
        let (spans, stats) = parse_sequence(&v.tokenize("riding [REL] horse [ENT]"), &v);
        assert!(spans.is_empty());
        assert_eq!((stats.n_triplets, stats.n_unique_triplets, stats.n_rel_tokens), (0, 0, 1));
        assert_eq!(stats.valid_fraction(), 0.0);
    }

    #[test]
    fn parse_duplicate_triplets() {
        // scan: a[ENT] -> subject, b[REL] -> predicate, c[ENT] -> emit;
        // "and" resets; the second triplet repeats the first.
        let v = vocab();
        let toks = v.tokenize("a [ENT] b [REL] c [ENT] and a [ENT] b [REL] c [ENT]");
        let (spans, stats) = parse_sequence(&toks, &v);
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[1].subject, 7..9);
        assert_eq!((stats.n_triplets, stats.n_unique_triplets, stats.n_rel_tokens), (2, 1, 2));
        assert_eq!(stats.valid_fraction(), 1.0);
    }

    #[test]
    fn parse_skips_malformed_fragments() {
        let v = vocab();
        for text in [
            "[ENT] riding [REL] horse [ENT]",
            "person [ENT] [REL] horse [ENT]",
            "person [ENT] riding [REL] [ENT]",
            "person [ENT] and riding [REL] horse [ENT]",
            "person [ENT] riding [REL] horse [REL]",
            "person [ENT] riding [REL] horse",
        ] {
            let (spans, _) = parse_sequence(&v.tokenize(text), &v);
            assert!(spans.is_empty(), "{text}");
        }
    }

    #[test]
    fn subject_is_replaced_by_later_entity() {
        let v = vocab();
        let toks = v.tokenize("a [ENT] b [ENT] riding [REL] c [ENT]");
        let (spans, _) = parse_sequence(&toks, &v);
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].subject, 2..4);
    }

    #[test]
    fn long_content_runs_are_truncated() {
        let v = vocab();
        let toks = v.tokenize("a a a a a a a a person [ENT] riding [REL] horse [ENT]");
        let (spans, _) = parse_sequence(&toks, &v);
        assert_eq!(spans[0].subject.len(), MAX_CONTENT_RUN + 1);
        assert!(spans[0].is_well_formed(&toks, &v));
    }

    #[test]
    fn round_trip_preserves_names_in_order() {
        let v = vocab();
        let cfg = SerializationConfig::new(&v).unwrap();
        let sp = space();
        let g = graph(&[(0, 0, 1), (1, 2, 2), (2, 1, 0)]);
        let s = serialize_graph(&g, &sp, &v, &cfg).unwrap();
        let (spans, stats) = parse_sequence(&s.body, &v);
        assert_eq!(stats.n_triplets, 3);
        let names: Vec<String> = spans
            .iter()
            .map(|x| v.detokenize(&s.body[x.predicate_content()]).unwrap())
            .collect();
        assert_eq!(names, vec!["riding", "standing on", "on"]);
    }

    #[test]
    fn sequence_stats_example() {
        let a = ParseStats {
            n_triplets: 2,
            n_unique_triplets: 2,
            n_rel_tokens: 2,
        };
        let b = ParseStats {
            n_triplets: 4,
            n_unique_triplets: 3,
            n_rel_tokens: 5,
        };
        let s = sequence_stats(&[a, b]).unwrap();
        assert_eq!(s.avg_triplets, 3.0);
        assert_eq!(s.avg_unique_triplets, 2.5);
        assert_eq!(s.avg_rel_tokens, 3.5);
        assert_eq!(s.valid_fraction, 6.0 / 7.0);
        assert!(matches!(sequence_stats(&[]), Err(CodecError::EmptyBatch)));
    }

    #[test]
    fn image_stats_counts_unique_across_sequences() {
        let v = vocab();
        let a = ParsedSequence::new(v.tokenize("a [ENT] b [REL] c [ENT]"), &v);
        let b = ParsedSequence::new(v.tokenize("a [ENT] b [REL] c [ENT] , b [REL]"), &v);
        let s = image_stats(&[a, b]);
        assert_eq!((s.n_triplets, s.n_unique_triplets, s.n_rel_tokens), (2, 1, 3));
    }
}
