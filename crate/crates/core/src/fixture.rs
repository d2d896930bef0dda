//! Offline stand-in for the VLM and the synthetic dataset it is built from.
//!
//! [`FixtureScorer`] is a bigram table over serialized scene graphs whose
//! context is `(triplets completed, grammar phase, previous token)`. Each
//! image has its own table, selected by the fingerprint of its features and
//! mixed with the table of the whole set.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{serialize_graph, CodecError, SerializationConfig};
use crate::decoder::{
    hashed_vector, DecodeError, FeatureMatrix, ScoredSequence, SparseRow, Step, TokenScorer,
};
use crate::eval::{collect_seen_triplets, save_seen_triplets};
use crate::grounding::{save_weights, GroundingConfig, GroundingError, GroundingWeights};
use crate::io::{
    save_categories, save_features, EntityRecord, GraphRecord, ImagePrediction, IoError,
    RelationRecord, RunConfig, FORMAT_VERSION,
};
use crate::model::{CategorySpace, SceneGraph};
use crate::tensor::Matrix;
use crate::tokenizer::{TokenId, Vocabulary, AND, BOS, COMMA, ENT, EOS, REL, UNK};

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("fixture scorer needs at least one graph with relations")]
    NoGraphs,
    #[error("{graphs} graphs but {features} feature matrices")]
    FeatureCount { graphs: usize, features: usize },
    #[error("two images share the feature fingerprint {0:#x}")]
    FingerprintCollision(u64),
    #[error("invalid scorer tables: {0}")]
    BadTables(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Subject,
    Predicate,
    Object,
    Separator,
}

/// Scorer context after a token prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateKey {
    pub triplets: u32,
    pub phase: Phase,
    pub last: Option<TokenId>,
}

/// Delimiter ids the scorer tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delimiters {
    pub ent: TokenId,
    pub rel: TokenId,
    pub and: TokenId,
    pub comma: TokenId,
    pub eos: TokenId,
}

impl Delimiters {
    pub fn of(vocab: &Vocabulary) -> Self {
        let s = vocab.specials();
        Self {
            ent: s.ent,
            rel: s.rel,
            and: s.and,
            comma: s.comma,
            eos: s.eos,
        }
    }

    /// Grammar state after `prefix`, mirroring the parser's transitions.
    pub fn state(&self, prefix: &[TokenId]) -> StateKey {
        let mut triplets = 0u32;
        let mut phase = Phase::Subject;
        for &t in prefix {
            phase = if t == self.ent {
                match phase {
                    Phase::Subject => Phase::Predicate,
                    Phase::Object => {
                        triplets += 1;
                        Phase::Separator
                    }
                    _ => Phase::Subject,
                }
            } else if t == self.rel {
                if phase == Phase::Predicate {
                    Phase::Object
                } else {
                    Phase::Subject
                }
            } else if t == self.and || t == self.comma || t == self.eos || phase == Phase::Separator {
                Phase::Subject
            } else {
                phase
            };
        }
        StateKey {
            triplets,
            phase,
            last: prefix.last().copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub key: StateKey,
    /// Next-token counts.
    pub next: Vec<(TokenId, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTable {
    pub fingerprint: u64,
    pub entries: Vec<TableEntry>,
}

/// `scorer.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerTables {
    pub format_version: u32,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub delimiters: Delimiters,
    /// Weight of the per-image table in the mixture.
    pub image_weight: f64,
    /// Uniform mass mixed into every step.
    pub smoothing: f64,
    pub global: Vec<TableEntry>,
    pub images: Vec<ImageTable>,
}

type Dist = Vec<(TokenId, f64)>;

fn normalize(counts: &[(TokenId, u32)]) -> Dist {
    let total: u32 = counts.iter().map(|(_, c)| c).sum();
    counts
        .iter()
        .map(|&(t, c)| (t, c as f64 / total as f64))
        .collect()
}

#[derive(Debug, Clone)]
pub struct FixtureScorer {
    tables: ScorerTables,
    global: HashMap<StateKey, Dist>,
    backoff: HashMap<(Phase, Option<TokenId>), Dist>,
    images: HashMap<u64, HashMap<StateKey, Dist>>,
}

fn count_sequences<'a>(
    seqs: impl IntoIterator<Item = &'a [TokenId]>,
    delims: &Delimiters,
) -> Vec<TableEntry> {
    let mut counts: BTreeMap<StateKey, BTreeMap<TokenId, u32>> = BTreeMap::new();
    for seq in seqs {
        for i in 0..seq.len() {
            *counts
                .entry(delims.state(&seq[..i]))
                .or_default()
                .entry(seq[i])
                .or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(key, next)| TableEntry {
            key,
            next: next.into_iter().collect(),
        })
        .collect()
}

impl FixtureScorer {
    pub fn from_tables(tables: ScorerTables) -> Result<Self, FixtureError> {
        let bad = |m: String| Err(FixtureError::BadTables(m));
        if tables.format_version != FORMAT_VERSION {
            return bad(format!("unsupported format_version {}", tables.format_version));
        }
        if !(0.0..=1.0).contains(&tables.image_weight) || !(0.0..1.0).contains(&tables.smoothing) {
            return bad("image_weight must lie in [0, 1] and smoothing in [0, 1)".into());
        }
        if tables.vocab_size == 0 || tables.hidden_dim == 0 {
            return bad("vocab_size and hidden_dim must be positive".into());
        }
        let check = |entries: &[TableEntry]| -> Result<(), FixtureError> {
            for e in entries {
                if e.next.is_empty() || e.next.iter().all(|(_, c)| *c == 0) {
                    return Err(FixtureError::BadTables(format!("empty row for {:?}", e.key)));
                }
                if let Some((t, _)) = e.next.iter().find(|(t, _)| *t as usize >= tables.vocab_size) {
                    return Err(FixtureError::BadTables(format!("token {t} out of range")));
                }
            }
            Ok(())
        };
        check(&tables.global)?;
        let global: HashMap<StateKey, Dist> = tables
            .global
            .iter()
            .map(|e| (e.key, normalize(&e.next)))
            .collect();
        let mut backoff_counts: BTreeMap<(Phase, Option<TokenId>), BTreeMap<TokenId, u32>> =
            BTreeMap::new();
        for e in &tables.global {
            let row = backoff_counts.entry((e.key.phase, e.key.last)).or_default();
            for &(t, c) in &e.next {
                *row.entry(t).or_default() += c;
            }
        }
        let backoff = backoff_counts
            .into_iter()
            .map(|(k, v)| (k, normalize(&v.into_iter().collect::<Vec<_>>())))
            .collect();
        let mut images = HashMap::new();
        for img in &tables.images {
            check(&img.entries)?;
            let t: HashMap<StateKey, Dist> = img
                .entries
                .iter()
                .map(|e| (e.key, normalize(&e.next)))
                .collect();
            if images.insert(img.fingerprint, t).is_some() {
                return Err(FixtureError::FingerprintCollision(img.fingerprint));
            }
        }
        Ok(Self {
            tables,
            global,
            backoff,
            images,
        })
    }

    pub fn tables(&self) -> &ScorerTables {
        &self.tables
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FixtureError> {
        let path = path.as_ref();
        let file_err = |message: String| FixtureError::File {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        let tables: ScorerTables = serde_json::from_str(&text).map_err(|e| file_err(e.to_string()))?;
        Self::from_tables(tables).map_err(|e| file_err(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FixtureError> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.tables).map_err(|e| FixtureError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        fs::write(path, text).map_err(|e| FixtureError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Distribution of the next token before smoothing.
    fn mixture(&self, features: &FeatureMatrix, key: &StateKey) -> Option<Vec<(TokenId, f64)>> {
        let glob = self
            .global
            .get(key)
            .or_else(|| self.backoff.get(&(key.phase, key.last)));
        let img = self
            .images
            .get(&features.fingerprint())
            .and_then(|t| t.get(key));
        match (img, glob) {
            (Some(i), Some(g)) => {
                let w = self.tables.image_weight;
                let mut out: Vec<(TokenId, f64)> = i.iter().map(|&(t, p)| (t, w * p)).collect();
                out.extend(g.iter().map(|&(t, p)| (t, (1.0 - w) * p)));
                Some(out)
            }
            (Some(d), None) | (None, Some(d)) => Some(d.clone()),
            (None, None) => None,
        }
    }
}

impl TokenScorer for FixtureScorer {
    fn vocab_size(&self) -> usize {
        self.tables.vocab_size
    }

    fn hidden_dim(&self) -> usize {
        self.tables.hidden_dim
    }

    fn eos_id(&self) -> TokenId {
        self.tables.delimiters.eos
    }

    fn step(&self, features: &FeatureMatrix, prefix: &[TokenId]) -> Result<Step, DecodeError> {
        let v = self.tables.vocab_size;
        let key = self.tables.delimiters.state(prefix);
        let eps = self.tables.smoothing;
        let mut probs = vec![eps / v as f64; v];
        match self.mixture(features, &key) {
            Some(d) => {
                for (t, p) in d {
                    probs[t as usize] += (1.0 - eps) * p;
                }
            }
            None => probs.iter_mut().for_each(|p| *p = 1.0 / v as f64),
        }
        let last = prefix.last().map_or(u64::MAX, |&t| t as u64);
        Ok(Step {
            probs,
            hidden: hashed_vector(&[last, prefix.len() as u64], self.tables.hidden_dim),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorerParams {
    pub hidden_dim: usize,
    pub image_weight: f64,
    pub smoothing: f64,
}

impl Default for ScorerParams {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            image_weight: 0.8,
            smoothing: 1e-3,
        }
    }
}

/// Builds the bigram scorer from serialized graphs (body followed by
/// `[EOS]`). `features[i]` identifies image `i`; graphs without relations
/// are skipped.
pub fn build_fixture_scorer(
    graphs: &[SceneGraph],
    features: &[FeatureMatrix],
    space: &CategorySpace,
    vocab: &Vocabulary,
    params: ScorerParams,
) -> Result<FixtureScorer, FixtureError> {
    if graphs.len() != features.len() {
        return Err(FixtureError::FeatureCount {
            graphs: graphs.len(),
            features: features.len(),
        });
    }
    let delims = Delimiters::of(vocab);
    let cfg = SerializationConfig::new(vocab)?;
    let mut bodies = Vec::new();
    let mut images = Vec::new();
    for (g, f) in graphs.iter().zip(features) {
        if g.relations.is_empty() {
            continue;
        }
        let mut body = serialize_graph(g, space, vocab, &cfg)?.body;
        body.push(delims.eos);
        images.push(ImageTable {
            fingerprint: f.fingerprint(),
            entries: count_sequences([body.as_slice()], &delims),
        });
        bodies.push(body);
    }
    if bodies.is_empty() {
        return Err(FixtureError::NoGraphs);
    }
    FixtureScorer::from_tables(ScorerTables {
        format_version: FORMAT_VERSION,
        vocab_size: vocab.len(),
        hidden_dim: params.hidden_dim,
        delimiters: delims,
        image_weight: params.image_weight,
        smoothing: params.smoothing,
        global: count_sequences(bodies.iter().map(Vec::as_slice), &delims),
        images,
    })
}

// ---------------------------------------------------------------- dataset

pub const ENTITY_NAMES: [&str; 12] = [
    "man",
    "woman",
    "horse",
    "dog",
    "tall tree",
    "red car",
    "street sign",
    "wooden bench",
    "white plate",
    "table",
    "window",
    "grass",
];

/// No name's tokens are a subset of another's.
pub const PREDICATE_NAMES: [&str; 10] = [
    "on",
    "holding",
    "next to",
    "riding",
    "parked near",
    "behind",
    "has",
    "sitting at",
    "in front of",
    "wearing",
];

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub images: usize,
    pub train_images: usize,
    pub seed: u64,
    pub model_dim: usize,
    pub background_rows: usize,
    /// Serialized length cap (body plus `[EOS]`).
    pub max_len: usize,
    pub max_relations: usize,
    pub scorer: ScorerParams,
    pub novel_fraction: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            images: 20,
            train_images: 40,
            seed: 7,
            model_dim: 16,
            background_rows: 4,
            max_len: 24,
            max_relations: 3,
            scorer: ScorerParams::default(),
            novel_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixtureDataset {
    pub vocab: Vocabulary,
    pub space: CategorySpace,
    /// Ground truth as written to `gt.jsonl` (pixel boxes).
    pub records: Vec<GraphRecord>,
    pub graphs: Vec<SceneGraph>,
    pub train: Vec<SceneGraph>,
    pub features: Vec<(String, FeatureMatrix)>,
    pub scorer: FixtureScorer,
    pub weights: GroundingWeights,
}

pub fn fixture_vocabulary() -> Vocabulary {
    let mut words: Vec<String> = Vec::new();
    for name in ENTITY_NAMES.iter().chain(&PREDICATE_NAMES) {
        for w in name.split_whitespace() {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
    }
    for w in crate::codec::PROMPT.split_whitespace() {
        if !words.iter().any(|x| x == w) {
            words.push(w.to_string());
        }
    }
    words.sort();
    let tokens = [ENT, REL, UNK, BOS, EOS, AND, COMMA]
        .into_iter()
        .map(String::from)
        .chain(words);
    Vocabulary::new(tokens).expect("fixture vocabulary is well-formed")
}

fn random_record(
    id: String,
    rng: &mut ChaCha8Rng,
    space: &CategorySpace,
    vocab: &Vocabulary,
    cfg: &FixtureConfig,
) -> Result<GraphRecord, FixtureError> {
    let width = *[480.0, 640.0, 800.0].choose(rng).unwrap();
    let height = *[360.0, 480.0, 600.0].choose(rng).unwrap();
    // entities sit in distinct cells of a 3x3 grid, so they never overlap
    let mut cells: Vec<usize> = (0..9).collect();
    cells.shuffle(rng);
    let n_ent = rng.gen_range(3..=5);
    let (cw, ch) = (width / 3.0, height / 3.0);
    let entities: Vec<EntityRecord> = cells[..n_ent]
        .iter()
        .map(|&c| {
            let (x0, y0) = ((c % 3) as f64 * cw, (c / 3) as f64 * ch);
            let mx = rng.gen_range(0.0..cw / 5.0);
            let my = rng.gen_range(0.0..ch / 5.0);
            let mx2 = rng.gen_range(0.0..cw / 5.0);
            let my2 = rng.gen_range(0.0..ch / 5.0);
            EntityRecord {
                bbox: [
                    (x0 + mx).floor(),
                    (y0 + my).floor(),
                    (x0 + cw - mx2).floor(),
                    (y0 + ch - my2).floor(),
                ],
                category: ENTITY_NAMES.choose(rng).unwrap().to_string(),
                score: None,
            }
        })
        .collect();
    let mut pairs: Vec<(usize, usize)> = (0..n_ent)
        .flat_map(|s| (0..n_ent).filter(move |&o| o != s).map(move |o| (s, o)))
        .collect();
    pairs.shuffle(rng);
    let target = rng.gen_range(1..=cfg.max_relations);
    let ser = SerializationConfig::new(vocab)?;
    let mut rec = GraphRecord {
        format_version: FORMAT_VERSION,
        image_id: id,
        width,
        height,
        entities,
        relations: Vec::new(),
    };
    for &(s, o) in &pairs {
        if rec.relations.len() == target {
            break;
        }
        rec.relations.push(RelationRecord {
            subject: s,
            predicate: PREDICATE_NAMES.choose(rng).unwrap().to_string(),
            object: o,
            score: None,
        });
        let g = rec.to_graph(space).map_err(FixtureError::BadTables)?;
        let len = serialize_graph(&g, space, vocab, &ser)?.body.len() + 1;
        if len > cfg.max_len && rec.relations.len() > 1 {
            rec.relations.pop();
            break;
        }
    }
    Ok(rec)
}

/// Vision features of one fixture image: one row per entity (normalized box
/// then a category code) followed by background rows.
fn fixture_features(g: &SceneGraph, index: usize, cfg: &FixtureConfig) -> FeatureMatrix {
    let d = cfg.model_dim;
    let mut rows = Vec::new();
    for e in &g.entities {
        let mut row = e.bbox.to_array().to_vec();
        row.extend(
            hashed_vector(&[0xca7, e.category_id as u64], d.saturating_sub(4))
                .into_iter()
                .map(|v| 0.5 * v),
        );
        row.truncate(d);
        rows.push(row);
    }
    for r in 0..cfg.background_rows {
        rows.push(hashed_vector(&[0xb6, index as u64, r as u64], d));
    }
    FeatureMatrix(Matrix::from_rows(&rows))
}

pub fn make_fixture(cfg: &FixtureConfig) -> Result<FixtureDataset, FixtureError> {
    let vocab = fixture_vocabulary();
    let space = CategorySpace::new(
        ENTITY_NAMES.iter().map(|s| s.to_string()).collect(),
        PREDICATE_NAMES.iter().map(|s| s.to_string()).collect(),
        Vec::new(),
    )
    .map_err(|e| FixtureError::BadTables(e.to_string()))?
    .with_random_novel_split(cfg.novel_fraction, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.images);
    for i in 0..cfg.images {
        records.push(random_record(format!("img{i:03}"), &mut rng, &space, &vocab, cfg)?);
    }
    let mut train = Vec::with_capacity(cfg.train_images);
    for i in 0..cfg.train_images {
        let r = random_record(format!("train{i:03}"), &mut rng, &space, &vocab, cfg)?;
        train.push(r.to_graph(&space).map_err(FixtureError::BadTables)?);
    }
    let graphs: Vec<SceneGraph> = records
        .iter()
        .map(|r| r.to_graph(&space))
        .collect::<Result<_, _>>()
        .map_err(FixtureError::BadTables)?;
    let features: Vec<(String, FeatureMatrix)> = graphs
        .iter()
        .enumerate()
        .map(|(i, g)| (g.image_id.clone(), fixture_features(g, i, cfg)))
        .collect();
    let feats: Vec<FeatureMatrix> = features.iter().map(|(_, f)| f.clone()).collect();
    let scorer = build_fixture_scorer(&graphs, &feats, &space, &vocab, cfg.scorer)?;
    let weights = GroundingWeights::random(
        GroundingConfig {
            hidden_dim: cfg.scorer.hidden_dim,
            model_dim: cfg.model_dim,
            heads: 2,
            ffn_dim: 2 * cfg.model_dim,
            box_hidden_dim: cfg.model_dim,
            layers: 2,
            positional_encoding: false,
            layer_norm_eps: 1e-5,
        },
        cfg.seed,
    )?;
    Ok(FixtureDataset {
        vocab,
        space,
        records,
        graphs,
        train,
        features,
        scorer,
        weights,
    })
}

/// Run config pointing at the files written by [`write_fixture`].
pub fn fixture_run_config(cfg: &FixtureConfig) -> RunConfig {
    let mut rc = RunConfig {
        seed: cfg.seed,
        novel_fraction: cfg.novel_fraction,
        ..RunConfig::default()
    };
    let p = &mut rc.paths;
    p.vocab = Some("vocab.txt".into());
    p.categories = Some("categories.json".into());
    p.weights = Some("weights.json".into());
    p.scorer = Some("scorer.json".into());
    p.features = Some("features.jsonl".into());
    p.ground_truth = Some("gt.jsonl".into());
    p.seen_triplets = Some("seen_triplets.tsv".into());
    p.graphs_out = Some("out/graphs.jsonl".into());
    p.sequences_out = Some("out/pred.jsonl".into());
    rc.generation.max_len = cfg.max_len;
    rc
}

/// Writes `vocab.txt`, `categories.json`, `gt.jsonl`, `train.jsonl`,
/// `seen_triplets.tsv`, `features.jsonl`, `scorer.json`, `weights.json` and
/// `run.config` into `dir`.
pub fn write_fixture(ds: &FixtureDataset, cfg: &FixtureConfig, dir: &Path) -> Result<(), FixtureError> {
    let file_err = |path: &Path, e: &dyn std::fmt::Display| FixtureError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    fs::create_dir_all(dir).map_err(|e| file_err(dir, &e))?;
    let vocab_path = dir.join("vocab.txt");
    ds.vocab.save(&vocab_path).map_err(|e| file_err(&vocab_path, &e))?;
    save_categories(dir.join("categories.json"), &ds.space)?;
    let gt = dir.join("gt.jsonl");
    let mut text = String::new();
    for r in &ds.records {
        text.push_str(&serde_json::to_string(r).map_err(|e| file_err(&gt, &e))?);
        text.push('\n');
    }
    fs::write(&gt, text).map_err(|e| file_err(&gt, &e))?;
    crate::io::save_scene_graphs(dir.join("train.jsonl"), &ds.train, &ds.space, false)?;
    let seen_path = dir.join("seen_triplets.tsv");
    save_seen_triplets(&collect_seen_triplets(&ds.train), &ds.space, &seen_path)
        .map_err(|e| file_err(&seen_path, &e))?;
    save_features(dir.join("features.jsonl"), &ds.features)?;
    ds.scorer.save(dir.join("scorer.json"))?;
    save_weights(&ds.weights, dir.join("weights.json"))?;
    let run = dir.join("run.config");
    fs::write(&run, fixture_run_config(cfg).to_toml()).map_err(|e| file_err(&run, &e))?;
    Ok(())
}

/// Sequences that spell each graph's serialization with one-hot score
/// rows, as an oracle scorer would emit them. Hidden states follow the
/// fixture scorer's hashing; `with_boxes` attaches the true entity boxes.
pub fn oracle_predictions(
    graphs: &[SceneGraph],
    space: &CategorySpace,
    vocab: &Vocabulary,
    hidden_dim: usize,
    with_boxes: bool,
) -> Result<Vec<ImagePrediction>, FixtureError> {
    let cfg = SerializationConfig::new(vocab)?;
    let eos = vocab.specials().eos;
    graphs
        .iter()
        .map(|g| {
            let ser = serialize_graph(g, space, vocab, &cfg)?;
            let mut tokens = ser.body;
            tokens.push(eos);
            let hidden = (0..tokens.len())
                .map(|i| {
                    let last = if i == 0 { u64::MAX } else { tokens[i - 1] as u64 };
                    hashed_vector(&[last, i as u64], hidden_dim)
                })
                .collect();
            let seq = ScoredSequence {
                scores: tokens.iter().map(|&t| SparseRow(vec![(t, 1.0)])).collect(),
                tokens,
                hidden,
                seed: 0,
                round: 0,
            };
            Ok(ImagePrediction {
                image_id: g.image_id.clone(),
                sequences: vec![seq],
                boxes: vec![with_boxes.then_some(ser.boxes)],
            })
        })
        .collect()
}
