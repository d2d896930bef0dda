//! File formats: `gt.jsonl` / predicted graphs, `pred.jsonl` prediction
//! records with an optional `.hidden.bin` sidecar, `features.jsonl`,
//! `categories.json` and the TOML run config.
//!
//! Every file carries `format_version`; loaders reject unknown fields and
//! report the file and line of the first problem.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::codec::TripletOrder;
use crate::conversion::ConversionConfig;
use crate::decoder::{FeatureMatrix, GenerationConfig, ScoredSequence, SparseRow};
use crate::eval::EvalConfig;
use crate::model::{Box2, CategorySpace, SceneGraph};
use crate::postprocess::PostprocessConfig;
use crate::tensor::Matrix;
use crate::tokenizer::TokenId;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Line {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn file_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::File {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn check_version(v: u32) -> Result<(), String> {
    if v == FORMAT_VERSION {
        Ok(())
    } else {
        Err(format!("unsupported format_version {v}"))
    }
}

/// Parses every non-blank line of a JSONL file with `f`. Errors carry the
/// 1-based line number.
fn read_jsonl<T, U>(
    path: &Path,
    mut f: impl FnMut(T, usize) -> Result<U, String>,
) -> Result<Vec<U>, IoError>
where
    T: DeserializeOwned,
{
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| IoError::Line {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let row: T = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        out.push(f(row, i + 1).map_err(err)?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row).map_err(|e| file_err(path, e.to_string()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

// ---------------------------------------------------------------- graphs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityRecord {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationRecord {
    pub subject: usize,
    pub predicate: String,
    pub object: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// One scene graph per JSONL row. Ground truth uses pixel boxes and no
/// scores; predicted graphs use `width = height = 1` and carry scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphRecord {
    pub format_version: u32,
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub entities: Vec<EntityRecord>,
    pub relations: Vec<RelationRecord>,
}

impl GraphRecord {
    pub fn from_graph(g: &SceneGraph, space: &CategorySpace, with_scores: bool) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            image_id: g.image_id.clone(),
            width: 1.0,
            height: 1.0,
            entities: g
                .entities
                .iter()
                .map(|e| EntityRecord {
                    bbox: e.bbox.to_array(),
                    category: space.entity_names()[e.category_id].clone(),
                    score: with_scores.then_some(e.score),
                })
                .collect(),
            relations: g
                .relations
                .iter()
                .map(|r| RelationRecord {
                    subject: r.subject,
                    predicate: space.predicate_names()[r.predicate_id].clone(),
                    object: r.object,
                    score: with_scores.then_some(r.predicate_score),
                })
                .collect(),
        }
    }

    pub fn to_graph(&self, space: &CategorySpace) -> Result<SceneGraph, String> {
        check_version(self.format_version)?;
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(format!(
                "image size must be positive, got {}x{}",
                self.width, self.height
            ));
        }
        let score = |s: Option<f64>, what: &str| -> Result<f64, String> {
            let v = s.unwrap_or(1.0);
            if v.is_finite() && v >= 0.0 {
                Ok(v)
            } else {
                Err(format!("{what} score {v} must be finite and non-negative"))
            }
        };
        let mut g = SceneGraph::new(self.image_id.clone());
        for (i, e) in self.entities.iter().enumerate() {
            let cat = space
                .entity_id(&e.category)
                .ok_or_else(|| format!("entity {i}: unknown category {:?}", e.category))?;
            let b = Box2::from_pixels(e.bbox, self.width, self.height);
            if !b.is_valid() {
                return Err(format!("entity {i}: invalid box {:?}", e.bbox));
            }
            g.add_entity(cat, b, score(e.score, "entity")?);
        }
        let n = g.entities.len();
        for (i, r) in self.relations.iter().enumerate() {
            for (what, idx) in [("subject", r.subject), ("object", r.object)] {
                if idx >= n {
                    return Err(format!(
                        "relation {i}: {what} index {idx} out of range for {n} entities"
                    ));
                }
            }
            if r.subject == r.object {
                return Err(format!("relation {i}: subject and object are the same entity"));
            }
            let p = space
                .predicate_id(&r.predicate)
                .ok_or_else(|| format!("relation {i}: unknown predicate {:?}", r.predicate))?;
            g.add_relation(r.subject, p, r.object, score(r.score, "relation")?);
        }
        Ok(g)
    }
}

/// Loads a graph JSONL file (ground truth or predictions); boxes are
/// normalized by the row's width and height.
pub fn load_scene_graphs(path: impl AsRef<Path>, space: &CategorySpace) -> Result<Vec<SceneGraph>, IoError> {
    read_jsonl(path.as_ref(), |r: GraphRecord, _| r.to_graph(space))
}

/// Writes graphs with normalized boxes (`width = height = 1`).
pub fn save_scene_graphs(
    path: impl AsRef<Path>,
    graphs: &[SceneGraph],
    space: &CategorySpace,
    with_scores: bool,
) -> Result<(), IoError> {
    write_jsonl(
        path.as_ref(),
        graphs
            .iter()
            .map(|g| GraphRecord::from_graph(g, space, with_scores)),
    )
}

// ------------------------------------------------------------ categories

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CategoriesFile {
    format_version: u32,
    entity_names: Vec<String>,
    predicate_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    novel_predicate_ids: Option<Vec<usize>>,
}

/// Loads `categories.json`. Without `novel_predicate_ids`, a seeded random
/// `novel_fraction` of the predicates becomes novel.
pub fn load_categories(
    path: impl AsRef<Path>,
    novel_fraction: f64,
    seed: u64,
) -> Result<CategorySpace, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let f: CategoriesFile =
        serde_json::from_str(&text).map_err(|e| file_err(path, e.to_string()))?;
    check_version(f.format_version).map_err(|m| file_err(path, m))?;
    let supplied = f.novel_predicate_ids.is_some();
    let space = CategorySpace::new(
        f.entity_names,
        f.predicate_names,
        f.novel_predicate_ids.unwrap_or_default(),
    )
    .map_err(|e| file_err(path, e.to_string()))?;
    Ok(if supplied {
        space
    } else {
        space.with_random_novel_split(novel_fraction, seed)
    })
}

pub fn save_categories(path: impl AsRef<Path>, space: &CategorySpace) -> Result<(), IoError> {
    let path = path.as_ref();
    let f = CategoriesFile {
        format_version: FORMAT_VERSION,
        entity_names: space.entity_names().to_vec(),
        predicate_names: space.predicate_names().to_vec(),
        novel_predicate_ids: Some(space.novel_predicate_ids().to_vec()),
    };
    let text = serde_json::to_string_pretty(&f).map_err(|e| file_err(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

// -------------------------------------------------------------- features

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub format_version: u32,
    pub image_id: String,
    pub rows: Vec<Vec<f64>>,
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<(String, FeatureMatrix)>, IoError> {
    read_jsonl(path.as_ref(), |r: FeatureRecord, _| {
        check_version(r.format_version)?;
        let cols = r.rows.first().map_or(0, Vec::len);
        if r.rows.is_empty() || cols == 0 {
            return Err("feature matrix is empty".into());
        }
        if r.rows.iter().any(|row| row.len() != cols) {
            return Err("feature rows differ in length".into());
        }
        if r.rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite feature value".into());
        }
        Ok((r.image_id, FeatureMatrix(Matrix::from_rows(&r.rows))))
    })
}

pub fn save_features(path: impl AsRef<Path>, features: &[(String, FeatureMatrix)]) -> Result<(), IoError> {
    write_jsonl(
        path.as_ref(),
        features.iter().map(|(id, f)| FeatureRecord {
            format_version: FORMAT_VERSION,
            image_id: id.clone(),
            rows: (0..f.0.rows()).map(|i| f.0.row(i).to_vec()).collect(),
        }),
    )
}

// ------------------------------------------------------------ predictions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceRecord {
    pub tokens: Vec<TokenId>,
    /// Top-k `(id, score)` pairs per token.
    pub sparse_scores: Vec<Vec<(TokenId, f64)>>,
    /// Inline hidden states, one row per token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<Vec<f64>>>,
    /// Byte offset of this sequence's hidden states in the sidecar file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_offset: Option<u64>,
    pub round: usize,
    pub seed: u64,
    /// Precomputed boxes, one per entity span in parse order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<[f64; 4]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub format_version: u32,
    pub image_id: String,
    pub hidden_dim: usize,
    pub sequences: Vec<SequenceRecord>,
}

/// Sequences of one image as used by the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrediction {
    pub image_id: String,
    pub sequences: Vec<ScoredSequence>,
    /// Per sequence, optional precomputed entity boxes.
    pub boxes: Vec<Option<Vec<Box2>>>,
}

/// Sidecar path for a prediction file: `pred.jsonl` -> `pred.hidden.bin`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("hidden.bin")
}

fn check_sequence(s: &SequenceRecord, hidden_dim: usize) -> Result<(), String> {
    let n = s.tokens.len();
    if s.sparse_scores.len() != n {
        return Err(format!(
            "round {}: {} score rows for {} tokens",
            s.round,
            s.sparse_scores.len(),
            n
        ));
    }
    for (i, row) in s.sparse_scores.iter().enumerate() {
        if let Some((id, v)) = row.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(format!(
                "round {}: token {i}: score {v} for id {id} must be finite and non-negative",
                s.round
            ));
        }
    }
    match (&s.hidden, s.hidden_offset) {
        (Some(_), Some(_)) => {
            return Err(format!(
                "round {}: both inline hidden states and hidden_offset given",
                s.round
            ))
        }
        (Some(h), None) if h.len() != n || h.iter().any(|r| r.len() != hidden_dim) => {
            return Err(format!(
                "round {}: hidden states must be {n} rows of {hidden_dim}",
                s.round
            ));
        }
        _ => {}
    }
    if let Some(b) = &s.boxes {
        if let Some(bad) = b.iter().find(|b| !Box2::from_array(**b).is_valid()) {
            return Err(format!("round {}: invalid box {bad:?}", s.round));
        }
    }
    Ok(())
}

/// Loads `pred.jsonl`, reading hidden states from the sidecar when rows
/// reference it. Sequences without hidden states get empty rows; the
/// pipeline then requires precomputed boxes for them.
pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<ImagePrediction>, IoError> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let mut sidecar: Option<File> = None;
    read_jsonl(path, |r: PredictionRecord, _| {
        check_version(r.format_version)?;
        let mut sequences = Vec::with_capacity(r.sequences.len());
        let mut boxes = Vec::with_capacity(r.sequences.len());
        for s in r.sequences {
            check_sequence(&s, r.hidden_dim)?;
            let n = s.tokens.len();
            let hidden = match (s.hidden, s.hidden_offset) {
                (Some(h), _) => h,
                (None, Some(off)) => {
                    if sidecar.is_none() {
                        sidecar = Some(
                            File::open(&side)
                                .map_err(|e| format!("{}: {e}", side.display()))?,
                        );
                    }
                    read_hidden(sidecar.as_mut().unwrap(), off, n, r.hidden_dim)
                        .map_err(|e| format!("{}: offset {off}: {e}", side.display()))?
                }
                (None, None) => vec![Vec::new(); n],
            };
            boxes.push(
                s.boxes
                    .map(|b| b.into_iter().map(Box2::from_array).collect()),
            );
            sequences.push(ScoredSequence {
                tokens: s.tokens,
                scores: s.sparse_scores.into_iter().map(SparseRow).collect(),
                hidden,
                seed: s.seed,
                round: s.round,
            });
        }
        Ok(ImagePrediction {
            image_id: r.image_id,
            sequences,
            boxes,
        })
    })
}

fn read_hidden(f: &mut File, offset: u64, rows: usize, dim: usize) -> std::io::Result<Vec<Vec<f64>>> {
    f.seek(SeekFrom::Start(offset))?;
    let mut buf = vec![0u8; rows * dim * 8];
    f.read_exact(&mut buf)?;
    let vals: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(bad) = vals.iter().find(|v| !v.is_finite()) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("non-finite hidden value {bad}"),
        ));
    }
    Ok(vals.chunks(dim.max(1)).take(rows).map(<[f64]>::to_vec).collect())
}

/// Writes `pred.jsonl`. With `sidecar`, hidden states go to the
/// `.hidden.bin` file as little-endian f64 and rows reference them by offset.
pub fn save_predictions(
    path: impl AsRef<Path>,
    preds: &[ImagePrediction],
    hidden_dim: usize,
    sidecar: bool,
) -> Result<(), IoError> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let mut bin = if sidecar {
        Some(BufWriter::new(File::create(&side).map_err(io_err(&side))?))
    } else {
        None
    };
    let mut offset = 0u64;
    let mut rows = Vec::with_capacity(preds.len());
    for p in preds {
        let mut sequences = Vec::with_capacity(p.sequences.len());
        for (s, b) in p.sequences.iter().zip(&p.boxes) {
            let has_hidden = s.hidden.iter().all(|h| h.len() == hidden_dim) && hidden_dim > 0;
            let (hidden, hidden_offset) = match (&mut bin, has_hidden) {
                (Some(w), true) => {
                    let start = offset;
                    for v in s.hidden.iter().flatten() {
                        w.write_all(&v.to_le_bytes()).map_err(io_err(&side))?;
                        offset += 8;
                    }
                    (None, Some(start))
                }
                (None, true) => (Some(s.hidden.clone()), None),
                _ => (None, None),
            };
            sequences.push(SequenceRecord {
                tokens: s.tokens.clone(),
                sparse_scores: s.scores.iter().map(|r| r.0.clone()).collect(),
                hidden,
                hidden_offset,
                round: s.round,
                seed: s.seed,
                boxes: b.as_ref().map(|b| b.iter().map(|x| x.to_array()).collect()),
            });
        }
        rows.push(PredictionRecord {
            format_version: FORMAT_VERSION,
            image_id: p.image_id.clone(),
            hidden_dim,
            sequences,
        });
    }
    if let Some(mut w) = bin {
        w.flush().map_err(io_err(&side))?;
    }
    write_jsonl(path, rows)
}

// ------------------------------------------------------------ run config

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub vocab: Option<PathBuf>,
    pub categories: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    /// Mock scorer tables; generation runs when set.
    pub scorer: Option<PathBuf>,
    pub features: Option<PathBuf>,
    /// Externally produced prediction records, used instead of the scorer.
    pub predictions_in: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub seen_triplets: Option<PathBuf>,
    pub graphs_out: Option<PathBuf>,
    pub sequences_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SerializationSettings {
    pub max_triplets: Option<usize>,
    pub order: TripletOrder,
}

/// `run.config`, TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    /// Base seed for generation and the random novel split.
    pub seed: u64,
    /// Worker threads; 0 uses the rayon default.
    pub threads: usize,
    pub novel_fraction: f64,
    /// Write hidden states of generated sequences to a binary sidecar.
    pub hidden_sidecar: bool,
    pub paths: Paths,
    pub serialization: SerializationSettings,
    pub generation: GenerationConfig,
    pub conversion: ConversionConfig,
    pub postprocess: PostprocessConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed: 0,
            threads: 0,
            novel_fraction: 0.5,
            hidden_sidecar: true,
            paths: Paths::default(),
            serialization: SerializationSettings::default(),
            generation: GenerationConfig::default(),
            conversion: ConversionConfig::default(),
            postprocess: PostprocessConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses the config; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path, origin: &Path) -> Result<Self, IoError> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| file_err(origin, e.to_string()))?;
        check_version(cfg.format_version).map_err(|m| file_err(origin, m))?;
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IoError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    fn resolve(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.vocab,
            &mut p.categories,
            &mut p.weights,
            &mut p.scorer,
            &mut p.features,
            &mut p.predictions_in,
            &mut p.ground_truth,
            &mut p.seen_triplets,
            &mut p.graphs_out,
            &mut p.sequences_out,
        ] {
            if let Some(path) = slot.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }

    /// Generation config with the run seed applied.
    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            seed: self.seed,
            ..self.generation.clone()
        }
    }

    /// Checks value ranges and that every input file named exists.
    pub fn validate(&self, origin: &Path) -> Result<(), IoError> {
        let bad = |m: String| file_err(origin, m);
        self.generation.validate().map_err(|e| bad(e.to_string()))?;
        self.conversion.validate().map_err(|e| bad(e.to_string()))?;
        self.postprocess.validate().map_err(|e| bad(e.to_string()))?;
        self.eval.validate().map_err(|e| bad(e.to_string()))?;
        if !(self.novel_fraction > 0.0 && self.novel_fraction < 1.0) {
            return Err(bad(format!(
                "novel_fraction {} outside (0, 1)",
                self.novel_fraction
            )));
        }
        if self.serialization.max_triplets == Some(0) {
            return Err(bad("serialization.max_triplets must be at least 1".into()));
        }
        let p = &self.paths;
        for (key, path) in [
            ("vocab", &p.vocab),
            ("categories", &p.categories),
            ("weights", &p.weights),
            ("scorer", &p.scorer),
            ("features", &p.features),
            ("predictions_in", &p.predictions_in),
            ("ground_truth", &p.ground_truth),
            ("seen_triplets", &p.seen_triplets),
        ] {
            if let Some(path) = path {
                if !path.is_file() {
                    return Err(bad(format!("paths.{key}: no such file {}", path.display())));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> CategorySpace {
        CategorySpace::new(
            vec!["man".into(), "horse".into(), "tall tree".into()],
            vec!["on".into(), "next to".into()],
            vec![1],
        )
        .unwrap()
    }

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn ground_truth_row_is_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "gt.jsonl",
            r#"{"format_version":1,"image_id":"a","width":200,"height":100,"entities":[{"box":[0,0,100,50],"category":"man"},{"box":[100,50,200,100],"category":"tall tree"}],"relations":[{"subject":0,"predicate":"next to","object":1}]}"#,
        );
        let g = load_scene_graphs(&p, &space()).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].entities[0].bbox, Box2::new(0.0, 0.0, 0.5, 0.5));
        assert_eq!(g[0].entities[1].category_id, 2);
        assert_eq!(g[0].category_triples(), vec![(0, 1, 2)]);
    }

    #[test]
    fn bad_entity_index_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let good = r#"{"format_version":1,"image_id":"a","width":1,"height":1,"entities":[],"relations":[]}"#;
        let bad = r#"{"format_version":1,"image_id":"b","width":1,"height":1,"entities":[{"box":[0,0,0.5,0.5],"category":"man"},{"box":[0.5,0.5,1,1],"category":"man"}],"relations":[{"subject":5,"predicate":"on","object":1}]}"#;
        let p = write(dir.path(), "gt.jsonl", &format!("{good}\n{bad}\n"));
        let e = load_scene_graphs(&p, &space()).unwrap_err();
        match &e {
            IoError::Line { line, message, .. } => {
                assert_eq!(*line, 2);
                assert!(message.contains("index 5"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(e.to_string().contains("gt.jsonl:2"));
    }

    #[test]
    fn unknown_category_and_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "gt.jsonl",
            r#"{"format_version":1,"image_id":"a","width":1,"height":1,"entities":[{"box":[0,0,0.5,0.5],"category":"dog"}],"relations":[]}"#,
        );
        assert!(load_scene_graphs(&p, &space())
            .unwrap_err()
            .to_string()
            .contains("\"dog\""));
        let p = write(dir.path(), "bad.jsonl", "\n{not json\n");
        assert!(matches!(
            load_scene_graphs(&p, &space()),
            Err(IoError::Line { line: 2, .. })
        ));
        let p = write(
            dir.path(),
            "extra.jsonl",
            r#"{"format_version":1,"image_id":"a","width":1,"height":1,"entities":[],"relations":[],"oops":1}"#,
        );
        assert!(load_scene_graphs(&p, &space()).is_err());
        let p = write(
            dir.path(),
            "v2.jsonl",
            r#"{"format_version":2,"image_id":"a","width":1,"height":1,"entities":[],"relations":[]}"#,
        );
        assert!(load_scene_graphs(&p, &space())
            .unwrap_err()
            .to_string()
            .contains("format_version"));
    }

    fn sample_graphs() -> Vec<SceneGraph> {
        let mut g = SceneGraph::new("x");
        let a = g.add_entity(0, Box2::new(0.1, 0.2, 0.3, 0.4), 0.7);
        let b = g.add_entity(2, Box2::new(0.5, 0.5, 0.9, 0.95), 1.3);
        g.add_relation(a, 1, b, 0.25);
        g.add_relation(b, 0, a, 0.5);
        vec![g, SceneGraph::new("empty")]
    }

    #[test]
    fn graph_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.jsonl");
        let graphs = sample_graphs();
        save_scene_graphs(&p, &graphs, &space(), true).unwrap();
        assert_eq!(load_scene_graphs(&p, &space()).unwrap(), graphs);
    }

    #[test]
    fn categories_round_trip_and_default_split() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("categories.json");
        save_categories(&p, &space()).unwrap();
        assert_eq!(load_categories(&p, 0.5, 0).unwrap(), space());
        let p2 = write(
            dir.path(),
            "c2.json",
            r#"{"format_version":1,"entity_names":["a"],"predicate_names":["p","q","r"]}"#,
        );
        let s = load_categories(&p2, 0.5, 3).unwrap();
        assert_eq!(s.novel_predicate_ids().len(), 2);
    }

    fn sample_predictions(with_hidden: bool) -> Vec<ImagePrediction> {
        let seq = |round: usize| ScoredSequence {
            tokens: vec![3, 1, 4],
            scores: vec![
                SparseRow(vec![(3, 0.5), (2, 0.25)]),
                SparseRow(vec![(1, 1.0)]),
                SparseRow(vec![(4, 0.125)]),
            ],
            hidden: if with_hidden {
                (0..3).map(|i| vec![i as f64 + 0.1 * round as f64, -1.5]).collect()
            } else {
                vec![Vec::new(); 3]
            },
            seed: 99 + round as u64,
            round,
        };
        vec![
            ImagePrediction {
                image_id: "a".into(),
                sequences: vec![seq(0), seq(1)],
                boxes: vec![None, Some(vec![Box2::new(0.0, 0.0, 0.5, 0.5)])],
            },
            ImagePrediction {
                image_id: "b".into(),
                sequences: vec![seq(0)],
                boxes: vec![None],
            },
        ]
    }

    #[test]
    fn predictions_round_trip_inline_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let preds = sample_predictions(true);
        let inline = dir.path().join("inline.jsonl");
        save_predictions(&inline, &preds, 2, false).unwrap();
        assert_eq!(load_predictions(&inline).unwrap(), preds);
        assert!(!sidecar_path(&inline).exists());

        let side = dir.path().join("pred.jsonl");
        save_predictions(&side, &preds, 2, true).unwrap();
        assert_eq!(
            fs::metadata(sidecar_path(&side)).unwrap().len(),
            3 * 3 * 2 * 8
        );
        assert_eq!(load_predictions(&side).unwrap(), preds);
    }

    #[test]
    fn predictions_without_hidden_states() {
        let dir = tempfile::tempdir().unwrap();
        let preds = sample_predictions(false);
        let p = dir.path().join("pred.jsonl");
        save_predictions(&p, &preds, 2, true).unwrap();
        assert_eq!(load_predictions(&p).unwrap(), preds);
    }

    #[test]
    fn prediction_length_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "pred.jsonl",
            r#"{"format_version":1,"image_id":"a","hidden_dim":1,"sequences":[{"tokens":[1,2],"sparse_scores":[[[1,0.5]]],"round":0,"seed":0}]}"#,
        );
        assert!(matches!(
            load_predictions(&p),
            Err(IoError::Line { line: 1, .. })
        ));
        let p = write(
            dir.path(),
            "neg.jsonl",
            r#"{"format_version":1,"image_id":"a","hidden_dim":1,"sequences":[{"tokens":[1],"sparse_scores":[[[1,-0.5]]],"round":0,"seed":0}]}"#,
        );
        assert!(load_predictions(&p).unwrap_err().to_string().contains("non-negative"));
    }

    #[test]
    fn truncated_sidecar_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.jsonl");
        save_predictions(&p, &sample_predictions(true), 2, true).unwrap();
        let side = sidecar_path(&p);
        let bytes = fs::read(&side).unwrap();
        fs::write(&side, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_predictions(&p).is_err());
    }

    #[test]
    fn features_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("features.jsonl");
        let f = vec![(
            "a".to_string(),
            FeatureMatrix(Matrix::from_rows(&[vec![0.1, 0.2], vec![1.0 / 3.0, -7.0]])),
        )];
        save_features(&p, &f).unwrap();
        let back = load_features(&p).unwrap();
        assert_eq!(back, f);
        assert_eq!(back[0].1.fingerprint(), f[0].1.fingerprint());
    }

    #[test]
    fn run_config_defaults_and_paths() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "vocab.txt", "x\n");
        let p = write(
            dir.path(),
            "run.config",
            "format_version = 1\nseed = 7\n[paths]\nvocab = \"vocab.txt\"\n[generation]\nrounds = 4\n[eval]\nprotocol = \"pcls\"\n",
        );
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.generation().seed, 7);
        assert_eq!(c.generation.rounds, 4);
        assert_eq!(c.generation.max_len, 24);
        assert_eq!(c.eval.protocol, crate::eval::Protocol::PCls);
        assert_eq!(c.paths.vocab.as_deref(), Some(dir.path().join("vocab.txt").as_path()));
        c.validate(&p).unwrap();
        let text = c.to_toml();
        let again = RunConfig::from_toml(&text, Path::new("/"), &p).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn run_config_rejects_missing_files_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "run.config",
            "format_version = 1\n[paths]\nweights = \"nope.json\"\n",
        );
        let c = RunConfig::load(&p).unwrap();
        let e = c.validate(&p).unwrap_err().to_string();
        assert!(e.contains("nope.json"), "{e}");
        let p = write(dir.path(), "b.config", "format_version = 1\nbogus = 3\n");
        assert!(RunConfig::load(&p).is_err());
        let p = write(dir.path(), "c.config", "format_version = 1\n[generation]\ntop_p = 1.5\n");
        assert!(RunConfig::load(&p).unwrap().validate(&p).is_err());
    }
}
