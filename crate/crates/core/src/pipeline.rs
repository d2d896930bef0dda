//! End-to-end inference: sequences (generated or ingested) are parsed,
//! converted to category scores, grounded to boxes and post-processed into
//! one ranked scene graph per image.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use crate::codec::{image_stats, ParseStats, ParsedSequence, TripletSpan};
use crate::conversion::{convert_scores, ConversionConfig, ConversionError};
use crate::decoder::{generate_rounds, DecodeError, FeatureMatrix, GenerationConfig, ScoredSequence, TokenScorer};
use crate::fixture::{FixtureError, FixtureScorer};
use crate::grounding::{load_weights, GroundingError, GroundingWeights};
use crate::io::{load_categories, load_features, load_predictions, ImagePrediction, IoError, RunConfig};
use crate::model::{Box2, CategorySpace, SceneGraph};
use crate::postprocess::{construct_scene_graph, PostprocessConfig, SpanPrediction, SpanSource};
use crate::tokenizer::{CategoryTokenTable, TokenizerError, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("image {image}: {source}")]
    Decode { image: String, source: DecodeError },
    #[error("image {image}: grounding: {source}")]
    Grounding {
        image: String,
        source: GroundingError,
    },
    #[error("image {image}: conversion: {source}")]
    Conversion {
        image: String,
        source: ConversionError,
    },
    #[error("image {image}: no vision features")]
    MissingFeatures { image: String },
    #[error("image {image}, round {round}: needs hidden states or precomputed boxes")]
    MissingHidden { image: String, round: usize },
    #[error("image {image}, round {round}: {got} precomputed boxes for {expected} entity spans")]
    BoxCount {
        image: String,
        round: usize,
        expected: usize,
        got: usize,
    },
    #[error("image {image}, round {round}: token id {id} at position {position} outside the vocabulary")]
    TokenOutOfRange {
        image: String,
        round: usize,
        position: usize,
        id: u32,
    },
    #[error("duplicate image id {0:?}")]
    DuplicateImage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Weights(#[from] GroundingError),
}

/// Everything needed to turn sequences into scene graphs.
#[derive(Debug, Clone)]
pub struct PipelineModel {
    pub vocab: Vocabulary,
    pub space: CategorySpace,
    pub entity_table: CategoryTokenTable,
    pub predicate_table: CategoryTokenTable,
    pub weights: GroundingWeights,
    pub conversion: ConversionConfig,
    pub postprocess: PostprocessConfig,
}

impl PipelineModel {
    pub fn new(
        vocab: Vocabulary,
        space: CategorySpace,
        weights: GroundingWeights,
        conversion: ConversionConfig,
        postprocess: PostprocessConfig,
    ) -> Result<Self, PipelineError> {
        conversion
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        postprocess
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let entity_table = vocab.tokenize_category_set(space.entity_names())?;
        let predicate_table = vocab.tokenize_category_set(space.predicate_names())?;
        Ok(Self {
            vocab,
            space,
            entity_table,
            predicate_table,
            weights,
            conversion,
            postprocess,
        })
    }
}

/// Result for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageOutput {
    pub graph: SceneGraph,
    pub stats: ParseStats,
    pub prediction: ImagePrediction,
}

fn convert(
    seq: &ScoredSequence,
    range: std::ops::Range<usize>,
    table: &CategoryTokenTable,
    beta: f64,
    image: &str,
) -> Result<crate::conversion::CategoryScores, PipelineError> {
    convert_scores(&seq.scores[range.clone()], &seq.tokens[range], table, beta).map_err(|source| {
        PipelineError::Conversion {
            image: image.to_string(),
            source,
        }
    })
}

/// Boxes for every entity span of one sequence, subject then object per
/// triplet.
fn sequence_boxes(
    model: &PipelineModel,
    image: &str,
    seq: &ScoredSequence,
    spans: &[TripletSpan],
    precomputed: Option<&Vec<Box2>>,
    features: Option<&FeatureMatrix>,
) -> Result<Vec<Box2>, PipelineError> {
    let expected = 2 * spans.len();
    if let Some(b) = precomputed {
        if b.len() != expected {
            return Err(PipelineError::BoxCount {
                image: image.to_string(),
                round: seq.round,
                expected,
                got: b.len(),
            });
        }
        return Ok(b.clone());
    }
    let features = features.ok_or_else(|| PipelineError::MissingFeatures {
        image: image.to_string(),
    })?;
    let hidden_dim = model.weights.config.hidden_dim;
    if seq.hidden.iter().any(|h| h.len() != hidden_dim) {
        if seq.hidden.iter().all(Vec::is_empty) {
            return Err(PipelineError::MissingHidden {
                image: image.to_string(),
                round: seq.round,
            });
        }
        return Err(PipelineError::Grounding {
            image: image.to_string(),
            source: GroundingError::Dimension {
                what: "sequence hidden states",
                expected: hidden_dim,
                got: seq.hidden.iter().map(Vec::len).find(|&l| l != hidden_dim).unwrap_or(0),
            },
        });
    }
    // entity queries pool the whole span, delimiter row included
    let blocks: Vec<_> = spans
        .iter()
        .flat_map(|s| [seq.hidden_block(s.subject.clone()), seq.hidden_block(s.object.clone())])
        .collect();
    model
        .weights
        .ground_spans(&blocks, features)
        .map(|b| b.0)
        .map_err(|source| PipelineError::Grounding {
            image: image.to_string(),
            source,
        })
}

/// Turns the sequences of one image into its ranked scene graph.
pub fn process_image(
    model: &PipelineModel,
    pred: &ImagePrediction,
    features: Option<&FeatureMatrix>,
) -> Result<(SceneGraph, ParseStats), PipelineError> {
    let image = pred.image_id.as_str();
    let vocab_len = model.vocab.len();
    let mut parsed = Vec::with_capacity(pred.sequences.len());
    let mut span_preds = Vec::new();
    for (si, seq) in pred.sequences.iter().enumerate() {
        if let Some((position, &id)) = seq
            .tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= vocab_len)
        {
            return Err(PipelineError::TokenOutOfRange {
                image: image.to_string(),
                round: seq.round,
                position,
                id,
            });
        }
        let p = ParsedSequence::new(seq.tokens.clone(), &model.vocab);
        if !p.spans.is_empty() {
            let boxes = sequence_boxes(
                model,
                image,
                seq,
                &p.spans,
                pred.boxes.get(si).and_then(Option::as_ref),
                features,
            )?;
            let cc = &model.conversion;
            for (j, span) in p.spans.iter().enumerate() {
                span_preds.push(SpanPrediction {
                    source: SpanSource { sequence: si, span: j },
                    subject: convert(seq, span.subject_content(), &model.entity_table, cc.beta_entity, image)?,
                    predicate: convert(seq, span.predicate_content(), &model.predicate_table, cc.beta_predicate, image)?,
                    object: convert(seq, span.object_content(), &model.entity_table, cc.beta_entity, image)?,
                    subject_box: boxes[2 * j],
                    object_box: boxes[2 * j + 1],
                });
            }
        }
        parsed.push(p);
    }
    let graph = construct_scene_graph(image, &span_preds, &model.postprocess);
    Ok((graph, image_stats(&parsed)))
}

/// Where the sequences come from.
pub enum SequenceSource<'a> {
    /// Generate with a scorer for every image that has features.
    Scorer {
        scorer: &'a dyn TokenScorer,
        generation: GenerationConfig,
    },
    /// Externally produced sequences.
    Records(Vec<ImagePrediction>),
}

/// Runs the pipeline over all images; output is sorted by image id and does
/// not depend on the number of worker threads.
pub fn run_pipeline(
    model: &PipelineModel,
    features: &[(String, FeatureMatrix)],
    source: SequenceSource<'_>,
) -> Result<Vec<ImageOutput>, PipelineError> {
    let mut feat: HashMap<&str, &FeatureMatrix> = HashMap::new();
    for (id, f) in features {
        if feat.insert(id.as_str(), f).is_some() {
            return Err(PipelineError::DuplicateImage(id.clone()));
        }
    }
    let mut outputs: Vec<ImageOutput> = match source {
        SequenceSource::Scorer { scorer, generation } => {
            if scorer.hidden_dim() != model.weights.config.hidden_dim {
                return Err(PipelineError::Config(format!(
                    "scorer hidden_dim {} does not match grounding hidden_dim {}",
                    scorer.hidden_dim(),
                    model.weights.config.hidden_dim
                )));
            }
            if scorer.vocab_size() != model.vocab.len() {
                return Err(PipelineError::Config(format!(
                    "scorer vocab_size {} does not match vocabulary size {}",
                    scorer.vocab_size(),
                    model.vocab.len()
                )));
            }
            features
                .par_iter()
                .map(|(id, f)| {
                    let sequences = generate_rounds(scorer, f, &generation).map_err(|source| {
                        PipelineError::Decode {
                            image: id.clone(),
                            source,
                        }
                    })?;
                    let pred = ImagePrediction {
                        image_id: id.clone(),
                        boxes: vec![None; sequences.len()],
                        sequences,
                    };
                    let (graph, stats) = process_image(model, &pred, Some(f))?;
                    Ok(ImageOutput {
                        graph,
                        stats,
                        prediction: pred,
                    })
                })
                .collect::<Result<_, PipelineError>>()?
        }
        SequenceSource::Records(records) => {
            let mut ids = std::collections::HashSet::new();
            for r in &records {
                if !ids.insert(r.image_id.as_str()) {
                    return Err(PipelineError::DuplicateImage(r.image_id.clone()));
                }
            }
            records
                .into_par_iter()
                .map(|pred| {
                    let f = feat.get(pred.image_id.as_str()).copied();
                    let (graph, stats) = process_image(model, &pred, f)?;
                    Ok(ImageOutput {
                        graph,
                        stats,
                        prediction: pred,
                    })
                })
                .collect::<Result<_, PipelineError>>()?
        }
    };
    outputs.sort_by(|a, b| a.graph.image_id.cmp(&b.graph.image_id));
    Ok(outputs)
}

/// Files named by a run config, loaded and cross-checked.
pub struct RunInputs {
    pub model: PipelineModel,
    pub features: Vec<(String, FeatureMatrix)>,
    pub scorer: Option<FixtureScorer>,
    pub records: Option<Vec<ImagePrediction>>,
}

fn required<'a>(p: &'a Option<std::path::PathBuf>, key: &str) -> Result<&'a Path, PipelineError> {
    p.as_deref()
        .ok_or_else(|| PipelineError::Config(format!("paths.{key} is required")))
}

impl RunInputs {
    pub fn load(cfg: &RunConfig) -> Result<Self, PipelineError> {
        let paths = &cfg.paths;
        let vocab = Vocabulary::load(required(&paths.vocab, "vocab")?)?;
        let space = load_categories(
            required(&paths.categories, "categories")?,
            cfg.novel_fraction,
            cfg.seed,
        )?;
        let weights = load_weights(required(&paths.weights, "weights")?)?;
        let features = match &paths.features {
            Some(p) => load_features(p)?,
            None => Vec::new(),
        };
        if let Some((id, f)) = features
            .iter()
            .find(|(_, f)| f.0.cols() != weights.config.model_dim)
        {
            return Err(PipelineError::Config(format!(
                "features of {id} have {} columns, grounding model_dim is {}",
                f.0.cols(),
                weights.config.model_dim
            )));
        }
        let records = match &paths.predictions_in {
            Some(p) => Some(load_predictions(p)?),
            None => None,
        };
        let scorer = match (&paths.scorer, &records) {
            (_, Some(_)) => None,
            (Some(p), None) => Some(FixtureScorer::load(p)?),
            (None, None) => {
                return Err(PipelineError::Config(
                    "one of paths.scorer or paths.predictions_in is required".into(),
                ))
            }
        };
        let model = PipelineModel::new(vocab, space, weights, cfg.conversion, cfg.postprocess)?;
        Ok(Self {
            model,
            features,
            scorer,
            records,
        })
    }

    pub fn run(self, cfg: &RunConfig) -> Result<(PipelineModel, Vec<ImageOutput>), PipelineError> {
        let out = match (self.records, &self.scorer) {
            (Some(r), _) => run_pipeline(&self.model, &self.features, SequenceSource::Records(r))?,
            (None, Some(s)) => run_pipeline(
                &self.model,
                &self.features,
                SequenceSource::Scorer {
                    scorer: s,
                    generation: cfg.generation(),
                },
            )?,
            (None, None) => unreachable!("checked at load"),
        };
        Ok((self.model, out))
    }
}
