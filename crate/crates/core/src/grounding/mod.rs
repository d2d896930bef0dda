//! Entity grounding head.
//!
//! Each entity span's hidden states are mean-pooled and projected into a
//! query. The queries are decoded against the encoded vision features by a
//! transformer decoder, and a small FFN regresses one box per query.
//!
//! The box head emits four sigmoid outputs `(ax, ay, w, h)`. `w` and `h` are
//! the box size; `ax`/`ay` place the box within the range that keeps it
//! inside the image, so `x1 = ax * (1 - w)` and `x2 = x1 + w`. Every output
//! is a valid box without clamping, and an all-zero network predicts the
//! centered square `[0.25, 0.25, 0.75, 0.75]`.

mod layers;
mod loss;
mod weights;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use layers::{
    DecoderLayer, EncoderLayer, FeedForward, LayerNorm, Linear, MultiHeadAttention, Params,
};
pub use loss::{box_loss, BoxLoss};
pub use weights::{load_weights, save_weights, WEIGHTS_FORMAT_VERSION};

use crate::decoder::FeatureMatrix;
use crate::model::Box2;
use crate::tensor::{sigmoid, Matrix};

#[derive(Debug, thiserror::Error)]
pub enum GroundingError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite activations after {0}")]
    NonFinite(String),
    #[error("no entity queries")]
    NoQueries,
    #[error("invalid grounding config: {0}")]
    BadConfig(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name}: expected shape {expected:?}, got {got:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("weights file {path}: {message}")]
    Format { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingConfig {
    /// Width of the scorer's hidden states.
    pub hidden_dim: usize,
    /// Query / feature width.
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub box_hidden_dim: usize,
    /// Encoder and decoder depth; 0 regresses boxes straight from queries.
    pub layers: usize,
    /// Add a fixed 2-D sinusoidal encoding to the vision features.
    pub positional_encoding: bool,
    pub layer_norm_eps: f64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            model_dim: 64,
            heads: 4,
            ffn_dim: 128,
            box_hidden_dim: 64,
            layers: 6,
            positional_encoding: false,
            layer_norm_eps: 1e-5,
        }
    }
}

impl GroundingConfig {
    pub fn validate(&self) -> Result<(), GroundingError> {
        let bad = |m: &str| Err(GroundingError::BadConfig(m.to_string()));
        if self.hidden_dim == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.box_hidden_dim == 0 {
            return bad("box_hidden_dim must be positive");
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad("model_dim must be a positive multiple of heads");
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingWeights {
    pub config: GroundingConfig,
    /// Query projection `W_q`, `model_dim x hidden_dim`.
    pub query_proj: Matrix,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub box_head: FeedForward,
}

impl GroundingWeights {
    /// All parameters zero (layer-norm gains included).
    pub fn zeros(config: GroundingConfig) -> Result<Self, GroundingError> {
        config.validate()?;
        let d = config.model_dim;
        let eps = config.layer_norm_eps;
        Ok(Self {
            config,
            query_proj: Matrix::zeros(d, config.hidden_dim),
            encoder: (0..config.layers)
                .map(|_| EncoderLayer {
                    self_attn: MultiHeadAttention::zeros(d, config.heads),
                    norm1: LayerNorm::zeros(d, eps),
                    ffn: FeedForward::zeros(d, config.ffn_dim, d),
                    norm2: LayerNorm::zeros(d, eps),
                })
                .collect(),
            decoder: (0..config.layers)
                .map(|_| DecoderLayer {
                    self_attn: MultiHeadAttention::zeros(d, config.heads),
                    norm1: LayerNorm::zeros(d, eps),
                    cross_attn: MultiHeadAttention::zeros(d, config.heads),
                    norm2: LayerNorm::zeros(d, eps),
                    ffn: FeedForward::zeros(d, config.ffn_dim, d),
                    norm3: LayerNorm::zeros(d, eps),
                })
                .collect(),
            box_head: FeedForward::zeros(d, config.box_hidden_dim, 4),
        })
    }

    /// Seeded Xavier initialisation with unit layer-norm gains.
    pub fn random(config: GroundingConfig, seed: u64) -> Result<Self, GroundingError> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let eps = config.layer_norm_eps;
        let query_proj = Linear::random(config.hidden_dim, d, &mut rng).weight;
        let encoder = (0..config.layers)
            .map(|_| EncoderLayer {
                self_attn: MultiHeadAttention::random(d, config.heads, &mut rng),
                norm1: LayerNorm::new(d, eps),
                ffn: FeedForward::random(d, config.ffn_dim, d, &mut rng),
                norm2: LayerNorm::new(d, eps),
            })
            .collect();
        let decoder = (0..config.layers)
            .map(|_| DecoderLayer {
                self_attn: MultiHeadAttention::random(d, config.heads, &mut rng),
                norm1: LayerNorm::new(d, eps),
                cross_attn: MultiHeadAttention::random(d, config.heads, &mut rng),
                norm2: LayerNorm::new(d, eps),
                ffn: FeedForward::random(d, config.ffn_dim, d, &mut rng),
                norm3: LayerNorm::new(d, eps),
            })
            .collect();
        let box_head = FeedForward::random(d, config.box_hidden_dim, 4, &mut rng);
        Ok(Self {
            config,
            query_proj,
            encoder,
            decoder,
            box_head,
        })
    }

    /// Zero tensors with the same layout, used to accumulate gradients.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut("", &mut |_, _, data| data.fill(0.0));
        out
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    /// `self -= lr * grad`.
    pub fn sgd_step(&mut self, grad: &GroundingWeights, lr: f64) {
        let mut flat = Vec::with_capacity(grad.num_parameters());
        grad.visit("", &mut |_, _, d| flat.extend_from_slice(d));
        let mut pos = 0;
        self.visit_mut("", &mut |_, _, d| {
            for v in d.iter_mut() {
                *v -= lr * flat[pos];
                pos += 1;
            }
        });
    }
}

impl Params for GroundingWeights {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        f(
            "W_q".into(),
            self.query_proj.shape().to_vec(),
            self.query_proj.data(),
        );
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&format!("encoder.{i}"), f);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&format!("decoder.{i}"), f);
        }
        self.box_head.visit("box_head", f);
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &mut [f64])) {
        let shape = self.query_proj.shape().to_vec();
        f("W_q".into(), shape, self.query_proj.data_mut());
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&format!("encoder.{i}"), f);
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&format!("decoder.{i}"), f);
        }
        self.box_head.visit_mut("box_head", f);
    }
}

/// Which end of a triplet an entity query came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Subject,
    Object,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityQuery {
    pub query: Vec<f64>,
    /// Index of the source triplet span within its sequence.
    pub span: usize,
    pub role: Role,
}

/// Mean of the span's hidden states (rows of `span_states`).
pub fn pool_hidden(span_states: &Matrix) -> Vec<f64> {
    span_states.mean_rows()
}

/// Mean-pools the span's hidden states (including the `[ENT]` state) and
/// projects them with `W_q`.
pub fn pool_query(span_states: &Matrix, w: &GroundingWeights) -> Result<Vec<f64>, GroundingError> {
    if span_states.rows() == 0 {
        return Err(GroundingError::NoQueries);
    }
    if span_states.cols() != w.config.hidden_dim {
        return Err(GroundingError::Dimension {
            what: "span hidden states",
            expected: w.config.hidden_dim,
            got: span_states.cols(),
        });
    }
    let pooled = Matrix::from_vec(1, span_states.cols(), pool_hidden(span_states));
    Ok(pooled.matmul_t(&w.query_proj).into_vec())
}

/// Fixed 2-D sinusoidal encoding for `rows` feature cells laid out on a
/// square-ish grid. Half the channels encode the row, half the column.
pub fn sinusoidal_2d(rows: usize, dim: usize) -> Matrix {
    let grid_w = (rows as f64).sqrt().ceil().max(1.0) as usize;
    let half = dim / 2;
    let mut pe = Matrix::zeros(rows, dim);
    for r in 0..rows {
        let (y, x) = ((r / grid_w) as f64, (r % grid_w) as f64);
        for (offset, pos, width) in [(0, y, half), (half, x, dim - half)] {
            for i in 0..width {
                let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width.max(1) as f64);
                pe[(r, offset + i)] = if i % 2 == 0 {
                    (pos * freq).sin()
                } else {
                    (pos * freq).cos()
                };
            }
        }
    }
    pe
}

/// Converts the four sigmoid outputs to a corner box.
pub fn raw_to_box(raw: [f64; 4]) -> Box2 {
    let [ax, ay, w, h] = raw;
    let x1 = ax * (1.0 - w);
    let y1 = ay * (1.0 - h);
    Box2::new(x1, y1, x1 + w, y1 + h)
}

/// Gradient of the corner box with respect to the raw outputs, given the
/// gradient with respect to the corners.
fn raw_to_box_backward(raw: [f64; 4], d_box: [f64; 4]) -> [f64; 4] {
    let [ax, ay, w, h] = raw;
    let [dx1, dy1, dx2, dy2] = d_box;
    [
        (dx1 + dx2) * (1.0 - w),
        (dy1 + dy2) * (1.0 - h),
        (dx1 + dx2) * -ax + dx2,
        (dy1 + dy2) * -ay + dy2,
    ]
}

/// One box per query, row-aligned with the queries.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxBatch(pub Vec<Box2>);

impl BoxBatch {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

struct ForwardTrace {
    encoder: Vec<layers::EncoderCache>,
    decoder: Vec<layers::DecoderCache>,
    head: layers::FeedForwardCache,
    raw: Vec<[f64; 4]>,
}

impl GroundingWeights {
    fn check_finite(m: &Matrix, layer: impl FnOnce() -> String) -> Result<(), GroundingError> {
        if m.is_finite() {
            Ok(())
        } else {
            Err(GroundingError::NonFinite(layer()))
        }
    }

    fn forward_traced(
        &self,
        queries: &Matrix,
        features: &FeatureMatrix,
    ) -> Result<(BoxBatch, ForwardTrace), GroundingError> {
        let d = self.config.model_dim;
        if queries.rows() == 0 {
            return Err(GroundingError::NoQueries);
        }
        if queries.cols() != d {
            return Err(GroundingError::Dimension {
                what: "queries",
                expected: d,
                got: queries.cols(),
            });
        }
        let z = features.matrix();
        if self.config.layers > 0 && z.cols() != d {
            return Err(GroundingError::Dimension {
                what: "vision features",
                expected: d,
                got: z.cols(),
            });
        }
        Self::check_finite(queries, || "queries".into())?;

        let mut encoder = Vec::with_capacity(self.encoder.len());
        let mut decoder = Vec::with_capacity(self.decoder.len());
        let mut q = queries.clone();
        if self.config.layers > 0 {
            let mut memory = z.clone();
            if self.config.positional_encoding {
                memory.add_assign(&sinusoidal_2d(z.rows(), d));
            }
            Self::check_finite(&memory, || "vision features".into())?;
            for (i, layer) in self.encoder.iter().enumerate() {
                let (out, cache) = layer.forward(&memory);
                Self::check_finite(&out, || format!("encoder.{i}"))?;
                memory = out;
                encoder.push(cache);
            }
            for (i, layer) in self.decoder.iter().enumerate() {
                let (out, cache) = layer.forward(&q, &memory);
                Self::check_finite(&out, || format!("decoder.{i}"))?;
                q = out;
                decoder.push(cache);
            }
        }
        let (logits, head) = self.box_head.forward(&q);
        Self::check_finite(&logits, || "box_head".into())?;
        let raw: Vec<[f64; 4]> = (0..logits.rows())
            .map(|r| {
                let l = logits.row(r);
                [sigmoid(l[0]), sigmoid(l[1]), sigmoid(l[2]), sigmoid(l[3])]
            })
            .collect();
        let boxes = BoxBatch(raw.iter().map(|r| raw_to_box(*r)).collect());
        Ok((
            boxes,
            ForwardTrace {
                encoder,
                decoder,
                head,
                raw,
            },
        ))
    }

    /// Gradient of a loss through the network, given `d loss / d box` per
    /// query. Returns the parameter gradients and `d loss / d queries`.
    fn backward(&self, trace: &ForwardTrace, d_boxes: &[[f64; 4]]) -> (GroundingWeights, Matrix) {
        let mut grad = self.zeros_like();
        let mut d_logits = Matrix::zeros(d_boxes.len(), 4);
        for (r, (raw, db)) in trace.raw.iter().zip(d_boxes).enumerate() {
            let d_raw = raw_to_box_backward(*raw, *db);
            for c in 0..4 {
                d_logits[(r, c)] = d_raw[c] * raw[c] * (1.0 - raw[c]);
            }
        }
        let mut dq = self
            .box_head
            .backward(&trace.head, &d_logits, &mut grad.box_head);
        if self.config.layers > 0 {
            let mut d_memory: Option<Matrix> = None;
            for i in (0..self.decoder.len()).rev() {
                let (dqi, dmem) =
                    self.decoder[i].backward(&trace.decoder[i], &dq, &mut grad.decoder[i]);
                dq = dqi;
                match d_memory.as_mut() {
                    Some(m) => m.add_assign(&dmem),
                    None => d_memory = Some(dmem),
                }
            }
            if let Some(mut dm) = d_memory {
                for i in (0..self.encoder.len()).rev() {
                    dm = self.encoder[i].backward(&trace.encoder[i], &dm, &mut grad.encoder[i]);
                }
            }
        }
        (grad, dq)
    }

    /// Decodes boxes for projected queries (`2N x model_dim`).
    pub fn forward(&self, queries: &Matrix, features: &FeatureMatrix) -> Result<BoxBatch, GroundingError> {
        self.forward_traced(queries, features).map(|(b, _)| b)
    }

    /// Pools and projects every span, then decodes one box per span.
    /// `spans` holds one `T_v x hidden_dim` matrix of hidden states each.
    pub fn ground_spans(
        &self,
        spans: &[Matrix],
        features: &FeatureMatrix,
    ) -> Result<BoxBatch, GroundingError> {
        let queries = self.project_spans(spans)?;
        self.forward(&queries, features)
    }

    fn pooled_matrix(&self, spans: &[Matrix]) -> Result<Matrix, GroundingError> {
        if spans.is_empty() {
            return Err(GroundingError::NoQueries);
        }
        let mut pooled = Matrix::zeros(spans.len(), self.config.hidden_dim);
        for (i, s) in spans.iter().enumerate() {
            if s.rows() == 0 {
                return Err(GroundingError::NoQueries);
            }
            if s.cols() != self.config.hidden_dim {
                return Err(GroundingError::Dimension {
                    what: "span hidden states",
                    expected: self.config.hidden_dim,
                    got: s.cols(),
                });
            }
            pooled.row_mut(i).copy_from_slice(&pool_hidden(s));
        }
        Ok(pooled)
    }

    fn project_spans(&self, spans: &[Matrix]) -> Result<Matrix, GroundingError> {
        Ok(self.pooled_matrix(spans)?.matmul_t(&self.query_proj))
    }

    /// Box loss for the given spans and its gradient with respect to every
    /// parameter, `W_q` included.
    pub fn loss_and_grad(
        &self,
        spans: &[Matrix],
        features: &FeatureMatrix,
        targets: &BoxBatch,
    ) -> Result<(f64, GroundingWeights), GroundingError> {
        let pooled = self.pooled_matrix(spans)?;
        let queries = pooled.matmul_t(&self.query_proj);
        let (boxes, trace) = self.forward_traced(&queries, features)?;
        if targets.len() != boxes.len() {
            return Err(GroundingError::Dimension {
                what: "target boxes",
                expected: boxes.len(),
                got: targets.len(),
            });
        }
        let loss = box_loss(&boxes, targets);
        let (mut grad, dq) = self.backward(&trace, &loss.grad);
        grad.query_proj.add_assign(&dq.t_matmul(&pooled));
        Ok((loss.value, grad))
    }

    /// Loss only; used by finite-difference checks.
    pub fn loss(
        &self,
        spans: &[Matrix],
        features: &FeatureMatrix,
        targets: &BoxBatch,
    ) -> Result<f64, GroundingError> {
        let boxes = self.ground_spans(spans, features)?;
        Ok(box_loss(&boxes, targets).value)
    }
}

/// Grounds entity queries against the vision features.
pub fn ground_entities(
    queries: &[EntityQuery],
    features: &FeatureMatrix,
    w: &GroundingWeights,
) -> Result<BoxBatch, GroundingError> {
    if queries.is_empty() {
        return Err(GroundingError::NoQueries);
    }
    let rows: Vec<Vec<f64>> = queries.iter().map(|q| q.query.clone()).collect();
    let d = w.config.model_dim;
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(GroundingError::Dimension {
            what: "queries",
            expected: d,
            got: bad.len(),
        });
    }
    w.forward(&Matrix::from_rows(&rows), features)
}
