//! Multi-round nucleus-sampling generation over a pluggable [`TokenScorer`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;
use crate::tokenizer::TokenId;

/// Allowed deviation of a score row's total mass from 1.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;
/// Probability floor used by [`lm_loss`].
pub const LM_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecodeError {
    #[error("nucleus mass {0} must be in (0, 1]")]
    BadNucleusMass(f64),
    #[error("step {step}: score row is not a probability distribution (sum {sum})")]
    NotSimplex { step: usize, sum: f64 },
    #[error("step {step}: score row has {got} entries, vocabulary has {expected}")]
    RowLength {
        step: usize,
        got: usize,
        expected: usize,
    },
    #[error("step {step}: hidden state has {got} entries, expected {expected}")]
    HiddenLength {
        step: usize,
        got: usize,
        expected: usize,
    },
    #[error("round {round} is not below the configured {rounds} rounds")]
    RoundOutOfRange { round: usize, rounds: usize },
    #[error("invalid generation config: {0}")]
    BadConfig(&'static str),
    #[error("{rows} score rows but {targets} targets")]
    LengthMismatch { rows: usize, targets: usize },
    #[error("scorer: {0}")]
    Scorer(String),
}

/// Vision features `Z^v`, `M_vis x d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix(pub Matrix);

impl FeatureMatrix {
    pub fn new(m: Matrix) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// Stable 64-bit fingerprint of the exact feature values.
    pub fn fingerprint(&self) -> u64 {
        let mut h = mix64(self.0.rows() as u64 ^ ((self.0.cols() as u64) << 32));
        for v in self.0.data() {
            h = mix64(h ^ v.to_bits());
        }
        h
    }
}

/// One decoding step: the next-token distribution and the hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub probs: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// Autoregressive model interface. Implementations must be deterministic in
/// `(features, prefix)` and callable from several threads.
pub trait TokenScorer: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn eos_id(&self) -> TokenId;
    /// `prefix` holds the tokens generated so far (the prompt is implicit).
    fn step(&self, features: &FeatureMatrix, prefix: &[TokenId]) -> Result<Step, DecodeError>;
}

/// Top-k entries of a score row, descending by score (ties: lower id).
/// Absent ids read as 0.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseRow(pub Vec<(TokenId, f64)>);

impl SparseRow {
    pub fn from_dense(dense: &[f64], k: usize) -> Self {
        let mut entries: Vec<(TokenId, f64)> = dense
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| (i as TokenId, p))
            .collect();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        entries.truncate(k);
        Self(entries)
    }

    pub fn get(&self, id: TokenId) -> f64 {
        self.0
            .iter()
            .find(|(t, _)| *t == id)
            .map_or(0.0, |(_, p)| *p)
    }

    pub fn mass(&self) -> f64 {
        self.0.iter().map(|(_, p)| p).sum()
    }

    pub fn to_dense(&self, vocab_size: usize) -> Vec<f64> {
        let mut out = vec![0.0; vocab_size];
        for &(t, p) in &self.0 {
            if let Some(slot) = out.get_mut(t as usize) {
                *slot += p;
            }
        }
        out
    }
}

/// Generated tokens with their score rows and hidden states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub tokens: Vec<TokenId>,
    pub scores: Vec<SparseRow>,
    pub hidden: Vec<Vec<f64>>,
    pub seed: u64,
    pub round: usize,
}

impl ScoredSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Hidden states of `range` as a matrix.
    pub fn hidden_block(&self, range: std::ops::Range<usize>) -> Matrix {
        Matrix::from_rows(&self.hidden[range])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub rounds: usize,
    pub max_len: usize,
    pub top_p: f64,
    pub seed: u64,
    pub sparse_top_k: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            rounds: 32,
            max_len: 24,
            top_p: 0.9,
            seed: 0,
            sparse_top_k: 50,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.rounds < 1 {
            return Err(DecodeError::BadConfig("rounds must be at least 1"));
        }
        if self.max_len < 4 {
            return Err(DecodeError::BadConfig("max_len must be at least 4"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(DecodeError::BadNucleusMass(self.top_p));
        }
        if self.sparse_top_k < 1 {
            return Err(DecodeError::BadConfig("sparse_top_k must be at least 1"));
        }
        Ok(())
    }
}

/// Keeps the smallest descending-probability prefix whose mass reaches `p`
/// and renormalizes it; ties are ordered by lower token id.
pub fn nucleus_filter(dist: &[f64], p: f64) -> Result<Vec<f64>, DecodeError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(DecodeError::BadNucleusMass(p));
    }
    if p >= 1.0 {
        return Ok(dist.to_vec());
    }
    let mut order: Vec<usize> = (0..dist.len()).filter(|&i| dist[i] > 0.0).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; dist.len()];
    let mut kept = 0.0;
    let mut n = 0;
    for &i in &order {
        kept += dist[i];
        n += 1;
        if kept >= p {
            break;
        }
    }
    for &i in &order[..n] {
        out[i] = dist[i] / kept;
    }
    Ok(out)
}

/// Per-round seed derived from the base seed.
pub fn round_seed(base: u64, round: usize) -> u64 {
    mix64(base ^ mix64(round as u64 ^ 0x9e37_79b9_7f4a_7c15))
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic pseudo-random vector in `[-1, 1)^dim` keyed by `key`.
pub fn hashed_vector(key: &[u64], dim: usize) -> Vec<f64> {
    let mut h = 0x5151_5151_u64;
    for &k in key {
        h = mix64(h ^ k);
    }
    (0..dim)
        .map(|i| {
            let bits = mix64(h ^ (i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
            (bits >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

fn check_step(step: &Step, i: usize, scorer: &dyn TokenScorer) -> Result<(), DecodeError> {
    if step.probs.len() != scorer.vocab_size() {
        return Err(DecodeError::RowLength {
            step: i,
            got: step.probs.len(),
            expected: scorer.vocab_size(),
        });
    }
    if step.hidden.len() != scorer.hidden_dim() {
        return Err(DecodeError::HiddenLength {
            step: i,
            got: step.hidden.len(),
            expected: scorer.hidden_dim(),
        });
    }
    let sum: f64 = step.probs.iter().sum();
    let valid = step.probs.iter().all(|p| p.is_finite() && *p >= 0.0);
    if !valid || !((sum - 1.0).abs() <= SIMPLEX_TOLERANCE) {
        return Err(DecodeError::NotSimplex { step: i, sum });
    }
    Ok(())
}

/// Draws an index from `probs` (zeros never chosen) using one uniform draw.
fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let total: f64 = probs.iter().sum();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p / total;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Samples one sequence. Stops after emitting `[EOS]` or `max_len` tokens.
/// Recorded score rows are the unfiltered step distributions.
pub fn generate(
    scorer: &dyn TokenScorer,
    features: &FeatureMatrix,
    cfg: &GenerationConfig,
    round: usize,
) -> Result<ScoredSequence, DecodeError> {
    cfg.validate()?;
    if round >= cfg.rounds {
        return Err(DecodeError::RoundOutOfRange {
            round,
            rounds: cfg.rounds,
        });
    }
    let seed = round_seed(cfg.seed, round);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = ScoredSequence {
        tokens: Vec::with_capacity(cfg.max_len),
        scores: Vec::with_capacity(cfg.max_len),
        hidden: Vec::with_capacity(cfg.max_len),
        seed,
        round,
    };
    let eos = scorer.eos_id();
    while seq.tokens.len() < cfg.max_len {
        let step = scorer.step(features, &seq.tokens)?;
        check_step(&step, seq.tokens.len(), scorer)?;
        let filtered = nucleus_filter(&step.probs, cfg.top_p)?;
        let token = sample_index(&filtered, &mut rng) as TokenId;
        seq.tokens.push(token);
        seq.scores
            .push(SparseRow::from_dense(&step.probs, cfg.sparse_top_k));
        seq.hidden.push(step.hidden);
        if token == eos {
            break;
        }
    }
    Ok(seq)
}

/// All `cfg.rounds` sequences, in round order. Rounds run in parallel on the
/// current rayon pool; output does not depend on the pool size.
pub fn generate_rounds(
    scorer: &dyn TokenScorer,
    features: &FeatureMatrix,
    cfg: &GenerationConfig,
) -> Result<Vec<ScoredSequence>, DecodeError> {
    cfg.validate()?;
    (0..cfg.rounds)
        .into_par_iter()
        .map(|r| generate(scorer, features, cfg, r))
        .collect()
}

/// Row lookup used by [`lm_loss`].
pub trait ScoreRow {
    fn prob(&self, id: TokenId) -> f64;
}

impl ScoreRow for Vec<f64> {
    fn prob(&self, id: TokenId) -> f64 {
        self.get(id as usize).copied().unwrap_or(0.0)
    }
}

impl ScoreRow for SparseRow {
    fn prob(&self, id: TokenId) -> f64 {
        self.get(id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmLoss {
    pub value: f64,
    /// Positions whose target probability was below [`LM_PROB_FLOOR`].
    pub clamped: Vec<usize>,
}

/// Mean negative log-likelihood of `targets` under teacher-forced rows.
pub fn lm_loss<R: ScoreRow>(rows: &[R], targets: &[TokenId]) -> Result<LmLoss, DecodeError> {
    if rows.len() != targets.len() {
        return Err(DecodeError::LengthMismatch {
            rows: rows.len(),
            targets: targets.len(),
        });
    }
    if rows.is_empty() {
        return Ok(LmLoss {
            value: 0.0,
            clamped: Vec::new(),
        });
    }
    let mut clamped = Vec::new();
    let mut total = 0.0;
    for (i, (row, &t)) in rows.iter().zip(targets).enumerate() {
        let mut p = row.prob(t);
        if !(p >= LM_PROB_FLOOR) {
            p = LM_PROB_FLOOR;
            clamped.push(i);
        }
        total -= p.min(1.0).ln();
    }
    Ok(LmLoss {
        value: total / rows.len() as f64,
        clamped,
    })
}

/// Scorer that replays fixed distributions, one per step; the final row is
/// repeated once the script runs out. Hidden states are hash-derived from
/// `(token, position)` of the previous token.
#[derive(Debug, Clone)]
pub struct ScriptedScorer {
    rows: Vec<Vec<f64>>,
    hidden_dim: usize,
    eos: TokenId,
}

impl ScriptedScorer {
    pub fn new(rows: Vec<Vec<f64>>, hidden_dim: usize, eos: TokenId) -> Self {
        assert!(!rows.is_empty(), "scripted scorer needs at least one row");
        Self {
            rows,
            hidden_dim,
            eos,
        }
    }

    /// One-hot rows spelling `tokens`.
    pub fn one_hot(tokens: &[TokenId], vocab_size: usize, hidden_dim: usize, eos: TokenId) -> Self {
        let rows = tokens
            .iter()
            .map(|&t| {
                let mut r = vec![0.0; vocab_size];
                r[t as usize] = 1.0;
                r
            })
            .collect();
        Self::new(rows, hidden_dim, eos)
    }
}

impl TokenScorer for ScriptedScorer {
    fn vocab_size(&self) -> usize {
        self.rows[0].len()
    }

    fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn eos_id(&self) -> TokenId {
        self.eos
    }

    fn step(&self, _features: &FeatureMatrix, prefix: &[TokenId]) -> Result<Step, DecodeError> {
        let probs = self.rows[prefix.len().min(self.rows.len() - 1)].clone();
        let last = prefix.last().map_or(u64::MAX, |&t| t as u64);
        Ok(Step {
            probs,
            hidden: hashed_vector(&[last, prefix.len() as u64], self.hidden_dim),
        })
    }
}
