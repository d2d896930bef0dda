//! Vocabulary scores to category scores.
//!
//! The rows of a span are mean-pooled into a single vocabulary score vector.
//! Each category then scores `(beta_c / T_c) * sum(pooled[t] for t in tokens(c))`,
//! where `beta_c` is the configured amplification when the span's content
//! tokens equal the category's token sequence exactly, and 1 otherwise.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::decoder::SparseRow;
use crate::tokenizer::{CategoryTokenTable, TokenId};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConversionError {
    #[error("span has no score rows")]
    EmptySpan,
    #[error("category table is empty")]
    EmptyTable,
    #[error("amplification {0} must be >= 1")]
    BadBeta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConversionConfig {
    pub beta_entity: f64,
    pub beta_predicate: f64,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self {
            beta_entity: 5.0,
            beta_predicate: 1.0,
        }
    }
}

impl ConversionConfig {
    pub fn validate(&self) -> Result<(), ConversionError> {
        for b in [self.beta_entity, self.beta_predicate] {
            if !(b >= 1.0 && b.is_finite()) {
                return Err(ConversionError::BadBeta(b));
            }
        }
        Ok(())
    }
}

/// One score per category, indexed by category id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScores {
    pub scores: Vec<f64>,
    /// Category that received the exact-match amplification, if any.
    pub exact_match: Option<usize>,
}

impl CategoryScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Mean of the span's sparse rows, as a sparse map (absent ids are 0).
pub fn pool_rows(rows: &[SparseRow]) -> HashMap<TokenId, f64> {
    let mut pooled: HashMap<TokenId, f64> = HashMap::new();
    let n = rows.len() as f64;
    for row in rows {
        for &(t, p) in &row.0 {
            *pooled.entry(t).or_insert(0.0) += p;
        }
    }
    for v in pooled.values_mut() {
        *v /= n;
    }
    pooled
}

/// Converts the score rows of one span into category scores.
///
/// `span_tokens` are the generated content tokens of the span, without the
/// trailing `[ENT]` / `[REL]`; they decide the exact-match amplification.
pub fn convert_scores(
    span_rows: &[SparseRow],
    span_tokens: &[TokenId],
    table: &CategoryTokenTable,
    beta: f64,
) -> Result<CategoryScores, ConversionError> {
    if span_rows.is_empty() {
        return Err(ConversionError::EmptySpan);
    }
    if table.is_empty() {
        return Err(ConversionError::EmptyTable);
    }
    if !(beta >= 1.0) {
        return Err(ConversionError::BadBeta(beta));
    }
    let pooled = pool_rows(span_rows);
    let mut exact_match = None;
    let scores = table
        .iter()
        .enumerate()
        .map(|(c, toks)| {
            let sum: f64 = toks
                .iter()
                .map(|t| pooled.get(t).copied().unwrap_or(0.0))
                .sum();
            let amp = if toks == span_tokens {
                exact_match = Some(c);
                beta
            } else {
                1.0
            };
            amp / toks.len() as f64 * sum
        })
        .collect();
    Ok(CategoryScores {
        scores,
        exact_match,
    })
}

/// Highest `k` categories, descending; ties go to the lower id.
pub fn top_k_categories(scores: &CategoryScores, k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..scores.scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores.scores[b]
            .total_cmp(&scores.scores[a])
            .then(a.cmp(&b))
    });
    idx.truncate(k.max(1));
    idx.into_iter().map(|i| (i, scores.scores[i])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(seqs: &[&[TokenId]]) -> CategoryTokenTable {
        CategoryTokenTable::from_sequences(seqs.iter().map(|s| s.to_vec()).collect()).unwrap()
    }

    // ids: 1 on, 2 riding, 3 person, 4 standing
    #[test]
    fn single_token_gather_without_amplification() {
        let rows = [SparseRow(vec![(2, 0.4), (1, 0.1), (9, 0.5)])];
        let t = table(&[&[1], &[2]]);
        let s = convert_scores(&rows, &[2], &t, 1.0).unwrap();
        assert_eq!(s.scores, vec![0.1, 0.4]);
        assert_eq!(s.exact_match, Some(1));
    }

    #[test]
    fn exact_match_is_amplified() {
        let rows = [SparseRow(vec![(3, 0.3), (7, 0.7)])];
        let t = table(&[&[3], &[7]]);
        let s = convert_scores(&rows, &[3], &t, 5.0).unwrap();
        assert!((s.scores[0] - 1.5).abs() < 1e-12);
        assert!((s.scores[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn multi_token_category_averages_its_tokens() {
        let rows = [SparseRow(vec![(4, 0.3), (1, 0.5)])];
        let t = table(&[&[4, 1]]);
        let s = convert_scores(&rows, &[2], &t, 5.0).unwrap();
        assert!((s.scores[0] - 0.4).abs() < 1e-12);
        assert_eq!(s.exact_match, None);
    }

    #[test]
    fn rows_are_mean_pooled() {
        let rows = [SparseRow(vec![(4, 0.6)]), SparseRow(vec![(1, 0.8), (4, 0.2)])];
        let t = table(&[&[4], &[1], &[4, 1]]);
        let s = convert_scores(&rows, &[4, 1], &t, 2.0).unwrap();
        // pooled: 4 -> 0.4, 1 -> 0.4
        assert!((s.scores[0] - 0.4).abs() < 1e-12);
        assert!((s.scores[1] - 0.4).abs() < 1e-12);
        assert!((s.scores[2] - 2.0 * 0.4).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let t = table(&[&[1]]);
        assert_eq!(convert_scores(&[], &[1], &t, 1.0), Err(ConversionError::EmptySpan));
        let rows = [SparseRow(vec![(1, 1.0)])];
        assert_eq!(
            convert_scores(&rows, &[1], &t, 0.5),
            Err(ConversionError::BadBeta(0.5))
        );
    }

    #[test]
    fn top_k_examples() {
        let s = CategoryScores {
            scores: vec![0.1, 0.9, 0.5],
            exact_match: None,
        };
        let ids: Vec<usize> = top_k_categories(&s, 3).iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![1, 2, 0]);
        assert_eq!(top_k_categories(&s, 1), vec![(1, 0.9)]);
        assert_eq!(top_k_categories(&s, 10).len(), 3);
        let flat = CategoryScores {
            scores: vec![0.2; 4],
            exact_match: None,
        };
        let ids: Vec<usize> = top_k_categories(&flat, 3).iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }
}
