//! Bidirectional meme/text retrieval scoring.

mod report;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingStore;

pub use report::{evaluate, evaluate_stores, DirectionScores, EvalConfig, RetrievalReport, TextType, TypeReport};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("store {0} is not normalized")]
    NotNormalized(&'static str),
    #[error("dimension mismatch: texts {texts}, memes {memes}")]
    Dimension { texts: usize, memes: usize },
    #[error("{direction:?} query {query} has no gold match")]
    NoGold { direction: Direction, query: usize },
    #[error("query index {0} out of range")]
    QueryOutOfRange(usize),
    #[error("gold refers to unknown {kind} {id:?}")]
    UnknownId { kind: &'static str, id: String },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("meme {meme_id} has no annotation for {text_type:?}")]
    MissingText { meme_id: String, text_type: TextType },
    #[error(transparent)]
    Embed(#[from] crate::embeddings::EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Text2Meme,
    Meme2Text,
}

/// Cosine similarities, one row per text and one column per meme.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub text_ids: Vec<String>,
    pub meme_ids: Vec<String>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_rows(text_ids: Vec<String>, meme_ids: Vec<String>, rows: &[Vec<f64>]) -> Self {
        assert_eq!(rows.len(), text_ids.len(), "one row per text");
        assert!(rows.iter().all(|r| r.len() == meme_ids.len()), "one column per meme");
        Self { text_ids, meme_ids, values: rows.concat() }
    }

    /// Unnamed matrix; ids are the row and column indices.
    pub fn from_values(rows: &[Vec<f64>]) -> Self {
        let n = rows.first().map_or(0, Vec::len);
        Self::from_rows((0..rows.len()).map(|i| i.to_string()).collect(), (0..n).map(|j| j.to_string()).collect(), rows)
    }

    pub fn n_texts(&self) -> usize {
        self.text_ids.len()
    }

    pub fn n_memes(&self) -> usize {
        self.meme_ids.len()
    }

    pub fn get(&self, text: usize, meme: usize) -> f64 {
        self.values[text * self.n_memes() + meme]
    }

    pub fn row(&self, text: usize) -> &[f64] {
        let n = self.n_memes();
        &self.values[text * n..(text + 1) * n]
    }
}

/// Dot products of normalised text rows with normalised meme rows.
pub fn similarity(texts: &EmbeddingStore, memes: &EmbeddingStore) -> Result<SimilarityMatrix, RetrievalError> {
    if !texts.normalized {
        return Err(RetrievalError::NotNormalized("texts"));
    }
    if !memes.normalized {
        return Err(RetrievalError::NotNormalized("memes"));
    }
    if texts.dim() != memes.dim() {
        return Err(RetrievalError::Dimension { texts: texts.dim(), memes: memes.dim() });
    }
    let mut values = Vec::with_capacity(texts.len() * memes.len());
    for t in texts.rows() {
        for m in memes.rows() {
            values.push(t.iter().zip(m).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum());
        }
    }
    Ok(SimilarityMatrix { text_ids: texts.ids.clone(), meme_ids: memes.ids.clone(), values })
}

/// For each text row, the column of the meme it describes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldMap {
    text_to_meme: Vec<usize>,
    meme_to_texts: Vec<Vec<usize>>,
}

impl GoldMap {
    pub fn new(text_to_meme: Vec<usize>, n_memes: usize) -> Self {
        let mut meme_to_texts = vec![Vec::new(); n_memes];
        for (t, &m) in text_to_meme.iter().enumerate() {
            meme_to_texts[m].push(t);
        }
        Self { text_to_meme, meme_to_texts }
    }

    /// Text `i` belongs to meme `i`.
    pub fn diagonal(n: usize) -> Self {
        Self::new((0..n).collect(), n)
    }

    /// Resolves `(text_id, meme_id)` pairs against the matrix labels.
    pub fn from_ids(matrix: &SimilarityMatrix, pairs: &[(String, String)]) -> Result<Self, RetrievalError> {
        let texts: HashMap<&str, usize> = matrix.text_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let memes: HashMap<&str, usize> = matrix.meme_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut text_to_meme = vec![usize::MAX; matrix.n_texts()];
        for (t, m) in pairs {
            let ti = *texts.get(t.as_str()).ok_or_else(|| RetrievalError::UnknownId { kind: "text", id: t.clone() })?;
            let mi = *memes.get(m.as_str()).ok_or_else(|| RetrievalError::UnknownId { kind: "meme", id: m.clone() })?;
            text_to_meme[ti] = mi;
        }
        if let Some(t) = text_to_meme.iter().position(|&m| m == usize::MAX) {
            return Err(RetrievalError::NoGold { direction: Direction::Text2Meme, query: t });
        }
        Ok(Self::new(text_to_meme, matrix.n_memes()))
    }

    pub fn meme_of(&self, text: usize) -> usize {
        self.text_to_meme[text]
    }

    pub fn texts_of(&self, meme: usize) -> &[usize] {
        &self.meme_to_texts[meme]
    }
}

/// 1-based position of `target` among `scores`; equal scores at lower indices rank first.
fn rank_in(scores: impl Iterator<Item = f64>, target: usize) -> usize {
    let scores: Vec<f64> = scores.collect();
    let s = scores[target];
    1 + scores.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < target)).count()
}

pub fn gold_rank(matrix: &SimilarityMatrix, gold: &GoldMap, query: usize, direction: Direction) -> Result<usize, RetrievalError> {
    match direction {
        Direction::Text2Meme => {
            if query >= matrix.n_texts() {
                return Err(RetrievalError::QueryOutOfRange(query));
            }
            Ok(rank_in(matrix.row(query).iter().copied(), gold.meme_of(query)))
        }
        Direction::Meme2Text => {
            if query >= matrix.n_memes() {
                return Err(RetrievalError::QueryOutOfRange(query));
            }
            let column = || (0..matrix.n_texts()).map(|t| matrix.get(t, query));
            gold.texts_of(query)
                .iter()
                .map(|&t| rank_in(column(), t))
                .min()
                .ok_or(RetrievalError::NoGold { direction, query })
        }
    }
}

/// Gold ranks for every query in `direction`.
pub fn gold_ranks(matrix: &SimilarityMatrix, gold: &GoldMap, direction: Direction) -> Result<Vec<usize>, RetrievalError> {
    let n = match direction {
        Direction::Text2Meme => matrix.n_texts(),
        Direction::Meme2Text => matrix.n_memes(),
    };
    (0..n).map(|q| gold_rank(matrix, gold, q, direction)).collect()
}

pub fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Fraction of queries whose gold item ranks within the top `k`.
pub fn recall_at_k(matrix: &SimilarityMatrix, gold: &GoldMap, k: usize, direction: Direction) -> Result<f64, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    Ok(recall_from_ranks(&gold_ranks(matrix, gold, direction)?, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{Modality, StoreMeta};
    use proptest::prelude::*;

    fn unit_store(rows: &[Vec<f32>]) -> EmbeddingStore {
        let meta = StoreMeta { encoder: "t".into(), dimension: rows[0].len(), modality: Modality::Text };
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        let mut s = EmbeddingStore::from_rows(ids, rows, meta).unwrap();
        s.normalized = true;
        s
    }

    #[test]
    fn similarity_examples() {
        let m = similarity(&unit_store(&[vec![0.6, 0.8]]), &unit_store(&[vec![0.8, 0.6]])).unwrap();
        assert!((m.get(0, 0) - 0.96).abs() < 1e-6);
        let m = similarity(&unit_store(&[vec![1.0, 0.0]]), &unit_store(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        assert_eq!(m.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn similarity_requires_normalised_stores() {
        let mut raw = unit_store(&[vec![3.0, 4.0]]);
        raw.normalized = false;
        assert!(matches!(similarity(&raw, &unit_store(&[vec![1.0, 0.0]])), Err(RetrievalError::NotNormalized("texts"))));
        assert!(matches!(
            similarity(&unit_store(&[vec![1.0, 0.0]]), &unit_store(&[vec![1.0, 0.0, 0.0]])),
            Err(RetrievalError::Dimension { .. })
        ));
    }

    #[test]
    fn rank_examples() {
        let id = SimilarityMatrix::from_values(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        for d in [Direction::Text2Meme, Direction::Meme2Text] {
            assert_eq!(gold_ranks(&id, &GoldMap::diagonal(3), d).unwrap(), vec![1, 1, 1]);
        }
        let m = SimilarityMatrix::from_values(&[vec![0.1, 0.9]]);
        assert_eq!(gold_rank(&m, &GoldMap::new(vec![0], 2), 0, Direction::Text2Meme).unwrap(), 2);
        let tie = SimilarityMatrix::from_values(&[vec![0.5, 0.5]]);
        assert_eq!(gold_rank(&tie, &GoldMap::new(vec![0], 2), 0, Direction::Text2Meme).unwrap(), 1);
        assert_eq!(gold_rank(&tie, &GoldMap::new(vec![1], 2), 0, Direction::Text2Meme).unwrap(), 2);
    }

    #[test]
    fn recall_examples() {
        let dominant = SimilarityMatrix::from_values(&[vec![0.9, 0.1], vec![0.2, 0.8]]);
        for d in [Direction::Text2Meme, Direction::Meme2Text] {
            assert_eq!(recall_at_k(&dominant, &GoldMap::diagonal(2), 1, d).unwrap(), 1.0);
        }
        let m = SimilarityMatrix::from_values(&[vec![0.1, 0.9], vec![0.2, 0.8]]);
        assert_eq!(recall_at_k(&m, &GoldMap::diagonal(2), 1, Direction::Text2Meme).unwrap(), 0.5);
        assert_eq!(recall_at_k(&m, &GoldMap::diagonal(2), 2, Direction::Text2Meme).unwrap(), 1.0);
        assert!(matches!(recall_at_k(&m, &GoldMap::diagonal(2), 0, Direction::Text2Meme), Err(RetrievalError::ZeroK)));
    }

    #[test]
    fn meme_to_text_uses_best_gold_text() {
        // meme 0 owns texts 0 and 2; text 2 is its best match.
        let m = SimilarityMatrix::from_values(&[vec![0.1, 0.9], vec![0.3, 0.7], vec![0.8, 0.2]]);
        let gold = GoldMap::new(vec![0, 1, 0], 2);
        assert_eq!(gold_rank(&m, &gold, 0, Direction::Meme2Text).unwrap(), 1);
        assert_eq!(gold_rank(&m, &gold, 1, Direction::Meme2Text).unwrap(), 2);
        let orphan = GoldMap::new(vec![0, 0, 0], 2);
        assert!(matches!(gold_rank(&m, &orphan, 1, Direction::Meme2Text), Err(RetrievalError::NoGold { .. })));
    }

    #[test]
    fn identical_texts_on_one_template_cap_recall_at_one() {
        // ten memes whose images are indistinguishable, each with the same caption
        let m = SimilarityMatrix::from_values(&vec![vec![0.7; 10]; 10]);
        let r1 = recall_at_k(&m, &GoldMap::diagonal(10), 1, Direction::Text2Meme).unwrap();
        assert!(r1 <= 0.1);
        assert_eq!(r1, 0.1);
    }

    fn matrix(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, n), n)
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_k(rows in matrix(12)) {
            let m = SimilarityMatrix::from_values(&rows);
            for d in [Direction::Text2Meme, Direction::Meme2Text] {
                let r: Vec<f64> = (1..=12).map(|k| recall_at_k(&m, &GoldMap::diagonal(12), k, d).unwrap()).collect();
                prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
                prop_assert_eq!(r[11], 1.0);
            }
        }

        #[test]
        fn meme_permutation_leaves_recall_unchanged(rows in matrix(10), perm in Just((0..10).collect::<Vec<usize>>()).prop_shuffle()) {
            let m = SimilarityMatrix::from_values(&rows);
            let permuted: Vec<Vec<f64>> = rows.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
            let mut inverse = vec![0; 10];
            for (new, &old) in perm.iter().enumerate() {
                inverse[old] = new;
            }
            let pm = SimilarityMatrix::from_values(&permuted);
            let gold = GoldMap::new((0..10).map(|t| inverse[t]).collect(), 10);
            for d in [Direction::Text2Meme, Direction::Meme2Text] {
                for k in [1, 5, 10] {
                    prop_assert_eq!(
                        recall_at_k(&m, &GoldMap::diagonal(10), k, d).unwrap(),
                        recall_at_k(&pm, &gold, k, d).unwrap()
                    );
                }
            }
        }

        #[test]
        fn positive_scaling_keeps_ranks(rows in matrix(8), exp in -20i32..20) {
            // powers of two scale exactly, so no two scores can collide by rounding
            let scale = 2f64.powi(exp);
            let m = SimilarityMatrix::from_values(&rows);
            let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
            let s = SimilarityMatrix::from_values(&scaled);
            for d in [Direction::Text2Meme, Direction::Meme2Text] {
                prop_assert_eq!(gold_ranks(&m, &GoldMap::diagonal(8), d).unwrap(), gold_ranks(&s, &GoldMap::diagonal(8), d).unwrap());
            }
        }
    }
}
