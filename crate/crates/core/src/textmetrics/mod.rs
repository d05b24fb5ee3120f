//! Caption-quality and label metrics.

mod bleu;
mod strategy;

use std::collections::{BTreeSet, HashMap};

pub use bleu::{bleu4, sentence_bleu4, BleuSmoothing};
pub use strategy::{apply_strategy, LearnedScorer, Metric, MetricReport, MetricRequest, ScorerSet, Strategy};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("{predictions} predictions but {references} reference groups")]
    LengthMismatch { predictions: usize, references: usize },
    #[error("item {0} has no references")]
    NoReferences(usize),
    #[error("label {0:?} is not in the label universe")]
    UnknownLabel(String),
    #[error("label universe is empty")]
    EmptyUniverse,
    #[error("{metric} cannot score several references at once")]
    SingleReferenceOnly { metric: String },
    #[error("no scorer registered for {0}")]
    MissingScorer(String),
    #[error("scorer {name} failed: {message}")]
    Scorer { name: String, message: String },
}

const CHRF_ORDER: usize = 6;
const CHRF_BETA: f64 = 2.0;

/// Character n-gram statistics `(hyp, ref, matched)` per order 1..=6.
fn chrf_stats(hyp: &str, reference: &str) -> [(usize, usize, usize); CHRF_ORDER] {
    let h = ngram_counts(hyp);
    let r = ngram_counts(reference);
    let mut out = [(0, 0, 0); CHRF_ORDER];
    for n in 0..CHRF_ORDER {
        let matched = h[n].iter().map(|(g, &c)| c.min(r[n].get(g).copied().unwrap_or(0))).sum();
        out[n] = (h[n].values().sum(), r[n].values().sum(), matched);
    }
    out
}

fn ngram_counts(text: &str) -> Vec<HashMap<String, usize>> {
    let chars: Vec<char> = text.split_whitespace().flat_map(str::chars).collect();
    (1..=CHRF_ORDER)
        .map(|n| {
            let mut m = HashMap::new();
            for w in chars.windows(n) {
                *m.entry(w.iter().collect::<String>()).or_insert(0) += 1;
            }
            m
        })
        .collect()
}

fn chrf_from_stats(stats: &[(usize, usize, usize); CHRF_ORDER]) -> f64 {
    let (mut p, mut r, mut orders) = (0.0, 0.0, 0usize);
    for &(hyp, reference, matched) in stats {
        if hyp > 0 && reference > 0 {
            p += matched as f64 / hyp as f64;
            r += matched as f64 / reference as f64;
            orders += 1;
        }
    }
    if orders == 0 {
        return 0.0;
    }
    let (p, r) = (p / orders as f64, r / orders as f64);
    if p + r == 0.0 {
        return 0.0;
    }
    let b2 = CHRF_BETA * CHRF_BETA;
    100.0 * (1.0 + b2) * p * r / (b2 * p + r)
}

/// chrF (character 6-grams, beta 2, whitespace ignored) on a 0..=100 scale.
pub fn chrf(prediction: &str, reference: &str) -> f64 {
    chrf_from_stats(&chrf_stats(prediction, reference))
}

/// chrF against several references: the reference with the best score wins.
pub fn chrf_multi(prediction: &str, references: &[String]) -> f64 {
    references.iter().map(|r| chrf(prediction, r)).fold(0.0, f64::max)
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure over whitespace tokens.
pub fn rouge_l(prediction: &str, reference: &str) -> f64 {
    let p: Vec<&str> = prediction.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let lcs = lcs_len(&p, &r);
    if lcs == 0 {
        return 0.0;
    }
    let precision = lcs as f64 / p.len() as f64;
    let recall = lcs as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// ROUGE-L against several references, keeping the best.
pub fn rouge_l_multi(prediction: &str, references: &[String]) -> f64 {
    references.iter().map(|r| rouge_l(prediction, r)).fold(0.0, f64::max)
}

/// Mean over `universe` of per-label F1 = 2TP / (2TP + FP + FN), with 0/0 taken as 0.
pub fn macro_f1(predicted: &[BTreeSet<String>], gold: &[BTreeSet<String>], universe: &[&str]) -> Result<f64, MetricError> {
    if universe.is_empty() {
        return Err(MetricError::EmptyUniverse);
    }
    if predicted.len() != gold.len() {
        return Err(MetricError::LengthMismatch { predictions: predicted.len(), references: gold.len() });
    }
    let known: BTreeSet<&str> = universe.iter().copied().collect();
    if let Some(bad) = predicted.iter().chain(gold).flatten().find(|l| !known.contains(l.as_str())) {
        return Err(MetricError::UnknownLabel(bad.clone()));
    }
    let total: f64 = known
        .iter()
        .map(|&label| {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for (p, g) in predicted.iter().zip(gold) {
                match (p.contains(label), g.contains(label)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            let denom = 2 * tp + fp + fn_;
            if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 }
        })
        .sum();
    Ok(total / known.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use proptest::strategy::Strategy;

    fn set(labels: &[&str]) -> BTreeSet<String> {
        labels.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn chrf_bounds() {
        assert_eq!(chrf("the cat", "the cat"), 100.0);
        assert_eq!(chrf("xyz", "abc"), 0.0);
        assert_eq!(chrf("", "abc"), 0.0);
        assert_eq!(chrf("", ""), 0.0);
        assert_eq!(chrf("a b", "ab"), 100.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l("a b", "c d"), 0.0);
        assert!((rouge_l("a b c d", "a c d e") - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l("", "a"), 0.0);
    }

    #[test]
    fn macro_f1_examples() {
        let u = ["a", "b"];
        assert_eq!(macro_f1(&[set(&["a"]), set(&["b"])], &[set(&["a"]), set(&["b"])], &u).unwrap(), 1.0);
        assert_eq!(macro_f1(&[set(&["b"])], &[set(&["a"])], &u).unwrap(), 0.0);
        assert_eq!(macro_f1(&[set(&["a"]), set(&["a"])], &[set(&["a"]), set(&["a", "b"])], &u).unwrap(), 0.5);
        assert_eq!(macro_f1(&[set(&["z"])], &[set(&["a"])], &u), Err(MetricError::UnknownLabel("z".into())));
        assert_eq!(macro_f1(&[], &[], &[]), Err(MetricError::EmptyUniverse));
    }

    fn label_sets(n: usize) -> impl Strategy<Value = Vec<BTreeSet<String>>> {
        proptest::collection::vec(proptest::sample::subsequence(vec!["a", "b", "c", "d"], 0..4), n)
            .prop_map(|v| v.into_iter().map(|s| s.into_iter().map(String::from).collect()).collect())
    }

    proptest! {
        #[test]
        fn metrics_stay_in_range(a in "[a-e ]{0,30}", b in "[a-e ]{0,30}") {
            let c = chrf(&a, &b);
            prop_assert!((0.0..=100.0).contains(&c));
            let r = rouge_l(&a, &b);
            prop_assert!((0.0..=1.0).contains(&r));
            if !a.trim().is_empty() {
                prop_assert_eq!(chrf(&a, &a), 100.0);
                prop_assert_eq!(rouge_l(&a, &a), 1.0);
            }
        }

        #[test]
        fn macro_f1_permutation_invariant(
            (pred, gold, perm) in (1usize..8).prop_flat_map(|n| (label_sets(n), label_sets(n), Just((0..n).collect::<Vec<_>>()).prop_shuffle()))
        ) {
            let u = ["a", "b", "c", "d"];
            let base = macro_f1(&pred, &gold, &u).unwrap();
            let p2: Vec<_> = perm.iter().map(|&i| pred[i].clone()).collect();
            let g2: Vec<_> = perm.iter().map(|&i| gold[i].clone()).collect();
            prop_assert!((macro_f1(&p2, &g2, &u).unwrap() - base).abs() < 1e-12);
            let rename = |s: &BTreeSet<String>| s.iter().map(|l| format!("x{l}")).collect::<BTreeSet<_>>();
            let p3: Vec<_> = pred.iter().map(rename).collect();
            let g3: Vec<_> = gold.iter().map(rename).collect();
            prop_assert!((macro_f1(&p3, &g3, &["xd", "xc", "xb", "xa"]).unwrap() - base).abs() < 1e-12);
        }
    }
}
