use std::collections::HashMap;

use serde::{Deserialize, Serialize};

const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuSmoothing {
    None,
    /// Add one to the matched and total counts of every order above unigrams.
    #[default]
    AddOne,
}

#[derive(Debug, Default, Clone, Copy)]
struct Stats {
    correct: [f64; MAX_ORDER],
    total: [f64; MAX_ORDER],
    sys_len: usize,
    ref_len: usize,
}

fn closest_ref_len(hyp_len: usize, refs: &[usize]) -> usize {
    let mut best = refs[0];
    for &r in &refs[1..] {
        let (d, bd) = (hyp_len.abs_diff(r), hyp_len.abs_diff(best));
        if d < bd || (d == bd && r < best) {
            best = r;
        }
    }
    best
}

fn add_segment(stats: &mut Stats, hyp: &str, refs: &[&str]) {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let rs: Vec<Vec<&str>> = refs.iter().map(|r| r.split_whitespace().collect()).collect();
    stats.sys_len += h.len();
    stats.ref_len += closest_ref_len(h.len(), &rs.iter().map(Vec::len).collect::<Vec<_>>());
    for n in 1..=MAX_ORDER {
        let hyp_counts = count(&h, n);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in &rs {
            for (g, c) in count(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let correct: usize = hyp_counts.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        stats.correct[n - 1] += correct as f64;
        stats.total[n - 1] += h.len().saturating_sub(n - 1) as f64;
    }
}

fn count<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w.to_vec()).or_insert(0) += 1;
    }
    m
}

fn score(mut s: Stats, smoothing: BleuSmoothing) -> f64 {
    if s.correct.iter().all(|&c| c == 0.0) {
        return 0.0;
    }
    let bp = if s.sys_len >= s.ref_len {
        1.0
    } else if s.sys_len == 0 {
        0.0
    } else {
        (1.0 - s.ref_len as f64 / s.sys_len as f64).exp()
    };
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        if smoothing == BleuSmoothing::AddOne && n > 0 {
            s.correct[n] += 1.0;
            s.total[n] += 1.0;
        }
        if s.total[n] == 0.0 || s.correct[n] == 0.0 {
            return 0.0;
        }
        log_sum += (s.correct[n] / s.total[n]).ln();
    }
    bp * (log_sum / MAX_ORDER as f64).exp()
}

/// Corpus BLEU-4 on whitespace tokens in [0, 1].
///
/// Counts are clipped by the maximum over each item's references and the
/// brevity penalty uses the closest reference length (shorter on ties).
pub fn bleu4<S: AsRef<str>>(predictions: &[S], references: &[Vec<S>], smoothing: BleuSmoothing) -> f64 {
    let mut stats = Stats::default();
    for (p, refs) in predictions.iter().zip(references) {
        if refs.is_empty() {
            continue;
        }
        let refs: Vec<&str> = refs.iter().map(AsRef::as_ref).collect();
        add_segment(&mut stats, p.as_ref(), &refs);
    }
    score(stats, smoothing)
}

/// BLEU-4 of a single segment.
pub fn sentence_bleu4(prediction: &str, references: &[&str], smoothing: BleuSmoothing) -> f64 {
    let mut stats = Stats::default();
    if !references.is_empty() {
        add_segment(&mut stats, prediction, references);
    }
    score(stats, smoothing)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_corpus_scores_one() {
        let p = ["the cat sat on the mat", "a dog barked at the moon"];
        let r = [vec!["the cat sat on the mat"], vec!["a dog barked at the moon"]];
        for s in [BleuSmoothing::None, BleuSmoothing::AddOne] {
            assert!((bleu4(&p, &r, s) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn short_segment_depends_on_smoothing() {
        assert_eq!(sentence_bleu4("a b c", &["a b c"], BleuSmoothing::None), 0.0);
        assert!((sentence_bleu4("a b c", &["a b c"], BleuSmoothing::AddOne) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_overlap_is_zero_even_when_smoothed() {
        assert_eq!(sentence_bleu4("x y z w", &["a b c d"], BleuSmoothing::AddOne), 0.0);
    }

    #[test]
    fn closest_reference_length_prefers_shorter_on_ties() {
        assert_eq!(closest_ref_len(5, &[7, 3]), 3);
        assert_eq!(closest_ref_len(5, &[6, 3]), 6);
    }
}
