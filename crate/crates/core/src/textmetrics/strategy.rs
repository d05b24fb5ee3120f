//! Ways of scoring a prediction against several reference captions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{bleu4, chrf, chrf_multi, rouge_l, rouge_l_multi, sentence_bleu4, BleuSmoothing, MetricError};

/// Separator used whenever texts are joined.
pub const JOIN: &str = " ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleurt,
    Bertscore,
    Chrf,
    RougeL,
    Bleu4,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Bleurt => "bleurt",
            Metric::Bertscore => "bertscore",
            Metric::Chrf => "chrf",
            Metric::RougeL => "rouge_l",
            Metric::Bleu4 => "bleu4",
        }
    }

    fn is_learned(self) -> bool {
        matches!(self, Metric::Bleurt | Metric::Bertscore)
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Metric::Bleurt, Metric::Bertscore, Metric::Chrf, Metric::RougeL, Metric::Bleu4]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Score the prediction against each reference separately.
    ExtendedPredictions,
    /// Join each item's references into one text.
    ConcatenatedReferences,
    /// Hand all references to the metric at once.
    MultiReference,
    /// Keep the best-scoring reference per item.
    BestMatch,
    /// Join all predictions and all references and score once.
    FullyConcatenated,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::ExtendedPredictions,
        Strategy::ConcatenatedReferences,
        Strategy::MultiReference,
        Strategy::BestMatch,
        Strategy::FullyConcatenated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::ExtendedPredictions => "extended_predictions",
            Strategy::ConcatenatedReferences => "concatenated_references",
            Strategy::MultiReference => "multi_reference",
            Strategy::BestMatch => "best_match",
            Strategy::FullyConcatenated => "fully_concatenated",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

/// Adapter for model-based scorers such as BLEURT or BERTScore.
pub trait LearnedScorer: Send + Sync {
    /// Recorded in reports so results can be traced to a checkpoint.
    fn name(&self) -> &str;

    fn supports_multi_reference(&self) -> bool;

    fn score(&self, prediction: &str, references: &[String]) -> Result<f64, MetricError>;
}

/// Learned scorers available to a request.
#[derive(Default)]
pub struct ScorerSet<'a> {
    pub bleurt: Option<&'a dyn LearnedScorer>,
    pub bertscore: Option<&'a dyn LearnedScorer>,
}

impl<'a> ScorerSet<'a> {
    fn get(&self, metric: Metric) -> Result<&'a dyn LearnedScorer, MetricError> {
        match metric {
            Metric::Bleurt => self.bleurt,
            Metric::Bertscore => self.bertscore,
            _ => None,
        }
        .ok_or_else(|| MetricError::MissingScorer(metric.as_str().into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRequest {
    pub predictions: Vec<String>,
    pub references: Vec<Vec<String>>,
    pub strategy: Strategy,
    pub metrics: Vec<Metric>,
    #[serde(default)]
    pub bleu_smoothing: BleuSmoothing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub strategy: Strategy,
    pub items: usize,
    /// chrF is on a 0..=100 scale, the other metrics on 0..=1.
    pub scores: BTreeMap<Metric, f64>,
    /// Present whenever BLEU-4 is requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu4_unsmoothed: Option<f64>,
    /// Names of the learned scorers that produced the learned scores.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scorers: BTreeMap<Metric, String>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { 0.0 } else { s / n as f64 }
}

fn validate(req: &MetricRequest, scorers: &ScorerSet<'_>) -> Result<(), MetricError> {
    if req.predictions.len() != req.references.len() {
        return Err(MetricError::LengthMismatch { predictions: req.predictions.len(), references: req.references.len() });
    }
    if let Some(i) = req.references.iter().position(Vec::is_empty) {
        return Err(MetricError::NoReferences(i));
    }
    for &m in &req.metrics {
        if m.is_learned() {
            let s = scorers.get(m)?;
            if req.strategy == Strategy::MultiReference && !s.supports_multi_reference() {
                return Err(MetricError::SingleReferenceOnly { metric: m.as_str().into() });
            }
        }
    }
    Ok(())
}

/// Scores `(prediction, reference)` pairs with a single-reference metric.
fn pairwise(metric: Metric, pairs: &[(String, String)], smoothing: BleuSmoothing, scorers: &ScorerSet<'_>) -> Result<f64, MetricError> {
    Ok(match metric {
        Metric::Chrf => mean(pairs.iter().map(|(p, r)| chrf(p, r))),
        Metric::RougeL => mean(pairs.iter().map(|(p, r)| rouge_l(p, r))),
        Metric::Bleu4 => {
            let preds: Vec<&str> = pairs.iter().map(|(p, _)| p.as_str()).collect();
            let refs: Vec<Vec<&str>> = pairs.iter().map(|(_, r)| vec![r.as_str()]).collect();
            bleu4(&preds, &refs, smoothing)
        }
        Metric::Bleurt | Metric::Bertscore => {
            let s = scorers.get(metric)?;
            let mut scores = Vec::with_capacity(pairs.len());
            for (p, r) in pairs {
                scores.push(s.score(p, std::slice::from_ref(r))?);
            }
            mean(scores)
        }
    })
}

fn item_score(metric: Metric, p: &str, r: &str, smoothing: BleuSmoothing, scorers: &ScorerSet<'_>) -> Result<f64, MetricError> {
    Ok(match metric {
        Metric::Chrf => chrf(p, r),
        Metric::RougeL => rouge_l(p, r),
        Metric::Bleu4 => sentence_bleu4(p, &[r], smoothing),
        Metric::Bleurt | Metric::Bertscore => scorers.get(metric)?.score(p, &[r.to_string()])?,
    })
}

fn score_metric(req: &MetricRequest, metric: Metric, smoothing: BleuSmoothing, scorers: &ScorerSet<'_>) -> Result<f64, MetricError> {
    let items = req.predictions.iter().zip(&req.references);
    match req.strategy {
        Strategy::ExtendedPredictions => {
            let pairs: Vec<(String, String)> =
                items.flat_map(|(p, rs)| rs.iter().map(move |r| (p.clone(), r.clone()))).collect();
            pairwise(metric, &pairs, smoothing, scorers)
        }
        Strategy::ConcatenatedReferences => {
            let pairs: Vec<(String, String)> = items.map(|(p, rs)| (p.clone(), rs.join(JOIN))).collect();
            pairwise(metric, &pairs, smoothing, scorers)
        }
        Strategy::FullyConcatenated => {
            let p = req.predictions.join(JOIN);
            let r = req.references.iter().flatten().cloned().collect::<Vec<_>>().join(JOIN);
            pairwise(metric, &[(p, r)], smoothing, scorers)
        }
        Strategy::MultiReference => Ok(match metric {
            Metric::Chrf => mean(items.map(|(p, rs)| chrf_multi(p, rs))),
            Metric::RougeL => mean(items.map(|(p, rs)| rouge_l_multi(p, rs))),
            Metric::Bleu4 => bleu4(&req.predictions, &req.references, smoothing),
            Metric::Bleurt | Metric::Bertscore => {
                let s = scorers.get(metric)?;
                let mut scores = Vec::new();
                for (p, rs) in items {
                    scores.push(s.score(p, rs)?);
                }
                mean(scores)
            }
        }),
        Strategy::BestMatch => {
            let mut pairs = Vec::with_capacity(req.predictions.len());
            let mut best_scores = Vec::with_capacity(req.predictions.len());
            for (p, rs) in items {
                let mut best = (f64::NEG_INFINITY, 0);
                for (i, r) in rs.iter().enumerate() {
                    let s = item_score(metric, p, r, smoothing, scorers)?;
                    if s > best.0 {
                        best = (s, i);
                    }
                }
                best_scores.push(best.0);
                pairs.push((p.clone(), rs[best.1].clone()));
            }
            if metric == Metric::Bleu4 {
                // corpus statistics over the reference each item matched best
                pairwise(metric, &pairs, smoothing, scorers)
            } else {
                Ok(mean(best_scores))
            }
        }
    }
}

/// Computes every requested metric under the request's strategy.
pub fn apply_strategy(req: &MetricRequest, scorers: &ScorerSet<'_>) -> Result<MetricReport, MetricError> {
    validate(req, scorers)?;
    let mut report = MetricReport {
        strategy: req.strategy,
        items: req.predictions.len(),
        scores: BTreeMap::new(),
        bleu4_unsmoothed: None,
        scorers: BTreeMap::new(),
    };
    for &metric in &req.metrics {
        report.scores.insert(metric, score_metric(req, metric, req.bleu_smoothing, scorers)?);
        if metric == Metric::Bleu4 {
            report.bleu4_unsmoothed = Some(score_metric(req, metric, BleuSmoothing::None, scorers)?);
        }
        if metric.is_learned() {
            report.scorers.insert(metric, scorers.get(metric)?.name().to_string());
        }
    }
    Ok(report)
}
