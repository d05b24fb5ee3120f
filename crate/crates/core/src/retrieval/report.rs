use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{gold_ranks, recall_from_ranks, similarity, Direction, GoldMap, RetrievalError};
use crate::annotator::AnnotationRecord;
use crate::corpus::{Corpus, MemeRecord};
use crate::embeddings::{encode, normalize_rows, EmbeddingStore, Encoder, Modality};
use crate::provenance::Provenance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextType {
    MemeCaption,
    ImageCaption,
    EmbeddedText,
    Title,
}

impl TextType {
    pub const ALL: [TextType; 4] = [TextType::MemeCaption, TextType::ImageCaption, TextType::EmbeddedText, TextType::Title];

    pub fn as_str(self) -> &'static str {
        match self {
            TextType::MemeCaption => "meme_caption",
            TextType::ImageCaption => "image_caption",
            TextType::EmbeddedText => "embedded_text",
            TextType::Title => "title",
        }
    }

    /// Titles come from the corpus; the other types from the annotation.
    pub fn text<'a>(self, meme: &'a MemeRecord, annotation: Option<&'a AnnotationRecord>) -> Option<&'a str> {
        match self {
            TextType::Title => Some(&meme.title),
            TextType::MemeCaption => annotation.map(|a| a.meme_caption.as_str()),
            TextType::ImageCaption => annotation.map(|a| a.image_caption.as_str()),
            TextType::EmbeddedText => annotation.map(|a| a.embedded_text.as_str()),
        }
    }
}

impl std::str::FromStr for TextType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TextType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown text type {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionScores {
    /// Recall keyed by k.
    pub recall: BTreeMap<usize, f64>,
    /// Mean of the recalls.
    pub overall_mean: f64,
}

impl DirectionScores {
    fn from_ranks(ranks: &[usize], ks: &[usize]) -> Self {
        Self::from_recall(ks.iter().map(|&k| (k, recall_from_ranks(ranks, k))).collect())
    }

    fn from_recall(recall: BTreeMap<usize, f64>) -> Self {
        let overall_mean = if recall.is_empty() { 0.0 } else { recall.values().sum::<f64>() / recall.len() as f64 };
        Self { recall, overall_mean }
    }

    pub fn at(&self, k: usize) -> f64 {
        self.recall.get(&k).copied().unwrap_or(f64::NAN)
    }

    fn average(a: &Self, b: &Self) -> Self {
        Self::from_recall(a.recall.iter().map(|(&k, &v)| (k, (v + b.at(k)) / 2.0)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeReport {
    pub text2meme: DirectionScores,
    pub meme2text: DirectionScores,
    /// Per-k average of the two directions.
    pub both: DirectionScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub text_types: Vec<TextType>,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { text_types: TextType::ALL.to_vec(), ks: vec![1, 5, 10] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub encoder: String,
    pub n_memes: usize,
    pub ks: Vec<usize>,
    pub text_types: BTreeMap<TextType, TypeReport>,
    pub provenance: Provenance,
}

/// Scores one pair of normalised stores where text `i` describes meme `gold.meme_of(i)`.
pub fn evaluate_stores(texts: &EmbeddingStore, memes: &EmbeddingStore, gold: &GoldMap, ks: &[usize]) -> Result<TypeReport, RetrievalError> {
    if ks.contains(&0) {
        return Err(RetrievalError::ZeroK);
    }
    let m = similarity(texts, memes)?;
    let t2m = DirectionScores::from_ranks(&gold_ranks(&m, gold, Direction::Text2Meme)?, ks);
    let m2t = DirectionScores::from_ranks(&gold_ranks(&m, gold, Direction::Meme2Text)?, ks);
    let both = DirectionScores::average(&t2m, &m2t);
    Ok(TypeReport { text2meme: t2m, meme2text: m2t, both })
}

/// Embeds every meme image once and each requested text type, then scores
/// both retrieval directions.
pub fn evaluate(
    corpus: &Corpus,
    annotations: &[AnnotationRecord],
    encoder: &dyn Encoder,
    config: &EvalConfig,
) -> Result<RetrievalReport, RetrievalError> {
    let by_id: HashMap<&str, &AnnotationRecord> = annotations.iter().map(|a| (a.meme_id.as_str(), a)).collect();
    let images: Vec<(String, String)> = corpus.memes.iter().map(|m| (m.meme_id.clone(), m.image.clone())).collect();
    let memes = normalize_rows(&encode(&images, Modality::Image, encoder)?)?;
    let gold = GoldMap::diagonal(corpus.memes.len());

    let mut text_types = BTreeMap::new();
    for &tt in &config.text_types {
        let mut items = Vec::with_capacity(corpus.memes.len());
        for m in &corpus.memes {
            let text = tt
                .text(m, by_id.get(m.meme_id.as_str()).copied())
                .ok_or_else(|| RetrievalError::MissingText { meme_id: m.meme_id.clone(), text_type: tt })?;
            items.push((m.meme_id.clone(), text.to_string()));
        }
        let texts = normalize_rows(&encode(&items, Modality::Text, encoder)?)?;
        text_types.insert(tt, evaluate_stores(&texts, &memes, &gold, &config.ks)?);
    }

    #[derive(Serialize)]
    struct Hashed<'a> {
        encoder: &'a str,
        config: &'a EvalConfig,
        memes: Vec<&'a str>,
    }
    let hashed = Hashed { encoder: encoder.name(), config, memes: corpus.memes.iter().map(|m| m.meme_id.as_str()).collect() };
    Ok(RetrievalReport {
        encoder: encoder.name().to_string(),
        n_memes: corpus.memes.len(),
        ks: config.ks.clone(),
        text_types,
        provenance: Provenance::new("eval-retrieval", &hashed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator::Provenance as AnnotationProvenance;
    use crate::corpus::fixtures;
    use crate::embeddings::{HashEncoder, ImageMode};

    fn annotation(m: &MemeRecord, caption: &str) -> AnnotationRecord {
        AnnotationRecord {
            meme_id: m.meme_id.clone(),
            image_caption: caption.into(),
            embedded_text: caption.into(),
            meme_caption: caption.into(),
            literary_devices: Default::default(),
            emotions: None,
            provenance: AnnotationProvenance { model: "x".into(), prompt_id: "p".into(), with_context: false, timestamp: "t".into() },
            raw_response: String::new(),
            flags: Vec::new(),
        }
    }

    #[test]
    fn colliding_texts_retrieve_perfectly() {
        let corpus = fixtures::small();
        let anns: Vec<_> = corpus.memes.iter().map(|m| annotation(m, &m.image)).collect();
        let enc = HashEncoder::new(64, 1).with_image_mode(ImageMode::Reference);
        let config = EvalConfig { text_types: vec![TextType::MemeCaption, TextType::ImageCaption, TextType::EmbeddedText], ks: vec![1, 5, 10] };
        let r = evaluate(&corpus, &anns, &enc, &config).unwrap();
        for tr in r.text_types.values() {
            for d in [&tr.text2meme, &tr.meme2text, &tr.both] {
                assert_eq!(d.at(1), 1.0);
                assert_eq!(d.overall_mean, 1.0);
            }
        }
    }

    #[test]
    fn missing_annotation_names_the_meme() {
        let corpus = fixtures::small();
        let enc = HashEncoder::new(16, 1).with_image_mode(ImageMode::Reference);
        let err = evaluate(&corpus, &[], &enc, &EvalConfig::default()).unwrap_err();
        assert!(matches!(err, RetrievalError::MissingText { text_type: TextType::MemeCaption, .. }));
        let titles_only = EvalConfig { text_types: vec![TextType::Title], ks: vec![1] };
        assert!(evaluate(&corpus, &[], &enc, &titles_only).is_ok());
    }

    #[test]
    fn report_carries_provenance_and_means() {
        let corpus = fixtures::small();
        let enc = HashEncoder::new(16, 2).with_image_mode(ImageMode::Reference);
        let cfg = EvalConfig { text_types: vec![TextType::Title], ks: vec![1, 2, 4] };
        let r = evaluate(&corpus, &[], &enc, &cfg).unwrap();
        let t = &r.text_types[&TextType::Title].text2meme;
        assert!((t.overall_mean - (t.at(1) + t.at(2) + t.at(4)) / 3.0).abs() < 1e-12);
        assert_eq!(r.provenance.config_hash.len(), 64);
        assert_eq!(r, evaluate(&corpus, &[], &enc, &cfg).unwrap());
    }
}
