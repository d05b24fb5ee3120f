use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::annotator::AnnotationRecord;
use crate::tokenize::Tokenizer;

pub type Histogram = BTreeMap<usize, usize>;

/// Label used in the device histogram for memes annotated with no device.
pub const NO_DEVICE: &str = "none";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub template_counts: BTreeMap<String, usize>,
    pub title_tokens: Histogram,
    pub embedded_text_tokens: Histogram,
    /// Present only when annotations were joined.
    pub image_caption_tokens: Option<Histogram>,
    pub meme_caption_tokens: Option<Histogram>,
    /// One count per (meme, device) assignment, plus one `none` per meme without devices.
    pub device_labels: Option<BTreeMap<String, usize>>,
}

pub fn compute_stats(
    corpus: &Corpus,
    annotations: Option<&[AnnotationRecord]>,
    tok: &dyn Tokenizer,
) -> CorpusStats {
    let mut stats = CorpusStats {
        template_counts: corpus.templates.iter().map(|t| (t.template_id.clone(), 0)).collect(),
        ..Default::default()
    };
    for m in &corpus.memes {
        *stats.template_counts.entry(m.template_id.clone()).or_default() += 1;
        *stats.title_tokens.entry(tok.count(&m.title)).or_default() += 1;
        *stats.embedded_text_tokens.entry(tok.count(&m.embedded_text)).or_default() += 1;
    }
    if let Some(annotations) = annotations {
        let by_id: HashMap<&str, &AnnotationRecord> =
            annotations.iter().map(|a| (a.meme_id.as_str(), a)).collect();
        let mut image = Histogram::new();
        let mut meme = Histogram::new();
        let mut labels = BTreeMap::new();
        for m in &corpus.memes {
            let Some(a) = by_id.get(m.meme_id.as_str()) else { continue };
            *image.entry(tok.count(&a.image_caption)).or_default() += 1;
            *meme.entry(tok.count(&a.meme_caption)).or_default() += 1;
            if a.literary_devices.is_empty() {
                *labels.entry(NO_DEVICE.to_string()).or_default() += 1;
            }
            for d in &a.literary_devices {
                *labels.entry(d.clone()).or_default() += 1;
            }
        }
        stats.image_caption_tokens = Some(image);
        stats.meme_caption_tokens = Some(meme);
        stats.device_labels = Some(labels);
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;
    use crate::annotator::{AnnotationRecord, Provenance};
    use crate::tokenize::Whitespace;

    fn annotation(id: &str, devices: &[&str]) -> AnnotationRecord {
        AnnotationRecord {
            meme_id: id.into(),
            image_caption: "a man".into(),
            embedded_text: String::new(),
            meme_caption: "the joke is here".into(),
            literary_devices: devices.iter().map(|s| s.to_string()).collect(),
            emotions: None,
            provenance: Provenance {
                model: "scripted".into(),
                prompt_id: "p".into(),
                with_context: true,
                timestamp: "t".into(),
            },
            raw_response: String::new(),
            flags: Vec::new(),
        }
    }

    #[test]
    fn empty_corpus_gives_empty_histograms() {
        let s = compute_stats(&Corpus::default(), None, &Whitespace);
        assert!(s.template_counts.is_empty());
        assert!(s.title_tokens.is_empty() && s.embedded_text_tokens.is_empty());
    }

    #[test]
    fn embedded_text_histogram() {
        let c = Corpus::new(
            vec![template("t", "T")],
            vec![meme("a", "t", "x", "one two"), meme("b", "t", "x", "three four"), meme("c", "t", "x", "a b c d e")],
        )
        .unwrap();
        let s = compute_stats(&c, None, &Whitespace);
        assert_eq!(s.embedded_text_tokens, BTreeMap::from([(2, 2), (5, 1)]));
        assert_eq!(s.template_counts["t"], 3);
    }

    #[test]
    fn irony_everywhere() {
        let c = small();
        let ann: Vec<_> = c.memes.iter().map(|m| annotation(&m.meme_id, &["irony"])).collect();
        let s = compute_stats(&c, Some(&ann), &Whitespace);
        assert_eq!(s.device_labels.unwrap(), BTreeMap::from([("irony".to_string(), 4)]));
        let mass: usize = s.meme_caption_tokens.unwrap().values().sum();
        assert_eq!(mass, 4);
    }

    #[test]
    fn mass_conservation() {
        let c = small();
        let ann = vec![annotation("m1", &["irony", "metaphor"]), annotation("m2", &[])];
        let s = compute_stats(&c, Some(&ann), &Whitespace);
        assert_eq!(s.title_tokens.values().sum::<usize>(), c.memes.len());
        assert_eq!(s.template_counts.values().sum::<usize>(), c.memes.len());
        assert_eq!(s.image_caption_tokens.unwrap().values().sum::<usize>(), 2);
        assert_eq!(s.device_labels.unwrap().values().sum::<usize>(), 3);
    }
}
