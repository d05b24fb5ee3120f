//! Blind preference surveys: construction, blinding and tallies.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use memekit::annotator::AnnotationRecord;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Candidate id offered on multi-option items for "none of these".
pub const NONE_CANDIDATE: &str = "none";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtask {
    EmbeddedText,
    ImageCaption,
    MemeCaption,
    LiteraryDevices,
    Emotions,
}

impl Subtask {
    pub const ALL: [Subtask; 5] =
        [Subtask::EmbeddedText, Subtask::ImageCaption, Subtask::MemeCaption, Subtask::LiteraryDevices, Subtask::Emotions];

    pub fn as_str(self) -> &'static str {
        match self {
            Subtask::EmbeddedText => "embedded_text",
            Subtask::ImageCaption => "image_caption",
            Subtask::MemeCaption => "meme_caption",
            Subtask::LiteraryDevices => "literary_devices",
            Subtask::Emotions => "emotions",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Subtask::EmbeddedText => "embedded text",
            Subtask::ImageCaption => "image caption",
            Subtask::MemeCaption => "meme caption",
            Subtask::LiteraryDevices => "literary devices",
            Subtask::Emotions => "emotions",
        }
    }

    /// Captions take exactly one answer; the rest accept several.
    pub fn selection_mode(self) -> SelectionMode {
        match self {
            Subtask::ImageCaption | Subtask::MemeCaption => SelectionMode::Single,
            _ => SelectionMode::Multi,
        }
    }

    pub fn allows_none(self) -> bool {
        matches!(self, Subtask::LiteraryDevices | Subtask::Emotions)
    }

    fn text(self, a: &AnnotationRecord) -> String {
        let join = |labels: &mut dyn Iterator<Item = &String>| {
            let v: Vec<&str> = labels.map(String::as_str).collect();
            if v.is_empty() { "none".to_string() } else { v.join(", ") }
        };
        match self {
            Subtask::EmbeddedText => a.embedded_text.clone(),
            Subtask::ImageCaption => a.image_caption.clone(),
            Subtask::MemeCaption => a.meme_caption.clone(),
            Subtask::LiteraryDevices => join(&mut a.literary_devices.iter()),
            Subtask::Emotions => join(&mut a.emotions.iter().flatten()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Single,
    Multi,
}

/// Which annotation run produced a candidate. Never sent to evaluators.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub model: String,
    pub with_context: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub candidate_id: String,
    pub text: String,
    /// Index into the survey's source list.
    pub source: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyItem {
    pub item_id: String,
    pub meme_id: String,
    pub subtask: Subtask,
    pub candidates: Vec<Candidate>,
    pub selection_mode: SelectionMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Survey {
    pub survey_id: String,
    pub seed: u64,
    pub memes: Vec<String>,
    pub sources: Vec<SourceDescriptor>,
    pub items: Vec<SurveyItem>,
}

/// What an evaluator sees of a candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindedCandidate {
    pub candidate_id: String,
    pub text: String,
}

/// What an evaluator sees of an item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindedItem {
    pub item_id: String,
    pub meme_id: String,
    pub subtask: Subtask,
    pub selection_mode: SelectionMode,
    pub candidates: Vec<BlindedCandidate>,
    /// Whether "none of these" may be chosen, as the sole selection.
    pub allows_none: bool,
    pub media_url: String,
}

impl SurveyItem {
    pub fn blinded(&self) -> BlindedItem {
        BlindedItem {
            item_id: self.item_id.clone(),
            meme_id: self.meme_id.clone(),
            subtask: self.subtask,
            selection_mode: self.selection_mode,
            candidates: self
                .candidates
                .iter()
                .map(|c| BlindedCandidate { candidate_id: c.candidate_id.clone(), text: c.text.clone() })
                .collect(),
            allows_none: self.subtask.allows_none(),
            media_url: format!("/media/{}", self.meme_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SurveyError {
    #[error("a survey needs at least two annotation sources, got {0}")]
    TooFewSources(usize),
    #[error("a survey needs at least one meme")]
    NoMemes,
    #[error("source {model} (with_context={with_context}) has no annotation for meme {meme_id}")]
    MissingAnnotation { model: String, with_context: bool, meme_id: String },
    #[error("duplicate source {model} (with_context={with_context})")]
    DuplicateSource { model: String, with_context: bool },
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("unknown candidate {candidate} on item {item}")]
    UnknownCandidate { item: String, candidate: String },
    #[error("item {item} takes exactly one selection, got {count}")]
    SelectionCount { item: String, count: usize },
    #[error("\"none\" must be the only selection on item {0}")]
    NoneWithOthers(String),
    #[error("duplicate candidate {candidate} in selection for item {item}")]
    DuplicateSelection { item: String, candidate: String },
}

fn digest_hex(parts: &[&str], len: usize) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())[..len].to_string()
}

fn item_rng(seed: u64, item_id: &str) -> ChaCha8Rng {
    let d = Sha256::digest(format!("{seed}|{item_id}").as_bytes());
    ChaCha8Rng::from_seed(d.into())
}

/// One item per (meme, subtask) with one candidate per source, shuffled per
/// item from `seed`. Candidate ids are opaque hashes.
pub fn create_survey(
    memes: &[String],
    annotation_sets: &[(SourceDescriptor, Vec<AnnotationRecord>)],
    seed: u64,
) -> Result<Survey, SurveyError> {
    if memes.is_empty() {
        return Err(SurveyError::NoMemes);
    }
    if annotation_sets.len() < 2 {
        return Err(SurveyError::TooFewSources(annotation_sets.len()));
    }
    let mut indexed: Vec<HashMap<&str, &AnnotationRecord>> = Vec::new();
    for (i, (src, records)) in annotation_sets.iter().enumerate() {
        if annotation_sets[..i].iter().any(|(s, _)| s == src) {
            return Err(SurveyError::DuplicateSource { model: src.model.clone(), with_context: src.with_context });
        }
        let by_id: HashMap<&str, &AnnotationRecord> = records.iter().map(|r| (r.meme_id.as_str(), r)).collect();
        if let Some(m) = memes.iter().find(|m| !by_id.contains_key(m.as_str())) {
            return Err(SurveyError::MissingAnnotation {
                model: src.model.clone(),
                with_context: src.with_context,
                meme_id: m.clone(),
            });
        }
        indexed.push(by_id);
    }

    let mut fingerprint = vec![seed.to_string()];
    fingerprint.extend(memes.iter().cloned());
    fingerprint.extend(annotation_sets.iter().map(|(s, _)| format!("{}|{}", s.model, s.with_context)));
    let refs: Vec<&str> = fingerprint.iter().map(String::as_str).collect();
    let survey_id = format!("s-{}", digest_hex(&refs, 12));

    let mut items = Vec::with_capacity(memes.len() * Subtask::ALL.len());
    for meme in memes {
        for subtask in Subtask::ALL {
            let item_id = format!("{survey_id}-{}", digest_hex(&[&survey_id, meme, subtask.as_str()], 10));
            let mut candidates: Vec<Candidate> = indexed
                .iter()
                .enumerate()
                .map(|(source, by_id)| Candidate {
                    candidate_id: format!("c-{}", digest_hex(&[&item_id, &source.to_string(), &seed.to_string()], 10)),
                    text: subtask.text(by_id[meme.as_str()]),
                    source,
                })
                .collect();
            candidates.shuffle(&mut item_rng(seed, &item_id));
            items.push(SurveyItem {
                item_id,
                meme_id: meme.clone(),
                subtask,
                candidates,
                selection_mode: subtask.selection_mode(),
            });
        }
    }
    Ok(Survey {
        survey_id,
        seed,
        memes: memes.to_vec(),
        sources: annotation_sets.iter().map(|(s, _)| s.clone()).collect(),
        items,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub evaluator_id: String,
    pub item_id: String,
    pub selected: Vec<String>,
    pub timestamp: String,
}

impl Survey {
    pub fn item(&self, item_id: &str) -> Option<&SurveyItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    /// Checks a selection against the item's candidates and mode.
    pub fn check_selection(&self, item_id: &str, selected: &[String]) -> Result<(), SurveyError> {
        let item = self.item(item_id).ok_or_else(|| SurveyError::UnknownItem(item_id.to_string()))?;
        let err_item = || item_id.to_string();
        for (i, s) in selected.iter().enumerate() {
            if selected[..i].contains(s) {
                return Err(SurveyError::DuplicateSelection { item: err_item(), candidate: s.clone() });
            }
            let known = item.candidates.iter().any(|c| &c.candidate_id == s)
                || (s == NONE_CANDIDATE && item.subtask.allows_none());
            if !known {
                return Err(SurveyError::UnknownCandidate { item: err_item(), candidate: s.clone() });
            }
        }
        if selected.iter().any(|s| s == NONE_CANDIDATE) && selected.len() > 1 {
            return Err(SurveyError::NoneWithOthers(err_item()));
        }
        let ok = match item.selection_mode {
            SelectionMode::Single => selected.len() == 1,
            SelectionMode::Multi => !selected.is_empty(),
        };
        if !ok {
            return Err(SurveyError::SelectionCount { item: err_item(), count: selected.len() });
        }
        Ok(())
    }
}

/// Counts for one (meme, subtask) row, one entry per source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TallyRow {
    pub meme_id: String,
    pub subtask: Subtask,
    pub counts: Vec<u64>,
    pub abstentions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskTotals {
    pub subtask: Subtask,
    pub counts: Vec<u64>,
}

/// Vote counts per source, laid out as meme × subtask rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub survey_id: String,
    pub sources: Vec<SourceDescriptor>,
    pub rows: Vec<TallyRow>,
    pub by_subtask: Vec<SubtaskTotals>,
    /// Per source; equals the sum of that source's cells.
    pub totals: Vec<u64>,
    /// "none" selections, outside any source's cells.
    pub abstentions: u64,
    pub selections: u64,
    pub votes: u64,
}

impl Tally {
    /// Count for one cell.
    pub fn count(&self, meme_id: &str, subtask: Subtask, source: &SourceDescriptor) -> Option<u64> {
        let col = self.sources.iter().position(|s| s == source)?;
        self.rows.iter().find(|r| r.meme_id == meme_id && r.subtask == subtask).map(|r| r.counts[col])
    }

    /// Plain-text grid: one column per (model, with/without context), one
    /// row per (meme, subtask), and a totals row.
    pub fn render_grid(&self) -> String {
        let mut out = String::new();
        let head: Vec<String> = self
            .sources
            .iter()
            .map(|s| format!("{} {}", s.model, if s.with_context { "with" } else { "without" }))
            .collect();
        let _ = writeln!(out, "meme\tsubtask\t{}", head.join("\t"));
        for r in &self.rows {
            let cells: Vec<String> = r.counts.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "{}\t{}\t{}", r.meme_id, r.subtask.label(), cells.join("\t"));
        }
        let totals: Vec<String> = self.totals.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "Total\t\t{}", totals.join("\t"));
        out
    }
}

/// Tallies the current vote of every (evaluator, item).
pub fn tally<'a>(survey: &Survey, votes: impl IntoIterator<Item = &'a VoteRecord>) -> Tally {
    let n = survey.sources.len();
    let mut rows: Vec<TallyRow> = survey
        .items
        .iter()
        .map(|i| TallyRow { meme_id: i.meme_id.clone(), subtask: i.subtask, counts: vec![0; n], abstentions: 0 })
        .collect();
    let position: HashMap<&str, usize> = survey.items.iter().enumerate().map(|(k, i)| (i.item_id.as_str(), k)).collect();
    let (mut selections, mut abstentions, mut n_votes) = (0, 0, 0);
    for v in votes {
        let Some(&k) = position.get(v.item_id.as_str()) else { continue };
        n_votes += 1;
        for s in &v.selected {
            selections += 1;
            if s == NONE_CANDIDATE {
                rows[k].abstentions += 1;
                abstentions += 1;
            } else if let Some(c) = survey.items[k].candidates.iter().find(|c| &c.candidate_id == s) {
                rows[k].counts[c.source] += 1;
            }
        }
    }
    let mut by_subtask: BTreeMap<Subtask, Vec<u64>> = BTreeMap::new();
    for r in &rows {
        let e = by_subtask.entry(r.subtask).or_insert_with(|| vec![0; n]);
        for (t, c) in e.iter_mut().zip(&r.counts) {
            *t += c;
        }
    }
    let mut totals = vec![0; n];
    for counts in by_subtask.values() {
        for (t, c) in totals.iter_mut().zip(counts) {
            *t += c;
        }
    }
    Tally {
        survey_id: survey.survey_id.clone(),
        sources: survey.sources.clone(),
        rows,
        by_subtask: by_subtask.into_iter().map(|(subtask, counts)| SubtaskTotals { subtask, counts }).collect(),
        totals,
        abstentions,
        selections,
        votes: n_votes,
    }
}
