//! Templatic-meme corpus: loading, validation, filtering, splitting and statistics.
//!
//! On disk a corpus is two JSONL files: `memes.jsonl` (one meme instance per
//! line) and `templates.jsonl` (one template per line), placed side by side.

mod filter;
mod split;
mod stats;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};

pub use filter::{filter_corpus, normalize_title, FilterConfig};
pub use split::{split_corpus, write_split};
pub use stats::{compute_stats, CorpusStats};

pub const MEMES_FILE: &str = "memes.jsonl";
pub const TEMPLATES_FILE: &str = "templates.jsonl";
pub const SPLIT_FILE: &str = "split.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub template_id: String,
    pub name: String,
    /// The template's "About" knowledge-base text; empty when unknown.
    pub about_context: String,
    /// File path or URL, recorded verbatim.
    pub base_image: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemeRecord {
    pub meme_id: String,
    pub template_id: String,
    pub title: String,
    pub image: String,
    pub embedded_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub views: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upvotes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downvotes: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub meme_id: String,
    pub split: Split,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("manifest not found: {0}")]
    MissingFile(PathBuf),
    #[error("{file}: row {row}: {message}")]
    MalformedRow {
        file: PathBuf,
        row: usize,
        message: String,
    },
    #[error("duplicate {kind} id {id:?}")]
    DuplicateId { kind: &'static str, id: String },
    #[error("meme {meme_id:?} references unknown template {template_id:?}")]
    DanglingTemplate { meme_id: String, template_id: String },
    #[error("meme {0:?} has an empty image reference")]
    EmptyImage(String),
    #[error("template {0:?} has an empty name")]
    EmptyName(String),
    #[error("split assignment does not cover meme {0:?}")]
    IncompleteSplit(String),
    #[error("split assignment names unknown meme {0:?}")]
    UnknownSplitMeme(String),
    #[error("validation fraction {0} outside [0, 1)")]
    FractionOutOfRange(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Jsonl(JsonlError),
}

impl From<JsonlError> for CorpusError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Open { path, .. } => CorpusError::MissingFile(path),
            JsonlError::Malformed {
                path,
                line,
                message,
            } => CorpusError::MalformedRow {
                file: path,
                row: line,
                message,
            },
            other => CorpusError::Jsonl(other),
        }
    }
}

/// A validated corpus. Templates and memes keep their manifest order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub templates: Vec<TemplateRecord>,
    pub memes: Vec<MemeRecord>,
    pub split_assignment: Option<BTreeMap<String, Split>>,
}

impl Corpus {
    /// Validates ids and references and builds a corpus.
    pub fn new(
        templates: Vec<TemplateRecord>,
        memes: Vec<MemeRecord>,
    ) -> Result<Self, CorpusError> {
        let corpus = Self {
            templates,
            memes,
            split_assignment: None,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut template_ids = HashSet::new();
        for t in &self.templates {
            if !template_ids.insert(t.template_id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    kind: "template",
                    id: t.template_id.clone(),
                });
            }
            if t.name.trim().is_empty() {
                return Err(CorpusError::EmptyName(t.template_id.clone()));
            }
        }
        let mut meme_ids = HashSet::new();
        for m in &self.memes {
            if !meme_ids.insert(m.meme_id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    kind: "meme",
                    id: m.meme_id.clone(),
                });
            }
            if !template_ids.contains(m.template_id.as_str()) {
                return Err(CorpusError::DanglingTemplate {
                    meme_id: m.meme_id.clone(),
                    template_id: m.template_id.clone(),
                });
            }
            if m.image.trim().is_empty() {
                return Err(CorpusError::EmptyImage(m.meme_id.clone()));
            }
        }
        if let Some(split) = &self.split_assignment {
            for m in &self.memes {
                if !split.contains_key(&m.meme_id) {
                    return Err(CorpusError::IncompleteSplit(m.meme_id.clone()));
                }
            }
            if let Some(extra) = split.keys().find(|id| !meme_ids.contains(id.as_str())) {
                return Err(CorpusError::UnknownSplitMeme(extra.clone()));
            }
        }
        Ok(())
    }

    pub fn template(&self, template_id: &str) -> Option<&TemplateRecord> {
        self.templates.iter().find(|t| t.template_id == template_id)
    }

    pub fn template_index(&self) -> HashMap<&str, &TemplateRecord> {
        self.templates
            .iter()
            .map(|t| (t.template_id.as_str(), t))
            .collect()
    }

    pub fn meme(&self, meme_id: &str) -> Option<&MemeRecord> {
        self.memes.iter().find(|m| m.meme_id == meme_id)
    }

    /// Memes assigned to `split`; empty when no split is present.
    pub fn memes_in(&self, split: Split) -> Vec<&MemeRecord> {
        match &self.split_assignment {
            Some(assign) => self
                .memes
                .iter()
                .filter(|m| assign.get(&m.meme_id) == Some(&split))
                .collect(),
            None => Vec::new(),
        }
    }

    /// Writes `memes.jsonl`, `templates.jsonl` and (when present) `split.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir)?;
        jsonl::write(&dir.join(MEMES_FILE), &self.memes)?;
        jsonl::write(&dir.join(TEMPLATES_FILE), &self.templates)?;
        if let Some(assign) = &self.split_assignment {
            write_split(&dir.join(SPLIT_FILE), assign)?;
        }
        Ok(())
    }
}

/// Resolves a corpus location to `(memes, templates, split)` paths.
///
/// `path` may be a directory holding the standard file names, or the meme
/// manifest itself with `templates.jsonl` as a sibling.
pub fn manifest_paths(path: &Path) -> (PathBuf, PathBuf, PathBuf) {
    if path.is_dir() {
        (
            path.join(MEMES_FILE),
            path.join(TEMPLATES_FILE),
            path.join(SPLIT_FILE),
        )
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        (
            path.to_path_buf(),
            dir.join(TEMPLATES_FILE),
            dir.join(SPLIT_FILE),
        )
    }
}

/// Loads and validates a corpus. A `split.jsonl` next to the manifest is picked up when present.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let (memes_path, templates_path, split_path) = manifest_paths(path);
    for p in [&memes_path, &templates_path] {
        if !p.is_file() {
            return Err(CorpusError::MissingFile(p.clone()));
        }
    }
    let templates: Vec<TemplateRecord> = jsonl::read(&templates_path)?;
    let memes: Vec<MemeRecord> = jsonl::read(&memes_path)?;
    let mut corpus = Corpus::new(templates, memes)?;
    if split_path.is_file() {
        let rows: Vec<SplitRow> = jsonl::read(&split_path)?;
        let mut assign = BTreeMap::new();
        for row in rows {
            if assign.insert(row.meme_id.clone(), row.split).is_some() {
                return Err(CorpusError::DuplicateId {
                    kind: "split row",
                    id: row.meme_id,
                });
            }
        }
        corpus.split_assignment = Some(assign);
        corpus.validate()?;
    }
    Ok(corpus)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn template(id: &str, name: &str) -> TemplateRecord {
        TemplateRecord {
            template_id: id.into(),
            name: name.into(),
            about_context: format!("About {name}"),
            base_image: format!("templates/{id}.png"),
        }
    }

    pub fn meme(id: &str, template: &str, title: &str, text: &str) -> MemeRecord {
        MemeRecord {
            meme_id: id.into(),
            template_id: template.into(),
            title: title.into(),
            image: format!("memes/{id}.png"),
            embedded_text: text.into(),
            views: None,
            upvotes: None,
            downvotes: None,
        }
    }

    pub fn small() -> Corpus {
        Corpus::new(
            vec![template("t1", "Futurama Fry"), template("t2", "Success Kid")],
            vec![
                meme("m1", "t1", "not sure if", "not sure if serious"),
                meme("m2", "t1", "monday", "not sure if monday or friday"),
                meme("m3", "t2", "win", "finally fixed the bug"),
                meme("m4", "t2", "yes", "found the missing sock"),
            ],
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    fn write_manifest(dir: &Path, memes: &[&str], templates: &[&str]) {
        std::fs::write(dir.join(MEMES_FILE), memes.join("\n")).unwrap();
        std::fs::write(dir.join(TEMPLATES_FILE), templates.join("\n")).unwrap();
    }

    const T1: &str = r#"{"template_id":"t1","name":"Futurama Fry","about_context":"","base_image":"t1.png"}"#;
    const T2: &str = r#"{"template_id":"t2","name":"Success Kid","about_context":"A baby","base_image":"t2.png"}"#;

    fn meme_line(id: &str, t: &str) -> String {
        format!(
            r#"{{"meme_id":"{id}","template_id":"{t}","title":"x","image":"{id}.png","embedded_text":"a b c","views":10}}"#
        )
    }

    #[test]
    fn loads_two_templates_four_memes() {
        let dir = tempfile::tempdir().unwrap();
        let memes: Vec<String> = ["m1", "m2", "m3", "m4"]
            .iter()
            .enumerate()
            .map(|(i, id)| meme_line(id, if i < 2 { "t1" } else { "t2" }))
            .collect();
        let refs: Vec<&str> = memes.iter().map(String::as_str).collect();
        write_manifest(dir.path(), &refs, &[T1, T2]);
        let corpus = load_corpus(dir.path()).unwrap();
        assert_eq!((corpus.templates.len(), corpus.memes.len()), (2, 4));
        assert_eq!(corpus.memes[0].views, Some(10));
        // manifest file path form resolves the sibling templates file
        let again = load_corpus(&dir.path().join(MEMES_FILE)).unwrap();
        assert_eq!(again, corpus);
    }

    #[test]
    fn dangling_template_names_the_meme() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(dir.path(), &[&meme_line("m9", "nope")], &[T1]);
        match load_corpus(dir.path()) {
            Err(CorpusError::DanglingTemplate { meme_id, .. }) => assert_eq!(meme_id, "m9"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_meme_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(
            dir.path(),
            &[&meme_line("m1", "t1"), &meme_line("m1", "t1")],
            &[T1],
        );
        assert!(matches!(
            load_corpus(dir.path()),
            Err(CorpusError::DuplicateId { kind: "meme", .. })
        ));
    }

    #[test]
    fn malformed_row_reports_index() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(
            dir.path(),
            &[&meme_line("m1", "t1"), r#"{"meme_id":"m2"}"#],
            &[T1],
        );
        match load_corpus(dir.path()) {
            Err(CorpusError::MalformedRow { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_corpus(dir.path()),
            Err(CorpusError::MissingFile(_))
        ));
    }

    #[test]
    fn save_load_round_trip_with_split() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = split_corpus(&small(), 0.5, 3).unwrap();
        corpus.save(dir.path()).unwrap();
        assert_eq!(load_corpus(dir.path()).unwrap(), corpus);
    }
}
