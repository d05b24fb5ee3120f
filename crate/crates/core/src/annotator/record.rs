use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};

/// Who produced an annotation and how.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub prompt_id: String,
    pub with_context: bool,
    pub timestamp: String,
}

/// Something the parser or pipeline had to normalise or drop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnnotationFlag {
    /// A scalar was found where a list of labels was expected.
    ScalarCoerced { field: String },
    /// A device word outside the full taxonomy.
    UnknownDevice { label: String },
    /// A device outside the prompt's active label set; removed from the record.
    OutOfSet { label: String },
    /// Attempts needed before the answer parsed.
    Retried { attempts: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub meme_id: String,
    pub image_caption: String,
    pub embedded_text: String,
    pub meme_caption: String,
    pub literary_devices: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotions: Option<BTreeSet<String>>,
    pub provenance: Provenance,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<AnnotationFlag>,
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, JsonlError> {
    jsonl::read(path)
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<(), JsonlError> {
    jsonl::write(path, records)
}
