//! Literary-device label sets and the mapping onto the six Figmemes labels.

use std::collections::{BTreeMap, BTreeSet};

/// Every device word the toolkit recognises: the 24 words offered by the
/// captioning prompt plus the three mapping-table labels it does not list.
pub const FULL_SET: [&str; 27] = [
    "sarcasm",
    "allegory",
    "alliteration",
    "allusion",
    "amplification",
    "anagram",
    "analogy",
    "anthropomorphism",
    "antithesis",
    "chiasmus",
    "circumlocution",
    "euphemism",
    "hyperbole",
    "imagery",
    "metaphor",
    "onomatopoeia",
    "oxymoron",
    "paradox",
    "personification",
    "portmanteau",
    "pun",
    "satire",
    "simile",
    "symbolism",
    "irony",
    "exaggeration",
    "contrast",
];

/// The label set offered by the three-step labeling prompt.
pub const REDUCED_SET: [&str; 12] = [
    "irony",
    "sarcasm",
    "anthropomorphism",
    "personification",
    "contrast",
    "paradox",
    "oxymoron",
    "metaphor",
    "simile",
    "exaggeration",
    "amplification",
    "allusion",
];

pub const FIGMEMES_SET: [&str; 6] = [
    "allusion",
    "exaggeration",
    "irony",
    "anthrop",
    "metaphor",
    "contrast",
];

pub const EMOTIONS: [&str; 15] = [
    "fear",
    "anger",
    "joy",
    "sadness",
    "surprise",
    "disgust",
    "guilt",
    "contempt",
    "shame",
    "embarrassment",
    "envy",
    "jealousy",
    "love",
    "hate",
    "interest",
];

/// Mapping rows in table order. A label listed in more than one row keeps its
/// first target (only `antithesis` is affected).
pub const MAPPING_ROWS: [(&[&str], Option<&str>); 7] = [
    (&["irony", "sarcasm"], Some("irony")),
    (&["anthropomorphism", "personification"], Some("anthrop")),
    (&["contrast", "paradox", "antithesis", "oxymoron"], Some("contrast")),
    (&["metaphor", "simile"], Some("metaphor")),
    (&["exaggeration", "amplification"], Some("exaggeration")),
    (&["allusion"], Some("allusion")),
    (
        &[
            "anagram",
            "pun",
            "allegory",
            "alliteration",
            "analogy",
            "antithesis",
            "chiasmus",
            "circumlocution",
            "euphemism",
            "imagery",
            "onomatopoeia",
            "portmanteau",
            "symbolism",
            "satire",
        ],
        None,
    ),
];

/// Which label vocabulary a prompt asks the model to choose from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceSet {
    Full,
    Reduced,
    Figmemes,
}

impl DeviceSet {
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            DeviceSet::Full => &FULL_SET,
            DeviceSet::Reduced => &REDUCED_SET,
            DeviceSet::Figmemes => &FIGMEMES_SET,
        }
    }

    pub fn contains(self, label: &str) -> bool {
        self.labels().contains(&label)
    }
}

#[derive(Debug, Clone)]
pub struct DeviceTaxonomy {
    mapping: BTreeMap<&'static str, Option<&'static str>>,
}

/// Result of projecting a label set onto the Figmemes labels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MappedLabels {
    pub labels: BTreeSet<String>,
    /// Source labels with no mapping entry; skipped.
    pub unknown: Vec<String>,
}

impl Default for DeviceTaxonomy {
    fn default() -> Self {
        let mut mapping = BTreeMap::new();
        for (sources, target) in MAPPING_ROWS {
            for s in sources {
                mapping.entry(*s).or_insert(target);
            }
        }
        // target labels map to themselves so the projection is idempotent
        for t in FIGMEMES_SET {
            mapping.entry(t).or_insert(Some(t));
        }
        Self { mapping }
    }
}

impl DeviceTaxonomy {
    /// `None` when the label has no entry, `Some(None)` when it is explicitly dropped.
    pub fn target(&self, label: &str) -> Option<Option<&'static str>> {
        self.mapping.get(label).copied()
    }

    pub fn map_labels<I, S>(&self, devices: I) -> MappedLabels
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out = MappedLabels::default();
        for d in devices {
            let d = d.as_ref();
            match self.target(d) {
                Some(Some(t)) => {
                    out.labels.insert(t.to_string());
                }
                Some(None) => {}
                None => {
                    if !out.unknown.iter().any(|u| u == d) {
                        log::warn!("no figmemes mapping for label {d:?}");
                        out.unknown.push(d.to_string());
                    }
                }
            }
        }
        out
    }
}

/// Canonical form of a device or emotion word as emitted by a model.
pub fn normalize_label(raw: &str) -> String {
    raw.trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// True for the model's explicit "no label" answers.
pub fn is_none_label(label: &str) -> bool {
    matches!(label, "" | "none" | "n/a" | "null")
}
