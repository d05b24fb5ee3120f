//! Versioned prompt registry and slot rendering.

use serde::{Deserialize, Serialize};

use super::taxonomy::DeviceSet;

pub const REGISTRY_VERSION: u32 = 1;

/// Marker substituted by [`render_prompt`].
pub const SLOT: &str = "{}";

pub const STAGE_MULTIPLE_CHOICE: &str = "<Multiple Choice> Please select one or multiple labels from the above list that are applied to the meme:";
pub const STAGE_EXTRACTION: &str = "<Extraction of answer> Extract the suitable labels for the input meme and the multiple choice question above:";
pub const STAGE_COMPARISON: &str = "<Choice by choice comparison> Compare each label with the meme and decide if this label could explain the meme:";
pub const STAGE_FINAL: &str = "Finally output your answer in the format:\n{\n\"literary device\":[\"allusion\", ...]\n}";

const RESPONSE_FORMAT_5TASK: &str = include_str!("../../prompts/response-format-5task.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    ZeroShot5task,
    ThreeStepReasoning,
    FewShot,
    FigmemesBaseline,
}

/// What the single `{}` slot of a prompt is filled with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    TemplateContext,
    OcrText,
}

/// JSON keys expected in the model's answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseSchema {
    pub required: Vec<String>,
    /// Keys whose value is a list of labels; a scalar is accepted and coerced.
    pub list_fields: Vec<String>,
    pub devices: DeviceSet,
}

pub const KEY_IMAGE_CAPTION: &str = "visual elaboration";
pub const KEY_EMBEDDED_TEXT: &str = "detected text";
pub const KEY_MEME_CAPTION: &str = "meaning of the meme";
pub const KEY_EXPLANATION: &str = "explanation";
pub const KEY_DEVICES: &str = "literary device";
pub const KEY_EMOTIONS: &str = "emotion";

impl ResponseSchema {
    fn five_task() -> Self {
        Self {
            required: [KEY_IMAGE_CAPTION, KEY_EMBEDDED_TEXT, KEY_MEME_CAPTION, KEY_DEVICES]
                .map(String::from)
                .to_vec(),
            list_fields: [KEY_DEVICES, KEY_EMOTIONS].map(String::from).to_vec(),
            devices: DeviceSet::Full,
        }
    }

    fn devices_only(devices: DeviceSet) -> Self {
        Self {
            required: vec![KEY_DEVICES.into()],
            list_fields: vec![KEY_DEVICES.into()],
            devices,
        }
    }

    fn baseline() -> Self {
        Self {
            required: [KEY_EMBEDDED_TEXT, KEY_EXPLANATION, KEY_DEVICES].map(String::from).to_vec(),
            list_fields: vec![KEY_DEVICES.into()],
            devices: DeviceSet::Figmemes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub prompt_id: String,
    pub version: u32,
    pub kind: PromptKind,
    pub body: String,
    pub slot: Option<SlotKind>,
    pub response_schema: ResponseSchema,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PromptError {
    #[error("prompt {0} requires a value for its slot")]
    MissingContext(String),
    #[error("prompt {0} has no slot but a context was supplied")]
    UnexpectedContext(String),
    #[error("unknown prompt id {0:?}")]
    UnknownPrompt(String),
    #[error("prompt {id} must contain exactly {expected} slot(s), found {found}")]
    BadSlotCount { id: String, expected: usize, found: usize },
}

impl PromptTemplate {
    pub fn requires_context(&self) -> bool {
        self.slot.is_some()
    }

    /// True when the slot carries the template's knowledge-base context.
    pub fn with_context(&self) -> bool {
        self.slot == Some(SlotKind::TemplateContext)
    }

    pub fn check(&self) -> Result<(), PromptError> {
        let found = self.body.matches(SLOT).count();
        let expected = usize::from(self.slot.is_some());
        if found != expected {
            return Err(PromptError::BadSlotCount {
                id: self.prompt_id.clone(),
                expected,
                found,
            });
        }
        Ok(())
    }
}

/// Substitutes the slot verbatim. Context must be given iff the prompt has a slot.
pub fn render_prompt(template: &PromptTemplate, context: Option<&str>) -> Result<String, PromptError> {
    match (template.slot, context) {
        (Some(_), Some(ctx)) => Ok(template.body.replacen(SLOT, ctx, 1)),
        (Some(_), None) => Err(PromptError::MissingContext(template.prompt_id.clone())),
        (None, Some(_)) => Err(PromptError::UnexpectedContext(template.prompt_id.clone())),
        (None, None) => Ok(template.body.clone()),
    }
}

struct Entry {
    id: &'static str,
    kind: PromptKind,
    text: &'static str,
    slot: Option<SlotKind>,
}

macro_rules! prompt_file {
    ($name:literal) => {
        include_str!(concat!("../../prompts/", $name, ".txt"))
    };
}

const ENTRIES: &[Entry] = &[
    Entry { id: "gpt4o-5task-context", kind: PromptKind::ZeroShot5task, text: prompt_file!("gpt4o-5task-context"), slot: Some(SlotKind::TemplateContext) },
    Entry { id: "gpt4o-5task-nocontext", kind: PromptKind::ZeroShot5task, text: prompt_file!("gpt4o-5task-nocontext"), slot: None },
    Entry { id: "llava-5task-context", kind: PromptKind::ZeroShot5task, text: prompt_file!("llava-5task-context"), slot: Some(SlotKind::TemplateContext) },
    Entry { id: "llava-5task-nocontext", kind: PromptKind::ZeroShot5task, text: prompt_file!("llava-5task-nocontext"), slot: None },
    Entry { id: "figmemes-baseline", kind: PromptKind::FigmemesBaseline, text: prompt_file!("figmemes-baseline"), slot: None },
    Entry { id: "figmemes-few-shot", kind: PromptKind::FewShot, text: prompt_file!("figmemes-few-shot"), slot: Some(SlotKind::OcrText) },
    Entry { id: "three-step-definitions-nocontext", kind: PromptKind::ThreeStepReasoning, text: prompt_file!("three-step-definitions"), slot: None },
    Entry { id: "three-step-definitions-context", kind: PromptKind::ThreeStepReasoning, text: prompt_file!("three-step-definitions-context"), slot: Some(SlotKind::TemplateContext) },
    Entry { id: "three-step-12-context", kind: PromptKind::ThreeStepReasoning, text: prompt_file!("three-step-12-context"), slot: Some(SlotKind::TemplateContext) },
    Entry { id: "three-step-12-nocontext", kind: PromptKind::ThreeStepReasoning, text: prompt_file!("three-step-12-nocontext"), slot: None },
];

/// All shipped prompt ids.
pub fn prompt_ids() -> impl Iterator<Item = &'static str> {
    ENTRIES.iter().map(|e| e.id)
}

/// Looks up a shipped prompt by id.
///
/// Captioning prompts get the JSON response-format line appended so that
/// their answers can be parsed; the other prompts already ask for JSON.
pub fn prompt(id: &str) -> Result<PromptTemplate, PromptError> {
    let e = ENTRIES
        .iter()
        .find(|e| e.id == id)
        .ok_or_else(|| PromptError::UnknownPrompt(id.to_string()))?;
    let text = e.text.trim_end();
    let (body, schema) = match e.kind {
        PromptKind::ZeroShot5task => (format!("{text}\n{}", RESPONSE_FORMAT_5TASK.trim_end()), ResponseSchema::five_task()),
        PromptKind::FigmemesBaseline => (text.to_string(), ResponseSchema::baseline()),
        PromptKind::FewShot => (text.to_string(), ResponseSchema::devices_only(DeviceSet::Figmemes)),
        PromptKind::ThreeStepReasoning => {
            let set = if e.id.starts_with("three-step-12") { DeviceSet::Reduced } else { DeviceSet::Figmemes };
            (text.to_string(), ResponseSchema::devices_only(set))
        }
    };
    let t = PromptTemplate {
        prompt_id: e.id.to_string(),
        version: REGISTRY_VERSION,
        kind: e.kind,
        body,
        slot: e.slot,
        response_schema: schema,
    };
    t.check()?;
    Ok(t)
}

/// Picks the `-context` / `-nocontext` variant of a prompt family, e.g. `gpt4o-5task`.
pub fn resolve(family: &str, with_context: bool) -> Result<PromptTemplate, PromptError> {
    if let Ok(p) = prompt(family) {
        return Ok(p);
    }
    let suffix = if with_context { "context" } else { "nocontext" };
    prompt(&format!("{family}-{suffix}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_entry_is_well_formed() {
        for id in prompt_ids() {
            let p = prompt(id).unwrap();
            assert!(!p.response_schema.required.is_empty(), "{id}");
            assert_eq!(p.with_context(), id.ends_with("-context"), "{id}");
        }
    }

    #[test]
    fn context_is_inlined_verbatim() {
        let p = prompt("gpt4o-5task-context").unwrap();
        let out = render_prompt(&p, Some("Futurama Fry is an image macro")).unwrap();
        assert!(out.starts_with("Here is the context of the meme: Futurama Fry is an image macro. First, based the given context"));
        assert_eq!(out.replace("Futurama Fry is an image macro", SLOT), p.body);
    }

    #[test]
    fn missing_context_is_an_error() {
        let p = prompt("gpt4o-5task-context").unwrap();
        assert_eq!(render_prompt(&p, None), Err(PromptError::MissingContext(p.prompt_id.clone())));
    }

    #[test]
    fn context_free_prompt_renders_unchanged() {
        let p = prompt("figmemes-baseline").unwrap();
        assert_eq!(render_prompt(&p, None).unwrap(), p.body);
        assert!(matches!(render_prompt(&p, Some("x")), Err(PromptError::UnexpectedContext(_))));
    }

    #[test]
    fn resolve_families() {
        assert_eq!(resolve("gpt4o-5task", true).unwrap().prompt_id, "gpt4o-5task-context");
        assert_eq!(resolve("three-step-12", false).unwrap().prompt_id, "three-step-12-nocontext");
        assert_eq!(resolve("figmemes-baseline", true).unwrap().prompt_id, "figmemes-baseline");
        assert!(resolve("nope", true).is_err());
    }

    #[test]
    fn captioning_prompt_lists_the_device_vocabulary() {
        let body = prompt("gpt4o-5task-nocontext").unwrap().body;
        for d in &super::super::taxonomy::FULL_SET[..24] {
            assert!(body.contains(d), "{d}");
        }
    }
}
