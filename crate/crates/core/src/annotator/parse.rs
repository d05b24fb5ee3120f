//! Lenient extraction of the JSON answer from free-form model output.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{Map, Value};

use super::prompts::{
    ResponseSchema, KEY_DEVICES, KEY_EMBEDDED_TEXT, KEY_EMOTIONS, KEY_EXPLANATION,
    KEY_IMAGE_CAPTION, KEY_MEME_CAPTION,
};
use super::record::{AnnotationFlag, AnnotationRecord};
use super::taxonomy::{is_none_label, normalize_label, DeviceSet};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no JSON object found in response")]
    NoJsonObject,
    #[error("required field {0:?} missing from response")]
    MissingField(String),
}

/// Fields recovered from one response, before provenance is attached.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedAnnotation {
    pub image_caption: String,
    pub embedded_text: String,
    pub meme_caption: String,
    pub explanation: String,
    pub literary_devices: BTreeSet<String>,
    pub emotions: Option<BTreeSet<String>>,
    pub flags: Vec<AnnotationFlag>,
}

/// Lowercases a key and treats `_`, `-` and runs of whitespace as one space.
pub fn normalize_key(key: &str) -> String {
    key.to_lowercase()
        .replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn canonical_key(key: &str) -> String {
    let k = normalize_key(key);
    match k.as_str() {
        "literary devices" => KEY_DEVICES.to_string(),
        "emotions" => KEY_EMOTIONS.to_string(),
        _ => k,
    }
}

/// Returns the first balanced `{...}` span that parses as a JSON object.
pub fn extract_json_object(raw: &str) -> Option<Map<String, Value>> {
    let bytes = raw.as_bytes();
    let mut start = 0;
    while let Some(off) = raw[start..].find('{') {
        let open = start + off;
        if let Some(close) = matching_brace(bytes, open) {
            let span = &raw[open..=close];
            if let Some(obj) = parse_object(span) {
                return Some(obj);
            }
        }
        start = open + 1;
    }
    None
}

fn matching_brace(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_object(span: &str) -> Option<Map<String, Value>> {
    if let Ok(Value::Object(m)) = serde_json::from_str(span) {
        return Some(m);
    }
    match serde_json::from_str(&strip_trailing_commas(span)) {
        Ok(Value::Object(m)) => Some(m),
        _ => None,
    }
}

fn strip_trailing_commas(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut in_str = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            out.push(c);
            continue;
        }
        if c == '"' {
            in_str = true;
        }
        if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn text_value(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(text_value).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}

fn label_list(field: &str, v: &Value, flags: &mut Vec<AnnotationFlag>) -> Vec<String> {
    let raw: Vec<String> = match v {
        Value::Null => Vec::new(),
        Value::Array(items) => items.iter().map(text_value).collect(),
        other => {
            flags.push(AnnotationFlag::ScalarCoerced { field: field.to_string() });
            text_value(other).split(',').map(str::to_string).collect()
        }
    };
    raw.iter()
        .map(|s| normalize_label(s))
        .filter(|s| !is_none_label(s))
        .collect()
}

/// Parses a response against `schema`.
///
/// Device words outside the full taxonomy are kept and flagged; the caller
/// decides whether to restrict them to the prompt's label set.
pub fn parse_annotation(raw: &str, schema: &ResponseSchema) -> Result<ParsedAnnotation, ParseError> {
    let obj = extract_json_object(raw).ok_or(ParseError::NoJsonObject)?;
    let fields: BTreeMap<String, &Value> = obj.iter().map(|(k, v)| (canonical_key(k), v)).collect();
    for key in &schema.required {
        if !fields.contains_key(key) {
            return Err(ParseError::MissingField(key.clone()));
        }
    }
    let text = |k: &str| fields.get(k).map(|v| text_value(v)).unwrap_or_default();
    let mut out = ParsedAnnotation {
        image_caption: text(KEY_IMAGE_CAPTION),
        embedded_text: text(KEY_EMBEDDED_TEXT),
        meme_caption: text(KEY_MEME_CAPTION),
        explanation: text(KEY_EXPLANATION),
        ..Default::default()
    };
    if let Some(v) = fields.get(KEY_DEVICES) {
        for label in label_list(KEY_DEVICES, v, &mut out.flags) {
            if !DeviceSet::Full.contains(&label) && !DeviceSet::Figmemes.contains(&label) {
                out.flags.push(AnnotationFlag::UnknownDevice { label: label.clone() });
            }
            out.literary_devices.insert(label);
        }
    }
    if let Some(v) = fields.get(KEY_EMOTIONS) {
        out.emotions = Some(label_list(KEY_EMOTIONS, v, &mut out.flags).into_iter().collect());
    }
    Ok(out)
}

/// Serialises a record in the captioning answer format.
pub fn to_response_json(record: &AnnotationRecord) -> String {
    let mut m = Map::new();
    m.insert(KEY_IMAGE_CAPTION.into(), record.image_caption.clone().into());
    m.insert(KEY_EMBEDDED_TEXT.into(), record.embedded_text.clone().into());
    m.insert(KEY_MEME_CAPTION.into(), record.meme_caption.clone().into());
    m.insert(
        KEY_DEVICES.into(),
        record.literary_devices.iter().cloned().collect::<Vec<_>>().into(),
    );
    if let Some(e) = &record.emotions {
        m.insert(KEY_EMOTIONS.into(), e.iter().cloned().collect::<Vec<_>>().into());
    }
    Value::Object(m).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotator::prompts::prompt;
    use crate::annotator::record::Provenance;
    use crate::annotator::taxonomy::{EMOTIONS, FULL_SET};
    use proptest::prelude::*;

    fn baseline() -> ResponseSchema {
        prompt("figmemes-baseline").unwrap().response_schema
    }

    fn five_task() -> ResponseSchema {
        prompt("gpt4o-5task-context").unwrap().response_schema
    }

    const BASELINE_ANSWER: &str =
        r#"{"detected text":"X","explanation":"Y","literary device":["irony"]}"#;

    #[test]
    fn plain_object() {
        let p = parse_annotation(BASELINE_ANSWER, &baseline()).unwrap();
        assert_eq!(p.embedded_text, "X");
        assert_eq!(p.explanation, "Y");
        assert_eq!(p.literary_devices, BTreeSet::from(["irony".to_string()]));
        assert!(p.flags.is_empty());
    }

    #[test]
    fn fenced_with_leading_prose() {
        let wrapped = format!("Sure! Here is my analysis {{of the meme}}.\n```json\n{BASELINE_ANSWER}\n```\nHope it helps.");
        assert_eq!(
            parse_annotation(&wrapped, &baseline()).unwrap(),
            parse_annotation(BASELINE_ANSWER, &baseline()).unwrap()
        );
    }

    #[test]
    fn scalar_device_is_coerced() {
        let schema = ResponseSchema {
            required: vec![KEY_DEVICES.into()],
            list_fields: vec![KEY_DEVICES.into()],
            devices: DeviceSet::Figmemes,
        };
        let p = parse_annotation(r#"{"literary device": "irony"}"#, &schema).unwrap();
        assert_eq!(p.literary_devices, BTreeSet::from(["irony".to_string()]));
        assert_eq!(p.flags, vec![AnnotationFlag::ScalarCoerced { field: KEY_DEVICES.into() }]);
    }

    #[test]
    fn missing_field_is_named() {
        let err = parse_annotation(r#"{"detected text":"X"}"#, &baseline()).unwrap_err();
        assert_eq!(err, ParseError::MissingField("explanation".into()));
    }

    #[test]
    fn garbage_has_no_object() {
        assert_eq!(parse_annotation("I cannot help with that.", &baseline()), Err(ParseError::NoJsonObject));
        assert_eq!(parse_annotation("{not json}", &baseline()), Err(ParseError::NoJsonObject));
    }

    #[test]
    fn keys_are_normalised_and_trailing_commas_tolerated() {
        let raw = r#"{"Visual_Elaboration": "a dog", "Detected-Text": "hi", "Meaning of the Meme": "m", "Literary Devices": ["Irony.", "None",], "Emotions": "joy, anger",}"#;
        let p = parse_annotation(raw, &five_task()).unwrap();
        assert_eq!(p.image_caption, "a dog");
        assert_eq!(p.literary_devices, BTreeSet::from(["irony".to_string()]));
        assert_eq!(p.emotions.unwrap(), BTreeSet::from(["joy".to_string(), "anger".to_string()]));
    }

    #[test]
    fn unknown_devices_are_kept_and_flagged() {
        let raw = r#"{"detected text":"","explanation":"","literary device":["meme magic","irony"]}"#;
        let p = parse_annotation(raw, &baseline()).unwrap();
        assert!(p.literary_devices.contains("meme magic"));
        assert_eq!(p.flags, vec![AnnotationFlag::UnknownDevice { label: "meme magic".into() }]);
    }

    #[test]
    fn none_answer_is_empty() {
        let raw = r#"{"detected text":"","explanation":"","literary device":"None"}"#;
        assert!(parse_annotation(raw, &baseline()).unwrap().literary_devices.is_empty());
    }

    fn text() -> impl Strategy<Value = String> {
        "[ -~]{0,40}"
    }

    proptest! {
        #[test]
        fn serialised_records_round_trip(
            image_caption in text(),
            embedded_text in text(),
            meme_caption in text(),
            devices in proptest::sample::subsequence(FULL_SET.to_vec(), 0..5),
            emotions in proptest::option::of(proptest::sample::subsequence(EMOTIONS.to_vec(), 0..3)),
        ) {
            let record = AnnotationRecord {
                meme_id: "m".into(),
                image_caption,
                embedded_text,
                meme_caption,
                literary_devices: devices.iter().map(|s| s.to_string()).collect(),
                emotions: emotions.map(|e| e.iter().map(|s| s.to_string()).collect()),
                provenance: Provenance { model: "x".into(), prompt_id: "p".into(), with_context: false, timestamp: "t".into() },
                raw_response: String::new(),
                flags: Vec::new(),
            };
            let p = parse_annotation(&to_response_json(&record), &five_task()).unwrap();
            prop_assert_eq!(p.image_caption, record.image_caption);
            prop_assert_eq!(p.embedded_text, record.embedded_text);
            prop_assert_eq!(p.meme_caption, record.meme_caption);
            prop_assert_eq!(p.literary_devices, record.literary_devices);
            prop_assert_eq!(p.emotions, record.emotions);
        }
    }
}
