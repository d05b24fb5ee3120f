//! Driving a client through prompts, retries and batches.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::client::{ClientError, ImagePayload, Turn, VlmClient};
use super::parse::{parse_annotation, ParseError, ParsedAnnotation};
use super::prompts::{
    render_prompt, PromptError, PromptKind, PromptTemplate, SlotKind, STAGE_COMPARISON,
    STAGE_EXTRACTION, STAGE_FINAL, STAGE_MULTIPLE_CHOICE,
};
use super::record::{AnnotationFlag, AnnotationRecord, Provenance};
use super::taxonomy::DeviceSet;
use crate::corpus::MemeRecord;
use crate::jsonl::{self, Appender, JsonlError};

/// Follow-up turn sent after an answer that could not be parsed.
pub const FORMAT_REMINDER: &str =
    "Your previous answer could not be read. Reply again with only the JSON object in the requested format.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Extra attempts after the first one.
    pub retries: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { retries: 2, initial_backoff: Duration::from_secs(1), multiplier: 2.0 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        self.initial_backoff.mul_f64(self.multiplier.powi(retry.saturating_sub(1) as i32))
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records requested delays without waiting.
#[derive(Debug, Default)]
pub struct RecordingSleeper(std::sync::Mutex<Vec<Duration>>);

impl RecordingSleeper {
    pub fn delays(&self) -> Vec<Duration> {
        self.0.lock().unwrap().clone()
    }
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, d: Duration) {
        self.0.lock().unwrap().push(d);
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> String;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> String {
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
    }
}

pub struct FixedClock(pub String);

impl Clock for FixedClock {
    fn now(&self) -> String {
        self.0.clone()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("{meme_id}: no parseable answer after {} attempts ({last})", raw_responses.len())]
    Exhausted {
        meme_id: String,
        raw_responses: Vec<String>,
        last: ParseError,
    },
    #[error("client {0} cannot hold a multi-turn conversation")]
    NotMultiTurn(String),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

/// Client plus the policies every call shares.
pub struct Annotator<'a> {
    pub client: &'a dyn VlmClient,
    pub retry: RetryPolicy,
    pub sleeper: &'a dyn Sleeper,
    pub clock: &'a dyn Clock,
}

impl<'a> Annotator<'a> {
    pub fn new(client: &'a dyn VlmClient) -> Self {
        Self { client, retry: RetryPolicy::default(), sleeper: &ThreadSleeper, clock: &SystemClock }
    }

    fn provenance(&self, prompt: &PromptTemplate) -> Provenance {
        Provenance {
            model: self.client.model().to_string(),
            prompt_id: prompt.prompt_id.clone(),
            with_context: prompt.with_context(),
            timestamp: self.clock.now(),
        }
    }

    /// Sends `first` and re-asks with a format reminder until the answer parses.
    /// Returns the parse, the verbatim answer and the number of attempts.
    fn ask_until_parsed(
        &self,
        meme_id: &str,
        image: &ImagePayload,
        first: &str,
        history: &mut Vec<Turn>,
        prompt: &PromptTemplate,
    ) -> Result<(ParsedAnnotation, String, u32), AnnotateError> {
        let mut raws = Vec::new();
        let mut text = first.to_string();
        let mut attempt = 0;
        loop {
            let raw = if self.client.supports_multi_turn() {
                self.client.send(image, &text, history)?
            } else {
                self.client.send(image, &text, &[])?
            };
            attempt += 1;
            match parse_annotation(&raw, &prompt.response_schema) {
                Ok(parsed) => {
                    history.push(Turn::user(text));
                    history.push(Turn::assistant(raw.clone()));
                    return Ok((parsed, raw, attempt));
                }
                Err(err) => {
                    raws.push(raw.clone());
                    if attempt > self.retry.retries {
                        return Err(AnnotateError::Exhausted {
                            meme_id: meme_id.to_string(),
                            raw_responses: raws,
                            last: err,
                        });
                    }
                    log::warn!("{meme_id}: unparseable answer on attempt {attempt}: {err}");
                    self.sleeper.sleep(self.retry.backoff(attempt));
                    if self.client.supports_multi_turn() {
                        history.push(Turn::user(std::mem::take(&mut text)));
                        history.push(Turn::assistant(raw));
                        text = FORMAT_REMINDER.to_string();
                    } else {
                        text = format!("{first}\n\n{FORMAT_REMINDER}");
                    }
                }
            }
        }
    }
}

fn slot_value<'m>(prompt: &PromptTemplate, meme: &'m MemeRecord, template_ctx: Option<&'m str>) -> Option<&'m str> {
    match prompt.slot {
        Some(SlotKind::TemplateContext) => template_ctx,
        Some(SlotKind::OcrText) => Some(meme.embedded_text.as_str()),
        None => None,
    }
}

/// Keeps only labels in `set`, flagging the rest.
fn restrict(labels: BTreeSet<String>, set: DeviceSet, flags: &mut Vec<AnnotationFlag>) -> BTreeSet<String> {
    let (keep, drop): (BTreeSet<_>, BTreeSet<_>) = labels.into_iter().partition(|l| set.contains(l));
    for label in drop {
        if !flags.iter().any(|f| matches!(f, AnnotationFlag::UnknownDevice { label: l } if *l == label)) {
            flags.push(AnnotationFlag::OutOfSet { label });
        }
    }
    keep
}

/// Annotates one meme with a single-answer prompt.
///
/// For the baseline prompt the explanation is stored as the meme caption.
pub fn annotate_meme(
    meme: &MemeRecord,
    template_ctx: Option<&str>,
    prompt: &PromptTemplate,
    annotator: &Annotator<'_>,
) -> Result<AnnotationRecord, AnnotateError> {
    if prompt.kind == PromptKind::ThreeStepReasoning {
        let outcome = run_three_step(meme, template_ctx, prompt, annotator)?;
        return Ok(AnnotationRecord {
            meme_id: meme.meme_id.clone(),
            image_caption: String::new(),
            embedded_text: String::new(),
            meme_caption: String::new(),
            literary_devices: outcome.devices,
            emotions: None,
            provenance: annotator.provenance(prompt),
            raw_response: outcome.raw_response,
            flags: outcome.flags,
        });
    }
    let text = render_prompt(prompt, slot_value(prompt, meme, template_ctx))?;
    let image = ImagePayload::new(&meme.image);
    let mut history = Vec::new();
    let (parsed, raw, attempts) = annotator.ask_until_parsed(&meme.meme_id, &image, &text, &mut history, prompt)?;
    let mut flags = parsed.flags;
    let literary_devices = restrict(parsed.literary_devices, prompt.response_schema.devices, &mut flags);
    if attempts > 1 {
        flags.push(AnnotationFlag::Retried { attempts });
    }
    let meme_caption = if parsed.meme_caption.is_empty() { parsed.explanation } else { parsed.meme_caption };
    Ok(AnnotationRecord {
        meme_id: meme.meme_id.clone(),
        image_caption: parsed.image_caption,
        embedded_text: parsed.embedded_text,
        meme_caption,
        literary_devices,
        emotions: parsed.emotions,
        provenance: annotator.provenance(prompt),
        raw_response: raw,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreeStepOutcome {
    pub devices: BTreeSet<String>,
    pub flags: Vec<AnnotationFlag>,
    /// The final JSON answer, verbatim.
    pub raw_response: String,
    pub transcript: Vec<Turn>,
}

/// Multiple choice, extraction and label-by-label comparison in one
/// conversation, then a final JSON answer restricted to the prompt's label set.
pub fn run_three_step(
    meme: &MemeRecord,
    template_ctx: Option<&str>,
    prompt: &PromptTemplate,
    annotator: &Annotator<'_>,
) -> Result<ThreeStepOutcome, AnnotateError> {
    let client = annotator.client;
    if !client.supports_multi_turn() {
        return Err(AnnotateError::NotMultiTurn(client.model().to_string()));
    }
    let body = render_prompt(prompt, slot_value(prompt, meme, template_ctx))?;
    let image = ImagePayload::new(&meme.image);
    let mut history = Vec::new();
    for stage in [format!("{body}\n{STAGE_MULTIPLE_CHOICE}"), STAGE_EXTRACTION.into(), STAGE_COMPARISON.into()] {
        let reply = client.send(&image, &stage, &history)?;
        history.push(Turn::user(stage));
        history.push(Turn::assistant(reply));
    }
    let (parsed, raw, attempts) = annotator.ask_until_parsed(&meme.meme_id, &image, STAGE_FINAL, &mut history, prompt)?;
    let mut flags = parsed.flags;
    let devices = restrict(parsed.literary_devices, prompt.response_schema.devices, &mut flags);
    if attempts > 1 {
        flags.push(AnnotationFlag::Retried { attempts });
    }
    Ok(ThreeStepOutcome { devices, flags, raw_response: raw, transcript: history })
}

/// One unit of batch work.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub meme: MemeRecord,
    pub template_context: Option<String>,
}

/// A meme that could not be annotated, written to the failures log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub meme_id: String,
    pub error: String,
    #[serde(default)]
    pub raw_responses: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchSummary {
    pub annotated: usize,
    pub failed: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub max_in_flight: usize,
    /// Skip memes already present in the output file.
    pub resume: bool,
    pub limit: Option<usize>,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self { max_in_flight: 4, resume: false, limit: None }
    }
}

/// Annotates `items` with at most `max_in_flight` concurrent requests.
///
/// Records are appended to `out` in input order regardless of completion
/// order; failures go to `failures`.
pub fn annotate_batch(
    items: &[BatchItem],
    prompt: &PromptTemplate,
    annotator: &Annotator<'_>,
    options: &BatchOptions,
    out: &Path,
    failures: &Path,
) -> Result<BatchSummary, AnnotateError> {
    let done: HashSet<String> = if options.resume && out.exists() {
        jsonl::read::<AnnotationRecord>(out)?.into_iter().map(|r| r.meme_id).collect()
    } else {
        if out.exists() {
            std::fs::write(out, "").map_err(|source| JsonlError::Io { path: out.to_path_buf(), source })?;
        }
        HashSet::new()
    };
    let mut summary = BatchSummary::default();
    let todo: Vec<&BatchItem> = items
        .iter()
        .filter(|it| {
            let skip = done.contains(&it.meme.meme_id);
            summary.skipped += usize::from(skip);
            !skip
        })
        .take(options.limit.unwrap_or(usize::MAX))
        .collect();

    let mut writer = Appender::open(out)?;
    let mut fail_writer: Option<Appender> = None;
    let next = AtomicUsize::new(0);
    let workers = options.max_in_flight.max(1).min(todo.len().max(1));
    let (tx, rx) = mpsc::channel();

    std::thread::scope(|scope| -> Result<(), AnnotateError> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (todo, next) = (&todo, &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = todo.get(i) else { break };
                let result = annotate_meme(&item.meme, item.template_context.as_deref(), prompt, annotator);
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut cursor = 0;
        for (i, result) in rx {
            pending.insert(i, result);
            while let Some(result) = pending.remove(&cursor) {
                match result {
                    Ok(record) => {
                        writer.append(&record)?;
                        summary.annotated += 1;
                    }
                    Err(err) => {
                        let raw_responses = match &err {
                            AnnotateError::Exhausted { raw_responses, .. } => raw_responses.clone(),
                            _ => Vec::new(),
                        };
                        log::error!("{}: {err}", todo[cursor].meme.meme_id);
                        let w = match &mut fail_writer {
                            Some(w) => w,
                            None => fail_writer.insert(Appender::open(failures)?),
                        };
                        w.append(&FailureRecord {
                            meme_id: todo[cursor].meme.meme_id.clone(),
                            error: err.to_string(),
                            raw_responses,
                        })?;
                        summary.failed += 1;
                    }
                }
                cursor += 1;
            }
        }
        Ok(())
    })?;
    Ok(summary)
}
