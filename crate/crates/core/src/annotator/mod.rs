//! Prompting a vision-language model for captions, embedded text and
//! literary-device labels.

pub mod client;
pub mod parse;
pub mod pipeline;
pub mod prompts;
pub mod record;
pub mod taxonomy;

pub use client::{ChatCompletionsClient, ClientError, ImagePayload, ScriptedClient, Turn, VlmClient};
pub use parse::{parse_annotation, to_response_json, ParseError, ParsedAnnotation};
pub use pipeline::{
    annotate_batch, annotate_meme, run_three_step, AnnotateError, Annotator, BatchItem, BatchOptions,
    BatchSummary, Clock, FailureRecord, FixedClock, RecordingSleeper, RetryPolicy, Sleeper, SystemClock,
    ThreadSleeper, ThreeStepOutcome,
};
pub use prompts::{prompt, render_prompt, resolve, PromptError, PromptKind, PromptTemplate, ResponseSchema};
pub use record::{load_annotations, save_annotations, AnnotationFlag, AnnotationRecord, Provenance};
pub use taxonomy::{normalize_label, DeviceSet, DeviceTaxonomy, MappedLabels, EMOTIONS, FIGMEMES_SET, FULL_SET, MAPPING_ROWS, REDUCED_SET};
