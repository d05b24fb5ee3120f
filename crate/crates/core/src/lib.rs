//! Toolkit for building and evaluating templatic-meme datasets.
//!
//! The crate covers the whole offline pipeline: curating a corpus of meme
//! instances grouped by template, annotating them with a vision-language
//! model, identifying template/instance pairs, fine-tuning a dual encoder
//! contrastively, and scoring meme-to-text retrieval and caption quality.

pub mod annotator;
pub mod corpus;
pub mod embeddings;
pub mod finetune;
pub mod jsonl;
pub mod matcher;
pub mod provenance;
pub mod retrieval;
pub mod synthetic;
pub mod textmetrics;
pub mod tokenize;

pub use corpus::{Corpus, MemeRecord, Split, TemplateRecord};
pub use embeddings::{EmbeddingStore, Encoder, Modality};
pub use provenance::Provenance;
