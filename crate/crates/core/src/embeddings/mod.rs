//! Encoder interface, the deterministic hashing encoder and the on-disk
//! embedding store shared by matching, retrieval and fine-tuning.

mod hash;
mod pixels;
mod store;

use serde::{Deserialize, Serialize};

pub use hash::{HashEncoder, ImageMode};
pub(crate) use hash::fnv1a;
pub use pixels::{load_image, thumbnail_features, THUMBNAIL_SIDE};
pub use store::{load_store, normalize_rows, save_store, sidecar_path, EmbeddingStore, StoreMeta};

use crate::tokenize::{Tokenizer, Whitespace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
    JointConcat,
    JointFusion,
}

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("nothing to encode")]
    Empty,
    #[error("image {reference:?} could not be loaded: {message}")]
    Image { reference: String, message: String },
    #[error("encoder failure: {0}")]
    Encoder(String),
    #[error("row {id:?} has zero norm")]
    ZeroNorm { id: String },
    #[error("ids and rows disagree: {ids} ids, {rows} rows")]
    RowCount { ids: usize, rows: usize },
    #[error("row {row} has {found} values, expected {expected}")]
    RowWidth { row: usize, expected: usize, found: usize },
    #[error("corrupt store header in {0}")]
    CorruptHeader(String),
    #[error("store {path}: sidecar says {sidecar}, payload says {payload}")]
    Mismatch { path: String, sidecar: String, payload: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("sidecar {path}: {message}")]
    Sidecar { path: String, message: String },
}

/// Anything that maps images and texts into one vector space.
pub trait Encoder: Send + Sync {
    fn name(&self) -> &str;

    fn dimension(&self) -> usize;

    /// Texts longer than this many tokens are truncated before encoding.
    fn max_text_tokens(&self) -> Option<usize>;

    fn trainable(&self) -> bool {
        false
    }

    fn encode_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError>;

    /// `images` are references recorded verbatim in the corpus.
    fn encode_images(&self, images: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

/// Encodes `(id, payload)` items into an unnormalised store, preserving order.
///
/// `payload` is text for [`Modality::Text`] and an image reference for
/// [`Modality::Image`]. Overlong texts are cut to the encoder's limit and
/// their ids listed in `truncated`.
pub fn encode(items: &[(String, String)], modality: Modality, encoder: &dyn Encoder) -> Result<EmbeddingStore, EmbedError> {
    if items.is_empty() {
        return Err(EmbedError::Empty);
    }
    let mut truncated = Vec::new();
    let rows = match modality {
        Modality::Text => {
            let texts: Vec<String> = items
                .iter()
                .map(|(id, text)| match encoder.max_text_tokens() {
                    Some(limit) if Whitespace.count(text) > limit => {
                        log::warn!("{id}: text exceeds {limit} tokens and was truncated");
                        truncated.push(id.clone());
                        Whitespace.tokens(text)[..limit].join(" ")
                    }
                    _ => text.clone(),
                })
                .collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            encoder.encode_texts(&refs)?
        }
        Modality::Image => {
            let refs: Vec<&str> = items.iter().map(|(_, r)| r.as_str()).collect();
            encoder.encode_images(&refs)?
        }
        Modality::JointConcat | Modality::JointFusion => {
            return Err(EmbedError::Encoder("joint stores are built from an image and a text store".into()))
        }
    };
    if rows.len() != items.len() {
        return Err(EmbedError::Encoder(format!("{} rows for {} items", rows.len(), items.len())));
    }
    let meta = StoreMeta { encoder: encoder.name().to_string(), dimension: encoder.dimension(), modality };
    let mut store = EmbeddingStore::from_rows(items.iter().map(|(id, _)| id.clone()).collect(), &rows, meta)?;
    store.truncated = truncated;
    Ok(store)
}
