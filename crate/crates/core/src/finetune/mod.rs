//! Contrastive fine-tuning of a dual encoder on (meme image, meme caption) pairs.

mod loss;
mod model;
mod optim;
mod schedule;
mod train;

use serde::{Deserialize, Serialize};

pub use loss::{contrastive_loss, contrastive_loss_from_similarities, similarity_gradients, LossError};
pub use model::{LinearDualEncoder, ModelSpec, PairFeatures};
pub use optim::AdamW;
pub use schedule::{lr_at, lr_at_step};
pub use train::{
    evaluate_checkpoint, load_checkpoint, pairs_from_corpus, save_checkpoint, train, EpochRecord, StepRecord, TraceFlag, TrainOutcome,
    TrainPair, TrainTrace, ValidationScores,
};

#[derive(Debug, thiserror::Error)]
pub enum FinetuneError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{pairs} training pairs cannot fill one batch of {batch}")]
    TooFewPairs { pairs: usize, batch: usize },
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Embed(#[from] crate::embeddings::EmbedError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Io(#[from] crate::jsonl::JsonlError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub warmup_epochs: f64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub effective_batch: usize,
    pub micro_batch: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub epochs: usize,
    pub temperature: f64,
    pub learnable_temperature: bool,
    pub seed: u64,
    /// Peak learning rates above this are flagged in the trace.
    pub stable_lr_limit: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 1.0,
            lr_start: 1e-6,
            lr_peak: 1e-5,
            lr_end: 1e-6,
            effective_batch: 2048,
            micro_batch: 256,
            weight_decay: 0.1,
            betas: (0.9, 0.98),
            epsilon: 1e-8,
            epochs: 20,
            temperature: 0.07,
            learnable_temperature: false,
            seed: 0,
            stable_lr_limit: 1e-4,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        let bad = |m: &str| Err(FinetuneError::Config(m.to_string()));
        if self.micro_batch == 0 || self.effective_batch == 0 || self.effective_batch % self.micro_batch != 0 {
            return bad("micro_batch must divide effective_batch");
        }
        if self.effective_batch < 2 {
            return bad("effective_batch must be at least 2");
        }
        if !(self.lr_start > 0.0 && self.lr_peak > 0.0 && self.lr_end > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.warmup_epochs < 0.0 {
            return bad("warmup_epochs must be non-negative");
        }
        Ok(())
    }

    /// Micro-batches accumulated per optimizer step.
    pub fn accumulation_steps(&self) -> usize {
        self.effective_batch / self.micro_batch
    }
}
