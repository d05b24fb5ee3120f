//! Training loop, trace and checkpoints.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{LinearDualEncoder, ModelSpec, PairFeatures};
use super::optim::AdamW;
use super::schedule::lr_at_step;
use super::{FinetuneConfig, FinetuneError};
use crate::annotator::AnnotationRecord;
use crate::corpus::{Corpus, Split};
use crate::embeddings::{load_image, normalize_rows, EmbeddingStore, Modality, StoreMeta};
use crate::jsonl::{self, Appender};
use crate::provenance::Provenance;
use crate::retrieval::{evaluate, evaluate_stores, DirectionScores, EvalConfig, GoldMap, RetrievalReport};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const ENCODER_FILE: &str = "encoder.json";
pub const CONFIG_FILE: &str = "config.json";
pub const TRACE_FILE: &str = "trace.jsonl";

const VALIDATION_KS: [usize; 3] = [1, 5, 10];

/// A meme image and the caption it is trained against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPair {
    pub id: String,
    pub image: String,
    pub caption: String,
}

/// (image, meme caption) pairs for the memes in `split`, or all memes.
/// Memes without an annotation are skipped.
pub fn pairs_from_corpus(corpus: &Corpus, annotations: &[AnnotationRecord], split: Option<Split>) -> Vec<TrainPair> {
    let by_id: HashMap<&str, &AnnotationRecord> = annotations.iter().map(|a| (a.meme_id.as_str(), a)).collect();
    let memes: Vec<_> = match split {
        Some(s) => corpus.memes_in(s),
        None => corpus.memes.iter().collect(),
    };
    let mut out = Vec::with_capacity(memes.len());
    for m in memes {
        match by_id.get(m.meme_id.as_str()) {
            Some(a) => out.push(TrainPair { id: m.meme_id.clone(), image: m.image.clone(), caption: a.meme_caption.clone() }),
            None => log::warn!("{}: no annotation, left out of training", m.meme_id),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationScores {
    pub text2meme: DirectionScores,
    pub meme2text: DirectionScores,
}

impl ValidationScores {
    /// Mean of the two R@1 values.
    pub fn mean_r1(&self) -> f64 {
        (self.text2meme.at(1) + self.meme2text.at(1)) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub micro_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "flag", rename_all = "snake_case")]
pub enum TraceFlag {
    /// The configured peak learning rate is above the range known to train stably.
    LrAboveStableRange { lr_peak: f64, limit: f64 },
    /// Validation R@1 fell below the untrained encoder's.
    ValidationRegression { epoch: usize, mean_r1: f64, baseline_mean_r1: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub baseline: Option<ValidationScores>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: Option<usize>,
    pub flags: Vec<TraceFlag>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", content = "record", rename_all = "snake_case")]
enum TraceLine {
    Baseline(ValidationScores),
    Step(StepRecord),
    Epoch(EpochRecord),
    Summary { best_epoch: Option<usize>, flags: Vec<TraceFlag> },
}

impl TrainTrace {
    pub fn load(path: &Path) -> Result<Self, FinetuneError> {
        let mut t = TrainTrace::default();
        for line in jsonl::read::<TraceLine>(path)? {
            match line {
                TraceLine::Baseline(b) => t.baseline = Some(b),
                TraceLine::Step(s) => t.steps.push(s),
                TraceLine::Epoch(e) => t.epochs.push(e),
                TraceLine::Summary { best_epoch, flags } => {
                    t.best_epoch = best_epoch;
                    t.flags = flags;
                }
            }
        }
        Ok(t)
    }

    pub fn epoch_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: TrainTrace,
    /// Weights of the epoch with the best validation R@1 (the last epoch without validation data).
    pub best: LinearDualEncoder,
    pub last: LinearDualEncoder,
}

fn features(encoder: &LinearDualEncoder, pairs: &[TrainPair]) -> Result<PairFeatures, FinetuneError> {
    let mut f = PairFeatures::default();
    for p in pairs {
        f.images.push(encoder.image_features(&load_image(&p.image)?));
        f.texts.push(encoder.text_features(&p.caption));
    }
    Ok(f)
}

fn store(encoder: &LinearDualEncoder, rows: Vec<Vec<f64>>, modality: Modality) -> Result<EmbeddingStore, FinetuneError> {
    let ids = (0..rows.len()).map(|i| i.to_string()).collect();
    let rows: Vec<Vec<f32>> = rows.into_iter().map(|r| r.into_iter().map(|x| x as f32).collect()).collect();
    let meta = StoreMeta { encoder: "validation".into(), dimension: encoder.spec.dim, modality };
    Ok(normalize_rows(&EmbeddingStore::from_rows(ids, &rows, meta)?)?)
}

fn validate(encoder: &LinearDualEncoder, val: &PairFeatures) -> Result<ValidationScores, FinetuneError> {
    let images = store(encoder, val.images.iter().map(|x| encoder.embed_image(x)).collect(), Modality::Image)?;
    let texts = store(encoder, val.texts.iter().map(|x| encoder.embed_text(x)).collect(), Modality::Text)?;
    let r = evaluate_stores(&texts, &images, &GoldMap::diagonal(val.len()), &VALIDATION_KS)?;
    Ok(ValidationScores { text2meme: r.text2meme, meme2text: r.meme2text })
}

struct TraceSink(Option<Appender>);

impl TraceSink {
    fn write(&mut self, line: &TraceLine) -> Result<(), FinetuneError> {
        if let Some(a) = &mut self.0 {
            a.append(line)?;
        }
        Ok(())
    }
}

fn checkpoint_err(path: &Path, e: impl std::fmt::Display) -> FinetuneError {
    FinetuneError::Checkpoint { path: path.display().to_string(), message: e.to_string() }
}

/// Writes weights and the encoder description into `dir`.
pub fn save_checkpoint(encoder: &LinearDualEncoder, dir: &Path) -> Result<(), FinetuneError> {
    fs::create_dir_all(dir).map_err(|e| checkpoint_err(dir, e))?;
    let bytes: Vec<u8> = encoder.params().iter().flat_map(|p| p.to_le_bytes()).collect();
    fs::write(dir.join(WEIGHTS_FILE), bytes).map_err(|e| checkpoint_err(dir, e))?;
    let spec = serde_json::to_string_pretty(&encoder.spec).expect("serializable spec");
    fs::write(dir.join(ENCODER_FILE), spec).map_err(|e| checkpoint_err(dir, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<LinearDualEncoder, FinetuneError> {
    let spec_text = fs::read_to_string(dir.join(ENCODER_FILE)).map_err(|e| checkpoint_err(dir, e))?;
    let spec: ModelSpec = serde_json::from_str(&spec_text).map_err(|e| checkpoint_err(dir, e))?;
    let bytes = fs::read(dir.join(WEIGHTS_FILE)).map_err(|e| checkpoint_err(dir, e))?;
    if bytes.len() % 8 != 0 {
        return Err(checkpoint_err(dir, "weights file is not a whole number of f64 values"));
    }
    let params = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    LinearDualEncoder::from_params(spec, params).map_err(|e| checkpoint_err(dir, format!("incompatible encoder: {e}")))
}

/// Trains `encoder` contrastively on `train_pairs`.
///
/// Each optimizer step consumes `effective_batch` pairs, processed in
/// micro-batches of `micro_batch`. After every epoch the encoder is scored
/// on `val_pairs`; the best epoch by mean R@1 is kept. With `out_dir`, the
/// trace is appended as training runs and the best weights, the encoder
/// description and a config snapshot are written at the end.
pub fn train(
    config: &FinetuneConfig,
    train_pairs: &[TrainPair],
    val_pairs: &[TrainPair],
    mut encoder: LinearDualEncoder,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, FinetuneError> {
    config.validate()?;
    let steps_per_epoch = train_pairs.len() / config.effective_batch;
    if steps_per_epoch == 0 {
        return Err(FinetuneError::TooFewPairs { pairs: train_pairs.len(), batch: config.effective_batch });
    }
    let mut sink = TraceSink(None);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| checkpoint_err(dir, e))?;
        let trace_path = dir.join(TRACE_FILE);
        if trace_path.exists() {
            fs::remove_file(&trace_path).map_err(|e| checkpoint_err(dir, e))?;
        }
        sink.0 = Some(Appender::open(&trace_path)?);
    }

    let temperature = if config.learnable_temperature {
        encoder.set_temperature(config.temperature);
        None
    } else {
        Some(config.temperature)
    };
    let no_decay = [encoder.log_scale_index()];
    let train_f = features(&encoder, train_pairs)?;
    let val_f = features(&encoder, val_pairs)?;
    let mut trace = TrainTrace::default();
    if config.lr_peak > config.stable_lr_limit {
        log::warn!("peak learning rate {} exceeds the stable limit {}", config.lr_peak, config.stable_lr_limit);
        trace.flags.push(TraceFlag::LrAboveStableRange { lr_peak: config.lr_peak, limit: config.stable_lr_limit });
    }
    if val_f.len() >= 2 {
        let b = validate(&encoder, &val_f)?;
        sink.write(&TraceLine::Baseline(b.clone()))?;
        trace.baseline = Some(b);
    }

    let mut opt = AdamW::new(encoder.params().len(), config.betas, config.epsilon, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_f.len()).collect();
    let mut best: Option<(f64, LinearDualEncoder)> = None;
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(steps_per_epoch);
        for batch_idx in order.chunks_exact(config.effective_batch) {
            let batch = train_f.select(batch_idx);
            let (loss, grad, micro_steps) = encoder.loss_and_grad(&batch, temperature, config.micro_batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(FinetuneError::Diverged { step });
            }
            let lr = lr_at_step(config, step, steps_per_epoch);
            opt.step(encoder.params_mut(), &grad, lr, &no_decay);
            let rec = StepRecord { step, epoch, lr, loss, micro_steps };
            sink.write(&TraceLine::Step(rec.clone()))?;
            trace.steps.push(rec);
            losses.push(loss);
            step += 1;
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let validation = if val_f.len() >= 2 { Some(validate(&encoder, &val_f)?) } else { None };
        if let (Some(v), Some(b)) = (&validation, &trace.baseline) {
            if v.mean_r1() < b.mean_r1() {
                trace.flags.push(TraceFlag::ValidationRegression { epoch, mean_r1: v.mean_r1(), baseline_mean_r1: b.mean_r1() });
            }
        }
        let score = validation.as_ref().map_or(epoch as f64, ValidationScores::mean_r1);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, encoder.clone()));
            trace.best_epoch = Some(epoch);
        }
        log::info!("epoch {epoch}: mean loss {mean_loss:.5}");
        let rec = EpochRecord { epoch, mean_loss, validation };
        sink.write(&TraceLine::Epoch(rec.clone()))?;
        trace.epochs.push(rec);
    }
    sink.write(&TraceLine::Summary { best_epoch: trace.best_epoch, flags: trace.flags.clone() })?;
    let best = best.map(|(_, e)| e).expect("at least one epoch");

    if let Some(dir) = out_dir {
        save_checkpoint(&best, dir)?;
        #[derive(Serialize)]
        struct Snapshot<'a> {
            config: &'a FinetuneConfig,
            spec: &'a ModelSpec,
            train_pairs: usize,
            val_pairs: usize,
            provenance: Provenance,
        }
        let snap = Snapshot {
            config,
            spec: &best.spec,
            train_pairs: train_pairs.len(),
            val_pairs: val_pairs.len(),
            provenance: Provenance::new("finetune run", &(config, &best.spec)),
        };
        let text = serde_json::to_string_pretty(&snap).expect("serializable snapshot");
        fs::write(dir.join(CONFIG_FILE), text).map_err(|e| checkpoint_err(dir, e))?;
    }
    Ok(TrainOutcome { trace, best, last: encoder })
}

/// Retrieval report for a saved checkpoint.
pub fn evaluate_checkpoint(
    dir: &Path,
    corpus: &Corpus,
    annotations: &[AnnotationRecord],
    config: &EvalConfig,
) -> Result<RetrievalReport, FinetuneError> {
    let encoder = load_checkpoint(dir)?;
    Ok(evaluate(corpus, annotations, &encoder, config)?)
}
