//! A small trainable dual encoder: one linear map per modality followed by
//! L2 normalisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::{similarity_gradients, LossError};
use crate::embeddings::{fnv1a, load_image, thumbnail_features, EmbedError, Encoder};
use crate::tokenize::{Tokenizer, Whitespace};

/// Largest logit scale a learnable temperature may reach.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dim: usize,
    /// Images are reduced to a `image_side`² RGB thumbnail.
    pub image_side: u32,
    /// Words are hashed into this many count features.
    pub text_buckets: usize,
    pub seed: u64,
    pub max_text_tokens: Option<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { dim: 32, image_side: 8, text_buckets: 128, seed: 0, max_text_tokens: Some(77) }
    }
}

impl ModelSpec {
    pub fn image_features(&self) -> usize {
        (self.image_side * self.image_side * 3) as usize
    }

    pub fn param_count(&self) -> usize {
        self.dim * (self.image_features() + self.text_buckets) + 1
    }
}

/// Precomputed inputs for a set of pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairFeatures {
    pub images: Vec<Vec<f64>>,
    pub texts: Vec<Vec<f64>>,
}

impl PairFeatures {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> PairFeatures {
        PairFeatures {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            texts: idx.iter().map(|&i| self.texts[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearDualEncoder {
    pub spec: ModelSpec,
    /// Image weights, then text weights (both row-major `dim × features`), then the log logit scale.
    params: Vec<f64>,
    name: String,
}

#[derive(Debug, Clone, Copy)]
enum Tower {
    Image,
    Text,
}

impl LinearDualEncoder {
    pub fn new(spec: ModelSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = Vec::with_capacity(spec.param_count());
        for fan_in in [spec.image_features(), spec.text_buckets] {
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid normal");
            params.extend((0..spec.dim * fan_in).map(|_| normal.sample(&mut rng)));
        }
        params.push((1.0f64 / 0.07).ln());
        let name = format!("linear-dual-{}", spec.dim);
        Self { spec, params, name }
    }

    pub fn from_params(spec: ModelSpec, params: Vec<f64>) -> Result<Self, EmbedError> {
        if params.len() != spec.param_count() {
            return Err(EmbedError::Mismatch {
                path: "weights".into(),
                sidecar: format!("{} parameters", spec.param_count()),
                payload: format!("{} parameters", params.len()),
            });
        }
        let name = format!("linear-dual-{}", spec.dim);
        Ok(Self { spec, params, name })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Index of the log logit scale in [`Self::params`].
    pub fn log_scale_index(&self) -> usize {
        self.params.len() - 1
    }

    pub fn logit_scale(&self) -> f64 {
        self.params[self.log_scale_index()].exp().min(MAX_LOGIT_SCALE)
    }

    pub fn set_temperature(&mut self, temperature: f64) {
        let i = self.log_scale_index();
        self.params[i] = (1.0 / temperature).ln();
    }

    fn block(&self, tower: Tower) -> (usize, usize) {
        let fi = self.spec.image_features();
        match tower {
            Tower::Image => (0, fi),
            Tower::Text => (self.spec.dim * fi, self.spec.text_buckets),
        }
    }

    pub fn image_features(&self, img: &image::RgbImage) -> Vec<f64> {
        thumbnail_features(img, self.spec.image_side).into_iter().map(f64::from).collect()
    }

    pub fn text_features(&self, text: &str) -> Vec<f64> {
        let mut x = vec![0.0; self.spec.text_buckets];
        let lower = text.to_lowercase();
        let mut tokens = Whitespace.tokens(&lower);
        if let Some(limit) = self.spec.max_text_tokens {
            tokens.truncate(limit);
        }
        for w in tokens {
            x[(fnv1a(self.spec.seed, w.as_bytes()) % self.spec.text_buckets as u64) as usize] += 1.0;
        }
        x
    }

    /// Pre-normalisation output `W x` and its norm.
    fn project(&self, tower: Tower, x: &[f64]) -> (Vec<f64>, f64) {
        let (off, f) = self.block(tower);
        let w = &self.params[off..off + self.spec.dim * f];
        let z: Vec<f64> = w.chunks_exact(f).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        (z, norm)
    }

    fn embed(&self, tower: Tower, x: &[f64]) -> Vec<f64> {
        let (z, norm) = self.project(tower, x);
        if norm == 0.0 {
            return z;
        }
        z.into_iter().map(|v| v / norm).collect()
    }

    pub fn embed_image(&self, x: &[f64]) -> Vec<f64> {
        self.embed(Tower::Image, x)
    }

    pub fn embed_text(&self, x: &[f64]) -> Vec<f64> {
        self.embed(Tower::Text, x)
    }

    fn backprop(&self, tower: Tower, x: &[f64], du: &[f64], grad: &mut [f64]) {
        let (z, norm) = self.project(tower, x);
        if norm == 0.0 {
            return;
        }
        let u: Vec<f64> = z.iter().map(|v| v / norm).collect();
        let dot: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
        let (off, f) = self.block(tower);
        for (k, (&uk, &duk)) in u.iter().zip(du).enumerate() {
            let dz = (duk - uk * dot) / norm;
            if dz == 0.0 {
                continue;
            }
            let row = &mut grad[off + k * f..off + (k + 1) * f];
            for (g, xv) in row.iter_mut().zip(x) {
                *g += dz * xv;
            }
        }
    }

    /// Batch loss and gradient, embedding the batch `micro_batch` rows at a
    /// time and back-propagating each slice separately.
    ///
    /// The embeddings of the whole batch are formed first, so the result
    /// matches a single pass over the full batch. With `temperature` set the
    /// logit scale is fixed; otherwise the learnable scale is used and
    /// receives a gradient. Returns `(loss, gradient, micro_steps)`.
    pub fn loss_and_grad(
        &self,
        batch: &PairFeatures,
        temperature: Option<f64>,
        micro_batch: usize,
    ) -> Result<(f64, Vec<f64>, usize), LossError> {
        let n = batch.len();
        let micro = micro_batch.max(1);
        let mut u = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for start in (0..n).step_by(micro) {
            let end = (start + micro).min(n);
            u.extend(batch.images[start..end].iter().map(|x| self.embed_image(x)));
            v.extend(batch.texts[start..end].iter().map(|x| self.embed_text(x)));
        }
        let sim: Vec<Vec<f64>> = u
            .iter()
            .map(|a| v.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
            .collect();
        let scale = match temperature {
            Some(t) => 1.0 / t,
            None => self.logit_scale(),
        };
        let (loss, g) = similarity_gradients(&sim, 1.0 / scale)?;

        let mut grad = vec![0.0; self.params.len()];
        if temperature.is_none() && self.params[self.log_scale_index()].exp() < MAX_LOGIT_SCALE {
            let i = self.log_scale_index();
            grad[i] = g.iter().zip(&sim).map(|(gr, sr)| gr.iter().zip(sr).map(|(a, b)| a * b).sum::<f64>()).sum();
        }
        let d = self.spec.dim;
        let mut steps = 0;
        for start in (0..n).step_by(micro) {
            let end = (start + micro).min(n);
            for i in start..end {
                let du: Vec<f64> = (0..d).map(|k| (0..n).map(|j| g[i][j] * v[j][k]).sum()).collect();
                self.backprop(Tower::Image, &batch.images[i], &du, &mut grad);
                let dv: Vec<f64> = (0..d).map(|k| (0..n).map(|j| g[j][i] * u[j][k]).sum()).collect();
                self.backprop(Tower::Text, &batch.texts[i], &dv, &mut grad);
            }
            steps += 1;
        }
        Ok((loss, grad, steps))
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(&self, batch: &PairFeatures, temperature: Option<f64>) -> Result<f64, LossError> {
        let u: Vec<Vec<f64>> = batch.images.iter().map(|x| self.embed_image(x)).collect();
        let v: Vec<Vec<f64>> = batch.texts.iter().map(|x| self.embed_text(x)).collect();
        let t = temperature.unwrap_or_else(|| 1.0 / self.logit_scale());
        super::loss::contrastive_loss(&u, &v, t)
    }
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

impl Encoder for LinearDualEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.spec.dim
    }

    fn max_text_tokens(&self) -> Option<usize> {
        self.spec.max_text_tokens
    }

    fn trainable(&self) -> bool {
        true
    }

    fn encode_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts.iter().map(|t| to_f32(self.embed_text(&self.text_features(t)))).collect())
    }

    fn encode_images(&self, images: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError> {
        images
            .iter()
            .map(|r| load_image(r).map(|img| to_f32(self.embed_image(&self.image_features(&img)))))
            .collect()
    }
}
