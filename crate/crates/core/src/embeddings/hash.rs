use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::pixels::{load_image, thumbnail_features, THUMBNAIL_SIDE};
use super::{EmbedError, Encoder};

/// How [`HashEncoder`] turns an image reference into a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageMode {
    /// Random projection of a 16×16 RGB thumbnail. Not normalised.
    Pixels,
    /// Hash the reference string as if it were text, so an image and a text
    /// with the same string land on the same vector.
    Reference,
}

/// Deterministic, weight-free encoder.
///
/// Texts are hashed character trigrams with random signs, normalised to unit
/// length. Images follow [`ImageMode`].
#[derive(Debug, Clone)]
pub struct HashEncoder {
    dim: usize,
    seed: u64,
    max_text_tokens: Option<usize>,
    image_mode: ImageMode,
    projection: Vec<f32>,
    name: String,
}

const NGRAM: usize = 3;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

pub(crate) fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ seed.wrapping_mul(FNV_PRIME);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

impl HashEncoder {
    pub const DEFAULT_MAX_TEXT_TOKENS: usize = 77;

    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "dimension must be positive");
        let features = (THUMBNAIL_SIDE * THUMBNAIL_SIDE * 3) as usize;
        let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("valid normal");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..dim * features).map(|_| normal.sample(&mut rng) as f32).collect();
        Self {
            dim,
            seed,
            max_text_tokens: Some(Self::DEFAULT_MAX_TEXT_TOKENS),
            image_mode: ImageMode::Pixels,
            projection,
            name: format!("hash-{dim}-{seed}"),
        }
    }

    pub fn with_max_text_tokens(mut self, limit: Option<usize>) -> Self {
        self.max_text_tokens = limit;
        self
    }

    pub fn with_image_mode(mut self, mode: ImageMode) -> Self {
        self.image_mode = mode;
        if mode == ImageMode::Reference {
            self.name = format!("hash-ref-{}-{}", self.dim, self.seed);
        }
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        let padded: Vec<char> = format!(" {} ", text.to_lowercase()).chars().collect();
        let mut v = vec![0f32; self.dim];
        let mut buf = String::new();
        let mut add = |gram: &str| {
            let h = fnv1a(self.seed, gram.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        };
        if padded.len() < NGRAM {
            add(&padded.iter().collect::<String>());
        }
        for w in padded.windows(NGRAM) {
            buf.clear();
            buf.extend(w);
            add(&buf);
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            // Every gram cancelled out; fall back to a single hashed bucket.
            v[(fnv1a(self.seed, text.as_bytes()) % self.dim as u64) as usize] = 1.0;
        }
        v
    }

    pub fn embed_pixels(&self, img: &image::RgbImage) -> Vec<f32> {
        let x = thumbnail_features(img, THUMBNAIL_SIDE);
        self.projection.chunks_exact(x.len()).map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum()).collect()
    }
}

impl Encoder for HashEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn max_text_tokens(&self) -> Option<usize> {
        self.max_text_tokens
    }

    fn encode_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }

    fn encode_images(&self, images: &[&str]) -> Result<Vec<Vec<f32>>, EmbedError> {
        images
            .iter()
            .map(|r| match self.image_mode {
                ImageMode::Reference => Ok(self.embed_text(r)),
                ImageMode::Pixels => load_image(r).map(|img| self.embed_pixels(&img)),
            })
            .collect()
    }
}
