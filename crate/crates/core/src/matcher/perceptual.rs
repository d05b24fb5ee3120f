use image::imageops::FilterType;

use super::MatchError;
use crate::embeddings::load_image;

/// Perceptual loss between two images; 0 means identical.
pub trait PerceptualScorer: Send + Sync {
    fn name(&self) -> &str;

    fn loss(&self, image_a: &str, image_b: &str) -> Result<f64, MatchError>;
}

/// Mean absolute RGB difference after resizing both images to a common
/// square, scaled to [0, 2].
#[derive(Debug, Clone)]
pub struct PixelDifference {
    pub side: u32,
}

impl Default for PixelDifference {
    fn default() -> Self {
        Self { side: 64 }
    }
}

impl PixelDifference {
    pub fn loss_between(&self, a: &image::RgbImage, b: &image::RgbImage) -> f64 {
        let resize = |img: &image::RgbImage| {
            if img.dimensions() == (self.side, self.side) {
                img.clone()
            } else {
                image::imageops::resize(img, self.side, self.side, FilterType::Triangle)
            }
        };
        let (a, b) = (resize(a), resize(b));
        let total: u64 = a.as_raw().iter().zip(b.as_raw()).map(|(x, y)| u64::from(x.abs_diff(*y))).sum();
        2.0 * total as f64 / (a.as_raw().len() as f64 * 255.0)
    }
}

impl PerceptualScorer for PixelDifference {
    fn name(&self) -> &str {
        "pixel-difference"
    }

    fn loss(&self, image_a: &str, image_b: &str) -> Result<f64, MatchError> {
        Ok(self.loss_between(&load_image(image_a)?, &load_image(image_b)?))
    }
}
