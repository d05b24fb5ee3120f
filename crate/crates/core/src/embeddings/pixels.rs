use image::imageops::FilterType;
use image::RgbImage;

use super::EmbedError;

pub const THUMBNAIL_SIDE: u32 = 16;

/// Opens a local image reference. Remote references are not fetched.
pub fn load_image(reference: &str) -> Result<RgbImage, EmbedError> {
    if reference.contains("://") {
        return Err(EmbedError::Image {
            reference: reference.to_string(),
            message: "remote images must be downloaded first".into(),
        });
    }
    image::open(reference)
        .map(|img| img.to_rgb8())
        .map_err(|e| EmbedError::Image { reference: reference.to_string(), message: e.to_string() })
}

/// Downsamples to a `side`×`side` RGB grid with channel values in [0, 1].
pub fn thumbnail_features(img: &RgbImage, side: u32) -> Vec<f32> {
    let small = if img.dimensions() == (side, side) {
        img.clone()
    } else {
        image::imageops::resize(img, side, side, FilterType::Triangle)
    };
    small.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect()
}
