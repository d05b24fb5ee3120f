//! Seeded synthetic data: template families, attribute grids and
//! caption-addressed corpora. Used by tests, demos and the CLI.

use std::collections::BTreeSet;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotator::{AnnotationRecord, Provenance as AnnotationProvenance};
use crate::corpus::{Corpus, MemeRecord, TemplateRecord};
use crate::finetune::TrainPair;

const WORDS: &[&str] = &[
    "when", "monday", "cat", "code", "coffee", "deadline", "finally", "works", "nobody", "boss", "weekend", "bug",
    "exam", "pizza", "sleep", "meeting", "friday", "again", "why", "always", "never", "production", "test", "dog",
];

/// Attribute words for the grid pairs, one per cell of a 4×4 grid.
pub const ATTRIBUTES: [&str; 16] = [
    "red", "green", "blue", "yellow", "round", "square", "striped", "dotted", "small", "large", "bright", "dark",
    "left", "right", "top", "bottom",
];

pub const TEMPLATE_SIDE: u32 = 64;
const BLOCK: u32 = 8;
const BAR_HEIGHT: u32 = 10;

fn random_words(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn block_pattern(rng: &mut ChaCha8Rng) -> RgbImage {
    let cells = TEMPLATE_SIDE / BLOCK;
    let colours: Vec<Rgb<u8>> = (0..cells * cells).map(|_| Rgb([rng.random(), rng.random(), rng.random()])).collect();
    RgbImage::from_fn(TEMPLATE_SIDE, TEMPLATE_SIDE, |x, y| colours[((y / BLOCK) * cells + x / BLOCK) as usize])
}

/// White caption bar along the top or bottom edge with dark glyph-like marks.
fn overlay_text(base: &RgbImage, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut img = base.clone();
    let top = if rng.random_bool(0.5) { 0 } else { TEMPLATE_SIDE - BAR_HEIGHT };
    let marks: Vec<bool> = (0..TEMPLATE_SIDE / 2).map(|_| rng.random_bool(0.6)).collect();
    for y in top..top + BAR_HEIGHT {
        for x in 0..TEMPLATE_SIDE {
            let inner = y > top + 2 && y < top + BAR_HEIGHT - 2;
            let ink = inner && marks[(x / 2) as usize] && x % 2 == 0;
            img.put_pixel(x, y, if ink { Rgb([20, 20, 20]) } else { Rgb([250, 250, 250]) });
        }
    }
    img
}

/// `templates` base images, each with `per_template` text-overlaid instances,
/// written as PNG under `dir`. Instance ids are `t{i}-m{j}`.
pub fn template_family(dir: &Path, templates: usize, per_template: usize, seed: u64) -> image::ImageResult<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(dir)?;
    let mut trecs = Vec::with_capacity(templates);
    let mut memes = Vec::with_capacity(templates * per_template);
    for t in 0..templates {
        let template_id = format!("t{t}");
        let base = block_pattern(&mut rng);
        let base_path = dir.join(format!("{template_id}.png"));
        base.save(&base_path)?;
        trecs.push(TemplateRecord {
            template_id: template_id.clone(),
            name: format!("Template {t}"),
            about_context: format!("Template {t} is a synthetic image macro."),
            base_image: base_path.display().to_string(),
        });
        for m in 0..per_template {
            let meme_id = format!("{template_id}-m{m}");
            let path = dir.join(format!("{meme_id}.png"));
            overlay_text(&base, &mut rng).save(&path)?;
            memes.push(MemeRecord {
                meme_id,
                template_id: template_id.clone(),
                title: random_words(&mut rng, 3),
                image: path.display().to_string(),
                embedded_text: random_words(&mut rng, 6),
                views: None,
                upvotes: None,
                downvotes: None,
            });
        }
    }
    Ok(Corpus::new(trecs, memes).expect("generated corpus is consistent"))
}

pub const GRID_CELL: u32 = 8;

/// Image with one lit cell per present attribute.
pub fn attribute_image(present: &[usize]) -> RgbImage {
    let side = GRID_CELL * 4;
    RgbImage::from_fn(side, side, |x, y| {
        let cell = ((y / GRID_CELL) * 4 + x / GRID_CELL) as usize;
        if present.contains(&cell) {
            let hue = (cell as u8).wrapping_mul(53);
            Rgb([255, hue, 255 - hue])
        } else {
            Rgb([10, 10, 10])
        }
    })
}

/// `n` pairs, each showing `per_pair` random attributes as lit grid cells and
/// captioned by the attribute words. Images are written under `dir`.
pub fn attribute_pairs(dir: &Path, n: usize, per_pair: usize, seed: u64) -> image::ImageResult<Vec<TrainPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::fs::create_dir_all(dir)?;
    let all: Vec<usize> = (0..ATTRIBUTES.len()).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut present: Vec<usize> = all.choose_multiple(&mut rng, per_pair.min(all.len())).copied().collect();
        present.sort_unstable();
        let id = format!("grid-{seed}-{i}");
        let path = dir.join(format!("{id}.png"));
        attribute_image(&present).save(&path)?;
        let caption = present.iter().map(|&a| ATTRIBUTES[a]).collect::<Vec<_>>().join(" ");
        out.push(TrainPair { id, image: path.display().to_string(), caption });
    }
    Ok(out)
}

/// Corpus whose image references are the captions themselves, with matching
/// annotations. Under an encoder that embeds image references as text, every
/// meme's image and texts share one embedding.
pub fn caption_addressed(n: usize, seed: u64) -> (Corpus, Vec<AnnotationRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = vec![TemplateRecord {
        template_id: "t0".into(),
        name: "Synthetic".into(),
        about_context: String::new(),
        base_image: "synthetic".into(),
    }];
    let mut seen = BTreeSet::new();
    let mut memes = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    while memes.len() < n {
        let caption = format!("{} {}", random_words(&mut rng, 5), rng.random_range(0..1_000_000));
        if !seen.insert(caption.clone()) {
            continue;
        }
        let meme_id = format!("m{}", memes.len());
        memes.push(MemeRecord {
            meme_id: meme_id.clone(),
            template_id: "t0".into(),
            title: caption.clone(),
            image: caption.clone(),
            embedded_text: caption.clone(),
            views: None,
            upvotes: None,
            downvotes: None,
        });
        annotations.push(AnnotationRecord {
            meme_id,
            image_caption: caption.clone(),
            embedded_text: caption.clone(),
            meme_caption: caption,
            literary_devices: BTreeSet::new(),
            emotions: None,
            provenance: AnnotationProvenance {
                model: "synthetic".into(),
                prompt_id: "none".into(),
                with_context: false,
                timestamp: "1970-01-01T00:00:00Z".into(),
            },
            raw_response: String::new(),
            flags: Vec::new(),
        });
    }
    (Corpus::new(templates, memes).expect("generated corpus is consistent"), annotations)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_family_is_seeded() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ca = template_family(a.path(), 2, 3, 9).unwrap();
        let cb = template_family(b.path(), 2, 3, 9).unwrap();
        assert_eq!(ca.memes.len(), 6);
        for (x, y) in ca.memes.iter().zip(&cb.memes) {
            assert_eq!(x.embedded_text, y.embedded_text);
            assert_eq!(std::fs::read(&x.image).unwrap(), std::fs::read(&y.image).unwrap());
        }
    }

    #[test]
    fn attribute_captions_name_lit_cells() {
        let d = tempfile::tempdir().unwrap();
        let pairs = attribute_pairs(d.path(), 5, 3, 1).unwrap();
        for p in &pairs {
            assert_eq!(p.caption.split(' ').count(), 3);
        }
        let img = attribute_image(&[0]);
        assert_eq!(img.get_pixel(1, 1)[0], 255);
        assert_eq!(img.get_pixel(GRID_CELL + 1, 1)[0], 10);
    }

    #[test]
    fn caption_addressed_is_unique() {
        let (c, a) = caption_addressed(50, 3);
        let set: BTreeSet<_> = c.memes.iter().map(|m| m.image.clone()).collect();
        assert_eq!(set.len(), 50);
        assert_eq!(a.len(), 50);
    }
}
