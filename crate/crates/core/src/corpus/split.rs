use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, CorpusError, Split, SplitRow};
use crate::jsonl;

/// Stratified train/validation split.
///
/// Each template contributes `round(fraction * n_t)` validation memes, drawn
/// by a seeded shuffle of its memes in `meme_id` order. Templates are visited
/// in id order so the assignment depends only on `(corpus, fraction, seed)`.
pub fn split_corpus(corpus: &Corpus, validation_fraction: f64, seed: u64) -> Result<Corpus, CorpusError> {
    if !(0.0..1.0).contains(&validation_fraction) || validation_fraction.is_nan() {
        return Err(CorpusError::FractionOutOfRange(validation_fraction));
    }
    let mut by_template: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for m in &corpus.memes {
        by_template.entry(m.template_id.as_str()).or_default().push(&m.meme_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign = BTreeMap::new();
    for ids in by_template.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n_val = (validation_fraction * ids.len() as f64).round() as usize;
        for (i, id) in ids.iter().enumerate() {
            let split = if i < n_val { Split::Validation } else { Split::Train };
            assign.insert((*id).to_string(), split);
        }
    }
    let mut out = corpus.clone();
    out.split_assignment = Some(assign);
    Ok(out)
}

pub fn write_split(path: &Path, assign: &BTreeMap<String, Split>) -> Result<(), CorpusError> {
    let rows: Vec<SplitRow> = assign
        .iter()
        .map(|(id, s)| SplitRow { meme_id: id.clone(), split: *s })
        .collect();
    jsonl::write(path, &rows)?;
    Ok(())
}
