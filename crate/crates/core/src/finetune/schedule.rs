use std::f64::consts::PI;

use super::FinetuneConfig;

/// Learning rate at a possibly fractional step.
///
/// Linear warmup from `lr_start` to `lr_peak`, then cosine annealing to
/// `lr_end` at the end of the last epoch. Later steps stay at `lr_end`.
pub fn lr_at(config: &FinetuneConfig, step: f64, steps_per_epoch: usize) -> f64 {
    let warmup = config.warmup_epochs * steps_per_epoch as f64;
    let total = (config.epochs * steps_per_epoch) as f64;
    if step < warmup {
        return config.lr_start + (config.lr_peak - config.lr_start) * step / warmup;
    }
    let span = total - warmup;
    let progress = if span > 0.0 { (step - warmup) / span } else { f64::INFINITY };
    if progress == 0.0 || (span <= 0.0 && step == warmup) {
        return config.lr_peak;
    }
    if progress >= 1.0 {
        return config.lr_end;
    }
    config.lr_end + (config.lr_peak - config.lr_end) * (1.0 + (PI * progress).cos()) / 2.0
}

pub fn lr_at_step(config: &FinetuneConfig, step: usize, steps_per_epoch: usize) -> f64 {
    lr_at(config, step as f64, steps_per_epoch)
}
