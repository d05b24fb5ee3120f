//! Symmetric InfoNCE over an image/text similarity matrix.

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("contrastive loss needs at least 2 pairs, got {0}")]
    TooFewRows(usize),
    #[error("image and text batches differ: {images} vs {texts}")]
    Shape { images: usize, texts: usize },
    #[error("non-finite logit at ({0}, {1})")]
    NonFinite(usize, usize),
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check(sim: &[Vec<f64>]) -> Result<usize, LossError> {
    let n = sim.len();
    if n < 2 {
        return Err(LossError::TooFewRows(n));
    }
    for (i, row) in sim.iter().enumerate() {
        if row.len() != n {
            return Err(LossError::Shape { images: n, texts: row.len() });
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(LossError::NonFinite(i, j));
        }
    }
    Ok(n)
}

/// Loss for similarities `sim[i][j]` between image `i` and text `j`; logits are `sim / temperature`.
pub fn contrastive_loss_from_similarities(sim: &[Vec<f64>], temperature: f64) -> Result<f64, LossError> {
    Ok(similarity_gradients(sim, temperature)?.0)
}

/// Loss and its gradient with respect to each similarity entry.
pub fn similarity_gradients(sim: &[Vec<f64>], temperature: f64) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    let n = check(sim)?;
    let scale = 1.0 / temperature;
    let logits: Vec<Vec<f64>> = sim.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
    for (i, row) in logits.iter().enumerate() {
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(LossError::NonFinite(i, j));
        }
    }
    let row_lse: Vec<f64> = logits.iter().map(|r| log_sum_exp(r.iter().copied())).collect();
    let col_lse: Vec<f64> = (0..n).map(|j| log_sum_exp(logits.iter().map(move |r| r[j]))).collect();
    let diag: f64 = (0..n).map(|i| logits[i][i]).sum();
    let loss = (row_lse.iter().sum::<f64>() + col_lse.iter().sum::<f64>() - 2.0 * diag) / (2.0 * n as f64);

    let w = scale / (2.0 * n as f64);
    let grad = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let delta = if i == j { 2.0 } else { 0.0 };
                    w * ((logits[i][j] - row_lse[i]).exp() + (logits[i][j] - col_lse[j]).exp() - delta)
                })
                .collect()
        })
        .collect();
    Ok((loss, grad))
}

/// Loss on row vectors; the similarity is their dot product.
pub fn contrastive_loss(images: &[Vec<f64>], texts: &[Vec<f64>], temperature: f64) -> Result<f64, LossError> {
    if images.len() != texts.len() {
        return Err(LossError::Shape { images: images.len(), texts: texts.len() });
    }
    let sim: Vec<Vec<f64>> = images
        .iter()
        .map(|u| texts.iter().map(|v| u.iter().zip(v).map(|(a, b)| a * b).sum()).collect())
        .collect();
    contrastive_loss_from_similarities(&sim, temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_ln_n() {
        for n in [2, 3, 10, 64] {
            let rows = vec![vec![0.6, 0.8]; n];
            let l = contrastive_loss(&rows, &rows, 0.07).unwrap();
            assert!((l - (n as f64).ln()).abs() < 1e-12, "{n}: {l}");
        }
    }

    #[test]
    fn two_by_two_by_hand() {
        let l = contrastive_loss_from_similarities(&[vec![0.9, 0.1], vec![0.1, 0.9]], 1.0).unwrap();
        let expected = -(0.9f64.exp() / (0.9f64.exp() + 0.1f64.exp())).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.3711).abs() < 1e-4);
    }

    #[test]
    fn sharp_temperature_on_orthonormal_pairs_vanishes() {
        let e = |i: usize| (0..4).map(|k| if k == i { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let rows: Vec<_> = (0..4).map(e).collect();
        let l = contrastive_loss(&rows, &rows, 1e-3).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(contrastive_loss(&[vec![1.0]], &[vec![1.0]], 1.0), Err(LossError::TooFewRows(1)));
        assert!(matches!(contrastive_loss_from_similarities(&[vec![f64::NAN, 0.0], vec![0.0, 1.0]], 1.0), Err(LossError::NonFinite(0, 0))));
    }

    #[test]
    fn similarity_gradient_matches_finite_differences() {
        let sim = vec![vec![0.3, -0.2, 0.5], vec![0.1, 0.7, -0.4], vec![0.0, 0.2, 0.9]];
        let (_, g) = similarity_gradients(&sim, 0.5).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut p = sim.clone();
                p[i][j] += h;
                let mut m = sim.clone();
                m[i][j] -= h;
                let fd = (contrastive_loss_from_similarities(&p, 0.5).unwrap() - contrastive_loss_from_similarities(&m, 0.5).unwrap()) / (2.0 * h);
                assert!((fd - g[i][j]).abs() < 1e-8, "{i},{j}: {fd} vs {}", g[i][j]);
            }
        }
    }

    proptest! {
        #[test]
        fn non_negative_and_permutation_invariant(
            (sim, perm) in (2usize..7).prop_flat_map(|n| (
                proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, n), n),
                Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
            )),
            t in 0.05f64..2.0,
        ) {
            let l = contrastive_loss_from_similarities(&sim, t).unwrap();
            prop_assert!(l >= 0.0);
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| sim[i][j]).collect()).collect();
            prop_assert!((contrastive_loss_from_similarities(&permuted, t).unwrap() - l).abs() < 1e-9);
        }
    }
}
