//! Noise-prediction losses, in plain `f64` form for reporting and as tape
//! ops for training.
//!
//! Per-frame squared error is averaged over pixels. The simple loss then
//! averages over included frames; the anchor difference loss sums the
//! non-anchor frames and divides by the total frame count `F`.

use super::batch::TrainingBatch;
use super::config::TrainMode;
use crate::diffusion::NoiseSample;
use crate::error::{bail_param, Result};
use crate::nn::{Scalar, Tensor, Var};

fn frame_mse(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64
}

fn check_pairs(eps_hat: &[NoiseSample], eps: &[NoiseSample]) -> Result<()> {
    if eps_hat.len() != eps.len() {
        bail_param!("{} predictions for {} targets", eps_hat.len(), eps.len());
    }
    for (a, b) in eps_hat.iter().zip(eps) {
        if a.data.shape() != b.data.shape() {
            bail_param!("prediction shape {:?} vs target {:?}", a.data.shape(), b.data.shape());
        }
    }
    Ok(())
}

/// Mean squared error over every included frame and pixel.
pub fn compute_simple_loss(eps_hat: &[NoiseSample], eps: &[NoiseSample], exclude: Option<usize>) -> Result<f64> {
    check_pairs(eps_hat, eps)?;
    let included: Vec<usize> = (0..eps.len()).filter(|&i| Some(i) != exclude).collect();
    if included.is_empty() {
        bail_param!("simple loss over an empty set of frames");
    }
    let total: f64 = included.iter().map(|&i| frame_mse(&eps_hat[i].data, &eps[i].data)).sum();
    Ok(total / included.len() as f64)
}

/// `sum_{i != k} mse((eps_hat_i - eps_hat_k), (eps_i - eps_k)) / F`.
pub fn compute_anchor_difference_loss(eps_hat: &[NoiseSample], eps: &[NoiseSample], anchor: usize) -> Result<f64> {
    check_pairs(eps_hat, eps)?;
    let f = eps.len();
    if f < 2 {
        bail_param!("anchor difference loss needs at least 2 frames, got {f}");
    }
    if anchor >= f {
        bail_param!("anchor {anchor} outside [0, {f})");
    }
    let (hk, ek) = (&eps_hat[anchor].data, &eps[anchor].data);
    let mut total = 0.0;
    for i in (0..f).filter(|&i| i != anchor) {
        let (hi, ei) = (eps_hat[i].data.data(), eps[i].data.data());
        let s: f64 = (0..hi.len())
            .map(|p| ((hi[p] - hk.data()[p]) - (ei[p] - ek.data()[p])).powi(2))
            .sum();
        total += s / hi.len() as f64;
    }
    Ok(total / f as f64)
}

/// Loss components of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub simple: f64,
    pub anchor_difference: f64,
}

/// Training objective for a batch: plain simple loss, or in anchor mode the
/// simple loss without the anchor plus `lambda` times the anchor difference.
pub fn compute_total_loss(batch: &TrainingBatch, eps_hat: &[NoiseSample], mode: TrainMode, lambda: f64) -> Result<LossParts> {
    if mode == TrainMode::AnchorMotion {
        let Some(k) = batch.anchor else {
            bail_param!("anchor mode batch without an anchor index");
        };
        let simple = compute_simple_loss(eps_hat, &batch.noises, Some(k))?;
        let ad = compute_anchor_difference_loss(eps_hat, &batch.noises, k)?;
        Ok(LossParts {
            total: simple + lambda * ad,
            simple,
            anchor_difference: ad,
        })
    } else {
        let simple = compute_simple_loss(eps_hat, &batch.noises, None)?;
        Ok(LossParts {
            total: simple,
            simple,
            anchor_difference: 0.0,
        })
    }
}

/// Tape form of the simple loss over rows of `eps_hat: [N, ...]`; rows whose
/// weight is zero are excluded.
pub fn simple_loss_var<'g, T: Scalar>(eps_hat: Var<'g, T>, target: &Tensor<T>, include: &[bool]) -> Var<'g, T> {
    let n = include.iter().filter(|&&b| b).count();
    assert!(n > 0, "simple loss over an empty set of frames");
    let per_frame = target.numel() / include.len();
    let w: Vec<T> = include.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
    let g = eps_hat.graph();
    eps_hat
        .sub(g.constant(target.clone()))
        .square()
        .mul_rows(&w)
        .sum()
        .scale(1.0 / (n * per_frame) as f64)
}

/// Tape form of the anchor difference loss for `anchors.len()` clips of
/// `frames` frames stacked along axis 0, averaged over clips.
pub fn anchor_difference_var<'g, T: Scalar>(
    eps_hat: Var<'g, T>,
    target: &Tensor<T>,
    frames: usize,
    anchors: &[usize],
) -> Var<'g, T> {
    let clips = anchors.len();
    assert_eq!(target.dim(0), clips * frames, "target rows");
    let per_frame = target.numel() / (clips * frames);
    let idx: Vec<usize> = (0..clips * frames).map(|r| (r / frames) * frames + anchors[r / frames]).collect();
    let mut target_diff = target.clone();
    for (r, row) in target_diff.data_mut().chunks_mut(per_frame).enumerate() {
        let a = idx[r] * per_frame;
        for (p, v) in row.iter_mut().enumerate() {
            *v -= target.data()[a + p];
        }
    }
    let g = eps_hat.graph();
    eps_hat
        .sub(eps_hat.select0(&idx))
        .sub(g.constant(target_diff))
        .square()
        .sum()
        .scale(1.0 / (clips * frames * per_frame) as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::gradcheck::{check_gradients, random_tensor};
    use crate::nn::Graph;

    fn scalars(v: &[f64]) -> Vec<NoiseSample> {
        v.iter().map(|&x| NoiseSample::predicted(Tensor::from_vec(&[1], vec![x]))).collect()
    }

    #[test]
    fn scalar_examples() {
        let hat = scalars(&[0.0, 0.5]);
        let eps = scalars(&[0.0, 0.2]);
        assert!((compute_simple_loss(&scalars(&[0.5]), &scalars(&[0.2]), None).unwrap() - 0.09).abs() < 1e-15);
        assert_eq!(compute_anchor_difference_loss(&hat, &eps, 0).unwrap(), (0.5f64 - 0.2).powi(2) / 2.0);
        assert!((compute_anchor_difference_loss(&hat, &eps, 0).unwrap() - 0.045).abs() < 1e-15);
        assert!((compute_simple_loss(&hat, &eps, Some(0)).unwrap() - 0.09).abs() < 1e-15);
        assert!(compute_simple_loss(&hat[..1], &eps[..1], Some(0)).is_err());
        assert!(compute_anchor_difference_loss(&hat[..1], &eps[..1], 0).is_err());
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps: Vec<_> = (0..4).map(|_| NoiseSample::gaussian(&[2, 3, 3], &mut rng)).collect();
        assert_eq!(compute_simple_loss(&eps, &eps, None).unwrap(), 0.0);
        assert_eq!(compute_anchor_difference_loss(&eps, &eps, 2).unwrap(), 0.0);
    }

    #[test]
    fn tape_losses_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (f, shape) = (5, [2, 2, 2]);
        let hat: Vec<_> = (0..f).map(|_| NoiseSample::gaussian(&shape, &mut rng)).collect();
        let eps: Vec<_> = (0..f).map(|_| NoiseSample::gaussian(&shape, &mut rng)).collect();
        let stack = |v: &[NoiseSample]| Tensor::stack(&v.iter().map(|n| n.data.clone()).collect::<Vec<_>>());
        let g = Graph::<f64>::inference();
        let h = g.constant(stack(&hat));
        let include: Vec<bool> = (0..f).map(|i| i != 3).collect();
        let s = simple_loss_var(h, &stack(&eps), &include).value().data()[0];
        let a = anchor_difference_var(h, &stack(&eps), f, &[3]).value().data()[0];
        assert!((s - compute_simple_loss(&hat, &eps, Some(3)).unwrap()).abs() < 1e-12);
        assert!((a - compute_anchor_difference_loss(&hat, &eps, 3).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hat = random_tensor(&[6, 2, 2, 2], &mut rng);
        let eps = random_tensor(&[6, 2, 2, 2], &mut rng);
        let include = [true, false, true, true, true, false];
        let report = check_gradients(&[hat], |_, v| {
            simple_loss_var(v[0], &eps, &include).add(anchor_difference_var(v[0], &eps, 3, &[1, 2]).scale(0.7))
        });
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
