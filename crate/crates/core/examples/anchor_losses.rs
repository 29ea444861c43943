//! Simple and anchor difference losses on a toy clip, the effect of a
//! shared offset on every prediction, and a finite-difference check of the
//! tape gradients.
//!
//! cargo run --example anchor_losses

use anchorframe::diffusion::NoiseSample;
use anchorframe::nn::gradcheck::{check_gradients, random_tensor};
use anchorframe::training::loss::{anchor_difference_var, simple_loss_var};
use anchorframe::training::{compute_anchor_difference_loss, compute_simple_loss};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anchorframe::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frames = 6;
    let anchor = 2;
    let eps: Vec<_> = (0..frames).map(|_| NoiseSample::gaussian(&[3, 4, 4], &mut rng)).collect();
    // predictions that are right up to a common offset and a little noise
    let hat: Vec<_> = eps
        .iter()
        .map(|e| {
            let jitter = NoiseSample::gaussian(&[3, 4, 4], &mut rng).data;
            NoiseSample::predicted(e.data.zip_map(&jitter, |v, j| v + 0.8 + 0.1 * j))
        })
        .collect();
    println!("simple loss (anchor excluded) {:.4}", compute_simple_loss(&hat, &eps, Some(anchor))?);
    println!("anchor difference loss       {:.4}", compute_anchor_difference_loss(&hat, &eps, anchor)?);
    println!("the offset of 0.8 dominates the simple loss and cancels in the difference loss");

    let hat_t = random_tensor(&[frames, 2, 2, 2], &mut rng);
    let eps_t = random_tensor(&[frames, 2, 2, 2], &mut rng);
    let include: Vec<bool> = (0..frames).map(|i| i != anchor).collect();
    let report = check_gradients(&[hat_t], |_, v| {
        simple_loss_var(v[0], &eps_t, &include).add(anchor_difference_var(v[0], &eps_t, frames, &[anchor]))
    });
    println!("gradient check over {} entries: max rel err {:.2e}", report.checked, report.max_rel_err);
    Ok(())
}
