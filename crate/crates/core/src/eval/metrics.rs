use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::judge::Judges;
use crate::denoiser::PromptAttributes;
use crate::error::{bail_param, Result};
use crate::nn::Tensor;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb).max(1e-12)).clamp(-1.0, 1.0)
}

/// Mean cosine between each frame's embedding and the identity reference.
pub fn fidelity_score(frames: &Tensor<f64>, identity_id: usize, judges: &Judges) -> Result<f64> {
    judges.ensure_gated()?;
    let reference = judges.reference(identity_id)?;
    let emb = judges.embed_frames(frames)?;
    Ok(emb.iter().map(|e| cosine(e, reference)).sum::<f64>() / emb.len() as f64)
}

/// Half the fraction of frames whose background matches the prompt plus
/// half a point if the clip's motion matches.
pub fn editability_score(frames: &Tensor<f64>, prompt: &PromptAttributes, judges: &Judges) -> Result<f64> {
    judges.ensure_gated()?;
    let bg = judges.classify_background(frames)?;
    let bg_acc = bg.iter().filter(|&&b| b == prompt.background_id).count() as f64 / bg.len() as f64;
    if frames.dim(0) < 2 {
        return Ok(bg_acc);
    }
    let motion = f64::from(u8::from(judges.classify_motion(frames)? == prompt.motion_id));
    Ok(0.5 * bg_acc + 0.5 * motion)
}

/// Mean cosine between embeddings of adjacent frames.
pub fn consistency_score(frames: &Tensor<f64>, judges: &Judges) -> Result<f64> {
    judges.ensure_gated()?;
    let emb = judges.embed_frames(frames)?;
    if emb.len() < 2 {
        bail_param!("consistency needs at least 2 frames");
    }
    Ok(emb.windows(2).map(|w| cosine(&w[0], &w[1])).sum::<f64>() / (emb.len() - 1) as f64)
}

/// Time-mean-pooled identity embedding of a clip.
pub fn clip_feature(frames: &Tensor<f64>, judges: &Judges) -> Result<Vec<f64>> {
    let emb = judges.embed_frames(frames)?;
    let mut mean = vec![0.0; emb[0].len()];
    for e in &emb {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v / emb.len() as f64;
        }
    }
    Ok(mean)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ffd {
    pub distance: f64,
    /// A covariance had fewer samples than dimensions + 1 and was regularised.
    pub regularized: bool,
}

/// Diagonal loading applied to rank-deficient covariances.
pub const FFD_EPS: f64 = 1e-6;

fn gaussian_fit(feats: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>, bool) {
    let (n, d) = (feats.len(), feats[0].len());
    let x = DMatrix::from_fn(n, d, |i, j| feats[i][j]);
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    let singular = n < d + 1;
    if singular {
        cov += DMatrix::identity(d, d) * FFD_EPS;
    }
    (mu, cov, singular)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Ffd> {
    if a.len() < 2 || b.len() < 2 {
        bail_param!("Fréchet distance needs at least 2 samples per side");
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|f| f.len() != d) {
        bail_param!("feature vectors must share a positive dimension");
    }
    let (mu1, s1, r1) = gaussian_fit(a);
    let (mu2, s2, r2) = gaussian_fit(b);
    // Tr((S1 S2)^{1/2}) = Tr((S1^{1/2} S2 S1^{1/2})^{1/2}), which is symmetric PSD
    let r = sqrt_psd(&s1);
    let inner = &r * &s2 * &r;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dist = (&mu1 - &mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(Ffd {
        distance: dist.max(0.0),
        regularized: r1 || r2,
    })
}

/// FFD between real and generated clips through the identity embedder.
pub fn frechet_feature_distance(real: &[Tensor<f64>], generated: &[Tensor<f64>], judges: &Judges) -> Result<Ffd> {
    judges.ensure_gated()?;
    let fa = real.iter().map(|c| clip_feature(c, judges)).collect::<Result<Vec<_>>>()?;
    let fb = generated.iter().map(|c| clip_feature(c, judges)).collect::<Result<Vec<_>>>()?;
    frechet_distance(&fa, &fb)
}

/// Mean finite-difference gradient magnitude over pixels where `mask` is set
/// (together with the right and lower neighbours). `None` if no pixel
/// qualifies.
pub fn background_complexity(frames: &Tensor<f64>, mask: &[bool]) -> Result<Option<f64>> {
    let s = frames.shape();
    if s.len() != 4 {
        bail_param!("background complexity expects [F, C, H, W], got {s:?}");
    }
    let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
    if mask.len() != h * w {
        bail_param!("mask has {} entries for a {h}x{w} frame", mask.len());
    }
    let d = frames.data();
    let (mut total, mut count) = (0.0, 0usize);
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let p = y * w + x;
            if !(mask[p] && mask[p + 1] && mask[p + w]) {
                continue;
            }
            for fi in 0..f {
                let mut mag = 0.0;
                for ch in 0..c {
                    let base = (fi * c + ch) * h * w;
                    let gx = d[base + p + 1] - d[base + p];
                    let gy = d[base + p + w] - d[base + p];
                    mag += (gx * gx + gy * gy).sqrt();
                }
                total += mag / c as f64;
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Pixels never covered by any sprite in `coverage` maps `[F, H, W]`.
pub fn background_mask(coverages: &[&Tensor<f64>]) -> Result<Vec<bool>> {
    let Some(first) = coverages.first() else {
        bail_param!("no coverage maps");
    };
    let hw = first.dim(1) * first.dim(2);
    let mut mask = vec![true; hw];
    for cov in coverages {
        if cov.dim(1) * cov.dim(2) != hw {
            bail_param!("coverage maps disagree on frame size");
        }
        for (i, &v) in cov.data().iter().enumerate() {
            if v > 0.0 {
                mask[i % hw] = false;
            }
        }
    }
    Ok(mask)
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Clip-set summary. Standard errors are across clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub clips: usize,
    pub fidelity: f64,
    pub fidelity_se: f64,
    pub editability: f64,
    pub editability_se: f64,
    pub consistency: f64,
    pub consistency_se: f64,
    pub ffd: f64,
    pub ffd_regularized: bool,
    /// Mean background edge density over the always-background pixels.
    pub background_complexity: Option<f64>,
}

/// Score generated clips (`[F, 3, H, W]` with their prompts) against real
/// clips.
pub fn evaluate_clips(
    generated: &[(Tensor<f64>, PromptAttributes)],
    real: &[Tensor<f64>],
    judges: &Judges,
    bg_mask: Option<&[bool]>,
) -> Result<MetricsReport> {
    judges.ensure_gated()?;
    if generated.is_empty() {
        bail_param!("nothing to evaluate");
    }
    let (mut fid, mut edit, mut cons, mut bgc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (clip, p) in generated {
        fid.push(fidelity_score(clip, p.identity_id, judges)?);
        edit.push(editability_score(clip, p, judges)?);
        if clip.dim(0) > 1 {
            cons.push(consistency_score(clip, judges)?);
        }
        if let Some(m) = bg_mask {
            if let Some(v) = background_complexity(clip, m)? {
                bgc.push(v);
            }
        }
    }
    let clips: Vec<Tensor<f64>> = generated.iter().map(|(c, _)| c.clone()).collect();
    let ffd = frechet_feature_distance(real, &clips, judges)?;
    let (f, fse) = mean_se(&fid);
    let (e, ese) = mean_se(&edit);
    let (c, cse) = mean_se(&cons);
    Ok(MetricsReport {
        clips: generated.len(),
        fidelity: f,
        fidelity_se: fse,
        editability: e,
        editability_se: ese,
        consistency: c,
        consistency_se: cse,
        ffd: ffd.distance,
        ffd_regularized: ffd.regularized,
        background_complexity: (!bgc.is_empty()).then(|| mean_se(&bgc).0),
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn gaussian(n: usize, d: usize, shift: &[f64], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|j| Distribution::<f64>::sample(&StandardNormal, rng) + shift[j]).collect::<Vec<f64>>())
            .collect()
    }

    #[test]
    fn ffd_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = gaussian(50, 4, &[0.0; 4], &mut rng);
        let r = frechet_distance(&a, &a).unwrap();
        assert!(r.distance.abs() < 1e-6, "{r:?}");
        assert!(!r.regularized);
    }

    #[test]
    fn ffd_shifted_gaussians_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let delta = [3.0, -2.0, 1.0];
        let a = gaussian(1000, 3, &[0.0; 3], &mut rng);
        // same draws shifted, so the covariances agree exactly
        let b: Vec<Vec<f64>> = a.iter().map(|v| v.iter().zip(&delta).map(|(x, d)| x + d).collect()).collect();
        let want: f64 = delta.iter().map(|d| d * d).sum();
        let got = frechet_distance(&a, &b).unwrap().distance;
        assert!((got - want).abs() / want < 0.01, "{got} vs {want}");
        let back = frechet_distance(&b, &a).unwrap().distance;
        assert!((got - back).abs() < 1e-9);
    }

    #[test]
    fn ffd_small_case_matches_direct_formula() {
        // 3 samples in 2-d; covariances are diagonal so the square root is elementwise
        let a = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 0.0]];
        let b = vec![vec![1.0, 1.0], vec![1.0, 3.0], vec![1.0, 2.0]];
        // a: mean (1, 0), var (1, 0); b: mean (1, 2), var (0, 1)
        // |dmu|^2 = 4; Tr = 1 + 1 - 2 * Tr(sqrt(diag(1,0) diag(0,1))) = 2
        let r = frechet_distance(&a, &b).unwrap();
        assert!(!r.regularized);
        assert!((r.distance - 6.0).abs() < 1e-9, "{r:?}");
        let r = frechet_distance(&a[..2], &b[..2]).unwrap();
        assert!(r.regularized);
    }

    #[test]
    fn ffd_rejects_tiny_sets() {
        assert!(frechet_distance(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
        assert!(frechet_distance(&[vec![1.0], vec![2.0]], &[vec![1.0, 0.0], vec![2.0, 0.0]]).is_err());
    }

    #[test]
    fn complexity_of_constant_and_checkerboard() {
        let (h, w) = (8, 8);
        let flat = Tensor::full(&[2, 3, h, w], 0.4);
        let mask = vec![true; h * w];
        assert_eq!(background_complexity(&flat, &mask).unwrap(), Some(0.0));
        let check = Tensor::from_vec(
            &[1, 1, h, w],
            (0..h * w).map(|p| ((p / w / 2 + p % w / 2) % 2) as f64).collect(),
        );
        // direct count: along each axis a 2-pixel checker flips every second step
        let mut want = 0.0;
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                let v = |yy: usize, xx: usize| ((yy / 2 + xx / 2) % 2) as f64;
                let gx: f64 = v(y, x + 1) - v(y, x);
                let gy: f64 = v(y + 1, x) - v(y, x);
                want += (gx * gx + gy * gy).sqrt();
            }
        }
        want /= ((h - 1) * (w - 1)) as f64;
        let got = background_complexity(&check, &mask).unwrap().unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(got > 0.5);
        assert_eq!(background_complexity(&check, &vec![false; h * w]).unwrap(), None);
    }

    #[test]
    fn mean_se_small_sample() {
        let (m, se) = mean_se(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-12);
    }
}
