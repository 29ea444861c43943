//! Noise schedules, forward diffusion, DDPM/DDIM reverse steps and DDIM
//! inversion.
//!
//! Timesteps run over `0..=T` with `alpha_bar(0) = 1`, so `t = 0` is the clean
//! image. All arithmetic is done in `f64`; model outputs are widened on the
//! way in.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::PromptAttributes;
use crate::error::{bail_param, Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Parameters from which a schedule is rebuilt; stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.num_steps, self.beta_start, self.beta_end)
    }
}

/// Linear beta ramp from `beta_start` to `beta_end` over `num_steps` steps.
pub fn build_schedule(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        bail_param!("schedule needs at least one step");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        bail_param!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]");
    }
    let betas: Vec<f64> = (0..num_steps)
        .map(|i| {
            if num_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(num_steps + 1);
    alpha_bars.push(1.0);
    for b in &betas {
        let prev = *alpha_bars.last().unwrap();
        alpha_bars.push(prev * (1.0 - b));
    }
    Ok(NoiseSchedule {
        num_steps,
        beta_start,
        beta_end,
        betas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            num_steps: self.num_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    /// `betas[t - 1]` is the variance added going from `t - 1` to `t`.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize, what: &str) -> Result<()> {
        if t > self.num_steps {
            bail_param!("{what}: timestep {t} outside [0, {}]", self.num_steps);
        }
        Ok(())
    }

    /// Descending sampling grid of `steps` timesteps ending above zero, e.g.
    /// `[1000, 980, ..., 20]` for 50 steps over 1000.
    pub fn sampling_timesteps(&self, steps: usize) -> Vec<usize> {
        let n = steps.clamp(1, self.num_steps);
        (1..=n).rev().map(|i| i * self.num_steps / n).collect()
    }

    /// Variance of the posterior `q(x_prev | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize, t_prev: usize) -> f64 {
        let (ab_t, ab_s) = (self.alpha_bars[t], self.alpha_bars[t_prev]);
        let beta_ts = 1.0 - ab_t / ab_s;
        (1.0 - ab_s) / (1.0 - ab_t) * beta_ts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameLatent {
    /// `[C, H, W]`.
    pub data: Tensor<f64>,
    pub t: usize,
}

impl FrameLatent {
    pub fn new(data: Tensor<f64>, t: usize) -> Self {
        Self { data, t }
    }

    pub fn clean(data: Tensor<f64>) -> Self {
        Self { data, t: 0 }
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseOrigin {
    Gaussian,
    DdimInverted,
    /// Output of a noise predictor.
    Predicted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSample {
    pub data: Tensor<f64>,
    pub origin: NoiseOrigin,
}

impl NoiseSample {
    pub fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Self {
            data: Tensor::from_vec(shape, data),
            origin: NoiseOrigin::Gaussian,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            data: Tensor::zeros(shape),
            origin: NoiseOrigin::Predicted,
        }
    }

    pub fn predicted(data: Tensor<f64>) -> Self {
        Self {
            data,
            origin: NoiseOrigin::Predicted,
        }
    }
}

/// Map an image in `[0, 1]` to the model's `[-1, 1]` range.
pub fn image_to_latent(img: &Tensor<f64>) -> Tensor<f64> {
    img.map(|v| 2.0 * v - 1.0)
}

/// Inverse of [`image_to_latent`], clamped to `[0, 1]`.
pub fn latent_to_image(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Anything that predicts the noise in a single noisy frame.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &FrameLatent, prompt: &PromptAttributes) -> Result<NoiseSample>;
}

/// Predictor that always answers zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict_noise(&self, x_t: &FrameLatent, _: &PromptAttributes) -> Result<NoiseSample> {
        Ok(NoiseSample::zeros(x_t.shape()))
    }
}

/// Adapter turning a closure into a [`NoisePredictor`].
pub struct FnPredictor<F>(pub F);

impl<F> NoisePredictor for FnPredictor<F>
where
    F: Fn(&FrameLatent, &PromptAttributes) -> Tensor<f64>,
{
    fn predict_noise(&self, x_t: &FrameLatent, prompt: &PromptAttributes) -> Result<NoiseSample> {
        Ok(NoiseSample::predicted((self.0)(x_t, prompt)))
    }
}

fn check_shapes(a: &Tensor<f64>, b: &Tensor<f64>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail_param!("{op}: shape {:?} vs {:?}", a.shape(), b.shape());
    }
    Ok(())
}

fn lincomb(a: f64, x: &Tensor<f64>, b: f64, y: &Tensor<f64>) -> Tensor<f64> {
    x.zip_map(y, |u, v| a * u + b * v)
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_diffuse(x0: &FrameLatent, t: usize, eps: &NoiseSample, s: &NoiseSchedule) -> Result<FrameLatent> {
    s.check_t(t, "forward_diffuse")?;
    check_shapes(&x0.data, &eps.data, "forward_diffuse")?;
    let ab = s.alpha_bar(t);
    Ok(FrameLatent::new(
        lincomb(ab.sqrt(), &x0.data, (1.0 - ab).sqrt(), &eps.data),
        t,
    ))
}

/// Invert the forward formula for `x0` given a noise estimate.
pub fn predict_x0(x_t: &FrameLatent, eps_hat: &NoiseSample, s: &NoiseSchedule) -> Result<FrameLatent> {
    if x_t.t == 0 {
        bail_param!("predict_x0 at t = 0: nothing to invert");
    }
    s.check_t(x_t.t, "predict_x0")?;
    check_shapes(&x_t.data, &eps_hat.data, "predict_x0")?;
    let ab = s.alpha_bar(x_t.t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(FrameLatent::clean(
        x_t.data.zip_map(&eps_hat.data, |x, e| (x - sn * e) / sa),
    ))
}

/// Re-express `eps_hat` so the clean frame it implies lies in `[-1, 1]`:
/// clamp `predict_x0`, then solve for the noise that maps `x_t` onto it.
/// Leaves the prediction untouched where the implied frame is in range.
pub fn clip_noise(x_t: &FrameLatent, eps_hat: &NoiseSample, s: &NoiseSchedule) -> Result<NoiseSample> {
    let x0 = predict_x0(x_t, eps_hat, s)?;
    let ab = s.alpha_bar(x_t.t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let vals = x_t
        .data
        .data()
        .iter()
        .zip(x0.data.data())
        .zip(eps_hat.data.data())
        .map(|((&x, &c), &e)| if c.abs() <= 1.0 { e } else { (x - sa * c.clamp(-1.0, 1.0)) / sn })
        .collect();
    let data = Tensor::from_vec(x_t.data.shape(), vals);
    Ok(NoiseSample {
        data,
        origin: eps_hat.origin,
    })
}

/// One ancestral DDPM step from `t` to `t - 1`, with the schedule's
/// posterior variance.
pub fn ddpm_step(
    x_t: &FrameLatent,
    eps_hat: &NoiseSample,
    t: usize,
    s: &NoiseSchedule,
    z: &NoiseSample,
) -> Result<FrameLatent> {
    if t == 0 {
        bail_param!("ddpm_step needs t >= 1");
    }
    ddpm_step_between(x_t, eps_hat, t, t - 1, s, z)
}

/// DDPM posterior step across a possibly strided gap `t -> t_prev`.
/// Reduces to [`ddpm_step`] when `t_prev = t - 1`.
pub fn ddpm_step_between(
    x_t: &FrameLatent,
    eps_hat: &NoiseSample,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
    z: &NoiseSample,
) -> Result<FrameLatent> {
    if t == 0 || t_prev >= t {
        bail_param!("ddpm step needs 0 <= t_prev < t, got t={t}, t_prev={t_prev}");
    }
    s.check_t(t, "ddpm_step")?;
    check_shapes(&x_t.data, &eps_hat.data, "ddpm_step")?;
    check_shapes(&x_t.data, &z.data, "ddpm_step")?;
    let x_t = FrameLatent::new(x_t.data.clone(), t);
    let x0 = predict_x0(&x_t, eps_hat, s)?;
    let (ab_t, ab_s) = (s.alpha_bar(t), s.alpha_bar(t_prev));
    let a_ts = ab_t / ab_s;
    let beta_ts = 1.0 - a_ts;
    let c0 = ab_s.sqrt() * beta_ts / (1.0 - ab_t);
    let ct = a_ts.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
    let sigma = s.posterior_variance(t, t_prev).max(0.0).sqrt();
    let mean = lincomb(c0, &x0.data, ct, &x_t.data);
    Ok(FrameLatent::new(lincomb(1.0, &mean, sigma, &z.data), t_prev))
}

/// Deterministic (eta = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step(
    x_t: &FrameLatent,
    eps_hat: &NoiseSample,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<FrameLatent> {
    if t_prev >= t {
        bail_param!("ddim_step needs t_prev < t, got t={t}, t_prev={t_prev}");
    }
    s.check_t(t, "ddim_step")?;
    let x_t = FrameLatent::new(x_t.data.clone(), t);
    let x0 = predict_x0(&x_t, eps_hat, s)?;
    let ab = s.alpha_bar(t_prev);
    Ok(FrameLatent::new(
        lincomb(ab.sqrt(), &x0.data, (1.0 - ab).sqrt(), &eps_hat.data),
        t_prev,
    ))
}

/// Ascending grid `0 = t_0 < ... < t_n = target_t` used by inversion.
pub fn inversion_timesteps(target_t: usize, steps: usize) -> Vec<usize> {
    let n = steps.clamp(1, target_t.max(1));
    (0..=n).map(|i| i * target_t / n).collect()
}

/// Run the DDIM update backwards from the clean frame to `target_t`.
///
/// At each move `t_cur -> t_next` the predictor is queried at
/// `(x_{t_cur}, t_next)`. Returns the inverted latent and the equivalent
/// noise `eps_eq` for which `predict_x0(x_target, eps_eq) == x0`.
pub fn ddim_invert(
    x0: &FrameLatent,
    target_t: usize,
    steps: usize,
    denoiser: &dyn NoisePredictor,
    prompt: &PromptAttributes,
    s: &NoiseSchedule,
) -> Result<(FrameLatent, NoiseSample)> {
    if target_t == 0 || target_t > s.num_steps() {
        bail_param!("ddim_invert target {target_t} outside [1, {}]", s.num_steps());
    }
    if steps == 0 {
        bail_param!("ddim_invert needs at least one step");
    }
    if x0.t != 0 {
        bail_param!("ddim_invert expects a clean frame, got t = {}", x0.t);
    }
    let grid = inversion_timesteps(target_t, steps);
    let mut x = x0.data.clone();
    for w in grid.windows(2) {
        let (t_cur, t_next) = (w[0], w[1]);
        let query = FrameLatent::new(x.clone(), t_next);
        let eps = denoiser.predict_noise(&query, prompt)?;
        if !eps.data.is_finite() {
            return Err(Error::Numeric(format!(
                "ddim_invert: denoiser produced non-finite noise at t={t_next}"
            )));
        }
        let (ab_cur, ab_next) = (s.alpha_bar(t_cur), s.alpha_bar(t_next));
        let x0_hat = x.zip_map(&eps.data, |xv, e| (xv - (1.0 - ab_cur).sqrt() * e) / ab_cur.sqrt());
        x = lincomb(ab_next.sqrt(), &x0_hat, (1.0 - ab_next).sqrt(), &eps.data);
    }
    if !x.is_finite() {
        return Err(Error::Numeric("ddim_invert: latent diverged".into()));
    }
    let ab = s.alpha_bar(target_t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let eps_eq = x.zip_map(&x0.data, |xt, x0v| (xt - sa * x0v) / sn);
    Ok((
        FrameLatent::new(x, target_t),
        NoiseSample {
            data: eps_eq,
            origin: NoiseOrigin::DdimInverted,
        },
    ))
}

/// Deterministic DDIM sampling of a single frame from `x_start` down to
/// `t = 0` over the grid used by [`ddim_invert`].
pub fn ddim_sample_from(
    x_start: &FrameLatent,
    steps: usize,
    denoiser: &dyn NoisePredictor,
    prompt: &PromptAttributes,
    s: &NoiseSchedule,
) -> Result<FrameLatent> {
    let grid = inversion_timesteps(x_start.t, steps);
    let mut x = x_start.clone();
    for w in grid.windows(2).rev() {
        let (t_prev, t) = (w[0], w[1]);
        let eps = denoiser.predict_noise(&FrameLatent::new(x.data.clone(), t), prompt)?;
        x = ddim_step(&x, &eps, t, t_prev, s)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn prompt() -> PromptAttributes {
        PromptAttributes::new(0, 0, 0)
    }

    fn latent(vals: &[f64], shape: &[usize]) -> FrameLatent {
        FrameLatent::clean(Tensor::from_vec(shape, vals.to_vec()))
    }

    #[test]
    fn schedule_small_cases() {
        let s = build_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
        let s = build_schedule(2, 0.1, 0.3).unwrap();
        assert!((s.alpha_bars()[1] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[2] - 0.63).abs() < 1e-15);
    }

    #[test]
    fn schedule_default_matches_direct_product() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        // independent recomputation: product of (1 - beta_i) with beta_i on the linear ramp
        let mut prod = 1.0f64;
        for i in 0..1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-12 * prod.max(1e-300));
        assert!(s.alpha_bar(1000) > 0.0 && s.alpha_bar(1000) < 1e-4);
        for w in s.alpha_bars().windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(build_schedule(0, 0.1, 0.2).is_err());
        assert!(build_schedule(10, 0.0, 0.2).is_err());
        assert!(build_schedule(10, 0.3, 0.2).is_err());
        assert!(build_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_identity_and_zero_signal() {
        let s = build_schedule(100, 1e-3, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = latent(&[0.3, -0.2, 0.9, 0.1], &[1, 2, 2]);
        let eps = NoiseSample::gaussian(&[1, 2, 2], &mut rng);
        assert_eq!(forward_diffuse(&x0, 0, &eps, &s).unwrap().data, x0.data);
        let zero = latent(&[0.0; 4], &[1, 2, 2]);
        let xt = forward_diffuse(&zero, 40, &eps, &s).unwrap();
        let k = (1.0 - s.alpha_bar(40)).sqrt();
        for (a, b) in xt.data.data().iter().zip(eps.data.data()) {
            assert!((a - k * b).abs() < 1e-15);
        }
        assert!(forward_diffuse(&x0, 101, &eps, &s).is_err());
    }

    #[test]
    fn forward_moments_monte_carlo() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let t = 300;
        let x0 = latent(&[0.7, -0.4], &[1, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps = NoiseSample::gaussian(&[1, 1, 2], &mut rng);
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            for i in 0..2 {
                sum[i] += xt.data.data()[i];
                sq[i] += xt.data.data()[i].powi(2);
            }
        }
        let ab = s.alpha_bar(t);
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let se_mean = ((1.0 - ab) / n as f64).sqrt();
            let se_var = (1.0 - ab) * (2.0 / (n - 1) as f64).sqrt();
            assert!((mean - ab.sqrt() * x0.data.data()[i]).abs() < 3.0 * se_mean);
            assert!((var - (1.0 - ab)).abs() < 3.0 * se_var);
        }
    }

    #[test]
    fn predict_x0_cases() {
        let s = build_schedule(50, 1e-3, 0.1).unwrap();
        let x_t = FrameLatent::new(Tensor::from_vec(&[1, 1, 1], vec![0.8]), 20);
        let zero = NoiseSample::zeros(&[1, 1, 1]);
        let got = predict_x0(&x_t, &zero, &s).unwrap();
        assert!((got.data.data()[0] - 0.8 / s.alpha_bar(20).sqrt()).abs() < 1e-14);
        // hand rearrangement: x0 = (x - sqrt(1-a) e) / sqrt(a)
        let e = NoiseSample::predicted(Tensor::from_vec(&[1, 1, 1], vec![-0.35]));
        let a = s.alpha_bar(20);
        let expect = (0.8 - (1.0 - a).sqrt() * -0.35) / a.sqrt();
        assert!((predict_x0(&x_t, &e, &s).unwrap().data.data()[0] - expect).abs() < 1e-14);
        let clean = FrameLatent::clean(Tensor::zeros(&[1, 1, 1]));
        assert!(predict_x0(&clean, &zero, &s).is_err());
    }

    #[test]
    fn ddpm_final_step_is_deterministic() {
        let s = build_schedule(100, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x1 = FrameLatent::new(Tensor::from_vec(&[1, 1, 2], vec![0.2, -0.5]), 1);
        let e = NoiseSample::gaussian(&[1, 1, 2], &mut rng);
        let z1 = NoiseSample::gaussian(&[1, 1, 2], &mut rng);
        let z2 = NoiseSample::gaussian(&[1, 1, 2], &mut rng);
        let a = ddpm_step(&x1, &e, 1, &s, &z1).unwrap();
        let b = ddpm_step(&x1, &e, 1, &s, &z2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.data, predict_x0(&x1, &e, &s).unwrap().data);
    }

    #[test]
    fn ddpm_mean_matches_posterior_closed_form() {
        let s = build_schedule(100, 1e-3, 0.05).unwrap();
        let (t, x0v, ev) = (37usize, 0.6f64, -1.3f64);
        let x0 = latent(&[x0v], &[1, 1, 1]);
        let eps = NoiseSample::predicted(Tensor::from_vec(&[1, 1, 1], vec![ev]));
        let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
        let z = NoiseSample::zeros(&[1, 1, 1]);
        let got = ddpm_step(&xt, &eps, t, &s, &z).unwrap().data.data()[0];
        // textbook posterior mean with alpha_t = 1 - beta_t
        let beta = s.betas()[t - 1];
        let alpha = 1.0 - beta;
        let (ab, ab_prev) = (s.alpha_bar(t), s.alpha_bar(t - 1));
        let xtv = xt.data.data()[0];
        let mean = ab_prev.sqrt() * beta / (1.0 - ab) * x0v + alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab) * xtv;
        assert!((got - mean).abs() < 1e-12);
        // equivalent eps form of the same mean
        let mean_eps = (xtv - beta / (1.0 - ab).sqrt() * ev) / alpha.sqrt();
        assert!((got - mean_eps).abs() < 1e-12);
    }

    #[test]
    fn ddpm_perfect_denoiser_recovers_constant_image() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let target = Tensor::full(&[3, 4, 4], 0.4);
        let oracle = {
            let target = target.clone();
            let s = s.clone();
            FnPredictor(move |x: &FrameLatent, _: &PromptAttributes| {
                let ab = s.alpha_bar(x.t);
                x.data.zip_map(&target, |xv, x0| (xv - ab.sqrt() * x0) / (1.0 - ab).sqrt())
            })
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = FrameLatent::new(NoiseSample::gaussian(&[3, 4, 4], &mut rng).data, 1000);
        for t in (1..=1000).rev() {
            let e = oracle.predict_noise(&x, &prompt()).unwrap();
            let z = NoiseSample::gaussian(&[3, 4, 4], &mut rng);
            x = ddpm_step(&x, &e, t, &s, &z).unwrap();
        }
        let rms = (x.data.zip_map(&target, |a, b| (a - b).powi(2)).mean()).sqrt();
        assert!(rms < 0.05, "rms {rms}");
    }

    #[test]
    fn ddim_step_cases() {
        let s = build_schedule(200, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = FrameLatent::clean(NoiseSample::gaussian(&[1, 2, 2], &mut rng).data);
        let eps = NoiseSample::gaussian(&[1, 2, 2], &mut rng);
        let xt = forward_diffuse(&x0, 150, &eps, &s).unwrap();
        let to0 = ddim_step(&xt, &eps, 150, 0, &s).unwrap();
        assert_eq!(to0.data, predict_x0(&xt, &eps, &s).unwrap().data);
        let to60 = ddim_step(&xt, &eps, 150, 60, &s).unwrap();
        let direct = forward_diffuse(&x0, 60, &eps, &s).unwrap();
        assert!(to60.data.max_abs_diff(&direct.data) < 1e-12);
        assert!(ddim_step(&xt, &eps, 60, 60, &s).is_err());
    }

    #[test]
    fn ddim_three_step_chain_hand_unrolled() {
        let s = build_schedule(30, 1e-3, 0.1).unwrap();
        let x = FrameLatent::new(Tensor::from_vec(&[1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]), 30);
        // predictor: eps = 0.5 * x (input dependent)
        let pred = FnPredictor(|x: &FrameLatent, _: &PromptAttributes| x.data.map(|v| 0.5 * v));
        let mut cur = x.clone();
        for (t, tp) in [(30, 20), (20, 10), (10, 0)] {
            let e = pred.predict_noise(&FrameLatent::new(cur.data.clone(), t), &prompt()).unwrap();
            cur = ddim_step(&cur, &e, t, tp, &s).unwrap();
        }
        // unrolled per element: x' = sqrt(a_p) (x - sqrt(1-a) 0.5x)/sqrt(a) + sqrt(1-a_p) 0.5x
        let factor = |t: usize, tp: usize| {
            let (a, ap) = (s.alpha_bar(t), s.alpha_bar(tp));
            ap.sqrt() * (1.0 - (1.0 - a).sqrt() * 0.5) / a.sqrt() + (1.0 - ap).sqrt() * 0.5
        };
        let f = factor(30, 20) * factor(20, 10) * factor(10, 0);
        for (got, x0) in cur.data.data().iter().zip(x.data.data()) {
            assert!((got - f * x0).abs() < 1e-12);
        }
    }

    #[test]
    fn inversion_with_zero_predictor() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = latent(&[0.1, -0.7, 0.3, 0.9], &[1, 2, 2]);
        let (xt, eq) = ddim_invert(&x0, 1000, 50, &ZeroPredictor, &prompt(), &s).unwrap();
        let k = s.alpha_bar(1000).sqrt();
        for (a, b) in xt.data.data().iter().zip(x0.data.data()) {
            assert!((a - k * b).abs() < 1e-15);
        }
        assert!(eq.data.data().iter().all(|v| v.abs() < 1e-9));
        assert_eq!(eq.origin, NoiseOrigin::DdimInverted);
    }

    #[test]
    fn inversion_single_step_schedule_round_trips() {
        let s = build_schedule(1, 0.3, 0.3).unwrap();
        let x0 = latent(&[0.4, -0.1], &[1, 1, 2]);
        let pred = FnPredictor(|_: &FrameLatent, _: &PromptAttributes| Tensor::from_vec(&[1, 1, 2], vec![0.2, -0.6]));
        let (xt, _) = ddim_invert(&x0, 1, 1, &pred, &prompt(), &s).unwrap();
        let back = ddim_sample_from(&xt, 1, &pred, &prompt(), &s).unwrap();
        assert!(back.data.max_abs_diff(&x0.data) < 1e-14);
    }

    #[test]
    fn inversion_equivalent_noise_identity() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let pred = FnPredictor(|x: &FrameLatent, _: &PromptAttributes| x.data.map(|v| (3.0 * v).sin()));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = FrameLatent::clean(NoiseSample::gaussian(&[3, 2, 2], &mut rng).data);
        for target in [1, 17, 500, 1000] {
            let (xt, eq) = ddim_invert(&x0, target, 20, &pred, &prompt(), &s).unwrap();
            let back = predict_x0(&xt, &eq, &s).unwrap();
            assert!(back.data.max_abs_diff(&x0.data) < 1e-9, "target {target}");
        }
    }

    #[test]
    fn inversion_reports_non_finite_predictor() {
        let s = build_schedule(10, 1e-3, 0.1).unwrap();
        let pred = FnPredictor(|x: &FrameLatent, _: &PromptAttributes| x.data.map(|_| f64::NAN));
        let x0 = latent(&[0.0], &[1, 1, 1]);
        assert!(matches!(
            ddim_invert(&x0, 10, 5, &pred, &prompt(), &s),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn sampling_grid() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let g = s.sampling_timesteps(50);
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], 1000);
        assert_eq!(*g.last().unwrap(), 20);
        assert_eq!(inversion_timesteps(10, 3), vec![0, 3, 6, 10]);
        assert_eq!(inversion_timesteps(4, 10), vec![0, 1, 2, 3, 4]);
    }
}
