//! Variance schedule, forward noising and the x0-parameterized reverse step.
//!
//! Arrays here are flat `f64` slices: the diffusion algebra is elementwise and
//! does not care about the motion layout.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `beta`, `alpha = 1 - beta` and `alpha_bar = prod(alpha)` for every step.
///
/// Index `k` holds the values of diffusion step `k + 1`. `timesteps[k]` is the
/// step index of the original (training) schedule that `k` corresponds to; it
/// is the identity unless the schedule was produced by [`respace`].
///
/// [`respace`]: DiffusionSchedule::respace
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    timesteps: Vec<usize>,
}

/// How the reverse-step mean is formed from the predicted clean sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// `sqrt(ab) * x0 + sqrt(1 - ab) * eps(x_t, x0)`. With the consistent
    /// inversion for `eps` this collapses to `x_t`, so it never denoises.
    Renoise,
    /// Gaussian posterior mean `q(x_{t-1} | x_t, x0)`.
    #[default]
    DdpmPosterior,
}

impl std::str::FromStr for MeanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "renoise" => Ok(MeanMode::Renoise),
            "ddpm_posterior" => Ok(MeanMode::DdpmPosterior),
            other => Err(Error::validation(format!(
                "unknown mean mode {other:?} (expected renoise | ddpm_posterior)"
            ))),
        }
    }
}

/// Linear beta schedule from `beta_start` to `beta_end` over `steps` steps.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::validation("diffusion schedule needs at least one step"));
    }
    let in_range = |b: f64| b > 0.0 && b < 1.0;
    if !in_range(beta_start) || !in_range(beta_end) {
        return Err(Error::validation(format!(
            "betas must lie in (0, 1), got {beta_start} .. {beta_end}"
        )));
    }
    if beta_start > beta_end {
        return Err(Error::validation("beta_start must not exceed beta_end"));
    }
    if steps == 1 && beta_start != beta_end {
        return Err(Error::validation(
            "a single-step schedule needs beta_start == beta_end",
        ));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else if i == steps - 1 {
                beta_end
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    Ok(DiffusionSchedule::from_betas(betas, (0..steps).collect()))
}

impl DiffusionSchedule {
    fn from_betas(betas: Vec<f64>, timesteps: Vec<usize>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        DiffusionSchedule {
            betas,
            alphas,
            alpha_bars,
            timesteps,
        }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// Evenly spaced sub-schedule of `steps` steps (DDPM respacing).
    ///
    /// The selected indices always include the last step so sampling starts
    /// from pure noise. Betas are recomputed so that the cumulative products
    /// at the kept indices are unchanged.
    pub fn respace(&self, steps: usize) -> Result<DiffusionSchedule> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(Error::validation(format!(
                "cannot respace a {total}-step schedule to {steps} steps"
            )));
        }
        let kept: Vec<usize> = if steps == 1 {
            vec![total - 1]
        } else {
            let stride = (total - 1) as f64 / (steps - 1) as f64;
            (0..steps).map(|i| (i as f64 * stride).round() as usize).collect()
        };
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(steps);
        for &k in &kept {
            let ab = self.alpha_bars[k];
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let timesteps = kept.iter().map(|&k| self.timesteps[k]).collect();
        let mut out = DiffusionSchedule::from_betas(betas, timesteps);
        // keep the exact products of the parent schedule
        for (slot, &k) in out.alpha_bars.iter_mut().zip(&kept) {
            *slot = self.alpha_bars[k];
        }
        Ok(out)
    }

    fn check_index(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::validation(format!(
                "timestep {t} out of range for a {}-step schedule",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Noised sample together with the noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedState {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

fn check_same_len(context: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(context, &[a.len()], &[b.len()]));
    }
    Ok(())
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps` for the 0-based step index `t`.
pub fn forward_noise(x0: &[f64], t: usize, eps: &[f64], sched: &DiffusionSchedule) -> Result<NoisedState> {
    check_same_len("forward_noise", x0, eps)?;
    sched.check_index(t)?;
    let ab = sched.alpha_bars[t];
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x_t = x0.iter().zip(eps).map(|(x, e)| s * x + n * e).collect();
    Ok(NoisedState {
        x_t,
        t,
        eps: eps.to_vec(),
    })
}

/// Noise implied by a clean-sample prediction: the exact inverse of
/// [`forward_noise`], `(x_t / sqrt(ab) - x0) / sqrt(1 / ab - 1)`.
pub fn epsilon_from_x0(x_t: &[f64], x0_hat: &[f64], t: usize, sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    check_same_len("epsilon_from_x0", x_t, x0_hat)?;
    sched.check_index(t)?;
    let ab = sched.alpha_bars[t];
    let inv_sqrt_ab = 1.0 / ab.sqrt();
    let factor = (1.0 / ab - 1.0).sqrt();
    Ok(x_t
        .iter()
        .zip(x0_hat)
        .map(|(x, x0)| (x * inv_sqrt_ab - x0) / factor)
        .collect())
}

/// The same residual multiplied (rather than divided) by `sqrt(1 / ab - 1)`.
///
/// Kept for comparison only; it does not invert [`forward_noise`].
pub fn epsilon_from_x0_multiplied(
    x_t: &[f64],
    x0_hat: &[f64],
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    check_same_len("epsilon_from_x0_multiplied", x_t, x0_hat)?;
    sched.check_index(t)?;
    let ab = sched.alpha_bars[t];
    let inv_sqrt_ab = 1.0 / ab.sqrt();
    let factor = (1.0 / ab - 1.0).sqrt();
    Ok(x_t
        .iter()
        .zip(x0_hat)
        .map(|(x, x0)| (x * inv_sqrt_ab - x0) * factor)
        .collect())
}

/// Mean of `p(x_{t-1} | x_t)` for the 1-based step `t`.
pub fn reverse_mean(
    x_t: &[f64],
    x0_hat: &[f64],
    t: usize,
    sched: &DiffusionSchedule,
    mode: MeanMode,
) -> Result<Vec<f64>> {
    check_same_len("reverse_step", x_t, x0_hat)?;
    if t == 0 {
        return Err(Error::validation("reverse step below t = 1 is undefined"));
    }
    sched.check_index(t - 1)?;
    let k = t - 1;
    let ab = sched.alpha_bars[k];
    match mode {
        MeanMode::Renoise => {
            let eps = epsilon_from_x0(x_t, x0_hat, k, sched)?;
            let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
            Ok(x0_hat.iter().zip(&eps).map(|(x0, e)| s * x0 + n * e).collect())
        }
        MeanMode::DdpmPosterior => {
            if k == 0 {
                // alpha_bar_prev = 1: the posterior collapses onto the prediction
                return Ok(x0_hat.to_vec());
            }
            let ab_prev = sched.alpha_bars[k - 1];
            let beta = sched.betas[k];
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let ct = sched.alphas[k].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            Ok(x0_hat.iter().zip(x_t).map(|(x0, x)| c0 * x0 + ct * x).collect())
        }
    }
}

/// One ancestral step `x_t -> x_{t-1}` for the 1-based step `t`.
///
/// Adds `sqrt(beta_t) z` when an RNG is supplied and `t > 1`; the last step
/// returns the mean itself.
pub fn reverse_step<R: Rng + ?Sized>(
    x_t: &[f64],
    x0_hat: &[f64],
    t: usize,
    sched: &DiffusionSchedule,
    mode: MeanMode,
    rng: Option<&mut R>,
) -> Result<Vec<f64>> {
    let mut mean = reverse_mean(x_t, x0_hat, t, sched, mode)?;
    if t > 1 {
        if let Some(rng) = rng {
            let sigma = sched.betas[t - 1].sqrt();
            for m in mean.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *m += sigma * z;
            }
        }
    }
    Ok(mean)
}

/// Classifier-free guidance: `uncond + scale * (cond - uncond)`.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    check_same_len("cfg_combine", cond, uncond)?;
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(c, u)| u + scale * (c - u))
        .collect())
}

/// Standard normal draws.
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}
