//! Noise schedules, the forward noising marginal, and the Gaussian reverse
//! policy with its exact per-step log-densities and KLs.
//!
//! Step indices are 1-based throughout (`t ∈ 1..=T`), matching the usual
//! DDPM convention; `x_0` is data and `x_T` is (nearly) pure noise.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{l2_dist_sq, DenoiserRef};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseCov {
    /// Σ_t = β_t I
    Beta,
    /// Σ_t = β̃_t I, the forward posterior variance. Zero at t = 1.
    TildeBeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Which cumulative product the clean-sample predictor divides by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum X0Mode {
    /// `(x_t − √(1−ᾱ_t) ε) / √ᾱ_t`; inverts [`q_sample`] exactly.
    #[default]
    AlphaBar,
    /// `(x_t − √(1−α_t) ε) / √α_t`, using the single-step α_t.
    StepAlpha,
}

/// Serializable description from which a [`NoiseSchedule`] is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    #[serde(default)]
    pub kind: ScheduleKind,
    pub reverse_cov: ReverseCov,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            horizon: 50,
            beta_min: 1e-3,
            beta_max: 0.2,
            kind: ScheduleKind::Linear,
            reverse_cov: ReverseCov::TildeBeta,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(
            self.horizon,
            self.beta_min,
            self.beta_max,
            self.kind,
            self.reverse_cov,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub horizon: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub posterior_vars: Vec<f64>,
    pub reverse_cov: ReverseCov,
}

pub fn make_schedule(
    horizon: usize,
    beta_min: f64,
    beta_max: f64,
    kind: ScheduleKind,
    reverse_cov: ReverseCov,
) -> Result<NoiseSchedule> {
    if horizon < 1 {
        return Err(Error::config("T", "must be at least 1"));
    }
    if !(beta_min > 0.0 && beta_min < 1.0) {
        return Err(Error::config("beta_min", format!("{beta_min} not in (0, 1)")));
    }
    if !(beta_max > 0.0 && beta_max < 1.0) {
        return Err(Error::config("beta_max", format!("{beta_max} not in (0, 1)")));
    }
    if beta_min > beta_max {
        return Err(Error::config(
            "beta_max",
            format!("beta_max {beta_max} is below beta_min {beta_min}"),
        ));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear if horizon == 1 => vec![beta_min],
        ScheduleKind::Linear => (0..horizon)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (horizon - 1) as f64)
            .collect(),
    };
    Ok(NoiseSchedule::from_betas(betas, reverse_cov))
}

impl NoiseSchedule {
    /// Builds all derived arrays from an explicit β sequence.
    pub fn from_betas(betas: Vec<f64>, reverse_cov: ReverseCov) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_vars = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        NoiseSchedule {
            horizon: betas.len(),
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
            reverse_cov,
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.horizon {
            Err(Error::Index {
                t,
                horizon: self.horizon,
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t, with ᾱ_0 = 1.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    /// Variance of the reverse policy at step t.
    pub fn sigma_sq(&self, t: usize) -> f64 {
        match self.reverse_cov {
            ReverseCov::Beta => self.beta(t),
            ReverseCov::TildeBeta => self.posterior_var(t),
        }
    }

    /// Whether step t is stochastic; degenerate steps carry no log-density.
    pub fn is_stochastic(&self, t: usize) -> bool {
        self.sigma_sq(t) > 0.0
    }

    /// Coefficient on ε in the reverse mean: μ = x/√α_t − eps_coeff·ε.
    pub fn mean_eps_coeff(&self, t: usize) -> f64 {
        self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt() / self.alpha(t).sqrt()
    }

    /// `(scale, eps_coeff)` with f = scale·x − eps_coeff·ε.
    pub fn x0_coeffs(&self, t: usize, mode: X0Mode) -> (f64, f64) {
        let a = match mode {
            X0Mode::AlphaBar => self.alpha_bar(t),
            X0Mode::StepAlpha => self.alpha(t),
        };
        (1.0 / a.sqrt(), (1.0 - a).sqrt() / a.sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: usize,
    pub weight: f64,
}

/// One reverse-process rollout. `states[0]` is x_T and `states[T]` is x_0;
/// `step_logprobs[i]` is the log-density of the transition out of `states[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub prompt: usize,
    pub states: Vec<Vec<f64>>,
    pub step_logprobs: Vec<f64>,
    pub reward: Option<f64>,
    pub behavior_params_version: u64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.step_logprobs.len()
    }

    /// x_t for t in 0..=T.
    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[self.horizon() - t]
    }

    /// log p(x_{t−1} | x_t) recorded at sampling time.
    pub fn logprob(&self, t: usize) -> f64 {
        self.step_logprobs[self.horizon() - t]
    }

    pub fn x0(&self) -> &[f64] {
        self.states.last().expect("trajectory has states")
    }
}

/// Reparameterized forward marginal: √ᾱ_t x0 + √(1−ᾱ_t) noise.
pub fn q_sample(schedule: &NoiseSchedule, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    Ok(q_sample_with(ab, x0, noise))
}

pub(crate) fn q_sample_with(alpha_bar: f64, x0: &[f64], noise: &[f64]) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(noise).map(|(x, n)| a * x + b * n).collect()
}

/// μ from an ε prediction: (x_t − β_t/√(1−ᾱ_t) ε) / √α_t.
pub fn mean_from_eps(schedule: &NoiseSchedule, x_t: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
    let inv = 1.0 / schedule.alpha(t).sqrt();
    let k = schedule.mean_eps_coeff(t);
    x_t.iter().zip(eps).map(|(x, e)| inv * x - k * e).collect()
}

pub fn reverse_mean(
    denoiser: DenoiserRef<'_>,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    z: usize,
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    Ok(mean_from_eps(schedule, x_t, t, &denoiser.eps(x_t, t, z)))
}

/// Log-density of N(mean, σ²I) at x. Zero when σ² = 0 by convention.
pub fn gaussian_logprob(x: &[f64], mean: &[f64], sigma_sq: f64) -> f64 {
    if sigma_sq <= 0.0 {
        return 0.0;
    }
    let d = x.len() as f64;
    -l2_dist_sq(x, mean) / (2.0 * sigma_sq) - 0.5 * d * (LN_2PI + sigma_sq.ln())
}

/// One reverse step with caller-supplied standard normal noise.
pub fn sample_step(
    denoiser: DenoiserRef<'_>,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    z: usize,
    noise: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let mean = reverse_mean(denoiser, schedule, x_t, t, z)?;
    Ok(step_from_mean(mean, schedule.sigma_sq(t), noise))
}

pub(crate) fn step_from_mean(mean: Vec<f64>, sigma_sq: f64, noise: &[f64]) -> (Vec<f64>, f64) {
    if sigma_sq <= 0.0 {
        return (mean, 0.0);
    }
    let sigma = sigma_sq.sqrt();
    let next: Vec<f64> = mean.iter().zip(noise).map(|(m, n)| m + sigma * n).collect();
    let lp = gaussian_logprob(&next, &mean, sigma_sq);
    (next, lp)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Samples x_T ~ N(0, I) and runs all T reverse steps.
pub fn sample_trajectory<R: Rng + ?Sized>(
    denoiser: DenoiserRef<'_>,
    schedule: &NoiseSchedule,
    z: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    sample_trajectory_anchored(denoiser, None, schedule, z, 0, rng).map(|(traj, _)| traj)
}

/// Like [`sample_trajectory`], also summing the stepwise KL to `anchor` along
/// the path (degenerate steps excluded). Returns 0 when `anchor` is `None`.
pub fn sample_trajectory_anchored<R: Rng + ?Sized>(
    denoiser: DenoiserRef<'_>,
    anchor: Option<DenoiserRef<'_>>,
    schedule: &NoiseSchedule,
    z: usize,
    version: u64,
    rng: &mut R,
) -> Result<(Trajectory, f64)> {
    let dim = denoiser.arch.dim();
    let horizon = schedule.horizon;
    let mut states = Vec::with_capacity(horizon + 1);
    let mut step_logprobs = Vec::with_capacity(horizon);
    let mut kl_sum = 0.0;
    states.push(standard_normal(rng, dim));
    for t in (1..=horizon).rev() {
        let x_t = states.last().expect("nonempty");
        let mean = mean_from_eps(schedule, x_t, t, &denoiser.eps(x_t, t, z));
        let sigma_sq = schedule.sigma_sq(t);
        if let Some(anchor) = anchor {
            if sigma_sq > 0.0 {
                let anchor_mean = mean_from_eps(schedule, x_t, t, &anchor.eps(x_t, t, z));
                kl_sum += l2_dist_sq(&mean, &anchor_mean) / (2.0 * sigma_sq);
            }
        }
        let noise = if sigma_sq > 0.0 {
            standard_normal(rng, dim)
        } else {
            vec![0.0; dim]
        };
        let (next, lp) = step_from_mean(mean, sigma_sq, &noise);
        if !next.iter().all(|v| v.is_finite()) || !lp.is_finite() {
            return Err(Error::Rollout { step: t });
        }
        states.push(next);
        step_logprobs.push(lp);
    }
    Ok((
        Trajectory {
            prompt: z,
            states,
            step_logprobs,
            reward: None,
            behavior_params_version: version,
        },
        kl_sum,
    ))
}

/// KL(N(mu_a, σ²I) ‖ N(mu_b, σ²I)) = ‖mu_a − mu_b‖² / (2σ²).
pub fn stepwise_gaussian_kl(mu_a: &[f64], mu_b: &[f64], sigma_sq: f64) -> Result<f64> {
    if !(sigma_sq > 0.0) {
        return Err(Error::Domain(format!("sigma_sq must be positive, got {sigma_sq}")));
    }
    Ok(l2_dist_sq(mu_a, mu_b) / (2.0 * sigma_sq))
}

/// Clean-sample prediction f(x_t, t, z) from the ε prediction.
pub fn x0_predictor(
    denoiser: DenoiserRef<'_>,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    z: usize,
    mode: X0Mode,
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    Ok(x0_from_eps(schedule, x_t, t, &denoiser.eps(x_t, t, z), mode))
}

pub fn x0_from_eps(schedule: &NoiseSchedule, x_t: &[f64], t: usize, eps: &[f64], mode: X0Mode) -> Vec<f64> {
    let (scale, k) = schedule.x0_coeffs(t, mode);
    x_t.iter().zip(eps).map(|(x, e)| scale * x - k * e).collect()
}
