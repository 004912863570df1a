//! Online policy-gradient fine-tuning with a per-step KL penalty toward the
//! pretrained model.
//!
//! The reverse process is treated as a T-step MDP whose action at step t is
//! x_{t−1} and whose only reward is r(x_0, z) at the end. Each round samples
//! `m` trajectories from the current policy, then takes several gradient
//! steps on random transitions from that round. Transitions that have become
//! off-policy are reweighted by the per-step likelihood ratio, which is held
//! constant under differentiation.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{gaussian_logprob, mean_from_eps, NoiseSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::eval::{mean_and_se, rollout_batch};
use crate::model::{clip_grad_norm, l2_dist_sq, Arch, Denoiser, DenoiserRef, MlpArch, ParamSnapshot};
use crate::optim::{AdamW, AdamWConfig};
use crate::parallel::summed_gradient;
use crate::rewards::RewardScenario;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RLConfig {
    /// Reward weight α.
    pub alpha: f64,
    /// KL weight β.
    pub beta: f64,
    /// Trajectories sampled per round.
    pub m: usize,
    /// Transitions per gradient step.
    pub n: usize,
    pub grad_steps_per_round: usize,
    pub max_grad_norm: f64,
    pub total_online_samples: usize,
    pub use_baseline: bool,
    /// Clamp importance ratios to [1/c, c].
    #[serde(default)]
    pub is_ratio_clamp: Option<f64>,
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default = "default_value_lr")]
    pub value_lr: f64,
    /// Keep a snapshot every this many rounds; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_value_lr() -> f64 {
    1e-3
}

fn default_weight_decay() -> f64 {
    1e-2
}

impl Default for RLConfig {
    fn default() -> Self {
        RLConfig {
            alpha: 10.0,
            beta: 0.01,
            m: 10,
            n: 32,
            grad_steps_per_round: 5,
            max_grad_norm: 0.1,
            total_online_samples: 20_000,
            use_baseline: true,
            is_ratio_clamp: None,
            lr: 1e-4,
            weight_decay: default_weight_decay(),
            seed: 0,
            value_lr: default_value_lr(),
            checkpoint_every: 0,
        }
    }
}

impl RLConfig {
    /// Defaults for multi-prompt runs: no value baseline, larger transition
    /// batches, and a longer sample budget.
    pub fn multi_prompt() -> Self {
        RLConfig {
            n: 45,
            total_online_samples: 50_000,
            use_baseline: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::config("alpha", "must be nonnegative"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config("beta", "must be nonnegative"));
        }
        if self.m == 0 {
            return Err(Error::config("m", "must be at least 1"));
        }
        if self.n == 0 {
            return Err(Error::config("n", "must be at least 1"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::config("max_grad_norm", "must be positive"));
        }
        if let Some(c) = self.is_ratio_clamp {
            if !(c >= 1.0) {
                return Err(Error::config("is_ratio_clamp", "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// One stored step of a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub x_t: Vec<f64>,
    pub x_prev: Vec<f64>,
    pub t: usize,
    pub z: usize,
    pub reward: f64,
    pub behavior_logprob: f64,
}

/// All stochastic transitions of a trajectory; the degenerate final step is
/// skipped.
pub fn transitions(traj: &Trajectory, schedule: &NoiseSchedule) -> Vec<Transition> {
    let reward = traj.reward.expect("reward attached before building transitions");
    (1..=traj.horizon())
        .filter(|&t| schedule.is_stochastic(t))
        .map(|t| Transition {
            x_t: traj.state(t).to_vec(),
            x_prev: traj.state(t - 1).to_vec(),
            t,
            z: traj.prompt,
            reward,
            behavior_logprob: traj.logprob(t),
        })
        .collect()
}

/// Learned V(x_t, t, z) subtracted from the reward.
#[derive(Clone, Debug)]
pub struct ValueBaseline {
    pub arch: Arch,
    pub params: Vec<f64>,
    opt: AdamW,
}

impl ValueBaseline {
    pub fn new<R: Rng + ?Sized>(dim: usize, horizon: usize, prompt_count: usize, lr: f64, rng: &mut R) -> Self {
        Self::with_hidden(dim, horizon, prompt_count, vec![32, 32], lr, rng)
    }

    pub fn with_hidden<R: Rng + ?Sized>(
        dim: usize,
        horizon: usize,
        prompt_count: usize,
        hidden: Vec<usize>,
        lr: f64,
        rng: &mut R,
    ) -> Self {
        let arch = Arch::Mlp(MlpArch {
            hidden,
            out_dim: 1,
            ..MlpArch::denoiser(dim, horizon, prompt_count)
        });
        let params = arch.init_params(rng);
        let opt = AdamW::new(AdamWConfig { lr, weight_decay: 0.0, ..Default::default() }, params.len());
        ValueBaseline { arch, params, opt }
    }

    pub fn predict(&self, x_t: &[f64], t: usize, z: usize) -> f64 {
        self.arch.forward(&self.params, x_t, t, z)[0]
    }

    /// Squared error (V − r)² with its gradient accumulated into `grads`.
    pub fn regression_grad(&self, params: &[f64], tr: &Transition, grads: &mut [f64]) -> f64 {
        let tape = self.arch.forward_tape(params, &tr.x_t, tr.t, tr.z);
        let resid = tape.output()[0] - tr.reward;
        self.arch.backward(params, &tape, &[2.0 * resid], grads);
        resid * resid
    }

    /// One optimizer step on the mean squared error over `batch`.
    pub fn fit_step(&mut self, batch: &[&Transition]) -> f64 {
        let params = self.params.clone();
        let (loss, mut grads) = summed_gradient(batch, params.len(), |tr, g| self.regression_grad(&params, tr, g));
        let scale = 1.0 / batch.len() as f64;
        grads.iter_mut().for_each(|g| *g *= scale);
        self.opt.step(&mut self.params, &grads);
        loss * scale
    }
}

/// Per-transition importance ratio p_θ(x_{t−1}|x_t) / p_behavior(x_{t−1}|x_t).
pub fn importance_ratio(
    denoiser: DenoiserRef<'_>,
    schedule: &NoiseSchedule,
    tr: &Transition,
    clamp: Option<f64>,
) -> Result<f64> {
    let mu = mean_from_eps(schedule, &tr.x_t, tr.t, &denoiser.eps(&tr.x_t, tr.t, tr.z));
    let lp = gaussian_logprob(&tr.x_prev, &mu, schedule.sigma_sq(tr.t));
    let w = (lp - tr.behavior_logprob).exp();
    if !w.is_finite() {
        return Err(Error::Numeric {
            what: format!("non-finite importance ratio at t={}", tr.t),
            param_norm: f64::NAN,
        });
    }
    Ok(match clamp {
        Some(c) => w.clamp(1.0 / c, c),
        None => w,
    })
}

/// w·(−α(r − b)·log p_θ(x_{t−1}|x_t)) + β·KL(p_θ ‖ p_pre) at one transition,
/// with the ratio `w` and baseline `b` supplied as constants.
///
/// Gradient is accumulated into `grads` when given.
#[allow(clippy::too_many_arguments)]
pub fn pg_surrogate(
    denoiser: DenoiserRef<'_>,
    p_pre: DenoiserRef<'_>,
    schedule: &NoiseSchedule,
    tr: &Transition,
    alpha: f64,
    beta: f64,
    ratio: f64,
    baseline: f64,
    grads: Option<&mut [f64]>,
) -> f64 {
    let t = tr.t;
    let sigma_sq = schedule.sigma_sq(t);
    debug_assert!(sigma_sq > 0.0, "degenerate step in policy-gradient loss");
    let tape = denoiser.eps_tape(&tr.x_t, t, tr.z);
    let mu = mean_from_eps(schedule, &tr.x_t, t, tape.output());
    let advantage = tr.reward - baseline;
    let lp = gaussian_logprob(&tr.x_prev, &mu, sigma_sq);
    let mut loss = -ratio * alpha * advantage * lp;
    let mut grad_mu: Vec<f64> = tr
        .x_prev
        .iter()
        .zip(&mu)
        .map(|(x, m)| -ratio * alpha * advantage * (x - m) / sigma_sq)
        .collect();
    if beta != 0.0 {
        let mu_pre = mean_from_eps(schedule, &tr.x_t, t, &p_pre.eps(&tr.x_t, t, tr.z));
        loss += beta * l2_dist_sq(&mu, &mu_pre) / (2.0 * sigma_sq);
        for (g, (m, mp)) in grad_mu.iter_mut().zip(mu.iter().zip(&mu_pre)) {
            *g += beta * (m - mp) / sigma_sq;
        }
    }
    if let Some(grads) = grads {
        let k = -schedule.mean_eps_coeff(t);
        let grad_eps: Vec<f64> = grad_mu.iter().map(|g| g * k).collect();
        denoiser.backward(&tape, &grad_eps, grads);
    }
    loss
}

/// The transition loss used by [`run_dpok`]: the importance ratio is
/// evaluated at the current parameters and frozen, and the baseline (if any)
/// comes from `value`.
pub fn pg_loss(
    denoiser: DenoiserRef<'_>,
    p_pre: DenoiserRef<'_>,
    schedule: &NoiseSchedule,
    tr: &Transition,
    config: &RLConfig,
    value: Option<&ValueBaseline>,
    grads: Option<&mut [f64]>,
) -> Result<f64> {
    let ratio = importance_ratio(denoiser, schedule, tr, config.is_ratio_clamp)?;
    let baseline = match value {
        Some(v) if config.use_baseline => v.predict(&tr.x_t, tr.t, tr.z),
        _ => 0.0,
    };
    Ok(pg_surrogate(
        denoiser,
        p_pre,
        schedule,
        tr,
        config.alpha,
        config.beta,
        ratio,
        baseline,
        grads,
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub samples_consumed: usize,
    pub mean_reward: f64,
    pub mean_quality: f64,
    pub kl_estimate: f64,
    pub grad_norm: f64,
    pub is_discards: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let with_loss = self.rows.iter().any(|r| r.train_loss.is_some());
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "round,samples_consumed,mean_reward,mean_quality,kl_estimate,grad_norm,is_discards")?;
        writeln!(out, "{}", if with_loss { ",train_loss" } else { "" })?;
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{},{},{}",
                r.round, r.samples_consumed, r.mean_reward, r.mean_quality, r.kl_estimate, r.grad_norm, r.is_discards
            )?;
            if with_loss {
                write!(out, ",{}", r.train_loss.map(|v| v.to_string()).unwrap_or_default())?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<MetricsLog> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty metrics file".into()))?;
        let with_loss = header.ends_with(",train_loss");
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad metrics row {line:?}"));
            if f.len() < 7 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
            rows.push(MetricsRow {
                round: int(0)?,
                samples_consumed: int(1)?,
                mean_reward: num(2)?,
                mean_quality: num(3)?,
                kl_estimate: num(4)?,
                grad_norm: num(5)?,
                is_discards: int(6)?,
                train_loss: if with_loss && f.len() > 7 && !f[7].is_empty() { Some(num(7)?) } else { None },
            });
        }
        Ok(MetricsLog { rows })
    }
}

#[derive(Clone, Debug)]
pub struct DpokOutput {
    pub snapshot: ParamSnapshot,
    pub metrics: MetricsLog,
    pub checkpoints: Vec<ParamSnapshot>,
}

/// Fine-tunes `denoiser` (initialized from `p_pre`) until
/// `total_online_samples` trajectories have been drawn.
pub fn run_dpok(
    denoiser: &mut Denoiser,
    p_pre: &ParamSnapshot,
    schedule: &NoiseSchedule,
    scenario: &RewardScenario,
    config: &RLConfig,
) -> Result<DpokOutput> {
    config.validate()?;
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut value = config.use_baseline.then(|| {
        ValueBaseline::new(
            scenario.dim(),
            schedule.horizon,
            denoiser.arch.prompt_count(),
            config.value_lr,
            &mut rng,
        )
    });
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        denoiser.params.len(),
    );
    let pre = p_pre.view();
    let mut metrics = MetricsLog::default();
    let mut checkpoints = Vec::new();
    let mut last_good = denoiser.snapshot();
    let mut consumed = 0;
    let mut round = 0;
    while consumed < config.total_online_samples {
        let batch_size = config.m.min(config.total_online_samples - consumed);
        let round_seed: u64 = rng.gen();
        let batch = rollout_batch(
            denoiser.view(),
            Some(pre),
            schedule,
            scenario,
            batch_size,
            round_seed,
            denoiser.version,
        )?;
        consumed += batch_size;
        let rewards: Vec<f64> = batch.iter().map(|(tr, _)| tr.reward.expect("reward")).collect();
        let mut quality = 0.0;
        for (traj, _) in &batch {
            quality += scenario.quality(traj.x0(), traj.prompt)?;
        }
        let kl = batch.iter().map(|(_, k)| k).sum::<f64>() / batch.len() as f64;
        let buffer: Vec<Transition> = batch.iter().flat_map(|(traj, _)| transitions(traj, schedule)).collect();

        let mut discards = 0;
        let mut grad_norm_sum = 0.0;
        let mut steps_taken = 0;
        if !buffer.is_empty() && (config.alpha != 0.0 || config.beta != 0.0) {
            for _ in 0..config.grad_steps_per_round {
                let picked = pick(&buffer, config.n, &mut rng);
                let view = denoiser.view();
                let value_ref = value.as_ref();
                let (lost, mut grads) = summed_gradient(&picked, view.params.len(), |tr, g| {
                    match pg_loss(view, pre, schedule, tr, config, value_ref, Some(g)) {
                        Ok(_) => 0.0,
                        Err(_) => 1.0,
                    }
                });
                discards += lost as usize;
                if grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Diverged {
                        stage: "dpok",
                        step: round,
                        last_good: Box::new(last_good),
                    });
                }
                grad_norm_sum += clip_grad_norm(&mut grads, config.max_grad_norm);
                steps_taken += 1;
                opt.step(&mut denoiser.params, &grads);
                denoiser.version += 1;
            }
        } else {
            // all-zero losses: the optimizer still applies its decay
            let zeros = vec![0.0; denoiser.params.len()];
            for _ in 0..config.grad_steps_per_round {
                opt.step(&mut denoiser.params, &zeros);
                denoiser.version += 1;
            }
        }
        if denoiser.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                stage: "dpok",
                step: round,
                last_good: Box::new(last_good),
            });
        }
        last_good = denoiser.snapshot();

        if let Some(v) = value.as_mut() {
            if !buffer.is_empty() {
                for _ in 0..config.grad_steps_per_round {
                    let picked = pick(&buffer, config.n, &mut rng);
                    let refs: Vec<&Transition> = picked.iter().collect();
                    v.fit_step(&refs);
                }
            }
        }

        metrics.rows.push(MetricsRow {
            round,
            samples_consumed: consumed,
            mean_reward: mean_and_se(&rewards).0,
            mean_quality: quality / batch.len() as f64,
            kl_estimate: kl,
            grad_norm: if steps_taken > 0 { grad_norm_sum / steps_taken as f64 } else { 0.0 },
            is_discards: discards,
            train_loss: None,
        });
        round += 1;
        if config.checkpoint_every > 0 && round % config.checkpoint_every == 0 {
            checkpoints.push(last_good.clone());
        }
    }
    Ok(DpokOutput {
        snapshot: denoiser.snapshot(),
        metrics,
        checkpoints,
    })
}

fn pick<R: Rng + ?Sized>(buffer: &[Transition], n: usize, rng: &mut R) -> Vec<Transition> {
    if n <= buffer.len() {
        sample_indices(rng, buffer.len(), n)
            .into_iter()
            .map(|i| buffer[i].clone())
            .collect()
    } else {
        (0..n).map(|_| buffer[rng.gen_range(0..buffer.len())].clone()).collect()
    }
}

/// Monte Carlo estimate of Σ_t E_{p_θ(x_t)}[KL(p_θ(·|x_t) ‖ p_pre(·|x_t))]
/// over `n_traj` on-policy rollouts; returns (mean, standard error).
pub fn estimate_kl_to_pretrained(
    denoiser: DenoiserRef<'_>,
    p_pre: DenoiserRef<'_>,
    schedule: &NoiseSchedule,
    scenario: &RewardScenario,
    n_traj: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_traj == 0 {
        return Err(Error::Precondition("n_traj must be at least 1".into()));
    }
    let batch = rollout_batch(denoiser, Some(p_pre), schedule, scenario, n_traj, seed, 0)?;
    let kls: Vec<f64> = batch.iter().map(|(_, k)| *k).collect();
    let (mean, se) = mean_and_se(&kls);
    Ok((mean, if n_traj > 1 { se } else { 0.0 }))
}
