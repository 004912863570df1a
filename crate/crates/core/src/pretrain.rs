//! Fits the denoiser to scenario data with the simplified ε-objective,
//! producing the frozen reference model every fine-tuning run starts from.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample_with, standard_normal, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{l2_dist_sq, Denoiser, DenoiserRef, ParamSnapshot};
use crate::optim::{AdamW, AdamWConfig};
use crate::parallel::summed_gradient;
use crate::rewards::RewardScenario;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Examples per prompt; each minibatch holds `batch * prompt_count`
    /// examples so multi-prompt scenarios see the same data per prompt.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Learning rate decays on a cosine to `lr * final_lr_fraction`.
    #[serde(default = "default_final_lr_fraction")]
    pub final_lr_fraction: f64,
}

fn default_final_lr_fraction() -> f64 {
    0.05
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 12_000,
            batch: 64,
            lr: 1e-3,
            seed: 0,
            final_lr_fraction: default_final_lr_fraction(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub snapshot: ParamSnapshot,
    /// (step, mean minibatch loss)
    pub losses: Vec<(usize, f64)>,
}

impl PretrainOutput {
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "step,loss")?;
        for (step, loss) in &self.losses {
            writeln!(out, "{step},{loss}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// ‖noise − ε(q_sample(x0, t, noise), t, z)‖².
pub fn denoising_loss(
    denoiser: DenoiserRef<'_>,
    schedule: &NoiseSchedule,
    x0: &[f64],
    z: usize,
    t: usize,
    noise: &[f64],
) -> Result<f64> {
    schedule.check_step(t)?;
    let x_t = q_sample_with(schedule.alpha_bar(t), x0, noise);
    Ok(l2_dist_sq(noise, &denoiser.eps(&x_t, t, z)))
}

/// [`denoising_loss`] with its parameter gradient accumulated into `grads`.
pub fn denoising_loss_grad(
    denoiser: DenoiserRef<'_>,
    schedule: &NoiseSchedule,
    x0: &[f64],
    z: usize,
    t: usize,
    noise: &[f64],
    grads: &mut [f64],
) -> f64 {
    let x_t = q_sample_with(schedule.alpha_bar(t), x0, noise);
    let tape = denoiser.eps_tape(&x_t, t, z);
    let resid: Vec<f64> = tape.output().iter().zip(noise).map(|(e, n)| e - n).collect();
    let grad_out: Vec<f64> = resid.iter().map(|r| 2.0 * r).collect();
    denoiser.backward(&tape, &grad_out, grads);
    resid.iter().map(|r| r * r).sum()
}

struct Example {
    x0: Vec<f64>,
    z: usize,
    t: usize,
    noise: Vec<f64>,
}

/// Trains `denoiser` in place and returns the frozen result.
pub fn pretrain(
    denoiser: &mut Denoiser,
    schedule: &NoiseSchedule,
    scenario: &RewardScenario,
    config: &PretrainConfig,
) -> Result<PretrainOutput> {
    config.validate()?;
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(AdamWConfig::with_lr(config.lr), denoiser.params.len());
    let mut losses = Vec::with_capacity(config.steps);
    let mut last_good = denoiser.snapshot();
    let dim = scenario.dim();
    let batch_size = config.batch * scenario.prompt_count();
    for step in 0..config.steps {
        let batch: Vec<Example> = (0..batch_size)
            .map(|_| {
                let z = scenario.sample_prompt(&mut rng);
                let x0 = scenario.sample_x0(z, &mut rng).expect("prompt from table");
                let t = rng.gen_range(1..=schedule.horizon);
                let noise = standard_normal(&mut rng, dim);
                Example { x0, z, t, noise }
            })
            .collect();
        let view = denoiser.view();
        let (loss, mut grads) = summed_gradient(&batch, view.params.len(), |ex, g| {
            denoising_loss_grad(view, schedule, &ex.x0, ex.z, ex.t, &ex.noise, g)
        });
        let scale = 1.0 / batch_size as f64;
        grads.iter_mut().for_each(|g| *g *= scale);
        let loss = loss * scale;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                stage: "pretrain",
                step,
                last_good: Box::new(last_good),
            });
        }
        let progress = step as f64 / config.steps.max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.config.lr = config.lr * (config.final_lr_fraction + (1.0 - config.final_lr_fraction) * cosine);
        opt.step(&mut denoiser.params, &grads);
        losses.push((step, loss));
        if step % 1000 == 999 {
            last_good = denoiser.snapshot();
        }
    }
    denoiser.version += 1;
    Ok(PretrainOutput {
        snapshot: denoiser.snapshot(),
        losses,
    })
}
