//! Reward-weighted supervised fine-tuning on a fixed dataset drawn from the
//! pretrained model, with two KL regularizers:
//!
//! * `KlD` shifts every reward by γ, pulling the sample weights toward
//!   uniform (the pure data-likelihood term).
//! * `KlO` keeps the reward weights and adds γ‖f_pre − f_θ‖², penalizing
//!   drift of the clean-sample prediction away from the pretrained one.
//!
//! Both losses are scaled by 1/(2β̃_t), with β̃_t the forward posterior
//! variance, and only steps t ≥ 2 are trained.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample_with, standard_normal, x0_from_eps, NoiseSchedule, X0Mode};
use crate::error::{Error, Result};
use crate::eval::{evaluate, rollout_batch};
use crate::model::{l2_dist_sq, Denoiser, DenoiserRef, ParamSnapshot};
use crate::optim::{AdamW, AdamWConfig};
use crate::parallel::summed_gradient;
use crate::rewards::RewardScenario;
use crate::rl::{MetricsLog, MetricsRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KlMode {
    #[serde(rename = "KL_D")]
    KlD,
    #[serde(rename = "KL_O")]
    KlO,
    #[serde(rename = "none")]
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SFTConfig {
    pub gamma: f64,
    pub kl_mode: KlMode,
    pub dataset_size: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub x0_mode: X0Mode,
    /// Evaluate on fresh rollouts every this many steps; 0 evaluates only at
    /// the start and end.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
}

fn default_weight_decay() -> f64 {
    1e-2
}

fn default_n_eval() -> usize {
    200
}

impl Default for SFTConfig {
    fn default() -> Self {
        SFTConfig {
            gamma: 2.0,
            kl_mode: KlMode::KlO,
            dataset_size: 20_000,
            batch: 128,
            steps: 8_000,
            lr: 1e-4,
            weight_decay: default_weight_decay(),
            seed: 0,
            x0_mode: X0Mode::AlphaBar,
            eval_every: 1_000,
            n_eval: default_n_eval(),
        }
    }
}

impl SFTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if self.dataset_size < self.batch {
            return Err(Error::config("dataset_size", "must be at least the batch size"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("gamma", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub x0: Vec<f64>,
    pub z: usize,
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SFTDataset {
    pub records: Vec<SftRecord>,
    pub seed: u64,
    pub scenario_hash: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    #[serde(rename = "M")]
    m: usize,
    seed: u64,
    scenario_hash: String,
}

impl SFTDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// JSON lines: a `{M, seed, scenario_hash}` header, then one
    /// `{x0, z, r}` record per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        let header = DatasetHeader {
            m: self.records.len(),
            seed: self.seed,
            scenario_hash: self.scenario_hash.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        writeln!(out)?;
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec)?;
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<SFTDataset> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let first = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&first)?;
        let mut records = Vec::with_capacity(header.m);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<SftRecord>(&line)?);
        }
        if records.len() != header.m {
            return Err(Error::Format(format!(
                "header declares {} records, found {}",
                header.m,
                records.len()
            )));
        }
        Ok(SFTDataset {
            records,
            seed: header.seed,
            scenario_hash: header.scenario_hash,
        })
    }
}

pub fn build_dataset(
    p_pre: &ParamSnapshot,
    schedule: &NoiseSchedule,
    scenario: &RewardScenario,
    size: usize,
    seed: u64,
) -> Result<SFTDataset> {
    if size == 0 {
        return Err(Error::config("dataset_size", "must be at least 1"));
    }
    let batch = rollout_batch(p_pre.view(), None, schedule, scenario, size, seed, p_pre.version)?;
    let records = batch
        .into_iter()
        .map(|(traj, _)| SftRecord {
            x0: traj.x0().to_vec(),
            z: traj.prompt,
            r: traj.reward.expect("reward"),
        })
        .collect();
    Ok(SFTDataset {
        records,
        seed,
        scenario_hash: scenario.content_hash(),
    })
}

/// max(r + γ, 0).
pub fn filtered_weight(r: f64, gamma: f64) -> f64 {
    (r + gamma).max(0.0)
}

/// Per-sample loss at step t with caller-supplied noise; the parameter
/// gradient is accumulated into `grads` when given.
#[allow(clippy::too_many_arguments)]
pub fn sft_loss(
    denoiser: DenoiserRef<'_>,
    p_pre: DenoiserRef<'_>,
    schedule: &NoiseSchedule,
    record: &SftRecord,
    t: usize,
    noise: &[f64],
    config: &SFTConfig,
    grads: Option<&mut [f64]>,
) -> f64 {
    let sigma_sq = schedule.posterior_var(t);
    if !(sigma_sq > 0.0) {
        return 0.0;
    }
    let (data_weight, anchor_weight) = match config.kl_mode {
        KlMode::KlD => (filtered_weight(record.r, config.gamma), 0.0),
        KlMode::KlO if record.r + config.gamma < 0.0 => (0.0, 0.0),
        KlMode::KlO => (record.r, config.gamma),
        KlMode::None => (filtered_weight(record.r, 0.0), 0.0),
    };
    if data_weight == 0.0 && anchor_weight == 0.0 {
        return 0.0;
    }
    let x_t = q_sample_with(schedule.alpha_bar(t), &record.x0, noise);
    let tape = denoiser.eps_tape(&x_t, t, record.z);
    let f = x0_from_eps(schedule, &x_t, t, tape.output(), config.x0_mode);
    let scale = 1.0 / (2.0 * sigma_sq);
    let mut loss = data_weight * l2_dist_sq(&record.x0, &f) * scale;
    // ∂loss/∂f
    let mut grad_f: Vec<f64> = f
        .iter()
        .zip(&record.x0)
        .map(|(fi, xi)| 2.0 * data_weight * (fi - xi) * scale)
        .collect();
    if anchor_weight != 0.0 {
        let f_pre = x0_from_eps(schedule, &x_t, t, &p_pre.eps(&x_t, t, record.z), config.x0_mode);
        loss += anchor_weight * l2_dist_sq(&f_pre, &f) * scale;
        for (g, (fi, pi)) in grad_f.iter_mut().zip(f.iter().zip(&f_pre)) {
            *g += 2.0 * anchor_weight * (fi - pi) * scale;
        }
    }
    if let Some(grads) = grads {
        let (_, k) = schedule.x0_coeffs(t, config.x0_mode);
        let grad_eps: Vec<f64> = grad_f.iter().map(|g| -k * g).collect();
        denoiser.backward(&tape, &grad_eps, grads);
    }
    loss
}

#[derive(Clone, Debug)]
pub struct SftOutput {
    pub snapshot: ParamSnapshot,
    pub metrics: MetricsLog,
}

struct Example<'a> {
    record: &'a SftRecord,
    t: usize,
    noise: Vec<f64>,
}

pub fn run_sft(
    denoiser: &mut Denoiser,
    p_pre: &ParamSnapshot,
    dataset: &SFTDataset,
    schedule: &NoiseSchedule,
    scenario: &RewardScenario,
    config: &SFTConfig,
) -> Result<SftOutput> {
    config.validate()?;
    if schedule.horizon < 2 {
        return Err(Error::config("T", "supervised fine-tuning needs at least two steps"));
    }
    if dataset.is_empty() {
        return Err(Error::config("dataset_size", "empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eval_seed: u64 = rng.gen();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        denoiser.params.len(),
    );
    let pre = p_pre.view();
    let dim = scenario.dim();
    let mut metrics = MetricsLog::default();
    let mut last_good = denoiser.snapshot();
    let mut log_eval = |step: usize, denoiser: &Denoiser, loss: Option<f64>, grad_norm: f64| -> Result<()> {
        let stats = evaluate(denoiser.view(), Some(pre), schedule, scenario, config.n_eval, eval_seed)?;
        metrics.rows.push(MetricsRow {
            round: step,
            samples_consumed: step * config.batch,
            mean_reward: stats.mean_reward,
            mean_quality: stats.mean_quality,
            kl_estimate: stats.kl_estimate,
            grad_norm,
            is_discards: 0,
            train_loss: loss,
        });
        Ok(())
    };
    if config.n_eval > 0 {
        log_eval(0, denoiser, None, 0.0)?;
    }
    for step in 0..config.steps {
        let batch: Vec<Example> = (0..config.batch)
            .map(|_| Example {
                record: &dataset.records[rng.gen_range(0..dataset.len())],
                t: rng.gen_range(2..=schedule.horizon),
                noise: standard_normal(&mut rng, dim),
            })
            .collect();
        let view = denoiser.view();
        let (loss, mut grads) = summed_gradient(&batch, view.params.len(), |ex, g| {
            sft_loss(view, pre, schedule, ex.record, ex.t, &ex.noise, config, Some(g))
        });
        let scale = 1.0 / config.batch as f64;
        grads.iter_mut().for_each(|g| *g *= scale);
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                stage: "sft",
                step,
                last_good: Box::new(last_good),
            });
        }
        opt.step(&mut denoiser.params, &grads);
        denoiser.version += 1;
        let done = step + 1;
        if done % 100 == 0 {
            last_good = denoiser.snapshot();
        }
        let at_eval = if config.eval_every > 0 {
            done % config.eval_every == 0 || done == config.steps
        } else {
            done == config.steps
        };
        if at_eval && config.n_eval > 0 {
            log_eval(done, denoiser, Some(loss * scale), crate::model::l2_norm(&grads))?;
        }
    }
    Ok(SftOutput {
        snapshot: denoiser.snapshot(),
        metrics,
    })
}
