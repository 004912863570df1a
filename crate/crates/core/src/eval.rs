//! Batched rollouts and Monte Carlo evaluation of a model against a scenario.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_trajectory_anchored, NoiseSchedule, Trajectory};
use crate::error::Result;
use crate::model::DenoiserRef;
use crate::parallel::ordered_map;
use crate::rewards::RewardScenario;

/// Draws `n` trajectories with rewards attached, plus the stepwise KL sum to
/// `anchor` along each. Trajectory i uses its own stream seeded from
/// `(seed, i)`, so the batch is reproducible and evaluations of different
/// models with the same seed share their random numbers.
pub fn rollout_batch(
    model: DenoiserRef<'_>,
    anchor: Option<DenoiserRef<'_>>,
    schedule: &NoiseSchedule,
    scenario: &RewardScenario,
    n: usize,
    seed: u64,
    version: u64,
) -> Result<Vec<(Trajectory, f64)>> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n).map(|_| master.gen()).collect();
    ordered_map(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
        let z = scenario.sample_prompt(&mut rng);
        let (mut traj, kl) = sample_trajectory_anchored(model, anchor, schedule, z, version, &mut rng)?;
        traj.reward = Some(scenario.reward(traj.x0(), z)?);
        Ok((traj, kl))
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptStats {
    pub prompt: usize,
    pub count: usize,
    pub mean_reward: f64,
    pub mean_quality: f64,
    pub kl_estimate: f64,
    pub target_mass: f64,
    /// Fraction of samples assigned to each mixture component.
    pub mode_freqs: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub n: usize,
    pub mean_reward: f64,
    pub reward_se: f64,
    pub mean_quality: f64,
    pub kl_estimate: f64,
    pub target_mass: f64,
    pub per_prompt: Vec<PromptStats>,
}

pub fn evaluate(
    model: DenoiserRef<'_>,
    anchor: Option<DenoiserRef<'_>>,
    schedule: &NoiseSchedule,
    scenario: &RewardScenario,
    n: usize,
    seed: u64,
) -> Result<EvalStats> {
    let batch = rollout_batch(model, anchor, schedule, scenario, n, seed, 0)?;
    summarize(&batch, scenario)
}

pub fn summarize(batch: &[(Trajectory, f64)], scenario: &RewardScenario) -> Result<EvalStats> {
    let mut per_prompt: Vec<PromptStats> = scenario
        .mixtures
        .iter()
        .enumerate()
        .map(|(z, m)| PromptStats {
            prompt: z,
            mode_freqs: vec![0.0; m.weights.len()],
            ..Default::default()
        })
        .collect();
    let mut rewards = Vec::with_capacity(batch.len());
    let (mut quality, mut kl, mut mass) = (0.0, 0.0, 0.0);
    for (traj, k) in batch {
        let z = traj.prompt;
        let x0 = traj.x0();
        let r = traj.reward.unwrap_or(scenario.reward(x0, z)?);
        let q = scenario.quality(x0, z)?;
        let hit = if scenario.in_target_mode(x0, z)? { 1.0 } else { 0.0 };
        rewards.push(r);
        quality += q;
        kl += k;
        mass += hit;
        let p = &mut per_prompt[z];
        p.count += 1;
        p.mean_reward += r;
        p.mean_quality += q;
        p.kl_estimate += k;
        p.target_mass += hit;
        p.mode_freqs[scenario.mixtures[z].assign(x0)] += 1.0;
    }
    for p in per_prompt.iter_mut().filter(|p| p.count > 0) {
        let c = p.count as f64;
        p.mean_reward /= c;
        p.mean_quality /= c;
        p.kl_estimate /= c;
        p.target_mass /= c;
        p.mode_freqs.iter_mut().for_each(|f| *f /= c);
    }
    let n = batch.len() as f64;
    let (mean_reward, reward_se) = mean_and_se(&rewards);
    Ok(EvalStats {
        n: batch.len(),
        mean_reward,
        reward_se,
        mean_quality: quality / n,
        kl_estimate: kl / n,
        target_mass: mass / n,
        per_prompt,
    })
}

pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
