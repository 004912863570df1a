//! Synthetic prompt scenarios: a ground-truth Gaussian mixture per prompt, a
//! target mode per prompt, a reward peaked on that target, and an exact
//! log-likelihood quality metric.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{standard_normal, Prompt};
use crate::error::{Error, Result};
use crate::model::l2_dist_sq;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    NegSqDist,
    #[default]
    Rbf,
}

/// Isotropic Gaussian mixture with a shared component variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
    pub variance: f64,
    pub weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Exact log-density, log-sum-exp stabilized.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        let norm = -0.5 * d * (LN_2PI + self.variance.ln());
        let terms: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| w.ln() + norm - l2_dist_sq(x, m) / (2.0 * self.variance))
            .collect();
        log_sum_exp(&terms)
    }

    /// Index of the component with the largest posterior responsibility.
    pub fn assign(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, (m, w)) in self.means.iter().zip(&self.weights).enumerate() {
            let score = w.ln() - l2_dist_sq(x, m) / (2.0 * self.variance);
            if score > best.1 {
                best = (k, score);
            }
        }
        best.0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = sample_categorical(&self.weights, rng);
        let sd = self.variance.sqrt();
        standard_normal(rng, self.dim())
            .into_iter()
            .zip(&self.means[k])
            .map(|(e, m)| m + sd * e)
            .collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (m, w) in self.means.iter().zip(&self.weights) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardScenario {
    pub name: String,
    pub prompts: Vec<Prompt>,
    pub mixtures: Vec<GaussianMixture>,
    pub targets: Vec<Vec<f64>>,
    pub reward_kind: RewardKind,
    pub reward_scale: f64,
}

impl RewardScenario {
    pub fn dim(&self) -> usize {
        self.targets[0].len()
    }

    pub fn prompt_count(&self) -> usize {
        self.prompts.len()
    }

    fn mixture(&self, z: usize) -> Result<&GaussianMixture> {
        self.mixtures.get(z).ok_or(Error::UnknownPrompt(z))
    }

    pub fn reward(&self, x0: &[f64], z: usize) -> Result<f64> {
        let target = self.targets.get(z).ok_or(Error::UnknownPrompt(z))?;
        let scaled = l2_dist_sq(x0, target) / self.reward_scale;
        Ok(match self.reward_kind {
            RewardKind::NegSqDist => -scaled,
            RewardKind::Rbf => (-scaled).exp(),
        })
    }

    /// Ground-truth log-density of x0 under prompt z's mixture.
    pub fn quality(&self, x0: &[f64], z: usize) -> Result<f64> {
        Ok(self.mixture(z)?.log_density(x0))
    }

    /// Radius around a target that counts as landing in the target mode:
    /// two component standard deviations.
    pub fn target_radius(&self, z: usize) -> Result<f64> {
        Ok(2.0 * self.mixture(z)?.variance.sqrt())
    }

    pub fn in_target_mode(&self, x0: &[f64], z: usize) -> Result<bool> {
        let radius = self.target_radius(z)?;
        let target = &self.targets[z];
        Ok(l2_dist_sq(x0, target) <= radius * radius)
    }

    pub fn target_component(&self, z: usize) -> Result<usize> {
        let mix = self.mixture(z)?;
        mix.means
            .iter()
            .position(|m| m == &self.targets[z])
            .ok_or_else(|| Error::Domain(format!("target of prompt {z} is not a component mean")))
    }

    pub fn sample_prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let weights: Vec<f64> = self.prompts.iter().map(|p| p.weight).collect();
        self.prompts[sample_categorical(&weights, rng)].id
    }

    pub fn sample_x0<R: Rng + ?Sized>(&self, z: usize, rng: &mut R) -> Result<Vec<f64>> {
        Ok(self.mixture(z)?.sample(rng))
    }

    /// The same scenario with all prompt mass on `z`. Prompt ids are kept so
    /// a model conditioned on the full table still applies.
    pub fn restrict_to(&self, z: usize) -> Result<RewardScenario> {
        self.mixture(z)?;
        let mut out = self.clone();
        out.name = format!("{}[{}]", self.name, z);
        for p in out.prompts.iter_mut() {
            p.weight = if p.id == z { 1.0 } else { 0.0 };
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::config("prompts", "empty prompt table"));
        }
        if self.mixtures.len() != self.prompts.len() || self.targets.len() != self.prompts.len() {
            return Err(Error::config("mixtures", "one mixture and target per prompt required"));
        }
        for (i, p) in self.prompts.iter().enumerate() {
            if p.id != i {
                return Err(Error::config("prompts", "prompt ids must be 0..n in order"));
            }
        }
        let total: f64 = self.prompts.iter().map(|p| p.weight).sum();
        if (total - 1.0).abs() > 1e-12 || self.prompts.iter().any(|p| p.weight < 0.0) {
            return Err(Error::config("prompts", format!("weights sum to {total}")));
        }
        if !(self.reward_scale > 0.0) {
            return Err(Error::config("reward_scale", "must be positive"));
        }
        let dim = self.dim();
        for (z, mix) in self.mixtures.iter().enumerate() {
            let total: f64 = mix.weights.iter().sum();
            if (total - 1.0).abs() > 1e-12 || mix.weights.iter().any(|w| *w <= 0.0) {
                return Err(Error::config("mixtures", format!("prompt {z} weights sum to {total}")));
            }
            if mix.means.len() != mix.weights.len() || mix.means.iter().any(|m| m.len() != dim) {
                return Err(Error::config("mixtures", format!("prompt {z} has inconsistent shapes")));
            }
            if !(mix.variance > 0.0) {
                return Err(Error::config("mixtures", format!("prompt {z} variance must be positive")));
            }
            self.target_component(z)?;
        }
        Ok(())
    }

    /// Short content hash of the JSON form, used to tie datasets to scenarios.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scenario serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen::<f64>() * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

const COMPONENT_VARIANCE: f64 = 0.04;

fn single(name: &str, means: Vec<Vec<f64>>, weights: Vec<f64>, target: usize) -> RewardScenario {
    let target_mean = means[target].clone();
    RewardScenario {
        name: name.to_string(),
        prompts: vec![Prompt { id: 0, weight: 1.0 }],
        mixtures: vec![GaussianMixture {
            means,
            variance: COMPONENT_VARIANCE,
            weights,
        }],
        targets: vec![target_mean],
        reward_kind: RewardKind::Rbf,
        reward_scale: 1.0,
    }
}

/// Three modes on a triangle; the rewarded mode carries 0.3 of the mass.
pub fn color_scenario() -> RewardScenario {
    let r = 1.2;
    let means = (0..3)
        .map(|k| {
            let a = std::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
            vec![round6(r * a.cos()), round6(r * a.sin())]
        })
        .collect();
    single("color", means, vec![0.5, 0.3, 0.2], 1)
}

/// Two modes; the rewarded one carries 0.4.
pub fn composition_scenario() -> RewardScenario {
    single(
        "composition",
        vec![vec![-1.0, 0.5], vec![1.0, -0.5]],
        vec![0.6, 0.4],
        1,
    )
}

/// Four equally weighted modes on a square.
pub fn counting_scenario() -> RewardScenario {
    single(
        "counting",
        vec![vec![1.0, 1.0], vec![-1.0, 1.0], vec![-1.0, -1.0], vec![1.0, -1.0]],
        vec![0.25; 4],
        0,
    )
}

/// Three modes on a line; the rewarded one at the end carries 0.2.
pub fn location_scenario() -> RewardScenario {
    single(
        "location",
        vec![vec![-1.6, 0.0], vec![0.0, 0.0], vec![1.6, 0.0]],
        vec![0.4, 0.4, 0.2],
        2,
    )
}

/// The four single-prompt mixtures as one scenario with uniform prompt mass.
pub fn multi_scenario() -> RewardScenario {
    let parts = [
        color_scenario(),
        composition_scenario(),
        counting_scenario(),
        location_scenario(),
    ];
    RewardScenario {
        name: "multi".into(),
        prompts: (0..4).map(|id| Prompt { id, weight: 0.25 }).collect(),
        mixtures: parts.iter().map(|s| s.mixtures[0].clone()).collect(),
        targets: parts.iter().map(|s| s.targets[0].clone()).collect(),
        reward_kind: RewardKind::Rbf,
        reward_scale: 1.0,
    }
}

/// One prompt whose data puts 0.9 of its mass on an unrewarded mode and 0.1
/// on the rewarded one.
pub fn biased_scenario() -> RewardScenario {
    single("biased", vec![vec![-1.0, 0.0], vec![1.0, 0.0]], vec![0.9, 0.1], 1)
}

pub fn standard_scenarios() -> Vec<RewardScenario> {
    vec![
        color_scenario(),
        composition_scenario(),
        counting_scenario(),
        location_scenario(),
        multi_scenario(),
    ]
}

/// Looks up a built-in scenario by name (`color`, `composition`, `counting`,
/// `location`, `multi`, `biased`).
pub fn scenario_by_name(name: &str) -> Result<RewardScenario> {
    standard_scenarios()
        .into_iter()
        .chain(std::iter::once(biased_scenario()))
        .find(|s| s.name == name)
        .ok_or_else(|| Error::UnknownScenario(name.to_string()))
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reward_examples() {
        let mut s = single("t", vec![vec![0.0]], vec![1.0], 0);
        assert_eq!(s.reward(&[0.0], 0).unwrap(), 1.0);
        s.reward_kind = RewardKind::NegSqDist;
        assert_eq!(s.reward(&[0.0], 0).unwrap(), 0.0);
        s.reward_scale = 2.0;
        assert_eq!(s.reward(&[2.0], 0).unwrap(), -2.0);
        assert!(matches!(s.reward(&[0.0], 1), Err(Error::UnknownPrompt(1))));
    }

    #[test]
    fn rbf_is_bounded() {
        let s = color_scenario();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let x = standard_normal(&mut rng, 2).iter().map(|v| 3.0 * v).collect::<Vec<_>>();
            let r = s.reward(&x, 0).unwrap();
            assert!(r > 0.0 && r <= 1.0);
            assert!(r <= s.reward(&s.targets[0], 0).unwrap());
        }
    }

    #[test]
    fn quality_examples() {
        let mut mix = GaussianMixture {
            means: vec![vec![0.5]],
            variance: 1.0,
            weights: vec![1.0],
        };
        assert_abs_diff_eq!(mix.log_density(&[0.5]), -0.5 * LN_2PI, epsilon = 1e-14);

        mix.means = vec![vec![-1.0], vec![1.0]];
        mix.weights = vec![0.5, 0.5];
        let n = |x: f64, m: f64| (-(x - m) * (x - m) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let expected = (0.5 * n(0.0, -1.0) + 0.5 * n(0.0, 1.0)).ln();
        assert_abs_diff_eq!(mix.log_density(&[0.0]), expected, epsilon = 1e-14);

        let x = [0.3, -0.7];
        let s = counting_scenario();
        let mut permuted = s.mixtures[0].clone();
        permuted.means.reverse();
        assert_abs_diff_eq!(s.mixtures[0].log_density(&x), permuted.log_density(&x), epsilon = 1e-14);
    }

    #[test]
    fn quality_far_from_modes_is_finite() {
        let s = biased_scenario();
        let q = s.quality(&[40.0, -40.0], 0).unwrap();
        assert!(q.is_finite() && q < -1e4);
    }

    #[test]
    fn quality_density_integrates_to_one() {
        // Importance sampling with a wide Gaussian proposal.
        let s = color_scenario();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scale: f64 = 2.0;
        let n = 200_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let e = standard_normal(&mut rng, 2);
            let x: Vec<f64> = e.iter().map(|v| scale * v).collect();
            let log_q = -(LN_2PI + 2.0 * scale.ln()) - e.iter().map(|v| v * v).sum::<f64>() / 2.0;
            let w = (s.quality(&x, 0).unwrap() - log_q).exp();
            sum += w;
            sum_sq += w * w;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn biased_scenario_contract() {
        let s = biased_scenario();
        s.validate().unwrap();
        assert_eq!(s.mixtures[0].weights, vec![0.9, 0.1]);
        let wrong = &s.mixtures[0].means[0];
        assert!(s.reward(wrong, 0).unwrap() < s.reward(&s.targets[0], 0).unwrap());
    }

    #[test]
    fn standard_scenarios_contract() {
        let all = standard_scenarios();
        assert_eq!(all, standard_scenarios());
        assert_eq!(all.len(), 5);
        for s in &all {
            s.validate().unwrap();
            for z in 0..s.prompt_count() {
                let target_r = s.reward(&s.targets[z], z).unwrap();
                let k = s.target_component(z).unwrap();
                for (j, m) in s.mixtures[z].means.iter().enumerate() {
                    if j != k {
                        assert!(s.reward(m, z).unwrap() < target_r);
                    }
                }
            }
        }
        let multi = all.iter().find(|s| s.name == "multi").unwrap();
        assert!(multi.prompts.iter().all(|p| p.weight == 0.25));
    }

    #[test]
    fn restrict_keeps_table() {
        let s = multi_scenario().restrict_to(2).unwrap();
        s.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| s.sample_prompt(&mut rng) == 2));
        assert!(multi_scenario().restrict_to(7).is_err());
    }

    #[test]
    fn json_round_trip_and_hash() {
        let s = multi_scenario();
        let json = serde_json::to_string(&s).unwrap();
        let back: RewardScenario = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.content_hash(), s.content_hash());
        assert_ne!(s.content_hash(), biased_scenario().content_hash());
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["reward_kind"], "rbf");
        assert_eq!(v["reward_scale"], 1.0);
    }

    #[test]
    fn sampled_mode_frequencies() {
        let s = color_scenario();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 3];
        let n = 20_000;
        for _ in 0..n {
            let x = s.sample_x0(0, &mut rng).unwrap();
            counts[s.mixtures[0].assign(&x)] += 1;
        }
        for (c, w) in counts.iter().zip(&s.mixtures[0].weights) {
            assert!((*c as f64 / n as f64 - w).abs() < 0.015);
        }
    }
}
