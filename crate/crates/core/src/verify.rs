//! Numerical certificates for the gradient and KL identities the fine-tuning
//! code relies on.
//!
//! Affine reverse chains x_{t−1} = A_t x_t + b_t + σ_t ξ keep every marginal
//! Gaussian, so expectations of quadratic rewards and KLs have closed forms.
//! Those closed forms (differentiated by finite differences) are the oracles
//! against which the Monte Carlo estimators are checked. For a small
//! nonlinear denoiser in one dimension, the model density p_θ(x_0) is
//! computed by propagating densities through the reverse kernels on a grid.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{mean_from_eps, q_sample_with, x0_from_eps, NoiseSchedule, X0Mode};
use crate::error::{Error, Result};
use crate::model::{Arch, DenoiserRef, LinearArch, MlpArch};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Outcome of one verification. `lhs`/`rhs` are the two quantities compared
/// (for gradient checks: estimate and oracle at the worst coordinate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub name: String,
    pub pass: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub se: f64,
    pub n: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Affine-Gaussian reverse chain. `a[t-1]`, `b[t-1]` and `sigma_sq[t-1]`
/// define the step out of x_t.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianChain {
    pub dim: usize,
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
    pub sigma_sq: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticReward {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl QuadraticReward {
    /// r(x) = −xᵀQx + cᵀx
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        -(x.transpose() * &self.q * x)[(0, 0)] + self.c.dot(x)
    }
}

impl LinearGaussianChain {
    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    /// The reverse chain of a linear ε-predictor under `schedule`, for prompt z.
    pub fn from_linear_denoiser(arch: &LinearArch, params: &[f64], schedule: &NoiseSchedule, z: usize) -> Self {
        let d = arch.dim;
        let mut a = Vec::with_capacity(arch.horizon);
        let mut b = Vec::with_capacity(arch.horizon);
        for t in 1..=arch.horizon {
            let off = arch.step_offset(t);
            let w = DMatrix::from_row_slice(d, d, &params[off..off + d * d]);
            let bias = DVector::from_column_slice(&params[off + d * d + z * d..off + d * d + (z + 1) * d]);
            let inv = 1.0 / schedule.alpha(t).sqrt();
            let k = schedule.mean_eps_coeff(t);
            a.push(DMatrix::identity(d, d) * inv - w * k);
            b.push(bias * -k);
        }
        LinearGaussianChain {
            dim: d,
            a,
            b,
            sigma_sq: (1..=arch.horizon).map(|t| schedule.sigma_sq(t)).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.horizon() * (self.dim * self.dim + self.dim)
    }

    /// Flat parameters: for each step, A_t row-major then b_t.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (a, b) in self.a.iter().zip(&self.b) {
            for i in 0..self.dim {
                for j in 0..self.dim {
                    out.push(a[(i, j)]);
                }
            }
            out.extend(b.iter());
        }
        out
    }

    pub fn with_params(&self, p: &[f64]) -> Self {
        let d = self.dim;
        let block = d * d + d;
        let mut out = self.clone();
        for t in 0..self.horizon() {
            let s = &p[t * block..(t + 1) * block];
            out.a[t] = DMatrix::from_row_slice(d, d, &s[..d * d]);
            out.b[t] = DVector::from_column_slice(&s[d * d..]);
        }
        out
    }

    fn mean(&self, t: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.a[t - 1] * x + &self.b[t - 1]
    }

    /// Draws x_T..x_0 (index 0 is x_T).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<DVector<f64>> {
        let d = self.dim;
        let mut states = Vec::with_capacity(self.horizon() + 1);
        states.push(normal_vec(rng, d));
        for t in (1..=self.horizon()).rev() {
            let x = states.last().expect("nonempty");
            let noise = normal_vec(rng, d) * self.sigma_sq[t - 1].sqrt();
            states.push(self.mean(t, x) + noise);
        }
        states
    }

    /// ∇ log p(x_{t−1} | x_t) with respect to the flat parameters, added to `out`.
    fn add_step_score(&self, t: usize, x_t: &DVector<f64>, x_prev: &DVector<f64>, scale: f64, out: &mut [f64]) {
        let d = self.dim;
        let resid = (x_prev - self.mean(t, x_t)) / self.sigma_sq[t - 1];
        let off = (t - 1) * (d * d + d);
        for i in 0..d {
            for j in 0..d {
                out[off + i * d + j] += scale * resid[i] * x_t[j];
            }
            out[off + d * d + i] += scale * resid[i];
        }
    }
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)))
}

/// Gaussian marginals of x_T..x_0, starting from N(0, I).
pub fn exact_marginals(chain: &LinearGaussianChain) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let d = chain.dim;
    let mut out = Vec::with_capacity(chain.horizon() + 1);
    out.push((DVector::zeros(d), DMatrix::identity(d, d)));
    for t in (1..=chain.horizon()).rev() {
        let (m, c) = out.last().expect("nonempty");
        let a = &chain.a[t - 1];
        let m_next = a * m + &chain.b[t - 1];
        let c_next = a * c * a.transpose() + DMatrix::identity(d, d) * chain.sigma_sq[t - 1];
        out.push((m_next, c_next));
    }
    out
}

/// E[r(x_0)] = −tr(QC_0) − m_0ᵀQm_0 + cᵀm_0.
pub fn exact_expected_reward(chain: &LinearGaussianChain, reward: &QuadraticReward) -> f64 {
    let (m, c) = exact_marginals(chain).pop().expect("x_0 marginal");
    -(&reward.q * &c).trace() - (m.transpose() * &reward.q * &m)[(0, 0)] + reward.c.dot(&m)
}

/// KL(N(m1, c1) ‖ N(m2, c2)).
pub fn gaussian_kl(m1: &DVector<f64>, c1: &DMatrix<f64>, m2: &DVector<f64>, c2: &DMatrix<f64>) -> Result<f64> {
    let d = m1.len() as f64;
    let chol2 = c2
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("covariance is not positive definite".into()))?;
    let chol1 = c1
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("covariance is not positive definite".into()))?;
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = chol2.solve(c1).trace();
    let diff = m2 - m1;
    let maha = diff.dot(&chol2.solve(&diff));
    Ok(0.5 * (trace + maha - d + logdet(&chol2.l()) - logdet(&chol1.l())))
}

/// Σ_t E_{p_θ(x_t)}[KL(p_θ(·|x_t) ‖ p_pre(·|x_t))] in closed form.
pub fn exact_stepwise_kl_sum(theta: &LinearGaussianChain, pre: &LinearGaussianChain) -> f64 {
    exact_stepwise_kl(theta, pre).iter().sum()
}

/// E_{p_θ(x_t)}[KL_t] for each step; entry `t - 1` belongs to the step out of x_t.
pub fn exact_stepwise_kl(theta: &LinearGaussianChain, pre: &LinearGaussianChain) -> Vec<f64> {
    let marg = exact_marginals(theta);
    let horizon = theta.horizon();
    (1..=horizon)
        .map(|t| {
            let (m, c) = &marg[horizon - t];
            let da = &theta.a[t - 1] - &pre.a[t - 1];
            let db = &theta.b[t - 1] - &pre.b[t - 1];
            let mean_part = (&da * m + db).norm_squared();
            let cov_part = (da.transpose() * &da * c).trace();
            (mean_part + cov_part) / (2.0 * theta.sigma_sq[t - 1])
        })
        .collect()
}

/// Mean and covariance of the stacked trajectory (x_T, …, x_0).
pub fn joint_distribution(chain: &LinearGaussianChain) -> (DVector<f64>, DMatrix<f64>) {
    let d = chain.dim;
    let horizon = chain.horizon();
    let n = d * (horizon + 1);
    // states = M ξ + μ with ξ ~ N(0, I_n)
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut mu = DVector::<f64>::zeros(n);
    m.view_mut((0, 0), (d, d)).copy_from(&DMatrix::identity(d, d));
    for j in 1..=horizon {
        let t = horizon - j + 1;
        let a = &chain.a[t - 1];
        let prev_rows = m.rows((j - 1) * d, d).clone_owned();
        let mut rows = a * prev_rows;
        for i in 0..d {
            rows[(i, j * d + i)] += chain.sigma_sq[t - 1].sqrt();
        }
        m.rows_mut(j * d, d).copy_from(&rows);
        let prev_mu = mu.rows((j - 1) * d, d).clone_owned();
        mu.rows_mut(j * d, d).copy_from(&(a * prev_mu + &chain.b[t - 1]));
    }
    let cov = &m * m.transpose();
    (mu, cov)
}

fn check_same_noise(theta: &LinearGaussianChain, pre: &LinearGaussianChain) -> Result<()> {
    if theta.sigma_sq != pre.sigma_sq || theta.dim != pre.dim {
        return Err(Error::Precondition("chains must share dimension and schedule".into()));
    }
    if theta.sigma_sq.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Precondition("deterministic steps have no KL".into()));
    }
    Ok(())
}

fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, params: &[f64], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

struct Moments {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    n: usize,
}

impl Moments {
    fn new(k: usize) -> Self {
        Moments {
            sum: vec![0.0; k],
            sum_sq: vec![0.0; k],
            n: 0,
        }
    }

    fn push(&mut self, v: &[f64]) {
        for ((s, q), x) in self.sum.iter_mut().zip(self.sum_sq.iter_mut()).zip(v) {
            *s += x;
            *q += x * x;
        }
        self.n += 1;
    }

    fn mean_se(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let se = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt())
            .collect();
        (mean, se)
    }
}

/// Two-sided per-coordinate threshold (in standard errors) that gives `k`
/// simultaneous comparisons the same overall false-alarm rate as a single
/// 3-SE comparison.
pub fn familywise_z(k: usize) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let single = 2.0 * Normal::standard().cdf(-3.0);
    Normal::standard().inverse_cdf(1.0 - single / (2.0 * k.max(1) as f64))
}

/// Worst coordinate (by |est − oracle| / allowed) of a gradient comparison.
/// Each coordinate may differ by max(tolerance, z·SE).
#[allow(clippy::too_many_arguments)]
fn compare_gradients(
    name: &str,
    est: &[f64],
    se: &[f64],
    oracle: &[f64],
    z: f64,
    tolerance: f64,
    n: usize,
    seed: u64,
    note: Option<String>,
) -> VerifyReport {
    let mut worst = (0usize, -1.0f64);
    let mut pass = true;
    for i in 0..est.len() {
        let allowed = tolerance.max(z * se[i]);
        let gap = (est[i] - oracle[i]).abs();
        if gap > allowed {
            pass = false;
        }
        let ratio = if allowed > 0.0 { gap / allowed } else { f64::INFINITY };
        if ratio > worst.1 {
            worst = (i, ratio);
        }
    }
    let i = worst.0;
    VerifyReport {
        name: name.to_string(),
        pass,
        lhs: est.get(i).copied().unwrap_or(0.0),
        rhs: oracle.get(i).copied().unwrap_or(0.0),
        se: se.get(i).copied().unwrap_or(0.0),
        n,
        seed,
        note: Some(match note {
            Some(n) => format!("worst coordinate {i}; {n}"),
            None => format!("worst coordinate {i}"),
        }),
    }
}

/// Score-function estimate of ∇E[r(x_0)] versus finite differences of the
/// closed-form expected reward, in every chain parameter.
pub fn verify_lemma1(
    chain: &LinearGaussianChain,
    reward: &QuadraticReward,
    n_samples: usize,
    tolerance: f64,
    seed: u64,
) -> Result<VerifyReport> {
    if n_samples < 2 {
        return Err(Error::Precondition("need at least two samples".into()));
    }
    if chain.sigma_sq.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Precondition("every step must be stochastic".into()));
    }
    let k = chain.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut moments = Moments::new(k);
    let horizon = chain.horizon();
    let mut g = vec![0.0; k];
    for _ in 0..n_samples {
        let states = chain.sample(&mut rng);
        let r = reward.eval(states.last().expect("x_0"));
        g.iter_mut().for_each(|v| *v = 0.0);
        for t in 1..=horizon {
            chain.add_step_score(t, &states[horizon - t], &states[horizon - t + 1], r, &mut g);
        }
        moments.push(&g);
    }
    let (est, se) = moments.mean_se();
    let oracle = fd_gradient(|p| exact_expected_reward(&chain.with_params(p), reward), &chain.params(), 1e-5);
    Ok(compare_gradients("lemma1_score_function_gradient", &est, &se, &oracle, 3.0, tolerance, n_samples, seed, None))
}

/// KL between the x_0 marginals versus the sum of stepwise KLs, plus the
/// equality of that sum with the exact joint-trajectory KL.
pub fn verify_lemma2(theta: &LinearGaussianChain, pre: &LinearGaussianChain, tolerance: f64) -> Result<VerifyReport> {
    check_same_noise(theta, pre)?;
    let (m1, c1) = exact_marginals(theta).pop().expect("x_0");
    let (m2, c2) = exact_marginals(pre).pop().expect("x_0");
    let lhs = gaussian_kl(&m1, &c1, &m2, &c2)?;
    let rhs = exact_stepwise_kl_sum(theta, pre);
    let (jm1, jc1) = joint_distribution(theta);
    let (jm2, jc2) = joint_distribution(pre);
    let joint = gaussian_kl(&jm1, &jc1, &jm2, &jc2)?;
    let pass = kl_bound_holds(lhs, rhs, joint, tolerance);
    Ok(VerifyReport {
        name: "lemma2_marginal_kl_bound".into(),
        pass,
        lhs,
        rhs,
        se: 0.0,
        n: 0,
        seed: 0,
        note: Some(format!("joint trajectory KL {joint:.12e}")),
    })
}

/// Marginal KL below the stepwise sum, and the sum equal to the joint KL.
pub fn kl_bound_holds(marginal: f64, stepwise: f64, joint: f64, tolerance: f64) -> bool {
    marginal <= stepwise + tolerance && (stepwise - joint).abs() <= tolerance
}

/// Product-rule split of ∇ Σ_t E_{p_θ(x_t)}[KL_t]: the direct term plus the
/// score term that weights each path's earlier scores by the later KL.
/// Their Monte Carlo sum is checked against finite differences of the exact
/// total, at a per-coordinate threshold adjusted so the whole gradient is
/// one 3-SE test (see [`familywise_z`]); the size of the score term is
/// reported.
pub fn verify_a3_decomposition(
    theta: &LinearGaussianChain,
    pre: &LinearGaussianChain,
    n_samples: usize,
    tolerance: f64,
    seed: u64,
) -> Result<(VerifyReport, f64)> {
    check_same_noise(theta, pre)?;
    if n_samples < 2 {
        return Err(Error::Precondition("need at least two samples".into()));
    }
    let d = theta.dim;
    let k = theta.num_params();
    let horizon = theta.horizon();
    // E[score] = 0, so centering KL_t at its exact mean leaves the score
    // term unbiased and cuts its variance.
    let kl_means = exact_stepwise_kl(theta, pre);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = Moments::new(k);
    let mut second_sum = vec![0.0; k];
    let mut direct = vec![0.0; k];
    let mut score_term = vec![0.0; k];
    let mut prefix = vec![0.0; k];
    for _ in 0..n_samples {
        let states = theta.sample(&mut rng);
        direct.iter_mut().for_each(|v| *v = 0.0);
        score_term.iter_mut().for_each(|v| *v = 0.0);
        prefix.iter_mut().for_each(|v| *v = 0.0);
        // walk from x_T down; prefix holds Σ_{t' > t} ∇ log p(x_{t'−1}|x_{t'})
        for t in (1..=horizon).rev() {
            let x_t = &states[horizon - t];
            let da = &theta.a[t - 1] - &pre.a[t - 1];
            let db = &theta.b[t - 1] - &pre.b[t - 1];
            let gap = &da * x_t + db;
            let s2 = theta.sigma_sq[t - 1];
            let centered_kl = gap.norm_squared() / (2.0 * s2) - kl_means[t - 1];
            let off = (t - 1) * (d * d + d);
            for i in 0..d {
                for j in 0..d {
                    direct[off + i * d + j] += gap[i] * x_t[j] / s2;
                }
                direct[off + d * d + i] += gap[i] / s2;
            }
            for (s, p) in score_term.iter_mut().zip(&prefix) {
                *s += centered_kl * p;
            }
            theta.add_step_score(t, x_t, &states[horizon - t + 1], 1.0, &mut prefix);
        }
        let combined: Vec<f64> = direct.iter().zip(&score_term).map(|(a, b)| a + b).collect();
        total.push(&combined);
        for (acc, v) in second_sum.iter_mut().zip(&score_term) {
            *acc += v;
        }
    }
    let (est, se) = total.mean_se();
    let oracle = fd_gradient(|p| exact_stepwise_kl_sum(&theta.with_params(p), pre), &theta.params(), 1e-5);
    let second_norm = second_sum.iter().map(|v| (v / n_samples as f64).powi(2)).sum::<f64>().sqrt();
    let z = familywise_z(k);
    let report = compare_gradients(
        "a3_product_rule_decomposition",
        &est,
        &se,
        &oracle,
        z,
        tolerance,
        n_samples,
        seed,
        Some(format!("threshold {z:.3} SE over {k} coordinates; score-term norm {second_norm:.6e}")),
    );
    Ok((report, second_norm))
}

/// A random affine chain with entries of A_t in (−1.2, 1.2), b_t in (−1, 1).
pub fn random_chain<R: Rng + ?Sized>(rng: &mut R, dim: usize, sigma_sq: &[f64]) -> LinearGaussianChain {
    LinearGaussianChain {
        dim,
        a: sigma_sq
            .iter()
            .map(|_| DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.2..1.2)))
            .collect(),
        b: sigma_sq
            .iter()
            .map(|_| DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0)))
            .collect(),
        sigma_sq: sigma_sq.to_vec(),
    }
}

/// Same chain with every parameter shifted by N(0, scale²).
pub fn perturbed_chain<R: Rng + ?Sized>(rng: &mut R, chain: &LinearGaussianChain, scale: f64) -> LinearGaussianChain {
    let p: Vec<f64> = chain
        .params()
        .iter()
        .map(|v| v + scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    chain.with_params(&p)
}

/// The d = 1, T = 3 chain used as the default gradient oracle instance.
pub fn default_chain() -> (LinearGaussianChain, QuadraticReward) {
    let chain = LinearGaussianChain {
        dim: 1,
        a: vec![
            DMatrix::from_element(1, 1, 0.9),
            DMatrix::from_element(1, 1, 0.8),
            DMatrix::from_element(1, 1, 0.7),
        ],
        b: vec![
            DVector::from_element(1, 0.2),
            DVector::from_element(1, -0.1),
            DVector::from_element(1, 0.3),
        ],
        sigma_sq: vec![0.1, 0.2, 0.3],
    };
    let reward = QuadraticReward {
        q: DMatrix::from_element(1, 1, 0.5),
        c: DVector::from_element(1, 1.0),
    };
    (chain, reward)
}

// ---------------------------------------------------------------------------
// Supervised-objective bounds on a tiny nonlinear model.

/// Setup for checking the reward-weighted likelihood bounds. The reverse
/// kernels use β̃_t for t ≥ 2 and β_1 at the final (decoder) step so that
/// every step has a density.
pub struct Lemma3Setup<'a> {
    pub arch: &'a Arch,
    pub schedule: &'a NoiseSchedule,
    pub theta: &'a [f64],
    pub pre: &'a [f64],
    pub reward: &'a (dyn Fn(f64) -> f64 + Sync),
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma3Report {
    /// The reward-shifted ELBO bound.
    pub shifted: VerifyReport,
    /// The bound with the pretrained prediction inserted, using
    /// ‖a + b‖² ≤ 2‖a‖² + 2‖b‖².
    pub anchored: VerifyReport,
    /// Mean margin (bound − weighted NLL) of the anchored bound with unit
    /// rather than doubled factors. Informational; may be negative.
    pub anchored_unit_factor_margin: f64,
}

fn lemma3_var(schedule: &NoiseSchedule, t: usize) -> f64 {
    if t == 1 {
        schedule.beta(1)
    } else {
        schedule.posterior_var(t)
    }
}

const GRID_LO: f64 = -10.0;
const GRID_HI: f64 = 10.0;
const GRID_N: usize = 4001;

/// Density of x_0 on a uniform grid over [−10, 10], obtained by pushing
/// N(0, 1) through every reverse kernel with trapezoid quadrature.
pub fn grid_density_x0(model: DenoiserRef<'_>, schedule: &NoiseSchedule) -> Vec<f64> {
    let h = (GRID_HI - GRID_LO) / (GRID_N - 1) as f64;
    let grid: Vec<f64> = (0..GRID_N).map(|i| GRID_LO + i as f64 * h).collect();
    let mut density: Vec<f64> = grid.iter().map(|x| (-0.5 * x * x - 0.5 * LN_2PI).exp()).collect();
    for t in (1..=schedule.horizon).rev() {
        let var = lemma3_var(schedule, t);
        let sd = var.sqrt();
        let norm = 1.0 / (2.0 * std::f64::consts::PI * var).sqrt();
        let mut next = vec![0.0; GRID_N];
        for (i, &x) in grid.iter().enumerate() {
            let w = if i == 0 || i == GRID_N - 1 { 0.5 * h } else { h };
            let mass = w * density[i];
            if mass == 0.0 {
                continue;
            }
            let mu = mean_from_eps(schedule, &[x], t, &model.eps(&[x], t, 0))[0];
            let lo = (((mu - 12.0 * sd) - GRID_LO) / h).floor().max(0.0) as usize;
            let hi = ((((mu + 12.0 * sd) - GRID_LO) / h).ceil().max(0.0) as usize).min(GRID_N - 1);
            for j in lo..=hi {
                let u = (grid[j] - mu) / sd;
                next[j] += mass * norm * (-0.5 * u * u).exp();
            }
        }
        density = next;
    }
    density
}

fn interp_density(density: &[f64], x: f64) -> f64 {
    let h = (GRID_HI - GRID_LO) / (GRID_N - 1) as f64;
    let pos = (x - GRID_LO) / h;
    if pos <= 0.0 || pos >= (GRID_N - 1) as f64 {
        return 0.0;
    }
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    density[i] * (1.0 - frac) + density[i + 1] * frac
}

fn sample_lemma3_x0<R: Rng + ?Sized>(model: DenoiserRef<'_>, schedule: &NoiseSchedule, rng: &mut R) -> f64 {
    let mut x: f64 = rng.sample(rand_distr::StandardNormal);
    for t in (1..=schedule.horizon).rev() {
        let mu = mean_from_eps(schedule, &[x], t, &model.eps(&[x], t, 0))[0];
        let e: f64 = rng.sample(rand_distr::StandardNormal);
        x = mu + lemma3_var(schedule, t).sqrt() * e;
    }
    x
}

/// Checks E_pre[−(r+γ) log p_θ(x_0)] ≤ the ELBO-based bounds, with the
/// left side from grid-propagated densities and the right side by Monte
/// Carlo over q(x_t | x_0). Passes if the mean margin is at least
/// −max(tolerance, 3 SE).
pub fn verify_lemma3_bounds(
    setup: &Lemma3Setup<'_>,
    n_x0: usize,
    n_mc: usize,
    tolerance: f64,
    seed: u64,
) -> Result<Lemma3Report> {
    let Lemma3Setup {
        arch,
        schedule,
        theta,
        pre,
        reward,
        gamma,
    } = *setup;
    if arch.dim() != 1 || arch.num_params() > 100 || schedule.horizon > 4 {
        return Err(Error::Precondition("needs d = 1, at most 100 parameters and T ≤ 4".into()));
    }
    if n_x0 < 2 || n_mc == 0 {
        return Err(Error::Precondition("need at least two x0 draws and one noise draw".into()));
    }
    let model = DenoiserRef { arch, params: theta };
    let anchor = DenoiserRef { arch, params: pre };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0s: Vec<f64> = (0..n_x0).map(|_| sample_lemma3_x0(anchor, schedule, &mut rng)).collect();
    let rewards: Vec<f64> = x0s.iter().map(|&x| reward(x)).collect();
    if let Some(r) = rewards.iter().find(|r| !(*r + gamma > 0.0)) {
        return Err(Error::Precondition(format!("r + gamma = {} is not positive", r + gamma)));
    }
    let density = grid_density_x0(model, schedule);
    let horizon = schedule.horizon;
    let ab_t = schedule.alpha_bar(horizon);
    let mut lhs_all = Vec::with_capacity(n_x0);
    let mut shifted_all = Vec::with_capacity(n_x0);
    let mut anchored_all = Vec::with_capacity(n_x0);
    let mut unit_all = Vec::with_capacity(n_x0);
    for (&x0, &r) in x0s.iter().zip(&rewards) {
        let w = r + gamma;
        let p = interp_density(&density, x0);
        let lhs = -w * p.max(f64::MIN_POSITIVE).ln();
        // KL(q(x_T|x_0) ‖ N(0, 1))
        let kl_t = 0.5 * ((1.0 - ab_t) + ab_t * x0 * x0 - 1.0 - (1.0 - ab_t).ln());
        let (mut data, mut anchor_gap, mut pre_err, mut decoder) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n_mc {
            for t in 2..=horizon {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                let x_t = q_sample_with(schedule.alpha_bar(t), &[x0], &[e]);
                let scale = 1.0 / (2.0 * schedule.posterior_var(t));
                let f = x0_from_eps(schedule, &x_t, t, &model.eps(&x_t, t, 0), X0Mode::AlphaBar)[0];
                let f_pre = x0_from_eps(schedule, &x_t, t, &anchor.eps(&x_t, t, 0), X0Mode::AlphaBar)[0];
                data += (x0 - f).powi(2) * scale;
                anchor_gap += (f_pre - f).powi(2) * scale;
                pre_err += (x0 - f_pre).powi(2) * scale;
            }
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            let x1 = q_sample_with(schedule.alpha_bar(1), &[x0], &[e]);
            let mu = mean_from_eps(schedule, &x1, 1, &model.eps(&x1, 1, 0))[0];
            let var = schedule.beta(1);
            decoder += 0.5 * (LN_2PI + var.ln()) + (x0 - mu).powi(2) / (2.0 * var);
        }
        let k = n_mc as f64;
        let (data, anchor_gap, pre_err, decoder) = (data / k, anchor_gap / k, pre_err / k, decoder / k);
        let shifted = w * (kl_t + data + decoder);
        let anchored = w * (kl_t + decoder) + r * data + 2.0 * gamma * (pre_err + anchor_gap);
        let unit = w * (kl_t + decoder) + r * data + gamma * (pre_err + anchor_gap);
        lhs_all.push(lhs);
        shifted_all.push(shifted);
        anchored_all.push(anchored);
        unit_all.push(unit);
    }
    let lhs_mean = mean(&lhs_all);
    let margin = |bound: &[f64]| -> (f64, f64, f64) {
        let diffs: Vec<f64> = bound.iter().zip(&lhs_all).map(|(b, l)| b - l).collect();
        let (m, se) = crate::eval::mean_and_se(&diffs);
        (mean(bound), m, se)
    };
    let make = |name: &str, bound: &[f64]| {
        let (rhs, m, se) = margin(bound);
        VerifyReport {
            name: name.into(),
            pass: margin_ok(m, se, tolerance),
            lhs: lhs_mean,
            rhs,
            se,
            n: n_x0,
            seed,
            note: Some(format!("margin {m:.6e}; density by grid propagation, tolerance {tolerance:e}")),
        }
    };
    Ok(Lemma3Report {
        shifted: make("lemma3_shifted_bound", &shifted_all),
        anchored: make("lemma3_anchored_bound", &anchored_all),
        anchored_unit_factor_margin: margin(&unit_all).1,
    })
}

/// A Monte Carlo mean margin (bound − value) is consistent with a valid bound.
pub fn margin_ok(mean_margin: f64, se: f64, tolerance: f64) -> bool {
    mean_margin >= -tolerance.max(3.0 * se)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Tiny one-dimensional denoiser and schedule used for the bound checks.
pub fn lemma3_model() -> (Arch, NoiseSchedule) {
    let arch = Arch::Mlp(MlpArch {
        dim: 1,
        horizon: 4,
        prompt_count: 1,
        time_freqs: 1,
        hidden: vec![8],
        out_dim: 1,
    });
    let schedule = crate::diffusion::make_schedule(
        4,
        0.1,
        0.5,
        crate::diffusion::ScheduleKind::Linear,
        crate::diffusion::ReverseCov::TildeBeta,
    )
    .expect("valid schedule");
    (arch, schedule)
}

/// A random (θ, pre) pair for [`lemma3_model`]; θ is pre plus a perturbation.
pub fn random_lemma3_pair<R: Rng + ?Sized>(arch: &Arch, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let mut pre = arch.init_params(rng);
    for p in pre.iter_mut() {
        *p += 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    let theta = pre
        .iter()
        .map(|p| p + 0.2 * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    (theta, pre)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifySuite {
    pub seed: u64,
    pub pass: bool,
    pub reports: Vec<VerifyReport>,
}

/// Runs every check with default sizes: the score-function gradient on the
/// default chain, 100 random KL-bound pairs, 20 product-rule checks, and 20
/// supervised-bound pairs (10 000 x0 draws each).
pub fn verify_all(seed: u64) -> Result<VerifySuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let (chain, reward) = default_chain();
    reports.push(verify_lemma1(&chain, &reward, 100_000, 0.0, rng.gen())?);

    let sig = [0.1, 0.2, 0.3];
    let mut kl_pass = 0;
    let mut worst: Option<VerifyReport> = None;
    for _ in 0..100 {
        let theta = random_chain(&mut rng, 1, &sig);
        let pre = random_chain(&mut rng, 1, &sig);
        let r = verify_lemma2(&theta, &pre, 1e-8)?;
        if r.pass {
            kl_pass += 1;
        }
        if worst.as_ref().is_none_or(|w| r.rhs - r.lhs < w.rhs - w.lhs) {
            worst = Some(r);
        }
    }
    let mut lemma2 = worst.expect("100 pairs");
    lemma2.name = "lemma2_marginal_kl_bound_x100".into();
    lemma2.pass = kl_pass == 100;
    lemma2.n = 100;
    lemma2.seed = seed;
    lemma2.note = Some(format!("{kl_pass}/100 pairs pass; tightest pair shown"));
    reports.push(lemma2);

    for i in 0..20 {
        let dim = 1 + i % 2;
        let theta = random_chain(&mut rng, dim, &sig);
        let pre = perturbed_chain(&mut rng, &theta, 0.3);
        let (mut r, _) = verify_a3_decomposition(&theta, &pre, 100_000, 0.0, rng.gen())?;
        r.name = format!("a3_product_rule_decomposition_{i}");
        reports.push(r);
    }

    let (arch, schedule) = lemma3_model();
    for i in 0..20 {
        let (theta, pre) = random_lemma3_pair(&arch, &mut rng);
        let gamma = rng.gen_range(0.1..2.0);
        let target = rng.gen_range(-1.0..1.0);
        let reward = move |x: f64| (-(x - target) * (x - target)).exp();
        let setup = Lemma3Setup {
            arch: &arch,
            schedule: &schedule,
            theta: &theta,
            pre: &pre,
            reward: &reward,
            gamma,
        };
        let report = verify_lemma3_bounds(&setup, 10_000, 4, 1e-3, rng.gen())?;
        let mut shifted = report.shifted;
        shifted.name = format!("lemma3_shifted_bound_{i}");
        let mut anchored = report.anchored;
        anchored.name = format!("lemma3_anchored_bound_{i}");
        reports.push(shifted);
        reports.push(anchored);
    }

    let pass = reports.iter().all(|r| r.pass);
    Ok(VerifySuite { seed, pass, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{sample_trajectory, ReverseCov};
    use crate::model::Denoiser;

    fn two_dim_chain() -> LinearGaussianChain {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        random_chain(&mut rng, 2, &[0.1, 0.2, 0.3])
    }

    #[test]
    fn marginals_match_sampling() {
        let chain = two_dim_chain();
        let (m, c) = exact_marginals(&chain).pop().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut sum = DVector::zeros(2);
        let mut outer = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let x = chain.sample(&mut rng).pop().unwrap();
            outer += &x * x.transpose();
            sum += x;
        }
        let mean = sum / n as f64;
        let cov = outer / n as f64 - &mean * mean.transpose();
        for i in 0..2 {
            let se = (c[(i, i)] / n as f64).sqrt();
            assert!((mean[i] - m[i]).abs() < 4.0 * se, "mean {i}");
        }
        assert!((cov - &c).abs().max() < 0.03 * c.abs().max());
    }

    #[test]
    fn gaussian_kl_closed_forms() {
        let z = DVector::zeros(1);
        let one = DMatrix::identity(1, 1);
        assert_eq!(gaussian_kl(&z, &one, &z, &one).unwrap(), 0.0);
        let m2 = DVector::from_element(1, 1.0);
        let c2 = DMatrix::from_element(1, 1, 2.0);
        let kl = gaussian_kl(&z, &one, &m2, &c2).unwrap();
        assert!((kl - 0.5 * 2f64.ln()).abs() < 1e-14);
        assert!(gaussian_kl(&z, &one, &z, &DMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn joint_blocks_reproduce_marginals() {
        let chain = two_dim_chain();
        let (mu, cov) = joint_distribution(&chain);
        let marg = exact_marginals(&chain);
        for (j, (m, c)) in marg.iter().enumerate() {
            let mj = mu.rows(2 * j, 2);
            let cj = cov.view((2 * j, 2 * j), (2, 2));
            assert!((mj - m).abs().max() < 1e-12);
            assert!((cj - c).abs().max() < 1e-12);
        }
    }

    #[test]
    fn linear_denoiser_chain_matches_reverse_mean() {
        let schedule = crate::diffusion::make_schedule(3, 0.1, 0.3, crate::diffusion::ScheduleKind::Linear, ReverseCov::Beta).unwrap();
        let arch = LinearArch {
            dim: 2,
            horizon: 3,
            prompt_count: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params: Vec<f64> = (0..Arch::Linear(arch.clone()).num_params())
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        let chain = LinearGaussianChain::from_linear_denoiser(&arch, &params, &schedule, 1);
        let full = Arch::Linear(arch);
        let model = DenoiserRef { arch: &full, params: &params };
        let x = [0.3, -1.2];
        for t in 1..=3 {
            let mu = mean_from_eps(&schedule, &x, t, &model.eps(&x, t, 1));
            let chain_mu = chain.mean(t, &DVector::from_column_slice(&x));
            assert!((mu[0] - chain_mu[0]).abs() < 1e-12 && (mu[1] - chain_mu[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectory_sampler_matches_exact_moments() {
        let schedule = crate::diffusion::make_schedule(4, 0.1, 0.4, crate::diffusion::ScheduleKind::Linear, ReverseCov::TildeBeta).unwrap();
        let arch = LinearArch {
            dim: 1,
            horizon: 4,
            prompt_count: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = Denoiser::zeros(Arch::Linear(arch.clone()));
        for p in net.params.iter_mut() {
            *p = rng.gen_range(-0.8..0.8);
        }
        let chain = LinearGaussianChain::from_linear_denoiser(&arch, &net.params, &schedule, 0);
        let (m, c) = exact_marginals(&chain).pop().unwrap();
        let n = 50_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_trajectory(net.view(), &schedule, 0, &mut rng).unwrap().x0()[0])
            .collect();
        let (mean, se) = crate::eval::mean_and_se(&draws);
        assert!((mean - m[0]).abs() < 4.0 * se);
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - c[(0, 0)]).abs() < 0.03 * c[(0, 0)]);
    }

    #[test]
    fn default_lemma1_passes() {
        let (chain, reward) = default_chain();
        let report = verify_lemma1(&chain, &reward, 100_000, 0.0, 1).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.n, 100_000);
    }

    #[test]
    fn lemma1_negative_control_and_preconditions() {
        let (chain, reward) = default_chain();
        assert!(matches!(verify_lemma1(&chain, &reward, 0, 0.0, 1), Err(Error::Precondition(_))));
        let oracle = fd_gradient(|p| exact_expected_reward(&chain.with_params(p), &reward), &chain.params(), 1e-5);
        let flipped: Vec<f64> = oracle.iter().map(|v| -v).collect();
        let se = vec![1e-3; oracle.len()];
        assert!(compare_gradients("x", &oracle, &se, &oracle, 3.0, 0.0, 1, 0, None).pass);
        assert!(!compare_gradients("x", &flipped, &se, &oracle, 3.0, 0.0, 1, 0, None).pass);
    }

    #[test]
    fn familywise_threshold() {
        assert!((familywise_z(1) - 3.0).abs() < 1e-9);
        assert!(familywise_z(24) > 3.8 && familywise_z(24) < 4.0);
    }

    #[test]
    fn identical_chains_have_zero_kl() {
        let chain = two_dim_chain();
        let r = verify_lemma2(&chain, &chain, 1e-8).unwrap();
        assert!(r.pass);
        assert!(r.lhs.abs() < 1e-12 && r.rhs == 0.0);
        let (a3, second) = verify_a3_decomposition(&chain, &chain, 1000, 1e-12, 0).unwrap();
        assert!(a3.pass);
        assert_eq!(second, 0.0);
    }

    #[test]
    fn swapped_kl_inequality_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let theta = random_chain(&mut rng, 1, &[0.1, 0.2, 0.3]);
        let pre = random_chain(&mut rng, 1, &[0.1, 0.2, 0.3]);
        let r = verify_lemma2(&theta, &pre, 1e-8).unwrap();
        assert!(r.pass && r.lhs < r.rhs - 1e-3);
        assert!(!kl_bound_holds(r.rhs, r.lhs, r.rhs, 1e-8));
    }

    #[test]
    fn lemma2_rejects_mismatched_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_chain(&mut rng, 1, &[0.1, 0.2]);
        let b = random_chain(&mut rng, 1, &[0.1, 0.3]);
        assert!(matches!(verify_lemma2(&a, &b, 1e-8), Err(Error::Precondition(_))));
        let c = random_chain(&mut rng, 1, &[0.0, 0.2]);
        assert!(matches!(verify_lemma2(&c, &c, 1e-8), Err(Error::Precondition(_))));
    }

    #[test]
    fn grid_density_is_exact_for_linear_model() {
        let (_, schedule) = lemma3_model();
        let arch = LinearArch {
            dim: 1,
            horizon: 4,
            prompt_count: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params: Vec<f64> = (0..Arch::Linear(arch.clone()).num_params())
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        let mut chain = LinearGaussianChain::from_linear_denoiser(&arch, &params, &schedule, 0);
        chain.sigma_sq = (1..=4).map(|t| lemma3_var(&schedule, t)).collect();
        let (m, c) = exact_marginals(&chain).pop().unwrap();
        let full = Arch::Linear(arch);
        let density = grid_density_x0(DenoiserRef { arch: &full, params: &params }, &schedule);
        for x in [-1.5, -0.3, 0.0, 0.7, 2.0] {
            let u = x - m[0];
            let exact = (-0.5 * u * u / c[(0, 0)]).exp() / (2.0 * std::f64::consts::PI * c[(0, 0)]).sqrt();
            assert!((interp_density(&density, x) - exact).abs() < 1e-6 * exact.max(1e-3), "{x}");
        }
    }

    #[test]
    fn elbo_gap_is_nonnegative_at_pretrained() {
        let (arch, schedule) = lemma3_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, pre) = random_lemma3_pair(&arch, &mut rng);
        let zero = |_: f64| 0.0;
        let setup = Lemma3Setup {
            arch: &arch,
            schedule: &schedule,
            theta: &pre,
            pre: &pre,
            reward: &zero,
            gamma: 1.0,
        };
        let report = verify_lemma3_bounds(&setup, 5_000, 4, 1e-3, 8).unwrap();
        assert!(report.shifted.pass && report.anchored.pass);
        // with θ = pre the anchored bound adds only the data-fit term again
        assert!(report.anchored.rhs >= report.shifted.rhs);
    }

    #[test]
    fn lemma3_rejects_nonpositive_weights() {
        let (arch, schedule) = lemma3_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (theta, pre) = random_lemma3_pair(&arch, &mut rng);
        let reward = |x: f64| -x * x;
        let setup = Lemma3Setup {
            arch: &arch,
            schedule: &schedule,
            theta: &theta,
            pre: &pre,
            reward: &reward,
            gamma: 0.5,
        };
        assert!(matches!(verify_lemma3_bounds(&setup, 1000, 1, 1e-3, 0), Err(Error::Precondition(_))));
        assert!(!margin_ok(-1.0, 0.1, 1e-3));
        assert!(margin_ok(-0.2, 0.1, 1e-3));
    }

    #[test]
    fn report_json_schema() {
        let r = VerifyReport {
            name: "x".into(),
            pass: true,
            lhs: 1.0,
            rhs: 2.0,
            se: 0.1,
            n: 5,
            seed: 7,
            note: None,
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(keys, ["lhs", "n", "name", "pass", "rhs", "se", "seed"]);
    }
}
