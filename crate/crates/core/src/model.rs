//! The conditional noise predictor ε(x_t, t, z).
//!
//! Networks are stateless architectures ([`Arch`]) evaluated against an
//! explicit flat parameter slice. Every loss in the crate reduces to a scalar
//! function of the network output, so reverse-mode differentiation only needs
//! a vector-Jacobian product through the network: [`Arch::forward_tape`]
//! records activations and [`Arch::backward`] pulls an output cotangent back
//! onto the parameters.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fully connected network with SiLU hidden activations.
///
/// Input is `x_t ++ time features ++ one-hot(z)`; the time features are
/// `t/T` followed by `sin`/`cos` pairs at `time_freqs` octave frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpArch {
    pub dim: usize,
    pub horizon: usize,
    pub prompt_count: usize,
    pub time_freqs: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
}

/// Per-step affine predictor: ε(x, t, z) = W_t x + B_t[z].
///
/// The reverse mean is then affine in x_t, which makes every marginal of the
/// reverse chain Gaussian and exactly computable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearArch {
    pub dim: usize,
    pub horizon: usize,
    pub prompt_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    Mlp(MlpArch),
    Linear(LinearArch),
}

/// Activations recorded by a forward pass, consumed by [`Arch::backward`].
#[derive(Clone, Debug)]
pub struct Tape {
    t: usize,
    z: usize,
    // layer inputs: layers[0] is the encoded input, layers[k] the k-th hidden activation
    layers: Vec<Vec<f64>>,
    // hidden pre-activations, one per hidden layer
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl MlpArch {
    /// The default denoiser: two hidden layers of width 64.
    pub fn denoiser(dim: usize, horizon: usize, prompt_count: usize) -> Self {
        MlpArch {
            dim,
            horizon,
            prompt_count,
            time_freqs: 4,
            hidden: vec![64, 64],
            out_dim: dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dim + 1 + 2 * self.time_freqs + self.prompt_count
    }

    fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(self.input_dim());
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.out_dim);
        sizes
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn encode(&self, x: &[f64], t: usize, z: usize) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.input_dim());
        input.extend_from_slice(x);
        let phase = t as f64 / self.horizon as f64;
        input.push(phase);
        let mut freq = std::f64::consts::PI;
        for _ in 0..self.time_freqs {
            input.push((freq * phase).sin());
            input.push((freq * phase).cos());
            freq *= 2.0;
        }
        let start = input.len();
        input.resize(start + self.prompt_count, 0.0);
        input[start + z] = 1.0;
        input
    }

    fn forward_tape(&self, params: &[f64], x: &[f64], t: usize, z: usize) -> Tape {
        let sizes = self.layer_sizes();
        let n_layers = sizes.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut current = self.encode(x, t, z);
        let mut offset = 0;
        for (k, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = &params[offset..offset + fan_in * fan_out];
            let bias = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let mut next: Vec<f64> = weights
                .chunks_exact(fan_in)
                .zip(bias)
                .map(|(row, b)| dot(row, &current) + b)
                .collect();
            layers.push(current);
            if k + 1 < n_layers {
                let act = next.iter().map(|&v| silu(v)).collect();
                pre.push(std::mem::replace(&mut next, act));
            }
            current = next;
        }
        Tape {
            t,
            z,
            layers,
            pre,
            output: current,
        }
    }

    fn backward(&self, params: &[f64], tape: &Tape, grad_out: &[f64], grads: &mut [f64]) {
        let sizes = self.layer_sizes();
        let n_layers = sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for w in sizes.windows(2) {
            offsets.push(offset);
            offset += w[0] * w[1] + w[1];
        }
        let mut delta = grad_out.to_vec();
        for k in (0..n_layers).rev() {
            let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
            let off = offsets[k];
            let input = &tape.layers[k];
            {
                let (gw, gb) = grads[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for (i, &d) in delta.iter().enumerate() {
                    gb[i] += d;
                    axpy(d, input, &mut gw[i * fan_in..(i + 1) * fan_in]);
                }
            }
            if k == 0 {
                break;
            }
            let weights = &params[off..off + fan_in * fan_out];
            let mut back = vec![0.0; fan_in];
            for (i, &d) in delta.iter().enumerate() {
                axpy(d, &weights[i * fan_in..(i + 1) * fan_in], &mut back);
            }
            for (b, &p) in back.iter_mut().zip(&tape.pre[k - 1]) {
                *b *= silu_grad(p);
            }
            delta = back;
        }
    }

    fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let sizes = self.layer_sizes();
        let mut params = Vec::with_capacity(self.num_params());
        for (k, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut scale = (1.0 / fan_in as f64).sqrt();
            if k + 2 == sizes.len() {
                scale *= 0.1;
            }
            for _ in 0..fan_in * fan_out {
                let g: f64 = rng.sample(StandardNormal);
                params.push(scale * g);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        params
    }
}

impl LinearArch {
    fn block(&self) -> usize {
        self.dim * self.dim + self.prompt_count * self.dim
    }

    pub fn num_params(&self) -> usize {
        self.horizon * self.block()
    }

    /// Offset of `W_t` inside the flat parameter vector; `B_t` follows it.
    pub fn step_offset(&self, t: usize) -> usize {
        (t - 1) * self.block()
    }

    fn forward(&self, params: &[f64], x: &[f64], t: usize, z: usize) -> Vec<f64> {
        let d = self.dim;
        let off = self.step_offset(t);
        let w = &params[off..off + d * d];
        let b = &params[off + d * d + z * d..off + d * d + (z + 1) * d];
        w.chunks_exact(d)
            .zip(b)
            .map(|(row, bi)| dot(row, x) + bi)
            .collect()
    }

    fn backward(&self, tape: &Tape, grad_out: &[f64], grads: &mut [f64]) {
        let d = self.dim;
        let off = self.step_offset(tape.t);
        let x = &tape.layers[0];
        for (i, &g) in grad_out.iter().enumerate() {
            axpy(g, x, &mut grads[off + i * d..off + (i + 1) * d]);
            grads[off + d * d + tape.z * d + i] += g;
        }
    }
}

impl Arch {
    pub fn dim(&self) -> usize {
        match self {
            Arch::Mlp(a) => a.dim,
            Arch::Linear(a) => a.dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Arch::Mlp(a) => a.out_dim,
            Arch::Linear(a) => a.dim,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Arch::Mlp(a) => a.horizon,
            Arch::Linear(a) => a.horizon,
        }
    }

    pub fn prompt_count(&self) -> usize {
        match self {
            Arch::Mlp(a) => a.prompt_count,
            Arch::Linear(a) => a.prompt_count,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Arch::Mlp(a) => a.num_params(),
            Arch::Linear(a) => a.num_params(),
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64], t: usize, z: usize) -> Vec<f64> {
        match self {
            Arch::Mlp(a) => a.forward_tape(params, x, t, z).output,
            Arch::Linear(a) => a.forward(params, x, t, z),
        }
    }

    pub fn forward_tape(&self, params: &[f64], x: &[f64], t: usize, z: usize) -> Tape {
        match self {
            Arch::Mlp(a) => a.forward_tape(params, x, t, z),
            Arch::Linear(a) => Tape {
                t,
                z,
                layers: vec![x.to_vec()],
                pre: Vec::new(),
                output: a.forward(params, x, t, z),
            },
        }
    }

    /// Accumulates `grad_outᵀ · ∂output/∂params` into `grads`.
    pub fn backward(&self, params: &[f64], tape: &Tape, grad_out: &[f64], grads: &mut [f64]) {
        match self {
            Arch::Mlp(a) => a.backward(params, tape, grad_out, grads),
            Arch::Linear(a) => a.backward(tape, grad_out, grads),
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Arch::Mlp(a) => a.init_params(rng),
            Arch::Linear(a) => vec![0.0; a.num_params()],
        }
    }

    fn check_inputs(&self, x: &[f64], t: usize, z: usize) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Domain(format!(
                "input has dimension {}, expected {}",
                x.len(),
                self.dim()
            )));
        }
        if t == 0 || t > self.horizon() {
            return Err(Error::Index {
                t,
                horizon: self.horizon(),
            });
        }
        if z >= self.prompt_count() {
            return Err(Error::UnknownPrompt(z));
        }
        Ok(())
    }
}

/// A borrowed (architecture, parameters) pair. Cheap to copy and share
/// across threads; this is how frozen snapshots are evaluated.
#[derive(Clone, Copy, Debug)]
pub struct DenoiserRef<'a> {
    pub arch: &'a Arch,
    pub params: &'a [f64],
}

impl<'a> DenoiserRef<'a> {
    pub fn eps(&self, x: &[f64], t: usize, z: usize) -> Vec<f64> {
        self.arch.forward(self.params, x, t, z)
    }

    pub fn eps_tape(&self, x: &[f64], t: usize, z: usize) -> Tape {
        self.arch.forward_tape(self.params, x, t, z)
    }

    pub fn backward(&self, tape: &Tape, grad_out: &[f64], grads: &mut [f64]) {
        self.arch.backward(self.params, tape, grad_out, grads)
    }
}

/// Trainable denoiser: architecture plus an owned parameter vector.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub arch: Arch,
    pub params: Vec<f64>,
    pub version: u64,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Self {
        let params = arch.init_params(rng);
        Denoiser {
            arch,
            params,
            version: 0,
        }
    }

    pub fn zeros(arch: Arch) -> Self {
        let params = vec![0.0; arch.num_params()];
        Denoiser {
            arch,
            params,
            version: 0,
        }
    }

    pub fn from_snapshot(snapshot: &ParamSnapshot) -> Self {
        Denoiser {
            arch: snapshot.arch.as_ref().clone(),
            params: snapshot.params.to_vec(),
            version: snapshot.version,
        }
    }

    pub fn view(&self) -> DenoiserRef<'_> {
        DenoiserRef {
            arch: &self.arch,
            params: &self.params,
        }
    }

    /// ε prediction; fails on shape mismatch or a non-finite output.
    pub fn forward(&self, x: &[f64], t: usize, z: usize) -> Result<Vec<f64>> {
        self.arch.check_inputs(x, t, z)?;
        let out = self.view().eps(x, t, z);
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::Numeric {
                what: format!("non-finite denoiser output at t={t}, z={z}"),
                param_norm: l2_norm(&self.params),
            })
        }
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            version: self.version,
            arch: Arc::new(self.arch.clone()),
            params: self.params.clone().into(),
        }
    }
}

/// Frozen copy of a parameter vector. Immutable once created.
#[derive(Clone, Debug)]
pub struct ParamSnapshot {
    pub version: u64,
    pub arch: Arc<Arch>,
    pub params: Arc<[f64]>,
}

impl ParamSnapshot {
    pub fn view(&self) -> DenoiserRef<'_> {
        DenoiserRef {
            arch: &self.arch,
            params: &self.params,
        }
    }

    /// Parameter bytes in checkpoint order, for equality checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.params.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct GradAccumulator {
    pub grads: Vec<f64>,
    pub count: usize,
}

impl GradAccumulator {
    pub fn new(len: usize) -> Self {
        GradAccumulator {
            grads: vec![0.0; len],
            count: 0,
        }
    }

    pub fn reset(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
        self.count = 0;
    }

    /// Sums another accumulator into this one.
    pub fn merge(&mut self, other: &GradAccumulator) {
        axpy(1.0, &other.grads, &mut self.grads);
        self.count += other.count;
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads.iter_mut().for_each(|g| *g *= factor);
    }

    /// Fails with a numeric error if any entry is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        if self.grads.iter().all(|g| g.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric {
                what: "non-finite gradient".into(),
                param_norm: f64::NAN,
            })
        }
    }
}

/// Rescales `grads` in place so that its L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = l2_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel_err: f64,
    pub worst_coord: Option<usize>,
    pub failing: Vec<usize>,
}

/// Compares `analytic` against central finite differences of `loss` at
/// `params`, coordinate by coordinate.
///
/// The relative error is `|a - n| / max(|a|, |n|, floor)` with
/// `floor = 1e-6 * max(1, |loss(params)|)`. Central differences carry
/// rounding error proportional to the loss value, so coordinates whose true
/// derivative sits below that resolution are compared on an absolute scale. `coords` selects a subset;
/// `None` checks every coordinate.
pub fn grad_check<F>(
    loss: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
{
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let floor = 1e-6 * loss(params).abs().max(1.0);
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        checked: coords.len(),
        worst_rel_err: 0.0,
        worst_coord: None,
        failing: Vec::new(),
    };
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = loss(&probe);
        probe[i] = orig - step;
        let down = loss(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > report.worst_rel_err || report.worst_coord.is_none() {
            report.worst_rel_err = rel;
            report.worst_coord = Some(i);
        }
        if rel > tolerance || !rel.is_finite() {
            report.failing.push(i);
        }
    }
    if report.failing.is_empty() {
        Ok(report)
    } else {
        Err(Error::GradCheck {
            worst_rel_err: report.worst_rel_err,
            coords: report.failing,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Arch,
    d: usize,
    #[serde(rename = "T")]
    horizon: usize,
    prompt_count: usize,
    version: u64,
    n_params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schedule: Option<crate::diffusion::ScheduleSpec>,
}

/// Writes a checkpoint: one JSON header line, then the parameters as
/// little-endian f64.
pub fn save_checkpoint(
    path: &Path,
    snapshot: &ParamSnapshot,
    schedule: Option<&crate::diffusion::ScheduleSpec>,
) -> Result<()> {
    let header = CheckpointHeader {
        arch: snapshot.arch.as_ref().clone(),
        d: snapshot.arch.dim(),
        horizon: snapshot.arch.horizon(),
        prompt_count: snapshot.arch.prompt_count(),
        version: snapshot.version,
        n_params: snapshot.params.len(),
        schedule: schedule.cloned(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    out.write_all(&snapshot.to_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(ParamSnapshot, Option<crate::diffusion::ScheduleSpec>)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    let header: CheckpointHeader = serde_json::from_slice(&line)?;
    if header.n_params != header.arch.num_params() {
        return Err(Error::Format(format!(
            "header declares {} parameters but architecture has {}",
            header.n_params,
            header.arch.num_params()
        )));
    }
    let mut body = Vec::new();
    reader.read_to_end(&mut body)?;
    if body.len() != header.n_params * 8 {
        return Err(Error::Format(format!(
            "expected {} parameter bytes, found {}",
            header.n_params * 8,
            body.len()
        )));
    }
    let params: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((
        ParamSnapshot {
            version: header.version,
            arch: Arc::new(header.arch),
            params: params.into(),
        },
        header.schedule,
    ))
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_mlp() -> Arch {
        Arch::Mlp(MlpArch {
            dim: 2,
            horizon: 5,
            prompt_count: 3,
            time_freqs: 2,
            hidden: vec![8, 6],
            out_dim: 2,
        })
    }

    #[test]
    fn zero_params_give_zero_output() {
        let net = Denoiser::zeros(small_mlp());
        assert_eq!(net.forward(&[0.3, -1.2], 2, 1).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Denoiser::new(small_mlp(), &mut rng);
        let a = net.forward(&[0.5, 0.1], 3, 0).unwrap();
        let b = net.forward(&[0.5, 0.1], 3, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prompt_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Denoiser::new(small_mlp(), &mut rng);
        let a = net.forward(&[0.5, 0.1], 3, 0).unwrap();
        let b = net.forward(&[0.5, 0.1], 3, 2).unwrap();
        assert!(l2_dist_sq(&a, &b) > 1e-12);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let net = Denoiser::zeros(small_mlp());
        assert!(matches!(net.forward(&[0.0], 1, 0), Err(Error::Domain(_))));
        assert!(matches!(net.forward(&[0.0, 0.0], 0, 0), Err(Error::Index { .. })));
        assert!(matches!(net.forward(&[0.0, 0.0], 1, 3), Err(Error::UnknownPrompt(3))));
    }

    #[test]
    fn non_finite_output_is_reported() {
        let mut net = Denoiser::zeros(small_mlp());
        let n = net.params.len();
        net.params[n - 1] = f64::NAN;
        assert!(matches!(net.forward(&[0.0, 0.0], 1, 0), Err(Error::Numeric { .. })));
    }

    #[test]
    fn quadratic_loss_gradient_is_params() {
        let params = vec![0.3, -1.0, 2.5];
        let grad = params.clone();
        let report =
            grad_check(|p| 0.5 * dot(p, p), &params, &grad, 1e-5, 1e-8, None).unwrap();
        assert!(report.worst_rel_err < 1e-8);
    }

    #[test]
    fn zero_parameter_model_passes_vacuously() {
        let report = grad_check(|_| 1.0, &[], &[], 1e-5, 1e-4, None).unwrap();
        assert_eq!(report.checked, 0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let params = vec![1.0, 2.0];
        grad_check(|_| 3.0, &params, &[0.0, 0.0], 1e-5, 1e-4, None).unwrap();
    }

    #[test]
    fn grad_check_names_failing_coordinates() {
        let params = vec![1.0, 2.0];
        let err = grad_check(|p| p[0] + p[1], &params, &[1.0, 0.0], 1e-5, 1e-4, None).unwrap_err();
        match err {
            Error::GradCheck { coords, .. } => assert_eq!(coords, vec![1]),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn check_network_gradient(arch: Arch, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = arch.init_params(&mut rng);
        for p in params.iter_mut() {
            *p += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
        let x = [0.7, -0.4];
        let cot = [1.3, -0.6];
        let loss = |p: &[f64]| dot(&arch.forward(p, &x, 2, 1), &cot);
        let tape = arch.forward_tape(&params, &x, 2, 1);
        let mut grads = vec![0.0; params.len()];
        arch.backward(&params, &tape, &cot, &mut grads);
        grad_check(loss, &params, &grads, 1e-5, 1e-4, None).unwrap();
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        check_network_gradient(small_mlp(), 3);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        check_network_gradient(
            Arch::Linear(LinearArch {
                dim: 2,
                horizon: 3,
                prompt_count: 2,
            }),
            4,
        );
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![0.03, 0.04];
        clip_grad_norm(&mut g, 0.1);
        assert_eq!(g, vec![0.03, 0.04]);

        let mut g = vec![3.0, 4.0];
        let norm = clip_grad_norm(&mut g, 0.1);
        assert_eq!(norm, 5.0);
        approx::assert_abs_diff_eq!(g[0], 0.06, epsilon = 1e-15);
        approx::assert_abs_diff_eq!(g[1], 0.08, epsilon = 1e-15);

        let mut g = vec![0.0; 3];
        clip_grad_norm(&mut g, 0.1);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn accumulator_reset_zeroes() {
        let mut acc = GradAccumulator::new(3);
        acc.grads[1] = 2.0;
        acc.count = 4;
        acc.reset();
        assert_eq!(acc.grads, vec![0.0; 3]);
        assert_eq!(acc.count, 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Denoiser::new(small_mlp(), &mut rng);
        net.version = 7;
        let snap = net.snapshot();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &snap, None).unwrap();
        let (back, schedule) = load_checkpoint(&path).unwrap();
        assert!(schedule.is_none());
        assert_eq!(back.version, 7);
        assert_eq!(back.to_bytes(), snap.to_bytes());
        assert_eq!(*back.arch, *snap.arch);

        let raw = std::fs::read(&path).unwrap();
        let split = raw.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&raw[..split]).unwrap();
        assert_eq!(header["d"], 2);
        assert_eq!(header["T"], 5);
        assert_eq!(header["prompt_count"], 3);
        assert_eq!(header["version"], 7);
        assert_eq!(raw.len() - split - 1, snap.params.len() * 8);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let net = Denoiser::zeros(small_mlp());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &net.snapshot(), None).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        raw.truncate(raw.len() - 3);
        std::fs::write(&path, raw).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
