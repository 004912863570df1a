//! Experiment pipeline: pretrain, fine-tune with one method, evaluate against
//! the pretrained model, and write checkpoints, CSVs, plots and a JSON
//! report. Also the side-by-side comparison of reports.

use std::io::Write;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, ScheduleSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalStats};
use crate::model::{save_checkpoint, Arch, Denoiser, DenoiserRef, MlpArch, ParamSnapshot};
use crate::parallel::ordered_map;
use crate::pretrain::{pretrain, PretrainConfig};
use crate::rewards::{scenario_by_name, RewardScenario};
use crate::rl::{run_dpok, MetricsLog, RLConfig};
use crate::sft::{build_dataset, run_sft, SFTConfig, SFTDataset};

/// Relative output directories are resolved against this variable when set.
pub const OUTPUT_ROOT_ENV: &str = "DPOK_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub time_freqs: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden: vec![64, 64],
            time_freqs: 4,
        }
    }
}

impl ModelSpec {
    pub fn arch(&self, dim: usize, horizon: usize, prompt_count: usize) -> Arch {
        Arch::Mlp(MlpArch {
            dim,
            horizon,
            prompt_count,
            time_freqs: self.time_freqs,
            hidden: self.hidden.clone(),
            out_dim: dim,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Dpok(RLConfig),
    Sft(SFTConfig),
    /// Evaluate the pretrained model against itself.
    Pretrained,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Dpok(c) => format!("dpok(beta={})", c.beta),
            Method::Sft(c) => format!("sft({}, gamma={})", kl_mode_name(c), c.gamma),
            Method::Pretrained => "pretrained".into(),
        }
    }
}

fn kl_mode_name(c: &SFTConfig) -> String {
    serde_json::to_value(c.kl_mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub n_eval_rollouts: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n_eval_rollouts: 1000,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub scenario: String,
    /// Train and evaluate on this prompt only.
    #[serde(default)]
    pub prompt: Option<usize>,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// Load this checkpoint instead of pretraining (shared by every seed).
    #[serde(default)]
    pub pretrained_checkpoint: Option<PathBuf>,
    pub method: Method,
    #[serde(default)]
    pub eval: EvalSettings,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        let scenario = scenario_by_name(&self.scenario)?;
        if let Some(z) = self.prompt {
            scenario.restrict_to(z)?;
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::config("eval.seeds", "must be nonempty"));
        }
        if self.eval.n_eval_rollouts < 2 {
            return Err(Error::config("eval.n_eval_rollouts", "must be at least 2"));
        }
        if self.model.hidden.is_empty() {
            return Err(Error::config("model.hidden", "must be nonempty"));
        }
        self.schedule.build()?;
        Ok(())
    }

    /// The scenario after optional prompt restriction.
    pub fn resolved_scenario(&self) -> Result<RewardScenario> {
        let s = scenario_by_name(&self.scenario)?;
        match self.prompt {
            Some(z) => s.restrict_to(z),
            None => Ok(s),
        }
    }

    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Evaluation of one model on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mean_reward: f64,
    pub reward_se: f64,
    pub mean_quality: f64,
    pub kl_to_pretrained: f64,
    pub target_mass: f64,
    pub per_prompt_reward: Vec<f64>,
    pub per_prompt_target_mass: Vec<f64>,
}

impl Metrics {
    pub fn from_stats(stats: &EvalStats) -> Self {
        Metrics {
            mean_reward: stats.mean_reward,
            reward_se: stats.reward_se,
            mean_quality: stats.mean_quality,
            kl_to_pretrained: stats.kl_estimate,
            target_mass: stats.target_mass,
            per_prompt_reward: stats.per_prompt.iter().map(|p| p.mean_reward).collect(),
            per_prompt_target_mass: stats.per_prompt.iter().map(|p| p.target_mass).collect(),
        }
    }

    fn check_finite(&self) -> Result<()> {
        let scalars = [self.mean_reward, self.mean_quality, self.kl_to_pretrained, self.target_mass];
        if scalars.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                what: "non-finite evaluation metric".into(),
                param_norm: f64::NAN,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub model: Metrics,
    pub pretrained: Metrics,
}

/// Means over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_reward: f64,
    pub mean_quality: f64,
    pub kl_to_pretrained: f64,
    pub target_mass: f64,
    pub per_prompt_reward: Vec<f64>,
}

impl Aggregate {
    fn over<'a>(items: impl Iterator<Item = &'a Metrics> + Clone) -> Self {
        let n = items.clone().count() as f64;
        let avg = |f: &dyn Fn(&Metrics) -> f64| items.clone().map(f).sum::<f64>() / n;
        let prompts = items.clone().next().map_or(0, |m| m.per_prompt_reward.len());
        Aggregate {
            mean_reward: avg(&|m| m.mean_reward),
            mean_quality: avg(&|m| m.mean_quality),
            kl_to_pretrained: avg(&|m| m.kl_to_pretrained),
            target_mass: avg(&|m| m.target_mass),
            per_prompt_reward: (0..prompts).map(|z| avg(&|m| m.per_prompt_reward[z])).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub scenario: String,
    pub scenario_hash: String,
    pub method: String,
    pub n_eval_rollouts: usize,
    pub seeds: Vec<SeedReport>,
    pub aggregate: Aggregate,
    pub pretrained_aggregate: Aggregate,
}

impl EvalReport {
    pub fn from_seeds(
        name: &str,
        scenario: &RewardScenario,
        method: &str,
        n_eval_rollouts: usize,
        seeds: Vec<SeedReport>,
    ) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::Precondition("report needs at least one seed".into()));
        }
        for s in &seeds {
            s.model.check_finite()?;
            s.pretrained.check_finite()?;
        }
        Ok(EvalReport {
            name: name.into(),
            scenario: scenario.name.clone(),
            scenario_hash: scenario.content_hash(),
            method: method.into(),
            n_eval_rollouts,
            aggregate: Aggregate::over(seeds.iter().map(|s| &s.model)),
            pretrained_aggregate: Aggregate::over(seeds.iter().map(|s| &s.pretrained)),
            seeds,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Seed of the evaluation rollouts for experiment seed `seed`. It does not
/// depend on the method, so every model evaluated under the same seed sees
/// the same random numbers.
pub fn eval_stream_seed(seed: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ 0x6576_616c_7365_6564).gen()
}

pub fn evaluate_against(
    model: DenoiserRef<'_>,
    pretrained: DenoiserRef<'_>,
    schedule: &NoiseSchedule,
    scenario: &RewardScenario,
    n: usize,
    seed: u64,
) -> Result<Metrics> {
    let stats = evaluate(model, Some(pretrained), schedule, scenario, n, eval_stream_seed(seed))?;
    Ok(Metrics::from_stats(&stats))
}

/// Pretrains a fresh network; initialization and minibatches derive from
/// `config.seed + seed`.
pub fn pretrain_model(
    schedule: &NoiseSchedule,
    scenario: &RewardScenario,
    model: &ModelSpec,
    config: &PretrainConfig,
    seed: u64,
) -> Result<(ParamSnapshot, Vec<(usize, f64)>)> {
    let mut cfg = config.clone();
    cfg.seed = config.seed.wrapping_add(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arch = model.arch(scenario.dim(), schedule.horizon, scenario.prompt_count());
    let mut net = Denoiser::new(arch, &mut rng);
    let out = pretrain(&mut net, schedule, scenario, &cfg)?;
    Ok((out.snapshot, out.losses))
}

#[derive(Clone, Debug)]
pub struct FineTuned {
    pub snapshot: ParamSnapshot,
    pub metrics: Option<MetricsLog>,
    pub dataset: Option<SFTDataset>,
}

/// Runs `method` from `pretrained`; the method's seed is offset by `seed`.
pub fn fine_tune(
    method: &Method,
    pretrained: &ParamSnapshot,
    schedule: &NoiseSchedule,
    scenario: &RewardScenario,
    seed: u64,
) -> Result<FineTuned> {
    let mut net = Denoiser::from_snapshot(pretrained);
    match method {
        Method::Dpok(cfg) => {
            let mut cfg = cfg.clone();
            cfg.seed = cfg.seed.wrapping_add(seed);
            let out = run_dpok(&mut net, pretrained, schedule, scenario, &cfg).map_err(|e| e.in_stage("dpok"))?;
            Ok(FineTuned {
                snapshot: out.snapshot,
                metrics: Some(out.metrics),
                dataset: None,
            })
        }
        Method::Sft(cfg) => {
            let mut cfg = cfg.clone();
            cfg.seed = cfg.seed.wrapping_add(seed);
            let data_seed = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6461_7461).gen();
            let dataset = build_dataset(pretrained, schedule, scenario, cfg.dataset_size, data_seed)
                .map_err(|e| e.in_stage("sft dataset"))?;
            let out = run_sft(&mut net, pretrained, &dataset, schedule, scenario, &cfg).map_err(|e| e.in_stage("sft"))?;
            Ok(FineTuned {
                snapshot: out.snapshot,
                metrics: Some(out.metrics),
                dataset: Some(dataset),
            })
        }
        Method::Pretrained => Ok(FineTuned {
            snapshot: pretrained.clone(),
            metrics: None,
            dataset: None,
        }),
    }
}

struct SeedOutcome {
    report: SeedReport,
    metrics: Option<MetricsLog>,
}

/// Runs the whole pipeline for every seed and writes its artifacts under the
/// output directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<EvalReport> {
    config.validate()?;
    let scenario = config.resolved_scenario()?;
    let out_dir = config.resolved_output_dir();
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(config)?)?;

    let loaded = match &config.pretrained_checkpoint {
        Some(path) => {
            let (snap, spec) = crate::model::load_checkpoint(&resolve_output(path)).map_err(|e| e.in_stage("load"))?;
            if let Some(spec) = spec {
                if spec != config.schedule {
                    return Err(Error::config("pretrained_checkpoint", "schedule differs from the config"));
                }
            }
            Some(snap)
        }
        None => None,
    };
    let schedule = config.schedule.build()?;

    let outcomes: Vec<Result<SeedOutcome>> = ordered_map(config.eval.seeds.len(), |i| {
        let seed = config.eval.seeds[i];
        let dir = out_dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&dir)?;
        let pre = match &loaded {
            Some(s) => s.clone(),
            None => {
                let (snap, losses) = pretrain_model(&schedule, &scenario, &config.model, &config.pretrain, seed)
                    .map_err(|e| e.in_stage("pretrain"))?;
                write_loss_csv(&dir.join("pretrain_loss.csv"), &losses)?;
                save_checkpoint(&dir.join("pretrained.ckpt"), &snap, Some(&config.schedule))?;
                snap
            }
        };
        let tuned = fine_tune(&config.method, &pre, &schedule, &scenario, seed)?;
        save_checkpoint(&dir.join("model.ckpt"), &tuned.snapshot, Some(&config.schedule))?;
        if let Some(m) = &tuned.metrics {
            m.write_csv(&dir.join("metrics.csv"))?;
        }
        if let Some(d) = &tuned.dataset {
            d.write_jsonl(&dir.join("dataset.jsonl"))?;
        }
        let n = config.eval.n_eval_rollouts;
        let model = evaluate_against(tuned.snapshot.view(), pre.view(), &schedule, &scenario, n, seed)
            .map_err(|e| e.in_stage("evaluate"))?;
        let pretrained = evaluate_against(pre.view(), pre.view(), &schedule, &scenario, n, seed)
            .map_err(|e| e.in_stage("evaluate"))?;
        Ok(SeedOutcome {
            report: SeedReport { seed, model, pretrained },
            metrics: tuned.metrics,
        })
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let logs: Vec<(u64, &MetricsLog)> = outcomes
        .iter()
        .filter_map(|o| o.metrics.as_ref().map(|m| (o.report.seed, m)))
        .collect();
    if !logs.is_empty() {
        write_plots(&out_dir, &logs).map_err(|e| e.in_stage("plot"))?;
    }
    let report = EvalReport::from_seeds(
        &config.name,
        &scenario,
        &config.method.label(),
        config.eval.n_eval_rollouts,
        outcomes.into_iter().map(|o| o.report).collect(),
    )?;
    std::fs::write(out_dir.join("report.json"), report.to_json()?)?;
    Ok(report)
}

fn write_loss_csv(path: &Path, losses: &[(usize, f64)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,loss")?;
    for (s, l) in losses {
        writeln!(out, "{s},{l}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reward, quality and KL against samples consumed, one line per seed.
pub fn write_plots(dir: &Path, logs: &[(u64, &MetricsLog)]) -> Result<()> {
    type Getter = fn(&crate::rl::MetricsRow) -> f64;
    let panels: [(&str, &str, Getter); 3] = [
        ("reward.svg", "mean reward", |r| r.mean_reward),
        ("quality.svg", "mean quality", |r| r.mean_quality),
        ("kl.svg", "KL to pretrained", |r| r.kl_estimate),
    ];
    for (file, label, get) in panels {
        let series: Vec<(u64, Vec<(f64, f64)>)> = logs
            .iter()
            .map(|(seed, log)| {
                let pts = log
                    .rows
                    .iter()
                    .map(|r| (r.samples_consumed as f64, get(r)))
                    .filter(|p| p.1.is_finite())
                    .collect();
                (*seed, pts)
            })
            .collect();
        line_plot(&dir.join(file), label, &series).map_err(|e| Error::Format(format!("{file}: {e}")))?;
    }
    Ok(())
}

fn line_plot(path: &Path, label: &str, series: &[(u64, Vec<(f64, f64)>)]) -> std::result::Result<(), String> {
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    let pad = ((y_max - y_min) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| e.to_string())?;
    let mut chart = ChartBuilder::on(&root)
        .caption(label, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..x_max, (y_min - pad)..(y_max + pad))
        .map_err(|e| e.to_string())?;
    chart
        .configure_mesh()
        .x_desc("samples consumed")
        .y_desc(label)
        .draw()
        .map_err(|e| e.to_string())?;
    for (i, (seed, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| e.to_string())?
            .label(format!("seed {seed}"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| e.to_string())?;
    root.present().map_err(|e| e.to_string())?;
    Ok(())
}

/// How a report's metric compares with the first report's.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    Gt,
    Lt,
    Tie,
}

impl Order {
    pub fn of(value: f64, reference: f64) -> Self {
        if value > reference {
            Order::Gt
        } else if value < reference {
            Order::Lt
        } else {
            Order::Tie
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Order::Gt => "gt",
            Order::Lt => "lt",
            Order::Tie => "tie",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(Order::Gt),
            "lt" => Ok(Order::Lt),
            "tie" => Ok(Order::Tie),
            other => Err(Error::Format(format!("unknown ordering flag {other:?}"))),
        }
    }
}

/// Metrics as rows, reports as columns, plus one flag column per report
/// after the first giving its order relative to the first.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub metrics: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub flags: Vec<Vec<Order>>,
}

pub const COMPARED_METRICS: [&str; 4] = ["mean_reward", "mean_quality", "kl_to_pretrained", "target_mass"];

pub fn compare(reports: &[EvalReport]) -> Result<ComparisonTable> {
    if reports.len() < 2 {
        return Err(Error::Compare("need at least two reports".into()));
    }
    let first = &reports[0];
    if let Some(r) = reports.iter().find(|r| r.scenario_hash != first.scenario_hash) {
        return Err(Error::Compare(format!(
            "scenario mismatch: {:?} ({}) vs {:?} ({})",
            first.name, first.scenario, r.name, r.scenario
        )));
    }
    let columns = reports
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{i}:{}", r.name))
        .collect();
    let pick = |r: &EvalReport, m: &str| match m {
        "mean_reward" => r.aggregate.mean_reward,
        "mean_quality" => r.aggregate.mean_quality,
        "kl_to_pretrained" => r.aggregate.kl_to_pretrained,
        _ => r.aggregate.target_mass,
    };
    let mut values = Vec::new();
    let mut flags = Vec::new();
    for m in COMPARED_METRICS {
        let row: Vec<f64> = reports.iter().map(|r| pick(r, m)).collect();
        flags.push(row[1..].iter().map(|v| Order::of(*v, row[0])).collect());
        values.push(row);
    }
    Ok(ComparisonTable {
        columns,
        metrics: COMPARED_METRICS.iter().map(|s| s.to_string()).collect(),
        values,
        flags,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' if quoted && chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            '"' => quoted = !quoted,
            ',' if !quoted => out.push(std::mem::take(&mut cur)),
            c => cur.push(c),
        }
    }
    out.push(cur);
    out
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut header = vec!["metric".to_string()];
        header.extend(self.columns.iter().map(|c| csv_field(c)));
        header.extend(self.columns[1..].iter().map(|c| csv_field(&format!("order[{c}]"))));
        let mut out = header.join(",");
        out.push('\n');
        for ((m, vals), flags) in self.metrics.iter().zip(&self.values).zip(&self.flags) {
            let mut fields = vec![m.clone()];
            fields.extend(vals.iter().map(|v| v.to_string()));
            fields.extend(flags.iter().map(|f| f.as_str().to_string()));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = split_csv_line(lines.next().ok_or_else(|| Error::Format("empty comparison".into()))?);
        if header.len() < 4 || header[0] != "metric" || (header.len() - 1).is_multiple_of(2) {
            return Err(Error::Format("bad comparison header".into()));
        }
        let k = header.len() / 2;
        let columns = header[1..=k].to_vec();
        let (mut metrics, mut values, mut flags) = (Vec::new(), Vec::new(), Vec::new());
        for line in lines {
            let f = split_csv_line(line);
            if f.len() != header.len() {
                return Err(Error::Format(format!("expected {} fields: {line}", header.len())));
            }
            metrics.push(f[0].clone());
            values.push(
                f[1..=k]
                    .iter()
                    .map(|v| v.parse::<f64>().map_err(|e| Error::Format(format!("{v}: {e}"))))
                    .collect::<Result<Vec<_>>>()?,
            );
            flags.push(f[k + 1..].iter().map(|s| Order::parse(s)).collect::<Result<Vec<_>>>()?);
        }
        Ok(ComparisonTable {
            columns,
            metrics,
            values,
            flags,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::color_scenario;

    fn metrics(r: f64) -> Metrics {
        Metrics {
            mean_reward: r,
            reward_se: 0.01,
            mean_quality: -r,
            kl_to_pretrained: 0.5,
            target_mass: 0.3,
            per_prompt_reward: vec![r],
            per_prompt_target_mass: vec![0.3],
        }
    }

    fn report(name: &str, r: f64) -> EvalReport {
        let seeds = vec![SeedReport {
            seed: 0,
            model: metrics(r),
            pretrained: metrics(0.0),
        }];
        EvalReport::from_seeds(name, &color_scenario(), "test", 10, seeds).unwrap()
    }

    #[test]
    fn self_comparison_ties() {
        let a = report("a", 0.4);
        let table = compare(&[a.clone(), a]).unwrap();
        assert!(table.flags.iter().flatten().all(|f| *f == Order::Tie));
    }

    #[test]
    fn flags_follow_sign_of_difference() {
        let table = compare(&[report("a", 0.4), report("b", 0.6), report("c", 0.1)]).unwrap();
        assert_eq!(table.flags[0], vec![Order::Gt, Order::Lt]);
        assert_eq!(table.flags[1], vec![Order::Lt, Order::Gt]);
        assert_eq!(table.flags[2], vec![Order::Tie, Order::Tie]);
    }

    #[test]
    fn comparison_csv_round_trips() {
        let table = compare(&[report("a, quoted", 0.4), report("b", 0.6)]).unwrap();
        let back = ComparisonTable::from_csv(&table.to_csv()).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn scenario_mismatch_is_rejected() {
        let a = report("a", 0.4);
        let mut b = report("b", 0.4);
        b.scenario_hash = "0000".into();
        assert!(matches!(compare(&[a, b]), Err(Error::Compare(_))));
        assert!(matches!(compare(&[report("a", 0.1)]), Err(Error::Compare(_))));
    }

    #[test]
    fn aggregate_is_mean_over_seeds() {
        let seeds = vec![
            SeedReport {
                seed: 0,
                model: metrics(1.0),
                pretrained: metrics(0.0),
            },
            SeedReport {
                seed: 1,
                model: metrics(2.0),
                pretrained: metrics(0.0),
            },
        ];
        let r = EvalReport::from_seeds("x", &color_scenario(), "m", 10, seeds).unwrap();
        assert_eq!(r.aggregate.mean_reward, 1.5);
        assert_eq!(r.aggregate.per_prompt_reward, vec![1.5]);
    }

    #[test]
    fn non_finite_metric_rejected() {
        let mut m = metrics(0.0);
        m.mean_quality = f64::NAN;
        let seeds = vec![SeedReport {
            seed: 0,
            model: m,
            pretrained: metrics(0.0),
        }];
        assert!(EvalReport::from_seeds("x", &color_scenario(), "m", 10, seeds).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg: ExperimentConfig = serde_json::from_str(
            r#"{"name": "x", "scenario": "color", "method": {"kind": "pretrained"}, "output_dir": "out"}"#,
        )
        .unwrap();
        assert_eq!(cfg.eval.seeds, vec![0, 1, 2]);
        cfg.validate().unwrap();
        cfg.eval.seeds.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config { field: "eval.seeds", .. })));
        cfg.eval.seeds = vec![0];
        cfg.scenario = "nope".into();
        assert!(matches!(cfg.validate(), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn partial_method_configs_fill_defaults() {
        let m: Method = serde_json::from_str(r#"{"kind": "dpok", "beta": 0.0}"#).unwrap();
        match m {
            Method::Dpok(c) => {
                assert_eq!(c.beta, 0.0);
                assert_eq!(c.alpha, RLConfig::default().alpha);
            }
            _ => panic!("expected dpok"),
        }
        let m: Method = serde_json::from_str(r#"{"kind": "sft", "kl_mode": "KL_D", "gamma": 5.0}"#).unwrap();
        assert_eq!(m.label(), "sft(KL_D, gamma=5)");
    }
}
