use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpok::diffusion::standard_normal;
use dpok::eval::evaluate;
use dpok::harness::{evaluate_against, pretrain_model, ModelSpec};
use dpok::model::{Arch, Denoiser, DenoiserRef, LinearArch, MlpArch};
use dpok::pretrain::{denoising_loss, PretrainConfig};
use dpok::rewards::{color_scenario, multi_scenario};
use dpok::sft::{build_dataset, filtered_weight, sft_loss, SftRecord};
use dpok::{run_sft, Error, KlMode, NoiseSchedule, SFTConfig, SFTDataset, ScheduleSpec, X0Mode};

fn mlp(prompt_count: usize) -> Arch {
    Arch::Mlp(MlpArch {
        dim: 2,
        horizon: 10,
        prompt_count,
        time_freqs: 1,
        hidden: vec![8],
        out_dim: 2,
    })
}

fn short_schedule() -> NoiseSchedule {
    ScheduleSpec {
        horizon: 10,
        ..Default::default()
    }
    .build()
    .unwrap()
}

fn config(kl_mode: KlMode, gamma: f64) -> SFTConfig {
    SFTConfig {
        kl_mode,
        gamma,
        ..Default::default()
    }
}

/// Linear ε-predictor on a 1-d, 2-step chain whose x̂0 prediction is the
/// constant `target` at step 2, whatever x_t is.
fn constant_predictor(schedule: &NoiseSchedule, target: f64) -> Vec<f64> {
    let ab = schedule.alpha_bar(2);
    let slope = 1.0 / (1.0 - ab).sqrt();
    let bias = -ab.sqrt() * target / (1.0 - ab).sqrt();
    // step 1 block, then step 2 block: [W, B]
    vec![0.0, 0.0, slope, bias]
}

#[test]
fn filtered_weight_examples() {
    assert_eq!(filtered_weight(-5.0, 2.0), 0.0);
    assert_eq!(filtered_weight(0.5, 2.0), 2.5);
    assert_eq!(filtered_weight(0.7, 0.0), 0.7);
}

#[test]
fn anchored_loss_hand_computed_value() {
    let arch = Arch::Linear(LinearArch {
        dim: 1,
        horizon: 2,
        prompt_count: 1,
    });
    let mut schedule = ScheduleSpec {
        horizon: 2,
        ..Default::default()
    }
    .build()
    .unwrap();
    schedule.posterior_vars[1] = 0.5;
    let theta = constant_predictor(&schedule, 1.0);
    let record = SftRecord { x0: vec![0.0], z: 0, r: 1.0 };
    let model = DenoiserRef { arch: &arch, params: &theta };
    let loss = sft_loss(model, model, &schedule, &record, 2, &[0.3], &config(KlMode::KlO, 2.0), None);
    assert!((loss - 1.0).abs() < 1e-12, "{loss}");
}

#[test]
fn perfect_predictor_has_zero_loss_in_every_mode() {
    let arch = Arch::Linear(LinearArch {
        dim: 1,
        horizon: 2,
        prompt_count: 1,
    });
    let schedule = ScheduleSpec {
        horizon: 2,
        ..Default::default()
    }
    .build()
    .unwrap();
    let theta = constant_predictor(&schedule, 0.4);
    let model = DenoiserRef { arch: &arch, params: &theta };
    let record = SftRecord { x0: vec![0.4], z: 0, r: 0.9 };
    for mode in [KlMode::KlD, KlMode::KlO, KlMode::None] {
        let loss = sft_loss(model, model, &schedule, &record, 2, &[-1.2], &config(mode, 2.0), None);
        assert!(loss.abs() < 1e-24, "{mode:?}: {loss}");
    }
}

#[test]
fn negative_filtered_records_contribute_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Denoiser::new(mlp(1), &mut rng);
    let pre = Denoiser::new(mlp(1), &mut rng);
    let schedule = short_schedule();
    let record = SftRecord {
        x0: vec![0.5, -0.2],
        z: 0,
        r: -3.0,
    };
    for mode in [KlMode::KlD, KlMode::KlO] {
        let mut g = vec![0.0; net.params.len()];
        let loss = sft_loss(net.view(), pre.view(), &schedule, &record, 4, &[0.1, 0.9], &config(mode, 2.0), Some(&mut g));
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn large_gamma_recovers_plain_denoising() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = Denoiser::new(mlp(1), &mut rng);
    let schedule = short_schedule();
    let gamma = 1e12;
    let cfg = config(KlMode::KlD, gamma);
    let (mut scaled, mut plain) = (0.0, 0.0);
    for _ in 0..64 {
        let record = SftRecord {
            x0: standard_normal(&mut rng, 2),
            z: 0,
            r: rng.gen_range(-1.0..1.0),
        };
        let t = rng.gen_range(2..=schedule.horizon);
        let noise = standard_normal(&mut rng, 2);
        scaled += sft_loss(net.view(), net.view(), &schedule, &record, t, &noise, &cfg, None) / gamma;
        // ‖x0 − x̂0‖² = k_t²‖ε − ε_θ‖² for the ᾱ-based predictor
        let (_, k) = schedule.x0_coeffs(t, X0Mode::AlphaBar);
        let weight = k * k / (2.0 * schedule.posterior_var(t));
        plain += weight * denoising_loss(net.view(), &schedule, &record.x0, 0, t, &noise).unwrap();
    }
    assert!(((scaled - plain) / plain).abs() < 1e-10, "{scaled} vs {plain}");
}

proptest! {
    #[test]
    fn filtered_weight_is_never_negative(r in -1e6f64..1e6, gamma in 0.0f64..1e6) {
        prop_assert!(filtered_weight(r, gamma) >= 0.0);
    }

    #[test]
    fn anchor_term_vanishes_at_pretrained(
        seed in any::<u64>(),
        r in 0.0f64..2.0,
        gamma in 0.1f64..5.0,
        t in 2usize..=10,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Denoiser::new(mlp(1), &mut rng);
        let schedule = short_schedule();
        let record = SftRecord { x0: standard_normal(&mut rng, 2), z: 0, r };
        let noise = standard_normal(&mut rng, 2);
        let loss = |gamma| sft_loss(net.view(), net.view(), &schedule, &record, t, &noise, &config(KlMode::KlO, gamma), None);
        prop_assert_eq!(loss(gamma), loss(0.0));
    }

    #[test]
    fn reward_filtered_loss_is_nonnegative(seed in any::<u64>(), r in -10.0f64..10.0, gamma in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Denoiser::new(mlp(1), &mut rng);
        let schedule = short_schedule();
        let record = SftRecord { x0: standard_normal(&mut rng, 2), z: 0, r };
        let noise = standard_normal(&mut rng, 2);
        let loss = sft_loss(net.view(), net.view(), &schedule, &record, 5, &noise, &config(KlMode::KlD, gamma), None);
        prop_assert!(loss >= 0.0);
    }
}

#[test]
fn datasets_are_deterministic_and_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pre = Denoiser::new(mlp(1), &mut rng).snapshot();
    let schedule = short_schedule();
    let scenario = color_scenario();
    let a = build_dataset(&pre, &schedule, &scenario, 50, 7).unwrap();
    let b = build_dataset(&pre, &schedule, &scenario, 50, 7).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, build_dataset(&pre, &schedule, &scenario, 50, 8).unwrap());
    assert!(a.records.iter().all(|r| r.r.is_finite()));
    assert_eq!(build_dataset(&pre, &schedule, &scenario, 1, 7).unwrap().len(), 1);
    assert!(matches!(build_dataset(&pre, &schedule, &scenario, 0, 7), Err(Error::Config { .. })));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    a.write_jsonl(&path).unwrap();
    assert_eq!(SFTDataset::read_jsonl(&path).unwrap(), a);
    let text = std::fs::read_to_string(&path).unwrap();
    let truncated: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
    std::fs::write(&path, truncated).unwrap();
    assert!(matches!(SFTDataset::read_jsonl(&path), Err(Error::Format(_))));
}

#[test]
fn dataset_reward_matches_sampler_reward() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pre = Denoiser::new(mlp(4), &mut rng).snapshot();
    let schedule = short_schedule();
    let scenario = multi_scenario();
    let n = 5000;
    let data = build_dataset(&pre, &schedule, &scenario, n, 11).unwrap();
    let rewards: Vec<f64> = data.records.iter().map(|r| r.r).collect();
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let stats = evaluate(pre.view(), None, &schedule, &scenario, n, 12).unwrap();
    let se = (var / n as f64).sqrt().hypot(stats.reward_se);
    assert!((mean - stats.mean_reward).abs() <= 3.0 * se, "{mean} vs {} (SE {se})", stats.mean_reward);
}

#[test]
fn zero_steps_returns_the_pretrained_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = Denoiser::new(mlp(1), &mut rng);
    let pre = net.snapshot();
    let schedule = short_schedule();
    let scenario = color_scenario();
    let data = build_dataset(&pre, &schedule, &scenario, 200, 1).unwrap();
    let cfg = SFTConfig {
        steps: 0,
        dataset_size: 200,
        n_eval: 0,
        ..Default::default()
    };
    let out = run_sft(&mut net, &pre, &data, &schedule, &scenario, &cfg).unwrap();
    assert_eq!(out.snapshot.to_bytes(), pre.to_bytes());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut net = Denoiser::new(mlp(1), &mut rng);
    let pre = net.snapshot();
    let schedule = short_schedule();
    let scenario = color_scenario();
    let data = build_dataset(&pre, &schedule, &scenario, 10, 1).unwrap();
    for cfg in [
        SFTConfig { batch: 0, ..Default::default() },
        SFTConfig { dataset_size: 4, batch: 8, ..Default::default() },
        SFTConfig { gamma: -1.0, ..Default::default() },
    ] {
        let err = run_sft(&mut net, &pre, &data, &schedule, &scenario, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
    }
}

#[test]
fn anchored_fine_tuning_raises_reward_and_keeps_the_dataset_intact() {
    let schedule = ScheduleSpec::default().build().unwrap();
    let scenario = color_scenario();
    for seed in 0..3 {
        let pretrain = PretrainConfig {
            steps: 3000,
            ..Default::default()
        };
        let (pre, _) = pretrain_model(&schedule, &scenario, &ModelSpec::default(), &pretrain, seed).unwrap();
        let cfg = SFTConfig {
            dataset_size: 5000,
            steps: 2000,
            n_eval: 0,
            seed,
            ..Default::default()
        };
        let data = build_dataset(&pre, &schedule, &scenario, cfg.dataset_size, seed).unwrap();
        let before = data.clone();
        let mut net = Denoiser::from_snapshot(&pre);
        let out = run_sft(&mut net, &pre, &data, &schedule, &scenario, &cfg).unwrap();
        assert_eq!(data, before);
        let base = evaluate_against(pre.view(), pre.view(), &schedule, &scenario, 2000, seed).unwrap();
        let tuned = evaluate_against(out.snapshot.view(), pre.view(), &schedule, &scenario, 2000, seed).unwrap();
        assert!(tuned.mean_reward > base.mean_reward, "seed {seed}: {} vs {}", tuned.mean_reward, base.mean_reward);
    }
}
