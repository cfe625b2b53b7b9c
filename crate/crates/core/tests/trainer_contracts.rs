mod common;

use common::{small_config, tiny_splits};
use genb::error::Error;
use genb::losses::{bce_from_logits, DebiasLoss};
use genb::nn::ParamSet;
use genb::optim::Optimizer;
use genb::trainer::{
    prepare_samples, train, train_batch, train_from, train_step_bias, train_step_target,
    train_step_target_with_bias_logits, BiasVariant, Sample, TrainConfig, TrainState,
};
use ndarray::Array1;

fn state_and_samples(config: TrainConfig) -> (TrainState, Vec<Sample>) {
    let (train, _) = tiny_splits(11);
    let state = TrainState::new(config, &train.spec).unwrap();
    (state, prepare_samples(&train))
}

fn batch(samples: &[Sample], start: usize, len: usize) -> Vec<&Sample> {
    samples[start..start + len].iter().collect()
}

fn bias_side(state: &TrainState) -> [u64; 3] {
    [
        state.models.bias.fingerprint(),
        state.models.generator.fingerprint(),
        state.models.discriminator.fingerprint(),
    ]
}

#[test]
fn bias_step_leaves_target_bit_identical() {
    for bias_model in [BiasVariant::Genb, BiasVariant::Vanilla] {
        let (mut state, samples) = state_and_samples(TrainConfig {
            bias_model,
            d_steps_per_batch: 2,
            ..small_config()
        });
        for k in 0..4 {
            let before = state.models.target.fingerprint();
            let bias_before = bias_side(&state);
            train_step_bias(&mut state, &batch(&samples, k * 16, 16)).unwrap();
            assert_eq!(state.models.target.fingerprint(), before);
            assert_ne!(bias_side(&state), bias_before);
            train_step_target(&mut state, &batch(&samples, k * 16, 16)).unwrap();
            state.step += 1;
        }
    }
}

#[test]
fn target_step_leaves_bias_side_bit_identical() {
    let (mut state, samples) = state_and_samples(small_config());
    for k in 0..4 {
        train_step_bias(&mut state, &batch(&samples, k * 16, 16)).unwrap();
        let before = bias_side(&state);
        let target_before = state.models.target.fingerprint();
        train_step_target(&mut state, &batch(&samples, k * 16, 16)).unwrap();
        assert_eq!(bias_side(&state), before);
        assert_ne!(state.models.target.fingerprint(), target_before);
        state.step += 1;
    }
}

/// Ground-truth-only bias update computed by hand: mean BCE on generator
/// features, one optimizer step on the bias model and the generator.
#[test]
fn disabling_gan_and_distillation_reduces_to_a_bce_update() {
    let config = TrainConfig {
        use_gan: false,
        use_distill: false,
        ..small_config()
    };
    let (mut state, samples) = state_and_samples(config.clone());
    let b = batch(&samples, 0, 16);
    let mut reference = state.clone();
    train_step_bias(&mut state, &b).unwrap();

    let models = &reference.models;
    let mut rng = genb::rng::stream_rng(config.seed, genb::rng::Stream::GenNoise, 0);
    let mut bias_grad = models.bias.zeros_like();
    let mut gen_grad = models.generator.zeros_like();
    for s in &b {
        let z = genb::models::sample_noise(&mut rng, models.config.num_objects, models.config.noise_dim);
        let (fake, gcache) = models.generator.forward_cached(z.view()).unwrap();
        let (out, bcache) = models.bias.forward_cached(fake.view(), &s.tokens).unwrap();
        let loss = bce_from_logits(out.logits.as_slice().unwrap(), &s.y_gt).unwrap();
        let d = Array1::from(loss.grad) / b.len() as f64;
        let d_fake = models.bias.backward(&bcache, &d, &mut bias_grad);
        models.generator.backward(&gcache, &d_fake, &mut gen_grad);
    }
    let mut opt_b = reference.opt_bias.clone();
    let mut opt_g = reference.opt_generator.clone();
    opt_b.step(&mut reference.models.bias, &bias_grad).unwrap();
    opt_g.step(&mut reference.models.generator, &gen_grad).unwrap();

    let delta = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(delta(&state.models.bias.flatten(), &reference.models.bias.flatten()) <= 1e-12);
    assert!(delta(&state.models.generator.flatten(), &reference.models.generator.flatten()) <= 1e-12);
    assert_eq!(state.models.discriminator, reference.models.discriminator);
}

#[test]
fn plain_variant_is_a_supervised_step() {
    let (mut state, samples) = state_and_samples(TrainConfig {
        debias_loss: DebiasLoss::Plain,
        ..small_config()
    });
    let b = batch(&samples, 16, 16);
    let mut reference = state.models.target.clone();
    let mut grad = reference.zeros_like();
    for s in &b {
        let (out, cache) = reference.forward_cached(s.visual.view(), &s.tokens).unwrap();
        let loss = bce_from_logits(out.logits.as_slice().unwrap(), &s.y_gt).unwrap();
        reference.backward(&cache, &(Array1::from(loss.grad) / b.len() as f64), &mut grad);
    }
    let mut opt: Optimizer = state.opt_target.clone();
    opt.step(&mut reference, &grad).unwrap();

    train_step_target(&mut state, &b).unwrap();
    assert_eq!(state.models.target, reference);
}

#[test]
fn saturated_negative_bias_logits_match_the_plain_step() {
    let (state, samples) = state_and_samples(small_config());
    let b = batch(&samples, 32, 16);
    let forced = vec![vec![-1e3; state.models.config.num_answers]; b.len()];

    let mut debiased = state.clone();
    train_step_target_with_bias_logits(&mut debiased, &b, &forced).unwrap();
    let mut plain = state.clone();
    plain.config.debias_loss = DebiasLoss::Plain;
    train_step_target_with_bias_logits(&mut plain, &b, &forced).unwrap();

    let a = debiased.models.target.flatten();
    let p = plain.models.target.flatten();
    let base = state.models.target.flatten();
    for ((x, y), z) in a.iter().zip(&p).zip(&base) {
        assert!(((x - z) - (y - z)).abs() <= 1e-6);
    }
}

#[test]
fn identical_states_take_identical_steps() {
    let (state, samples) = state_and_samples(TrainConfig {
        d_steps_per_batch: 3,
        ..small_config()
    });
    let (mut a, mut b) = (state.clone(), state);
    for k in 0..3 {
        let la = train_batch(&mut a, &batch(&samples, k * 16, 16)).unwrap();
        let lb = train_batch(&mut b, &batch(&samples, k * 16, 16)).unwrap();
        assert_eq!(la, lb);
    }
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip_then_step_equals_direct_step() {
    let dir = tempfile::tempdir().unwrap();
    let (mut state, samples) = state_and_samples(small_config());
    train_batch(&mut state, &batch(&samples, 0, 16)).unwrap();
    let path = dir.path().join("ckpt.tar");
    state.save(&path).unwrap();
    let mut restored = TrainState::load(&path).unwrap();
    assert_eq!(restored, state);

    let b = batch(&samples, 16, 16);
    let direct = train_batch(&mut state, &b).unwrap();
    let resumed = train_batch(&mut restored, &b).unwrap();
    assert_eq!(direct, resumed);
    assert_eq!(state, restored);
}

#[test]
fn full_runs_are_deterministic() {
    let (train_split, test_split) = tiny_splits(5);
    let a = train(small_config(), &train_split, &test_split, None).unwrap();
    let b = train(small_config(), &train_split, &test_split, None).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.report.final_metrics, b.report.final_metrics);
    assert_eq!(a.report.history, b.report.history);
}

#[test]
fn resuming_mid_run_matches_an_uninterrupted_run() {
    let (train_split, test_split) = tiny_splits(6);
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        epochs: 3,
        checkpoint_every: 4,
        ..small_config()
    };
    let full = train(config.clone(), &train_split, &test_split, Some(dir.path())).unwrap();
    let mid = dir.path().join("checkpoint_step8.tar");
    assert!(full.checkpoints.contains(&mid));

    let resumed_dir = tempfile::tempdir().unwrap();
    let resumed = train_from(TrainState::load(&mid).unwrap(), &train_split, &test_split, Some(resumed_dir.path())).unwrap();
    assert_eq!(resumed.state, full.state);
    assert_eq!(resumed.report.final_metrics, full.report.final_metrics);
}

#[test]
fn run_writes_its_artifacts() {
    let (train_split, test_split) = tiny_splits(7);
    let dir = tempfile::tempdir().unwrap();
    let out = train(small_config(), &train_split, &test_split, Some(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,l_gt,l_gan_d,l_gan_g,l_distill,l_target"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len() as u64, out.state.step);
    for row in rows {
        assert!(row.split(',').skip(1).all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
    assert!(dir.path().join("checkpoint_final.tar").exists());
    let fin = out.report.final_metrics.unwrap();
    assert_eq!(out.report.history.len(), 1);
    assert!((fin.ood_gap - (fin.train.overall - fin.test.overall)).abs() < 1e-15);
}

#[test]
fn non_finite_input_aborts_and_keeps_last_good_state() {
    let (mut train_split, test_split) = tiny_splits(8);
    train_split.instances[40].features[[0, 0]] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        epochs: 1,
        ..small_config()
    };
    let err = train(config, &train_split, &test_split, Some(dir.path())).unwrap_err();
    let Error::NonFiniteLoss { step, .. } = err else {
        panic!("expected a non-finite abort, got {err:?}");
    };
    let saved = TrainState::load(&dir.path().join("checkpoint_last_good.tar")).unwrap();
    assert_eq!(saved.step, step);
    assert!(saved.models.target.flatten().iter().all(|v| v.is_finite()));
}
