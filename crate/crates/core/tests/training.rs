//! Training-loop contracts: determinism, sequencing, learning signal.

mod common;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unimlip::checkpoint::{encode, state_to_container};
use unimlip::datagen::{CorpusSpec, Vocabulary};
use unimlip::encoders::ModelConfig;
use unimlip::model::{image_batch, Model};
use unimlip::nn::ParamSet;
use unimlip::perturb::PerturbConfig;
use unimlip::tensor::Tensor;
use unimlip::trainer::{run_phase, run_phase_quiet, train_step, Hooks, TrainConfig, TrainState};
use unimlip::Error;

fn bytes(state: &TrainState) -> Vec<u8> {
    encode(&state_to_container(state))
}

fn changed(a: &ParamSet, b: &ParamSet, prefix: &str) -> bool {
    a.iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .any(|(k, t)| b.get(k).unwrap().data() != t.data())
}

#[test]
fn identical_steps_give_identical_states_in_both_phases() {
    let data = common::corpus(16, 1);
    let cfg = common::train_config();
    let mut state = common::state(2, &cfg);
    run_phase_quiet(&mut state, &cfg, 1, &data).unwrap();
    let batch = &common::refs(&data)[..4];
    for phase in [1u8, 2] {
        let mut a = state.clone();
        if phase == 2 {
            a.phase = 2;
            a.model.freeze_bn();
        }
        let mut b = a.clone();
        let ra = train_step(&mut a, &cfg, batch).unwrap();
        let rb = train_step(&mut b, &cfg, batch).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(bytes(&a), bytes(&b), "phase {phase}");
        assert_ne!(bytes(&a), bytes(&state));
    }
}

#[test]
fn phases_must_run_in_order() {
    let data = common::corpus(8, 1);
    let cfg = common::train_config();
    let mut fresh = common::state(0, &cfg);
    let before = bytes(&fresh);
    assert!(matches!(run_phase_quiet(&mut fresh, &cfg, 2, &data), Err(Error::Sequencing(_))));
    assert_eq!(bytes(&fresh), before);
    assert!(matches!(run_phase_quiet(&mut fresh, &cfg, 3, &data), Err(Error::Config(_))));

    run_phase_quiet(&mut fresh, &cfg, 1, &data).unwrap();
    run_phase_quiet(&mut fresh, &cfg, 2, &data).unwrap();
    assert!(matches!(run_phase_quiet(&mut fresh, &cfg, 1, &data), Err(Error::Sequencing(_))));
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let data = common::corpus(8, 1);
    let mut cfg = common::train_config();
    cfg.weights = unimlip::losses::LossWeights {
        lambda_cm: 0.0,
        lambda_um: 0.0,
        lambda_fm: 0.0,
    };
    let batch = &common::refs(&data)[..4];
    for phase in [1u8, 2] {
        let mut state = common::state(3, &cfg);
        if phase == 2 {
            state.phase = 2;
            state.model.freeze_bn();
        }
        let before = state.model.params.clone();
        let report = train_step(&mut state, &cfg, batch).unwrap();
        assert_eq!(report.total, 0.0);
        assert!(report.itc > 0.0);
        assert_eq!(state.model.params, before, "phase {phase}");
        assert_eq!(state.step, 1);
    }
}

#[test]
fn single_sample_batch_is_rejected() {
    let data = common::corpus(2, 1);
    let cfg = common::train_config();
    let mut state = common::state(0, &cfg);
    assert!(matches!(train_step(&mut state, &cfg, &common::refs(&data)[..1]), Err(Error::Input(_))));
}

#[test]
fn empty_first_phase_only_advances_the_marker() {
    let data = common::corpus(8, 1);
    let cfg = TrainConfig {
        phase1_epochs: 0,
        ..common::train_config()
    };
    let mut state = common::state(4, &cfg);
    let params = state.model.params.clone();
    let records = run_phase_quiet(&mut state, &cfg, 1, &data).unwrap();
    assert!(records.is_empty());
    assert_eq!(state.model.params, params);
    assert_eq!((state.phase, state.phase1_done, state.step), (1, true, 0));
    run_phase_quiet(&mut state, &cfg, 2, &data).unwrap();
    assert_eq!(state.phase, 2);
}

#[test]
fn one_metrics_record_per_step() {
    let data = common::corpus(13, 1);
    let cfg = TrainConfig {
        phase1_epochs: 2,
        ..common::train_config()
    };
    let mut state = common::state(4, &cfg);
    let mut steps = Vec::new();
    let mut epochs = 0;
    let mut hooks = Hooks {
        on_step: &mut |r| steps.push((r.step, r.epoch, r.lr)),
        on_epoch: &mut |_, _| {
            epochs += 1;
            Ok(())
        },
    };
    run_phase(&mut state, &cfg, 1, &data, &mut hooks).unwrap();
    // 13 samples fill three batches of 4 per epoch.
    assert_eq!(steps.len(), 6);
    assert_eq!(epochs, 2);
    assert_eq!(steps.iter().map(|s| s.0).collect::<Vec<_>>(), (1..=6).collect::<Vec<u64>>());
    assert_eq!(steps[0].2, cfg.base_lr);
    assert!(steps.windows(2).all(|w| w[1].2 <= w[0].2));
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn phase_one_loss_falls_for_three_seeds() {
    let data = common::corpus(96, 7);
    let cfg = TrainConfig {
        phase1_epochs: 8,
        batch_size: 8,
        ..common::train_config()
    };
    for seed in 0..3 {
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let mut state = common::state(seed, &cfg);
        let mut totals = Vec::new();
        let mut hooks = Hooks {
            on_step: &mut |r| totals.push(r.losses.total),
            on_epoch: &mut |_, _| Ok(()),
        };
        run_phase(&mut state, &cfg, 1, &data, &mut hooks).unwrap();
        let tenth = totals.len() / 10;
        let n = totals.len();
        let early = median(&mut totals[..tenth].to_vec());
        let late = median(&mut totals[n - tenth..].to_vec());
        assert!(late < early, "seed {seed}: {early} -> {late}");
    }
}

#[test]
fn masked_language_gradient_reaches_both_encoders() {
    let data = common::corpus(8, 2);
    let batch = &common::refs(&data)[..8];
    let with = |lambda_fm: f64| {
        let mut cfg = common::train_config();
        cfg.weights.lambda_fm = lambda_fm;
        let mut state = common::state(6, &cfg);
        train_step(&mut state, &cfg, batch).unwrap();
        state.model.params
    };
    let (off, on) = (with(0.0), with(0.5));
    assert!(changed(&off, &on, "vision."), "vision encoder untouched by the MLM term");
    assert!(changed(&off, &on, "text."), "text encoder untouched by the MLM term");
    assert!(changed(&off, &on, "fusion."));
}

#[test]
fn zero_output_head_gives_uniform_prediction_loss() {
    let data = common::corpus(8, 3);
    let cfg = common::train_config();
    let mut state = common::state(1, &cfg);
    for name in ["fusion.head.w", "fusion.head.b"] {
        let t = state.model.params.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let report = train_step(&mut state, &cfg, &common::refs(&data)[..4]).unwrap();
    let ln_v = (Vocabulary::build().len() as f64).ln();
    assert!((report.mlm - ln_v).abs() < 1e-9, "{} vs {ln_v}", report.mlm);
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn perturbed_image_embedding_stays_closest_to_its_own_image() {
    let spec = CorpusSpec {
        n_samples: 288,
        seed: 8,
        ..CorpusSpec::default()
    };
    let data = unimlip::datagen::generate_corpus(&spec, &Vocabulary::build(), 8).unwrap();
    let (train, held_out) = data.split_at(256);
    let config = ModelConfig {
        max_len: 8,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        phase1_epochs: 8,
        batch_size: 32,
        base_lr: 1e-3,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(Model::new(config, Vocabulary::build().len(), 3).unwrap(), &cfg);
    run_phase_quiet(&mut state, &cfg, 1, train).unwrap();

    let refs = common::refs(held_out);
    let images = image_batch(&refs, 1, spec.image_size).unwrap();
    // Both passes normalize with the same batch statistics so that only the
    // feature perturbation separates them.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (_, clean) = state.model.clone().encode_image(&images, true, None, &mut rng).unwrap();
    let (_, noisy) = state
        .model
        .encode_image(&images, true, Some(&PerturbConfig::default()), &mut rng)
        .unwrap();
    let mut wins = 0;
    for i in 0..32 {
        let other = *(0..32).filter(|&j| j != i).collect::<Vec<_>>().choose(&mut rng).unwrap();
        if cosine(noisy.row(i), clean.row(i)) > cosine(noisy.row(i), clean.row(other)) {
            wins += 1;
        }
    }
    assert!(wins >= 29, "{wins}/32 rows");
}
