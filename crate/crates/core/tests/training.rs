use msad_core::autodiff::Activation;
use msad_core::data::WindowSet;
use msad_core::evaluation::evaluate;
use msad_core::model::{ModelConfig, ModelParams};
use msad_core::training::{train, train_with_validation, StopReason, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const T: usize = 8;
const D_IN: usize = 2;

/// Positives sit one unit above the negatives on every channel.
fn separable(n: usize, seed: u64) -> WindowSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * T * D_IN);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = (i % 3 == 0) as u8;
        for _ in 0..T * D_IN {
            data.push(y as f64 + rng.gen_range(-0.3..0.3));
        }
        labels.push(y);
    }
    WindowSet {
        window_len: T,
        feature_dim: D_IN,
        data,
        labels,
        offsets: (0..n).collect(),
    }
}

fn model() -> ModelParams {
    let cfg = ModelConfig {
        window_len: T,
        feature_dim: D_IN,
        model_dim: 8,
        heads: 2,
        layers_per_scale: 1,
        ffn_dim: 16,
        scale_factors: vec![1, 2],
        activation: Activation::Gelu,
        dropout: 0.0,
    };
    ModelParams::init(&cfg, 3).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        initial_lr: 3e-3,
        batch_size: 16,
        max_epochs: 30,
        patience: 30,
        ..Default::default()
    }
}

#[test]
fn separable_data_loss_halves_within_thirty_epochs() {
    let data = separable(240, 1);
    let (params, log) = train(&model(), &data, &config()).unwrap();
    let losses = log.train_losses();
    assert!(losses.len() <= 30);
    let best = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(best <= 0.5 * losses[0], "losses {losses:?}");
    let ev = evaluate(&params, &separable(90, 2), 0.5).unwrap();
    assert!(ev.report.f1 >= 0.95, "{:?}", ev.report);
}

#[test]
fn same_seed_same_log_and_parameters() {
    let data = separable(120, 4);
    let cfg = TrainConfig {
        max_epochs: 4,
        ..config()
    };
    let (p1, l1) = train(&model(), &data, &cfg).unwrap();
    let (p2, l2) = train(&model(), &data, &cfg).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(p1.flat_values(), p2.flat_values());
    let (p3, _) = train(&model(), &data, &TrainConfig { seed: 9, ..cfg }).unwrap();
    assert_ne!(p1.flat_values(), p3.flat_values());
}

#[test]
fn patience_one_stops_after_second_epoch_without_improvement() {
    let fit = separable(60, 5);
    let val = separable(30, 6);
    // a vanishing learning rate leaves the validation loss flat
    let cfg = TrainConfig {
        initial_lr: 1e-14,
        lr_min: 0.0,
        patience: 1,
        ..config()
    };
    let (params, log) = train_with_validation(&model(), &fit, &val, &cfg).unwrap();
    assert_eq!(log.epochs.len(), 2);
    assert_eq!(log.stop_reason, StopReason::EarlyStopping);
    assert_eq!(log.best_epoch, 1);
    assert!(params.all_finite());
}

#[test]
fn returned_parameters_are_the_best_validation_epoch() {
    let fit = separable(90, 7);
    let val = separable(45, 8);
    let cfg = TrainConfig {
        max_epochs: 8,
        patience: 2,
        ..config()
    };
    let (params, log) = train_with_validation(&model(), &fit, &val, &cfg).unwrap();
    let best = log
        .epochs
        .iter()
        .map(|e| e.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(log.epochs[log.best_epoch - 1].val_loss, best);
    let (loss, _) = msad_core::training::validation_metrics(&params, &val).unwrap();
    assert!((loss - best).abs() < 1e-12);
}

#[test]
fn single_class_training_data_is_rejected() {
    let mut data = separable(30, 9);
    data.labels.iter_mut().for_each(|l| *l = 0);
    assert!(train(&model(), &data, &config()).is_err());
}
