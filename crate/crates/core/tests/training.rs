//! Training loop, optimizer and evaluation behavior.

use ndarray::{Array2, ArrayD, IxDyn};
use nfcgcn::graph::{Graph, MaskKind, Masks, NormalizationForm};
use nfcgcn::model::{GraphInputs, ModelParams, ModelSpec, Variant};
use nfcgcn::ops::{ConvSpec, InitScheme, ParamTensor};
use nfcgcn::synthetic::{random_dense, two_cliques};
use nfcgcn::trainer::{
    adam_step, derive_seed, eval_neighborhoods, evaluate, train, AdamConfig, AdamState, RunConfig,
};
use nfcgcn::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(variant: Variant, classes: usize) -> ModelSpec {
    let (gcn_dims, aggregation, classifier_affine) = match variant {
        Variant::NfcGcn => (vec![16, classes], NormalizationForm::RowMeanSelfLoop, true),
        Variant::GcnBaseline => (vec![16, classes], NormalizationForm::SymNormSelfLoop, false),
        Variant::NfcOnly | Variant::Mean5Only => (vec![], NormalizationForm::RowMeanSelfLoop, true),
    };
    ModelSpec {
        variant,
        conv: Some(ConvSpec::conv1d(2, 2, 8)),
        gcn_dims,
        num_classes: classes,
        dropout: 0.0,
        bandwidth: 3,
        aggregation,
        classifier_affine,
    }
}

fn config(model: ModelSpec, lr: f64, epochs: usize, seed: u64) -> RunConfig {
    RunConfig {
        lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        l2: 1e-4,
        max_epochs: epochs,
        patience: epochs,
        early_stopping: false,
        seed,
        resample_per_epoch: false,
        model,
    }
}

fn cliques() -> Graph<f64> {
    two_cliques(20, 8, 5, 5).unwrap()
}

/// Every class input here is one of two identical vectors, and the last
/// graph layer is a two-unit ReLU. A run that starts out confidently wrong
/// can switch both units off and settle at chance, so one collapse in ten
/// seeds is tolerated.
#[test]
fn separable_cliques_reach_full_train_accuracy() {
    let g = cliques();
    for variant in Variant::ALL {
        let missed: Vec<u64> = (0..10)
            .filter(|&seed| {
                let mut model = spec(variant, 2);
                model.dropout = 0.5;
                let r = train(&g, &config(model, 0.01, 200, seed)).unwrap();
                !r.curves.iter().any(|c| c.train_acc == 1.0)
            })
            .collect();
        assert!(
            missed.len() <= 1,
            "{variant}: seeds {missed:?} never fit the training set"
        );
    }
    let r = train(&g, &config(spec(Variant::NfcGcn, 2), 0.01, 200, 0)).unwrap();
    assert_eq!(r.curves.last().unwrap().train_acc, 1.0);
}

#[test]
fn train_loss_is_monotone_after_warmup() {
    let g = cliques();
    for (variant, seed) in Variant::ALL
        .into_iter()
        .flat_map(|v| (0..5).map(move |s| (v, s)))
    {
        let r = train(&g, &config(spec(variant, 2), 0.01, 200, seed)).unwrap();
        for w in r.curves[4..].windows(2) {
            assert!(
                w[1].train_loss <= w[0].train_loss + 1e-3,
                "{variant} seed {seed}: epoch {} loss {} rose to {}",
                w[1].epoch,
                w[0].train_loss,
                w[1].train_loss
            );
        }
    }
}

#[test]
fn zero_learning_rate_freezes_everything() {
    let g = random_dense::<f64>(24, 6, 3, 0.2, 4).unwrap();
    for variant in Variant::ALL {
        let mut model = spec(variant, 3);
        model.dropout = 0.3;
        let cfg = config(model, 0.0, 15, 9);
        let r = train(&g, &cfg).unwrap();
        let init = ModelParams::<f64>::init(
            &cfg.model,
            6,
            &mut ChaCha8Rng::seed_from_u64(derive_seed(9, 0)),
        )
        .unwrap();
        for (a, b) in r.params.iter().zip(init.iter()) {
            assert_eq!(a.value, b.value, "{variant}: {} moved", a.name);
        }
        let first = r.curves[0];
        for c in &r.curves {
            assert_eq!(
                (c.train_loss, c.val_loss, c.train_acc, c.val_acc),
                (
                    first.train_loss,
                    first.val_loss,
                    first.train_acc,
                    first.val_acc
                )
            );
        }
        assert_eq!(r.best_epoch, 1);
    }
}

#[test]
fn identical_configs_give_identical_runs() {
    let g = random_dense::<f64>(30, 6, 3, 0.2, 5).unwrap();
    for variant in Variant::ALL {
        let mut model = spec(variant, 3);
        model.dropout = 0.5;
        let mut cfg = config(model, 0.02, 25, 11);
        cfg.resample_per_epoch = true;
        let a = train(&g, &cfg).unwrap();
        let b = train(&g, &cfg).unwrap();
        assert_eq!(a.curves, b.curves, "{variant}");
        assert_eq!(a.params, b.params, "{variant}");
        assert_eq!(a.test_acc, b.test_acc);
        cfg.seed = 12;
        let c = train(&g, &cfg).unwrap();
        assert_ne!(a.curves, c.curves, "{variant}: seed had no effect");
    }
}

#[test]
fn zero_patience_stops_at_the_first_flat_epoch() {
    let g = random_dense::<f64>(24, 6, 3, 0.2, 6).unwrap();
    let mut cfg = config(spec(Variant::NfcGcn, 3), 0.0, 50, 3);
    cfg.early_stopping = true;
    cfg.patience = 0;
    let r = train(&g, &cfg).unwrap();
    assert_eq!(r.curves.len(), 2);
    assert!(r.stopped_early);

    cfg.lr = 0.05;
    let r = train(&g, &cfg).unwrap();
    let mut best = f64::NEG_INFINITY;
    let stop = r
        .curves
        .iter()
        .position(|c| {
            let flat = c.val_acc <= best;
            best = best.max(c.val_acc);
            flat
        })
        .map(|i| i + 1);
    assert_eq!(Some(r.curves.len()), stop.or(Some(50)));
}

#[test]
fn reported_test_accuracy_uses_the_best_epoch() {
    let g = random_dense::<f64>(30, 6, 3, 0.25, 7).unwrap();
    let mut model = spec(Variant::NfcGcn, 3);
    model.dropout = 0.5;
    let mut cfg = config(model, 0.05, 80, 21);
    cfg.early_stopping = true;
    cfg.patience = 10;
    let r = train(&g, &cfg).unwrap();
    assert!(r.best_epoch < r.curves.len(), "run never plateaued");

    let inputs = GraphInputs::new(&g, cfg.model.aggregation);
    let nbs = eval_neighborhoods(&g, &cfg.model, r.sampling_seed).unwrap();
    let acc = evaluate(&inputs, &r.params, &cfg.model, nbs.as_ref(), MaskKind::Test).unwrap();
    assert_eq!(r.test_acc, Some(acc));

    // Rerunning only up to the best epoch ends on exactly those parameters.
    let mut short = cfg.clone();
    short.max_epochs = r.best_epoch;
    short.patience = short.patience.min(r.best_epoch);
    let s = train(&g, &short).unwrap();
    assert_eq!(s.params, r.params);
    assert_eq!(s.test_acc, r.test_acc);
}

#[test]
fn non_finite_loss_names_the_epoch() {
    let g = cliques();
    let mut cfg = config(spec(Variant::GcnBaseline, 2), 1e300, 20, 1);
    cfg.l2 = 0.0;
    let err = train(&g, &cfg).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(err.to_string().contains("epoch"), "{err}");
}

#[test]
fn invalid_runs_are_rejected() {
    let g = cliques();
    let mut cfg = config(spec(Variant::NfcGcn, 2), 0.01, 10, 1);
    cfg.patience = 11;
    assert!(matches!(train(&g, &cfg), Err(Error::Config(_))));
    cfg.patience = 5;
    cfg.lr = -1.0;
    assert!(matches!(train(&g, &cfg), Err(Error::Config(_))));
    cfg.lr = 0.01;
    let no_train = g
        .with_masks(Masks::from_indices(40, &[], &[0, 1], &[2]))
        .unwrap();
    assert!(matches!(train(&no_train, &cfg), Err(Error::EmptyMask(_))));
    let no_test = g
        .with_masks(Masks::from_indices(40, &[0, 20], &[1, 21], &[]))
        .unwrap();
    assert_eq!(train(&no_test, &cfg).unwrap().test_acc, None);
}

/// Textbook bias-corrected Adam on one scalar.
fn adam_oracle(w0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t as i32 + 1));
        let v_hat = v / (1.0 - b2.powi(t as i32 + 1));
        w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    w
}

#[test]
fn adam_matches_a_scalar_oracle_on_random_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20 {
        let cfg = AdamConfig {
            lr: rng.random_range(1e-4..0.1),
            beta1: rng.random_range(0.5..0.99),
            beta2: rng.random_range(0.9..0.9999),
            eps: 1e-8,
        };
        let steps = rng.random_range(1..60);
        let shape = [3usize, 2];
        let init: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(&shape), init.clone()).unwrap();
        let mut p = ParamTensor::from_value("w", value, InitScheme::Zeros, true);
        let mut state = AdamState::new([&p]);
        for g in &grads {
            p.grad = ArrayD::from_shape_vec(IxDyn(&shape), g.clone()).unwrap();
            adam_step([&mut p], &mut state, cfg);
        }
        for (i, (&got, &w0)) in p.value.iter().zip(&init).enumerate() {
            let seq: Vec<f64> = grads.iter().map(|g| g[i]).collect();
            let want = adam_oracle(w0, &seq, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
            assert!(
                (got - want).abs() <= 1e-12 * want.abs().max(1.0),
                "coord {i}: {got} vs {want}"
            );
        }
        assert_eq!(state.t, steps as u64);
    }
}

/// 700 nodes with labels `i mod 7`, random features and edges, all in the test mask.
fn balanced_seven(seed: u64) -> Graph<f64> {
    let n = 700;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<(usize, usize)> = (0..2 * n)
        .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
        .collect();
    let x = Array2::from_shape_simple_fn((n, 10), || rng.random_range(-1.0..1.0));
    let labels = (0..n).map(|i| Some(i % 7)).collect();
    let all: Vec<usize> = (0..n).collect();
    Graph::build(n, &edges, x, labels, Masks::from_indices(n, &[], &[], &all)).unwrap()
}

#[test]
fn untrained_models_score_chance() {
    let g = balanced_seven(0);
    for variant in [Variant::NfcGcn, Variant::GcnBaseline] {
        let s = spec(variant, 7);
        let inputs = GraphInputs::new(&g, s.aggregation);
        let seeds = 40;
        let mean = (0..seeds)
            .map(|seed| {
                let params =
                    ModelParams::<f64>::init(&s, 10, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let nbs = eval_neighborhoods(&g, &s, seed).unwrap();
                evaluate(&inputs, &params, &s, nbs.as_ref(), MaskKind::Test).unwrap()
            })
            .sum::<f64>()
            / seeds as f64;
        assert!(
            (mean - 1.0 / 7.0).abs() < 0.02,
            "{variant}: mean accuracy {mean}"
        );
    }
}

#[test]
fn evaluate_edge_cases() {
    let g = cliques();
    let cfg = config(spec(Variant::NfcGcn, 2), 0.01, 200, 1);
    let r = train(&g, &cfg).unwrap();
    let inputs = GraphInputs::new(&g, cfg.model.aggregation);
    let nbs = eval_neighborhoods(&g, &cfg.model, r.sampling_seed).unwrap();
    assert_eq!(
        evaluate(
            &inputs,
            &r.params,
            &cfg.model,
            nbs.as_ref(),
            MaskKind::Train
        )
        .unwrap(),
        1.0
    );

    let single = g
        .with_masks(Masks::from_indices(40, &[], &[], &[3]))
        .unwrap();
    let inputs = GraphInputs::new(&single, cfg.model.aggregation);
    let acc = evaluate(&inputs, &r.params, &cfg.model, nbs.as_ref(), MaskKind::Test).unwrap();
    assert!(acc == 0.0 || acc == 1.0);
    assert!(matches!(
        evaluate(&inputs, &r.params, &cfg.model, nbs.as_ref(), MaskKind::Val),
        Err(Error::EmptyMask(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn best_epoch_is_the_earliest_maximum(seed in 0u64..1000, variant in 0usize..4, patience in 0usize..6) {
        let g = random_dense::<f64>(20, 5, 3, 0.25, seed).unwrap();
        let mut model = spec(Variant::ALL[variant], 3);
        model.dropout = 0.2;
        let mut cfg = config(model, 0.05, 30, seed);
        cfg.early_stopping = true;
        cfg.patience = patience;
        let r = train(&g, &cfg).unwrap();
        let max = r.curves.iter().map(|c| c.val_acc).fold(f64::NEG_INFINITY, f64::max);
        let first = r.curves.iter().find(|c| c.val_acc == max).unwrap();
        prop_assert_eq!(first.epoch, r.best_epoch);
        prop_assert_eq!(r.best_val_acc, max);
        for (i, c) in r.curves.iter().enumerate() {
            prop_assert_eq!(c.epoch, i + 1);
            prop_assert!((0.0..=1.0).contains(&c.train_acc) && (0.0..=1.0).contains(&c.val_acc));
        }
        if r.stopped_early {
            prop_assert_eq!(r.curves.len(), r.best_epoch + patience + 1);
        }
    }
}
