//! Full-batch training with Adam and validation-based early stopping.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{ArrayD, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, MaskKind};
use crate::model::{
    argmax_rows, model_backward, model_forward, GraphInputs, ModelParams, ModelSpec,
};
use crate::ops::{softmax_cross_entropy, ParamTensor};
use crate::sampling::Neighborhoods;
use crate::scalar::Scalar;

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Weight of `Σ ‖W‖²` over weight matrices and filters.
    pub l2: f64,
    pub max_epochs: usize,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    #[serde(default = "default_true")]
    pub early_stopping: bool,
    pub seed: u64,
    /// Draw fresh neighborhoods for every training epoch. Evaluation always
    /// uses the neighborhoods drawn from the run seed.
    #[serde(default)]
    pub resample_per_epoch: bool,
    pub model: ModelSpec,
}

impl RunConfig {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        // lr = 0 is allowed: it freezes the parameters, which is a useful check.
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("Adam epsilon must be positive".into());
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return bad(format!("L2 weight {} must be non-negative", self.l2));
        }
        if self.max_epochs == 0 {
            return bad("need at least one epoch".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        self.model.validate(feature_dim)
    }

    /// Seed for the evaluation neighborhoods (and training ones unless resampled).
    pub fn sampling_seed(&self) -> u64 {
        derive_seed(self.seed, 1)
    }
}

/// SplitMix64 finalizer over `(seed, tag)`; keeps the generators for
/// initialization, dropout and sampling independent.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
    /// Steps taken so far.
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&RunConfig> for AdamConfig {
    fn from(c: &RunConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a ParamTensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| {
                (
                    ArrayD::zeros(p.value.raw_dim()),
                    ArrayD::zeros(p.value.raw_dim()),
                )
            })
            .unzip();
        Self { m, v, t: 0 }
    }
}

/// One bias-corrected Adam step over `params` in iteration order, using the
/// gradients stored alongside each tensor.
pub fn adam_step<'a, T: Scalar + 'a>(
    params: impl IntoIterator<Item = &'a mut ParamTensor<T>>,
    state: &mut AdamState<T>,
    cfg: AdamConfig,
) {
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let lr = T::from_f64_lossy(cfg.lr);
    let eps = T::from_f64_lossy(cfg.eps);
    for ((p, m), v) in params.into_iter().zip(&mut state.m).zip(&mut state.v) {
        Zip::from(&mut p.value)
            .and(&p.grad)
            .and(m)
            .and(v)
            .for_each(|w, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult<T> {
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// `None` when the test mask is empty.
    pub test_acc: Option<f64>,
    pub curves: Vec<EpochRecord>,
    /// Parameters from `best_epoch`.
    pub params: ModelParams<T>,
    pub sampling_seed: u64,
    pub stopped_early: bool,
    pub wall_seconds: f64,
}

/// Mean cross-entropy and accuracy of `logits` over the labeled nodes of a mask.
pub fn masked_metrics<T: Scalar>(
    logits: &ndarray::Array2<T>,
    inputs: &GraphInputs<T>,
    which: MaskKind,
) -> Result<(f64, f64)> {
    let labeled = inputs.labeled(which);
    if labeled.is_empty() {
        return Err(Error::EmptyMask(which.to_string()));
    }
    let rows: Vec<usize> = labeled.iter().map(|&(i, _)| i).collect();
    let labels: Vec<usize> = labeled.iter().map(|&(_, l)| l).collect();
    let picked = logits.select(Axis(0), &rows);
    let (sum, _) = softmax_cross_entropy(picked.view(), &labels)?;
    let correct = argmax_rows(picked.view())
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    let n = rows.len() as f64;
    Ok((sum.to_f64_lossy() / n, correct as f64 / n))
}

/// Fraction of labeled nodes in `which` predicted correctly (evaluation mode).
pub fn evaluate<T: Scalar>(
    inputs: &GraphInputs<T>,
    params: &ModelParams<T>,
    spec: &ModelSpec,
    nbs: Option<&Neighborhoods>,
    which: MaskKind,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cache = model_forward(spec, params, inputs, nbs, false, &mut rng)?;
    masked_metrics(&cache.logits, inputs, which).map(|(_, acc)| acc)
}

/// Neighborhoods for evaluation, or `None` for variants that do not sample.
pub fn eval_neighborhoods<T: Scalar>(
    g: &Graph<T>,
    spec: &ModelSpec,
    sampling_seed: u64,
) -> Result<Option<Neighborhoods>> {
    if spec.uses_sampling() {
        Neighborhoods::sample(g, spec.bandwidth, sampling_seed).map(Some)
    } else {
        Ok(None)
    }
}

pub fn train<T: Scalar>(g: &Graph<T>, cfg: &RunConfig) -> Result<RunResult<T>> {
    let started = Instant::now();
    cfg.validate(g.feature_dim())?;
    let spec = &cfg.model;
    if g.num_classes() > spec.num_classes {
        return Err(Error::Config(format!(
            "graph has {} classes but the model predicts {}",
            g.num_classes(),
            spec.num_classes
        )));
    }
    let inputs = GraphInputs::new(g, spec.aggregation);
    for which in [MaskKind::Train, MaskKind::Val] {
        if inputs.labeled(which).is_empty() {
            return Err(Error::EmptyMask(which.to_string()));
        }
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let mut params = ModelParams::<T>::init(spec, g.feature_dim(), &mut init_rng)?;
    let mut adam = AdamState::new(params.iter());
    let adam_cfg = AdamConfig::from(cfg);
    let l2 = T::from_f64_lossy(cfg.l2);
    let sampling_seed = cfg.sampling_seed();
    let eval_nbs = eval_neighborhoods(g, spec, sampling_seed)?;

    let mut curves = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(usize, f64, ModelParams<T>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let resampled = if cfg.resample_per_epoch && spec.uses_sampling() {
            Some(Neighborhoods::sample(
                g,
                spec.bandwidth,
                derive_seed(sampling_seed, epoch as u64 + 2),
            )?)
        } else {
            None
        };
        let train_nbs = resampled.as_ref().or(eval_nbs.as_ref());
        let numeric = |e: Error| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}")),
            other => other,
        };
        let cache = model_forward(spec, &params, &inputs, train_nbs, true, &mut dropout_rng)
            .map_err(numeric)?;
        let loss =
            model_backward(spec, &mut params, &cache, &inputs, train_nbs, l2).map_err(numeric)?;
        if !loss.total().is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        adam_step(params.iter_mut(), &mut adam, adam_cfg);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eval = model_forward(spec, &params, &inputs, eval_nbs.as_ref(), false, &mut rng)
            .map_err(numeric)?;
        let (train_loss, train_acc) = masked_metrics(&eval.logits, &inputs, MaskKind::Train)?;
        let (val_loss, val_acc) = masked_metrics(&eval.logits, &inputs, MaskKind::Val)?;
        curves.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            train_acc,
            val_acc,
        });
        log::debug!("epoch {epoch}: train loss {train_loss:.4} acc {train_acc:.4}, val loss {val_loss:.4} acc {val_acc:.4}");

        if best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc) {
            best = Some((epoch, val_acc, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stopping && since_best > cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, best_val_acc, params) = best.expect("at least one epoch ran");
    let test_acc = if inputs.labeled(MaskKind::Test).is_empty() {
        None
    } else {
        Some(evaluate(
            &inputs,
            &params,
            spec,
            eval_nbs.as_ref(),
            MaskKind::Test,
        )?)
    };
    Ok(RunResult {
        best_epoch,
        best_val_acc,
        test_acc,
        curves,
        params,
        sampling_seed,
        stopped_early,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

pub const CURVES_HEADER: &str = "epoch,train_loss,val_loss,train_acc,val_acc";

pub fn curves_csv(curves: &[EpochRecord]) -> String {
    let mut out = String::with_capacity(64 * (curves.len() + 1));
    out.push_str(CURVES_HEADER);
    out.push('\n');
    for r in curves {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc
        )
        .expect("writing to a String");
    }
    out
}

/// What `summary.json` records for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test_acc: Option<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub wall_seconds: f64,
    pub sampling_seed: u64,
    pub config: RunConfig,
}

impl RunSummary {
    pub fn new<T>(cfg: &RunConfig, r: &RunResult<T>) -> Self {
        Self {
            best_epoch: r.best_epoch,
            best_val_acc: r.best_val_acc,
            test_acc: r.test_acc,
            epochs_run: r.curves.len(),
            stopped_early: r.stopped_early,
            wall_seconds: r.wall_seconds,
            sampling_seed: r.sampling_seed,
            config: cfg.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::InitScheme;

    fn scalar_param(v: f64) -> ParamTensor<f64> {
        ParamTensor::from_value(
            "w",
            ArrayD::from_elem(ndarray::IxDyn(&[1]), v),
            InitScheme::Zeros,
            false,
        )
    }

    fn adam_cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(0.5);
        p.grad.fill(1.0);
        let mut state = AdamState::new([&p]);
        adam_step([&mut p], &mut state, adam_cfg(0.01));
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + ε).
        assert!((p.value[[0]] - (0.5 - 0.01)).abs() < 1e-9);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_param(-1.25);
        let mut state = AdamState::new([&p]);
        for _ in 0..5 {
            adam_step([&mut p], &mut state, adam_cfg(0.1));
        }
        assert_eq!(p.value[[0]], -1.25);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 0), derive_seed(0, 1));
        assert_ne!(derive_seed(0, 1), derive_seed(1, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn csv_layout() {
        let rows = [EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.25,
            train_acc: 1.0,
            val_acc: 0.75,
        }];
        assert_eq!(
            curves_csv(&rows),
            "epoch,train_loss,val_loss,train_acc,val_acc\n1,0.5,0.25,1,0.75\n"
        );
    }
}
