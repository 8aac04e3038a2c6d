//! Central-difference gradient oracle for the hand-written backward passes.

use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, NormalizationForm};
use crate::model::{
    model_backward, model_forward, model_loss, GraphInputs, ModelParams, ModelSpec, Variant,
};
use crate::ops::ConvSpec;
use crate::sampling::Neighborhoods;
use crate::synthetic::random_dense;
use crate::trainer::derive_seed;

/// `(f(θ + εeᵢ) − f(θ − εeᵢ)) / 2ε` for every coordinate of `theta`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step {eps} must be positive"
        )));
    }
    let mut x = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        x[i] = theta[i] + eps;
        let up = f(&x)?;
        x[i] = theta[i] - eps;
        let down = f(&x)?;
        x[i] = theta[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss while perturbing coordinate {i}"
            )));
        }
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub tolerance: f64,
    pub eps: f64,
    /// Coordinates compared per tensor; larger tensors are subsampled.
    pub max_coords: usize,
    /// Instances with a pre-activation closer than this to zero are re-seeded.
    pub kink_margin: f64,
    pub max_reseeds: usize,
    /// L2 weight included in the checked loss.
    pub l2: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            eps: 1e-5,
            max_coords: 500,
            kink_margin: 1e-6,
            max_reseeds: 100,
            l2: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Multi-index of the worst coordinate.
    pub worst_index: Vec<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub label: String,
    /// Seed of the instance actually checked (after any re-seeding).
    pub seed: u64,
    pub reseeds: usize,
    pub tolerance: f64,
    pub tensors: Vec<TensorReport>,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Desk-scale limits for a checked graph.
pub const MAX_NODES: usize = 30;
pub const MAX_FEATURES: usize = 16;

fn near_kink(
    spec: &ModelSpec,
    params: &ModelParams<f64>,
    inputs: &GraphInputs<f64>,
    nbs: Option<&Neighborhoods>,
    margin: f64,
) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cache = model_forward(spec, params, inputs, nbs, false, &mut rng)?;
    Ok(cache
        .layers
        .iter()
        .filter(|l| l.activated)
        .any(|l| l.pre.iter().any(|v| v.abs() < margin)))
}

/// Compares every parameter gradient of `spec` on `g` against central
/// differences.
pub fn check_model(
    spec: &ModelSpec,
    g: &Graph<f64>,
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    check_model_with(spec, g, seed, cfg, spec.variant.to_string(), |_| {})
}

/// [`check_model`] with a hook that may tamper with the analytic gradients
/// before comparison (used for negative controls).
pub fn check_model_with(
    spec: &ModelSpec,
    g: &Graph<f64>,
    seed: u64,
    cfg: &GradCheckConfig,
    label: String,
    mut tamper: impl FnMut(&mut ModelParams<f64>),
) -> Result<GradCheckReport> {
    if spec.dropout != 0.0 {
        return Err(Error::Config(
            "gradient checks need dropout disabled".into(),
        ));
    }
    if g.num_nodes() > MAX_NODES || g.feature_dim() > MAX_FEATURES {
        return Err(Error::Config(format!(
            "gradient checks are limited to {MAX_NODES} nodes and {MAX_FEATURES} features"
        )));
    }
    let inputs = GraphInputs::new(g, spec.aggregation);
    let l2 = cfg.l2;

    let mut attempt = 0;
    let (instance_seed, nbs, mut params) = loop {
        let s = if attempt == 0 {
            seed
        } else {
            derive_seed(seed, attempt as u64)
        };
        let nbs = if spec.uses_sampling() {
            Some(Neighborhoods::sample(g, spec.bandwidth, s)?)
        } else {
            None
        };
        let params =
            ModelParams::<f64>::init(spec, g.feature_dim(), &mut ChaCha8Rng::seed_from_u64(s))?;
        if !near_kink(spec, &params, &inputs, nbs.as_ref(), cfg.kink_margin)? {
            break (s, nbs, params);
        }
        attempt += 1;
        if attempt > cfg.max_reseeds {
            return Err(Error::Other(format!(
                "no kink-free instance after {} re-seeds",
                cfg.max_reseeds
            )));
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cache = model_forward(spec, &params, &inputs, nbs.as_ref(), false, &mut rng)?;
    model_backward(spec, &mut params, &cache, &inputs, nbs.as_ref(), l2)?;
    tamper(&mut params);

    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    let mut tensors = Vec::with_capacity(names.len());
    for (t, name) in names.iter().enumerate() {
        let (len, shape) = {
            let p = params.iter().nth(t).expect("index in range");
            (p.len(), p.shape().to_vec())
        };
        let coords: Vec<usize> = if len <= cfg.max_coords {
            (0..len).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(instance_seed, 1000 + t as u64));
            let mut picked = index::sample(&mut rng, len, cfg.max_coords).into_vec();
            picked.sort_unstable();
            picked
        };
        let analytic: Vec<f64> = {
            let p = params.iter().nth(t).expect("index in range");
            let flat = p.grad.as_slice().expect("gradients are contiguous");
            coords.iter().map(|&c| flat[c]).collect()
        };
        let theta: Vec<f64> = {
            let p = params.iter().nth(t).expect("index in range");
            let flat = p.value.as_slice().expect("values are contiguous");
            coords.iter().map(|&c| flat[c]).collect()
        };
        let mut probe = params.clone();
        let numeric = finite_diff_grad(
            |x| {
                let p = probe.iter_mut().nth(t).expect("index in range");
                let flat = p.value.as_slice_mut().expect("values are contiguous");
                for (&c, &v) in coords.iter().zip(x) {
                    flat[c] = v;
                }
                model_loss(spec, &probe, &inputs, nbs.as_ref(), l2).map(|l| l.total())
            },
            &theta,
            cfg.eps,
        )?;

        let errors: Vec<f64> = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .collect();
        let (worst, &max) = errors
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap_or((0, &0.0));
        let worst_index = if coords.is_empty() {
            Vec::new()
        } else {
            unravel(coords[worst], &shape)
        };
        tensors.push(TensorReport {
            name: name.clone(),
            checked: coords.len(),
            max_rel_error: max,
            mean_rel_error: errors.iter().sum::<f64>() / errors.len().max(1) as f64,
            worst_index,
            worst_analytic: analytic.get(worst).copied().unwrap_or(0.0),
            worst_numeric: numeric.get(worst).copied().unwrap_or(0.0),
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        label,
        seed: instance_seed,
        reseeds: attempt,
        tolerance: cfg.tolerance,
        tensors,
        max_rel_error,
        pass: max_rel_error < cfg.tolerance,
    })
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (i, &d) in shape.iter().enumerate().rev() {
        idx[i] = flat % d;
        flat /= d;
    }
    idx
}

/// A named model and graph to check.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub label: String,
    pub spec: ModelSpec,
    pub graph: Graph<f64>,
}

/// Standard instance: 12 nodes, `D = 9`, three classes, `n = 3`, filters
/// `k = 3, s = 2, c = 2`, and `K = 2` graph layers where the variant has them.
pub fn standard_case(variant: Variant, conv2d: bool, seed: u64) -> Result<GradCheckCase> {
    let graph = random_dense::<f64>(12, 9, 3, 0.3, seed)?;
    let conv = if conv2d {
        ConvSpec::conv2d(3, 2, 2, 2, 1)
    } else {
        ConvSpec::conv1d(3, 2, 2)
    };
    let (gcn_dims, aggregation, classifier_affine) = match variant {
        Variant::NfcGcn => (vec![4, 3], NormalizationForm::RowMeanSelfLoop, true),
        Variant::GcnBaseline => (vec![4, 3], NormalizationForm::SymNormSelfLoop, false),
        Variant::NfcOnly | Variant::Mean5Only => (vec![], NormalizationForm::RowMeanSelfLoop, true),
    };
    let spec = ModelSpec {
        variant,
        conv: Some(conv),
        gcn_dims,
        num_classes: 3,
        dropout: 0.0,
        bandwidth: 3,
        aggregation,
        classifier_affine,
    };
    let label = if conv2d {
        format!("{variant} (2d)")
    } else {
        variant.to_string()
    };
    Ok(GradCheckCase { label, spec, graph })
}

/// The default suite: every variant, plus 2D convolution and a variant with
/// the last graph layer emitting logits directly.
pub fn standard_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    let mut cases = Vec::new();
    for v in Variant::ALL {
        cases.push(standard_case(v, false, seed)?);
    }
    cases.push(standard_case(Variant::NfcGcn, true, seed)?);
    let mut bare = standard_case(Variant::NfcGcn, false, seed)?;
    bare.spec.classifier_affine = false;
    bare.label = "nfc-gcn (no classifier)".into();
    cases.push(bare);
    Ok(cases)
}

pub fn run_cases(
    cases: &[GradCheckCase],
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<Vec<GradCheckReport>> {
    cases
        .iter()
        .map(|c| check_model_with(&c.spec, &c.graph, seed, cfg, c.label.clone(), |_| {}))
        .collect()
}

/// Aligned text table, one row per tensor.
pub fn render_table(reports: &[GradCheckReport]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<26} {:<20} {:>7} {:>12} {:>12}  {:<12} result",
        "model", "tensor", "coords", "max rel", "mean rel", "worst at"
    )
    .expect("writing to a String");
    for r in reports {
        for t in &r.tensors {
            writeln!(
                out,
                "{:<26} {:<20} {:>7} {:>12.3e} {:>12.3e}  {:<12} {}",
                r.label,
                t.name,
                t.checked,
                t.max_rel_error,
                t.mean_rel_error,
                format!("{:?}", t.worst_index),
                if t.max_rel_error < r.tolerance {
                    "ok"
                } else {
                    "FAIL"
                }
            )
            .expect("writing to a String");
        }
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    if failed == 0 {
        writeln!(out, "all {} models pass", reports.len()).expect("writing to a String");
    } else {
        writeln!(out, "{failed} of {} models FAIL", reports.len()).expect("writing to a String");
    }
    out
}
