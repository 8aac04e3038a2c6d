use ndarray::{Array1, Array2, ArrayView2, Axis, Ix3};
use rand::Rng;

use super::{InputStage, ModelParams, ModelSpec};
use crate::error::{Error, Result};
use crate::graph::{adjacency, Graph, MaskKind, Masks, NormalizationForm};
use crate::ops::{self, ParamTensor};
use crate::sampling::Neighborhoods;
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;

/// Per-graph tensors shared by every forward pass: sparse features, the
/// aggregation matrix and its transpose, labels and masks.
#[derive(Debug, Clone)]
pub struct GraphInputs<T> {
    pub features: CsrMatrix<T>,
    pub propagation: CsrMatrix<T>,
    pub propagation_t: CsrMatrix<T>,
    pub form: NormalizationForm,
    pub labels: Vec<Option<usize>>,
    pub masks: Masks,
}

impl<T: Scalar> GraphInputs<T> {
    pub fn new(g: &Graph<T>, form: NormalizationForm) -> Self {
        let propagation = adjacency(g, form).matrix;
        Self {
            features: CsrMatrix::from_dense(g.features().view()),
            propagation_t: propagation.transpose(),
            propagation,
            form,
            labels: g.labels().to_vec(),
            masks: g.masks().clone(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// `(node, label)` for every node in `which`.
    pub fn labeled(&self, which: MaskKind) -> Vec<(usize, usize)> {
        self.masks
            .indices(which)
            .into_iter()
            .filter_map(|i| self.labels[i].map(|l| (i, l)))
            .collect()
    }
}

/// Input of a layer after dropout. The raw-feature baseline feeds the sparse
/// feature matrix straight into its first layer.
#[derive(Debug, Clone)]
pub enum LayerInput<T> {
    Dense(Array2<T>),
    Sparse(CsrMatrix<T>),
}

impl<T: Scalar> LayerInput<T> {
    fn matmul(&self, w: ArrayView2<'_, T>) -> Result<Array2<T>> {
        match self {
            LayerInput::Dense(x) => ops::affine_forward(x.view(), w, None),
            LayerInput::Sparse(x) => x.matmul(w),
        }
    }

    /// `inputᵀ · g`.
    fn t_matmul(&self, g: ArrayView2<'_, T>) -> Result<Array2<T>> {
        match self {
            LayerInput::Dense(x) => Ok(x.t().dot(&g)),
            LayerInput::Sparse(x) => x.transpose_matmul(g),
        }
    }

    fn dropout<R: Rng + ?Sized>(
        self,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> (Self, Option<Mask<T>>) {
        if !training || rate == 0.0 {
            return (self, None);
        }
        match self {
            LayerInput::Dense(mut x) => {
                let mask = ops::dropout_inplace(&mut x, rate, training, rng);
                (LayerInput::Dense(x), mask)
            }
            LayerInput::Sparse(x) => {
                let mut kept = Array1::from(x.values().to_vec());
                ops::dropout_inplace(&mut kept, rate, training, rng);
                // Nothing upstream of raw features needs a gradient, so the mask is dropped.
                (LayerInput::Sparse(x.map_values(|_, k| kept[k])), None)
            }
        }
    }
}

pub type Mask<T> = ops::DropoutMask<T, ndarray::Ix2>;

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    /// Layer input after dropout.
    pub input: LayerInput<T>,
    pub mask: Option<Mask<T>>,
    /// Pre-activation `P · (input · W)`.
    pub pre: Array2<T>,
    pub activated: bool,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub training: bool,
    pub layers: Vec<LayerCache<T>>,
    /// Outputs `H⁽¹⁾ … H⁽ᴷ⁾` of the graph layers.
    pub hidden: Vec<Array2<T>>,
    pub classifier_input: Option<LayerInput<T>>,
    pub classifier_mask: Option<Mask<T>>,
    pub logits: Array2<T>,
}

fn param_2d<T: Scalar>(p: &ParamTensor<T>) -> ArrayView2<'_, T> {
    p.value
        .view()
        .into_dimensionality()
        .expect("validated 2D tensor")
}

fn sampled_mean<T: Scalar>(x: &CsrMatrix<T>, nbs: &Neighborhoods) -> Array2<T> {
    let inv = T::from_usize_lossy(nbs.bandwidth()).recip();
    let mut out = Array2::zeros((x.nrows(), x.ncols()));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        for &m in nbs.members(i) {
            let (cols, vals) = x.row(m);
            for (&c, &v) in cols.iter().zip(vals) {
                row[c] += v * inv;
            }
        }
    }
    out
}

fn check_neighborhoods<'a>(
    spec: &ModelSpec,
    inputs_nodes: usize,
    nbs: Option<&'a Neighborhoods>,
) -> Result<Option<&'a Neighborhoods>> {
    if !spec.uses_sampling() {
        return Ok(None);
    }
    let nbs =
        nbs.ok_or_else(|| Error::shape("input stage", "this variant needs sampled neighborhoods"))?;
    if nbs.bandwidth() != spec.bandwidth || nbs.num_nodes() != inputs_nodes {
        return Err(Error::shape(
            "input stage",
            format!(
                "neighborhoods are {}x{}, expected {}x{}",
                nbs.num_nodes(),
                nbs.bandwidth(),
                inputs_nodes,
                spec.bandwidth
            ),
        ));
    }
    Ok(Some(nbs))
}

fn first_stage_unchecked<T: Scalar>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    inputs: &GraphInputs<T>,
    nbs: Option<&Neighborhoods>,
) -> Result<Option<Array2<T>>> {
    let x = &inputs.features;
    Ok(match spec.variant.stage() {
        InputStage::Convolution => {
            let conv = spec.conv.as_ref().expect("validated");
            let filters = params.conv_filters.as_ref().expect("validated");
            let filters = filters
                .value
                .view()
                .into_dimensionality::<Ix3>()
                .expect("validated 3D tensor");
            let bias = params.conv_bias.as_ref().map(|b| {
                b.value
                    .view()
                    .into_dimensionality()
                    .expect("validated 1D tensor")
            });
            Some(ops::nfc_forward_batch(
                x,
                nbs.expect("checked"),
                filters,
                bias,
                conv,
            )?)
        }
        InputStage::SampledMean => Some(sampled_mean(x, nbs.expect("checked"))),
        InputStage::Raw => None,
    })
}

/// First-level representation `H⁽⁰⁾` in evaluation mode, or `None` for the
/// raw-feature baseline.
pub fn first_stage<T: Scalar>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    inputs: &GraphInputs<T>,
    nbs: Option<&Neighborhoods>,
) -> Result<Option<Array2<T>>> {
    params.validate(spec, inputs.feature_dim())?;
    let nbs = check_neighborhoods(spec, inputs.num_nodes(), nbs)?;
    first_stage_unchecked(spec, params, inputs, nbs)
}

/// Full-batch forward pass over every node.
pub fn model_forward<T: Scalar, R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    inputs: &GraphInputs<T>,
    nbs: Option<&Neighborhoods>,
    training: bool,
    rng: &mut R,
) -> Result<ForwardCache<T>> {
    params.validate(spec, inputs.feature_dim())?;
    if spec.depth() > 0 && inputs.form != spec.aggregation {
        return Err(Error::shape(
            "graph layers",
            format!(
                "inputs use {:?} aggregation, model expects {:?}",
                inputs.form, spec.aggregation
            ),
        ));
    }
    let nbs = check_neighborhoods(spec, inputs.num_nodes(), nbs)?;

    let first = first_stage_unchecked(spec, params, inputs, nbs)?;
    let mut current = match first {
        Some(h) => LayerInput::Dense(h),
        None => LayerInput::Sparse(inputs.features.clone()),
    };

    let depth = spec.depth();
    let mut layers = Vec::with_capacity(depth);
    let mut hidden = Vec::with_capacity(depth);
    for (k, w) in params.gcn.iter().enumerate() {
        let (input, mask) = current.dropout(spec.dropout, training, rng);
        let projected = input.matmul(param_2d(w))?;
        let pre = inputs.propagation.matmul(projected.view())?;
        let activated = k + 1 < depth || spec.classifier_affine;
        let out = if activated {
            ops::relu_forward(pre.view())
        } else {
            pre.clone()
        };
        layers.push(LayerCache {
            input,
            mask,
            pre,
            activated,
        });
        hidden.push(out.clone());
        current = LayerInput::Dense(out);
    }

    let (classifier_input, classifier_mask, logits) = if spec.classifier_affine {
        let (input, mask) = current.dropout(spec.dropout, training, rng);
        let w = params.classifier_weight.as_ref().expect("validated");
        let b = params.classifier_bias.as_ref().expect("validated");
        let mut logits = input.matmul(param_2d(w))?;
        logits += &b
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("validated 1D tensor");
        (Some(input), mask, logits)
    } else {
        (
            None,
            None,
            hidden.last().cloned().expect("validated depth >= 1"),
        )
    };
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }

    Ok(ForwardCache {
        training,
        layers,
        hidden,
        classifier_input,
        classifier_mask,
        logits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    /// Mean cross-entropy over labeled training nodes (0 when there are none).
    pub data: T,
    pub l2: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn total(&self) -> T {
        self.data + self.l2
    }
}

fn accumulate<T: Scalar>(p: &mut ParamTensor<T>, g: ndarray::ArrayD<T>) {
    p.grad += &g;
}

/// Gradients of the mean training cross-entropy plus `λ Σ ‖W‖²`, written
/// into the parameters' gradient slots (which are zeroed first).
pub fn model_backward<T: Scalar>(
    spec: &ModelSpec,
    params: &mut ModelParams<T>,
    cache: &ForwardCache<T>,
    inputs: &GraphInputs<T>,
    nbs: Option<&Neighborhoods>,
    l2: T,
) -> Result<LossBreakdown<T>> {
    params.validate(spec, inputs.feature_dim())?;
    if cache.layers.len() != spec.depth()
        || cache.classifier_input.is_some() != spec.classifier_affine
        || cache.logits.dim() != (inputs.num_nodes(), spec.num_classes)
    {
        return Err(Error::shape(
            "backward",
            "forward cache does not match the model spec",
        ));
    }
    let nbs = check_neighborhoods(spec, inputs.num_nodes(), nbs)?;
    params.zero_grad();

    let labeled = inputs.labeled(MaskKind::Train);
    let mut dlogits = Array2::zeros(cache.logits.raw_dim());
    let mut data = T::zero();
    if !labeled.is_empty() {
        let rows: Vec<usize> = labeled.iter().map(|&(i, _)| i).collect();
        let labels: Vec<usize> = labeled.iter().map(|&(_, l)| l).collect();
        let picked = cache.logits.select(Axis(0), &rows);
        let (sum, grad) = ops::softmax_cross_entropy(picked.view(), &labels)?;
        let scale = T::from_usize_lossy(rows.len()).recip();
        data = sum * scale;
        for (g, &r) in grad.axis_iter(Axis(0)).zip(&rows) {
            dlogits.row_mut(r).scaled_add(scale, &g);
        }
    }
    if !data.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }

    let stage = spec.variant.stage();
    let depth = spec.depth();
    let mut upstream = dlogits;
    if let Some(input) = &cache.classifier_input {
        let w = params.classifier_weight.as_mut().expect("validated");
        let dw = input.t_matmul(upstream.view())?;
        let mut dx = upstream.dot(&param_2d(w).t());
        accumulate(w, dw.into_dyn());
        let b = params.classifier_bias.as_mut().expect("validated");
        accumulate(b, upstream.sum_axis(Axis(0)).into_dyn());
        ops::dropout_backward_inplace(&mut dx, cache.classifier_mask.as_ref());
        upstream = dx;
    }

    for k in (0..depth).rev() {
        let layer = &cache.layers[k];
        let dpre = if layer.activated {
            ops::relu_backward(layer.pre.view(), upstream.view())
        } else {
            upstream
        };
        let summed = inputs.propagation_t.matmul(dpre.view())?;
        let w = &mut params.gcn[k];
        let dw = layer.input.t_matmul(summed.view())?;
        accumulate(w, dw.into_dyn());
        let needs_input_grad = k > 0 || stage == InputStage::Convolution;
        upstream = if needs_input_grad {
            let mut dx = summed.dot(&param_2d(w).t());
            ops::dropout_backward_inplace(&mut dx, layer.mask.as_ref());
            dx
        } else {
            Array2::zeros((0, 0))
        };
    }

    if stage == InputStage::Convolution {
        let conv = spec.conv.as_ref().expect("validated");
        let (dw, db) = ops::nfc_backward_batch(
            &inputs.features,
            nbs.expect("checked"),
            conv,
            upstream.view(),
        )?;
        accumulate(
            params.conv_filters.as_mut().expect("validated"),
            dw.into_dyn(),
        );
        if let Some(b) = params.conv_bias.as_mut() {
            accumulate(b, db.into_dyn());
        }
    }

    let l2_value = ops::l2_penalty(params.iter_mut(), l2);
    Ok(LossBreakdown { data, l2: l2_value })
}

/// Loss value only: mean training cross-entropy of an evaluation-mode
/// forward pass plus `λ Σ ‖W‖²`.
pub fn model_loss<T: Scalar>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    inputs: &GraphInputs<T>,
    nbs: Option<&Neighborhoods>,
    l2: T,
) -> Result<LossBreakdown<T>> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let cache = model_forward(spec, params, inputs, nbs, false, &mut rng)?;
    let labeled = inputs.labeled(MaskKind::Train);
    let mut data = T::zero();
    if !labeled.is_empty() {
        let rows: Vec<usize> = labeled.iter().map(|&(i, _)| i).collect();
        let labels: Vec<usize> = labeled.iter().map(|&(_, l)| l).collect();
        let (sum, _) =
            ops::softmax_cross_entropy(cache.logits.select(Axis(0), &rows).view(), &labels)?;
        data = sum / T::from_usize_lossy(rows.len());
    }
    let penalty = params
        .iter()
        .filter(|p| p.decay)
        .map(|p| p.value.iter().map(|&w| w * w).sum::<T>())
        .sum::<T>()
        * l2;
    Ok(LossBreakdown { data, l2: penalty })
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows<T: Scalar>(logits: ArrayView2<'_, T>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Evaluation-mode class predictions for every node.
pub fn predict<T: Scalar>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    inputs: &GraphInputs<T>,
    nbs: Option<&Neighborhoods>,
) -> Result<Vec<usize>> {
    // Dropout is off in evaluation mode, so the generator is never drawn from.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let cache = model_forward(spec, params, inputs, nbs, false, &mut rng)?;
    Ok(argmax_rows(cache.logits.view()))
}
