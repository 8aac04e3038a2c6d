//! Model assembly: NFC-GCN and the comparison variants.
//!
//! Every variant is a first stage producing `H⁽⁰⁾`, then `K` graph
//! convolution layers, then (optionally) an affine classifier:
//!
//! | variant        | first stage                         | K   | aggregation |
//! |----------------|-------------------------------------|-----|-------------|
//! | `nfc-gcn`      | node-feature convolution, flattened | ≥ 1 | row mean    |
//! | `gcn-baseline` | raw features                        | ≥ 1 | symmetric   |
//! | `nfc-only`     | node-feature convolution, flattened | 0   | –           |
//! | `mean5-only`   | mean of the sampled feature columns | 0   | –           |

mod checkpoint;
mod network;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use network::{
    argmax_rows, first_stage, model_backward, model_forward, model_loss, predict, ForwardCache,
    GraphInputs, LayerCache, LayerInput, LossBreakdown, Mask,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NormalizationForm;
use crate::ops::{ConvSpec, InitScheme, ParamTensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    NfcGcn,
    GcnBaseline,
    NfcOnly,
    Mean5Only,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::NfcGcn,
        Variant::GcnBaseline,
        Variant::NfcOnly,
        Variant::Mean5Only,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NfcGcn => "nfc-gcn",
            Variant::GcnBaseline => "gcn-baseline",
            Variant::NfcOnly => "nfc-only",
            Variant::Mean5Only => "mean5-only",
        }
    }

    pub fn stage(self) -> InputStage {
        match self {
            Variant::NfcGcn | Variant::NfcOnly => InputStage::Convolution,
            Variant::Mean5Only => InputStage::SampledMean,
            Variant::GcnBaseline => InputStage::Raw,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How `H⁽⁰⁾` is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputStage {
    Convolution,
    SampledMean,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvSpec>,
    /// Output width of each graph convolution layer.
    pub gcn_dims: Vec<usize>,
    pub num_classes: usize,
    pub dropout: f64,
    /// Node bandwidth `n` (center plus `n - 1` sampled neighbors).
    pub bandwidth: usize,
    pub aggregation: NormalizationForm,
    /// Separate affine classifier after the last graph layer. When false the
    /// last graph layer emits the logits without an activation.
    pub classifier_affine: bool,
}

impl ModelSpec {
    pub fn depth(&self) -> usize {
        self.gcn_dims.len()
    }

    pub fn uses_sampling(&self) -> bool {
        self.variant.stage() != InputStage::Raw
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.num_classes == 0 {
            return cfg("need at least one class".into());
        }
        if self.gcn_dims.contains(&0) {
            return cfg("graph layer widths must be positive".into());
        }
        if feature_dim == 0 {
            return cfg("feature dimension is zero".into());
        }
        match self.variant {
            Variant::NfcOnly | Variant::Mean5Only if !self.gcn_dims.is_empty() => {
                return cfg(format!("{} has no graph layers", self.variant));
            }
            Variant::NfcGcn | Variant::GcnBaseline if self.gcn_dims.is_empty() => {
                return cfg(format!("{} needs at least one graph layer", self.variant));
            }
            _ => {}
        }
        if self.uses_sampling() && self.bandwidth == 0 {
            return cfg("node bandwidth must be at least 1".into());
        }
        if self.variant.stage() == InputStage::Convolution {
            match &self.conv {
                Some(c) => c.validate(feature_dim, self.bandwidth)?,
                None => return cfg(format!("{} needs a convolution spec", self.variant)),
            }
        }
        if !self.classifier_affine {
            match self.gcn_dims.last() {
                None => {
                    return cfg("without a classifier layer the model needs a graph layer".into())
                }
                Some(&w) if w != self.num_classes => {
                    return cfg(format!(
                    "without a classifier layer the last graph layer must have {} outputs, not {w}",
                    self.num_classes
                ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Width of `H⁽⁰⁾`.
    pub fn first_width(&self, feature_dim: usize) -> usize {
        match self.variant.stage() {
            InputStage::Convolution => self
                .conv
                .as_ref()
                .map_or(0, |c| c.flat_len(feature_dim, self.bandwidth)),
            InputStage::SampledMean | InputStage::Raw => feature_dim,
        }
    }

    /// Layer widths `[H⁽⁰⁾, H⁽¹⁾, …, H⁽ᴷ⁾]`, followed by the class count when
    /// there is a separate classifier.
    pub fn width_chain(&self, feature_dim: usize) -> Vec<usize> {
        let mut chain = vec![self.first_width(feature_dim)];
        chain.extend(&self.gcn_dims);
        if self.classifier_affine {
            chain.push(self.num_classes);
        }
        chain
    }
}

/// Graph layer widths for a depth sweep: `K - 1` hidden layers of `hidden`
/// units, then a layer with one unit per class.
pub fn gcn_dims_for_depth(depth: usize, hidden: usize, classes: usize) -> Vec<usize> {
    let mut dims = vec![hidden; depth.saturating_sub(1)];
    if depth > 0 {
        dims.push(classes);
    }
    dims
}

/// Trainable tensors of one model, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// `[c, k, width]`.
    pub conv_filters: Option<ParamTensor<T>>,
    pub conv_bias: Option<ParamTensor<T>>,
    /// `W⁽ᵏ⁾` shaped `[in, out]`.
    pub gcn: Vec<ParamTensor<T>>,
    pub classifier_weight: Option<ParamTensor<T>>,
    pub classifier_bias: Option<ParamTensor<T>>,
}

fn glorot(fan_in: usize, fan_out: usize) -> InitScheme {
    InitScheme::GlorotUniform { fan_in, fan_out }
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-uniform weights and filters, zero biases.
    pub fn init<R: Rng + ?Sized>(
        spec: &ModelSpec,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate(feature_dim)?;
        let mut conv_filters = None;
        let mut conv_bias = None;
        if let (InputStage::Convolution, Some(conv)) = (spec.variant.stage(), &spec.conv) {
            let shape = conv.filter_shape(spec.bandwidth);
            let [c, k, w] = shape;
            // Keras convention: receptive field times input/output channels.
            let (fan_in, fan_out) = match conv.mode {
                crate::ops::ConvMode::Conv1d => (k * w, k * c),
                crate::ops::ConvMode::Conv2d => (k * w, k * w * c),
            };
            conv_filters = Some(ParamTensor::new(
                "conv.filters",
                &shape,
                glorot(fan_in, fan_out),
                rng,
            ));
            if conv.bias {
                conv_bias = Some(ParamTensor::new("conv.bias", &[c], InitScheme::Zeros, rng));
            }
        }
        let chain = spec.width_chain(feature_dim);
        let gcn = (0..spec.depth())
            .map(|k| {
                let (i, o) = (chain[k], chain[k + 1]);
                ParamTensor::new(format!("gcn.{k}.weight"), &[i, o], glorot(i, o), rng)
            })
            .collect();
        let (mut classifier_weight, mut classifier_bias) = (None, None);
        if spec.classifier_affine {
            let i = chain[chain.len() - 2];
            let o = spec.num_classes;
            classifier_weight = Some(ParamTensor::new(
                "classifier.weight",
                &[i, o],
                glorot(i, o),
                rng,
            ));
            classifier_bias = Some(ParamTensor::new(
                "classifier.bias",
                &[o],
                InitScheme::Zeros,
                rng,
            ));
        }
        Ok(Self {
            conv_filters,
            conv_bias,
            gcn,
            classifier_weight,
            classifier_bias,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.conv_filters
            .iter()
            .chain(&self.conv_bias)
            .chain(&self.gcn)
            .chain(&self.classifier_weight)
            .chain(&self.classifier_bias)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.conv_filters
            .iter_mut()
            .chain(&mut self.conv_bias)
            .chain(&mut self.gcn)
            .chain(&mut self.classifier_weight)
            .chain(&mut self.classifier_bias)
    }

    pub fn zero_grad(&mut self) {
        self.iter_mut().for_each(ParamTensor::zero_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.iter().map(ParamTensor::len).sum()
    }

    /// Checks every tensor against the shapes `spec` implies.
    pub fn validate(&self, spec: &ModelSpec, feature_dim: usize) -> Result<()> {
        spec.validate(feature_dim)?;
        let expect =
            |p: Option<&ParamTensor<T>>, name: &str, shape: Option<Vec<usize>>| -> Result<()> {
                match (p, shape) {
                    (None, None) => Ok(()),
                    (Some(p), Some(s))
                        if p.shape() == s.as_slice() && p.grad.shape() == s.as_slice() =>
                    {
                        Ok(())
                    }
                    (Some(p), Some(s)) => Err(Error::shape(
                        name,
                        format!("tensor is {:?}, expected {:?}", p.shape(), s),
                    )),
                    (Some(_), None) => Err(Error::shape(name, "unexpected tensor for this model")),
                    (None, Some(_)) => Err(Error::shape(name, "missing tensor")),
                }
            };
        let conv = spec
            .conv
            .filter(|_| spec.variant.stage() == InputStage::Convolution);
        expect(
            self.conv_filters.as_ref(),
            "conv.filters",
            conv.map(|c| c.filter_shape(spec.bandwidth).to_vec()),
        )?;
        expect(
            self.conv_bias.as_ref(),
            "conv.bias",
            conv.filter(|c| c.bias).map(|c| vec![c.filters]),
        )?;
        let chain = spec.width_chain(feature_dim);
        if self.gcn.len() != spec.depth() {
            return Err(Error::shape(
                "gcn",
                format!("{} graph layers, expected {}", self.gcn.len(), spec.depth()),
            ));
        }
        for (k, w) in self.gcn.iter().enumerate() {
            expect(
                Some(w),
                &format!("gcn.{k}.weight"),
                Some(vec![chain[k], chain[k + 1]]),
            )?;
        }
        let cls = spec.classifier_affine.then(|| chain[chain.len() - 2]);
        expect(
            self.classifier_weight.as_ref(),
            "classifier.weight",
            cls.map(|i| vec![i, spec.num_classes]),
        )?;
        expect(
            self.classifier_bias.as_ref(),
            "classifier.bias",
            cls.map(|_| vec![spec.num_classes]),
        )?;
        Ok(())
    }
}
