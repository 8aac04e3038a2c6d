//! Differentiable primitives with hand-written backward passes.

mod conv;
mod dense;
mod dropout;
mod loss;

pub use conv::{
    nfc_backward, nfc_backward_batch, nfc_flatten, nfc_forward, nfc_forward_batch, NfcGrads,
};
pub use dense::{affine_backward, affine_forward, relu_backward, relu_forward, AffineGrads};
pub use dropout::{
    dropout_backward, dropout_backward_inplace, dropout_forward, dropout_inplace, DropoutMask,
};
pub use loss::{l2_penalty, softmax_cross_entropy, softmax_rows};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    /// Feature map channels are the `n` node columns; the filter spans all of them.
    Conv1d,
    /// Single-channel `D × n` image; the filter slides along both axes.
    Conv2d,
}

/// Node-feature convolution hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub mode: ConvMode,
    /// Filter length `k` along the feature axis.
    pub kernel: usize,
    /// Stride `s` along the feature axis.
    pub stride: usize,
    /// Number of filters `c`.
    pub filters: usize,
    /// Filter width along the node axis (2D only).
    #[serde(default = "default_width")]
    pub width: usize,
    /// Stride along the node axis (2D only).
    #[serde(default = "one")]
    pub node_stride: usize,
    /// One bias per filter.
    #[serde(default = "yes")]
    pub bias: bool,
}

fn default_width() -> usize {
    3
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

impl ConvSpec {
    pub fn conv1d(kernel: usize, stride: usize, filters: usize) -> Self {
        Self {
            mode: ConvMode::Conv1d,
            kernel,
            stride,
            filters,
            width: default_width(),
            node_stride: 1,
            bias: true,
        }
    }

    pub fn conv2d(
        kernel: usize,
        stride: usize,
        filters: usize,
        width: usize,
        node_stride: usize,
    ) -> Self {
        Self {
            mode: ConvMode::Conv2d,
            kernel,
            stride,
            filters,
            width,
            node_stride,
            bias: true,
        }
    }

    /// Effective `(width, node_stride)`; the 1D filter covers all `n` columns.
    pub fn node_window(&self, bandwidth: usize) -> (usize, usize) {
        match self.mode {
            ConvMode::Conv1d => (bandwidth, 1),
            ConvMode::Conv2d => (self.width, self.node_stride),
        }
    }

    pub fn validate(&self, feature_dim: usize, bandwidth: usize) -> Result<()> {
        let (width, node_stride) = self.node_window(bandwidth);
        if self.kernel == 0 || self.kernel > feature_dim {
            return Err(Error::Config(format!(
                "filter length {} must be in 1..={feature_dim}",
                self.kernel
            )));
        }
        if self.stride == 0 || node_stride == 0 {
            return Err(Error::Config("convolution strides must be positive".into()));
        }
        if self.filters == 0 {
            return Err(Error::Config("need at least one filter".into()));
        }
        if width == 0 || width > bandwidth {
            return Err(Error::Config(format!(
                "filter width {width} must be in 1..={bandwidth}"
            )));
        }
        Ok(())
    }

    /// `D' = floor((D - k) / s) + 1`.
    pub fn out_features(&self, feature_dim: usize) -> usize {
        (feature_dim - self.kernel) / self.stride + 1
    }

    pub fn out_nodes(&self, bandwidth: usize) -> usize {
        let (width, node_stride) = self.node_window(bandwidth);
        (bandwidth - width) / node_stride + 1
    }

    /// `[D', c]` for 1D, `[D', n', c]` for 2D.
    pub fn output_shape(&self, feature_dim: usize, bandwidth: usize) -> Vec<usize> {
        let d = self.out_features(feature_dim);
        match self.mode {
            ConvMode::Conv1d => vec![d, self.filters],
            ConvMode::Conv2d => vec![d, self.out_nodes(bandwidth), self.filters],
        }
    }

    pub fn flat_len(&self, feature_dim: usize, bandwidth: usize) -> usize {
        self.output_shape(feature_dim, bandwidth).iter().product()
    }

    /// `[c, k, width]`.
    pub fn filter_shape(&self, bandwidth: usize) -> [usize; 3] {
        [self.filters, self.kernel, self.node_window(bandwidth).0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum InitScheme {
    GlorotUniform { fan_in: usize, fan_out: usize },
    Zeros,
}

/// Trainable tensor with its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub init: InitScheme,
    /// Included in the L2 penalty (weights yes, biases no).
    pub decay: bool,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        init: InitScheme,
        rng: &mut R,
    ) -> Self {
        let value = match init {
            InitScheme::Zeros => ArrayD::zeros(IxDyn(shape)),
            InitScheme::GlorotUniform { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                ArrayD::from_shape_simple_fn(IxDyn(shape), || {
                    T::from_f64_lossy(rng.random_range(-limit..limit))
                })
            }
        };
        let decay = !matches!(init, InitScheme::Zeros);
        Self::from_value(name, value, init, decay)
    }

    pub fn from_value(
        name: impl Into<String>,
        value: ArrayD<T>,
        init: InitScheme,
        decay: bool,
    ) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
            init,
            decay,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}
