use ndarray::{Array, ArrayView, Dimension, Zip};
use rand::Rng;

use crate::scalar::Scalar;

/// Which entries survived a dropout draw, and the factor they were scaled by.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T, D: Dimension> {
    pub kept: Array<bool, D>,
    /// `1 / (1 - rate)`.
    pub scale: T,
}

/// Inverted dropout in place. Returns the mask in training mode with a
/// nonzero rate, `None` otherwise (and leaves `x` untouched).
///
/// Each entry consumes one `u32` from `rng` and is dropped when it falls
/// below `rate · 2³²`.
pub fn dropout_inplace<T: Scalar, D: Dimension, R: Rng + ?Sized>(
    x: &mut Array<T, D>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Option<DropoutMask<T, D>> {
    assert!(
        (0.0..1.0).contains(&rate),
        "dropout rate {rate} outside [0, 1)"
    );
    if !training || rate == 0.0 {
        return None;
    }
    let scale = T::from_f64_lossy(1.0 / (1.0 - rate));
    let factors = [T::zero(), scale];
    let threshold = (rate * 4_294_967_296.0) as u64;
    let mut kept = Array::from_elem(x.raw_dim(), false);
    let mut draws = vec![0u32; 4096];
    let mut used = draws.len();
    // Both arrays share one shape, so `Zip` visits them in the same order.
    Zip::from(x).and(&mut kept).for_each(|v, k| {
        if used == draws.len() {
            rng.fill(&mut draws[..]);
            used = 0;
        }
        let keep = u64::from(draws[used]) >= threshold;
        used += 1;
        *k = keep;
        *v *= factors[usize::from(keep)];
    });
    Some(DropoutMask { kept, scale })
}

/// Copying form of [`dropout_inplace`].
pub fn dropout_forward<T: Scalar, D: Dimension, R: Rng + ?Sized>(
    x: ArrayView<'_, T, D>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> (Array<T, D>, Option<DropoutMask<T, D>>) {
    let mut out = x.to_owned();
    let mask = dropout_inplace(&mut out, rate, training, rng);
    (out, mask)
}

/// Gradient through dropout, in place.
pub fn dropout_backward_inplace<T: Scalar, D: Dimension>(
    grad: &mut Array<T, D>,
    mask: Option<&DropoutMask<T, D>>,
) {
    if let Some(m) = mask {
        let factors = [T::zero(), m.scale];
        Zip::from(grad)
            .and(&m.kept)
            .for_each(|g, &k| *g *= factors[usize::from(k)]);
    }
}

pub fn dropout_backward<T: Scalar, D: Dimension>(
    upstream: ArrayView<'_, T, D>,
    mask: Option<&DropoutMask<T, D>>,
) -> Array<T, D> {
    let mut g = upstream.to_owned();
    dropout_backward_inplace(&mut g, mask);
    g
}
