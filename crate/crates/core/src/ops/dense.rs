use ndarray::{Array, Array1, Array2, ArrayView, ArrayView1, ArrayView2, Axis, Dimension, Zip};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `x · w + b` for a batch of row vectors; `w` is `in × out`.
pub fn affine_forward<T: Scalar>(
    x: ArrayView2<'_, T>,
    w: ArrayView2<'_, T>,
    b: Option<ArrayView1<'_, T>>,
) -> Result<Array2<T>> {
    if x.ncols() != w.nrows() {
        return Err(Error::shape(
            "affine",
            format!(
                "input width {} does not match weight rows {}",
                x.ncols(),
                w.nrows()
            ),
        ));
    }
    let mut out = x.dot(&w);
    if let Some(b) = b {
        if b.len() != w.ncols() {
            return Err(Error::shape(
                "affine",
                format!("bias length {} for {} outputs", b.len(), w.ncols()),
            ));
        }
        out += &b;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads<T> {
    pub input: Array2<T>,
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

pub fn affine_backward<T: Scalar>(
    x: ArrayView2<'_, T>,
    w: ArrayView2<'_, T>,
    upstream: ArrayView2<'_, T>,
) -> Result<AffineGrads<T>> {
    if upstream.dim() != (x.nrows(), w.ncols()) || x.ncols() != w.nrows() {
        return Err(Error::shape(
            "affine backward",
            "upstream gradient does not match the forward shapes",
        ));
    }
    Ok(AffineGrads {
        input: upstream.dot(&w.t()),
        weight: x.t().dot(&upstream),
        bias: upstream.sum_axis(Axis(0)),
    })
}

pub fn relu_forward<T: Scalar, D: Dimension>(x: ArrayView<'_, T, D>) -> Array<T, D> {
    x.mapv(|v| v.max(T::zero()))
}

/// Passes the upstream gradient where the forward input was positive.
pub fn relu_backward<T: Scalar, D: Dimension>(
    pre: ArrayView<'_, T, D>,
    upstream: ArrayView<'_, T, D>,
) -> Array<T, D> {
    let mut out = upstream.to_owned();
    Zip::from(&mut out).and(&pre).for_each(|g, &z| {
        if z <= T::zero() {
            *g = T::zero();
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn relu_values() {
        assert_eq!(
            relu_forward(array![-1.0, 0.0, 2.0].view()),
            array![0.0, 0.0, 2.0]
        );
        assert_eq!(
            relu_backward(array![-1.0, 0.0, 2.0].view(), array![5.0, 5.0, 5.0].view()),
            array![0.0, 0.0, 5.0]
        );
    }

    #[test]
    fn affine_values() {
        let x = array![[1.0, 2.0]];
        let w = array![[1.0, 1.0], [1.0, -1.0]];
        assert_eq!(
            affine_forward(x.view(), w.view(), Some(array![0.0, 0.0].view())).unwrap(),
            array![[3.0, -1.0]]
        );
        let eye = Array2::<f64>::eye(2);
        assert_eq!(affine_forward(x.view(), eye.view(), None).unwrap(), x);
        assert!(affine_forward(x.view(), Array2::<f64>::zeros((3, 2)).view(), None).is_err());
    }

    #[test]
    fn affine_backward_shapes() {
        let x = array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]];
        let w = array![[1.0, 0.0, 2.0], [1.0, -1.0, 0.5]];
        let up = Array2::ones((3, 3));
        let g = affine_backward(x.view(), w.view(), up.view()).unwrap();
        assert_eq!(g.input, array![[3.0, 0.5], [3.0, 0.5], [3.0, 0.5]]);
        assert_eq!(g.weight, array![[4.5, 4.5, 4.5], [1.0, 1.0, 1.0]]);
        assert_eq!(g.bias, array![3.0, 3.0, 3.0]);
    }
}
