use ndarray::{Array2, ArrayView2, Axis};

use super::ParamTensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows<T: Scalar>(logits: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Summed cross-entropy `-Σ_l ln softmax(z_l)[y_l]` and its gradient
/// `softmax(z_l) - onehot(y_l)` per row.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: ArrayView2<'_, T>,
    labels: &[usize],
) -> Result<(T, Array2<T>)> {
    let classes = logits.ncols();
    if labels.len() != logits.nrows() {
        return Err(Error::shape(
            "cross-entropy",
            format!("{} labels for {} logit rows", labels.len(), logits.nrows()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut loss = T::zero();
    let mut grad = Array2::zeros(logits.raw_dim());
    for ((row, mut g), &y) in logits
        .axis_iter(Axis(0))
        .zip(grad.axis_iter_mut(Axis(0)))
        .zip(labels)
    {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss -= row[y] - max - log_sum;
        for (gk, &v) in g.iter_mut().zip(row.iter()) {
            *gk = (v - max - log_sum).exp();
        }
        g[y] -= T::one();
    }
    Ok((loss, grad))
}

/// `λ Σ ‖W‖²` over decayed tensors; adds `2λW` into their gradient slots.
pub fn l2_penalty<'a, T: Scalar + 'a>(
    params: impl IntoIterator<Item = &'a mut ParamTensor<T>>,
    lambda: T,
) -> T {
    let mut total = T::zero();
    for p in params.into_iter().filter(|p| p.decay) {
        total += p.value.iter().map(|&w| w * w).sum::<T>();
        let two_lambda = lambda + lambda;
        p.grad.scaled_add(two_lambda, &p.value);
    }
    lambda * total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::InitScheme;
    use ndarray::{array, ArrayD, IxDyn};

    #[test]
    fn uniform_logits_cost_ln_f() {
        let (loss, _) = softmax_cross_entropy(Array2::<f64>::zeros((1, 7)).view(), &[3]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        assert!((loss - 1.9459).abs() < 1e-4);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let (loss, grad) = softmax_cross_entropy(array![[1000.0f64, 0.0]].view(), &[0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn matches_direct_formula() {
        let z = array![[0.2, -1.0, 0.5], [2.0, 1.0, -0.3]];
        let y = [2, 0];
        let (loss, grad) = softmax_cross_entropy(z.view(), &y).unwrap();
        let mut want = 0.0;
        for (r, &label) in y.iter().enumerate() {
            let denom: f64 = z.row(r).iter().map(|v: &f64| v.exp()).sum();
            want -= (z[[r, label]].exp() / denom).ln();
            for k in 0..3 {
                let p = z[[r, k]].exp() / denom;
                let onehot = if k == label { 1.0 } else { 0.0 };
                assert!((grad[[r, k]] - (p - onehot)).abs() < 1e-12);
            }
        }
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_labels() {
        let z = Array2::<f64>::zeros((1, 3));
        assert!(matches!(
            softmax_cross_entropy(z.view(), &[3]),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
        assert!(softmax_cross_entropy(z.view(), &[0, 1]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(array![[1.0f64, 2.0, 3.0], [-50.0, 0.0, 50.0]].view());
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_hand_arithmetic() {
        let mut w = ParamTensor::from_value(
            "w",
            ArrayD::from_elem(IxDyn(&[1]), 3.0f64),
            InitScheme::GlorotUniform {
                fan_in: 1,
                fan_out: 1,
            },
            true,
        );
        let mut b = ParamTensor::from_value(
            "b",
            ArrayD::from_elem(IxDyn(&[1]), 5.0),
            InitScheme::Zeros,
            false,
        );
        let value = l2_penalty([&mut w, &mut b], 1e-4);
        assert!((value - 0.0009).abs() < 1e-15);
        assert!((w.grad[[0]] - 0.0006).abs() < 1e-15);
        assert_eq!(b.grad[[0]], 0.0);

        let mut zero =
            ParamTensor::from_value("z", ArrayD::zeros(IxDyn(&[3])), InitScheme::Zeros, true);
        assert_eq!(l2_penalty([&mut zero], 1e-4), 0.0);
    }
}
