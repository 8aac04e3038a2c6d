//! Node-feature convolution.
//!
//! Filters are stored `[c, k, width]`. Output element `(p, q, f)` is
//!
//! ```text
//! bias[f] + Σ_{a<k, b<width} map[p·s + a, q·s_node + b] · filters[f, a, b]
//! ```
//!
//! For the 1D mode `width = n` and there is a single node position, so the
//! output is `D' × c`. Flattening is row-major over `(p, q, f)`.
//!
//! [`nfc_forward`]/[`nfc_backward`] work on one dense feature map and serve as
//! the reference. The `_batch` versions read feature columns straight out of a
//! sparse feature matrix through the sampled member lists, which is what the
//! model uses: bag-of-words rows are mostly zeros and never need a dense map.

use ndarray::{
    Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayViewD, Axis, IxDyn,
};
use rayon::prelude::*;

use super::ConvSpec;
use crate::error::{Error, Result};
use crate::sampling::Neighborhoods;
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;

const NODE_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    kernel: usize,
    stride: usize,
    width: usize,
    node_stride: usize,
    out_feat: usize,
    out_nodes: usize,
    filters: usize,
}

impl Geometry {
    fn new(spec: &ConvSpec, feature_dim: usize, bandwidth: usize) -> Self {
        let (width, node_stride) = spec.node_window(bandwidth);
        Self {
            kernel: spec.kernel,
            stride: spec.stride,
            width,
            node_stride,
            out_feat: spec.out_features(feature_dim),
            out_nodes: spec.out_nodes(bandwidth),
            filters: spec.filters,
        }
    }

    /// Output positions `p` whose window `[p·s, p·s + k)` contains `r`.
    #[inline]
    fn feature_positions(&self, r: usize) -> std::ops::Range<usize> {
        let lo = (r + 1).saturating_sub(self.kernel).div_ceil(self.stride);
        let hi = (r / self.stride + 1).min(self.out_feat);
        lo..hi.max(lo)
    }

    #[inline]
    fn node_positions(&self, b: usize) -> std::ops::Range<usize> {
        let lo = (b + 1)
            .saturating_sub(self.width)
            .div_ceil(self.node_stride);
        let hi = (b / self.node_stride + 1).min(self.out_nodes);
        lo..hi.max(lo)
    }

    fn flat_len(&self) -> usize {
        self.out_feat * self.out_nodes * self.filters
    }
}

fn check_params<T: Scalar>(
    spec: &ConvSpec,
    feature_dim: usize,
    bandwidth: usize,
    filters: &ArrayView3<'_, T>,
    bias: Option<&ArrayView1<'_, T>>,
) -> Result<()> {
    spec.validate(feature_dim, bandwidth)?;
    let want = spec.filter_shape(bandwidth);
    if filters.shape() != want {
        return Err(Error::shape(
            "node-feature convolution",
            format!("filters are {:?}, expected {:?}", filters.shape(), want),
        ));
    }
    if let Some(b) = bias {
        if b.len() != spec.filters {
            return Err(Error::shape(
                "node-feature convolution",
                format!("{} biases for {} filters", b.len(), spec.filters),
            ));
        }
    }
    Ok(())
}

/// Convolves a single `D × n` feature map.
pub fn nfc_forward<T: Scalar>(
    fm: ArrayView2<'_, T>,
    filters: ArrayView3<'_, T>,
    bias: Option<ArrayView1<'_, T>>,
    spec: &ConvSpec,
) -> Result<ArrayD<T>> {
    let (d, n) = fm.dim();
    check_params(spec, d, n, &filters, bias.as_ref())?;
    let g = Geometry::new(spec, d, n);
    let mut out = Array3::<T>::zeros((g.out_feat, g.out_nodes, g.filters));
    for p in 0..g.out_feat {
        for q in 0..g.out_nodes {
            for f in 0..g.filters {
                let mut acc = bias.as_ref().map_or(T::zero(), |b| b[f]);
                for a in 0..g.kernel {
                    for b in 0..g.width {
                        acc += fm[[p * g.stride + a, q * g.node_stride + b]] * filters[[f, a, b]];
                    }
                }
                out[[p, q, f]] = acc;
            }
        }
    }
    let shape = spec.output_shape(d, n);
    Ok(out
        .into_shape_with_order(IxDyn(&shape))
        .expect("same element count"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NfcGrads<T> {
    pub filters: Array3<T>,
    pub bias: Array1<T>,
    pub input: Array2<T>,
}

/// Gradients of [`nfc_forward`] given the upstream gradient of its output.
pub fn nfc_backward<T: Scalar>(
    fm: ArrayView2<'_, T>,
    filters: ArrayView3<'_, T>,
    spec: &ConvSpec,
    upstream: ArrayViewD<'_, T>,
) -> Result<NfcGrads<T>> {
    let (d, n) = fm.dim();
    check_params(spec, d, n, &filters, None)?;
    let g = Geometry::new(spec, d, n);
    if upstream.shape() != spec.output_shape(d, n).as_slice() {
        return Err(Error::shape(
            "node-feature convolution backward",
            format!("upstream gradient is {:?}", upstream.shape()),
        ));
    }
    let up = upstream
        .to_owned()
        .into_shape_with_order((g.out_feat, g.out_nodes, g.filters))
        .expect("same element count");
    let mut grads = NfcGrads {
        filters: Array3::zeros(filters.raw_dim()),
        bias: Array1::zeros(g.filters),
        input: Array2::zeros((d, n)),
    };
    for p in 0..g.out_feat {
        for q in 0..g.out_nodes {
            for f in 0..g.filters {
                let u = up[[p, q, f]];
                grads.bias[f] += u;
                for a in 0..g.kernel {
                    for b in 0..g.width {
                        let (r, col) = (p * g.stride + a, q * g.node_stride + b);
                        grads.filters[[f, a, b]] += u * fm[[r, col]];
                        grads.input[[r, col]] += u * filters[[f, a, b]];
                    }
                }
            }
        }
    }
    Ok(grads)
}

/// Row-major flattening of a rank-2 or rank-3 convolution output.
pub fn nfc_flatten<T: Scalar>(t: ArrayViewD<'_, T>) -> Result<Array1<T>> {
    match t.ndim() {
        2 | 3 => Ok(t.iter().copied().collect()),
        r => Err(Error::shape(
            "flatten",
            format!("expected rank 2 or 3, got rank {r}"),
        )),
    }
}

fn check_batch<T: Scalar>(x: &CsrMatrix<T>, nbs: &Neighborhoods) -> Result<()> {
    if nbs.num_nodes() != x.nrows() {
        return Err(Error::shape(
            "node-feature convolution",
            format!(
                "{} neighborhoods for {} feature rows",
                nbs.num_nodes(),
                x.nrows()
            ),
        ));
    }
    Ok(())
}

/// Filters permuted to `[k, width, c]` so the innermost loop runs over filters.
fn filters_kwc<T: Scalar>(filters: ArrayView3<'_, T>) -> Vec<T> {
    filters.permuted_axes([1, 2, 0]).iter().copied().collect()
}

/// Convolution of every node's feature map, flattened: `N × (D'·n'·c)`.
///
/// Column `b` of node `i`'s map is row `members(i)[b]` of `x`.
pub fn nfc_forward_batch<T: Scalar>(
    x: &CsrMatrix<T>,
    nbs: &Neighborhoods,
    filters: ArrayView3<'_, T>,
    bias: Option<ArrayView1<'_, T>>,
    spec: &ConvSpec,
) -> Result<Array2<T>> {
    let (d, n) = (x.ncols(), nbs.bandwidth());
    check_params(spec, d, n, &filters, bias.as_ref())?;
    check_batch(x, nbs)?;
    let g = Geometry::new(spec, d, n);
    let c = g.filters;
    let wt = filters_kwc(filters);
    let bias: Option<Vec<T>> = bias.map(|b| b.to_vec());

    let mut out = Array2::<T>::zeros((x.nrows(), g.flat_len()));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            let row = row
                .as_slice_mut()
                .expect("rows of a fresh array are contiguous");
            if let Some(b) = &bias {
                for chunk in row.chunks_exact_mut(c) {
                    chunk.copy_from_slice(b);
                }
            }
            for (col, &m) in nbs.members(i).iter().enumerate() {
                let (feat_idx, vals) = x.row(m);
                for q in g.node_positions(col) {
                    let b_off = col - q * g.node_stride;
                    for (&r, &v) in feat_idx.iter().zip(vals) {
                        for p in g.feature_positions(r) {
                            let a = r - p * g.stride;
                            let w = &wt[(a * g.width + b_off) * c..][..c];
                            let o = &mut row[(p * g.out_nodes + q) * c..][..c];
                            for (o, &w) in o.iter_mut().zip(w) {
                                *o += v * w;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Filter and bias gradients of [`nfc_forward_batch`].
///
/// Nodes are processed in fixed-size chunks whose partial sums are added in
/// chunk order, so the result does not depend on the thread count.
pub fn nfc_backward_batch<T: Scalar>(
    x: &CsrMatrix<T>,
    nbs: &Neighborhoods,
    spec: &ConvSpec,
    upstream: ArrayView2<'_, T>,
) -> Result<(Array3<T>, Array1<T>)> {
    let (d, n) = (x.ncols(), nbs.bandwidth());
    spec.validate(d, n)?;
    check_batch(x, nbs)?;
    let g = Geometry::new(spec, d, n);
    if upstream.dim() != (x.nrows(), g.flat_len()) {
        return Err(Error::shape(
            "node-feature convolution backward",
            format!(
                "upstream gradient is {:?}, expected ({}, {})",
                upstream.dim(),
                x.nrows(),
                g.flat_len()
            ),
        ));
    }
    let upstream = upstream.as_standard_layout();
    let c = g.filters;
    let wlen = g.kernel * g.width * c;

    let chunks: Vec<(Vec<T>, Vec<T>)> = (0..x.nrows().div_ceil(NODE_CHUNK))
        .into_par_iter()
        .map(|ci| {
            let mut dw = vec![T::zero(); wlen];
            let mut db = vec![T::zero(); c];
            let end = ((ci + 1) * NODE_CHUNK).min(x.nrows());
            for i in ci * NODE_CHUNK..end {
                let up = upstream.row(i);
                let up = up.as_slice().expect("standard layout");
                for chunk in up.chunks_exact(c) {
                    for (d, &u) in db.iter_mut().zip(chunk) {
                        *d += u;
                    }
                }
                for (col, &m) in nbs.members(i).iter().enumerate() {
                    let (feat_idx, vals) = x.row(m);
                    for q in g.node_positions(col) {
                        let b_off = col - q * g.node_stride;
                        for (&r, &v) in feat_idx.iter().zip(vals) {
                            for p in g.feature_positions(r) {
                                let a = r - p * g.stride;
                                let w = &mut dw[(a * g.width + b_off) * c..][..c];
                                let u = &up[(p * g.out_nodes + q) * c..][..c];
                                for (w, &u) in w.iter_mut().zip(u) {
                                    *w += v * u;
                                }
                            }
                        }
                    }
                }
            }
            (dw, db)
        })
        .collect();

    let mut dw = vec![T::zero(); wlen];
    let mut db = Array1::zeros(c);
    for (pw, pb) in chunks {
        for (a, b) in dw.iter_mut().zip(pw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a += b;
        }
    }
    let dw = Array3::from_shape_vec((g.kernel, g.width, c), dw)
        .expect("sized above")
        .permuted_axes([2, 0, 1])
        .as_standard_layout()
        .into_owned();
    Ok((dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Masks};
    use crate::sampling::build_feature_map;
    use ndarray::{array, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_example_k1() {
        let fm = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let filters = array![[[1.0, 1.0]]];
        let spec = ConvSpec::conv1d(1, 1, 1);
        let out = nfc_forward(fm.view(), filters.view(), None, &spec).unwrap();
        assert_eq!(out.shape(), &[3, 1]);
        assert_eq!(
            nfc_flatten(out.view()).unwrap().to_vec(),
            vec![3.0, 7.0, 11.0]
        );

        // With an all-ones upstream the filter gradient is the column sums.
        let up = ArrayD::from_elem(IxDyn(&[3, 1]), 1.0);
        let g = nfc_backward(fm.view(), filters.view(), &spec, up.view()).unwrap();
        assert_eq!(g.filters, array![[[9.0, 12.0]]]);
        assert_eq!(g.bias, array![3.0]);
        assert_eq!(g.input, Array2::<f64>::ones((3, 2)));
    }

    #[test]
    fn zero_map_gives_zero_output() {
        let spec = ConvSpec::conv2d(2, 1, 3, 2, 1);
        let filters = Array3::from_elem((3, 2, 2), 0.7);
        let out = nfc_forward(
            Array2::<f64>::zeros((5, 3)).view(),
            filters.view(),
            None,
            &spec,
        )
        .unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), &[4, 2, 3]);
    }

    #[test]
    fn rejects_oversized_filters() {
        let fm = Array2::<f64>::zeros((3, 2));
        let spec = ConvSpec::conv1d(4, 1, 1);
        assert!(nfc_forward(fm.view(), Array3::zeros((1, 4, 2)).view(), None, &spec).is_err());
        let spec = ConvSpec::conv2d(1, 1, 1, 3, 1);
        assert!(nfc_forward(fm.view(), Array3::zeros((1, 1, 3)).view(), None, &spec).is_err());
    }

    #[test]
    fn flatten_shapes() {
        let t = Array::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(
            nfc_flatten(t.view()).unwrap().to_vec(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        let one = ArrayD::from_elem(IxDyn(&[1, 1]), 5.0);
        assert_eq!(nfc_flatten(one.view()).unwrap().len(), 1);
        assert!(nfc_flatten(ArrayD::<f64>::zeros(IxDyn(&[4])).view()).is_err());
    }

    #[test]
    fn full_width_conv1d_is_an_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, n, c) = (7, 3, 4);
        let fm = Array2::from_shape_simple_fn((d, n), || rng.random_range(-1.0..1.0));
        let filters = Array3::from_shape_simple_fn((c, d, n), || rng.random_range(-1.0..1.0));
        let bias = Array1::from_shape_simple_fn(c, || rng.random_range(-1.0..1.0));
        let spec = ConvSpec::conv1d(d, 1, c);
        let out = nfc_forward(fm.view(), filters.view(), Some(bias.view()), &spec).unwrap();
        assert_eq!(out.shape(), &[1, c]);
        let flat_map: Array1<f64> = fm.iter().copied().collect();
        let w = filters
            .into_shape_with_order((c, d * n))
            .unwrap()
            .reversed_axes();
        let via_affine = crate::ops::affine_forward(
            flat_map.insert_axis(Axis(0)).view(),
            w.view(),
            Some(bias.view()),
        )
        .unwrap();
        for f in 0..c {
            assert!((out[[0, f]] - via_affine[[0, f]]).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_in_the_feature_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fm = Array2::<f64>::from_shape_simple_fn((9, 4), || rng.random_range(-1.0..1.0));
        for spec in [ConvSpec::conv1d(3, 2, 2), ConvSpec::conv2d(3, 2, 2, 2, 1)] {
            let filters =
                Array3::from_shape_simple_fn(spec.filter_shape(4), || rng.random_range(-1.0..1.0));
            let base = nfc_forward(fm.view(), filters.view(), None, &spec).unwrap();
            let scaled = nfc_forward((&fm * 2.5).view(), filters.view(), None, &spec).unwrap();
            for (a, b) in base.iter().zip(scaled.iter()) {
                assert!((a * 2.5 - b).abs() < 1e-12);
            }
        }
    }

    fn random_sparse_graph(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Graph<f64> {
        let x = Array2::from_shape_simple_fn((n, d), || {
            if rng.random_bool(0.3) {
                rng.random_range(-1.0..1.0)
            } else {
                0.0
            }
        });
        let edges: Vec<_> = (0..2 * n)
            .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
            .collect();
        Graph::build(n, &edges, x, vec![None; n], Masks::empty(n)).unwrap()
    }

    #[test]
    fn batch_matches_per_map_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let specs = [
            ConvSpec::conv1d(3, 2, 2),
            ConvSpec::conv1d(4, 5, 3),
            ConvSpec::conv1d(1, 1, 1),
            ConvSpec::conv2d(3, 2, 2, 2, 1),
            ConvSpec::conv2d(2, 3, 3, 2, 2),
            ConvSpec::conv2d(5, 1, 1, 1, 1),
        ];
        for spec in specs {
            let (nodes, d, bw) = (40, 13, 4);
            let g = random_sparse_graph(&mut rng, nodes, d);
            let nbs = Neighborhoods::sample(&g, bw, 5).unwrap();
            let x = CsrMatrix::from_dense(g.features().view());
            let filters =
                Array3::from_shape_simple_fn(spec.filter_shape(bw), || rng.random_range(-1.0..1.0));
            let bias = Array1::from_shape_simple_fn(spec.filters, || rng.random_range(-1.0..1.0));
            let batch =
                nfc_forward_batch(&x, &nbs, filters.view(), Some(bias.view()), &spec).unwrap();
            let up = Array2::from_shape_simple_fn(batch.raw_dim(), || rng.random_range(-1.0..1.0));
            let (dw, db) = nfc_backward_batch(&x, &nbs, &spec, up.view()).unwrap();

            let mut ref_dw = Array3::<f64>::zeros(filters.raw_dim());
            let mut ref_db = Array1::<f64>::zeros(spec.filters);
            for i in 0..nodes {
                let fm = build_feature_map(&g, &nbs.get(i));
                let out = nfc_forward(fm.values.view(), filters.view(), Some(bias.view()), &spec)
                    .unwrap();
                let flat = nfc_flatten(out.view()).unwrap();
                for (a, b) in flat.iter().zip(batch.row(i)) {
                    assert!((a - b).abs() < 1e-12, "{spec:?}");
                }
                let shape = spec.output_shape(d, bw);
                let up_i = up
                    .row(i)
                    .to_owned()
                    .into_shape_with_order(IxDyn(&shape))
                    .unwrap();
                let gr =
                    nfc_backward(fm.values.view(), filters.view(), &spec, up_i.view()).unwrap();
                ref_dw = ref_dw + gr.filters;
                ref_db = ref_db + gr.bias;
            }
            for (a, b) in ref_dw.iter().zip(dw.iter()) {
                assert!((a - b).abs() < 1e-10, "{:?}", spec.mode);
            }
            for (a, b) in ref_db.iter().zip(db.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
