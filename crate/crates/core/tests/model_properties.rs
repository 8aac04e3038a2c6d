//! Structural properties of the full pipeline.

use ndarray::Array2;
use nfcgcn::gradcheck::{check_model, standard_case, GradCheckConfig};
use nfcgcn::graph::{Graph, Masks};
use nfcgcn::model::{
    first_stage, model_backward, model_forward, GraphInputs, ModelParams, ModelSpec, Variant,
};
use nfcgcn::sampling::Neighborhoods;
use nfcgcn::synthetic::random_dense;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn logits(
    spec: &ModelSpec,
    params: &ModelParams<f64>,
    g: &Graph<f64>,
    nbs: Option<&Neighborhoods>,
) -> Array2<f64> {
    let inputs = GraphInputs::new(g, spec.aggregation);
    model_forward(
        spec,
        params,
        &inputs,
        nbs,
        false,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap()
    .logits
}

/// `g` with node `i` renamed to `perm[i]`.
fn relabel(g: &Graph<f64>, perm: &[usize]) -> Graph<f64> {
    let n = g.num_nodes();
    let edges: Vec<(usize, usize)> = g.edges().iter().map(|&(a, b)| (perm[a], perm[b])).collect();
    let mut x = Array2::zeros(g.features().raw_dim());
    let mut labels = vec![None; n];
    for i in 0..n {
        x.row_mut(perm[i]).assign(&g.features().row(i));
        labels[perm[i]] = g.labels()[i];
    }
    let remap = |m: &[bool]| -> Vec<usize> { (0..n).filter(|&i| m[i]).map(|i| perm[i]).collect() };
    let m = g.masks();
    let masks = Masks::from_indices(n, &remap(&m.train), &remap(&m.val), &remap(&m.test));
    Graph::build(n, &edges, x, labels, masks).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn logits_follow_a_global_relabeling(seed in 0u64..10_000, variant in 0usize..4, conv2d in any::<bool>()) {
        let case = standard_case(Variant::ALL[variant], conv2d, seed).unwrap();
        let mut spec = case.spec.clone();
        spec.dropout = 0.0;
        let g = &case.graph;
        let n = g.num_nodes();
        let params = ModelParams::<f64>::init(&spec, g.feature_dim(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let nbs = Neighborhoods::sample(g, spec.bandwidth, seed).unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xABCD));
        let h = relabel(g, &perm);
        let mut members = vec![0; n * spec.bandwidth];
        for i in 0..n {
            for (j, &m) in nbs.members(i).iter().enumerate() {
                members[perm[i] * spec.bandwidth + j] = perm[m];
            }
        }
        let nbs_h = Neighborhoods::from_members(spec.bandwidth, members).unwrap();

        let before = logits(&spec, &params, g, Some(&nbs));
        let after = logits(&spec, &params, &h, Some(&nbs_h));
        for i in 0..n {
            for f in 0..before.ncols() {
                let (a, b) = (before[[i, f]], after[[perm[i], f]]);
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "node {} class {}: {} vs {}", i, f, a, b);
            }
        }
    }

    #[test]
    fn aggregation_ignores_neighbor_list_order(seed in 0u64..10_000, variant in 0usize..4) {
        let case = standard_case(Variant::ALL[variant], false, seed).unwrap();
        let g = &case.graph;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges: Vec<(usize, usize)> = g
            .edges()
            .iter()
            .map(|&(a, b)| if rng.random_bool(0.5) { (b, a) } else { (a, b) })
            .collect();
        edges.shuffle(&mut rng);
        let h = Graph::build(g.num_nodes(), &edges, g.features().clone(), g.labels().to_vec(), g.masks().clone()).unwrap();
        prop_assert_eq!(&h, g);

        let params = ModelParams::<f64>::init(&case.spec, g.feature_dim(), &mut rng).unwrap();
        let nbs = Neighborhoods::sample(g, case.spec.bandwidth, seed).unwrap();
        prop_assert_eq!(logits(&case.spec, &params, g, Some(&nbs)), logits(&case.spec, &params, &h, Some(&nbs)));
    }
}

#[test]
fn bandwidth_one_convolves_each_node_alone() {
    let g = random_dense::<f64>(10, 9, 3, 0.4, 2).unwrap();
    let mut case = standard_case(Variant::NfcGcn, false, 2).unwrap();
    case.spec.bandwidth = 1;
    let spec = &case.spec;
    let mut params = ModelParams::<f64>::init(spec, 9, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    for v in params.conv_bias.as_mut().unwrap().value.iter_mut() {
        *v = 0.25;
    }
    let nbs = Neighborhoods::sample(&g, 1, 2).unwrap();
    for i in 0..10 {
        assert_eq!(nbs.members(i), &[i]);
    }
    let inputs = GraphInputs::new(&g, spec.aggregation);
    let h0 = first_stage(spec, &params, &inputs, Some(&nbs))
        .unwrap()
        .unwrap();

    // k = 3, s = 2 over D = 9 gives 4 windows; row layout is (window, filter).
    let w = &params.conv_filters.as_ref().unwrap().value;
    let (k, s, c) = (3, 2, 2);
    let windows = (9 - k) / s + 1;
    assert_eq!(h0.dim(), (10, windows * c));
    for i in 0..10 {
        let x = g.feature_row(i);
        for p in 0..windows {
            for f in 0..c {
                let want: f64 = 0.25 + (0..k).map(|a| x[p * s + a] * w[[f, a, 0]]).sum::<f64>();
                let got = h0[[i, p * c + f]];
                assert!(
                    (got - want).abs() < 1e-12,
                    "node {i} window {p} filter {f}: {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn bandwidth_one_passes_the_gradient_check() {
    for variant in [Variant::NfcGcn, Variant::NfcOnly, Variant::Mean5Only] {
        let mut case = standard_case(variant, false, 8).unwrap();
        case.spec.bandwidth = 1;
        let report = check_model(&case.spec, &case.graph, 8, &GradCheckConfig::default()).unwrap();
        assert!(report.pass, "{variant}: {:#?}", report.tensors);
    }
}

#[test]
fn repeated_passes_give_identical_gradients() {
    let case = standard_case(Variant::NfcGcn, true, 4).unwrap();
    let run = || {
        let mut params =
            ModelParams::<f64>::init(&case.spec, 9, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let nbs = Neighborhoods::sample(&case.graph, case.spec.bandwidth, 4).unwrap();
        let inputs = GraphInputs::new(&case.graph, case.spec.aggregation);
        let cache = model_forward(
            &case.spec,
            &params,
            &inputs,
            Some(&nbs),
            true,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        model_backward(&case.spec, &mut params, &cache, &inputs, Some(&nbs), 1e-3).unwrap();
        params
    };
    assert_eq!(run(), run());
}
