//! Seeded graph generators for tests, gradient checks and dry runs.

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Masks};
use crate::scalar::Scalar;

/// Two cliques of `half` nodes each. Class-0 nodes carry ones on the first
/// half of the `dim` features and class-1 nodes on the second half, so the
/// classes are linearly separable from features alone. Per class, the first
/// `train` nodes are training nodes, the next `val` validation, the rest test.
pub fn two_cliques<T: Scalar>(
    half: usize,
    dim: usize,
    train: usize,
    val: usize,
) -> Result<Graph<T>> {
    let n = 2 * half;
    let mut edges = Vec::new();
    for c in 0..2 {
        let base = c * half;
        for i in 0..half {
            for j in i + 1..half {
                edges.push((base + i, base + j));
            }
        }
    }
    let split = dim / 2;
    let x = Array2::from_shape_fn((n, dim), |(i, f)| {
        let class0 = i < half;
        if (f < split) == class0 {
            T::one()
        } else {
            T::zero()
        }
    });
    let labels = (0..n).map(|i| Some(usize::from(i >= half))).collect();
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..2 {
        for k in 0..half {
            let i = c * half + k;
            if k < train {
                tr.push(i);
            } else if k < train + val {
                va.push(i);
            } else {
                te.push(i);
            }
        }
    }
    Graph::build(n, &edges, x, labels, Masks::from_indices(n, &tr, &va, &te))
}

/// Erdős–Rényi graph with dense uniform `[-1, 1)` features and uniform
/// labels. Every node is labeled; the first half trains, the rest split
/// evenly between validation and test.
pub fn random_dense<T: Scalar>(
    nodes: usize,
    dim: usize,
    classes: usize,
    edge_prob: f64,
    seed: u64,
) -> Result<Graph<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..nodes {
        for j in i + 1..nodes {
            if rng.random_bool(edge_prob) {
                edges.push((i, j));
            }
        }
    }
    let x = Array2::from_shape_simple_fn((nodes, dim), || {
        T::from_f64_lossy(rng.random_range(-1.0..1.0))
    });
    let labels = (0..nodes)
        .map(|_| Some(rng.random_range(0..classes)))
        .collect();
    let tr: Vec<usize> = (0..nodes / 2).collect();
    let va: Vec<usize> = (nodes / 2..nodes / 2 + nodes / 4).collect();
    let te: Vec<usize> = (nodes / 2 + nodes / 4..nodes).collect();
    Graph::build(
        nodes,
        &edges,
        x,
        labels,
        Masks::from_indices(nodes, &tr, &va, &te),
    )
}

/// Parameters of [`citation_like`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CitationParams {
    pub nodes: usize,
    pub dim: usize,
    pub classes: usize,
    /// Expected degree.
    pub mean_degree: f64,
    /// Fraction of edges that stay within a class.
    pub homophily: f64,
    /// Active words per node.
    pub words: usize,
    /// Fraction of a node's words drawn from its class vocabulary.
    pub topical: f64,
}

impl CitationParams {
    /// Cora-sized: 2708 nodes, 1433 binary features, 7 classes.
    pub fn cora_shaped() -> Self {
        Self {
            nodes: 2708,
            dim: 1433,
            classes: 7,
            mean_degree: 3.9,
            homophily: 0.8,
            words: 18,
            topical: 0.5,
        }
    }
}

/// Stochastic-block citation graph with binary bag-of-words features. No
/// masks are set.
pub fn citation_like<T: Scalar>(p: &CitationParams, seed: u64) -> Result<Graph<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..p.nodes).map(|i| i % p.classes).collect();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); p.classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let target = (p.mean_degree * p.nodes as f64 / 2.0).round() as usize;
    let mut edges = Vec::with_capacity(target);
    while edges.len() < target && p.nodes > 1 {
        let i = rng.random_range(0..p.nodes);
        let j = if rng.random_bool(p.homophily) {
            *by_class[labels[i]]
                .choose(&mut rng)
                .expect("class is non-empty")
        } else {
            rng.random_range(0..p.nodes)
        };
        if i != j {
            edges.push((i, j));
        }
    }

    // Contiguous class vocabularies.
    let vocab = (p.dim / p.classes).max(1);
    let mut x = Array2::zeros((p.nodes, p.dim));
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        let start = (labels[i] * vocab).min(p.dim - 1);
        let end = (start + vocab).min(p.dim);
        for _ in 0..p.words {
            let f = if rng.random_bool(p.topical) {
                rng.random_range(start..end)
            } else {
                rng.random_range(0..p.dim)
            };
            row[f] = T::one();
        }
    }
    Graph::build(
        p.nodes,
        &edges,
        x,
        labels.into_iter().map(Some).collect(),
        Masks::empty(p.nodes),
    )
}
