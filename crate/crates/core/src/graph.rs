//! Graph container, degree statistics and adjacency normalization.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;

/// Train/validation/test membership, one flag per node.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    pub fn empty(num_nodes: usize) -> Self {
        Self {
            train: vec![false; num_nodes],
            val: vec![false; num_nodes],
            test: vec![false; num_nodes],
        }
    }

    pub fn from_indices(num_nodes: usize, train: &[usize], val: &[usize], test: &[usize]) -> Self {
        let mut m = Self::empty(num_nodes);
        for &i in train {
            m.train[i] = true;
        }
        for &i in val {
            m.val[i] = true;
        }
        for &i in test {
            m.test[i] = true;
        }
        m
    }

    pub fn get(&self, which: MaskKind) -> &[bool] {
        match which {
            MaskKind::Train => &self.train,
            MaskKind::Val => &self.val,
            MaskKind::Test => &self.test,
        }
    }

    pub fn indices(&self, which: MaskKind) -> Vec<usize> {
        self.get(which)
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn count(&self, which: MaskKind) -> usize {
        self.get(which).iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(MaskKind::Train),
            "val" => Ok(MaskKind::Val),
            "test" => Ok(MaskKind::Test),
            other => Err(Error::Config(format!(
                "unknown mask {other:?} (train|val|test)"
            ))),
        }
    }
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskKind::Train => "train",
            MaskKind::Val => "val",
            MaskKind::Test => "test",
        })
    }
}

/// Undirected, unweighted attributed graph with node labels and split masks.
///
/// Edges are stored once as `(i, j)` with `i < j`, sorted. Nodes without a
/// label carry `None` and may not appear in any mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph<T> {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Array2<T>,
    labels: Vec<Option<usize>>,
    num_classes: usize,
    masks: Masks,
    adj_ptr: Vec<usize>,
    adj: Vec<usize>,
}

impl<T: Scalar> Graph<T> {
    /// Validates and canonicalizes the inputs: self-loops are dropped, edge
    /// direction is ignored and duplicates are merged.
    pub fn build(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Array2<T>,
        labels: Vec<Option<usize>>,
        masks: Masks,
    ) -> Result<Self> {
        if features.nrows() != num_nodes {
            return Err(Error::InvalidGraph(format!(
                "feature matrix has {} rows for {num_nodes} nodes",
                features.nrows()
            )));
        }
        if labels.len() != num_nodes {
            return Err(Error::InvalidGraph(format!(
                "{} labels for {num_nodes} nodes",
                labels.len()
            )));
        }
        for (name, m) in [
            ("train", &masks.train),
            ("val", &masks.val),
            ("test", &masks.test),
        ] {
            if m.len() != num_nodes {
                return Err(Error::InvalidGraph(format!(
                    "{name} mask has length {} for {num_nodes} nodes",
                    m.len()
                )));
            }
        }

        let mut canon = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::EdgeOutOfRange(a, b, num_nodes));
            }
            if a != b {
                canon.push((a.min(b), a.max(b)));
            }
        }
        canon.sort_unstable();
        canon.dedup();

        for (i, label) in labels.iter().enumerate() {
            let hits = masks.train[i] as u8 + masks.val[i] as u8 + masks.test[i] as u8;
            if hits > 1 {
                return Err(Error::OverlappingMasks(i));
            }
            if hits == 1 && label.is_none() {
                return Err(Error::UnlabeledMaskNode { node: i });
            }
        }
        let num_classes = labels.iter().flatten().map(|&l| l + 1).max().unwrap_or(0);

        let mut degree = vec![0usize; num_nodes];
        for &(a, b) in &canon {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut adj_ptr = vec![0usize; num_nodes + 1];
        for i in 0..num_nodes {
            adj_ptr[i + 1] = adj_ptr[i] + degree[i];
        }
        let mut next = adj_ptr.clone();
        let mut adj = vec![0usize; adj_ptr[num_nodes]];
        for &(a, b) in &canon {
            adj[next[a]] = b;
            next[a] += 1;
            adj[next[b]] = a;
            next[b] += 1;
        }
        for i in 0..num_nodes {
            adj[adj_ptr[i]..adj_ptr[i + 1]].sort_unstable();
        }

        Ok(Self {
            num_nodes,
            edges: canon,
            features,
            labels,
            num_classes,
            masks,
            adj_ptr,
            adj,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Array2<T> {
        &self.features
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn masks(&self) -> &Masks {
        &self.masks
    }

    /// Sorted neighbor list of `i`, excluding `i` itself.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adj[self.adj_ptr[i]..self.adj_ptr[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj_ptr[i + 1] - self.adj_ptr[i]
    }

    /// Same graph with different masks.
    pub fn with_masks(&self, masks: Masks) -> Result<Self> {
        Self::build(
            self.num_nodes,
            &self.edges,
            self.features.clone(),
            self.labels.clone(),
            masks,
        )
    }

    /// Row `i` of the feature matrix as a slice.
    pub fn feature_row(&self, i: usize) -> ndarray::ArrayView1<'_, T> {
        self.features.row(i)
    }
}

/// How the self-loop–augmented adjacency `Ã = A + I` is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationForm {
    /// `D̃^{-1/2} Ã D̃^{-1/2}`.
    SymNormSelfLoop,
    /// `D̃^{-1} Ã`: every row averages the node and its neighbors.
    RowMeanSelfLoop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency<T> {
    pub matrix: CsrMatrix<T>,
    pub form: NormalizationForm,
}

fn self_loop_adjacency<T: Scalar>(
    g: &Graph<T>,
    weight: impl Fn(usize, usize) -> T,
) -> CsrMatrix<T> {
    let n = g.num_nodes();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::with_capacity(n + 2 * g.num_edges());
    let mut values = Vec::with_capacity(n + 2 * g.num_edges());
    row_ptr.push(0);
    for i in 0..n {
        let nb = g.neighbors(i);
        let split = nb.partition_point(|&j| j < i);
        for &j in nb[..split]
            .iter()
            .chain(std::iter::once(&i))
            .chain(&nb[split..])
        {
            col_idx.push(j);
            values.push(weight(i, j));
        }
        row_ptr.push(col_idx.len());
    }
    CsrMatrix::from_raw(n, n, row_ptr, col_idx, values).expect("adjacency rows are sorted")
}

/// Symmetric normalization with self-loops: `Â_ij = Ã_ij / sqrt(d̃_i d̃_j)`.
pub fn normalize_adjacency<T: Scalar>(g: &Graph<T>) -> NormalizedAdjacency<T> {
    let deg: Vec<T> = (0..g.num_nodes())
        .map(|i| T::from_usize_lossy(g.degree(i) + 1))
        .collect();
    NormalizedAdjacency {
        matrix: self_loop_adjacency(g, |i, j| (deg[i] * deg[j]).sqrt().recip()),
        form: NormalizationForm::SymNormSelfLoop,
    }
}

/// Row-stochastic mean aggregation `D̃^{-1} Ã`.
pub fn mean_adjacency<T: Scalar>(g: &Graph<T>) -> NormalizedAdjacency<T> {
    let inv: Vec<T> = (0..g.num_nodes())
        .map(|i| T::from_usize_lossy(g.degree(i) + 1).recip())
        .collect();
    NormalizedAdjacency {
        matrix: self_loop_adjacency(g, |i, _| inv[i]),
        form: NormalizationForm::RowMeanSelfLoop,
    }
}

pub fn adjacency<T: Scalar>(g: &Graph<T>, form: NormalizationForm) -> NormalizedAdjacency<T> {
    match form {
        NormalizationForm::SymNormSelfLoop => normalize_adjacency(g),
        NormalizationForm::RowMeanSelfLoop => mean_adjacency(g),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegreeStats {
    pub highest: usize,
    pub lowest: usize,
    pub mean: f64,
    /// Lower middle element for an even number of nodes.
    pub median: usize,
}

/// Degree statistics, self-loops excluded.
pub fn degree_stats<T: Scalar>(g: &Graph<T>) -> Result<DegreeStats> {
    if g.num_nodes() == 0 {
        return Err(Error::InvalidGraph(
            "degree statistics of an empty graph".into(),
        ));
    }
    let mut deg: Vec<usize> = (0..g.num_nodes()).map(|i| g.degree(i)).collect();
    deg.sort_unstable();
    Ok(DegreeStats {
        highest: *deg.last().unwrap(),
        lowest: deg[0],
        mean: deg.iter().sum::<usize>() as f64 / deg.len() as f64,
        median: deg[(deg.len() - 1) / 2],
    })
}
