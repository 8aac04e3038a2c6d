//! Fixed-bandwidth neighbor sampling and per-node feature maps.
//!
//! Every node gets exactly `n` members: itself first, then up to `n - 1`
//! neighbors drawn uniformly without replacement. Nodes with fewer than
//! `n - 1` neighbors take all of them and are padded with copies of
//! themselves.

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledNeighborhood {
    pub center: usize,
    /// `members[0] == center`; length is the bandwidth.
    pub members: Vec<usize>,
}

impl SampledNeighborhood {
    pub fn bandwidth(&self) -> usize {
        self.members.len()
    }
}

/// `D × n` matrix whose column `j` is the feature vector of `members[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Array2<T>,
    pub center: usize,
}

/// Deterministic generator for node `i`, independent of visiting order.
pub fn node_rng(seed: u64, node: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(node as u64);
    rng
}

pub fn sample_neighborhood<T: Scalar, R: Rng + ?Sized>(
    g: &Graph<T>,
    i: usize,
    bandwidth: usize,
    rng: &mut R,
) -> Result<SampledNeighborhood> {
    if bandwidth == 0 {
        return Err(Error::Config("node bandwidth must be at least 1".into()));
    }
    if i >= g.num_nodes() {
        return Err(Error::InvalidGraph(format!("node {i} out of range")));
    }
    let slots = bandwidth - 1;
    let nb = g.neighbors(i);
    let mut members = Vec::with_capacity(bandwidth);
    members.push(i);
    if nb.len() > slots {
        members.extend(index::sample(rng, nb.len(), slots).iter().map(|k| nb[k]));
    } else {
        members.extend_from_slice(nb);
        members.resize(bandwidth, i);
    }
    Ok(SampledNeighborhood { center: i, members })
}

pub fn build_feature_map<T: Scalar>(g: &Graph<T>, nb: &SampledNeighborhood) -> FeatureMap<T> {
    let x = g.features();
    let mut values = Array2::zeros((g.feature_dim(), nb.members.len()));
    for (col, &m) in nb.members.iter().enumerate() {
        values.column_mut(col).assign(&x.row(m));
    }
    FeatureMap {
        values,
        center: nb.center,
    }
}

/// Member lists for every node, stored flat (`N × n`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhoods {
    bandwidth: usize,
    members: Vec<usize>,
}

impl Neighborhoods {
    pub fn sample<T: Scalar>(g: &Graph<T>, bandwidth: usize, seed: u64) -> Result<Self> {
        if bandwidth == 0 {
            return Err(Error::Config("node bandwidth must be at least 1".into()));
        }
        let per_node: Vec<SampledNeighborhood> = (0..g.num_nodes())
            .into_par_iter()
            .map(|i| sample_neighborhood(g, i, bandwidth, &mut node_rng(seed, i)))
            .collect::<Result<_>>()?;
        Ok(Self {
            bandwidth,
            members: per_node.into_iter().flat_map(|nb| nb.members).collect(),
        })
    }

    pub fn from_members(bandwidth: usize, members: Vec<usize>) -> Result<Self> {
        if bandwidth == 0 || !members.len().is_multiple_of(bandwidth) {
            return Err(Error::shape(
                "neighborhoods",
                "member list is not N × bandwidth",
            ));
        }
        Ok(Self { bandwidth, members })
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn num_nodes(&self) -> usize {
        self.members.len() / self.bandwidth
    }

    #[inline]
    pub fn members(&self, i: usize) -> &[usize] {
        &self.members[i * self.bandwidth..(i + 1) * self.bandwidth]
    }

    pub fn get(&self, i: usize) -> SampledNeighborhood {
        SampledNeighborhood {
            center: i,
            members: self.members(i).to_vec(),
        }
    }
}

/// One feature map per node. Streams are derived from `(seed, node)`.
pub fn sample_all<T: Scalar>(
    g: &Graph<T>,
    bandwidth: usize,
    seed: u64,
) -> Result<Vec<FeatureMap<T>>> {
    let nbs = Neighborhoods::sample(g, bandwidth, seed)?;
    Ok((0..g.num_nodes())
        .into_par_iter()
        .map(|i| build_feature_map(g, &nbs.get(i)))
        .collect())
}
