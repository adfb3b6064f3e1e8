//! Synthetic transductive node classification on a stochastic block model
//! with Gaussian class-conditional features.

use pmp_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{GraphInstance, TEST, TRAIN, VAL};
use crate::error::{PmpError, Result};
use crate::graph::GraphTopology;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommunityParams {
    pub nodes: usize,
    pub communities: usize,
    /// Edge probability inside a community.
    pub p_in: f64,
    /// Edge probability across communities.
    pub p_out: f64,
    pub feature_dim: usize,
    /// Norm scale of the class means relative to unit feature noise.
    pub signal: f64,
    pub train_per_class: usize,
    pub val: usize,
}

impl Default for CommunityParams {
    fn default() -> Self {
        Self {
            nodes: 400,
            communities: 4,
            p_in: 0.05,
            p_out: 0.002,
            feature_dim: 16,
            signal: 1.5,
            train_per_class: 20,
            val: 120,
        }
    }
}

/// Draws the graph, features and the train/val/test split. Undirected SBM
/// edges are stored in both directions.
pub fn gen_community(params: CommunityParams, rng: &mut impl Rng) -> Result<GraphInstance> {
    let CommunityParams {
        nodes: n,
        communities: c,
        ..
    } = params;
    if c < 2 || n < c * params.train_per_class + params.val + 1 {
        return Err(PmpError::InvalidArgument(format!(
            "{n} nodes cannot hold {c} communities with {} training nodes each plus {} validation nodes",
            params.train_per_class, params.val
        )));
    }
    let ok_prob = |p: f64| (0.0..=1.0).contains(&p);
    if !ok_prob(params.p_in) || !ok_prob(params.p_out) {
        return Err(PmpError::InvalidArgument(
            "edge probabilities must lie in [0, 1]".into(),
        ));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(rng);

    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let p = if labels[i] == labels[j] {
                params.p_in
            } else {
                params.p_out
            };
            if rng.random_bool(p) {
                pairs.push((i, j));
            }
        }
    }
    let topology = GraphTopology::from_undirected(n, &pairs)?;

    // Class means have expected norm `signal`; the noise is unit per coordinate.
    let scale = params.signal / (params.feature_dim as f64).sqrt();
    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            (0..params.feature_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n * params.feature_dim);
    for &y in &labels {
        for &m in &means[y] {
            data.push((m + rng.sample::<f64, _>(StandardNormal)) as f32);
        }
    }
    let features = Tensor::from_vec(n, params.feature_dim, data)?;
    let flags = split_flags(&labels, c, params.train_per_class, params.val);
    Ok(GraphInstance {
        features,
        topology,
        targets: labels,
        flags,
        n_classes: c,
    })
}

/// First `per_class` nodes of each class (in index order) train, the next
/// `val` remaining nodes validate, the rest test.
pub fn split_flags(labels: &[usize], classes: usize, per_class: usize, val: usize) -> Vec<u8> {
    let mut flags = vec![0u8; labels.len()];
    let mut taken = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        if taken[y] < per_class {
            taken[y] += 1;
            flags[i] = TRAIN;
        }
    }
    let mut remaining = val;
    for f in flags.iter_mut().filter(|f| **f == 0) {
        if remaining > 0 {
            *f = VAL;
            remaining -= 1;
        } else {
            *f = TEST;
        }
    }
    flags
}
