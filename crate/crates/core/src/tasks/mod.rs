//! Task generators, loaders, the dataset container and evaluation metrics.

pub mod community;
pub mod cora;
pub mod dataset;
pub mod metrics;
pub mod puzzle;
pub mod whereami;

use pmp_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TaskSpec;
use dataset::Dataset;

use crate::error::{PmpError, Result};
use crate::graph::GraphTopology;

/// Node is supervised during training and its label is visible to the
/// proposal policy.
pub const TRAIN: u8 = 1;
/// Node is scored on the validation split.
pub const VAL: u8 = 2;
/// Node is scored on the test split.
pub const TEST: u8 = 4;

/// Any task instance in the common form consumed by the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInstance {
    pub features: Tensor<f32>,
    pub topology: GraphTopology,
    pub targets: Vec<usize>,
    /// Bit set of [`TRAIN`], [`VAL`] and [`TEST`] per node.
    pub flags: Vec<u8>,
    pub n_classes: usize,
}

impl GraphInstance {
    pub fn validate(&self) -> Result<()> {
        let n = self.topology.n_nodes();
        if self.features.rows() != n || self.targets.len() != n || self.flags.len() != n {
            return Err(PmpError::Shape(format!(
                "{n} nodes but {} feature rows, {} targets, {} flags",
                self.features.rows(),
                self.targets.len(),
                self.flags.len()
            )));
        }
        if let Some(&bad) = self.targets.iter().find(|&&y| y >= self.n_classes) {
            return Err(PmpError::InvalidArgument(format!(
                "target {bad} out of range for {} classes",
                self.n_classes
            )));
        }
        if !self.features.is_finite() {
            return Err(PmpError::InvalidArgument("non-finite features".into()));
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.topology.n_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Indices of nodes whose flags contain `bit`.
    pub fn mask(&self, bit: u8) -> Vec<usize> {
        (0..self.flags.len())
            .filter(|&i| self.flags[i] & bit != 0)
            .collect()
    }

    /// Per-node flag test for `bit`.
    pub fn visible(&self, bit: u8) -> Vec<bool> {
        self.flags.iter().map(|f| f & bit != 0).collect()
    }

    /// Same instance with a different edge set.
    pub fn with_topology(&self, topology: GraphTopology) -> Result<Self> {
        if topology.n_nodes() != self.n_nodes() {
            return Err(PmpError::Shape("topology node count differs".into()));
        }
        Ok(Self {
            topology,
            ..self.clone()
        })
    }
}

/// Draws `count` instances of `spec` from one seeded stream. The community
/// task is transductive and always yields a single graph; its noise edges
/// come from a separate stream so the clean graph does not depend on the
/// ratio.
pub fn generate(spec: &TaskSpec, count: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = match *spec {
        TaskSpec::Whereami {
            grid,
            objects,
            glyphs,
        } => {
            let p = whereami::WhereAmIParams {
                grid,
                objects,
                glyphs,
            };
            (0..count)
                .map(|_| whereami::gen_where_am_i(p, &mut rng)?.to_graph())
                .collect::<Result<Vec<_>>>()?
        }
        TaskSpec::Puzzle { d, image } => (0..count)
            .map(|_| {
                let img = puzzle::synthetic_texture(image, &mut rng);
                puzzle::gen_puzzle(&img, d, &mut rng)?.to_graph()
            })
            .collect::<Result<Vec<_>>>()?,
        TaskSpec::Community {
            nodes,
            communities,
            noise_ratio,
        } => {
            let p = community::CommunityParams {
                nodes,
                communities,
                ..community::CommunityParams::default()
            };
            let g = community::gen_community(p, &mut rng)?;
            let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
            noise_rng.set_stream(2);
            let noisy = g.topology.add_noise_edges(noise_ratio, &mut noise_rng)?;
            vec![g.with_topology(noisy)?]
        }
        TaskSpec::Cora { .. } => {
            return Err(PmpError::InvalidArgument(
                "cora data is loaded from files, not generated".into(),
            ))
        }
    };
    Ok(Dataset {
        task: spec.name().to_string(),
        params: serde_json::to_value(spec)?,
        seed,
        instances,
    })
}
