//! End-to-end finite-difference check of a model's training loss on a tiny
//! instance with frozen sampling noise.

use std::collections::BTreeMap;

use pmp_autodiff::{grad_check, GradCheckOptions, GradCheckReport, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::Result;
use crate::graph::GraphTopology;
use crate::model::{InstanceView, Model};

/// Failure threshold on the worst relative error.
pub const TOLERANCE: f64 = 1e-4;

const NODES: usize = 3;
const FEATURES: usize = 5;
const CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSettings {
    pub seed: u64,
    /// Entries sampled per parameter tensor.
    pub entries_per_param: usize,
    pub eps: f64,
    pub rel_floor: f64,
    /// Negates the analytic gradient while keeping the loss value. Only
    /// useful to confirm that the check can fail.
    pub flip_gradient_sign: bool,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            entries_per_param: 12,
            eps: 1e-5,
            rel_floor: 1e-5,
            flip_gradient_sign: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOutcome {
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tolerance)
    }

    /// Worst relative error per parameter group, keyed by the first
    /// component of the parameter name.
    pub fn groups(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for p in &self.report.params {
            let group = p.name.split('.').next().unwrap_or(&p.name).to_string();
            let e = out.entry(group).or_insert(0.0f64);
            *e = e.max(p.max_rel_err);
        }
        out
    }
}

/// Runs the check for the model described by `cfg` in 64-bit precision.
/// Samples are relaxed (no straight-through) and the whole trajectory uses
/// the proposal, so the loss is a smooth function of every parameter.
pub fn check_model(cfg: &RunConfig, settings: &GradCheckSettings) -> Result<GradCheckOutcome> {
    cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&mut store, cfg, FEATURES, CLASSES, &mut init_rng);

    let features = Tensor::from_vec(
        NODES,
        FEATURES,
        (0..NODES * FEATURES)
            .map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0)
            .collect(),
    )?;
    let topo = GraphTopology::fully_connected(NODES)?;
    let targets: Vec<usize> = (0..NODES).map(|i| i % CLASSES).collect();
    let mask: Vec<usize> = (0..NODES).collect();
    let visible = vec![true; NODES];
    let view = InstanceView {
        features: &features,
        topo: &topo,
        targets: &targets,
        mask: &mask,
        visible: &visible,
    };

    let opts = GradCheckOptions {
        eps: settings.eps,
        max_entries_per_param: Some(settings.entries_per_param),
        rel_floor: settings.rel_floor,
        seed: settings.seed,
    };
    let noise_seed = settings.seed ^ 0x9e37_79b9;
    let report = grad_check(&store, &opts, |tape: &mut Tape<f64>, store| -> Result<_> {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let loss = model.loss(tape, store, &view, 0, false, &mut rng)?.loss;
        if settings.flip_gradient_sign {
            let value = tape.value(loss).clone();
            let negated = tape.scale(loss, -1.0)?;
            return Ok(tape.straight_through(negated, value)?);
        }
        Ok(loss)
    })?;
    Ok(GradCheckOutcome {
        report,
        tolerance: TOLERANCE,
    })
}
