//! Full models: the policy model and the two fixed-aggregation baselines
//! behind one interface.

use pmp_autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::agent::{
    rollout, AgentDims, AgentParams, PolicyParts, RolloutMode, RolloutOptions, Targets,
};
use crate::config::{Baseline, RunConfig};
use crate::error::{PmpError, Result};
use crate::graph::{init_state, GraphState, GraphTopology, NodeEncoder};
use crate::message::{
    attention_update, mean_pool_update, GateNet, MessageFunctionBank, NodeUpdater,
};
use crate::objective::{mixed_rollout_loss, nll_loss, Decoder, LossReport, Supervision};

/// Borrowed view of one instance at the working precision.
#[derive(Debug, Clone, Copy)]
pub struct InstanceView<'a, F> {
    pub features: &'a Tensor<F>,
    pub topo: &'a GraphTopology,
    pub targets: &'a [usize],
    /// Nodes scored by the loss.
    pub mask: &'a [usize],
    /// Nodes whose label the proposal policy may see.
    pub visible: &'a [bool],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub baseline: Baseline,
    pub steps: usize,
    pub temperature: f64,
    pub beta: f64,
    pub dense_supervision: bool,
    pub encoder: NodeEncoder,
    pub bank: MessageFunctionBank,
    pub updater: NodeUpdater,
    pub agent: Option<AgentParams>,
    pub gate: Option<GateNet>,
    pub decoder: Decoder,
}

impl Model {
    /// Registers all parameters in `store` in a fixed declaration order.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: &RunConfig,
        feature_dim: usize,
        n_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let m = &cfg.model;
        let encoder = NodeEncoder::new(store, feature_dim, m.node_dim, rng);
        let k = match cfg.baseline {
            Baseline::GnnMean => 1,
            Baseline::Pmp | Baseline::GnnAttention => m.k,
        };
        let bank = MessageFunctionBank::new(store, k, m.node_dim, m.message_dim, rng);
        let updater = NodeUpdater::new(store, m.message_dim, m.node_dim, rng);
        let agent = (cfg.baseline == Baseline::Pmp).then(|| {
            AgentParams::new(
                store,
                AgentDims {
                    node_dim: m.node_dim,
                    hidden: m.hidden,
                    policy_hidden: m.policy_hidden,
                    k,
                    n_classes,
                    embed_dim: m.target_embed_dim,
                },
                rng,
            )
        });
        let gate = (cfg.baseline == Baseline::GnnAttention)
            .then(|| GateNet::new(store, k, m.node_dim, m.gate_hidden, rng));
        let decoder = Decoder::new(store, m.node_dim, m.decoder_hidden, n_classes, rng);
        Self {
            baseline: cfg.baseline,
            steps: cfg.steps(),
            temperature: m.temperature,
            beta: m.beta,
            dense_supervision: m.dense_supervision,
            encoder,
            bank,
            updater,
            agent,
            gate,
            decoder,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.decoder.n_classes()
    }

    fn parts(&self) -> Option<PolicyParts<'_>> {
        self.agent.as_ref().map(|agent| PolicyParts {
            agent,
            bank: &self.bank,
            updater: &self.updater,
        })
    }

    fn baseline_states<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        s0: GraphState,
        topo: &GraphTopology,
    ) -> Result<Vec<GraphState>> {
        let mut states = vec![s0];
        for _ in 0..self.steps {
            let s = *states.last().expect("non-empty");
            let next = match &self.gate {
                Some(gate) => {
                    attention_update(tape, store, &s, topo, &self.bank, &self.updater, gate)?
                }
                None => mean_pool_update(tape, store, &s, topo, &self.bank, &self.updater)?,
            };
            states.push(next);
        }
        Ok(states)
    }

    /// Training loss on one instance. `t_switch` is the prior prefix length
    /// for mixed sampling and `hard` selects straight-through samples; both
    /// are ignored by the baselines.
    pub fn loss<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        inst: &InstanceView<'_, F>,
        t_switch: usize,
        hard: bool,
        rng: &mut impl Rng,
    ) -> Result<LossReport> {
        let s0 = init_state(tape, store, inst.features, inst.topo, &self.encoder)?;
        let sup = Supervision {
            targets: inst.targets,
            mask: inst.mask,
            dense: self.dense_supervision,
        };
        match self.parts() {
            Some(parts) => {
                let targets = Targets {
                    labels: inst.targets,
                    visible: inst.visible,
                };
                let opts = RolloutOptions {
                    steps: self.steps,
                    temperature: self.temperature,
                    hard,
                    mode: RolloutMode::Mixed { t_switch },
                    force_action: None,
                };
                mixed_rollout_loss(
                    tape,
                    store,
                    s0,
                    inst.topo,
                    parts,
                    &self.decoder,
                    &opts,
                    t_switch,
                    &targets,
                    &sup,
                    self.beta,
                    rng,
                )
            }
            None => {
                let states = self.baseline_states(tape, store, s0, inst.topo)?;
                nll_loss(tape, store, &states, &sup, &self.decoder)
            }
        }
    }

    /// Final-step log-probabilities from one prior rollout (or the
    /// deterministic baseline pass).
    pub fn predict_log_probs<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        features: &Tensor<F>,
        topo: &GraphTopology,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let s0 = init_state(tape, store, features, topo, &self.encoder)?;
        let last = match self.parts() {
            Some(parts) => {
                let opts = RolloutOptions {
                    steps: self.steps,
                    temperature: self.temperature,
                    hard: true,
                    mode: RolloutMode::Prior,
                    force_action: None,
                };
                let (_, states) = rollout(tape, store, s0, topo, parts, &opts, None, rng)?;
                *states.last().expect("non-empty")
            }
            None => *self
                .baseline_states(tape, store, s0, topo)?
                .last()
                .expect("non-empty"),
        };
        self.decoder.log_probs(tape, store, last.v)
    }

    /// Class probabilities averaged over `samples` prior rollouts; the
    /// rollout for sample `m` uses `rng_for(m)`.
    pub fn predict<F: Scalar, R: Rng>(
        &self,
        store: &ParamStore<F>,
        features: &Tensor<F>,
        topo: &GraphTopology,
        samples: usize,
        mut rng_for: impl FnMut(usize) -> R,
    ) -> Result<Tensor<f64>> {
        if samples == 0 {
            return Err(PmpError::InvalidArgument("need at least one sample".into()));
        }
        // Baselines are deterministic, so one pass suffices.
        let samples = if self.agent.is_some() { samples } else { 1 };
        let mut mean = Tensor::<f64>::zeros(topo.n_nodes(), self.n_classes());
        for m in 0..samples {
            let mut tape = Tape::new();
            let mut rng = rng_for(m);
            let lp = self.predict_log_probs(&mut tape, store, features, topo, &mut rng)?;
            for (acc, &x) in mean.data_mut().iter_mut().zip(tape.value(lp).data()) {
                *acc += x.as_f64().exp() / samples as f64;
            }
        }
        Ok(mean)
    }
}
