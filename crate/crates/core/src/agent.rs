//! Per-edge reasoning agents: a shared recurrent cell `B` carrying one hidden
//! row per edge, and a policy network `A` that turns edge summaries into a
//! distribution over the message-function bank.

use pmp_autodiff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::distr::Open01;
use rand::Rng;

use crate::error::{PmpError, Result};
use crate::graph::{GraphState, GraphTopology};
use crate::message::{policy_update, MessageFunctionBank, NodeUpdater};
use crate::nn::{glorot, GruCell, Linear, Segment, SplitLinear};

/// Whether the agent sees ground-truth labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Prior,
    Proposal,
}

/// Ground-truth labels for the proposal policy. Only nodes marked visible
/// contribute their label embedding; the rest look unlabelled.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub labels: &'a [usize],
    pub visible: &'a [bool],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentDims {
    pub node_dim: usize,
    pub hidden: usize,
    pub policy_hidden: usize,
    pub k: usize,
    pub n_classes: usize,
    pub embed_dim: usize,
}

/// Parameters shared by every edge's agent. Input blocks of both `B` and the
/// first layer of `A` are laid out as
/// `[v_dst, v_src, u, emb_dst, emb_src]`, and `A` additionally reads
/// `[h', h_u / |E|]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams {
    pub cell: GruCell,
    pub policy_in: SplitLinear,
    pub policy_out: Linear,
    pub target_embedding: ParamId,
    pub dims: AgentDims,
}

impl AgentParams {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, dims: AgentDims, rng: &mut impl Rng) -> Self {
        let (dv, de, h) = (dims.node_dim, dims.embed_dim, dims.hidden);
        let summary = [dv, dv, dv, de, de];
        let cell = GruCell::new(store, "agent.b", &summary, h, rng);
        let mut policy_widths = summary.to_vec();
        policy_widths.extend([h, h]);
        let policy_in = SplitLinear::new(
            store,
            "agent.a.0",
            &policy_widths,
            dims.policy_hidden,
            true,
            rng,
        );
        let policy_out = Linear::new(
            store,
            "agent.a.1",
            dims.policy_hidden,
            dims.k + 1,
            true,
            rng,
        );
        let target_embedding = store.add("agent.target_embedding", glorot(rng, dims.n_classes, de));
        Self {
            cell,
            policy_in,
            policy_out,
            target_embedding,
            dims,
        }
    }
}

/// Recurrent agent memory: `h` is `|E|×H`, `h_u` is the `1×H` sum of its rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeAgentState {
    pub h: Var,
    pub h_u: Var,
}

impl EdgeAgentState {
    pub fn zeros<F: Scalar>(tape: &mut Tape<F>, n_edges: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            h: tape.constant(Tensor::zeros(n_edges, hidden))?,
            h_u: tape.constant(Tensor::zeros(1, hidden))?,
        })
    }
}

/// Per-edge action distribution over `K + 1` functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyDistribution {
    pub probs: Var,
    pub log_probs: Var,
}

/// Node-level label embeddings, zero for invisible nodes.
fn label_embeddings<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    params: &AgentParams,
    topo: &GraphTopology,
    targets: &Targets<'_>,
) -> Result<Var> {
    let n = topo.n_nodes();
    let c = params.dims.n_classes;
    if targets.labels.len() != n || targets.visible.len() != n {
        return Err(PmpError::Shape(format!(
            "{} labels and {} visibility flags for {n} nodes",
            targets.labels.len(),
            targets.visible.len()
        )));
    }
    let mut onehot = Tensor::zeros(n, c);
    for (i, (&y, &vis)) in targets.labels.iter().zip(targets.visible).enumerate() {
        if y >= c {
            return Err(PmpError::InvalidArgument(format!(
                "label {y} of node {i} out of range for {c} classes"
            )));
        }
        if vis {
            onehot.set(i, y, F::one());
        }
    }
    let onehot = tape.constant(onehot)?;
    let table = tape.param(store, params.target_embedding)?;
    Ok(tape.matmul(onehot, table)?)
}

/// One agent update. The summary of edge `j → i` is
/// `concat(v_i, v_j, u, emb_i, emb_j)`; in prior mode the embedding blocks
/// are absent, which is the same as feeding zeros.
#[allow(clippy::too_many_arguments)]
pub fn agent_step<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    state: &GraphState,
    topo: &GraphTopology,
    agent: &EdgeAgentState,
    params: &AgentParams,
    mode: Mode,
    targets: Option<&Targets<'_>>,
) -> Result<(EdgeAgentState, PolicyDistribution)> {
    let emb = match (mode, targets) {
        (Mode::Proposal, Some(t)) => Some(label_embeddings(tape, store, params, topo, t)?),
        (Mode::Proposal, None) => return Err(PmpError::MissingTarget),
        (Mode::Prior, Some(_)) => return Err(PmpError::TargetInPriorMode),
        (Mode::Prior, None) => None,
    };
    let rows = topo.n_edges();
    let (dst, src) = (topo.targets(), topo.sources());
    let summary = [
        Some(Segment::Gathered(state.v, dst)),
        Some(Segment::Gathered(state.v, src)),
        Some(Segment::Broadcast(state.u)),
        emb.map(|e| Segment::Gathered(e, dst)),
        emb.map(|e| Segment::Gathered(e, src)),
    ];
    let h = params.cell.forward(tape, store, rows, &summary, agent.h)?;
    let h_u = tape.sum_rows(h)?;
    let h_u_scaled = tape.scale(h_u, 1.0 / rows.max(1) as f64)?;

    let mut policy_segments = summary.to_vec();
    policy_segments.push(Some(Segment::Rows(h)));
    policy_segments.push(Some(Segment::Broadcast(h_u_scaled)));
    let a = params
        .policy_in
        .forward(tape, store, rows, &policy_segments)?;
    let a = tape.elu(a)?;
    let scores = params.policy_out.forward(tape, store, a)?;
    let p = tape.softmax(scores)?;
    let mix = 1.0 / (params.dims.k + 2) as f64;
    let probs = tape.affine(p, mix, mix)?;
    let log_probs = tape.log(probs)?;
    Ok((
        EdgeAgentState { h, h_u },
        PolicyDistribution { probs, log_probs },
    ))
}

fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Gumbel-softmax draw per row. Returns the sample and the argmax action of
/// each row. With `hard` the forward value is the exact one-hot of that
/// action while gradients follow the relaxed sample.
pub fn sample_actions<F: Scalar>(
    tape: &mut Tape<F>,
    dist: &PolicyDistribution,
    temperature: f64,
    rng: &mut impl Rng,
    hard: bool,
) -> Result<(Var, Vec<usize>)> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(PmpError::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let [rows, cols] = tape.shape(dist.log_probs);
    let noise: Vec<F> = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            F::lit(-(-u.ln()).ln())
        })
        .collect();
    let noise = tape.constant(Tensor::from_vec(rows, cols, noise)?)?;
    let logits = tape.add(dist.log_probs, noise)?;
    let logits = tape.scale(logits, 1.0 / temperature)?;
    let soft = tape.softmax(logits)?;
    let actions: Vec<usize> = {
        let t = tape.value(logits);
        (0..rows).map(|r| argmax(t.row(r))).collect()
    };
    if !hard {
        return Ok((soft, actions));
    }
    let onehot = Tensor::one_hot(&actions, cols)?;
    Ok((tape.straight_through(soft, onehot)?, actions))
}

/// Sum over edges of the log-probability of each chosen action.
pub fn action_log_prob<F: Scalar>(tape: &Tape<F>, log_probs: Var, actions: &[usize]) -> f64 {
    let t = tape.value(log_probs);
    actions
        .iter()
        .enumerate()
        .map(|(e, &a)| t.get(e, a).as_f64())
        .sum()
}

/// Recorded state of one inference step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub prior: PolicyDistribution,
    pub proposal: Option<PolicyDistribution>,
    pub sample: Var,
    pub actions: Vec<usize>,
    pub log_prior: f64,
    pub log_proposal: Option<f64>,
    /// Which policy the sample was drawn from.
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Which policies run during a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// Only the prior runs and no targets are read.
    Prior,
    /// Both policies run on every step; samples come from the prior for
    /// steps `1..=t_switch` and from the proposal afterwards.
    Mixed { t_switch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOptions {
    pub steps: usize,
    pub temperature: f64,
    pub hard: bool,
    pub mode: RolloutMode,
    /// Overrides the sampled assignment with this function on every edge.
    pub force_action: Option<usize>,
}

/// The pieces of a policy model needed to roll it out.
#[derive(Debug, Clone, Copy)]
pub struct PolicyParts<'a> {
    pub agent: &'a AgentParams,
    pub bank: &'a MessageFunctionBank,
    pub updater: &'a NodeUpdater,
}

/// Runs `steps` rounds of agent update, action sampling and policy-driven
/// message passing. Returns the trajectory and the states `s_0..=s_T`.
#[allow(clippy::too_many_arguments)]
pub fn rollout<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    s0: GraphState,
    topo: &GraphTopology,
    parts: PolicyParts<'_>,
    opts: &RolloutOptions,
    targets: Option<&Targets<'_>>,
    rng: &mut impl Rng,
) -> Result<(Trajectory, Vec<GraphState>)> {
    if opts.steps == 0 {
        return Err(PmpError::InvalidArgument(
            "rollout needs at least one step".into(),
        ));
    }
    let (t_switch, targets) = match (opts.mode, targets) {
        (RolloutMode::Prior, _) => (opts.steps, None),
        (RolloutMode::Mixed { t_switch }, Some(t)) => {
            if t_switch > opts.steps {
                return Err(PmpError::InvalidArgument(format!(
                    "t_switch {t_switch} exceeds {} steps",
                    opts.steps
                )));
            }
            (t_switch, Some(t))
        }
        (RolloutMode::Mixed { .. }, None) => return Err(PmpError::MissingTarget),
    };
    if let Some(k) = opts.force_action {
        if k > parts.bank.k() {
            return Err(PmpError::InvalidArgument(format!(
                "forced action {k} out of range 0..={}",
                parts.bank.k()
            )));
        }
    }
    let hidden = parts.agent.dims.hidden;
    let mut prior_agent = EdgeAgentState::zeros(tape, topo.n_edges(), hidden)?;
    let mut proposal_agent = prior_agent;
    let mut states = vec![s0];
    let mut traj = Trajectory::default();
    for t in 1..=opts.steps {
        let state = *states.last().expect("non-empty");
        let (next_prior, prior) = agent_step(
            tape,
            store,
            &state,
            topo,
            &prior_agent,
            parts.agent,
            Mode::Prior,
            None,
        )?;
        prior_agent = next_prior;
        let proposal = match targets {
            Some(tg) => {
                let (next, q) = agent_step(
                    tape,
                    store,
                    &state,
                    topo,
                    &proposal_agent,
                    parts.agent,
                    Mode::Proposal,
                    Some(tg),
                )?;
                proposal_agent = next;
                Some(q)
            }
            None => None,
        };
        let mode = if t <= t_switch {
            Mode::Prior
        } else {
            Mode::Proposal
        };
        let source = match (mode, proposal) {
            (Mode::Proposal, Some(q)) => q,
            _ => prior,
        };
        let (mut sample, mut actions) =
            sample_actions(tape, &source, opts.temperature, rng, opts.hard)?;
        if let Some(k) = opts.force_action {
            actions = vec![k; topo.n_edges()];
            sample = tape.constant(Tensor::one_hot(&actions, parts.bank.size())?)?;
        }
        let log_prior = action_log_prob(tape, prior.log_probs, &actions);
        let log_proposal = proposal.map(|q| action_log_prob(tape, q.log_probs, &actions));
        let next = policy_update(tape, store, &state, topo, parts.bank, parts.updater, sample)?;
        states.push(next);
        traj.steps.push(TrajectoryStep {
            prior,
            proposal,
            sample,
            actions,
            log_prior,
            log_proposal,
            mode,
        });
    }
    Ok((traj, states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{init_state, NodeEncoder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DIMS: AgentDims = AgentDims {
        node_dim: 6,
        hidden: 5,
        policy_hidden: 7,
        k: 4,
        n_classes: 3,
        embed_dim: 4,
    };

    struct Fixture {
        store: ParamStore<f64>,
        encoder: NodeEncoder,
        agent: AgentParams,
        bank: MessageFunctionBank,
        updater: NodeUpdater,
        topo: GraphTopology,
        features: Tensor<f64>,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = NodeEncoder::new(&mut store, 3, DIMS.node_dim, &mut rng);
        let agent = AgentParams::new(&mut store, DIMS, &mut rng);
        let bank = MessageFunctionBank::new(&mut store, DIMS.k, DIMS.node_dim, 6, &mut rng);
        let updater = NodeUpdater::new(&mut store, 6, DIMS.node_dim, &mut rng);
        let topo = GraphTopology::fully_connected(4).unwrap();
        let features = glorot(&mut rng, 4, 3);
        Fixture {
            store,
            encoder,
            agent,
            bank,
            updater,
            topo,
            features,
        }
    }

    #[test]
    fn proposal_requires_targets_and_prior_rejects_them() {
        let f = fixture(0);
        let mut tape = Tape::new();
        let s = init_state(&mut tape, &f.store, &f.features, &f.topo, &f.encoder).unwrap();
        let a = EdgeAgentState::zeros(&mut tape, f.topo.n_edges(), DIMS.hidden).unwrap();
        let err = agent_step(
            &mut tape,
            &f.store,
            &s,
            &f.topo,
            &a,
            &f.agent,
            Mode::Proposal,
            None,
        );
        assert!(matches!(err, Err(PmpError::MissingTarget)));
        let labels = [0, 1, 2, 0];
        let visible = [true; 4];
        let t = Targets {
            labels: &labels,
            visible: &visible,
        };
        let err = agent_step(
            &mut tape,
            &f.store,
            &s,
            &f.topo,
            &a,
            &f.agent,
            Mode::Prior,
            Some(&t),
        );
        assert!(matches!(err, Err(PmpError::TargetInPriorMode)));
    }

    #[test]
    fn zeroed_output_layer_gives_uniform_policy() {
        let mut f = fixture(1);
        *f.store.get_mut(f.agent.policy_out.weight) = Tensor::zeros(DIMS.policy_hidden, DIMS.k + 1);
        *f.store.get_mut(f.agent.policy_out.bias.unwrap()) = Tensor::zeros(1, DIMS.k + 1);
        let mut tape = Tape::new();
        let s = init_state(&mut tape, &f.store, &f.features, &f.topo, &f.encoder).unwrap();
        let a = EdgeAgentState::zeros(&mut tape, f.topo.n_edges(), DIMS.hidden).unwrap();
        let (_, d) = agent_step(
            &mut tape,
            &f.store,
            &s,
            &f.topo,
            &a,
            &f.agent,
            Mode::Prior,
            None,
        )
        .unwrap();
        for &p in tape.value(d.probs).data() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn h_u_is_row_sum_of_h() {
        let f = fixture(2);
        let mut tape = Tape::new();
        let s = init_state(&mut tape, &f.store, &f.features, &f.topo, &f.encoder).unwrap();
        let a = EdgeAgentState::zeros(&mut tape, f.topo.n_edges(), DIMS.hidden).unwrap();
        let (next, _) = agent_step(
            &mut tape,
            &f.store,
            &s,
            &f.topo,
            &a,
            &f.agent,
            Mode::Prior,
            None,
        )
        .unwrap();
        let h = tape.value(next.h);
        let hu = tape.value(next.h_u);
        for c in 0..DIMS.hidden {
            let want: f64 = (0..h.rows()).map(|r| h.get(r, c)).sum();
            assert_eq!(hu.get(0, c), want);
        }
    }

    #[test]
    fn row_sum_example() {
        let mut tape = Tape::<f64>::new();
        let h = tape
            .constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
            .unwrap();
        let hu = tape.sum_rows(h).unwrap();
        assert_eq!(tape.value(hu).data(), &[4.0, 6.0]);
    }

    #[test]
    fn zero_embedding_makes_proposal_equal_prior() {
        let mut f = fixture(3);
        *f.store.get_mut(f.agent.target_embedding) = Tensor::zeros(DIMS.n_classes, DIMS.embed_dim);
        let mut tape = Tape::new();
        let s = init_state(&mut tape, &f.store, &f.features, &f.topo, &f.encoder).unwrap();
        let a = EdgeAgentState::zeros(&mut tape, f.topo.n_edges(), DIMS.hidden).unwrap();
        let labels = [2, 1, 0, 1];
        let visible = [true, false, true, true];
        let t = Targets {
            labels: &labels,
            visible: &visible,
        };
        let (_, p) = agent_step(
            &mut tape,
            &f.store,
            &s,
            &f.topo,
            &a,
            &f.agent,
            Mode::Prior,
            None,
        )
        .unwrap();
        let (_, q) = agent_step(
            &mut tape,
            &f.store,
            &s,
            &f.topo,
            &a,
            &f.agent,
            Mode::Proposal,
            Some(&t),
        )
        .unwrap();
        assert_eq!(tape.value(p.probs), tape.value(q.probs));
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let probs = tape.constant(Tensor::row_vector(vec![0.5, 0.5])).unwrap();
        let log_probs = tape.log(probs).unwrap();
        let d = PolicyDistribution { probs, log_probs };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_actions(&mut tape, &d, 0.0, &mut rng, true).is_err());
        assert!(sample_actions(&mut tape, &d, -1.0, &mut rng, false).is_err());
    }

    #[test]
    fn forced_f0_rollout_is_a_fixed_point() {
        let f = fixture(4);
        let mut tape = Tape::new();
        let s = init_state(&mut tape, &f.store, &f.features, &f.topo, &f.encoder).unwrap();
        let parts = PolicyParts {
            agent: &f.agent,
            bank: &f.bank,
            updater: &f.updater,
        };
        let opts = RolloutOptions {
            steps: 1,
            temperature: 1.0,
            hard: true,
            mode: RolloutMode::Prior,
            force_action: Some(0),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (traj, states) = rollout(
            &mut tape, &f.store, s, &f.topo, parts, &opts, None, &mut rng,
        )
        .unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(tape.value(states[1].v), tape.value(states[0].v));
    }

    #[test]
    fn mixed_rollout_records_both_policies() {
        let f = fixture(5);
        let mut tape = Tape::new();
        let s = init_state(&mut tape, &f.store, &f.features, &f.topo, &f.encoder).unwrap();
        let parts = PolicyParts {
            agent: &f.agent,
            bank: &f.bank,
            updater: &f.updater,
        };
        let labels = [0, 1, 2, 0];
        let visible = [true; 4];
        let t = Targets {
            labels: &labels,
            visible: &visible,
        };
        let opts = RolloutOptions {
            steps: 3,
            temperature: 1.0,
            hard: true,
            mode: RolloutMode::Mixed { t_switch: 1 },
            force_action: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (traj, states) = rollout(
            &mut tape,
            &f.store,
            s,
            &f.topo,
            parts,
            &opts,
            Some(&t),
            &mut rng,
        )
        .unwrap();
        assert_eq!(states.len(), 4);
        let modes: Vec<Mode> = traj.steps.iter().map(|s| s.mode).collect();
        assert_eq!(modes, [Mode::Prior, Mode::Proposal, Mode::Proposal]);
        assert!(traj.steps.iter().all(|s| s.proposal.is_some()));
        for step in &traj.steps {
            let z = tape.value(step.sample);
            for r in 0..z.rows() {
                assert_eq!(z.row(r).iter().sum::<f64>(), 1.0);
            }
        }
        let bad = RolloutOptions {
            mode: RolloutMode::Mixed { t_switch: 4 },
            ..opts
        };
        assert!(rollout(
            &mut tape,
            &f.store,
            s,
            &f.topo,
            parts,
            &bad,
            Some(&t),
            &mut rng
        )
        .is_err());
    }
}
