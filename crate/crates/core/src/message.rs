//! Message-function bank and the node updates built on it: the policy-driven
//! update plus the mean-pool and sigmoid-gated baselines.

use pmp_autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{PmpError, Result};
use crate::graph::{GraphState, GraphTopology};
use crate::nn::{Linear, Mlp, Segment, SplitLinear};

/// One learned pairwise function `f_k(v_i, v_j)`: a two-layer MLP on
/// `concat(v_i, v_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageFn {
    pub first: SplitLinear,
    pub second: Linear,
}

impl MessageFn {
    fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        rows: usize,
        receiver: Segment<'_>,
        sender: Segment<'_>,
    ) -> Result<Var> {
        let h = self
            .first
            .forward(tape, store, rows, &[Some(receiver), Some(sender)])?;
        let h = tape.elu(h)?;
        self.second.forward(tape, store, h)
    }
}

/// `K` learned message functions plus the fixed zero function at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageFunctionBank {
    functions: Vec<MessageFn>,
    node_dim: usize,
    message_dim: usize,
}

impl MessageFunctionBank {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        k: usize,
        node_dim: usize,
        message_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let functions = (1..=k)
            .map(|i| MessageFn {
                first: SplitLinear::new(
                    store,
                    &format!("bank.f{i}.0"),
                    &[node_dim, node_dim],
                    message_dim,
                    true,
                    rng,
                ),
                second: Linear::new(
                    store,
                    &format!("bank.f{i}.1"),
                    message_dim,
                    message_dim,
                    true,
                    rng,
                ),
            })
            .collect();
        Self {
            functions,
            node_dim,
            message_dim,
        }
    }

    /// Number of learned functions `K`.
    pub fn k(&self) -> usize {
        self.functions.len()
    }

    /// Bank size including `f_0`.
    pub fn size(&self) -> usize {
        self.functions.len() + 1
    }

    pub fn node_dim(&self) -> usize {
        self.node_dim
    }

    pub fn message_dim(&self) -> usize {
        self.message_dim
    }

    /// `f_k(v_i, v_j)` row by row; `k = 0` is the zero message.
    pub fn apply_message<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        k: usize,
        v_i: Var,
        v_j: Var,
    ) -> Result<Var> {
        if k > self.k() {
            return Err(PmpError::InvalidArgument(format!(
                "message function {k} out of range 0..={}",
                self.k()
            )));
        }
        let (si, sj) = (tape.shape(v_i), tape.shape(v_j));
        if si != sj || si[1] != self.node_dim {
            return Err(PmpError::Shape(format!(
                "message inputs {si:?} and {sj:?}, node width {}",
                self.node_dim
            )));
        }
        if k == 0 {
            return Ok(tape.constant(Tensor::zeros(si[0], self.message_dim))?);
        }
        self.functions[k - 1].forward(tape, store, si[0], Segment::Rows(v_i), Segment::Rows(v_j))
    }

    /// `f_k(v_dst, v_src)` on every edge for each learned `k = 1..=K`.
    pub fn edge_messages<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        v: Var,
        topo: &GraphTopology,
        which: std::ops::RangeInclusive<usize>,
    ) -> Result<Vec<Var>> {
        let rows = topo.n_edges();
        which
            .map(|k| {
                self.functions[k - 1].forward(
                    tape,
                    store,
                    rows,
                    Segment::Gathered(v, topo.targets()),
                    Segment::Gathered(v, topo.sources()),
                )
            })
            .collect()
    }
}

/// Factor applied to the initial weights of the combiner's output layer.
pub const COMBINER_INIT_SCALE: f64 = 0.1;

/// Residual node update `v ← v + combiner(agg)` followed by
/// `u ← u + W_u · mean(v)`. Every layer is bias-free, so a zero aggregate
/// leaves `V` untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeUpdater {
    pub combiner: Mlp,
    pub global: Linear,
}

impl NodeUpdater {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        message_dim: usize,
        node_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let combiner = Mlp::new(
            store,
            "combiner",
            &[message_dim, node_dim, node_dim],
            false,
            rng,
        );
        // Messages are summed over neighbours and the update is residual, so
        // a full-size initial update compounds over steps on dense graphs.
        if let Some(last) = combiner.layers.last() {
            let scale = F::lit(COMBINER_INIT_SCALE);
            store
                .get_mut(last.weight)
                .data_mut()
                .iter_mut()
                .for_each(|w| *w = *w * scale);
        }
        Self {
            combiner,
            global: Linear::new(store, "global", node_dim, node_dim, false, rng),
        }
    }

    pub fn apply<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        state: &GraphState,
        aggregate: Var,
    ) -> Result<GraphState> {
        let delta = self.combiner.forward(tape, store, aggregate)?;
        let v = tape.add(state.v, delta)?;
        let pooled = tape.mean_rows(v)?;
        let du = self.global.forward(tape, store, pooled)?;
        let u = tape.add(state.u, du)?;
        Ok(GraphState {
            v,
            u,
            step: state.step + 1,
        })
    }
}

fn check_assignment<F: Scalar>(
    tape: &Tape<F>,
    assignment: Var,
    topo: &GraphTopology,
    bank: &MessageFunctionBank,
) -> Result<()> {
    let want = [topo.n_edges(), bank.size()];
    let got = tape.shape(assignment);
    if got != want {
        return Err(PmpError::Shape(format!(
            "assignment is {got:?}, expected {want:?} (edges × functions)"
        )));
    }
    let t = tape.value(assignment);
    for r in 0..t.rows() {
        let row = t.row(r);
        let total: f64 = row.iter().map(|x| x.as_f64()).sum();
        if row.iter().any(|x| x.as_f64() < 0.0) || (total - 1.0).abs() > 1e-4 {
            return Err(PmpError::InvalidArgument(format!(
                "assignment row {r} is not a distribution: {row:?}"
            )));
        }
    }
    Ok(())
}

/// Weighted message `Σ_k w[:, k] ⊙ m_k` over the learned functions, where
/// column `offset + k - 1` of `weights` scales function `k`.
fn mix_messages<F: Scalar>(
    tape: &mut Tape<F>,
    weights: Var,
    offset: usize,
    messages: &[Var],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (i, &m) in messages.iter().enumerate() {
        let w = tape.slice_cols(weights, offset + i, 1)?;
        let term = tape.mul(m, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| PmpError::InvalidArgument("empty message bank".into()))
}

/// One policy-driven step: every edge sends the mixture of message
/// functions given by its assignment row (a one-hot row picks a single
/// function), messages are summed per destination and folded in through
/// the residual updater.
pub fn policy_update<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    state: &GraphState,
    topo: &GraphTopology,
    bank: &MessageFunctionBank,
    updater: &NodeUpdater,
    assignment: Var,
) -> Result<GraphState> {
    check_assignment(tape, assignment, topo, bank)?;
    let messages = bank.edge_messages(tape, store, state.v, topo, 1..=bank.k())?;
    let mixed = mix_messages(tape, assignment, 1, &messages)?;
    let agg = tape.scatter_add_rows(mixed, topo.targets(), topo.n_nodes())?;
    updater.apply(tape, store, state, agg)
}

/// Baseline: every edge uses `f_1`, messages are averaged per destination
/// (an isolated node aggregates to zero).
pub fn mean_pool_update<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    state: &GraphState,
    topo: &GraphTopology,
    bank: &MessageFunctionBank,
    updater: &NodeUpdater,
) -> Result<GraphState> {
    let messages = bank.edge_messages(tape, store, state.v, topo, 1..=1)?;
    let sum = tape.scatter_add_rows(messages[0], topo.targets(), topo.n_nodes())?;
    let inv_deg: Vec<F> = (0..topo.n_nodes())
        .map(|i| match topo.in_degree(i) {
            0 => F::zero(),
            d => F::one() / F::lit(d as f64),
        })
        .collect();
    let inv_deg = tape.constant(Tensor::from_vec(topo.n_nodes(), 1, inv_deg)?)?;
    let agg = tape.mul(sum, inv_deg)?;
    updater.apply(tape, store, state, agg)
}

/// Per-edge sigmoid gates over the `K` learned functions.
#[derive(Debug, Clone, PartialEq)]
pub struct GateNet {
    pub first: SplitLinear,
    pub second: Linear,
}

impl GateNet {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        k: usize,
        node_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            first: SplitLinear::new(store, "gate.0", &[node_dim, node_dim], hidden, true, rng),
            second: Linear::new(store, "gate.1", hidden, k, true, rng),
        }
    }

    /// Gate values in `(0, 1)`, one row per edge and one column per learned
    /// function.
    pub fn gates<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        state: &GraphState,
        topo: &GraphTopology,
    ) -> Result<Var> {
        let h = self.first.forward(
            tape,
            store,
            topo.n_edges(),
            &[
                Some(Segment::Gathered(state.v, topo.targets())),
                Some(Segment::Gathered(state.v, topo.sources())),
            ],
        )?;
        let h = tape.elu(h)?;
        let g = self.second.forward(tape, store, h)?;
        Ok(tape.sigmoid(g)?)
    }
}

/// Baseline: `message = Σ_k gate_k ⊙ f_k`, summed per destination.
pub fn attention_update<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    state: &GraphState,
    topo: &GraphTopology,
    bank: &MessageFunctionBank,
    updater: &NodeUpdater,
    gate: &GateNet,
) -> Result<GraphState> {
    let gates = gate.gates(tape, store, state, topo)?;
    attention_update_with_gates(tape, store, state, topo, bank, updater, gates)
}

/// [`attention_update`] with externally supplied `|E|×K` gate values.
pub fn attention_update_with_gates<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    state: &GraphState,
    topo: &GraphTopology,
    bank: &MessageFunctionBank,
    updater: &NodeUpdater,
    gates: Var,
) -> Result<GraphState> {
    let want = [topo.n_edges(), bank.k()];
    if tape.shape(gates) != want {
        return Err(PmpError::Shape(format!(
            "gates are {:?}, expected {want:?}",
            tape.shape(gates)
        )));
    }
    let messages = bank.edge_messages(tape, store, state.v, topo, 1..=bank.k())?;
    let mixed = mix_messages(tape, gates, 0, &messages)?;
    let agg = tape.scatter_add_rows(mixed, topo.targets(), topo.n_nodes())?;
    updater.apply(tape, store, state, agg)
}
