//! Training objective: decoder likelihood at every step, analytic KL between
//! proposal and prior along the sampled trajectory, and the mixed
//! prior/proposal rollout with a clipped importance weight.

use pmp_autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::agent::{rollout, PolicyParts, RolloutMode, RolloutOptions, Targets, Trajectory};
use crate::error::{PmpError, Result};
use crate::graph::{GraphState, GraphTopology};
use crate::nn::Mlp;

/// Bounds applied to the mixed-sampling importance weight.
pub const WEIGHT_CLIP: (f64, f64) = (0.1, 10.0);

/// Per-node classifier `f_o` on node attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub mlp: Mlp,
}

impl Decoder {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        node_dim: usize,
        hidden: usize,
        n_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            mlp: Mlp::new(store, "decoder", &[node_dim, hidden, n_classes], true, rng),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.mlp.out_dim()
    }

    /// Log-probabilities for every node.
    pub fn log_probs<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        v: Var,
    ) -> Result<Var> {
        let logits = self.mlp.forward(tape, store, v)?;
        Ok(tape.log_softmax(logits)?)
    }
}

/// Mean over `mask` of `log softmax(f_o(v_i))[target_i]`.
pub fn step_log_likelihood<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    state: &GraphState,
    targets: &[usize],
    mask: &[usize],
    decoder: &Decoder,
) -> Result<Var> {
    if mask.is_empty() {
        return Err(PmpError::EmptyMask);
    }
    let n = tape.shape(state.v)[0];
    if targets.len() != n {
        return Err(PmpError::Shape(format!(
            "{} targets for {n} nodes",
            targets.len()
        )));
    }
    let labels: Vec<usize> = mask
        .iter()
        .map(|&i| {
            targets
                .get(i)
                .copied()
                .ok_or_else(|| PmpError::InvalidArgument(format!("mask node {i} out of range")))
        })
        .collect::<Result<_>>()?;
    let c = decoder.n_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(PmpError::InvalidArgument(format!(
            "target {bad} out of range for {c} classes"
        )));
    }
    let v = tape.gather_rows(state.v, mask)?;
    let logp = decoder.log_probs(tape, store, v)?;
    let pick = tape.constant(Tensor::one_hot(&labels, c)?)?;
    let picked = tape.mul(logp, pick)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, 1.0 / mask.len() as f64)?)
}

/// `Σ_e Σ_k q (log q − log π)` for one step.
fn step_kl<F: Scalar>(tape: &mut Tape<F>, q: Var, log_q: Var, log_pi: Var) -> Result<Var> {
    let diff = tape.sub(log_q, log_pi)?;
    let terms = tape.mul(q, diff)?;
    Ok(tape.sum(terms)?)
}

/// Per-step analytic KL(q ‖ π) summed over edges.
pub fn trajectory_step_kls<F: Scalar>(tape: &mut Tape<F>, traj: &Trajectory) -> Result<Vec<Var>> {
    traj.steps
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let q = s
                .proposal
                .ok_or(PmpError::MissingProposal { step: t + 1 })?;
            step_kl(tape, q.probs, q.log_probs, s.prior.log_probs)
        })
        .collect()
}

/// Total analytic KL(q ‖ π) over all steps and edges.
pub fn trajectory_kl<F: Scalar>(tape: &mut Tape<F>, traj: &Trajectory) -> Result<Var> {
    let kls = trajectory_step_kls(tape, traj)?;
    let mut total = tape.scalar(0.0)?;
    for k in kls {
        total = tape.add(total, k)?;
    }
    Ok(total)
}

/// Loss `w · (Σ_t nll_t + β · KL)` and its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: Var,
    /// Negative log-likelihood of each supervised step `1..=T`; unsupervised
    /// intermediate steps hold `0`.
    pub step_nll: Vec<f64>,
    pub step_kl: Vec<f64>,
    pub kl: f64,
    /// Unweighted `Σ_t nll_t + β · KL`.
    pub total: f64,
    pub weight: f64,
    /// Final-step decoder log-probabilities for every node.
    pub final_log_probs: Var,
}

impl LossReport {
    pub fn final_nll(&self) -> f64 {
        self.step_nll.last().copied().unwrap_or(0.0)
    }
}

/// Supervision settings shared by every loss.
#[derive(Debug, Clone, Copy)]
pub struct Supervision<'a> {
    pub targets: &'a [usize],
    pub mask: &'a [usize],
    /// Supervise every step (`true`) or only the last.
    pub dense: bool,
}

fn supervised_nll<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    states: &[GraphState],
    sup: &Supervision<'_>,
    decoder: &Decoder,
) -> Result<(Option<Var>, Vec<f64>)> {
    let t_max = states.len() - 1;
    let mut total: Option<Var> = None;
    let mut per_step = vec![0.0; t_max];
    for t in 1..=t_max {
        if !sup.dense && t != t_max {
            continue;
        }
        let ll = step_log_likelihood(tape, store, &states[t], sup.targets, sup.mask, decoder)?;
        let nll = tape.scale(ll, -1.0)?;
        per_step[t - 1] = tape.item(nll)?.as_f64();
        total = Some(match total {
            Some(x) => tape.add(x, nll)?,
            None => nll,
        });
    }
    Ok((total, per_step))
}

/// Negative ELBO for a trajectory that recorded both policies on every step.
#[allow(clippy::too_many_arguments)]
pub fn elbo_loss<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    traj: &Trajectory,
    states: &[GraphState],
    sup: &Supervision<'_>,
    decoder: &Decoder,
    beta: f64,
    weight: f64,
) -> Result<LossReport> {
    if states.len() != traj.len() + 1 || traj.is_empty() {
        return Err(PmpError::InvalidArgument(format!(
            "{} states for a {}-step trajectory",
            states.len(),
            traj.len()
        )));
    }
    let step_kls = trajectory_step_kls(tape, traj)?;
    let (nll, step_nll) = supervised_nll(tape, store, states, sup, decoder)?;
    let nll = nll.expect("at least one supervised step");
    let mut kl = tape.scalar(0.0)?;
    for &k in &step_kls {
        kl = tape.add(kl, k)?;
    }
    let step_kl = step_kls
        .iter()
        .map(|&k| tape.item(k).map(|x| x.as_f64()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let kl_value = tape.item(kl)?.as_f64();
    let weighted_kl = tape.scale(kl, beta)?;
    let total = tape.add(nll, weighted_kl)?;
    let total_value = tape.item(total)?.as_f64();
    let loss = if weight == 1.0 {
        total
    } else {
        tape.scale(total, weight)?
    };
    let last = states.last().expect("non-empty");
    let final_log_probs = decoder.log_probs(tape, store, last.v)?;
    Ok(LossReport {
        loss,
        step_nll,
        step_kl,
        kl: kl_value,
        total: total_value,
        weight,
        final_log_probs,
    })
}

/// Loss for a model without a policy: supervised NLL only, KL is zero.
pub fn nll_loss<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    states: &[GraphState],
    sup: &Supervision<'_>,
    decoder: &Decoder,
) -> Result<LossReport> {
    if states.len() < 2 {
        return Err(PmpError::InvalidArgument(
            "need at least one update step".into(),
        ));
    }
    let (nll, step_nll) = supervised_nll(tape, store, states, sup, decoder)?;
    let loss = nll.expect("at least one supervised step");
    let total = tape.item(loss)?.as_f64();
    let last = states.last().expect("non-empty");
    let final_log_probs = decoder.log_probs(tape, store, last.v)?;
    Ok(LossReport {
        loss,
        step_kl: vec![0.0; step_nll.len()],
        step_nll,
        kl: 0.0,
        total,
        weight: 1.0,
        final_log_probs,
    })
}

/// `exp(Σ_{prior steps} (log q(z_t) − log π(z_t)))`, clipped.
pub fn importance_weight(traj: &Trajectory, t_switch: usize) -> Result<f64> {
    let mut log_w = 0.0;
    for (t, step) in traj.steps.iter().take(t_switch).enumerate() {
        let lq = step
            .log_proposal
            .ok_or(PmpError::MissingProposal { step: t + 1 })?;
        log_w += lq - step.log_prior;
    }
    Ok(log_w.exp().clamp(WEIGHT_CLIP.0, WEIGHT_CLIP.1))
}

/// Rolls out with the prior for `t_switch` steps and the proposal after
/// that, then scores the trajectory with the negative ELBO scaled by the
/// detached, clipped importance weight.
#[allow(clippy::too_many_arguments)]
pub fn mixed_rollout_loss<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    s0: GraphState,
    topo: &GraphTopology,
    parts: PolicyParts<'_>,
    decoder: &Decoder,
    opts: &RolloutOptions,
    t_switch: usize,
    targets: &Targets<'_>,
    sup: &Supervision<'_>,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<LossReport> {
    if t_switch > opts.steps {
        return Err(PmpError::InvalidArgument(format!(
            "t_switch {t_switch} exceeds {} steps",
            opts.steps
        )));
    }
    let opts = RolloutOptions {
        mode: RolloutMode::Mixed { t_switch },
        ..*opts
    };
    let (traj, states) = rollout(tape, store, s0, topo, parts, &opts, Some(targets), rng)?;
    let weight = importance_weight(&traj, t_switch)?;
    elbo_loss(tape, store, &traj, &states, sup, decoder, beta, weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{Mode, PolicyDistribution, TrajectoryStep};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(tape: &mut Tape<f64>, rows: &[Vec<f64>]) -> PolicyDistribution {
        let probs = tape.constant(Tensor::from_rows(rows).unwrap()).unwrap();
        let log_probs = tape.log(probs).unwrap();
        PolicyDistribution { probs, log_probs }
    }

    fn one_step(tape: &mut Tape<f64>, q: &[Vec<f64>], p: &[Vec<f64>]) -> Trajectory {
        let prior = dist(tape, p);
        let proposal = dist(tape, q);
        Trajectory {
            steps: vec![TrajectoryStep {
                prior,
                proposal: Some(proposal),
                sample: prior.probs,
                actions: vec![0; q.len()],
                log_prior: 0.0,
                log_proposal: Some(0.0),
                mode: Mode::Proposal,
            }],
        }
    }

    #[test]
    fn kl_single_edge_example() {
        let mut tape = Tape::new();
        let traj = one_step(&mut tape, &[vec![0.5, 0.5]], &[vec![0.25, 0.75]]);
        let kl = trajectory_kl(&mut tape, &traj).unwrap();
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((tape.item(kl).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn kl_of_identical_policies_is_zero() {
        let mut tape = Tape::new();
        let rows = vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3]];
        let traj = one_step(&mut tape, &rows, &rows);
        let kl = trajectory_kl(&mut tape, &traj).unwrap();
        assert_eq!(tape.item(kl).unwrap(), 0.0);
    }

    #[test]
    fn kl_without_proposal_is_an_error() {
        let mut tape = Tape::new();
        let mut traj = one_step(&mut tape, &[vec![0.5, 0.5]], &[vec![0.5, 0.5]]);
        traj.steps[0].proposal = None;
        assert!(matches!(
            trajectory_kl(&mut tape, &traj),
            Err(PmpError::MissingProposal { step: 1 })
        ));
    }

    fn decoder_fixture(c: usize) -> (ParamStore<f64>, Decoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let decoder = Decoder::new(&mut store, 3, 5, c, &mut rng);
        (store, decoder)
    }

    #[test]
    fn uniform_logits_give_log_one_over_c() {
        let (mut store, decoder) = decoder_fixture(4);
        let last = decoder.mlp.layers.last().unwrap();
        *store.get_mut(last.weight) = Tensor::zeros(5, 4);
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::full(3, 3, 0.7)).unwrap();
        let u = tape.constant(Tensor::zeros(1, 3)).unwrap();
        let s = GraphState { v, u, step: 0 };
        let ll =
            step_log_likelihood(&mut tape, &store, &s, &[0, 3, 1], &[0, 1, 2], &decoder).unwrap();
        assert!((tape.item(ll).unwrap() - (0.25f64).ln()).abs() < 1e-12);
        assert!((tape.item(ll).unwrap() + 1.3863).abs() < 1e-4);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let (store, decoder) = decoder_fixture(2);
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let u = tape.constant(Tensor::zeros(1, 3)).unwrap();
        let s = GraphState { v, u, step: 0 };
        assert!(matches!(
            step_log_likelihood(&mut tape, &store, &s, &[0, 1], &[], &decoder),
            Err(PmpError::EmptyMask)
        ));
    }

    #[test]
    fn importance_weight_is_clipped() {
        let mut tape = Tape::new();
        let mut traj = one_step(&mut tape, &[vec![0.5, 0.5]], &[vec![0.5, 0.5]]);
        traj.steps[0].log_proposal = Some(50.0);
        assert_eq!(importance_weight(&traj, 1).unwrap(), 10.0);
        traj.steps[0].log_proposal = Some(-50.0);
        assert_eq!(importance_weight(&traj, 1).unwrap(), 0.1);
        assert_eq!(importance_weight(&traj, 0).unwrap(), 1.0);
    }
}
