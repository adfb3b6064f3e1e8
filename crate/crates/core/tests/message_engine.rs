use pmp_autodiff::{grad_check, GradCheckOptions, ParamStore, Tape, Tensor, Var};
use pmp_core::graph::{GraphState, GraphTopology};
use pmp_core::message::{
    attention_update_with_gates, mean_pool_update, policy_update, GateNet, MessageFunctionBank,
    NodeUpdater,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DV: usize = 5;
const DM: usize = 4;

struct Engine {
    store: ParamStore<f64>,
    bank: MessageFunctionBank,
    updater: NodeUpdater,
}

fn engine(k: usize, seed: u64) -> Engine {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bank = MessageFunctionBank::new(&mut store, k, DV, DM, &mut rng);
    let updater = NodeUpdater::new(&mut store, DM, DV, &mut rng);
    Engine {
        store,
        bank,
        updater,
    }
}

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn state(tape: &mut Tape<f64>, v: &Tensor<f64>) -> GraphState {
    GraphState {
        v: tape.constant(v.clone()).unwrap(),
        u: tape.constant(Tensor::zeros(1, v.cols())).unwrap(),
        step: 0,
    }
}

fn onehots(tape: &mut Tape<f64>, actions: &[usize], size: usize) -> Var {
    tape.constant(Tensor::one_hot(actions, size).unwrap())
        .unwrap()
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn zero_function_sends_zero_messages() {
    let e = engine(3, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let vi = tape.constant(random(4, DV, &mut rng)).unwrap();
    let vj = tape.constant(random(4, DV, &mut rng)).unwrap();
    let m = e
        .bank
        .apply_message(&mut tape, &e.store, 0, vi, vj)
        .unwrap();
    assert_eq!(tape.shape(m), [4, DM]);
    assert!(tape.value(m).data().iter().all(|&x| x == 0.0));
}

#[test]
fn learned_functions_map_zero_inputs_to_zero_at_init() {
    // Biases start at zero and ELU(0) = 0.
    let e = engine(2, 3);
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(3, DV)).unwrap();
    for k in 1..=2 {
        let m = e.bank.apply_message(&mut tape, &e.store, k, z, z).unwrap();
        assert!(tape.value(m).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn distinct_functions_give_distinct_messages() {
    let e = engine(2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tape = Tape::new();
    let vi = tape.constant(random(3, DV, &mut rng)).unwrap();
    let vj = tape.constant(random(3, DV, &mut rng)).unwrap();
    let m1 = e
        .bank
        .apply_message(&mut tape, &e.store, 1, vi, vj)
        .unwrap();
    let m2 = e
        .bank
        .apply_message(&mut tape, &e.store, 2, vi, vj)
        .unwrap();
    assert_ne!(tape.value(m1), tape.value(m2));
}

#[test]
fn out_of_range_function_is_rejected() {
    let e = engine(2, 0);
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(1, DV)).unwrap();
    assert!(e.bank.apply_message(&mut tape, &e.store, 3, v, v).is_err());
}

#[test]
fn all_zero_assignment_is_a_bitwise_fixed_point() {
    let e = engine(4, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let topo = GraphTopology::fully_connected(6).unwrap();
    let v0 = random(6, DV, &mut rng);
    let mut tape = Tape::new();
    let mut s = state(&mut tape, &v0);
    for _ in 0..5 {
        let a = onehots(&mut tape, &vec![0; topo.n_edges()], e.bank.size());
        s = policy_update(&mut tape, &e.store, &s, &topo, &e.bank, &e.updater, a).unwrap();
    }
    assert_eq!(s.step, 5);
    assert_eq!(tape.value(s.v), &v0);
}

#[test]
fn update_only_touches_receivers_of_active_edges() {
    let e = engine(2, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    // Path 0 → 1 → 2 plus 3 → 2.
    let topo = GraphTopology::new(4, vec![(0, 1), (1, 2), (3, 2)]).unwrap();
    let v0 = random(4, DV, &mut rng);
    let mut tape = Tape::new();
    let s = state(&mut tape, &v0);
    let a = onehots(&mut tape, &[1, 0, 0], e.bank.size());
    let next = policy_update(&mut tape, &e.store, &s, &topo, &e.bank, &e.updater, a).unwrap();
    let v1 = tape.value(next.v);
    for node in [0, 2, 3] {
        assert_eq!(v1.row(node), v0.row(node), "node {node} changed");
    }
    assert_ne!(v1.row(1), v0.row(1));
}

#[test]
fn half_mixture_averages_two_functions() {
    let e = engine(2, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let topo = GraphTopology::new(2, vec![(0, 1)]).unwrap();
    let v0 = random(2, DV, &mut rng);
    let mut tape = Tape::new();
    let s = state(&mut tape, &v0);
    let a = tape
        .constant(Tensor::from_rows(&[vec![0.0, 0.5, 0.5]]).unwrap())
        .unwrap();
    let mixed = policy_update(&mut tape, &e.store, &s, &topo, &e.bank, &e.updater, a).unwrap();

    let src = tape
        .constant(Tensor::from_vec(1, DV, v0.row(0).to_vec()).unwrap())
        .unwrap();
    let dst = tape
        .constant(Tensor::from_vec(1, DV, v0.row(1).to_vec()).unwrap())
        .unwrap();
    let m1 = e
        .bank
        .apply_message(&mut tape, &e.store, 1, dst, src)
        .unwrap();
    let m2 = e
        .bank
        .apply_message(&mut tape, &e.store, 2, dst, src)
        .unwrap();
    let sum = tape.add(m1, m2).unwrap();
    let avg = tape.scale(sum, 0.5).unwrap();
    let delta = e
        .updater
        .combiner
        .forward(&mut tape, &e.store, avg)
        .unwrap();
    let got: Vec<f64> = tape
        .value(mixed.v)
        .row(1)
        .iter()
        .zip(v0.row(1))
        .map(|(a, b)| a - b)
        .collect();
    for (g, w) in got.iter().zip(tape.value(delta).data()) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn mean_pool_handles_isolated_and_repeated_neighbours() {
    let e = engine(1, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    // Node 3 is isolated; node 0 hears from 1, 2 and 4, where 1 and 2 are
    // identical.
    let mut v0 = random(5, DV, &mut rng);
    let copy = v0.row(1).to_vec();
    for (c, &x) in copy.iter().enumerate() {
        v0.set(2, c, x);
    }
    let topo = GraphTopology::new(5, vec![(1, 0), (2, 0), (4, 0), (1, 4)]).unwrap();
    let mut tape = Tape::new();
    let s = state(&mut tape, &v0);
    let next = mean_pool_update(&mut tape, &e.store, &s, &topo, &e.bank, &e.updater).unwrap();
    let v1 = tape.value(next.v).clone();
    assert_eq!(v1.row(3), v0.row(3));

    // Mean of the three messages into node 0, pushed through the combiner.
    let row = |t: &mut Tape<f64>, i: usize| {
        t.constant(Tensor::from_vec(1, DV, v0.row(i).to_vec()).unwrap())
            .unwrap()
    };
    let dst = row(&mut tape, 0);
    let mut total = tape.constant(Tensor::zeros(1, DM)).unwrap();
    for src in [1, 2, 4] {
        let s = row(&mut tape, src);
        let m = e
            .bank
            .apply_message(&mut tape, &e.store, 1, dst, s)
            .unwrap();
        total = tape.add(total, m).unwrap();
    }
    let mean = tape.scale(total, 1.0 / 3.0).unwrap();
    let delta = e
        .updater
        .combiner
        .forward(&mut tape, &e.store, mean)
        .unwrap();
    for c in 0..DV {
        let want = v0.get(0, c) + tape.value(delta).get(0, c);
        assert!((v1.get(0, c) - want).abs() < 1e-12);
    }

    // A node whose neighbours all match one sender sees that sender's message.
    let topo2 = GraphTopology::new(5, vec![(1, 3), (2, 3)]).unwrap();
    let s2 = state(&mut tape, &v0);
    let single = GraphTopology::new(5, vec![(1, 3)]).unwrap();
    let a = mean_pool_update(&mut tape, &e.store, &s2, &topo2, &e.bank, &e.updater).unwrap();
    let b = mean_pool_update(&mut tape, &e.store, &s2, &single, &e.bank, &e.updater).unwrap();
    for (x, y) in tape.value(a.v).row(3).iter().zip(tape.value(b.v).row(3)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn gates_interpolate_between_silence_and_full_sum() {
    let e = engine(3, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let topo = GraphTopology::fully_connected(4).unwrap();
    let v0 = random(4, DV, &mut rng);
    let mut tape = Tape::new();
    let s = state(&mut tape, &v0);
    let ne = topo.n_edges();

    let zeros = tape.constant(Tensor::zeros(ne, 3)).unwrap();
    let off =
        attention_update_with_gates(&mut tape, &e.store, &s, &topo, &e.bank, &e.updater, zeros)
            .unwrap();
    assert_eq!(tape.value(off.v), &v0);

    // Gates of one on function k alone equal a hard policy choosing k.
    for k in 1..=3 {
        let mut g = Tensor::zeros(ne, 3);
        for r in 0..ne {
            g.set(r, k - 1, 1.0);
        }
        let g = tape.constant(g).unwrap();
        let gated =
            attention_update_with_gates(&mut tape, &e.store, &s, &topo, &e.bank, &e.updater, g)
                .unwrap();
        let a = onehots(&mut tape, &vec![k; ne], e.bank.size());
        let hard = policy_update(&mut tape, &e.store, &s, &topo, &e.bank, &e.updater, a).unwrap();
        assert_close(tape.value(gated.v), tape.value(hard.v), 1e-12);
    }

    let mut gstore = ParamStore::<f64>::new();
    let net = GateNet::new(&mut gstore, 3, DV, 6, &mut rng);
    let mut t2 = Tape::new();
    let s2 = state(&mut t2, &v0);
    let gates = net.gates(&mut t2, &gstore, &s2, &topo).unwrap();
    assert_eq!(t2.shape(gates), [ne, 3]);
    assert!(t2.value(gates).data().iter().all(|&x| x > 0.0 && x < 1.0));
}

#[test]
fn hard_and_relaxed_one_hot_assignments_agree() {
    let e = engine(3, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let topo = GraphTopology::fully_connected(4).unwrap();
    let v0 = random(4, DV, &mut rng);
    let actions: Vec<usize> = (0..topo.n_edges()).map(|i| i % 4).collect();
    let mut tape = Tape::new();
    let s = state(&mut tape, &v0);
    let onehot = Tensor::one_hot(&actions, 4).unwrap();
    let relaxed = tape.constant(onehot.clone()).unwrap();
    let soft = tape
        .constant(Tensor::full(topo.n_edges(), 4, 0.25))
        .unwrap();
    let hard = tape.straight_through(soft, onehot).unwrap();
    let a = policy_update(&mut tape, &e.store, &s, &topo, &e.bank, &e.updater, relaxed).unwrap();
    let b = policy_update(&mut tape, &e.store, &s, &topo, &e.bank, &e.updater, hard).unwrap();
    assert_eq!(tape.value(a.v), tape.value(b.v));
}

#[test]
fn malformed_assignments_are_rejected() {
    let e = engine(2, 0);
    let topo = GraphTopology::fully_connected(3).unwrap();
    let mut tape = Tape::new();
    let s = state(&mut tape, &Tensor::zeros(3, DV));
    let wrong_width = tape.constant(Tensor::zeros(topo.n_edges(), 2)).unwrap();
    assert!(policy_update(
        &mut tape,
        &e.store,
        &s,
        &topo,
        &e.bank,
        &e.updater,
        wrong_width
    )
    .is_err());
    let not_dist = tape.constant(Tensor::full(topo.n_edges(), 3, 0.5)).unwrap();
    assert!(policy_update(&mut tape, &e.store, &s, &topo, &e.bank, &e.updater, not_dist).is_err());
}

#[test]
fn bank_and_updater_pass_finite_differences() {
    let e = engine(2, 19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let topo = GraphTopology::fully_connected(3).unwrap();
    let v0 = random(3, DV, &mut rng);
    let weights = random(topo.n_edges(), 3, &mut rng).map(|x| x.abs() + 0.1);
    let report = grad_check(
        &e.store,
        &GradCheckOptions::default(),
        |tape: &mut Tape<f64>, store| -> pmp_core::error::Result<Var> {
            let s = state(tape, &v0);
            let raw = tape.constant(weights.clone())?;
            let a = tape.softmax(raw)?;
            let next = policy_update(tape, store, &s, &topo, &e.bank, &e.updater, a)?;
            let sq = tape.mul(next.v, next.v)?;
            let u = tape.mul(next.u, next.u)?;
            let a = tape.sum(sq)?;
            let b = tape.sum(u)?;
            Ok(tape.add(a, b)?)
        },
    )
    .unwrap();
    assert!(report.passes(1e-6), "worst {}", report.worst_rel_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn updates_are_permutation_equivariant(seed in 0u64..1000, n in 2usize..7, k in 1usize..4) {
        let e = engine(3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let topo = GraphTopology::fully_connected(n).unwrap();
        let v0 = random(n, DV, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let relabelled = topo.relabel(&perm).unwrap();
        let mut pv = Tensor::zeros(n, DV);
        for i in 0..n {
            for c in 0..DV {
                pv.set(perm[i], c, v0.get(i, c));
            }
        }
        let actions: Vec<usize> = (0..topo.n_edges()).map(|_| rng.random_range(0..=k)).collect();
        let mut tape = Tape::new();
        let s = state(&mut tape, &v0);
        let ps = state(&mut tape, &pv);
        // Edge order survives relabelling, so row e of the assignment still
        // belongs to the same edge.
        let a = onehots(&mut tape, &actions, e.bank.size());
        let out = policy_update(&mut tape, &e.store, &s, &topo, &e.bank, &e.updater, a).unwrap();
        let pout = policy_update(&mut tape, &e.store, &ps, &relabelled, &e.bank, &e.updater, a).unwrap();
        let (o, po) = (tape.value(out.v).clone(), tape.value(pout.v).clone());
        for i in 0..n {
            for c in 0..DV {
                prop_assert!((o.get(i, c) - po.get(perm[i], c)).abs() < 1e-12);
            }
        }
        for c in 0..DV {
            prop_assert!((tape.value(out.u).get(0, c) - tape.value(pout.u).get(0, c)).abs() < 1e-12);
        }

        let m = mean_pool_update(&mut tape, &e.store, &s, &topo, &e.bank, &e.updater).unwrap();
        let pm = mean_pool_update(&mut tape, &e.store, &ps, &relabelled, &e.bank, &e.updater).unwrap();
        for i in 0..n {
            for c in 0..DV {
                prop_assert!((tape.value(m.v).get(i, c) - tape.value(pm.v).get(perm[i], c)).abs() < 1e-12);
            }
        }
    }
}
