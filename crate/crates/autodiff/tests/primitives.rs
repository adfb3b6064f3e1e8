use pmp_autodiff::{grad_check, AutodiffError, GradCheckOptions, ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Scalarises `out` with fixed random weights so every output entry
/// contributes to the checked loss.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> pmp_autodiff::Result<Var> {
    let [r, c] = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random_tensor(&mut rng, r, c, -1.0, 1.0))?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn check_unary(
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
    seed: u64,
    op: impl Fn(&mut Tape<f64>, Var) -> pmp_autodiff::Result<Var>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let x = store.add("x", random_tensor(&mut rng, rows, cols, lo, hi));
    let report = grad_check(&store, &GradCheckOptions::default(), |tape, s| {
        let xv = tape.param(s, x)?;
        let y = op(tape, xv)?;
        weighted_sum(tape, y, seed + 1)
    })
    .unwrap();
    report.worst_rel_err()
}

fn check_binary(
    a_shape: (usize, usize),
    b_shape: (usize, usize),
    seed: u64,
    op: impl Fn(&mut Tape<f64>, Var, Var) -> pmp_autodiff::Result<Var>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a = store.add(
        "a",
        random_tensor(&mut rng, a_shape.0, a_shape.1, -1.0, 1.0),
    );
    let b = store.add(
        "b",
        random_tensor(&mut rng, b_shape.0, b_shape.1, -1.0, 1.0),
    );
    let report = grad_check(&store, &GradCheckOptions::default(), |tape, s| {
        let av = tape.param(s, a)?;
        let bv = tape.param(s, b)?;
        let y = op(tape, av, bv)?;
        weighted_sum(tape, y, seed + 1)
    })
    .unwrap();
    report.worst_rel_err()
}

const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn matmul_gradients(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in 0u64..1000) {
        prop_assert!(check_binary((m, k), (k, n), seed, |t, a, b| t.matmul(a, b)) < TOL);
    }

    #[test]
    fn broadcast_binary_gradients(m in 1usize..=16, n in 1usize..=16, seed in 0u64..1000) {
        for b_shape in [(m, n), (1, n), (m, 1), (1, 1)] {
            prop_assert!(check_binary((m, n), b_shape, seed, |t, a, b| t.add(a, b)) < TOL);
            prop_assert!(check_binary((m, n), b_shape, seed, |t, a, b| t.sub(a, b)) < TOL);
            prop_assert!(check_binary((m, n), b_shape, seed, |t, a, b| t.mul(a, b)) < TOL);
        }
    }

    #[test]
    fn smooth_unary_gradients(m in 1usize..=16, n in 1usize..=16, seed in 0u64..1000) {
        prop_assert!(check_unary(m, n, -2.0, 2.0, seed, |t, x| t.sigmoid(x)) < TOL);
        prop_assert!(check_unary(m, n, -2.0, 2.0, seed, |t, x| t.tanh(x)) < TOL);
        prop_assert!(check_unary(m, n, -2.0, 2.0, seed, |t, x| t.exp(x)) < TOL);
        prop_assert!(check_unary(m, n, 0.1, 3.0, seed, |t, x| t.log(x)) < TOL);
        prop_assert!(check_unary(m, n, -3.0, 3.0, seed, |t, x| t.softmax(x)) < TOL);
        prop_assert!(check_unary(m, n, -3.0, 3.0, seed, |t, x| t.log_softmax(x)) < TOL);
        prop_assert!(check_unary(m, n, -2.0, 2.0, seed, |t, x| t.affine(x, -1.5, 0.3)) < TOL);
    }

    #[test]
    fn elu_gradients_away_from_kink(m in 1usize..=16, n in 1usize..=16, seed in 0u64..1000) {
        // Central differences straddling 0 see the kink; keep entries clear of it.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let data = (0..m * n)
            .map(|_| {
                let v: f64 = rng.random_range(0.01..2.0);
                if rng.random_bool(0.5) { v } else { -v }
            })
            .collect();
        let x = store.add("x", Tensor::from_vec(m, n, data).unwrap());
        let report = grad_check(&store, &GradCheckOptions::default(), |tape, s| {
            let xv = tape.param(s, x)?;
            let y = tape.elu(xv)?;
            weighted_sum(tape, y, seed)
        }).unwrap();
        prop_assert!(report.worst_rel_err() < TOL);
    }

    #[test]
    fn reduction_gradients(m in 1usize..=16, n in 1usize..=16, seed in 0u64..1000) {
        prop_assert!(check_unary(m, n, -1.0, 1.0, seed, |t, x| t.sum(x)) < TOL);
        prop_assert!(check_unary(m, n, -1.0, 1.0, seed, |t, x| t.mean(x)) < TOL);
        prop_assert!(check_unary(m, n, -1.0, 1.0, seed, |t, x| t.sum_rows(x)) < TOL);
        prop_assert!(check_unary(m, n, -1.0, 1.0, seed, |t, x| t.mean_rows(x)) < TOL);
    }

    #[test]
    fn structural_gradients(m in 1usize..=16, n in 2usize..=16, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let index: Vec<usize> = (0..m + 3).map(|_| rng.random_range(0..m)).collect();
        let idx = index.clone();
        prop_assert!(check_unary(m, n, -1.0, 1.0, seed, move |t, x| t.gather_rows(x, &idx)) < TOL);
        let idx = index.clone();
        prop_assert!(check_unary(m + 3, n, -1.0, 1.0, seed, move |t, x| t.scatter_add_rows(x, &idx, m)) < TOL);
        prop_assert!(check_unary(m, n, -1.0, 1.0, seed, |t, x| t.slice_cols(x, 1, n - 1)) < TOL);
        prop_assert!(check_binary((m, n), (m, 3), seed, |t, a, b| t.concat(&[b, a, b])) < TOL);
    }

    #[test]
    fn softmax_rows_are_distributions(m in 1usize..=16, n in 1usize..=16, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random_tensor(&mut rng, m, n, -30.0, 30.0)).unwrap();
        let y = tape.softmax(x).unwrap();
        let t = tape.value(y);
        for r in 0..m {
            prop_assert!(t.row(r).iter().all(|&p| p >= 0.0));
            prop_assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(m in 1usize..=8, n in 1usize..=8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&mut rng, m, n, -1.0, 1.0));
        let w = store.add("w", random_tensor(&mut rng, n, 3, -1.0, 1.0));

        let loss_a = |tape: &mut Tape<f64>| -> pmp_autodiff::Result<Var> {
            let xv = tape.param(&store, x)?;
            let wv = tape.param(&store, w)?;
            let h = tape.matmul(xv, wv)?;
            let h = tape.tanh(h)?;
            tape.sum(h)
        };
        let loss_b = |tape: &mut Tape<f64>| -> pmp_autodiff::Result<Var> {
            let xv = tape.param(&store, x)?;
            let s = tape.sigmoid(xv)?;
            tape.mean(s)
        };

        let mut ta = Tape::new();
        let la = loss_a(&mut ta).unwrap();
        let ga = ta.backward(la, &store).unwrap();
        let mut tb = Tape::new();
        let lb = loss_b(&mut tb).unwrap();
        let gb = tb.backward(lb, &store).unwrap();
        let mut tc = Tape::new();
        let a = loss_a(&mut tc).unwrap();
        let b = loss_b(&mut tc).unwrap();
        let lc = tc.add(a, b).unwrap();
        let gc = tc.backward(lc, &store).unwrap();

        let mut sum = ga.clone();
        sum.add_assign(&gb);
        for (s, c) in sum.tensors().iter().zip(gc.tensors()) {
            for (u, v) in s.data().iter().zip(c.data()) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn elu_fixed_points() {
    let mut tape = Tape::<f64>::new();
    let x = tape
        .constant(Tensor::row_vector(vec![0.0, -1.0, 2.0]))
        .unwrap();
    let y = tape.elu(x).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - (-1f64).exp_m1()).abs() < 1e-15);
    assert!((v[1] + 0.6321).abs() < 1e-4);
    assert_eq!(v[2], 2.0);
}

#[test]
fn softmax_of_equal_scores_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::row_vector(vec![0.0, 0.0])).unwrap();
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn square_has_derivative_six_at_three() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::scalar(3.0));
    let mut tape = Tape::new();
    let xv = tape.param(&store, x).unwrap();
    let y = tape.mul(xv, xv).unwrap();
    let g = tape.backward(y, &store).unwrap();
    assert_eq!(g.get(x).data(), &[6.0]);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::row_vector(vec![0.3, -1.2, 2.0, 0.0]));
    let mut tape = Tape::new();
    let xv = tape.param(&store, x).unwrap();
    let y = tape.softmax(xv).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s, &store).unwrap();
    assert!(g.get(x).data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn unused_parameters_get_zero_gradients() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::scalar(2.0));
    let unused = store.add("unused", Tensor::full(2, 3, 1.0));
    let mut tape = Tape::new();
    let xv = tape.param(&store, x).unwrap();
    let y = tape.exp(xv).unwrap();
    let g = tape.backward(y, &store).unwrap();
    assert_eq!(g.get(unused), &Tensor::zeros(2, 3));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(2, 2)).unwrap();
    assert!(matches!(
        tape.backward(x, &store),
        Err(AutodiffError::NonScalarLoss { shape: [2, 2] })
    ));
}

#[test]
fn shape_errors_name_the_op() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(2, 3)).unwrap();
    let b = tape.constant(Tensor::zeros(2, 3)).unwrap();
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err.to_string(),
        "matmul: incompatible shapes [2, 3] and [2, 3]"
    );
    let c = tape.constant(Tensor::zeros(3, 2)).unwrap();
    assert!(matches!(
        tape.add(a, c),
        Err(AutodiffError::ShapeMismatch { op: "add", .. })
    ));
}

#[test]
fn log_of_non_positive_is_a_domain_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::row_vector(vec![1.0, 0.0])).unwrap();
    assert!(matches!(
        tape.log(x),
        Err(AutodiffError::Domain { op: "log", .. })
    ));
}

#[test]
fn overflow_is_reported_as_non_finite() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::scalar(1000.0)).unwrap();
    assert!(matches!(
        tape.exp(x),
        Err(AutodiffError::NonFinite { op: "exp" })
    ));
}

#[test]
fn scatter_add_accumulates_duplicate_targets() {
    let mut tape = Tape::<f64>::new();
    let x = tape
        .constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap())
        .unwrap();
    let y = tape.scatter_add_rows(x, &[1, 1, 0], 3).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0, 6.0, 4.0, 6.0, 0.0, 0.0]);
}

#[test]
fn straight_through_passes_gradient_to_surrogate() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::row_vector(vec![0.2, 0.8]));
    let mut tape = Tape::new();
    let xv = tape.param(&store, x).unwrap();
    let hard = tape
        .straight_through(xv, Tensor::row_vector(vec![0.0, 1.0]))
        .unwrap();
    assert_eq!(tape.value(hard).data(), &[0.0, 1.0]);
    let w = tape.constant(Tensor::row_vector(vec![3.0, -2.0])).unwrap();
    let p = tape.mul(hard, w).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s, &store).unwrap();
    assert_eq!(g.get(x).data(), &[3.0, -2.0]);
}

#[test]
fn linear_layer_grad_check_is_tight() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = store.add("w", random_tensor(&mut rng, 6, 4, -1.0, 1.0));
        let b = store.add("b", random_tensor(&mut rng, 1, 4, -1.0, 1.0));
        let x = random_tensor(&mut rng, 5, 6, -1.0, 1.0);
        let report = grad_check(&store, &GradCheckOptions::default(), |tape, s| {
            let xv = tape.constant(x.clone())?;
            let wv = tape.param(s, w)?;
            let bv = tape.param(s, b)?;
            let h = tape.matmul(xv, wv)?;
            let y = tape.add(h, bv)?;
            weighted_sum(tape, y, seed)
        })
        .unwrap();
        assert!(report.worst_rel_err() < 1e-6, "{report:?}");
    }
}

#[test]
fn constant_function_has_exactly_zero_gradients() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::full(3, 3, 0.5));
    let report = grad_check(&store, &GradCheckOptions::default(), |tape, s| {
        let _ = tape.param(s, w)?;
        tape.scalar(4.0)
    })
    .unwrap();
    assert_eq!(report.params[0].max_abs_err, 0.0);
    assert_eq!(report.worst_rel_err(), 0.0);
}

#[test]
fn non_deterministic_function_is_rejected() {
    use std::cell::Cell;
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::scalar(1.0));
    let calls = Cell::new(0.0);
    let res = grad_check(&store, &GradCheckOptions::default(), |tape, s| {
        calls.set(calls.get() + 1.0);
        let wv = tape.param(s, w)?;
        let c = tape.scalar(calls.get())?;
        let y = tape.mul(wv, c)?;
        tape.sum(y)
    });
    assert!(matches!(res, Err(AutodiffError::NonDeterministic { .. })));
}

#[test]
fn f32_and_f64_agree_on_forward_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_tensor(&mut rng, 8, 5, -1.0, 1.0);
    let b = random_tensor(&mut rng, 5, 3, -1.0, 1.0);
    let mut t64 = Tape::<f64>::new();
    let (a64, b64) = (
        t64.constant(a.clone()).unwrap(),
        t64.constant(b.clone()).unwrap(),
    );
    let y64 = t64.matmul(a64, b64).unwrap();
    let y64 = t64.softmax(y64).unwrap();
    let mut t32 = Tape::<f32>::new();
    let (a32, b32) = (
        t32.constant(a.cast()).unwrap(),
        t32.constant(b.cast()).unwrap(),
    );
    let y32 = t32.matmul(a32, b32).unwrap();
    let y32 = t32.softmax(y32).unwrap();
    for (x, y) in t64.value(y64).data().iter().zip(t32.value(y32).data()) {
        assert!((x - *y as f64).abs() < 1e-6);
    }
}
