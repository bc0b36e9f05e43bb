use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for &(name, r, c) in shapes {
        store.add(name, Tensor::randn(r, c, 1.0, &mut rng)).unwrap();
    }
    store
}

/// `sum(y ⊙ R)` for a fixed random `R`, so every output entry matters.
fn weighted_sum(tape: &mut Tape<'_>, y: Var, seed: u64) -> Result<Var, Error> {
    let (r, c) = tape.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::randn(r, c, 1.0, &mut rng));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn check(shapes: &[(&str, usize, usize)], build: impl Fn(&mut Tape<'_>, &[Var]) -> Result<Var, Error>) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..4 {
        let mut store = store_with(shapes, seed);
        let ids: Vec<_> = store.ids().collect();
        let report = grad_check(&mut store, 1e-5, |tape| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
            let y = build(tape, &vars)?;
            weighted_sum(tape, y, 99 + seed)
        })
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

#[test]
fn quadratic_gradient_is_exact() {
    let mut store = ParamStore::new();
    let id = store.add("theta", Tensor::row_vector(&[1.0, 2.0]).unwrap()).unwrap();
    let mut tape = Tape::new(&store);
    let t = tape.param(id);
    let sq = tape.mul(t, t).unwrap();
    let s = tape.sum(sq);
    let loss = tape.scale(s, 0.5);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(id).unwrap().data(), &[1.0, 2.0]);

    let report = grad_check(&mut store, 1e-5, |tape| {
        let t = tape.param(id);
        let sq = tape.mul(t, t)?;
        let s = tape.sum(sq);
        Ok(tape.scale(s, 0.5))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
    assert_eq!(report.entries, 2);
}

#[test]
fn constant_loss_has_zero_error() {
    let mut store = store_with(&[("w", 2, 3)], 1);
    let report = grad_check(&mut store, 1e-4, |tape| Ok(tape.constant(Tensor::filled(1, 1, 3.0)))).unwrap();
    assert_eq!(report.max_rel_error, 0.0);
}

#[test]
fn detects_non_deterministic_loss() {
    let mut store = store_with(&[("w", 1, 1)], 1);
    let calls = Cell::new(0.0);
    let err = grad_check(&mut store, 1e-4, |tape| {
        calls.set(calls.get() + 1.0);
        Ok(tape.constant(Tensor::filled(1, 1, calls.get())))
    })
    .unwrap_err();
    assert!(matches!(err, Error::NonDeterministic { .. }));
}

#[test]
fn rejects_out_of_range_step() {
    let mut store = store_with(&[("w", 1, 1)], 1);
    let r = grad_check(&mut store, 1e-2, |tape| Ok(tape.constant(Tensor::zeros(1, 1))));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn backward_requires_scalar() {
    let store = store_with(&[("w", 2, 2)], 1);
    let mut tape = Tape::new(&store);
    let w = tape.param(store.id("w").unwrap());
    assert!(tape.backward(w).is_err());
}

#[test]
fn shared_parameter_gradients_add_up() {
    let store = store_with(&[("w", 1, 3)], 5);
    let id = store.id("w").unwrap();
    let mut tape = Tape::new(&store);
    let a = tape.param(id);
    let b = tape.param(id);
    assert_eq!(a, b);
    let s = tape.add(a, b).unwrap();
    let loss = tape.sum(s);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(id).unwrap().data(), &[2.0, 2.0, 2.0]);
}

const TOL: f64 = 1e-4;

#[test]
fn gradcheck_matmul_family() {
    let e = check(&[("a", 3, 4), ("b", 4, 2)], |t, v| t.matmul(v[0], v[1]));
    assert!(e < TOL, "matmul {e}");
    let e = check(&[("a", 3, 4), ("b", 2, 4)], |t, v| t.matmul_bt(v[0], v[1]));
    assert!(e < TOL, "matmul_bt {e}");
}

#[test]
fn gradcheck_elementwise_binary() {
    let shapes = [("a", 3, 4), ("b", 3, 4)];
    assert!(check(&shapes, |t, v| t.add(v[0], v[1])) < TOL);
    assert!(check(&shapes, |t, v| t.sub(v[0], v[1])) < TOL);
    assert!(check(&shapes, |t, v| t.mul(v[0], v[1])) < TOL);
}

#[test]
fn gradcheck_row_broadcasts() {
    let shapes = [("a", 3, 4), ("r", 1, 4)];
    assert!(check(&shapes, |t, v| t.add_row(v[0], v[1])) < TOL);
    assert!(check(&shapes, |t, v| t.sub_row(v[0], v[1])) < TOL);
    assert!(check(&shapes, |t, v| t.mul_row(v[0], v[1])) < TOL);
    let e = check(&[("x", 3, 4), ("w", 3, 2)], |t, v| t.scale_by_col(v[0], v[1], 1));
    assert!(e < TOL);
}

#[test]
fn gradcheck_unary() {
    let shapes = [("x", 3, 5)];
    assert!(check(&shapes, |t, v| Ok(t.scale(v[0], -1.7))) < TOL);
    assert!(check(&shapes, |t, v| Ok(t.sigmoid(v[0]))) < TOL);
    assert!(check(&shapes, |t, v| Ok(t.tanh(v[0]))) < TOL);
    assert!(check(&shapes, |t, v| Ok(t.relu(v[0]))) < TOL);
    assert!(check(&shapes, |t, v| Ok(t.softplus(v[0]))) < TOL);
}

#[test]
fn gradcheck_softmax_and_norms() {
    assert!(check(&[("x", 3, 4)], |t, v| t.softmax_rows(v[0], false)) < TOL);
    assert!(check(&[("x", 4, 4)], |t, v| t.softmax_rows(v[0], true)) < TOL);
    assert!(check(&[("x", 3, 6)], |t, v| Ok(t.layer_norm_rows(v[0], 1e-6))) < TOL);
    assert!(check(&[("x", 3, 4)], |t, v| t.normalize_rows(v[0])) < TOL);
}

#[test]
fn gradcheck_structural() {
    assert!(check(&[("x", 4, 3)], |t, v| t.gather_rows(v[0], &[3, 0, 3, 1])) < TOL);
    assert!(check(&[("x", 3, 6)], |t, v| t.slice_cols(v[0], 2, 3)) < TOL);
    let shapes = [("a", 3, 2), ("b", 3, 4)];
    assert!(check(&shapes, |t, v| t.concat_cols(&[v[0], v[1], v[0]])) < TOL);
    let shapes = [("a", 2, 3), ("b", 1, 3)];
    assert!(check(&shapes, |t, v| t.concat_rows(&[v[1], v[0]])) < TOL);
}

#[test]
fn gradcheck_cross_entropy() {
    let e = check(&[("x", 3, 3)], |t, v| t.cross_entropy(v[0], &[0, 2, 1], None));
    assert!(e < TOL);
    let mask = [true, false, true, true, true, true, false, true, true];
    let e = check(&[("x", 3, 3)], |t, v| t.cross_entropy(v[0], &[0, 1, 2], Some(&mask)));
    assert!(e < TOL);
}

#[test]
fn causal_softmax_masks_upper_triangle() {
    let store = store_with(&[("x", 3, 3)], 3);
    let mut tape = Tape::new(&store);
    let x = tape.param(store.id("x").unwrap());
    let y = tape.softmax_rows(x, true).unwrap();
    let v = tape.value(y);
    for i in 0..3 {
        for j in i + 1..3 {
            assert_eq!(v.get(i, j), 0.0);
        }
        assert!((v.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
