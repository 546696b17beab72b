use std::rc::Rc;

use dualrec::autodiff::{Tape, Tensor, Var};
use dualrec::rng::{stream, Purpose};
use dualrec::sparse::Csr;
use proptest::prelude::*;

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn leaves(tape: &mut Tape, inputs: &[Tensor]) -> Vec<Var> {
    inputs.iter().map(|t| tape.param(t.clone())).collect()
}

fn eval(f: &Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars = leaves(&mut tape, inputs);
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

/// Central differences against the tape gradient for every input entry.
fn check(f: &Build, inputs: &[Tensor], tol: f64) {
    let mut tape = Tape::new();
    let vars = leaves(&mut tape, inputs);
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= h;
            let numeric = (eval(f, &plus) - eval(f, &minus)) / (2.0 * h);
            let a = analytic.data()[e];
            let err = (a - numeric).abs() / (1.0f64).max(a.abs()).max(numeric.abs());
            assert!(err < tol, "input {k} entry {e}: analytic {a} numeric {numeric}");
        }
    }
}

fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn a23() -> Tensor {
    t(&[&[0.3, -0.7, 1.1], &[0.45, 0.2, -0.9]])
}

fn b23() -> Tensor {
    t(&[&[-0.4, 0.8, 0.15], &[1.3, -0.25, 0.6]])
}

/// Weighted sum so every entry gets a distinct upstream gradient.
fn weigh(tape: &mut Tape, x: Var) -> Var {
    let (r, c) = tape.shape(x);
    let w = Tensor::from_vec(r, c, (0..r * c).map(|k| 0.5 + 0.37 * k as f64).collect()).unwrap();
    let w = tape.constant(w);
    let y = tape.mul(x, w).unwrap();
    tape.sum(y)
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(a23());
    let s = tape.sum(x);
    assert_eq!(tape.backward(s).unwrap().get(x), Tensor::filled(2, 3, 1.0));
}

#[test]
fn sigmoid_slope_at_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.0));
    let y = tape.sigmoid(x);
    assert_eq!(tape.backward(y).unwrap().get(x).item(), 0.25);
}

#[test]
fn elementwise_primitives() {
    let cases: Vec<Box<Build>> = vec![
        Box::new(|tp, v| { let y = tp.add(v[0], v[1]).unwrap(); weigh(tp, y) }),
        Box::new(|tp, v| { let y = tp.sub(v[0], v[1]).unwrap(); weigh(tp, y) }),
        Box::new(|tp, v| { let y = tp.mul(v[0], v[1]).unwrap(); weigh(tp, y) }),
        Box::new(|tp, v| { let y = tp.sigmoid(v[0]); let y = tp.mul(y, v[1]).unwrap(); weigh(tp, y) }),
        Box::new(|tp, v| { let y = tp.tanh(v[0]); let y = tp.mul(y, v[1]).unwrap(); weigh(tp, y) }),
        Box::new(|tp, v| { let y = tp.relu(v[0]); let y = tp.add(y, v[1]).unwrap(); weigh(tp, y) }),
        Box::new(|tp, v| { let y = tp.one_minus(v[0]); let y = tp.mul(y, v[1]).unwrap(); weigh(tp, y) }),
        Box::new(|tp, v| { let y = tp.scale(v[0], -2.5); let y = tp.add(y, v[1]).unwrap(); weigh(tp, y) }),
        Box::new(|tp, v| { let y = tp.exp_clamped(v[0]); let y = tp.mul(y, v[1]).unwrap(); weigh(tp, y) }),
        Box::new(|tp, v| { let y = tp.recip(v[0]).unwrap(); let y = tp.mul(y, v[1]).unwrap(); weigh(tp, y) }),
        Box::new(|tp, v| { let y = tp.row_scale(v[0], vec![0.5, -3.0]).unwrap(); let y = tp.add(y, v[1]).unwrap(); weigh(tp, y) }),
        Box::new(|tp, v| { let y = tp.mul(v[0], v[1]).unwrap(); tp.mean(y).unwrap() }),
    ];
    for f in &cases {
        check(f.as_ref(), &[a23(), b23()], 1e-7);
    }
}

#[test]
fn matrix_primitives() {
    let w = t(&[&[0.2, -0.5], &[0.9, 0.1], &[-0.3, 0.7]]);
    check(&|tp, v| { let y = tp.matmul(v[0], v[1]).unwrap(); weigh(tp, y) }, &[a23(), w.clone()], 1e-7);
    check(&|tp, v| { let y = tp.add_bias(v[0], v[1]).unwrap(); weigh(tp, y) }, &[a23(), t(&[&[0.1, 0.2, 0.3]])], 1e-7);
    check(&|tp, v| { let y = tp.add_scalar(v[0], v[1]).unwrap(); weigh(tp, y) }, &[a23(), Tensor::scalar(0.4)], 1e-7);
    check(&|tp, v| { let y = tp.mul_scalar(v[0], v[1]).unwrap(); weigh(tp, y) }, &[a23(), Tensor::scalar(-1.4)], 1e-7);
    check(&|tp, v| { let y = tp.concat_cols(&[v[0], v[1], v[0]]).unwrap(); weigh(tp, y) }, &[a23(), b23()], 1e-7);
    check(&|tp, v| { let y = tp.concat_rows(&[v[1], v[0]]).unwrap(); weigh(tp, y) }, &[a23(), b23()], 1e-7);
    check(&|tp, v| { let y = tp.gather_rows(v[0], &[1, 1, 0]).unwrap(); weigh(tp, y) }, &[a23()], 1e-7);
    let base = t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
    check(
        &|tp, v| { let y = tp.scatter_rows(v[0], &[2, 0], v[1]).unwrap(); weigh(tp, y) },
        &[base, b23()],
        1e-7,
    );
}

#[test]
fn sparse_product_both_paths() {
    let m = Rc::new(Csr::from_triplets(2, 2, vec![(0, 1, 0.5), (1, 0, 0.5), (1, 1, 0.25)]).unwrap());
    let asym = Rc::new(Csr::from_triplets(3, 2, vec![(0, 1, 0.5), (2, 0, -1.5), (1, 1, 0.25)]).unwrap());
    let m2 = m.clone();
    check(&move |tp, v| { let y = tp.spmm(m2.clone(), v[0], true).unwrap(); weigh(tp, y) }, &[a23()], 1e-7);
    check(&move |tp, v| { let y = tp.spmm(asym.clone(), v[0], false).unwrap(); weigh(tp, y) }, &[a23()], 1e-7);
}

#[test]
fn bce_gradient() {
    let probs = Tensor::column(vec![0.2, 0.7, 0.55]);
    check(&|tp, v| tp.bce(v[0], &[1.0, 0.0, 1.0]).unwrap(), &[probs], 1e-6);
}

#[test]
fn composite_network() {
    let x = a23();
    let w1 = t(&[&[0.2, -0.5], &[0.9, 0.1], &[-0.3, 0.7]]);
    let w2 = t(&[&[0.6], &[-0.8]]);
    check(
        &|tp, v| {
            let h = tp.matmul(v[0], v[1]).unwrap();
            let h = tp.tanh(h);
            let z = tp.matmul(h, v[2]).unwrap();
            let p = tp.sigmoid(z);
            tp.bce(p, &[1.0, 0.0]).unwrap()
        },
        &[x, w1, w2],
        1e-7,
    );
}

#[test]
fn clamped_exponent_passes_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::column(vec![60.0, 1.0]));
    let y = tape.exp_clamped(x);
    let s = tape.sum(y);
    assert_eq!(tape.clamp_hits(), 1);
    assert_eq!(tape.value(y).get(0, 0), 50f64.exp());
    let g = tape.backward(s).unwrap().get(x);
    assert_eq!(g.data(), &[0.0, 1f64.exp()]);
}

#[test]
fn errors() {
    let mut tape = Tape::new();
    let a = tape.param(a23());
    let b = tape.param(Tensor::zeros(3, 3));
    assert!(tape.add(a, b).is_err());
    assert!(tape.matmul(b, a).is_err());
    assert!(tape.recip(b).is_err());
    assert!(tape.backward(a).is_err());
    assert!(tape.gather_rows(a, &[2]).is_err());
    assert!(tape.scatter_rows(b, &[0, 0], a).is_err());
    let mut rng = stream(0, Purpose::Dropout);
    assert!(tape.dropout(a, 1.0, true, &mut rng).is_err());
    assert!(tape.dropout(a, -0.1, true, &mut rng).is_err());
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(a23());
    let p = tape.param(b23());
    let y = tape.mul(c, p).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(!g.touched(c));
    assert_eq!(g.get(p), a23());
}

#[test]
fn replaying_a_tape_is_independent() {
    let build = |tape: &mut Tape| {
        let x = tape.param(a23());
        let y = tape.tanh(x);
        let s = tape.sum(y);
        (x, s)
    };
    let mut first = Tape::new();
    let (x1, s1) = build(&mut first);
    let g1 = first.backward(s1).unwrap().get(x1);
    let g1_again = first.backward(s1).unwrap().get(x1);
    let mut second = Tape::new();
    let (x2, s2) = build(&mut second);
    assert_eq!(g1, g1_again);
    assert_eq!(g1, second.backward(s2).unwrap().get(x2));
}

#[test]
fn dropout_modes() {
    let mut rng = stream(7, Purpose::Dropout);
    let mut tape = Tape::new();
    let x = tape.param(Tensor::filled(200, 100, 1.0));
    assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
    let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
    let v = tape.value(y);
    assert!(v.data().iter().all(|&e| e == 0.0 || e == 2.0));
    let mean = v.sum() / v.len() as f64;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn random_gru_like_cell(vals in prop::collection::vec(-1.5f64..1.5, 14)) {
        let x = Tensor::from_vec(2, 2, vals[0..4].to_vec()).unwrap();
        let h = Tensor::from_vec(2, 2, vals[4..8].to_vec()).unwrap();
        let w = Tensor::from_vec(2, 2, vals[8..12].to_vec()).unwrap();
        let b = Tensor::from_vec(1, 2, vals[12..14].to_vec()).unwrap();
        check(
            &|tp, v| {
                let a = tp.matmul(v[0], v[2]).unwrap();
                let a = tp.add_bias(a, v[3]).unwrap();
                let z = tp.sigmoid(a);
                let c = tp.tanh(a);
                let keep = tp.one_minus(z);
                let k = tp.mul(keep, v[1]).unwrap();
                let n = tp.mul(z, c).unwrap();
                let out = tp.add(k, n).unwrap();
                weigh(tp, out)
            },
            &[x, h, w, b],
            1e-6,
        );
    }
}

#[test]
fn non_finite_values_are_reported() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(f64::MAX));
    let y = tape.scale(x, 10.0);
    let _ = tape.tanh(y);
    if cfg!(debug_assertions) {
        assert_eq!(tape.first_non_finite(), Some("Scale at node 1"));
    }
}
