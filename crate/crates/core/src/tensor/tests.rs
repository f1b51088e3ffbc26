use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Weighted sum with fixed random weights so that a constant-sum output
/// (softmax, normalization) still has a non-trivial gradient.
fn weighted_sum(t: &mut Tape, x: Var, weights: &Matrix) -> crate::Result<Var> {
    let w = t.constant(weights.clone());
    let p = t.mul(x, w)?;
    t.sum(p)
}

fn assert_check(c: GradCheck) {
    assert!(
        c.passed(),
        "{}: max relative error {:.3e} over {} entries",
        c.name,
        c.max_rel_err(),
        c.entries.len()
    );
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut t = Tape::new();
    let x = t.constant(Matrix::row_vector(&[0.0, 0.0, 0.0]));
    let y = t.softmax_rows(x).unwrap();
    for &v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let mut t = Tape::new();
    let x = t.constant(Matrix::row_vector(&[1000.0, 0.0]));
    let y = t.softmax_rows(x).unwrap();
    let v = t.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-12);
    assert!(v[1].abs() < 1e-12);
}

#[test]
fn masked_softmax_zeroes_outside_support() {
    let mut t = Tape::new();
    let x = t.constant(Matrix::from_rows(&[[1.0, 2.0, 3.0], [0.5, 0.5, 9.0]]).unwrap());
    let mask = [true, false, true, true, true, false];
    let y = t.masked_softmax_rows(x, &mask).unwrap();
    let v = t.value(y);
    assert_eq!(v.get(0, 1), 0.0);
    assert_eq!(v.get(1, 2), 0.0);
    assert!((v.get(1, 0) - 0.5).abs() < 1e-15);
    assert!((v.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);

    let empty = [false, false, false, true, true, true];
    assert!(matches!(
        t.masked_softmax_rows(x, &empty),
        Err(Error::Degenerate { .. })
    ));
}

#[test]
fn l2_normalize_examples() {
    let mut t = Tape::new();
    let x = t.constant(Matrix::row_vector(&[3.0, 4.0]));
    let y = t.row_l2_normalize(x).unwrap();
    assert!((t.value(y).get(0, 0) - 0.6).abs() < 1e-15);
    assert!((t.value(y).get(0, 1) - 0.8).abs() < 1e-15);

    let u = t.constant(Matrix::row_vector(&[0.6, 0.8]));
    let v = t.row_l2_normalize(u).unwrap();
    assert!(t.value(v).max_abs_diff(t.value(u)) < 1e-15);

    let z = t.constant(Matrix::row_vector(&[0.0, 0.0]));
    assert!(matches!(t.row_l2_normalize(z), Err(Error::Degenerate { .. })));
}

#[test]
fn normalized_dot_is_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let m = random(&mut rng, 2, 7, -2.0, 2.0);
        let (a, b) = (m.row(0), m.row(1));
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cosine = dot / (na * nb);

        let mut t = Tape::new();
        let x = t.constant(m.clone());
        let n = t.row_l2_normalize(x).unwrap();
        let nv = t.value(n);
        let nd: f64 = nv.row(0).iter().zip(nv.row(1)).map(|(x, y)| x * y).sum();
        assert!((nd - cosine).abs() < 1e-14);
    }
}

#[test]
fn leaky_relu_example() {
    let mut t = Tape::new();
    let x = t.constant(Matrix::row_vector(&[-1.0, 2.0]));
    let y = t.leaky_relu(x, 0.2).unwrap();
    assert_eq!(t.value(y).data(), &[-0.2, 2.0]);
}

#[test]
fn max_over_rows_example_and_tie_break() {
    let mut t = Tape::new();
    let x = t.leaf(Matrix::from_rows(&[[1.0, 5.0], [3.0, 2.0]]).unwrap());
    let y = t.max_over_rows(x).unwrap();
    assert_eq!(t.value(y).data(), &[3.0, 5.0]);

    let tied = t.leaf(Matrix::from_rows(&[[2.0], [2.0], [1.0]]).unwrap());
    let m = t.max_over_rows(tied).unwrap();
    let s = t.sum(m).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(tied).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn feature_norm_standardizes_columns() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = random(&mut rng, 12, 5, -2.0, 2.0);
    let mut t = Tape::new();
    let x = t.constant(m);
    let gamma = t.constant(Matrix::filled(1, 5, 1.0));
    let beta = t.constant(Matrix::zeros(1, 5));
    let y = t.feature_norm(x, gamma, beta, FEATURE_NORM_EPS).unwrap();
    let v = t.value(y);
    for c in 0..5 {
        let mean = (0..12).map(|r| v.get(r, c)).sum::<f64>() / 12.0;
        let var = (0..12).map(|r| (v.get(r, c) - mean).powi(2)).sum::<f64>() / 12.0;
        assert!(mean.abs() < 1e-9, "column {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "column {c} variance {var}");
    }
}

#[test]
fn concat_and_gather_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Matrix::from_rows(&[[1.0], [2.0]]).unwrap());
    let b = t.constant(Matrix::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap());
    let c = t.concat_cols(&[a, b]).unwrap();
    assert_eq!(t.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    let g = t.gather_rows(c, &[1, 1, 0]).unwrap();
    assert_eq!(t.value(g).row(2), &[1.0, 3.0, 4.0]);
    let r = t.concat_rows(&[b, a]);
    assert!(matches!(r, Err(Error::Dimension { .. })));
}

#[test]
fn backward_requires_recording_tape() {
    let mut t = Tape::inference();
    let x = t.leaf(Matrix::scalar(2.0));
    let y = t.scale(x, 3.0).unwrap();
    assert!(matches!(t.backward(y), Err(Error::NotRecording)));
}

#[test]
fn non_finite_results_are_errors() {
    let mut t = Tape::new();
    let x = t.constant(Matrix::row_vector(&[-1.0]));
    assert!(matches!(t.log(x), Err(Error::NonFinite { op: "log" })));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, 4, 3, -2.0, 2.0);
    let b = random(&mut rng, 3, 2, -2.0, 2.0);
    let c = check_gradients("matmul", &[a, b], FD_STEP, 1e-6, |t, v| {
        let p = t.matmul(v[0], v[1])?;
        t.sum(p)
    })
    .unwrap();
    assert_check(c);
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, 3, 5, -2.0, 2.0);
    let w = random(&mut rng, 3, 5, -1.0, 1.0);
    let c = check_gradients("softmax_rows", &[x], FD_STEP, 1e-6, |t, v| {
        let s = t.softmax_rows(v[0])?;
        weighted_sum(t, s, &w)
    })
    .unwrap();
    assert_check(c);
}

#[test]
fn every_op_gradient_matches_finite_differences() {
    for seed in 0..20u64 {
        for case in crate::diagnostics::op_cases() {
            let c = case.check(seed).unwrap();
            let name = case.name;
            assert!(
                c.passed(),
                "{name} seed {seed}: relative error {:.3e}",
                c.max_rel_err()
            );
        }
    }
}

#[test]
fn shared_node_accumulates_both_contributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, 3, 3, -2.0, 2.0);
    // `x` feeds a matmul with itself, an elementwise square and a softmax.
    let c = check_gradients("dag", &[a.clone()], FD_STEP, FD_TOLERANCE, |t, v| {
        let p = t.matmul(v[0], v[0])?;
        let q = t.mul(v[0], v[0])?;
        let s = t.softmax_rows(v[0])?;
        let r = t.add(p, q)?;
        let r = t.add(r, s)?;
        t.sum(r)
    })
    .unwrap();
    assert_check(c);

    // Closed form for f = sum(x ⊙ x) + sum(x): df/dx = 2x + 1.
    let mut t = Tape::new();
    let x = t.leaf(a.clone());
    let sq = t.mul(x, x).unwrap();
    let s1 = t.sum(sq).unwrap();
    let s2 = t.sum(x).unwrap();
    let f = t.add(s1, s2).unwrap();
    let g = t.backward(f).unwrap();
    let expect = a.map(|v| 2.0 * v + 1.0);
    assert!(g.get(x).unwrap().max_abs_diff(&expect) < 1e-14);
}

#[test]
fn forward_is_independent_of_recording_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&mut rng, 5, 4, -2.0, 2.0);
    let w = random(&mut rng, 4, 4, -1.0, 1.0);
    let run = |mut t: Tape| {
        let x = t.leaf(a.clone());
        let wv = t.leaf(w.clone());
        let h = t.matmul(x, wv).unwrap();
        let gamma = t.constant(Matrix::filled(1, 4, 1.3));
        let beta = t.constant(Matrix::filled(1, 4, -0.1));
        let h = t.feature_norm(h, gamma, beta, FEATURE_NORM_EPS).unwrap();
        let h = t.leaky_relu(h, 0.2).unwrap();
        let s = t.softmax_rows(h).unwrap();
        let m = t.max_over_rows(s).unwrap();
        t.value(m).clone()
    };
    assert_eq!(run(Tape::new()), run(Tape::inference()));
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Matrix::scalar(2.0));
    let c = t.constant(Matrix::scalar(3.0));
    let y = t.mul(x, c).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 3.0);
    assert!(g.get(c).is_none());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-1e3f64..1e3, 1..40), cols in 1usize..8) {
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let m = Matrix::from_vec(rows, cols, values[..rows * cols].to_vec()).unwrap();
        let mut t = Tape::inference();
        let x = t.constant(m);
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y);
        for r in 0..rows {
            prop_assert!(v.row(r).iter().all(|&p| p >= 0.0));
            prop_assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_rows_have_unit_norm(values in proptest::collection::vec(0.01f64..10.0, 6), signs in proptest::collection::vec(any::<bool>(), 6)) {
        let data: Vec<f64> = values.iter().zip(&signs).map(|(v, s)| if *s { *v } else { -*v }).collect();
        let m = Matrix::from_vec(2, 3, data).unwrap();
        let mut t = Tape::inference();
        let x = t.constant(m);
        let y = t.row_l2_normalize(x).unwrap();
        for r in 0..2 {
            let n: f64 = t.value(y).row(r).iter().map(|v| v * v).sum();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
