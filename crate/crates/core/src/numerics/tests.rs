use proptest::prelude::*;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    init::normal_with(shape, 1.0, &mut rng(seed)).unwrap()
}

#[test]
fn matmul_examples() {
    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
    assert_eq!(matmul(&eye, &a).unwrap().data(), a.data());
    assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);

    let err = matmul(&t(&[2, 3], &[0.0; 6]), &t(&[2, 3], &[0.0; 6])).unwrap_err();
    assert_eq!(
        err,
        Error::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn non_finite_surfaces_at_op_boundary() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[0.0, 1.0])).unwrap();
    assert_eq!(tape.log(x).unwrap_err(), Error::NonFinite("log"));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::inference();
    for (input, want) in [
        ([0.0, 0.0], [0.5, 0.5]),
        ([1000.0, 1000.0], [0.5, 0.5]),
        ([2f64.ln(), 0.0], [2.0 / 3.0, 1.0 / 3.0]),
    ] {
        let x = tape.constant(t(&[2], &input)).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }
    let x = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
    assert!(matches!(tape.softmax(x, 1), Err(Error::InvalidAxis { .. })));
}

#[test]
fn relu_examples() {
    let mut tape = Tape::new();
    let x = tape.variable(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let neg = tape.constant(t(&[3], &[-3.0, -0.5, -1e-9])).unwrap();
    let z = tape.relu(neg).unwrap();
    assert!(tape.value(z).data().iter().all(|&v| v == 0.0));

    // derivative of sum(relu(x)) at [-1, 2], including the finite-difference oracle
    let x0 = t(&[2], &[-1.0, 2.0]);
    let report = finite_diff_check(
        |tape, x| {
            let r = tape.relu(x)?;
            tape.sum(r)
        },
        &x0,
        1e-6,
        1e-8,
    )
    .unwrap();
    assert_eq!(report.analytic, vec![0.0, 1.0]);
    assert!(report.passed());
}

#[test]
fn backward_examples() {
    let x0 = random(&[3, 4], 1);
    let mut tape = Tape::new();
    let x = tape.variable(x0.clone()).unwrap();
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 12]);
    assert_eq!(tape.backward(s), Err(Error::TapeConsumed));
    assert_eq!(tape.sum(x), Err(Error::TapeConsumed));

    // d/dW sum(x·W) = xᵀ·1
    let w0 = random(&[4, 2], 2);
    let mut tape = Tape::new();
    let x = tape.constant(x0.clone()).unwrap();
    let w = tape.variable(w0).unwrap();
    let y = tape.matmul(x, w).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    let gw = tape.grad(w).unwrap();
    for k in 0..4 {
        let col_sum: f64 = (0..3).map(|i| x0.at(i, k)).sum();
        for j in 0..2 {
            assert!((gw[k * 2 + j] - col_sum).abs() < 1e-12);
        }
    }

    let mut tape = Tape::new();
    let v = tape.variable(random(&[2, 2], 3)).unwrap();
    assert_eq!(tape.backward(v), Err(Error::NotScalar(vec![2, 2])));
}

/// Projects a tensor to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct sensitivity.
pub(crate) fn project(tape: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(random(&shape, seed))?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check(name: &str, x: &Tensor, f: impl Fn(&mut Tape, Var) -> crate::Result<Var>) {
    let report = finite_diff_check(f, x, 1e-5, 1e-4).unwrap();
    assert!(report.passed(), "{name}: rel err {} at {}", report.max_rel_error, report.worst_index);
}

#[test]
fn every_op_passes_gradient_check() {
    let x = random(&[3, 4], 10);
    let other = random(&[3, 4], 11);
    let right = random(&[4, 2], 12);
    let left = random(&[2, 3], 13);
    let positive = Tensor::new(vec![3, 4], x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();

    check("matmul lhs", &x, |t, x| {
        let r = t.constant(right.clone())?;
        let y = t.matmul(x, r)?;
        project(t, y, 1)
    });
    check("matmul rhs", &x, |t, x| {
        let l = t.constant(left.clone())?;
        let y = t.matmul(l, x)?;
        project(t, y, 1)
    });
    let wide = random(&[2, 3], 14);
    let tall = random(&[4, 2], 15);
    for case in 0..6 {
        check("matmul_t", &x, |t, x| {
            let o = t.constant(other.clone())?;
            let w = t.constant(wide.clone())?;
            let h = t.constant(tall.clone())?;
            let y = match case {
                0 => t.matmul_t(x, true, o, false)?,
                1 => t.matmul_t(x, false, o, true)?,
                2 => t.matmul_t(x, true, w, true)?,
                3 => t.matmul_t(o, true, x, false)?,
                4 => t.matmul_t(o, false, x, true)?,
                _ => t.matmul_t(h, true, x, true)?,
            };
            project(t, y, 2)
        });
    }
    check("add/sub/mul/div", &positive, |t, x| {
        let o = t.constant(other.clone())?;
        let a = t.add(x, o)?;
        let b = t.sub(a, x)?;
        let c = t.mul(a, x)?;
        let d = t.div(c, x)?;
        let e = t.div(b, x)?;
        let f = t.add(d, e)?;
        project(t, f, 3)
    });
    check("min/max", &x, |t, x| {
        let o = t.constant(other.clone())?;
        let a = t.minimum(x, o)?;
        let b = t.maximum(x, o)?;
        let c = t.mul(a, b)?;
        project(t, c, 4)
    });
    check("add_column", &x, |t, x| {
        let b = t.slice_rows(x, 0, 1)?;
        let b = t.select_cols(b, &[0, 1, 2])?;
        let b = t.reshape(b, vec![3])?;
        let y = t.add_column(x, b)?;
        project(t, y, 5)
    });
    check("scale/add_scalar/relu/sigmoid/abs", &x, |t, x| {
        let a = t.scale(x, -1.7)?;
        let b = t.add_scalar(a, 0.3)?;
        let c = t.relu(b)?;
        let d = t.sigmoid(x)?;
        let e = t.abs(x)?;
        let f = t.add(c, d)?;
        let g = t.add(f, e)?;
        project(t, g, 6)
    });
    check("log/clamp", &positive, |t, x| {
        let a = t.clamp(x, 0.6, 1.5)?;
        let b = t.log(a)?;
        let c = t.log(x)?;
        let d = t.add(b, c)?;
        project(t, d, 7)
    });
    for axis in 0..2 {
        check("softmax", &x, |t, x| {
            let y = t.softmax(x, axis)?;
            project(t, y, 8)
        });
    }
    check("layer_norm_cols", &x, |t, x| {
        let y = t.layer_norm_cols(x, 1e-5)?;
        project(t, y, 9)
    });
    check("sum/mean", &x, |t, x| {
        let sq = t.mul(x, x)?;
        let a = t.mean(sq)?;
        let b = t.sum(x)?;
        let b2 = t.mul(b, b)?;
        t.add(a, b2)
    });
    check("transpose/reshape/slice/concat/gather", &x, |t, x| {
        let a = t.transpose(x)?;
        let b = t.reshape(a, vec![2, 6])?;
        let c = t.slice_rows(b, 1, 1)?;
        let d = t.slice_rows(b, 0, 1)?;
        let e = t.concat_rows(&[c, d, c])?;
        let g = t.gather(e, vec![Some(0), None, Some(5), Some(5), Some(17), None], vec![2, 3])?;
        let h = t.select_cols(g, &[2, 0])?;
        let p = project(t, e, 10)?;
        let q = project(t, h, 11)?;
        t.add(p, q)
    });
}

#[test]
fn repeated_param_registration_is_shared() {
    let p = Param::new("w", random(&[2, 2], 4));
    let mut tape = Tape::new();
    let a = tape.param(&p).unwrap();
    let b = tape.param(&p).unwrap();
    assert_eq!(a, b);
    let y = tape.add(a, b).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.param_grad("w").unwrap(), &[2.0; 4]);
}

#[test]
fn inference_tape_records_no_gradients() {
    let p = Param::new("w", random(&[2, 2], 4));
    let mut tape = Tape::inference();
    let a = tape.param(&p).unwrap();
    assert!(!tape.requires_grad(a));
    let s = tape.sum(a).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(a).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_stochastic(
        data in prop::collection::vec(-50.0f64..50.0, 12),
        axis in 0usize..2,
    ) {
        let mut tape = Tape::inference();
        let x = tape.constant(t(&[3, 4], &data)).unwrap();
        let y = tape.softmax(x, axis).unwrap();
        let v = tape.value(y);
        prop_assert!(v.data().iter().all(|&p| p >= 0.0));
        if axis == 1 {
            for r in 0..3 {
                let s: f64 = (0..4).map(|c| v.at(r, c)).sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        } else {
            for c in 0..4 {
                let s: f64 = (0..3).map(|r| v.at(r, c)).sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_is_associative(seed in 0u64..10_000, m in 1usize..6, k in 1usize..6, l in 1usize..6, n in 1usize..6) {
        let a = random(&[m, k], seed);
        let b = random(&[k, l], seed + 1);
        let c = random(&[l, n], seed + 2);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let scale = left.data().iter().fold(1.0f64, |s, v| s.max(v.abs()));
        prop_assert!(left.max_abs_diff(&right) / scale <= 1e-9);
    }

    #[test]
    fn xavier_respects_bound(seed in any::<u64>(), r in 1usize..20, c in 1usize..20) {
        let w = xavier_init(&[r, c], seed).unwrap();
        let b = xavier_bound(&[r, c]).unwrap();
        prop_assert!(w.data().iter().all(|v| v.abs() <= b));
        prop_assert_eq!(w, xavier_init(&[r, c], seed).unwrap());
    }
}
