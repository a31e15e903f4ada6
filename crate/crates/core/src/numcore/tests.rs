use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

#[test]
fn relu_forward_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Matrix::row_vector(&[-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

    let neg = tape.constant(Matrix::filled(2, 3, -0.5));
    let y = tape.relu(neg);
    assert_eq!(tape.value(y), &Matrix::zeros(2, 3));
}

#[test]
fn relu_backward_uses_zero_subgradient() {
    let mut tape = Tape::new();
    let x = tape.var(Matrix::row_vector(&[-1.0, 2.0, 0.0]));
    let y = tape.relu(x);
    let w = tape.constant(Matrix::from_rows(&[[5.0], [5.0], [5.0]]).unwrap());
    let out = tape.matmul(y, w).unwrap();
    let grads = tape.backward(out).unwrap();
    assert_eq!(grads.wrt(x).data(), &[0.0, 5.0, 0.0]);
}

#[test]
fn logprob_examples() {
    let mut tape = Tape::new();
    let l = tape.constant(Matrix::row_vector(&[0.0, 0.0]));
    let lp = logprob_of_targets(&mut tape, l, &[0]).unwrap();
    assert!((tape.value(lp).item().unwrap() - 0.5f64.ln()).abs() < 1e-15);

    let l = tape.constant(Matrix::row_vector(&[10.0, -10.0]));
    let lp = logprob_of_targets(&mut tape, l, &[0]).unwrap();
    // -ln(1 + e^-20)
    let expected = -(-20.0f64).exp().ln_1p();
    assert!((tape.value(lp).item().unwrap() - expected).abs() < 1e-18);
    assert!((expected + 2.061e-9).abs() < 1e-12);

    let l = tape.constant(Matrix::zeros(2, 4));
    let lp = logprob_of_targets(&mut tape, l, &[1, 3]).unwrap();
    assert!((tape.value(lp).item().unwrap() - 2.0 * 0.25f64.ln()).abs() < 1e-15);
}

#[test]
fn logprob_rejects_out_of_range_target() {
    let mut tape = Tape::new();
    let l = tape.constant(Matrix::zeros(1, 4));
    assert!(matches!(
        logprob_of_targets(&mut tape, l, &[4]),
        Err(crate::Error::Vocab { id: 4, vocab: 4 })
    ));
}

#[test]
fn grad_check_sum_of_squares() {
    let at = Matrix::row_vector(&[1.0, 2.0]);
    let f = |t: &mut Tape<'_>, x: Var| Ok(t.sum_squares(x));
    let check = grad_check_entries(f, &at, 1e-5, &[(0, 0), (0, 1)]).unwrap();
    assert_eq!(check.analytic.data(), &[2.0, 4.0]);
    for &(_, c, fd) in &check.numeric {
        assert!((fd - check.analytic.get(0, c)).abs() < 1e-8);
    }
    assert!(check.max_rel_err < 1e-8);
}

#[test]
fn grad_check_constant_function() {
    let at = Matrix::row_vector(&[1.0, -3.0]);
    let f = |t: &mut Tape<'_>, _x: Var| Ok(t.constant(Matrix::scalar(7.0)));
    let check = grad_check_entries(f, &at, 1e-5, &[(0, 0), (0, 1)]).unwrap();
    assert_eq!(check.analytic, Matrix::zeros(1, 2));
    assert_eq!(check.max_rel_err, 0.0);
}

#[test]
fn grad_check_rejects_bad_eps() {
    let f = |t: &mut Tape<'_>, x: Var| Ok(t.sum_squares(x));
    assert!(grad_check(f, &Matrix::scalar(1.0), 0.0).is_err());
}

#[test]
fn unused_operand_has_zero_gradient() {
    let mut tape = Tape::new();
    let a = tape.var(Matrix::row_vector(&[1.0, 2.0]));
    let unused = tape.var(Matrix::row_vector(&[3.0]));
    let out = tape.sum_squares(a);
    let grads = tape.backward(out).unwrap();
    assert_eq!(grads.wrt(unused), Matrix::zeros(1, 1));
}

#[test]
fn backward_is_linear_in_summands() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = random(3, 4, &mut rng);
    let w = random(4, 2, &mut rng);
    let part = |which: u8| {
        let mut tape = Tape::new();
        let x = tape.var(x0.clone());
        let wv = tape.constant(w.clone());
        let y = tape.matmul(x, wv).unwrap();
        let g = tape.gelu(y);
        let a = tape.sum_squares(g);
        let r = tape.relu(x);
        let b = tape.sum(r);
        let out = match which {
            0 => a,
            1 => b,
            _ => tape.add(a, b).unwrap(),
        };
        tape.backward(out).unwrap().wrt(x)
    };
    let sum = part(0).add(&part(1)).unwrap();
    assert!(sum.max_abs_diff(&part(2)) < 1e-12);
}

/// A composite exercising every primitive the LM uses.
fn composite(t: &mut Tape<'_>, x: Var, consts: &[Matrix]) -> crate::Result<Var> {
    let [w, w2, gain, bias, table, rowb] = consts else { unreachable!() };
    let w = t.constant(w.clone());
    let w2 = t.constant(w2.clone());
    let gain = t.constant(gain.clone());
    let bias = t.constant(bias.clone());
    let table = t.constant(table.clone());
    let rowb = t.constant(rowb.clone());
    let n = t.layer_norm(x, gain, bias)?;
    let q = t.matmul(n, w)?;
    let k = t.matmul(x, w2)?;
    let v = t.gelu(x);
    let segs = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 3 }];
    let a = t.causal_attention(q, k, v, 2, &segs)?;
    let a = t.add_row(a, rowb)?;
    let e = t.gather(table, &[1, 0, 1, 2, 0])?;
    let h = t.add(a, e)?;
    let h = t.sub(h, x)?;
    let top = t.scale(h, 0.7);
    let logits = t.matmul_nt(top, x)?;
    let head = t.relu(logits);
    let both = t.concat_rows(logits, head)?;
    let lp = t.log_softmax_pick(both, &[(0, 1), (3, 4), (7, 2), (9, 0)])?;
    let sq = t.sum_squares(h);
    let sq = t.scale(sq, 0.01);
    t.add(lp, sq)
}

#[test]
fn composite_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..5 {
        let consts = vec![
            random(4, 4, &mut rng),
            random(4, 4, &mut rng),
            random(1, 4, &mut rng),
            random(1, 4, &mut rng),
            random(3, 4, &mut rng),
            random(1, 4, &mut rng),
        ];
        let at = random(5, 4, &mut rng);
        let err = grad_check(|t, x| composite(t, x, &consts), &at, 1e-5).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }
}

#[test]
fn parameter_gradients_pass_grad_check() {
    // gradient w.r.t. the weights rather than the input
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x0 = random(4, 3, &mut rng);
    let g0 = random(1, 3, &mut rng);
    let f = |t: &mut Tape<'_>, w: Var| {
        let x = t.constant(x0.clone());
        let gain = t.var(g0.clone());
        let b = t.constant(Matrix::zeros(1, 3));
        let n = t.layer_norm(x, gain, b)?;
        let y = t.matmul(n, w)?;
        let segs = [Segment { start: 0, len: 4 }];
        let a = t.causal_attention(y, y, y, 1, &segs)?;
        let logits = t.matmul_nt(a, w)?;
        t.log_softmax_pick(logits, &[(0, 0), (3, 2)])
    };
    let at = random(3, 3, &mut rng);
    assert!(grad_check(f, &at, 1e-5).unwrap() < 1e-4);
}

#[test]
fn attention_is_confined_to_segments() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = random(4, 2, &mut rng);
    let v = random(4, 2, &mut rng);
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone());
    let vv = tape.constant(v.clone());
    let segs = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 2 }];
    let out = tape.causal_attention(qv, qv, vv, 1, &segs).unwrap();
    // first row of each segment can only see itself
    assert_eq!(tape.value(out).row(0), v.row(0));
    assert_eq!(tape.value(out).row(2), v.row(2));
}

#[test]
fn smear_forward_example() {
    let mut tape = Tape::new();
    let x = tape.constant(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap());
    let mix = tape.constant(Matrix::row_vector(&[0.5, -1.0]));
    let segs = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 1 }];
    let y = tape.smear_rows(x, mix, &segs).unwrap();
    // row 2 starts a new segment, so nothing is carried over
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.5, 2.0, 5.0, 6.0]);
}

#[test]
fn smear_passes_grad_check_in_both_operands() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }];
    let x0 = random(5, 3, &mut rng);
    let m0 = random(1, 3, &mut rng);
    let w = random(3, 3, &mut rng);
    let wrt_x = |t: &mut Tape<'_>, x: Var| {
        let m = t.constant(m0.clone());
        let y = t.smear_rows(x, m, &segs)?;
        let wv = t.constant(w.clone());
        let z = t.matmul(y, wv)?;
        t.log_softmax_pick(z, &[(1, 0), (4, 2)])
    };
    assert!(grad_check(wrt_x, &x0, 1e-5).unwrap() < 1e-4);
    let wrt_mix = |t: &mut Tape<'_>, m: Var| {
        let x = t.constant(x0.clone());
        let y = t.smear_rows(x, m, &segs)?;
        let wv = t.constant(w.clone());
        let z = t.matmul(y, wv)?;
        t.log_softmax_pick(z, &[(2, 1), (4, 0)])
    };
    assert!(grad_check(wrt_mix, &m0, 1e-5).unwrap() < 1e-4);
}
