use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

fn grads_of(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> crate::Result<Var>,
) -> (f64, Vec<Vec<f64>>) {
    let owned: Vec<_> = inputs.iter().map(|x| x.clone().requiring_grad()).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = owned.iter().map(|x| g.leaf(x)).collect();
    let out = f(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let dense = vars
        .iter()
        .zip(&owned)
        .map(|(&v, x)| grads.dense(v).unwrap_or_else(|| vec![0.0; x.numel()]))
        .collect();
    (g.scalar(out), dense)
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let eye = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.input(t(&[1, 2], &[1.0, 2.0]));
    let b = g.input(t(&[2, 1], &[3.0, 4.0]));
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(p), &[1, 1]);
    assert_eq!(g.value(p), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.input(Tensor::<f64>::zeros(vec![2, 3]));
    let b = g.input(Tensor::<f64>::zeros(vec![2, 3]));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn matmul_backward_is_transposed_products() {
    // d sum(A·B)/dA = 1·Bᵀ, so every row of dA holds the row sums of B.
    let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let b = t(&[3, 2], &[1.0, -1.0, 2.0, 0.5, 0.0, 3.0]);
    let (_, g) = grads_of(&[a, b], |g, v| {
        let p = g.matmul(v[0], v[1])?;
        Ok(g.sum(p))
    });
    assert_eq!(g[0], vec![0.0, 2.5, 3.0, 0.0, 2.5, 3.0]);
    // dB[k][j] = Σ_i A[i][k]
    assert_eq!(g[1], vec![5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let a = g.input(t(&[2], &[1.0, 2.0]));
    let z = g.input(t(&[2], &[0.0, 0.0]));
    let s = g.add(a, z).unwrap();
    assert_eq!(g.value(s), &[1.0, 2.0]);
    let x = g.input(t(&[2], &[2.0, 3.0]));
    let y = g.input(t(&[2], &[4.0, 5.0]));
    let m = g.mul(x, y).unwrap();
    assert_eq!(g.value(m), &[8.0, 15.0]);
    let d = g.sub(x, x).unwrap();
    assert_eq!(g.value(d), &[0.0, 0.0]);
    let bad = g.input(Tensor::<f64>::zeros(vec![3]));
    assert!(matches!(g.add(a, bad), Err(Error::Dimension { .. })));
    let k = g.input(Tensor::scalar(10.0));
    let bump = g.add(a, k).unwrap();
    assert_eq!(g.value(bump), &[11.0, 12.0]);
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let zero = g.input(Tensor::scalar(0.0));
    let s = g.sigmoid(zero);
    let th = g.tanh(zero);
    assert_eq!(g.scalar(s), 0.5);
    assert_eq!(g.scalar(th), 0.0);
    let x = g.input(t(&[2], &[-1.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r), &[0.0, 2.0]);
    let big = g.input(t(&[4], &[-800.0, -40.0, 40.0, 800.0]));
    let s = g.sigmoid(big);
    assert!(g.value(s).iter().all(|&p| (0.0..=1.0).contains(&p)));
}

#[test]
fn concat_examples() {
    let mut g = Graph::new();
    let a = g.input(t(&[2, 1], &[1.0, 2.0]));
    let b = g.input(t(&[2, 1], &[3.0, 4.0]));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(c), &[2, 2]);
    assert_eq!(g.value(c), &[1.0, 3.0, 2.0, 4.0]);
    let single = g.concat(&[a], 0).unwrap();
    assert_eq!(g.value(single), g.value(a));
    let odd = g.input(t(&[3, 1], &[0.0; 3]));
    assert!(matches!(g.concat(&[a, odd], 1), Err(Error::Dimension { .. })));
}

#[test]
fn backward_examples() {
    let (_, g) = grads_of(&[t(&[3], &[1.0, 2.0, 3.0])], |g, v| Ok(g.sum(v[0])));
    assert_eq!(g[0], vec![1.0, 1.0, 1.0]);
    let (_, g) = grads_of(&[t(&[2], &[1.0, 2.0])], |g, v| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum(sq))
    });
    assert_eq!(g[0], vec![2.0, 4.0]);
    // x feeds two paths: 3x and x², so d/dx = 3 + 2x.
    let (_, g) = grads_of(&[t(&[2], &[1.0, -2.0])], |g, v| {
        let a = g.scale(v[0], 3.0);
        let b = g.mul(v[0], v[0])?;
        let s = g.add(a, b)?;
        Ok(g.sum(s))
    });
    assert_eq!(g[0], vec![5.0, -1.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = t(&[2], &[1.0, 2.0]).requiring_grad();
    let mut g = Graph::new();
    let v = g.leaf(&x);
    let y = g.tanh(v);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn backward_twice_accumulates_exactly_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut w = random(&mut rng, &[3, 4]).requiring_grad();
    let x = random(&mut rng, &[2, 4]);
    let (once, twice) = {
        let mut g = Graph::new();
        let wv = g.leaf(&w);
        let xv = g.input(x.clone());
        let y = g.linear(xv, wv, None).unwrap();
        let y = g.tanh(y);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        let mut buf = w.clone();
        buf.zero_grad();
        grads.accumulate_into(wv, &mut buf).unwrap();
        let once = buf.grad().unwrap().to_vec();
        let again = g.backward(loss).unwrap();
        again.accumulate_into(wv, &mut buf).unwrap();
        (once, buf.grad().unwrap().to_vec())
    };
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
    w.zero_grad();
}

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[6]);
    let linear = grad_check(|g, v| Ok(g.sum(v)), &x, 1e-3).unwrap();
    assert!(linear < 1e-10, "{linear}");
    for _ in 0..100 {
        let x = random(&mut rng, &[6]);
        let e = grad_check(
            |g, v| {
                let s = g.sigmoid(v);
                Ok(g.sum(s))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }
}

#[test]
fn grad_check_flags_a_broken_backward_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&mut rng, &[5]);
    let check = grad_check_many(
        |g, v| {
            let s = g.sigmoid(v[0]);
            Ok(g.sum(s))
        },
        &[x],
        1e-3,
        Some(Fault::NegateBackward(OpKind::Sigmoid)),
    )
    .unwrap();
    assert!(check.max_rel_error > 1e-2);
}

#[test]
fn grad_check_rejects_non_finite_values() {
    let x = t(&[1], &[1.0]);
    let r = grad_check(
        |g, v| {
            let big = g.scale(v, f64::INFINITY);
            Ok(g.sum(big))
        },
        &x,
        1e-3,
    );
    assert!(matches!(r, Err(Error::Evaluation(_))));
    assert!(grad_check(|g, v| Ok(g.sum(v)), &x, 0.0).is_err());
}

#[test]
fn matmul_gradient_over_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let inputs = [random(&mut rng, &[m, k]), random(&mut rng, &[k, n])];
        let c = grad_check_many(
            |g, v| {
                let p = g.matmul(v[0], v[1])?;
                Ok(g.sum(p))
            },
            &inputs,
            1e-3,
            None,
        )
        .unwrap();
        assert!(c.max_rel_error < 1e-4);
    }
}

#[test]
fn shift_moves_rows_within_segments() {
    let mut g = Graph::new();
    let x = g.input(t(&[5, 1], &[1.0, 2.0, 3.0, 4.0, 5.0]));
    let right = g.shift_packed(x, &[3, 2], 1).unwrap();
    assert_eq!(g.value(right), &[0.0, 1.0, 2.0, 0.0, 4.0]);
    let left = g.shift_packed(x, &[3, 2], -1).unwrap();
    assert_eq!(g.value(left), &[2.0, 3.0, 0.0, 5.0, 0.0]);
    let far = g.shift_packed(x, &[3, 2], 4).unwrap();
    assert_eq!(g.value(far), &[0.0; 5]);
    assert!(g.shift_packed(x, &[3, 3], 1).is_err());
}

#[test]
fn gather_skips_pad_rows_and_accumulates_repeats() {
    let table = t(&[3, 2], &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    let (_, g) = grads_of(&[table], |g, v| {
        let rows = g.gather(v[0], &[2, 1, 2, 0], Some(0))?;
        Ok(g.sum(rows))
    });
    assert_eq!(g[0], vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
}

#[test]
fn interpolate_and_bce_values() {
    let mut g = Graph::new();
    let z = g.input(t(&[2], &[0.25, 1.0]));
    let a = g.input(t(&[2], &[4.0, 4.0]));
    let b = g.input(t(&[2], &[8.0, 8.0]));
    let m = g.interpolate(z, a, b).unwrap();
    assert_eq!(g.value(m), &[5.0, 8.0]);
    let logit = g.input(Tensor::scalar(0.0));
    let l = g.bce_with_logits(logit, 1.0).unwrap();
    assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
    let huge = g.input(t(&[2], &[1e6, -1e6]));
    let l = g.bce_mean(huge, &[0.0, 1.0]).unwrap();
    assert_eq!(g.scalar(l), 1e6);
}

// Reference LSTM/GRU built from primitive ops only.
fn lstm_reference(g: &mut Graph<'_, f64>, xp: Var, w_hh: Var, h0: Var, c0: Var, len: usize, reverse: bool) -> Var {
    let hs = g.shape(h0)[0];
    let (mut h, mut c) = (h0, c0);
    let mut rows = vec![None; len];
    for step in 0..len {
        let pos = if reverse { len - 1 - step } else { step };
        let x = g.row(xp, pos).unwrap();
        let hr = g.reshape(h, vec![1, hs]).unwrap();
        let rec = g.linear(hr, w_hh, None).unwrap();
        let rec = g.reshape(rec, vec![4 * hs]).unwrap();
        let pre = g.add(x, rec).unwrap();
        let block = |g: &mut Graph<'_, f64>, i: usize| g.slice(pre, 0, i * hs, hs).unwrap();
        let (i, f, cand, o) = (block(g, 0), block(g, 1), block(g, 2), block(g, 3));
        let (i, f, cand, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(cand), g.sigmoid(o));
        let keep = g.mul(f, c).unwrap();
        let write = g.mul(i, cand).unwrap();
        c = g.add(keep, write).unwrap();
        let tc = g.tanh(c);
        h = g.mul(o, tc).unwrap();
        rows[pos] = Some(g.concat(&[h, c], 0).unwrap());
    }
    let rows: Vec<Var> = rows.into_iter().map(Option::unwrap).collect();
    g.stack(&rows).unwrap()
}

fn gru_reference(g: &mut Graph<'_, f64>, xp: Var, w_hh: Var, w_hn: Var, h0: Var, len: usize, reverse: bool) -> Var {
    let hs = g.shape(h0)[0];
    let mut h = h0;
    let mut rows = vec![None; len];
    for step in 0..len {
        let pos = if reverse { len - 1 - step } else { step };
        let x = g.row(xp, pos).unwrap();
        let hr = g.reshape(h, vec![1, hs]).unwrap();
        let rec = g.linear(hr, w_hh, None).unwrap();
        let rec = g.reshape(rec, vec![2 * hs]).unwrap();
        let xz = g.slice(x, 0, 0, hs).unwrap();
        let xr = g.slice(x, 0, hs, hs).unwrap();
        let xn = g.slice(x, 0, 2 * hs, hs).unwrap();
        let hz = g.slice(rec, 0, 0, hs).unwrap();
        let hr_ = g.slice(rec, 0, hs, hs).unwrap();
        let z = g.add(xz, hz).unwrap();
        let z = g.sigmoid(z);
        let r = g.add(xr, hr_).unwrap();
        let r = g.sigmoid(r);
        let rh = g.mul(r, h).unwrap();
        let rh = g.reshape(rh, vec![1, hs]).unwrap();
        let n = g.linear(rh, w_hn, None).unwrap();
        let n = g.reshape(n, vec![hs]).unwrap();
        let n = g.add(xn, n).unwrap();
        let n = g.tanh(n);
        h = g.interpolate(z, h, n).unwrap();
        rows[pos] = Some(h);
    }
    let rows: Vec<Var> = rows.into_iter().map(Option::unwrap).collect();
    g.stack(&rows).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn fused_lstm_matches_primitive_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..20 {
        let (hs, len) = (rng.random_range(1..5), rng.random_range(1..7));
        let reverse = trial % 2 == 1;
        let inputs = vec![
            random(&mut rng, &[len, 4 * hs]),
            random(&mut rng, &[4 * hs, hs]),
            random(&mut rng, &[hs]),
            random(&mut rng, &[hs]),
        ];
        let weights = random(&mut rng, &[len * 2 * hs]).reshape(vec![len, 2 * hs]).unwrap();
        let score = |g: &mut Graph<'_, f64>, out: Var| {
            let w = g.constant(weights.clone());
            let p = g.mul(out, w).unwrap();
            g.sum(p)
        };
        let (fv, fg) = grads_of(&inputs, |g, v| {
            let out = g.lstm_sequence(v[0], v[1], v[2], v[3], &[len], reverse)?;
            Ok(score(g, out))
        });
        let (rv, rg) = grads_of(&inputs, |g, v| {
            let out = lstm_reference(g, v[0], v[1], v[2], v[3], len, reverse);
            Ok(score(g, out))
        });
        assert!((fv - rv).abs() < 1e-12);
        for (a, b) in fg.iter().zip(&rg) {
            assert_close(a, b, 1e-12);
        }
    }
}

#[test]
fn fused_gru_matches_primitive_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for trial in 0..20 {
        let (hs, len) = (rng.random_range(1..5), rng.random_range(1..7));
        let reverse = trial % 2 == 1;
        let inputs = vec![
            random(&mut rng, &[len, 3 * hs]),
            random(&mut rng, &[2 * hs, hs]),
            random(&mut rng, &[hs, hs]),
            random(&mut rng, &[hs]),
        ];
        let weights = random(&mut rng, &[len * hs]).reshape(vec![len, hs]).unwrap();
        let score = |g: &mut Graph<'_, f64>, out: Var| {
            let w = g.constant(weights.clone());
            let p = g.mul(out, w).unwrap();
            g.sum(p)
        };
        let (fv, fg) = grads_of(&inputs, |g, v| {
            let out = g.gru_sequence(v[0], v[1], v[2], v[3], &[len], reverse)?;
            Ok(score(g, out))
        });
        let (rv, rg) = grads_of(&inputs, |g, v| {
            let out = gru_reference(g, v[0], v[1], v[2], v[3], len, reverse);
            Ok(score(g, out))
        });
        assert!((fv - rv).abs() < 1e-12);
        for (a, b) in fg.iter().zip(&rg) {
            assert_close(a, b, 1e-12);
        }
    }
}

fn forward_once(x: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let wv = g.input(w.clone());
    let y = g.linear(xv, wv, None).unwrap();
    let y = g.tanh(y);
    let p = g.pool(y, PoolMode::Avg, g.shape(y)[0]).unwrap();
    g.value(p).to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn concat_then_slice_recovers_parts(rows_a in 1usize..4, rows_b in 1usize..4, cols in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random(&mut rng, &[rows_a, cols]), random(&mut rng, &[rows_b, cols]));
        let mut g = Graph::new();
        let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
        let c = g.concat(&[av, bv], 0).unwrap();
        let sa = g.slice(c, 0, 0, rows_a).unwrap();
        let sb = g.slice(c, 0, rows_a, rows_b).unwrap();
        prop_assert_eq!(g.value(sa), a.data());
        prop_assert_eq!(g.value(sb), b.data());
        let ct = g.concat(&[av, av], 1).unwrap();
        let left = g.slice(ct, 1, 0, cols).unwrap();
        prop_assert_eq!(g.value(left), a.data());
    }

    #[test]
    fn forward_is_bit_repeatable(n in 1usize..6, d in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, w) = (random(&mut rng, &[n, d]), random(&mut rng, &[3, d]));
        let a = forward_once(&x, &w);
        let b = forward_once(&x, &w);
        prop_assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn sigmoid_stays_in_the_open_interval(x in -30.0f64..30.0) {
        let mut g = Graph::new();
        let v = g.input(Tensor::scalar(x));
        let s = g.sigmoid(v);
        prop_assert!(g.scalar(s) > 0.0 && g.scalar(s) < 1.0);
    }
}
