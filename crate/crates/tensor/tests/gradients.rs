//! Analytic gradients against central finite differences.

use std::collections::BTreeSet;

use m2pt_tensor::{
    finite_diff_check, AttentionSpec, GradCheckConfig, ParamStore, Tape, Tensor, TensorError, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Max relative error between the tape gradient of `build` w.r.t. `inputs[which]`
/// and a central difference with step `h`.
fn fd_rel_error(
    inputs: &[Tensor<f64>],
    which: usize,
    h: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let run = |vals: &[Tensor<f64>], grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(t.clone(), grad && i == which))
            .collect();
        let out = build(&mut tape, &vars);
        let value = tape.value(out).item();
        let g = grad.then(|| tape.backward(out).unwrap().get(&tape, vars[which]).unwrap());
        (value, g)
    };
    let (_, analytic) = run(inputs, true);
    let analytic = analytic.unwrap();
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for i in 0..work[which].numel() {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + h;
        let (p, _) = run(&work, false);
        work[which].data_mut()[i] = orig - h;
        let (m, _) = run(&work, false);
        work[which].data_mut()[i] = orig;
        let num = (p - m) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
    }
    worst
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(tape: &mut Tape<f64>, y: Var) -> Var {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.731).cos()).collect()).unwrap();
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

#[test]
fn matmul_sum_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random(&[3, 3], &mut rng), random(&[3, 3], &mut rng)];
    let err = fd_rel_error(&inputs, 0, 1e-3, |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        t.sum(c)
    });
    assert!(err < 1e-4, "{err}");
    let err_b = fd_rel_error(&inputs, 1, 1e-3, |t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        probe(t, c)
    });
    assert!(err_b < 1e-4, "{err_b}");
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [random(&[4, 6], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)];
    for which in 0..3 {
        let err = fd_rel_error(&inputs, which, 1e-5, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            probe(t, y)
        });
        assert!(err < 1e-4, "input {which}: {err}");
    }
}

#[test]
fn softmax_and_gelu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [random(&[3, 5], &mut rng)];
    let err = fd_rel_error(&inputs, 0, 1e-5, |t, v| {
        let y = t.softmax(v[0]).unwrap();
        probe(t, y)
    });
    assert!(err < 1e-4, "softmax {err}");
    let err = fd_rel_error(&inputs, 0, 1e-5, |t, v| {
        let y = t.gelu(v[0]);
        probe(t, y)
    });
    assert!(err < 1e-4, "gelu {err}");
}

#[test]
fn attention_gradients_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [random(&[7, 4], &mut rng), random(&[7, 4], &mut rng), random(&[7, 4], &mut rng)];
    for causal in [false, true] {
        for which in 0..3 {
            let err = fd_rel_error(&inputs, which, 1e-5, |t, v| {
                let spec = AttentionSpec { heads: 2, causal, segments: vec![(0, 3), (3, 4)] };
                let y = t.attention(v[0], v[1], v[2], spec).unwrap();
                probe(t, y)
            });
            assert!(err < 1e-4, "causal={causal} input {which}: {err}");
        }
    }
}

#[test]
fn gather_and_cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [random(&[3, 7], &mut rng), random(&[2, 7], &mut rng)];
    let targets = [1, 6, 0, 3, 2];
    let mask = [true, false, true, true, true];
    for which in 0..2 {
        let err = fd_rel_error(&inputs, which, 1e-5, |t, v| {
            let g = t.gather_rows(&[v[0], v[1]], &[(0, 2), (1, 0), (0, 2), (1, 1), (0, 0)]).unwrap();
            t.cross_entropy(g, &targets, &mask).unwrap()
        });
        assert!(err < 1e-4, "input {which}: {err}");
    }
}

/// Direct log-sum-exp loop, independent of the tape.
fn reference_cross_entropy(logits: &Tensor<f64>, targets: &[usize], mask: &[bool]) -> f64 {
    let v = logits.cols();
    let mut total = 0.0;
    let mut n = 0;
    for r in 0..logits.rows() {
        if !mask[r] {
            continue;
        }
        let row = &logits.data()[r * v..(r + 1) * v];
        let mut z = 0.0;
        for &x in row {
            z += x.exp();
        }
        total += z.ln() - row[targets[r]];
        n += 1;
    }
    total / n as f64
}

#[test]
fn cross_entropy_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = random(&[5, 7], &mut rng);
    let targets = [0, 3, 6, 2, 5];
    let mask = [true, true, false, true, true];
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(logits.clone());
    let l = tape.cross_entropy(x, &targets, &mask).unwrap();
    let expected = reference_cross_entropy(&logits, &targets, &mask);
    assert!((tape.value(l).item() - expected).abs() < 1e-12);
}

#[test]
fn quadratic_check_is_exact() {
    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::new(vec![4], vec![0.5, -1.5, 2.0, 3.25]).unwrap());
    store.insert("frozen", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
    let trainable: BTreeSet<String> = ["w".to_string()].into();
    let report = finite_diff_check::<_, TensorError>(
        &store,
        &trainable,
        GradCheckConfig { step: 1e-3, tolerance: 1e-6, floor: 1e-6 },
        |tape, params| {
            let w = tape.param("w", params.get("w").unwrap(), true);
            let f = tape.param("frozen", params.get("frozen").unwrap(), false);
            let sq = tape.mul(w, w)?;
            let s = tape.sum(sq);
            let fs = tape.sum(f);
            tape.add(s, fs)
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.get("w").unwrap().max_rel_error < 1e-6);
    assert!(report.get("frozen").is_none());
}

#[test]
fn non_finite_loss_is_reported() {
    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::new(vec![1], vec![0.0]).unwrap());
    let trainable: BTreeSet<String> = ["w".to_string()].into();
    let result = finite_diff_check::<_, TensorError>(&store, &trainable, GradCheckConfig::default(), |tape, p| {
        let w = tape.param("w", p.get("w").unwrap(), true);
        Ok(tape.scale(w, f64::INFINITY))
    });
    assert!(matches!(result, Err(TensorError::NonFinite(_))));
}

#[test]
fn seeded_computation_is_bitwise_repeatable() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = random(&[8, 16], &mut rng).cast::<f32>();
        let b = random(&[16, 16], &mut rng).cast::<f32>();
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(a, true);
        let b = tape.constant(b);
        let y = tape.matmul(a, b).unwrap();
        let spec = AttentionSpec { heads: 4, causal: true, segments: vec![(0, 5), (5, 3)] };
        let z = tape.attention(y, y, y, spec).unwrap();
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap().get(&tape, a).unwrap();
        (tape.value(z).clone(), g)
    };
    let (z1, g1) = run();
    let (z2, g2) = run();
    assert!(z1.bitwise_eq(&z2) && g1.bitwise_eq(&g2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_normalized_and_shift_invariant(
        rows in prop::collection::vec(prop::collection::vec(-30.0f32..30.0, 1..9), 1..5),
        shift in -500.0f32..500.0,
    ) {
        let width = rows[0].len();
        let rows: Vec<Vec<f32>> = rows.into_iter().map(|mut r| { r.resize(width, 0.0); r }).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let shifted = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + shift).collect()).unwrap();
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(x);
        let b = tape.constant(shifted);
        let pa = tape.softmax(a).unwrap();
        let pb = tape.softmax(b).unwrap();
        for row in tape.value(pa).data().chunks(width) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        for (p, q) in tape.value(pa).data().iter().zip(tape.value(pb).data()) {
            prop_assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn composed_graph_gradient_matches_differences(seed in 0u64..1000, rows in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[rows, 4], &mut rng), random(&[4, 4], &mut rng), random(&[4], &mut rng)];
        for which in 0..3 {
            let err = fd_rel_error(&inputs, which, 1e-5, |t, v| {
                let h = t.matmul(v[0], v[1]).unwrap();
                let h = t.add_row(h, v[2]).unwrap();
                let h = t.gelu(h);
                let ones = t.constant(Tensor::full(vec![4], 1.0));
                let zeros = t.constant(Tensor::zeros(vec![4]));
                let h = t.layer_norm(h, ones, zeros, 1e-5).unwrap();
                let spec = AttentionSpec { heads: 2, causal: true, segments: vec![(0, rows)] };
                let a = t.attention(h, h, h, spec).unwrap();
                let r = t.add(a, h).unwrap();
                probe(t, r)
            });
            prop_assert!(err < 1e-4, "input {}: {}", which, err);
        }
    }
}
