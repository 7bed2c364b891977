use edgeformer::autodiff::{grad_check, multi_head_attention, relative_error, AttentionVars, Mode, Tape, Tensor, DEFAULT_STEP};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..6, 1usize..9).prop_flat_map(|(r, c)| {
        prop::collection::vec(-30.0f64..30.0, r * c).prop_map(move |v| (r, c, v))
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((r, c, v) in matrix()) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![r, c], v).unwrap());
        let y = tape.softmax(x);
        for row in tape.value(y).data().chunks(c) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp((r, c, v) in matrix(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![r, c], v.clone()).unwrap());
        let loss = tape.softmax_cross_entropy(x, &targets).unwrap();
        let want = v
            .chunks(c)
            .zip(&targets)
            .map(|(row, &t)| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|e| (e - m).exp()).sum::<f64>().ln() - row[t]
            })
            .sum::<f64>()
            / r as f64;
        prop_assert!((tape.value(loss).data()[0] - want).abs() <= 1e-12 * (1.0 + want.abs()));
    }
}

#[test]
fn cross_entropy_rejects_out_of_range_targets() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(tape.softmax_cross_entropy(x, &[0, 2]).is_err());
    assert!(tape.softmax_cross_entropy(x, &[0]).is_err());
}

#[test]
fn inverted_dropout_is_unbiased() {
    let n = 100_000;
    for p in [0.1, 0.5, 0.8] {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(&[n], 3.0));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = tape.dropout(x, p, Mode::Train, &mut rng).unwrap();
        let mean = tape.value(y).data().iter().sum::<f64>() / n as f64;
        assert!((mean - 3.0).abs() < 0.03, "p={p}: mean {mean}");
        let eval = tape.dropout(x, p, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(eval).data(), tape.value(x).data());
    }
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[4]));
    assert!(tape.dropout(x, 1.0, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn attention_gradients_for_several_head_counts() {
    let (s, b, e) = (5, 3, 12);
    for heads in [1, 2, 3, 4] {
        let mut rng = ChaCha8Rng::seed_from_u64(heads as u64);
        let mut inputs = vec![random(&[s, b, e], &mut rng)];
        for _ in 0..4 {
            inputs.push(random(&[e, e], &mut rng));
            inputs.push(random(&[e], &mut rng));
        }
        let w: Vec<f64> = (0..s * b * e).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = grad_check(
            move |t, v| {
                let p = AttentionVars {
                    wq: v[1],
                    bq: v[2],
                    wk: v[3],
                    bk: v[4],
                    wv: v[5],
                    bv: v[6],
                    wo: v[7],
                    bo: v[8],
                };
                let y = multi_head_attention(t, v[0], &p, heads)?;
                t.weighted_sum(y, &w)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        // Softmax ignores a constant shift, so the key bias has an exactly zero gradient.
        assert!(report.analytic[4].iter().all(|g| g.abs() < 1e-12));
        assert!(report.numeric[4].iter().all(|g| g.abs() < 1e-7));
        for (i, (a, n)) in report.analytic.iter().zip(&report.numeric).enumerate() {
            if i == 4 {
                continue;
            }
            for (&x, &y) in a.iter().zip(n) {
                let err = relative_error(x, y);
                assert!(err < 1e-4, "heads {heads}, input {i}: {x:e} vs {y:e}");
            }
        }
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = tape.param(random(&[2, 1, 6], &mut rng));
    let mut v = Vec::new();
    for _ in 0..4 {
        v.push(tape.param(random(&[6, 6], &mut rng)));
        v.push(tape.param(random(&[6], &mut rng)));
    }
    let p = AttentionVars { wq: v[0], bq: v[1], wk: v[2], bk: v[3], wv: v[4], bv: v[5], wo: v[6], bo: v[7] };
    assert!(multi_head_attention(&mut tape, x, &p, 4).is_err());
    assert!(multi_head_attention(&mut tape, x, &p, 0).is_err());
    assert!(multi_head_attention(&mut tape, x, &p, 3).is_ok());
}
