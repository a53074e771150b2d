use mam_core::attention::{attention, attention_weights, AttentionParams};
use mam_core::numerics::ops::linear;
use mam_core::{Array64, ParamSet64, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seq(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Array64 {
    Array64::from_fn([1, l, d], |_| rng.gen_range(-1.0..1.0))
}

fn setup(seed: u64, heads: usize) -> (ChaCha8Rng, ParamSet64, AttentionParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet64::new();
    let p = AttentionParams::init(&mut ps, "attn", 4, heads, &mut rng).unwrap();
    (rng, ps, p)
}

fn run(ps: &ParamSet64, p: &AttentionParams, q: &Array64, kv: &Array64, causal: bool) -> Array64 {
    let tape = Tape::inference();
    let bound = ps.bind(&tape);
    attention(&tape.constant(q.clone()), &tape.constant(kv.clone()), p, &bound, causal).value().clone()
}

/// `W_O v + b_O` for a single `[D]` row.
fn project_out(ps: &ParamSet64, p: &AttentionParams, v: &[f64]) -> Vec<f64> {
    let row = Array64::new([1, v.len()], v.to_vec()).unwrap();
    linear(&row, &ps[p.output.weight], Some(&ps[p.output.bias])).into_vec()
}

#[test]
fn zero_query_and_key_weights_average_the_values() {
    let (mut rng, mut ps, p) = setup(1, 2);
    ps.zero_where(|n| n.contains(".query.") || n.contains(".key."));
    let (q, kv) = (seq(&mut rng, 5, 4), seq(&mut rng, 5, 4));
    let v = linear(&kv, &ps[p.value.weight], Some(&ps[p.value.bias]));
    for causal in [false, true] {
        let out = run(&ps, &p, &q, &kv, causal);
        for i in 0..5 {
            let upto = if causal { i + 1 } else { 5 };
            let mean: Vec<f64> =
                (0..4).map(|c| (0..upto).map(|j| v.at(&[0, j, c])).sum::<f64>() / upto as f64).collect();
            let expect = project_out(&ps, &p, &mean);
            for (c, e) in expect.iter().enumerate() {
                assert!((out.at(&[0, i, c]) - e).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn single_token_returns_projected_value() {
    let (mut rng, ps, p) = setup(2, 1);
    let (q, kv) = (seq(&mut rng, 1, 4), seq(&mut rng, 1, 4));
    let v = linear(&kv, &ps[p.value.weight], Some(&ps[p.value.bias]));
    let expect = project_out(&ps, &p, v.data());
    let out = run(&ps, &p, &q, &kv, false);
    for (a, b) in out.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn causal_mask_hides_later_keys() {
    let (mut rng, ps, p) = setup(3, 2);
    let (q, kv) = (seq(&mut rng, 6, 4), seq(&mut rng, 6, 4));
    let base = run(&ps, &p, &q, &kv, true);
    for j in 1..6 {
        let mut kv2 = kv.clone();
        for c in 0..4 {
            kv2.data_mut()[j * 4 + c] += 1.0;
        }
        let moved = run(&ps, &p, &q, &kv2, true);
        assert_eq!(&base.data()[..j * 4], &moved.data()[..j * 4]);
    }
}

proptest! {
    #[test]
    fn weights_are_row_stochastic(seed in any::<u64>(), lq in 1usize..7, heads in 1usize..=2, causal in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = seq(&mut rng, lq, 4).map(|v| 3.0 * v);
        let k = seq(&mut rng, lq, 4).map(|v| 3.0 * v);
        let w = attention_weights(&q, &k, heads, causal);
        for h in 0..heads {
            for i in 0..lq {
                let row: Vec<f64> = (0..lq).map(|j| w.at(&[0, h, i, j])).collect();
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                if causal {
                    prop_assert!(row[i + 1..].iter().all(|&p| p == 0.0));
                }
            }
        }
    }
}
