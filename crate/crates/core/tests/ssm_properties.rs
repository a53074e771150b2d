use mam_core::numerics::ops::softplus;
use mam_core::ssm::{
    apply_implicit_attention, build_scan_steps, combine, discretize_entry, implicit_attention_from_parts,
    implicit_attention_matrix, scan_parallel, scan_sequential, selective_parameters, Discretization, ScanStep,
    SelectiveSsmParams,
};
use mam_core::{Array64, ParamSet64};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VARIANTS: [Discretization; 2] = [Discretization::Euler, Discretization::Zoh];

struct Instance {
    x: Array64,
    delta: Array64,
    a: Array64,
    b: Array64,
    c: Array64,
    d: Array64,
}

fn instance(seed: u64, l: usize, e: usize, n: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |shape: &[usize], lo: f64, hi: f64| Array64::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi));
    Instance {
        x: draw(&[l, e], -1.0, 1.0),
        delta: draw(&[l, e], 0.01, 1.5),
        a: draw(&[e, n], -3.0, -0.1),
        b: draw(&[l, n], -1.0, 1.0),
        c: draw(&[l, n], -1.0, 1.0),
        d: draw(&[e], -1.0, 1.0),
    }
}

impl Instance {
    fn steps(&self, variant: Discretization) -> Vec<ScanStep<f64>> {
        build_scan_steps(&self.x, &self.delta, &self.a, &self.b, &self.c, variant).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parallel_scan_matches_sequential(seed in any::<u64>(), l in 1usize..=64, e in 1usize..=4, n in 1usize..=4) {
        let inst = instance(seed, l, e, n);
        for variant in VARIANTS {
            let steps = inst.steps(variant);
            let seq = scan_sequential(&steps, &inst.x, &inst.d).unwrap();
            let par = scan_parallel(&steps, &inst.x, &inst.d).unwrap();
            prop_assert!(seq.max_abs_diff(&par) <= 1e-10);
        }
    }

    #[test]
    fn implicit_matrix_reproduces_scan(seed in any::<u64>(), l in 1usize..=8, e in 1usize..=3, n in 1usize..=4) {
        let inst = instance(seed, l, e, n);
        for variant in VARIANTS {
            let lambda = implicit_attention_from_parts(&inst.delta, &inst.a, &inst.b, &inst.c, variant).unwrap();
            for ch in 0..e {
                for i in 0..l {
                    for j in (i + 1)..l {
                        prop_assert_eq!(lambda.at(&[ch, i, j]), 0.0);
                    }
                }
            }
            let via_matrix = apply_implicit_attention(&lambda, &inst.x, &inst.d).unwrap();
            let via_scan = scan_sequential(&inst.steps(variant), &inst.x, &inst.d).unwrap();
            prop_assert!(via_matrix.max_abs_diff(&via_scan) <= 1e-8);
        }
    }

    #[test]
    fn discretized_decay_is_stable(delta in 1e-6f64..10.0, a in -20.0f64..-1e-3) {
        for variant in VARIANTS {
            let (a_bar, _) = discretize_entry(delta, a, variant);
            prop_assert!(a_bar > 0.0 && a_bar < 1.0);
        }
    }

    #[test]
    fn combiner_is_associative(s in proptest::array::uniform6(-2.0f64..2.0)) {
        let (s1, s2, s3) = ((s[0], s[1]), (s[2], s[3]), (s[4], s[5]));
        let left = combine(s3, combine(s2, s1));
        let right = combine(combine(s3, s2), s1);
        prop_assert!((left.0 - right.0).abs() <= 1e-12);
        prop_assert!((left.1 - right.1).abs() <= 1e-12);
    }

    #[test]
    fn zeroing_an_input_leaves_earlier_outputs(seed in any::<u64>(), l in 2usize..=16, j_frac in 0.0f64..1.0) {
        let inst = instance(seed, l, 2, 3);
        let j = 1 + ((l - 1) as f64 * j_frac) as usize;
        let j = j.min(l - 1);
        let mut x2 = inst.x.clone();
        for ch in 0..2 {
            x2.data_mut()[j * 2 + ch] = 0.0;
        }
        for variant in VARIANTS {
            let y = scan_sequential(&inst.steps(variant), &inst.x, &inst.d).unwrap();
            let steps2 = build_scan_steps(&x2, &inst.delta, &inst.a, &inst.b, &inst.c, variant).unwrap();
            let y2 = scan_sequential(&steps2, &x2, &inst.d).unwrap();
            prop_assert_eq!(&y.data()[..j * 2], &y2.data()[..j * 2]);
        }
    }

    #[test]
    fn step_sizes_are_positive(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet64::new();
        let p = SelectiveSsmParams::init(&mut ps, "ssm", 4, 3, 2, 4, &mut rng).unwrap();
        let x = Array64::from_fn([5, 4], |_| rng.gen_range(-scale..scale));
        let sel = selective_parameters(&x, None, &p, &ps).unwrap();
        prop_assert!(sel.delta.data().iter().all(|&d| d > 0.0));
    }
}

#[test]
fn single_step_scans_reduce_to_one_term() {
    let inst = instance(17, 1, 3, 2);
    for variant in VARIANTS {
        let steps = inst.steps(variant);
        let seq = scan_sequential(&steps, &inst.x, &inst.d).unwrap();
        let par = scan_parallel(&steps, &inst.x, &inst.d).unwrap();
        for ch in 0..3 {
            let mut expect = inst.d.data()[ch] * inst.x.data()[ch];
            for s in 0..2 {
                expect += inst.c.data()[s] * steps[0].b_bar_x.at(&[ch, s]);
            }
            assert!((seq.data()[ch] - expect).abs() < 1e-15);
            assert!((par.data()[ch] - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn implicit_matrix_from_learned_parameters_matches_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut ps = ParamSet64::new();
    let p = SelectiveSsmParams::init(&mut ps, "ssm", 3, 4, 2, 3, &mut rng).unwrap();
    let x = Array64::from_fn([6, 3], |_| rng.gen_range(-1.0..1.0));
    for variant in VARIANTS {
        let lambda = implicit_attention_matrix(&x, &p, &ps, variant).unwrap();
        let sel = selective_parameters(&x, None, &p, &ps).unwrap();
        let steps = build_scan_steps(&x, &sel.delta, &p.a_matrix(&ps), &sel.b, &sel.c, variant).unwrap();
        let y = scan_sequential(&steps, &x, &ps[p.d]).unwrap();
        assert!(apply_implicit_attention(&lambda, &x, &ps[p.d]).unwrap().max_abs_diff(&y) <= 1e-8);
    }
}

#[test]
fn delta_is_softplus_of_low_rank_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParamSet64::new();
    let p = SelectiveSsmParams::init(&mut ps, "ssm", 3, 2, 2, 3, &mut rng).unwrap();
    let x = Array64::from_fn([1, 3], |_| rng.gen_range(-1.0..1.0));
    let sel = selective_parameters(&x, None, &p, &ps).unwrap();
    let (down, up, bias) = (&ps[p.dt_down], &ps[p.dt_up], &ps[p.dt_bias]);
    for ch in 0..3 {
        let mut pre = bias.data()[ch];
        for k in 0..2 {
            let low: f64 = (0..3).map(|i| x.data()[i] * down.at(&[i, k])).sum();
            pre += low * up.at(&[k, ch]);
        }
        assert!((sel.delta.data()[ch] - softplus(pre)).abs() < 1e-14);
    }
}
