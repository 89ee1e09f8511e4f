use mutan_core::sketch::{circular_convolution, sketch_outer, CountSketchPlan};
use mutan_core::{FusionConfig, FusionOperator, Scheme};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian_like(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1e-300f64, |m, x| m.max(x.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Flattens `q ⊗ v` and hashes every entry with the composite hash
/// `(h_q[i] + h_v[j]) mod d` and sign `s_q[i]·s_v[j]`, read off the plans.
fn joint_sketch_of_outer(pq: &CountSketchPlan, pv: &CountSketchPlan, q: &[f64], v: &[f64]) -> Vec<f64> {
    let d = pq.output_dim();
    let flat: Vec<(usize, f64)> = q
        .iter()
        .enumerate()
        .flat_map(|(i, &qi)| {
            v.iter().enumerate().map(move |(j, &vj)| {
                let k = (pq.hash()[i] + pv.hash()[j]) % d;
                (k, pq.signs()[i] * pv.signs()[j] * qi * vj)
            })
        })
        .collect();
    let mut out = vec![0.0; d];
    for (k, x) in flat {
        out[k] += x;
    }
    out
}

#[test]
fn convolution_identity_over_100_seeds() {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let pq = CountSketchPlan::new(8, 16, seed).unwrap();
        let pv = CountSketchPlan::new(8, 16, seed ^ 0x9e37_79b9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let q = gaussian_like(&mut rng, 8);
        let v = gaussian_like(&mut rng, 8);
        let fast = sketch_outer(&pq, &pv, &q, &v).unwrap();
        let slow = joint_sketch_of_outer(&pq, &pv, &q, &v);
        worst = worst.max(max_rel(&fast, &slow));
    }
    assert!(worst < 1e-9, "worst relative error {worst}");
}

#[test]
fn unbiased_squared_norm_over_1000_seeds() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = gaussian_like(&mut rng, 8);
    let v = gaussian_like(&mut rng, 8);
    let target = q.iter().map(|x| x * x).sum::<f64>() * v.iter().map(|x| x * x).sum::<f64>();
    let seeds = 1000u64;
    let mean = (0..seeds)
        .map(|seed| {
            let pq = CountSketchPlan::new(8, 256, 2 * seed).unwrap();
            let pv = CountSketchPlan::new(8, 256, 2 * seed + 1).unwrap();
            let s = sketch_outer(&pq, &pv, &q, &v).unwrap();
            s.iter().map(|x| x * x).sum::<f64>()
        })
        .sum::<f64>()
        / seeds as f64;
    let rel = (mean - target).abs() / target;
    assert!(rel < 0.10, "mean {mean} vs {target} (rel {rel})");
}

#[test]
fn zero_input_sketches_to_zero() {
    let plan = CountSketchPlan::new(5, 3, 11).unwrap();
    assert_eq!(plan.sketch(&[0.0; 5]).unwrap(), vec![0.0; 3]);
}

#[test]
fn mcb_with_zero_question_outputs_zero() {
    let op = FusionOperator::init(FusionConfig::new(Scheme::Mcb, 8, 8, 5).with_sketch_dim(16).with_seed(3)).unwrap();
    let v: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
    let (y, _) = op.forward(&[0.0; 8], &v).unwrap();
    assert!(y.iter().all(|&x| x == 0.0), "{y:?}");
    let (y, _) = op.forward(&v, &[0.0; 8]).unwrap();
    assert!(y.iter().all(|&x| x == 0.0), "{y:?}");
}

#[test]
fn sketch_rejects_wrong_length() {
    let plan = CountSketchPlan::new(4, 3, 0).unwrap();
    assert!(plan.sketch(&[1.0; 5]).is_err());
    assert!(circular_convolution(&[1.0; 2], &[1.0; 3]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sketch_is_linear(
        seed in any::<u64>(),
        x in prop::collection::vec(-3.0f64..3.0, 9),
        y in prop::collection::vec(-3.0f64..3.0, 9),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let plan = CountSketchPlan::new(9, 4, seed).unwrap();
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = plan.sketch(&mixed).unwrap();
        let sx = plan.sketch(&x).unwrap();
        let sy = plan.sketch(&y).unwrap();
        for k in 0..4 {
            let rhs = alpha * sx[k] + beta * sy[k];
            prop_assert!((lhs[k] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn convolution_commutes(
        (a, b) in (1usize..12).prop_flat_map(|d| (
            prop::collection::vec(-3.0f64..3.0, d),
            prop::collection::vec(-3.0f64..3.0, d),
        ))
    ) {
        let ab = circular_convolution(&a, &b).unwrap();
        let ba = circular_convolution(&b, &a).unwrap();
        prop_assert!(max_rel(&ab, &ba) < 1e-12);
    }

    #[test]
    fn delta_is_convolution_identity(a in prop::collection::vec(-3.0f64..3.0, 1..12)) {
        let mut delta = vec![0.0; a.len()];
        delta[0] = 1.0;
        prop_assert_eq!(circular_convolution(&a, &delta).unwrap(), a);
    }

    #[test]
    fn plan_entries_in_range(input in 1usize..40, output in 1usize..20, seed in any::<u64>()) {
        let plan = CountSketchPlan::new(input, output, seed).unwrap();
        prop_assert_eq!(plan.hash().len(), input);
        prop_assert!(plan.hash().iter().all(|&h| h < output));
        prop_assert!(plan.signs().iter().all(|&s| s == 1.0 || s == -1.0));
        prop_assert_eq!(plan, CountSketchPlan::new(input, output, seed).unwrap());
    }
}
