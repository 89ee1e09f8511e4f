use mutan_core::tensor::{outer_product, tucker_reconstruct};
use mutan_core::{Matrix, Mode, Tensor3};
use proptest::prelude::*;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn tensor(dims: [usize; 3]) -> impl Strategy<Value = Tensor3> {
    values(dims.iter().product()).prop_map(move |d| Tensor3::from_vec(dims, d).unwrap())
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    values(rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn dims() -> impl Strategy<Value = [usize; 3]> {
    (1usize..=5, 1usize..=5, 1usize..=5).prop_map(|(a, b, c)| [a, b, c])
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1e-300f64, |m, x| m.max(x.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Six nested loops over the elementwise expansion.
fn brute_force_tucker(core: &Tensor3, wq: &Matrix, wv: &Matrix, wo: &Matrix) -> Vec<f64> {
    let [t1, t2, t3] = core.dims();
    let (d1, d2, d3) = (wq.rows(), wv.rows(), wo.rows());
    let mut out = vec![0.0; d1 * d2 * d3];
    for i in 0..d1 {
        for j in 0..d2 {
            for k in 0..d3 {
                let mut s = 0.0;
                for l in 0..t1 {
                    for m in 0..t2 {
                        for n in 0..t3 {
                            s += core.get(l, m, n) * wq.get(i, l) * wv.get(j, m) * wo.get(k, n);
                        }
                    }
                }
                out[(i * d2 + j) * d3 + k] = s;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_mode_product_is_exact(t in dims().prop_flat_map(tensor), mode_idx in 0usize..3) {
        let mode = Mode::ALL[mode_idx];
        let id = Matrix::identity(t.dim(mode));
        prop_assert_eq!(t.mode_product(&id, mode).unwrap(), t);
    }

    #[test]
    fn distinct_mode_products_commute(
        (t, a, b) in tensor([4, 5, 6]).prop_flat_map(|t| (Just(t), matrix(3, 4), matrix(2, 6)))
    ) {
        let one_then_three = t.mode_product(&a, Mode::One).unwrap().mode_product(&b, Mode::Three).unwrap();
        let three_then_one = t.mode_product(&b, Mode::Three).unwrap().mode_product(&a, Mode::One).unwrap();
        prop_assert!(max_rel(one_then_three.data(), three_then_one.data()) < 1e-12);
    }

    #[test]
    fn tucker_matches_elementwise_expansion(
        (core, wq, wv, wo) in dims().prop_flat_map(|[a, b, c]| {
            (tensor([a, b, c]), 1usize..=5, 1usize..=5, 1usize..=5)
                .prop_flat_map(move |(core, i, j, k)| (Just(core), matrix(i, a), matrix(j, b), matrix(k, c)))
        })
    ) {
        let fast = tucker_reconstruct(&core, &wq, &wv, &wo).unwrap();
        let slow = brute_force_tucker(&core, &wq, &wv, &wo);
        prop_assert!(max_rel(fast.data(), &slow) < 1e-12);
    }

    #[test]
    fn bilinear_matches_double_loop(
        (t, q, v) in dims().prop_flat_map(|d| (tensor(d), values(d[0]), values(d[1])))
    ) {
        let [d1, d2, d3] = t.dims();
        let mut expected = vec![0.0; d3];
        for i in 0..d1 {
            for j in 0..d2 {
                for (k, e) in expected.iter_mut().enumerate() {
                    *e += q[i] * v[j] * t.get(i, j, k);
                }
            }
        }
        let y = t.bilinear(&q, &v).unwrap();
        prop_assert!(max_rel(&y, &expected) < 1e-12);
    }

    #[test]
    fn outer_product_entries(a in values(3), b in values(4)) {
        let m = outer_product(&a, &b);
        for i in 0..3 {
            for j in 0..4 {
                prop_assert_eq!(m.get(i, j), a[i] * b[j]);
            }
        }
    }
}

#[test]
fn random_tucker_example_against_loops() {
    let core = Tensor3::from_fn([2, 3, 2], |i, j, k| (i as f64 - 0.5) * (j as f64 + 1.0) - 0.3 * k as f64);
    let wq = wave(3, 2, 1.0);
    let wv = wave(4, 3, 2.0);
    let wo = wave(5, 2, 3.0);
    let fast = tucker_reconstruct(&core, &wq, &wv, &wo).unwrap();
    assert!(max_rel(fast.data(), &brute_force_tucker(&core, &wq, &wv, &wo)) < 1e-12);
}

fn wave(rows: usize, cols: usize, phase: f64) -> Matrix {
    let data = (0..rows * cols).map(|i| (i as f64 * 0.7 + phase).sin()).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

#[test]
fn zero_dims_and_non_finite_rejected() {
    assert!(Matrix::from_vec(0, 2, vec![]).is_err());
    assert!(Tensor3::from_vec([1, 0, 1], vec![]).is_err());
    assert!(Matrix::from_vec(1, 1, vec![f64::NAN]).is_err());
    assert!(Tensor3::from_vec([1, 1, 1], vec![f64::INFINITY]).is_err());
}

#[test]
fn mode_mismatch_names_the_mode() {
    let t = Tensor3::zeros([2, 3, 4]);
    let err = t.mode_product(&Matrix::zeros(2, 5), Mode::Two).unwrap_err().to_string();
    assert!(err.contains("mode 2"), "{err}");
    assert!(err.contains('3') && err.contains('5'), "{err}");
}
