use super::*;
use crate::gradcheck::{check_fusion, relative_error};
use crate::tensor::{tucker_reconstruct, Mode};

fn normal_ish(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect()
}

fn mat(seed: u64, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, normal_ish(seed, rows * cols)).unwrap()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn small_mutan(tanh: bool, seed: u64) -> FusionOperator {
    FusionOperator::init(
        FusionConfig::new(Scheme::Mutan, 3, 4, 5)
            .with_projections(2, 3, 2)
            .with_rank(2)
            .with_tanh(tanh)
            .with_seed(seed),
    )
    .unwrap()
}

#[test]
fn init_is_deterministic() {
    let a = small_mutan(true, 9);
    let b = small_mutan(true, 9);
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), small_mutan(true, 10).params());
}

#[test]
fn init_respects_fan_in_bound() {
    let op = small_mutan(true, 1);
    let FusionParams::Mutan { wq, wo, .. } = op.params() else { unreachable!() };
    assert!(wq.data().iter().all(|x| x.abs() <= 1.0 / 3f64.sqrt()));
    assert!(wo.data().iter().all(|x| x.abs() <= 1.0 / 2f64.sqrt()));
}

#[test]
fn zero_rank_rejected() {
    let cfg = FusionConfig::new(Scheme::Mutan, 3, 4, 5).with_projections(2, 3, 2).with_rank(0);
    assert!(matches!(FusionOperator::init(cfg), Err(Error::InvalidConfig(_))));
}

#[test]
fn full_bilinear_examples() {
    let t = Tensor3::from_fn([2, 2, 2], |i, j, k| (i + 2 * j + 4 * k) as f64);
    assert_eq!(full_bilinear_forward(&t, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![38.0, 122.0]);
    let zeros = Tensor3::zeros([2, 3, 2]);
    assert_eq!(full_bilinear_forward(&zeros, &[1.0, 2.0], &[3.0, 4.0, 5.0]).unwrap(), vec![0.0; 2]);
    let ones = Tensor3::from_fn([2, 3, 4], |_, _, _| 1.0);
    let y = full_bilinear_forward(&ones, &[1.0, -3.0], &[0.5, 2.0, 1.5]).unwrap();
    assert_eq!(y, vec![-8.0; 4]);
    assert!(full_bilinear_forward(&ones, &[1.0], &[0.5, 2.0, 1.5]).is_err());
}

#[test]
fn full_bilinear_operator_matches_reference() {
    let t = Tensor3::from_fn([2, 2, 2], |i, j, k| (i + 2 * j + 4 * k) as f64);
    let op = FusionOperator::from_params(
        FusionConfig::new(Scheme::FullBilinear, 2, 2, 2),
        FusionParams::FullBilinear { t },
    )
    .unwrap();
    assert_eq!(op.forward(&[1.0, 2.0], &[3.0, 4.0]).unwrap().0, vec![38.0, 122.0]);
}

#[test]
fn zero_slices_give_zero_output() {
    let mut op = small_mutan(true, 2);
    let FusionParams::Mutan { wq, wv, n, wo, .. } = op.params().clone() else { unreachable!() };
    let m = vec![Matrix::zeros(2, 2); 2];
    op.set_params(FusionParams::Mutan { wq, wv, m, n, wo }).unwrap();
    let (y, _) = op.forward(&[1.0, -2.0, 0.5], &[3.0, 0.1, 0.2, -1.0]).unwrap();
    assert_eq!(y, vec![0.0; 5]);
}

#[test]
fn identity_slice_mutan_is_mlb() {
    let (wq, wv, wo) = (mat(1, 3, 2), mat(2, 4, 2), mat(3, 5, 2));
    let mutan = FusionOperator::from_params(
        FusionConfig::new(Scheme::Mutan, 3, 4, 5)
            .with_projections(2, 2, 2)
            .with_rank(1)
            .with_tanh(false),
        FusionParams::Mutan {
            wq: wq.clone(),
            wv: wv.clone(),
            m: vec![Matrix::identity(2)],
            n: vec![Matrix::identity(2)],
            wo: wo.clone(),
        },
    )
    .unwrap();
    let mlb = FusionOperator::from_params(
        FusionConfig::new(Scheme::Mlb, 3, 4, 5).with_rank(2).with_tanh(false),
        FusionParams::Mlb { wq, wv, wo },
    )
    .unwrap();
    let (q, v) = (normal_ish(4, 3), normal_ish(5, 4));
    let a = mutan.forward(&q, &v).unwrap().0;
    let b = mlb.forward(&q, &v).unwrap().0;
    assert!(max_rel(&a, &b) < 1e-14);
}

#[test]
fn mutan_matches_reconstruction() {
    for seed in 0..5 {
        let op = small_mutan(false, seed);
        let (q, v) = (normal_ish(100 + seed, 3), normal_ish(200 + seed, 4));
        let y = op.forward(&q, &v).unwrap().0;
        let FusionParams::Mutan { wq, wv, m, n, wo } = op.params() else { unreachable!() };
        let t = tucker_reconstruct(&core_from_slices(m, n).unwrap(), wq, wv, wo).unwrap();
        let reference = full_bilinear_forward(&t, &q, &v).unwrap();
        assert!(max_rel(&y, &reference) < 1e-10, "seed {seed}");
    }
}

#[test]
fn core_from_slices_outer_product() {
    let m = Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
    let n = Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
    let core = core_from_slices(&[m.clone()], &[n]).unwrap();
    assert_eq!(core.slice3(0).data(), &[3.0, 4.0, 6.0, 8.0]);
    let zero = core_from_slices(&[m], &[Matrix::zeros(2, 1)]).unwrap();
    assert!(zero.data().iter().all(|&x| x == 0.0));
}

#[test]
fn core_from_slices_shape_errors() {
    assert!(core_from_slices(&[mat(1, 2, 3)], &[mat(2, 2, 4)]).is_err());
    assert!(core_from_slices(&[mat(1, 2, 3), mat(2, 3, 3)], &[mat(2, 2, 3), mat(3, 2, 3)]).is_err());
    assert!(core_from_slices(&[mat(1, 2, 3)], &[]).is_err());
}

#[test]
fn slices_have_rank_at_most_r() {
    for rank in 1..=4 {
        let (t_q, t_v, t_o) = (6, 7, 3);
        let m: Vec<Matrix> = (0..rank).map(|r| mat(10 + r as u64, t_q, t_o)).collect();
        let n: Vec<Matrix> = (0..rank).map(|r| mat(20 + r as u64, t_v, t_o)).collect();
        let core = core_from_slices(&m, &n).unwrap();
        for k in 0..t_o {
            let s = core.slice3(k);
            let dm = nalgebra::DMatrix::from_row_slice(t_q, t_v, s.data());
            let sv = dm.singular_values();
            let mut sv: Vec<f64> = sv.iter().copied().collect();
            sv.sort_by(|a, b| b.total_cmp(a));
            assert!(sv[rank - 1] > 1e-6);
            assert!(sv[rank..].iter().all(|&x| x < 1e-10), "rank {rank} slice {k}: {sv:?}");
        }
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    for scheme in Scheme::ALL {
        let op = desk_operator(scheme, true, 3);
        let (q, v) = (normal_ish(1, 4), normal_ish(2, 3));
        let (_, cache) = op.forward(&q, &v).unwrap();
        let g = op.backward(&cache, &[0.0; 3]).unwrap();
        assert_eq!(g.params.max_abs(), 0.0, "{scheme}");
        assert!(g.d_q.iter().chain(&g.d_v).all(|&x| x == 0.0));
    }
}

fn desk_operator(scheme: Scheme, tanh: bool, seed: u64) -> FusionOperator {
    let cfg = FusionConfig::new(scheme, 4, 3, 3)
        .with_projections(3, 2, 4)
        .with_rank(2)
        .with_sketch_dim(5)
        .with_tanh(tanh)
        .with_seed(seed);
    FusionOperator::init(cfg).unwrap()
}

#[test]
fn gradients_match_finite_differences() {
    for scheme in Scheme::ALL {
        for seed in 0..2 {
            let op = desk_operator(scheme, true, seed);
            let (q, v, dy) = (normal_ish(seed + 7, 4), normal_ish(seed + 8, 3), normal_ish(seed + 9, 3));
            let report = check_fusion(&op, &q, &v, &dy, 1e-5).unwrap();
            assert!(report.max_rel_error < 1e-5, "{scheme} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn injected_fault_is_detected() {
    let mut op = desk_operator(Scheme::Mutan, true, 0);
    op.inject_backward_fault();
    let (q, v, dy) = (normal_ish(7, 4), normal_ish(8, 3), normal_ish(9, 3));
    assert!(check_fusion(&op, &q, &v, &dy, 1e-5).unwrap().max_rel_error > 1e-2);
}

#[test]
fn linear_mutan_input_jacobian() {
    let op = small_mutan(false, 3);
    let (q, v) = (normal_ish(30, 3), normal_ish(31, 4));
    let (y0, cache) = op.forward(&q, &v).unwrap();
    for a in 0..5 {
        let mut dy = vec![0.0; 5];
        dy[a] = 1.0;
        let g = op.backward(&cache, &dy).unwrap();
        for i in 0..3 {
            // y is linear in q when v is held fixed
            let mut qi = q.clone();
            qi[i] += 1.0;
            let column = op.forward(&qi, &v).unwrap().0[a] - y0[a];
            assert!(relative_error(g.d_q[i], column) < 1e-8);
        }
    }
}

#[test]
fn tucker_core_from_slices_matches_mutan() {
    let mutan = small_mutan(true, 4);
    let FusionParams::Mutan { wq, wv, m, n, wo } = mutan.params().clone() else { unreachable!() };
    let tucker = FusionOperator::from_params(
        FusionConfig::new(Scheme::TuckerFusion, 3, 4, 5).with_projections(2, 3, 2),
        FusionParams::Tucker {
            core: core_from_slices(&m, &n).unwrap(),
            wq,
            wv,
            wo,
        },
    )
    .unwrap();
    let (q, v) = (normal_ish(40, 3), normal_ish(41, 4));
    let a = mutan.forward(&q, &v).unwrap().0;
    let b = tucker.forward(&q, &v).unwrap().0;
    assert!(max_rel(&a, &b) < 1e-12);
}

#[test]
fn identity_core_tucker_matches_mlb() {
    let (wq, wv, wo) = (mat(5, 3, 3), mat(6, 4, 3), mat(7, 2, 3));
    let tucker = FusionOperator::from_params(
        FusionConfig::new(Scheme::TuckerFusion, 3, 4, 2).with_projections(3, 3, 3),
        FusionParams::Tucker {
            core: Tensor3::identity(3),
            wq: wq.clone(),
            wv: wv.clone(),
            wo: wo.clone(),
        },
    )
    .unwrap();
    let mlb = FusionOperator::from_params(
        FusionConfig::new(Scheme::Mlb, 3, 4, 2).with_rank(3),
        FusionParams::Mlb { wq, wv, wo },
    )
    .unwrap();
    let (q, v) = (normal_ish(50, 3), normal_ish(51, 4));
    assert_eq!(tucker.forward(&q, &v).unwrap().0, mlb.forward(&q, &v).unwrap().0);
}

#[test]
fn mutan_slices_can_express_identity_core() {
    // M_r = N_r = e_r e_rᵀ gives Tc[l, m, k] = δ(l = m = k)
    let t = 3;
    let unit = |r: usize| {
        let mut e = Matrix::zeros(t, t);
        e.set(r, r, 1.0);
        e
    };
    let slices: Vec<Matrix> = (0..t).map(unit).collect();
    let core = core_from_slices(&slices, &slices).unwrap();
    assert_eq!(core, Tensor3::identity(t));
}

#[test]
fn mlb_by_hand() {
    let op = FusionOperator::from_params(
        FusionConfig::new(Scheme::Mlb, 3, 3, 3).with_rank(3).with_tanh(false),
        FusionParams::Mlb {
            wq: Matrix::identity(3),
            wv: Matrix::identity(3),
            wo: Matrix::identity(3),
        },
    )
    .unwrap();
    assert_eq!(op.forward(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap().0, vec![4.0, 10.0, 18.0]);
}

#[test]
fn concat_examples() {
    let cfg = FusionConfig::new(Scheme::Concat, 2, 3, 5);
    let zero = FusionOperator::from_params(
        cfg.clone(),
        FusionParams::Concat {
            w: Matrix::zeros(5, 5),
        },
    )
    .unwrap();
    assert_eq!(zero.forward(&[1.0, 2.0], &[3.0, 4.0, 5.0]).unwrap().0, vec![0.0; 5]);
    let id = FusionOperator::from_params(cfg, FusionParams::Concat { w: Matrix::identity(5) }).unwrap();
    assert_eq!(
        id.forward(&[1.0, 2.0], &[3.0, 4.0, 5.0]).unwrap().0,
        vec![1.0, 2.0, 3.0, 4.0, 5.0]
    );
    assert!(id.forward(&[1.0], &[3.0, 4.0, 5.0]).is_err());
}

#[test]
fn stale_cache_rejected() {
    let mut op = small_mutan(true, 5);
    let (_, cache) = op.forward(&[0.1, 0.2, 0.3], &[1.0, 0.0, -1.0, 0.5]).unwrap();
    let params = op.params().clone();
    op.set_params(params).unwrap();
    assert!(matches!(op.backward(&cache, &[1.0; 5]), Err(Error::StaleCache(_))));
    let other = small_mutan(true, 5);
    assert!(other.backward(&cache, &[1.0; 5]).is_err());
}

#[test]
fn tanh_projections_are_bounded() {
    let op = small_mutan(true, 6);
    let q: Vec<f64> = vec![50.0, -80.0, 120.0];
    let (_, cache) = op.forward(&q, &[30.0, 40.0, -90.0, 10.0]).unwrap();
    let (ql, vl) = cache.projections();
    assert!(ql.iter().chain(vl).all(|x| x.abs() <= 1.0));
    let (_, cache) = op.forward(&[0.3, -0.2, 0.1], &[0.1, 0.4, -0.2, 0.3]).unwrap();
    let (ql, vl) = cache.projections();
    assert!(ql.iter().chain(vl).all(|x| x.abs() < 1.0));
}

#[test]
fn rank_parts_sum_to_full_output() {
    let op = small_mutan(true, 8);
    let (q, v) = (normal_ish(60, 3), normal_ish(61, 4));
    let (y, cache) = op.forward(&q, &v).unwrap();
    let mut z = vec![0.0; 2];
    for zr in cache.z_parts() {
        axpy(1.0, zr, &mut z);
    }
    assert!(max_rel(&z, cache.z()) < 1e-14);
    let mut total = vec![0.0; 5];
    for yr in op.rank_outputs(&q, &v).unwrap() {
        axpy(1.0, &yr, &mut total);
    }
    assert!(max_rel(&total, &y) < 1e-14);
    assert!(op.forward_masked(&q, &v, 2).is_err());
}

#[test]
fn effective_tucker_for_every_bilinear_scheme() {
    for scheme in [Scheme::FullBilinear, Scheme::TuckerFusion, Scheme::Mutan, Scheme::Mlb, Scheme::Mcb] {
        let op = desk_operator(scheme, false, 11);
        let (q, v) = (normal_ish(70, 4), normal_ish(71, 3));
        let y = op.forward(&q, &v).unwrap().0;
        let t = op.effective_tucker().unwrap().reconstruct().unwrap();
        assert!(max_rel(&y, &full_bilinear_forward(&t, &q, &v).unwrap()) < 1e-10, "{scheme}");
    }
    assert!(desk_operator(Scheme::Concat, false, 0).effective_tucker().is_err());
    assert!(desk_operator(Scheme::Mutan, true, 0).effective_tucker().is_err());
}

#[test]
fn pack_unpack_round_trip() {
    for scheme in Scheme::ALL {
        let op = desk_operator(scheme, true, 12);
        let packed = op.pack();
        assert_eq!(packed.len(), op.param_count());
        let mut other = desk_operator(scheme, true, 13);
        other.unpack(&packed).unwrap();
        assert_eq!(other.params(), op.params());
    }
}

#[test]
fn mode_products_agree_with_bilinear_apply() {
    let core = Tensor3::from_fn([2, 3, 4], |i, j, k| ((i * 7 + j * 3 + k) % 5) as f64 - 2.0);
    let (a, b) = (vec![0.5, -1.5], vec![1.0, 2.0, -0.25]);
    let via_modes = core.mode_vector_product(&a, Mode::One).unwrap().vecmat(&b).unwrap();
    assert_eq!(bilinear_apply(&core, &a, &b), via_modes);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn linear_operators_equal_their_reconstruction(
            seed in 0u64..10_000,
            scheme_idx in 0usize..5,
            d_q in 1usize..6,
            d_v in 1usize..6,
            d_out in 1usize..6,
            t in 1usize..5,
        ) {
            let scheme = [Scheme::FullBilinear, Scheme::TuckerFusion, Scheme::Mutan, Scheme::Mlb, Scheme::Mcb][scheme_idx];
            let cfg = FusionConfig::new(scheme, d_q, d_v, d_out)
                .with_projections(t, t, t)
                .with_rank(1.max(t / 2))
                .with_sketch_dim(t + 1)
                .with_tanh(false)
                .with_seed(seed);
            let op = FusionOperator::init(cfg).unwrap();
            let (q, v) = (normal_ish(seed ^ 1, d_q), normal_ish(seed ^ 2, d_v));
            let y = op.forward(&q, &v).unwrap().0;
            let t = op.effective_tucker().unwrap().reconstruct().unwrap();
            let reference = full_bilinear_forward(&t, &q, &v).unwrap();
            let scale = reference.iter().fold(1e-12f64, |m, x| m.max(x.abs()));
            for (a, b) in y.iter().zip(&reference) {
                prop_assert!((a - b).abs() / scale < 1e-10);
            }
        }

        #[test]
        fn tanh_keeps_projections_in_open_interval(seed in 0u64..10_000, scale in 0.0f64..4.0) {
            let op = small_mutan(true, seed);
            let q: Vec<f64> = normal_ish(seed, 3).into_iter().map(|x| x * scale).collect();
            let v: Vec<f64> = normal_ish(seed + 1, 4).into_iter().map(|x| x * scale).collect();
            let (_, cache) = op.forward(&q, &v).unwrap();
            let (ql, vl) = cache.projections();
            prop_assert!(ql.iter().chain(vl).all(|x| x.abs() < 1.0));
        }
    }
}
