use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ris_core::channel::{
    complex_gaussian, composite_channel, group_channel, ris_difference_matrix, synth_geometric, GainRule,
    GeometricParams, PathCounts, SystemGeometry,
};
use ris_core::crb::{crb_unstructured, fim_eta, EtaLayout};
use ris_core::geometric::{composite_paths, reconstruct_composite};
use ris_core::linalg::{CMat, C64};
use ris_core::manifold::{steering, ula_steering, ura_steering, ArraySpec, SpatialFreq};
use ris_core::training::{
    assemble_measurement, dft_ris_sequence, hadamard_ris_sequence, noiseless_uplink, orthogonal_pilots,
    random_ris_sequence, TrainingPlan,
};

fn freq() -> impl Strategy<Value = SpatialFreq> {
    (-10.0..10.0f64, -10.0..10.0f64).prop_map(|(a, b)| SpatialFreq::new(a, b))
}

fn ura() -> impl Strategy<Value = ArraySpec> {
    (1..6usize, 1..6usize).prop_map(|(x, y)| ArraySpec::ura(x, y, 0.5, 0.5).unwrap())
}

fn peak<R: nalgebra::Dim, C: nalgebra::Dim, S: nalgebra::RawStorage<C64, R, C>>(m: &nalgebra::Matrix<C64, R, C, S>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn geometry(m: usize, ris: ArraySpec, k: usize) -> SystemGeometry {
    SystemGeometry::single_user(m, ris, k, 1.0, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn steering_is_unit_modulus(w in freq(), spec in ura()) {
        for z in steering(w, &spec).iter() {
            prop_assert!((z.norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn frequencies_wrap_into_half_open_interval(a in -50.0..50.0f64, b in -50.0..50.0f64) {
        let w = SpatialFreq::new(a, b);
        for c in [w.w1, w.w2] {
            prop_assert!(c > -std::f64::consts::PI && c <= std::f64::consts::PI);
        }
    }

    #[test]
    fn planar_steering_is_kronecker(w in freq(), spec in ura()) {
        let a = ura_steering(w, &spec).unwrap();
        let x = ula_steering(w.w1, spec.count_x);
        let y = ula_steering(w.w2, spec.count_y);
        for i in 0..spec.count_x {
            for j in 0..spec.count_y {
                prop_assert!((a[i * spec.count_y + j] - x[i] * y[j]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn steering_conjugate_symmetry(w in freq(), spec in ura()) {
        let a = steering(w.neg(), &spec);
        let b = steering(w, &spec).map(|z| z.conj());
        prop_assert!(peak(&(a - b)) < 1e-13);
    }

    #[test]
    fn composite_is_blind_to_shift_and_scale(
        seed in any::<u64>(),
        shift in freq(),
        re in 0.2..3.0f64,
        phase in -3.0..3.0f64,
        d_h in 1..3usize,
        d_g in 1..3usize,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = geometry(3, ArraySpec::ura(3, 2, 0.5, 0.5).unwrap(), 2);
        let p = GeometricParams::random(&g, &PathCounts::uniform(d_h, d_g, 0, 1), GainRule::Unit, &mut rng).unwrap();
        let q = p.with_ambiguity(shift, C64::from_polar(re, phase));
        let a = composite_channel(&synth_geometric(&p, &g).unwrap(), false).unwrap();
        let b = composite_channel(&synth_geometric(&q, &g).unwrap(), false).unwrap();
        prop_assert!(peak(&(&a - &b)) < 1e-12 * peak(&a).max(1.0));
        let ra = reconstruct_composite(&composite_paths(&p), &g).unwrap();
        let rb = reconstruct_composite(&composite_paths(&q), &g).unwrap();
        prop_assert!(peak(&(&ra - &rb)) < 1e-12 * peak(&ra).max(1.0));
    }

    #[test]
    fn grouped_channel_identity(seed in any::<u64>(), groups in 1..4usize, size in 1..4usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hc = complex_gaussian(3, groups * size, &mut rng);
        let phi = complex_gaussian(groups, 1, &mut rng);
        let expanded = CMat::from_fn(groups * size, 1, |i, _| phi[(i / size, 0)]);
        let lhs = &hc * expanded;
        let rhs = group_channel(&hc, size).unwrap() * &phi;
        prop_assert!(peak(&(lhs - rhs)) < 1e-12);
    }

    #[test]
    fn difference_columns_pair_one_path_each(
        rg in prop::collection::vec(freq(), 1..4),
        rh in prop::collection::vec(freq(), 1..4),
        spec in ura(),
    ) {
        let c = ris_difference_matrix(&spec, &rg, &rh);
        // Khatri-Rao of conj(A_R(w_RH)) columns against A_R(w_RG) columns
        for (l, g) in rg.iter().enumerate() {
            for (p, h) in rh.iter().enumerate() {
                let expected = steering(*g, &spec).component_mul(&steering(*h, &spec).map(|z| z.conj()));
                prop_assert!(peak(&(c.column(l * rh.len() + p) - expected)) < 1e-13);
            }
        }
    }

    #[test]
    fn measurement_rows_follow_the_naive_layout(seed in any::<u64>(), m in 1..4usize, n in 1..5usize, k in 1..3usize, direct in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = geometry(m, ArraySpec::half_wave_ula(n), k);
        let t = 2 * (n + 1);
        let x = complex_gaussian(k, t, &mut rng);
        let psi = random_ris_sequence(t, n, &mut rng);
        let psi = if direct { ris_core::training::with_direct_column(&psi) } else { psi };
        let plan = TrainingPlan::per_sample(x.clone(), psi.clone(), direct).unwrap();
        let z = assemble_measurement(&plan, &g).unwrap().dense().unwrap();
        let cols = psi.ncols();
        for s in 0..t {
            for c in 0..cols {
                for kk in 0..k {
                    for i in 0..m {
                        for j in 0..m {
                            let want = if i == j { psi[(s, c)].conj() * x[(kk, s)] } else { C64::new(0.0, 0.0) };
                            let got = z[(s * m + i, (c * k + kk) * m + j)];
                            prop_assert!((got - want).norm() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn noiseless_uplink_is_linear(seed in any::<u64>(), a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = geometry(2, ArraySpec::half_wave_ula(3), 2);
        let plan = TrainingPlan::block_repeat(&orthogonal_pilots(2), dft_ris_sequence(4, 3).unwrap(), true).unwrap();
        let corr = ris_core::channel::CorrelationModel::identity(&g, true);
        let c1 = ris_core::channel::synth_unstructured(&corr, &g, &mut rng).unwrap();
        let c2 = ris_core::channel::synth_unstructured(&corr, &g, &mut rng).unwrap();
        let s = C64::new(a, b);
        let mixed = ris_core::channel::ChannelSet {
            h: &c1.h * s + &c2.h,
            g: vec![c1.g[0].clone()],
            hd: Some(vec![&c1.hd.as_ref().unwrap()[0] * s + &c2.hd.as_ref().unwrap()[0]]),
        };
        // the composite is linear in (H, Hd) for fixed G
        let partner = ris_core::channel::ChannelSet { g: vec![c1.g[0].clone()], ..c2.clone() };
        let lhs = noiseless_uplink(&mixed, &plan, &g).unwrap();
        let rhs = noiseless_uplink(&c1, &plan, &g).unwrap() * s + noiseless_uplink(&partner, &plan, &g).unwrap();
        prop_assert!(peak(&(lhs - rhs)) < 1e-12 * (1.0 + s.norm()));
    }

    #[test]
    fn fim_is_symmetric_psd(seed in any::<u64>(), d_h in 1..3usize, d_g in 1..3usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = geometry(3, ArraySpec::half_wave_ula(4), 2);
        let p = GeometricParams::random(&g, &PathCounts::uniform(d_h, d_g, 0, 1), GainRule::Unit, &mut rng).unwrap();
        let layout = EtaLayout::new(&p, &g, true).unwrap();
        let psi = random_ris_sequence(10, 4, &mut rng);
        let plan = TrainingPlan::per_sample(complex_gaussian(2, 10, &mut rng), psi, false).unwrap();
        let f = fim_eta(&p, &layout, &plan, &g).unwrap();
        prop_assert!((&f - f.transpose()).amax() <= 1e-9 * f.amax());
        let min = f.symmetric_eigenvalues().min();
        prop_assert!(min >= -1e-9 * f.amax());
    }
}

#[test]
fn orthogonal_plans_have_scaled_identity_gram() {
    let g = geometry(2, ArraySpec::half_wave_ula(5), 2);
    let plans = [
        dft_ris_sequence(6, 5).unwrap(),
        dft_ris_sequence(9, 5).unwrap(),
        hadamard_ris_sequence(8, 5).unwrap(),
    ];
    for psi in plans {
        let plan = TrainingPlan::block_repeat(&orthogonal_pilots(2), psi, true).unwrap();
        let z = assemble_measurement(&plan, &g).unwrap().dense().unwrap();
        let gram = z.adjoint() * &z;
        let t = plan.t() as f64;
        assert!(peak(&(gram - CMat::identity(z.ncols(), z.ncols()) * C64::new(t, 0.0))) < 1e-10);
    }
}

#[test]
fn doubling_training_halves_the_unstructured_bound() {
    let g = geometry(2, ArraySpec::half_wave_ula(3), 1);
    let diag = |blocks| {
        let plan = TrainingPlan::block_repeat(&orthogonal_pilots(1), dft_ris_sequence(blocks, 3).unwrap(), true).unwrap();
        let z = assemble_measurement(&plan, &g).unwrap();
        crb_unstructured(&z, 1.0, 1.0).unwrap().matrix.unwrap().diagonal()
    };
    let (a, b) = (diag(4), diag(8));
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - 2.0 * y).abs() < 1e-15);
    }
}

#[test]
fn random_schedules_are_unimodular() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let psi = random_ris_sequence(40, 12, &mut rng);
    assert!(psi.iter().all(|z| (z.norm() - 1.0).abs() < 1e-14));
    let pilots = orthogonal_pilots(4);
    let gram = &pilots * pilots.adjoint();
    assert!(peak(&(gram - CMat::identity(4, 4) * C64::new(4.0, 0.0))) < 1e-10);
}
