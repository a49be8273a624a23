use eflow_core::datasets::{mmd, GaussianMixture2D, BANDWIDTHS};
use eflow_core::rng::seeded;
use eflow_core::sampler::{build_schedule, sample, PointwiseMap};
use eflow_core::theory::{
    self, lemma1_check, random_probes, Exponential, FixedPointFlow, Offset, RandomPolynomial, StraightLine,
};
use proptest::prelude::*;

#[test]
fn identity_holds_on_a_thousand_random_maps() {
    let mut rng = seeded(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let g = RandomPolynomial::new(3, &mut rng);
        let probes = random_probes(4, 3, 5, &mut rng);
        let r = lemma1_check(&g, &probes).unwrap();
        assert!(r.pass, "{r:?}");
        worst = worst.max(r.max_identity_gap);
    }
    assert!(worst <= theory::LEMMA1_TOL);
}

#[test]
fn broken_boundary_is_reported() {
    let mut rng = seeded(2);
    let g = Offset { inner: RandomPolynomial::new(2, &mut rng), offset: 1e-3 };
    let r = lemma1_check(&g, &random_probes(8, 2, 3, &mut rng)).unwrap();
    assert!(!r.pass && r.max_boundary_violation > 0.0);
}

#[test]
fn exact_flows_compose() {
    let mut rng = seeded(3);
    let line = StraightLine { v: vec![0.3, -1.2] };
    for p in random_probes(200, 2, 1, &mut rng) {
        for d in theory::semigroup_defect(&line, &p.x, p.t, p.l, p.s, 0).unwrap() {
            assert!(d.abs() <= 1e-12);
        }
        for r in theory::mva_residual(&line, &p.x, p.t, p.l, p.s, 0).unwrap() {
            assert!(r.abs() <= 1e-12);
        }
        let v = theory::mean_velocity(&line, &p.x, p.t, p.s, 0).unwrap();
        assert!(v.iter().zip(&line.v).all(|(a, b)| (a - b).abs() <= 1e-12));
        let e = Exponential { a: 1.0 };
        for d in theory::semigroup_defect(&e, &p.x, p.t, p.l, p.s, 0).unwrap() {
            assert!(d.abs() <= 1e-12);
        }
    }
}

#[test]
fn fixed_point_fixture_ignores_step_count() {
    let target = vec![1.5, -0.5];
    let model = PointwiseMap { map: FixedPointFlow { x0: target.clone() }, channels: 2 };
    for n in [1, 2, 4, 8] {
        let out = sample(&model, &[0, 1, 2], &build_schedule(n, 3.0).unwrap(), 1.0, 9).unwrap();
        for i in 0..3 {
            assert!(out.row(i).iter().zip(&target).all(|(a, b)| (a - b).abs() <= 1e-10));
        }
    }
}

#[test]
fn schedules_end_exactly_at_zero() {
    for n in 1..=16 {
        let s = build_schedule(n, 2.0).unwrap();
        assert_eq!((s.times[0], *s.times.last().unwrap(), s.steps()), (1.0, 0.0, n));
        assert!(s.times.windows(2).all(|w| w[0] > w[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mmd_is_symmetric_and_permutation_invariant(n in 2usize..30, m in 2usize..30, seed in any::<u64>()) {
        let data = GaussianMixture2D::default();
        let (x, _) = data.sample_batch(n, None, &mut seeded(seed)).unwrap();
        let (y, _) = data.sample_batch(m, None, &mut seeded(seed ^ 1)).unwrap();
        let a = mmd(x.data(), y.data(), 2, &BANDWIDTHS).unwrap();
        let b = mmd(y.data(), x.data(), 2, &BANDWIDTHS).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        let rev: Vec<f64> = x.data().chunks(2).rev().flatten().copied().collect();
        let c = mmd(&rev, y.data(), 2, &BANDWIDTHS).unwrap();
        prop_assert!((a - c).abs() <= 1e-12);
    }

    #[test]
    fn dataset_sampling_is_seeded(seed in any::<u64>()) {
        let data = GaussianMixture2D::default();
        let a = data.sample_batch(16, None, &mut seeded(seed)).unwrap();
        let b = data.sample_batch(16, None, &mut seeded(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}
