mod common;

use common::laws::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wrapped_lvm::manifolds::{ManifoldSpec, POINT_TOL};
use wrapped_lvm::Error;

fn point(spec: &ManifoldSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    spec.random_point(rng, 0.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn exp_log_roundtrip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, spec) in law_specs() {
            let base = point(&spec, &mut rng);
            let v = random_tangent(&mut rng, spec.intrinsic_dim(), roundtrip_norm(&spec));
            let y = spec.exp(&base, &v).unwrap();
            prop_assert!(spec.check_point(&y, POINT_TOL).is_ok(), "{name}: exp left the manifold");
            let err = roundtrip_error(&spec, &base, &v);
            prop_assert!(err < 1e-7, "{name}: round trip error {err:e}");
        }
    }

    #[test]
    fn basis_is_orthonormal_and_tangent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, spec) in law_specs() {
            let base = point(&spec, &mut rng);
            let (ortho, tangency) = basis_errors(&spec, &base);
            prop_assert!(ortho < 1e-8, "{name}: BᵀB deviates by {ortho:e}");
            prop_assert!(tangency < 1e-8, "{name}: tangency violation {tangency:e}");
        }
    }

    #[test]
    fn spd_coefficients_are_isometric(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_symmetric(&mut rng, n);
        let v = random_symmetric(&mut rng, n);
        prop_assert!(isometry_error(&u, &v) < 1e-10);
    }

    #[test]
    fn distance_is_a_metric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, spec) in law_specs() {
            let (a, b, c) = (point(&spec, &mut rng), point(&spec, &mut rng), point(&spec, &mut rng));
            let (sym, zero, tri) = distance_errors(&spec, &a, &b, &c);
            prop_assert!(sym < 1e-10, "{name}: asymmetry {sym:e}");
            prop_assert!(zero < 1e-7, "{name}: d(a,a) = {zero:e}");
            prop_assert!(tri < 1e-8, "{name}: triangle violation {tri:e}");
        }
    }

    #[test]
    fn cov_log_det_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, spec) in law_specs() {
            let base = point(&spec, &mut rng);
            let v = random_tangent(&mut rng, spec.intrinsic_dim(), 2.0);
            let err = cov_log_det_error(&spec, &base, &v);
            prop_assert!(err < 1e-4, "{name}: |analytic − FD| = {err:e}");
        }
    }
}

#[test]
fn s2_basis_survives_the_equator() {
    let spec = ManifoldSpec::Sphere { dim: 2 };
    for p in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.6, -0.8, 0.0], [0.6, 0.8, 1e-8]] {
        let (ortho, tangency) = basis_errors(&spec, &p);
        assert!(ortho < 1e-12 && tangency < 1e-12, "{p:?}");
    }
}

#[test]
fn antipodal_log_is_a_domain_error() {
    let spec = ManifoldSpec::Sphere { dim: 2 };
    let err = spec.log(&[0.0, 0.0, 1.0], &[0.0, 0.0, -1.0]).unwrap_err();
    assert!(matches!(err, Error::Domain(_)), "{err:?}");
}

#[test]
fn spd_metric_at_identity_is_the_frame_identity() {
    let spec = ManifoldSpec::Spd { size: 2 };
    let g = spec.metric_gram(&spec.default_basepoint()).unwrap();
    assert!((g - DMatrix::<f64>::identity(3, 3)).abs().max() < 1e-14);
}

#[test]
fn spd_log_det_for_scaled_identity() {
    // Exp_I(tI) = e^t I; dexp is e^t times the identity on Sym(2), so log det = 3t.
    let spec = ManifoldSpec::Spd { size: 2 };
    let t = 0.7;
    let got = spec.cov_log_det(&spec.default_basepoint(), &[t, t, 0.0]).unwrap();
    assert!((got - 3.0 * t).abs() < 1e-12, "{got}");
}

#[test]
fn invalid_points_are_rejected() {
    let s2 = ManifoldSpec::Sphere { dim: 2 };
    assert!(s2.check_point(&[1.0, 1.0, 0.0], POINT_TOL).is_err());
    assert!(s2.check_point(&[1.0, 0.0], POINT_TOL).is_err());
    let spd = ManifoldSpec::Spd { size: 2 };
    assert!(spd.check_point(&[1.0, 0.5, 0.4, 1.0], POINT_TOL).is_err());
    assert!(spd.check_point(&[1.0, 2.0, 2.0, 1.0], POINT_TOL).is_err());
    assert!(spd.check_point(&[f64::NAN, 0.0, 0.0, 1.0], POINT_TOL).is_err());
}
