mod common;

use locdiff::shdd::CoefficientMagnitudes;
use locdiff::sphharm::{assoc_legendre, degree_order, index, sh_basis, sh_row};
use locdiff::{Degree, SphericalPoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn recurrence_matches_sum_formula_up_to_degree_8() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xs: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..=1.0)).collect();
    for l in 0..=8u32 {
        for m in 0..=l {
            for &x in &xs {
                let want = common::legendre_sum(l, m, x);
                let got = assoc_legendre(l, m, x).unwrap();
                assert!(
                    (got - want).abs() <= 1e-9 * want.abs().max(1.0),
                    "P_{l}^{m}({x}) = {got}, sum formula {want}"
                );
            }
        }
    }
}

#[test]
fn legendre_at_degree_four_order_two() {
    let want = common::legendre_sum(4, 2, 0.7);
    // 15/2 (7x² − 1)(1 − x²) written out by hand.
    let hand = 7.5 * (7.0 * 0.49 - 1.0) * (1.0 - 0.49);
    assert!((want - hand).abs() < 1e-12);
    assert!((assoc_legendre(4, 2, 0.7f64).unwrap() - want).abs() < 1e-12);
}

#[test]
fn basis_matches_three_case_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..40 {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let p = SphericalPoint::new(theta, phi).unwrap();
        let row = sh_row(Degree::new(8).unwrap(), &p);
        for l in 0..=8u32 {
            for m in -(l as i32)..=l as i32 {
                let want = common::ylm_reference(l, m, theta, phi);
                assert!((sh_basis(l, m, &p).unwrap() - want).abs() < 1e-9);
                assert!((row[index(l, m)] - want).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn quadrature_oracle_is_exact_on_polynomials() {
    // ∫ x^k dx over [-1, 1].
    let nodes = common::gauss_legendre(6);
    for k in 0..12 {
        let got: f64 = nodes.iter().map(|(x, w)| w * x.powi(k)).sum();
        let want = if k % 2 == 0 {
            2.0 / (k as f64 + 1.0)
        } else {
            0.0
        };
        assert!((got - want).abs() < 1e-13, "k = {k}");
    }
}

#[test]
fn orthonormal_up_to_degree_15() {
    let degree = Degree::new(15).unwrap();
    let err = common::orthonormality_error(15, |theta, phi| {
        sh_row(degree, &SphericalPoint::new(theta, phi).unwrap())
    });
    assert!(err < 1e-3, "max |G - I| = {err}");
}

#[test]
fn parity_under_antipodal_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let l = rng.random_range(0..=20u32);
        let m = rng.random_range(-(l as i32)..=l as i32);
        let theta: f64 = rng.random_range(0.01..3.13);
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let a = sh_basis(l, m, &SphericalPoint::new(theta, phi).unwrap()).unwrap();
        let b = sh_basis(
            l,
            m,
            &SphericalPoint::new(std::f64::consts::PI - theta, phi + std::f64::consts::PI).unwrap(),
        )
        .unwrap();
        let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
        assert!(
            (b - sign * a).abs() < 1e-9 * a.abs().max(1.0),
            "l={l} m={m}"
        );
    }
}

#[test]
fn magnitudes_stay_manageable_below_2500_dims() {
    // (49 + 1)² = 2500.
    let mags = CoefficientMagnitudes::compute(Degree::new(49).unwrap(), 20_000);
    assert_eq!(mags.max_abs.len(), 2500);
    let worst = mags.max_abs.iter().cloned().fold(0.0, f64::max);
    assert!(worst.is_finite() && worst < 1e6, "max |Y| = {worst}");
    // Y_00 is constant.
    assert!((mags.max_abs[0] - 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-12);
}

#[test]
fn index_order_is_degree_major() {
    let mut expect = Vec::new();
    for l in 0..=5u32 {
        for m in -(l as i32)..=l as i32 {
            expect.push((l, m));
        }
    }
    for (i, &lm) in expect.iter().enumerate() {
        assert_eq!(degree_order(i), lm);
        assert_eq!(index(lm.0, lm.1), i);
    }
}

#[test]
fn single_precision_agrees_with_double() {
    let degree = Degree::new(23).unwrap();
    let p64 = SphericalPoint::new(1.1f64, 4.0).unwrap();
    let r64 = sh_row(degree, &p64);
    let r32 = sh_row(degree, &p64.cast::<f32>());
    for (a, b) in r64.iter().zip(&r32) {
        assert!((a - *b as f64).abs() < 1e-4 * a.abs().max(1.0));
    }
}
