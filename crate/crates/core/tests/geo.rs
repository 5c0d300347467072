mod common;

use locdiff::geo::{
    anchor_robustness, default_rho, great_circle_km, perturbation_drift, resolution_sweep,
    EARTH_RADIUS_KM,
};
use locdiff::shdd::{encode, make_anchors, random_points, AnchorSet, AnchorSource};
use locdiff::sphharm::SphericalPoint;
use locdiff::Degree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn deg(l: u32) -> Degree {
    Degree::new(l).unwrap()
}

#[test]
fn distance_agrees_with_law_of_cosines() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let pts: Vec<SphericalPoint<f64>> = random_points(4000, &mut rng);
    let mut checked = 0;
    for pair in pts.chunks(2) {
        let (a, b) = (pair[0], pair[1]);
        let want = common::law_of_cosines_km(a.to_unit_vector(), b.to_unit_vector());
        // The cosine form loses digits for nearly coincident or antipodal
        // pairs; keep to the well-conditioned range.
        if !(200.0..19_800.0).contains(&want) {
            continue;
        }
        let got = great_circle_km(&a, &b);
        assert!((got - want).abs() <= 1e-6 * want, "{got} vs {want}");
        assert_eq!(got, great_circle_km(&b, &a));
        checked += 1;
    }
    assert!(checked > 1900);
    assert!((EARTH_RADIUS_KM - 6371.0088).abs() < 1e-12);
}

#[test]
fn triangle_inequality_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..2000 {
        let p: Vec<SphericalPoint<f64>> = random_points(3, &mut rng);
        // Nearly coincident triples exercise the small-angle end.
        let q = if rng.random_bool(0.3) {
            SphericalPoint::new(
                (p[0].theta() + 1e-7).min(std::f64::consts::PI - 1e-5),
                p[0].phi() + 1e-7,
            )
            .unwrap()
        } else {
            p[2]
        };
        let ab = great_circle_km(&p[0], &p[1]);
        let bc = great_circle_km(&p[1], &q);
        let ac = great_circle_km(&p[0], &q);
        assert!(ac <= ab + bc + 1e-9);
    }
}

#[test]
fn sweep_error_shrinks_with_degree() {
    let degrees = [deg(7), deg(15), deg(23)];
    let rows =
        resolution_sweep(&degrees, |d| AnchorSet::<f64>::fibonacci(20_000, d), 200, 3).unwrap();
    let medians: Vec<f64> = rows.iter().map(|r| r.median_km).collect();
    assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
    for r in &rows {
        assert!(r.median_km <= r.threshold_km);
    }
}

#[test]
fn drift_grows_with_noise_variance() {
    let degree = deg(23);
    let anchors = AnchorSet::<f64>::fibonacci(20_000, degree).unwrap();
    let medians: Vec<f64> = [0.0, 0.001, 0.01, 0.1]
        .iter()
        .map(|&s2| {
            perturbation_drift(degree, s2, 200, &anchors, 4)
                .unwrap()
                .median_km
        })
        .collect();
    assert_eq!(medians[0], 0.0);
    assert!(common::is_sorted_nondecreasing(&medians), "{medians:?}");
}

/// Noisy copies of the true encodings stand in for sampled latents.
fn fake_latents(
    truths: &[SphericalPoint<f64>],
    degree: Degree,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Vec<f64>>> {
    truths
        .iter()
        .map(|p| {
            let e = encode(p, degree).coeffs;
            (0..4)
                .map(|_| {
                    e.iter()
                        .map(|c| c + rng.random_range(-0.05..0.05))
                        .collect()
                })
                .collect()
        })
        .collect()
}

#[test]
fn same_anchor_set_twice_gives_identical_reports() {
    let degree = deg(15);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let truths: Vec<SphericalPoint<f64>> = random_points(40, &mut rng);
    let latents = fake_latents(&truths, degree, &mut rng);
    let a = AnchorSet::<f64>::fibonacci(20_000, degree).unwrap();
    let reports = anchor_robustness(
        &latents,
        &truths,
        &[("first", &a), ("second", &a)],
        default_rho(degree),
    )
    .unwrap();
    assert_eq!(reports[0].accuracy, reports[1].accuracy);
    assert_eq!(reports[0].median_km, reports[1].median_km);
    assert!(anchor_robustness(&latents, &truths, &[("only", &a)], default_rho(degree)).is_err());
}

#[test]
fn uniform_and_clustered_anchors_both_report() {
    let degree = deg(15);
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let truths: Vec<SphericalPoint<f64>> = random_points(30, &mut rng);
    let latents = fake_latents(&truths, degree, &mut rng);
    let uniform = make_anchors::<f64>(AnchorSource::Random, 20_000, degree, 1, None).unwrap();
    let clustered = make_anchors::<f64>(AnchorSource::Clustered, 20_000, degree, 1, None).unwrap();
    let reports = anchor_robustness(
        &latents,
        &truths,
        &[("uniform", &uniform), ("clustered", &clustered)],
        default_rho(degree),
    )
    .unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0].label, "uniform");
    assert_eq!(reports[1].label, "clustered");
    for r in &reports {
        assert_eq!(r.count, 30);
        assert!(r.accuracy.windows(2).all(|w| w[0] <= w[1]));
    }
}
