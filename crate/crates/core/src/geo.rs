//! Geodesic helpers, accuracy-at-radius metrics and the encoding/decoding
//! evaluation protocols (resolution sweep, perturbation drift, anchor
//! robustness).

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shdd::{encode, random_points, AnchorSet, ModeDecoder};
use crate::sphharm::{Degree, SphericalPoint};

/// Mean Earth radius (IUGG), km.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Street, city, region, country and continent scales, km.
pub const ACCURACY_RADII_KM: [f64; 5] = [1.0, 25.0, 200.0, 750.0, 2500.0];

/// `(lat, lon)` in degrees to a spherical point. `lat ∈ [-90, 90]`; any
/// finite longitude is accepted and wrapped.
pub fn point_from_lat_lon<T: Scalar>(lat: f64, lon: f64) -> Result<SphericalPoint<T>> {
    if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
        return Err(Error::InvalidField {
            field: "lat",
            reason: format!("{lat} outside [-90, 90]"),
        });
    }
    if !lon.is_finite() {
        return Err(Error::InvalidField {
            field: "lon",
            reason: format!("{lon} is not finite"),
        });
    }
    let theta = (90.0 - lat).to_radians();
    let phi = (lon + 360.0).rem_euclid(360.0).to_radians();
    SphericalPoint::new(T::of(theta.clamp(0.0, std::f64::consts::PI)), T::of(phi))
}

/// Inverse of [`point_from_lat_lon`]; longitude lands in `[-180, 180)`.
pub fn lat_lon_of<T: Scalar>(p: &SphericalPoint<T>) -> (f64, f64) {
    let lat = 90.0 - p.theta().f64().to_degrees();
    let mut lon = p.phi().f64().to_degrees();
    if lon >= 180.0 {
        lon -= 360.0;
    }
    (lat, lon)
}

/// Central angle between two points, `atan2(|a × b|, a · b)` on unit
/// vectors: accurate for coincident and antipodal pairs alike, unlike the
/// plain haversine which loses precision near antipodes.
pub fn central_angle<T: Scalar>(a: &SphericalPoint<T>, b: &SphericalPoint<T>) -> f64 {
    let u = a.cast::<f64>().to_unit_vector();
    let v = b.cast::<f64>().to_unit_vector();
    let cross = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let cos = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    sin.atan2(cos)
}

pub fn great_circle_km<T: Scalar>(a: &SphericalPoint<T>, b: &SphericalPoint<T>) -> f64 {
    central_angle(a, b) * EARTH_RADIUS_KM
}

/// Normalized mean of the Cartesian unit vectors.
pub fn spherical_centroid<T: Scalar>(points: &[SphericalPoint<T>]) -> Result<SphericalPoint<T>> {
    if points.is_empty() {
        return Err(Error::pre("centroid of an empty ensemble"));
    }
    let mut acc = [0.0f64; 3];
    for p in points {
        let v = p.to_unit_vector();
        for k in 0..3 {
            acc[k] += v[k].f64();
        }
    }
    let n = points.len() as f64;
    let mean = acc.map(|c| c / n);
    let norm = (mean[0] * mean[0] + mean[1] * mean[1] + mean[2] * mean[2]).sqrt();
    if norm < 1e-6 {
        return Err(Error::DegenerateCentroid(norm));
    }
    let p = SphericalPoint::<f64>::from_unit_vector(mean)?;
    Ok(p.cast())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoMetricsReport {
    pub label: String,
    /// Fraction of predictions within each of [`ACCURACY_RADII_KM`].
    pub accuracy: [f64; 5],
    pub median_km: f64,
    pub mean_km: f64,
    pub count: usize,
}

impl GeoMetricsReport {
    pub const CSV_HEADER: &'static str =
        "label,count,acc_1km,acc_25km,acc_200km,acc_750km,acc_2500km,median_km,mean_km";

    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{}", self.label, self.count);
        for a in &self.accuracy {
            write!(s, ",{a:.6}").unwrap();
        }
        write!(s, ",{:.3},{:.3}", self.median_km, self.mean_km).unwrap();
        s
    }

    pub fn accuracy_at(&self, radius_km: f64) -> Option<f64> {
        ACCURACY_RADII_KM
            .iter()
            .position(|&r| r == radius_km)
            .map(|i| self.accuracy[i])
    }
}

/// Accuracy at the five scales (inclusive thresholds) plus error summary.
pub fn accuracy_report<T: Scalar>(
    preds: &[SphericalPoint<T>],
    truths: &[SphericalPoint<T>],
) -> Result<GeoMetricsReport> {
    if preds.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            got: preds.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::pre("accuracy report needs at least one prediction"));
    }
    let errors: Vec<f64> = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| great_circle_km(p, t))
        .collect();
    Ok(report_from_errors("", &errors))
}

pub fn report_from_errors(label: &str, errors_km: &[f64]) -> GeoMetricsReport {
    let n = errors_km.len();
    let mut accuracy = [0.0; 5];
    for (slot, r) in accuracy.iter_mut().zip(ACCURACY_RADII_KM) {
        *slot = errors_km.iter().filter(|&&e| e <= r).count() as f64 / n.max(1) as f64;
    }
    GeoMetricsReport {
        label: label.to_string(),
        accuracy,
        median_km: quantile(errors_km, 0.5),
        mean_km: errors_km.iter().sum::<f64>() / n.max(1) as f64,
        count: n,
    }
}

/// Linear-interpolated quantile; NaN for an empty slice.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct ResolutionRow {
    pub degree: u32,
    pub threshold_km: f64,
    pub median_km: f64,
    pub p90_km: f64,
    pub max_km: f64,
    pub within_threshold: f64,
}

/// Round-trip decode error of clean encodings at each degree. `anchors_for`
/// supplies the decoding anchor set for a degree.
pub fn resolution_sweep<T, F>(
    degrees: &[Degree],
    mut anchors_for: F,
    n_points: usize,
    seed: u64,
) -> Result<Vec<ResolutionRow>>
where
    T: Scalar,
    F: FnMut(Degree) -> Result<AnchorSet<T>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<SphericalPoint<T>> = random_points(n_points, &mut rng);
    let mut rows = Vec::with_capacity(degrees.len());
    for &degree in degrees {
        let anchors = anchors_for(degree)?;
        let decoder = ModeDecoder::new(&anchors, T::of(default_rho(degree)))?;
        let encodings: Vec<Vec<T>> = points.iter().map(|p| encode(p, degree).coeffs).collect();
        let decoded = decoder.decode_many(&encodings)?;
        let errors: Vec<f64> = decoded
            .iter()
            .zip(&points)
            .map(|(d, p)| great_circle_km(d, p))
            .collect();
        let threshold = resolution_threshold_km(degree);
        rows.push(ResolutionRow {
            degree: degree.get(),
            threshold_km: threshold,
            median_km: quantile(&errors, 0.5),
            p90_km: quantile(&errors, 0.9),
            max_km: errors.iter().cloned().fold(0.0, f64::max),
            within_threshold: errors.iter().filter(|&&e| e <= threshold).count() as f64
                / errors.len().max(1) as f64,
        });
    }
    Ok(rows)
}

/// `20000 / L` km, the spatial scale an `L`-degree encoding resolves.
pub fn resolution_threshold_km(degree: Degree) -> f64 {
    20000.0 / degree.get().max(1) as f64
}

/// Default mode-seeking window radius `π / (2L)`.
pub fn default_rho(degree: Degree) -> f64 {
    degree.resolution_rad() / 2.0
}

#[derive(Clone, Debug, Serialize)]
pub struct DriftStats {
    pub degree: u32,
    pub sigma2: f64,
    pub median_km: f64,
    pub mean_km: f64,
    pub p95_km: f64,
    pub drifts_km: Vec<f64>,
}

/// Decode drift between clean encodings and copies perturbed with
/// `N(0, sigma2)` noise on every coefficient.
pub fn perturbation_drift<T: Scalar>(
    degree: Degree,
    sigma2: f64,
    n_trials: usize,
    anchors: &AnchorSet<T>,
    seed: u64,
) -> Result<DriftStats> {
    if !(sigma2 >= 0.0) {
        return Err(Error::pre(format!("noise variance {sigma2} must be >= 0")));
    }
    if anchors.degree() != degree {
        return Err(Error::DimensionMismatch {
            expected: degree.dim(),
            got: anchors.dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<SphericalPoint<T>> = random_points(n_trials, &mut rng);
    let sigma = sigma2.sqrt();
    let clean: Vec<Vec<T>> = points.iter().map(|p| encode(p, degree).coeffs).collect();
    let noisy: Vec<Vec<T>> = clean
        .iter()
        .map(|e| {
            e.iter()
                .map(|&c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c + T::of(sigma * z)
                })
                .collect()
        })
        .collect();
    let decoder = ModeDecoder::new(anchors, T::of(default_rho(degree)))?;
    let a = decoder.decode_many_indices(&clean)?;
    let b = decoder.decode_many_indices(&noisy)?;
    let drifts: Vec<f64> = a
        .iter()
        .zip(&b)
        .map(|(&i, &j)| {
            if i == j {
                0.0
            } else {
                great_circle_km(&anchors.points()[i], &anchors.points()[j])
            }
        })
        .collect();
    Ok(DriftStats {
        degree: degree.get(),
        sigma2,
        median_km: quantile(&drifts, 0.5),
        mean_km: drifts.iter().sum::<f64>() / drifts.len().max(1) as f64,
        p95_km: quantile(&drifts, 0.95),
        drifts_km: drifts,
    })
}

/// One labeled report per anchor set, all computed from the same sampled
/// latents: `latents[c]` holds the ensemble for condition `c`.
pub fn anchor_robustness<T: Scalar>(
    latents: &[Vec<Vec<T>>],
    truths: &[SphericalPoint<T>],
    anchor_sets: &[(&str, &AnchorSet<T>)],
    rho: T,
) -> Result<Vec<GeoMetricsReport>> {
    if anchor_sets.len() < 2 {
        return Err(Error::pre(
            "anchor robustness needs at least two anchor sets",
        ));
    }
    if latents.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            got: latents.len(),
        });
    }
    let mut reports = Vec::with_capacity(anchor_sets.len());
    for (label, anchors) in anchor_sets {
        let decoder = ModeDecoder::new(anchors, rho)?;
        let preds: Vec<SphericalPoint<T>> = crate::diffusion::decode_ensembles(latents, &decoder)?
            .into_iter()
            .map(|p| p.point)
            .collect();
        let mut report = accuracy_report(&preds, truths)?;
        report.label = label.to_string();
        reports.push(report);
    }
    Ok(reports)
}

/// Pretty fixed-width table of reports, for terminals.
pub fn format_reports(reports: &[GeoMetricsReport]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:<24} {:>7} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10}",
        "label", "n", "1km", "25km", "200km", "750km", "2500km", "median_km"
    )
    .unwrap();
    for r in reports {
        write!(s, "{:<24} {:>7}", r.label, r.count).unwrap();
        for a in r.accuracy {
            write!(s, " {:>8.4}", a).unwrap();
        }
        writeln!(s, " {:>10.1}", r.median_km).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn ll(lat: f64, lon: f64) -> SphericalPoint<f64> {
        point_from_lat_lon(lat, lon).unwrap()
    }

    #[test]
    fn lat_lon_conversion() {
        let p = ll(0.0, 0.0);
        assert_relative_eq!(p.theta(), PI / 2.0);
        assert_eq!(p.phi(), 0.0);
        let p = ll(45.0, -90.0);
        assert_relative_eq!(p.phi(), 1.5 * PI, epsilon = 1e-12);
        let (lat, lon) = lat_lon_of(&p);
        assert_relative_eq!(lat, 45.0, epsilon = 1e-12);
        assert_relative_eq!(lon, -90.0, epsilon = 1e-12);
        assert!(point_from_lat_lon::<f64>(95.0, 0.0).is_err());
        assert!(point_from_lat_lon::<f64>(-90.0, 0.0).is_ok());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(great_circle_km(&ll(12.0, 30.0), &ll(12.0, 30.0)), 0.0);
        let q = great_circle_km(&ll(0.0, 0.0), &ll(0.0, 90.0));
        assert_relative_eq!(q, EARTH_RADIUS_KM * PI / 2.0, epsilon = 1e-9);
        assert!((q - 10007.5).abs() < 0.1);
        // Antipodes.
        assert_relative_eq!(
            great_circle_km(&ll(10.0, 20.0), &ll(-10.0, -160.0)),
            EARTH_RADIUS_KM * PI,
            epsilon = 1e-6
        );
    }

    #[test]
    fn report_examples() {
        let truths = vec![ll(10.0, 10.0), ll(-20.0, 100.0)];
        let r = accuracy_report(&truths, &truths).unwrap();
        assert_eq!(r.accuracy, [1.0; 5]);

        // 100 km due north along a meridian.
        let t = ll(0.0, 0.0);
        let p = ll(100.0 / EARTH_RADIUS_KM * 180.0 / PI, 0.0);
        let r = accuracy_report(&[p], &[t]).unwrap();
        assert_eq!(r.accuracy, [0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_relative_eq!(r.median_km, 100.0, epsilon = 1e-9);

        assert!(accuracy_report(&[p], &truths).is_err());
    }

    #[test]
    fn thresholds_are_inclusive() {
        let r = report_from_errors("x", &[25.0, 200.0, 200.0000001]);
        assert_relative_eq!(r.accuracy[1], 1.0 / 3.0);
        assert_relative_eq!(r.accuracy[2], 2.0 / 3.0);
    }

    #[test]
    fn mixed_batch_matches_hand_count() {
        let errors = [0.5, 1.0, 3.0, 24.9, 26.0, 199.0, 751.0, 2600.0, 10.0, 800.0];
        // <=1: 0.5, 1.0 -> 2; <=25: +3.0, 24.9, 10.0 -> 5; <=200: +26, 199 -> 7;
        // <=750: 7; <=2500: +751, 800 -> 9.
        let r = report_from_errors("hand", &errors);
        assert_eq!(r.accuracy, [0.2, 0.5, 0.7, 0.7, 0.9]);
        assert_eq!(r.count, 10);
    }

    #[test]
    fn centroid_and_degeneracy() {
        let c = spherical_centroid(&[ll(10.0, 0.0), ll(-10.0, 0.0)]).unwrap();
        assert!(great_circle_km(&c, &ll(0.0, 0.0)) < 1e-6);
        let err = spherical_centroid(&[ll(0.0, 0.0), ll(0.0, 180.0)]).unwrap_err();
        assert!(matches!(err, Error::DegenerateCentroid(_)));
        let v = c.to_unit_vector();
        assert_relative_eq!(
            v[0] * v[0] + v[1] * v[1] + v[2] * v[2],
            1.0,
            epsilon = 1e-12
        );
    }

    proptest! {
        #[test]
        fn triangle_inequality(
            a in (-90.0f64..90.0, -180.0f64..180.0),
            b in (-90.0f64..90.0, -180.0f64..180.0),
            c in (-90.0f64..90.0, -180.0f64..180.0),
        ) {
            let (a, b, c) = (ll(a.0, a.1), ll(b.0, b.1), ll(c.0, c.1));
            let ab = great_circle_km(&a, &b);
            prop_assert!(ab <= great_circle_km(&a, &c) + great_circle_km(&c, &b) + 1e-9);
            prop_assert!((ab - great_circle_km(&b, &a)).abs() < 1e-9);
        }

        #[test]
        fn report_accuracy_is_monotone(errors in proptest::collection::vec(0.0f64..5000.0, 1..50)) {
            let r = report_from_errors("p", &errors);
            for w in r.accuracy.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }
    }
}
