//! Real spherical-harmonics basis and associated Legendre functions.
//!
//! Coefficients are laid out degree-major, order ascending:
//! `index(l, m) = l² + l + m`, so a degree-`L` row has `(L + 1)²` entries.
//!
//! The orthonormal basis is evaluated through the normalized recurrence
//! (`N_lm = J_lm · P_l^m`), which never forms the factorials in `J_lm`
//! and stays finite in single precision up to the maximum degree.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest supported degree. Beyond this the basis magnitudes make the
/// exponentiated scores overflow-prone even in the log domain.
pub const MAX_DEGREE: u32 = 63;

/// Point on the unit sphere: colatitude `theta` in `[0, π]`, azimuth `phi`
/// in `[0, 2π)`, both in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphericalPoint<T> {
    theta: T,
    phi: T,
}

impl<T: Scalar> SphericalPoint<T> {
    /// Wraps `phi` into `[0, 2π)`; rejects a colatitude outside `[0, π]`.
    pub fn new(theta: T, phi: T) -> Result<Self> {
        if !theta.is_finite() || !phi.is_finite() {
            return Err(Error::InvalidField {
                field: "theta/phi",
                reason: format!("non-finite angle ({theta}, {phi})"),
            });
        }
        if theta < T::zero() || theta > T::PI() {
            return Err(Error::InvalidField {
                field: "theta",
                reason: format!("colatitude {theta} outside [0, π]"),
            });
        }
        Ok(Self {
            theta,
            phi: wrap_azimuth(phi),
        })
    }

    pub fn theta(&self) -> T {
        self.theta
    }

    pub fn phi(&self) -> T {
        self.phi
    }

    pub fn to_unit_vector(&self) -> [T; 3] {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [st * cp, st * sp, ct]
    }

    /// Inverse of [`Self::to_unit_vector`]; the input is normalized first.
    pub fn from_unit_vector(v: [T; 3]) -> Result<Self> {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !(n > T::zero()) || !n.is_finite() {
            return Err(Error::pre("cannot project a zero vector onto the sphere"));
        }
        let z = (v[2] / n).max(-T::one()).min(T::one());
        Self::new(z.acos(), v[1].atan2(v[0]))
    }

    pub fn cast<U: Scalar>(&self) -> SphericalPoint<U> {
        SphericalPoint {
            theta: U::of(self.theta.f64()),
            phi: U::of(self.phi.f64()),
        }
    }
}

fn wrap_azimuth<T: Scalar>(phi: T) -> T {
    let two_pi = T::TAU();
    let mut w = phi % two_pi;
    if w < T::zero() {
        w = w + two_pi;
    }
    // `-tiny + 2π` rounds to exactly 2π.
    if w >= two_pi {
        w = T::zero();
    }
    w
}

/// Maximum spherical-harmonics degree `L`, `0 ≤ L ≤ 63`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Degree(u32);

impl Degree {
    pub fn new(l: u32) -> Result<Self> {
        if l > MAX_DEGREE {
            return Err(Error::InvalidField {
                field: "degree",
                reason: format!("{l} exceeds the maximum supported degree {MAX_DEGREE}"),
            });
        }
        Ok(Self(l))
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// Encoding dimension `(L + 1)²`.
    pub fn dim(self) -> usize {
        let n = self.0 as usize + 1;
        n * n
    }

    /// Inverse of [`Self::dim`] for perfect squares.
    pub fn from_dim(dim: usize) -> Result<Self> {
        let n = (dim as f64).sqrt().round() as usize;
        if n == 0 || n * n != dim {
            return Err(Error::pre(format!(
                "{dim} is not a valid encoding length (must be (L+1)²)"
            )));
        }
        Self::new((n - 1) as u32)
    }

    /// Angular resolution `π / L` in radians (`π` for `L = 0`).
    pub fn resolution_rad(self) -> f64 {
        std::f64::consts::PI / self.0.max(1) as f64
    }
}

impl TryFrom<u32> for Degree {
    type Error = Error;
    fn try_from(v: u32) -> Result<Self> {
        Degree::new(v)
    }
}

impl From<Degree> for u32 {
    fn from(d: Degree) -> u32 {
        d.0
    }
}

impl fmt::Display for Degree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L={}", self.0)
    }
}

/// Position of `(l, m)` in a coefficient row.
#[inline]
pub fn index(l: u32, m: i32) -> usize {
    let l = l as i64;
    (l * l + l + m as i64) as usize
}

/// Inverse of [`index`].
pub fn degree_order(idx: usize) -> (u32, i32) {
    let l = (idx as f64).sqrt().floor() as usize;
    // Guard against the float sqrt landing one off for large idx.
    let l = if (l + 1) * (l + 1) <= idx {
        l + 1
    } else if l * l > idx {
        l - 1
    } else {
        l
    };
    (l as u32, idx as i32 - (l * l + l) as i32)
}

fn check_lm(l: u32, m: i32) -> Result<()> {
    if l > MAX_DEGREE {
        return Err(Error::pre(format!("degree {l} exceeds {MAX_DEGREE}")));
    }
    if m.unsigned_abs() > l {
        return Err(Error::pre(format!("order {m} outside [-{l}, {l}]")));
    }
    Ok(())
}

/// Associated Legendre function `P_l^m(x)` including the Condon–Shortley
/// phase `(-1)^m`, via the upward recurrence in `l`.
pub fn assoc_legendre<T: Scalar>(l: u32, m: u32, x: T) -> Result<T> {
    check_lm(l, m as i32)?;
    if !(x.abs() <= T::one()) {
        return Err(Error::pre(format!("argument {x} outside [-1, 1]")));
    }
    let s = ((T::one() - x) * (T::one() + x)).sqrt();
    // P_m^m = (-1)^m (2m-1)!! s^m
    let mut pmm = T::one();
    for k in 1..=m {
        pmm = -pmm * T::of_usize(2 * k as usize - 1) * s;
    }
    if l == m {
        return Ok(pmm);
    }
    let mut prev = pmm;
    let mut cur = x * T::of_usize(2 * m as usize + 1) * pmm;
    for ll in (m + 2)..=l {
        let ll_ = ll as usize;
        let next = (x * T::of_usize(2 * ll_ - 1) * cur - T::of_usize(ll_ + m as usize - 1) * prev)
            / T::of_usize(ll_ - m as usize);
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

/// Normalized Legendre values `N_lm(cos θ) = J_lm P_l^m(cos θ)` for
/// `0 ≤ m ≤ l ≤ L`, stored at `l(l+1)/2 + m`.
fn normalized_legendre_table<T: Scalar>(degree: u32, x: T, s: T, out: &mut Vec<T>) {
    let lmax = degree as usize;
    out.clear();
    out.resize((lmax + 1) * (lmax + 2) / 2, T::zero());
    let tri = |l: usize, m: usize| l * (l + 1) / 2 + m;
    let quarter_pi_inv = T::one() / (T::of(4.0) * T::PI());

    let mut nmm = quarter_pi_inv.sqrt();
    for m in 0..=lmax {
        if m > 0 {
            let mf = m as f64;
            nmm = -T::of(((2.0 * mf + 1.0) / (2.0 * mf)).sqrt()) * s * nmm;
        }
        out[tri(m, m)] = nmm;
        if m == lmax {
            break;
        }
        let mut prev = nmm;
        let mut cur = x * T::of(((2 * m + 3) as f64).sqrt()) * nmm;
        out[tri(m + 1, m)] = cur;
        for l in (m + 2)..=lmax {
            let (lf, mf) = (l as f64, m as f64);
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0))
                .sqrt();
            let next = T::of(a) * (x * cur - T::of(b) * prev);
            out[tri(l, m)] = next;
            prev = cur;
            cur = next;
        }
    }
}

/// Writes the degree-`L` basis row at `p` into `out` (length `(L+1)²`).
pub fn sh_row_into<T: Scalar>(degree: Degree, p: &SphericalPoint<T>, out: &mut [T]) {
    let mut scratch = Vec::new();
    sh_row_with_scratch(degree, p, out, &mut scratch);
}

pub(crate) fn sh_row_with_scratch<T: Scalar>(
    degree: Degree,
    p: &SphericalPoint<T>,
    out: &mut [T],
    scratch: &mut Vec<T>,
) {
    let lmax = degree.get();
    assert_eq!(out.len(), degree.dim(), "row buffer length must be (L+1)^2");
    let (s, x) = p.theta.sin_cos();
    normalized_legendre_table(lmax, x, s.max(T::zero()), scratch);
    let sqrt2 = T::SQRT_2();
    let tri = |l: usize, m: usize| l * (l + 1) / 2 + m;
    for m in 0..=lmax as usize {
        let (sm, cm) = if m == 0 {
            (T::zero(), T::one())
        } else {
            (T::of_usize(m) * p.phi).sin_cos()
        };
        // (-1)^m √2 for both signed orders.
        let phase = if m % 2 == 0 { sqrt2 } else { -sqrt2 };
        for l in m..=lmax as usize {
            let n = scratch[tri(l, m)];
            let base = l * l + l;
            if m == 0 {
                out[base] = n;
            } else {
                out[base + m] = phase * n * cm;
                out[base - m] = phase * n * sm;
            }
        }
    }
}

/// Concatenated basis values `[Y_lm(p)]` for `l = 0..=L`, `m = -l..=l`.
pub fn sh_row<T: Scalar>(degree: Degree, p: &SphericalPoint<T>) -> Vec<T> {
    let mut out = vec![T::zero(); degree.dim()];
    sh_row_into(degree, p, &mut out);
    out
}

/// Single real basis function `Y_lm(θ, φ)`.
pub fn sh_basis<T: Scalar>(l: u32, m: i32, p: &SphericalPoint<T>) -> Result<T> {
    check_lm(l, m)?;
    let am = m.unsigned_abs() as usize;
    let (s, x) = p.theta.sin_cos();
    let s = s.max(T::zero());
    let mut nmm = (T::one() / (T::of(4.0) * T::PI())).sqrt();
    for k in 1..=am {
        let kf = k as f64;
        nmm = -T::of(((2.0 * kf + 1.0) / (2.0 * kf)).sqrt()) * s * nmm;
    }
    let mut n = nmm;
    if l as usize > am {
        let mut prev = nmm;
        let mut cur = x * T::of(((2 * am + 3) as f64).sqrt()) * nmm;
        for ll in (am + 2)..=l as usize {
            let (lf, mf) = (ll as f64, am as f64);
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0))
                .sqrt();
            let next = T::of(a) * (x * cur - T::of(b) * prev);
            prev = cur;
            cur = next;
        }
        n = cur;
    }
    if m == 0 {
        return Ok(n);
    }
    let phase = if am % 2 == 0 {
        T::SQRT_2()
    } else {
        -T::SQRT_2()
    };
    let angle = T::of_usize(am) * p.phi;
    Ok(if m > 0 {
        phase * n * angle.cos()
    } else {
        phase * n * angle.sin()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn pt(theta: f64, phi: f64) -> SphericalPoint<f64> {
        SphericalPoint::new(theta, phi).unwrap()
    }

    #[test]
    fn legendre_trivial_values() {
        assert_eq!(assoc_legendre(0, 0, 0.3f64).unwrap(), 1.0);
        assert_eq!(assoc_legendre(1, 0, 0.5f64).unwrap(), 0.5);
        // P_1^1 = -(1-x^2)^{1/2} with the Condon–Shortley phase.
        assert_relative_eq!(assoc_legendre(1, 1, 0.6f64).unwrap(), -0.8, epsilon = 1e-15);
        // P_2^0 = (3x^2 - 1)/2
        assert_relative_eq!(
            assoc_legendre(2, 0, 0.3f64).unwrap(),
            (3.0 * 0.09 - 1.0) / 2.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn legendre_rejects_out_of_range() {
        assert!(assoc_legendre(64, 0, 0.1f64).is_err());
        assert!(assoc_legendre(3, 4, 0.1f64).is_err());
        assert!(assoc_legendre(3, 1, 1.5f64).is_err());
        assert!(assoc_legendre(3, 1, f64::NAN).is_err());
    }

    #[test]
    fn basis_closed_forms() {
        let y00 = 1.0 / (4.0 * PI).sqrt();
        assert_relative_eq!(sh_basis(0, 0, &pt(1.1, 4.0)).unwrap(), y00, epsilon = 1e-15);
        assert_relative_eq!(y00, 0.2820947918, epsilon = 1e-10);
        assert_relative_eq!(
            sh_basis(1, 0, &pt(0.0, 0.0)).unwrap(),
            0.4886025119,
            epsilon = 1e-10
        );
        assert!(sh_basis(2, 3, &pt(0.0, 0.0)).is_err());
    }

    #[test]
    fn row_examples() {
        let r = sh_row(Degree::new(0).unwrap(), &pt(0.7, 2.0));
        assert_eq!(r.len(), 1);
        assert_relative_eq!(r[0], 0.2820947918, epsilon = 1e-10);

        let r = sh_row(Degree::new(1).unwrap(), &pt(PI / 2.0, 0.0));
        assert_eq!(r.len(), 4);
        assert!(r[index(1, 0)].abs() < 1e-16);

        let r = sh_row(Degree::new(23).unwrap(), &pt(1.0, 3.0));
        assert_eq!(r.len(), 576);
    }

    #[test]
    fn degree_bounds_and_dims() {
        assert!(Degree::new(63).is_ok());
        assert!(Degree::new(64).is_err());
        assert_eq!(Degree::new(47).unwrap().dim(), 2304);
        assert_eq!(Degree::from_dim(576).unwrap().get(), 23);
        assert!(Degree::from_dim(575).is_err());
    }

    #[test]
    fn index_is_a_bijection() {
        let lmax = 20u32;
        let mut seen = vec![false; ((lmax + 1) * (lmax + 1)) as usize];
        for l in 0..=lmax {
            for m in -(l as i32)..=(l as i32) {
                let i = index(l, m);
                assert!(!seen[i]);
                seen[i] = true;
                assert_eq!(degree_order(i), (l, m));
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn point_construction_normalizes_azimuth() {
        let p = pt(1.0, -0.5);
        assert_relative_eq!(p.phi(), 2.0 * PI - 0.5, epsilon = 1e-15);
        let p = pt(1.0, 5.0 * PI);
        assert_relative_eq!(p.phi(), PI, epsilon = 1e-12);
        assert!(SphericalPoint::new(-0.1f64, 0.0).is_err());
        assert!(SphericalPoint::new(3.2f64, 0.0).is_err());
        assert!(SphericalPoint::new(PI, 0.0).is_ok());
        let p = SphericalPoint::new(1.0f64, -1e-18).unwrap();
        assert!(p.phi() < 2.0 * PI);
    }

    #[test]
    fn unit_vector_round_trip() {
        let p = pt(0.9, 4.2);
        let q = SphericalPoint::from_unit_vector(p.to_unit_vector()).unwrap();
        assert_relative_eq!(p.theta(), q.theta(), epsilon = 1e-12);
        assert_relative_eq!(p.phi(), q.phi(), epsilon = 1e-12);
        assert!(SphericalPoint::<f64>::from_unit_vector([0.0; 3]).is_err());
    }

    #[test]
    fn f32_high_degree_stays_finite() {
        let p = SphericalPoint::new(1.3f32, 0.4).unwrap();
        let row = sh_row(Degree::new(63).unwrap(), &p);
        assert!(row.iter().all(|v| v.is_finite()));
        let row64 = sh_row(Degree::new(63).unwrap(), &p.cast::<f64>());
        for (a, b) in row.iter().zip(&row64) {
            assert!((*a as f64 - b).abs() < 1e-3);
        }
    }

    proptest! {
        #[test]
        fn row_matches_single_basis(theta in 0.0..PI, phi in 0.0..(2.0 * PI), l in 0u32..30) {
            let p = pt(theta, phi);
            let row = sh_row(Degree::new(l).unwrap(), &p);
            for m in -(l as i32)..=(l as i32) {
                let single = sh_basis(l, m, &p).unwrap();
                prop_assert!((row[index(l, m)] - single).abs() <= 1e-12 * single.abs().max(1.0));
            }
        }

        #[test]
        fn parity(theta in 0.0..PI, phi in 0.0..(2.0 * PI), l in 0u32..25, mfrac in 0.0f64..1.0) {
            let m = ((2.0 * l as f64 + 1.0) * mfrac).floor() as i32 - l as i32;
            let m = m.clamp(-(l as i32), l as i32);
            let a = sh_basis(l, m, &pt(theta, phi)).unwrap();
            let b = sh_basis(l, m, &pt(PI - theta, phi + PI)).unwrap();
            let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
            prop_assert!((b - sign * a).abs() <= 1e-10 * a.abs().max(1.0));
        }
    }
}
