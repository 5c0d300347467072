//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

fn rat(n: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(n))
}

fn factorial(n: u32) -> BigRational {
    (1..=n as i64).fold(BigRational::one(), |acc, k| acc * rat(k))
}

/// `a choose k` for rational `a`.
fn gen_binomial(a: &BigRational, k: u32) -> BigRational {
    let mut num = BigRational::one();
    for j in 0..k {
        num *= a - rat(j as i64);
    }
    num / factorial(k)
}

/// Explicit sum formula for `P_l^m(x)` with the Condon–Shortley phase:
/// `(-1)^m 2^l (1-x²)^{m/2} Σ_{k=m}^{l} k!/(k-m)! x^{k-m} C(l,k) C((l+k-1)/2, l)`.
/// The polynomial part is exact; only the final `(1-x²)^{m/2}` factor is
/// evaluated in floating point.
pub fn legendre_sum(l: u32, m: u32, x: f64) -> f64 {
    let xr = BigRational::from_float(x).expect("finite x");
    let mut sum = BigRational::zero();
    for k in m..=l {
        let a = BigRational::new(BigInt::from(l as i64 + k as i64 - 1), BigInt::from(2));
        let term = factorial(k) / factorial(k - m)
            * num_traits::pow(xr.clone(), (k - m) as usize)
            * gen_binomial(&rat(l as i64), k)
            * gen_binomial(&a, l);
        sum += term;
    }
    let mut poly = sum * num_traits::pow(rat(2), l as usize);
    if m % 2 == 1 {
        poly = -poly;
    }
    let one_minus = (BigRational::one() - &xr * &xr).to_f64().unwrap();
    poly.to_f64().unwrap() * one_minus.powf(m as f64 / 2.0)
}

/// Real basis function from the sum formula and the three-case definition.
pub fn ylm_reference(l: u32, m: i32, theta: f64, phi: f64) -> f64 {
    let am = m.unsigned_abs();
    let ratio = (factorial(l - am) / factorial(l + am)).to_f64().unwrap();
    let j = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * ratio).sqrt();
    let p = legendre_sum(l, am, theta.cos());
    let sign = if am % 2 == 0 { 1.0 } else { -1.0 };
    match m.signum() {
        0 => j * p,
        1 => sign * 2f64.sqrt() * j * p * (am as f64 * phi).cos(),
        _ => sign * 2f64.sqrt() * j * p * (am as f64 * phi).sin(),
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1] by Newton iteration on `P_n`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Largest entry of `|G − I|` where `G` is the Gram matrix of the degree-`L`
/// rows under product quadrature (Gauss–Legendre in `cos θ`, uniform in `φ`)
/// that integrates every product of two such functions exactly.
pub fn orthonormality_error(degree: u32, row: impl Fn(f64, f64) -> Vec<f64>) -> f64 {
    let d = ((degree + 1) * (degree + 1)) as usize;
    let nodes = gauss_legendre(degree as usize + 2);
    let n_phi = 2 * degree as usize + 2;
    let mut gram = vec![0.0f64; d * d];
    for &(x, w) in &nodes {
        let theta = x.clamp(-1.0, 1.0).acos();
        for j in 0..n_phi {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / n_phi as f64;
            let y = row(theta, phi);
            let wt = w * 2.0 * std::f64::consts::PI / n_phi as f64;
            for a in 0..d {
                let ya = wt * y[a];
                for b in a..d {
                    gram[a * d + b] += ya * y[b];
                }
            }
        }
    }
    let mut worst = 0.0f64;
    for a in 0..d {
        for b in a..d {
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((gram[a * d + b] - target).abs());
        }
    }
    worst
}

/// Reverse KL between two score vectors computed the long way: plain
/// exponentials, explicit normalizers, then `Σ q ln(q/p)`.
pub fn naive_kl(pred_scores: &[f64], target_scores: &[f64]) -> f64 {
    let zq: f64 = pred_scores.iter().map(|s| s.exp()).sum();
    let zp: f64 = target_scores.iter().map(|s| s.exp()).sum();
    pred_scores
        .iter()
        .zip(target_scores)
        .map(|(&a, &b)| {
            let q = a.exp() / zq;
            let p = b.exp() / zp;
            q * (q / p).ln()
        })
        .sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Arc length in km from the spherical law of cosines on unit vectors;
/// adequate away from very small separations.
pub fn law_of_cosines_km(a: [f64; 3], b: [f64; 3]) -> f64 {
    dot(&a, &b).clamp(-1.0, 1.0).acos() * 6371.0088
}

pub fn is_sorted_nondecreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] <= w[1])
}
