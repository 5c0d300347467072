//! Wall-clock timings of the main operations, reported as CSV rows.

use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffusion::{sample_latents, DiffusionSchedule, SampleConfig};
use crate::error::Result;
use crate::geo::default_rho;
use crate::nn::CsUnet;
use crate::scalar::Scalar;
use crate::shdd::{encode, kl_loss_batch, random_points, AnchorSet, ModeDecoder};
use crate::sphharm::{Degree, SphericalPoint};

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub what: String,
    pub degree: u32,
    /// Items per timed unit (locations, batch rows, ensemble members).
    pub batch: usize,
    pub anchors: usize,
    pub units: usize,
    pub total_s: f64,
    pub per_unit_s: f64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "what,degree,batch,anchors,units,total_s,per_unit_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6e},{:.6e}",
            self.what,
            self.degree,
            self.batch,
            self.anchors,
            self.units,
            self.total_s,
            self.per_unit_s
        )
    }
}

fn row(
    what: &str,
    degree: Degree,
    batch: usize,
    anchors: usize,
    units: usize,
    total: f64,
) -> BenchRow {
    BenchRow {
        what: what.into(),
        degree: degree.get(),
        batch,
        anchors,
        units,
        total_s: total,
        per_unit_s: total / units.max(1) as f64,
    }
}

/// Time per encoded location.
pub fn bench_encode<T: Scalar>(degree: Degree, n: usize, seed: u64) -> BenchRow {
    let pts: Vec<SphericalPoint<T>> = random_points(n, &mut ChaCha8Rng::seed_from_u64(seed));
    let t = Instant::now();
    let mut sink = T::zero();
    for p in &pts {
        sink = sink + encode(p, degree).coeffs[0];
    }
    let total = t.elapsed().as_secs_f64();
    std::hint::black_box(sink);
    row("encode", degree, 1, 0, n, total)
}

/// Time per decoded batch of `batch` encodings.
pub fn bench_decode<T: Scalar>(
    anchors: &AnchorSet<T>,
    batch: usize,
    reps: usize,
    seed: u64,
) -> Result<BenchRow> {
    let degree = anchors.degree();
    let decoder = ModeDecoder::new(anchors, T::of(default_rho(degree)))?;
    let pts: Vec<SphericalPoint<T>> = random_points(batch, &mut ChaCha8Rng::seed_from_u64(seed));
    let enc: Vec<Vec<T>> = pts.iter().map(|p| encode(p, degree).coeffs).collect();
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(decoder.decode_many_indices(&enc)?);
    }
    Ok(row(
        "decode",
        degree,
        batch,
        anchors.len(),
        reps,
        t.elapsed().as_secs_f64(),
    ))
}

/// Time per batch-mean KL loss and gradient evaluation.
pub fn bench_kl<T: Scalar>(
    anchors: &AnchorSet<T>,
    batch: usize,
    reps: usize,
    seed: u64,
) -> Result<BenchRow> {
    let degree = anchors.degree();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let to_mat = |pts: Vec<SphericalPoint<T>>| {
        let mut m = Array2::zeros((pts.len(), degree.dim()));
        for (i, p) in pts.iter().enumerate() {
            m.row_mut(i)
                .assign(&ndarray::Array1::from(encode(p, degree).coeffs));
        }
        m
    };
    let a = to_mat(random_points(batch, &mut rng));
    let b = to_mat(random_points(batch, &mut rng));
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(kl_loss_batch(a.view(), b.view(), anchors)?);
    }
    Ok(row(
        "kl",
        degree,
        batch,
        anchors.len(),
        reps,
        t.elapsed().as_secs_f64(),
    ))
}

/// Time per condition for the full reverse chains of one ensemble,
/// excluding decoding.
pub fn bench_sample<T: Scalar>(
    model: &CsUnet<T>,
    conditions: usize,
    cfg: &SampleConfig,
    schedule: &DiffusionSchedule,
) -> Result<BenchRow> {
    let dim = model.config().dim;
    let degree = Degree::from_dim(dim)?;
    let cond = Array2::<T>::zeros((conditions, model.config().cond_dim));
    let t = Instant::now();
    std::hint::black_box(sample_latents(model, cond.view(), dim, cfg, schedule)?);
    Ok(row(
        &format!("sample_{}x{}", cfg.steps, cfg.ensemble),
        degree,
        cfg.ensemble,
        0,
        conditions,
        t.elapsed().as_secs_f64(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_well_formed() {
        let d = Degree::new(3).unwrap();
        let r = bench_encode::<f64>(d, 50, 0);
        assert_eq!((r.units, r.batch), (50, 1));
        assert!(r.per_unit_s >= 0.0);
        let a = AnchorSet::<f64>::fibonacci(500, d).unwrap();
        let r = bench_decode(&a, 8, 2, 0).unwrap();
        assert_eq!(
            r.csv_row().split(',').count(),
            BenchRow::CSV_HEADER.split(',').count()
        );
        assert!(bench_kl(&a, 4, 1, 0).unwrap().total_s >= 0.0);
    }
}
