//! Dirac-delta spherical-harmonics encodings and everything that consumes
//! them: anchor sets, normalized spherical distributions, the reverse KL
//! divergence between an arbitrary coefficient vector and an encoded point,
//! the mode-seeking decoder and the coefficient low-pass filter.
//!
//! Every integral over the sphere is replaced by a sum over a finite anchor
//! set, and every exponentiated score is handled in the log domain: at
//! `L = 47` the score of an encoding against itself is `(L+1)²/4π ≈ 183`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::point_from_lat_lon;
use crate::scalar::Scalar;
use crate::sphharm::{sh_row_into, sh_row_with_scratch, Degree, SphericalPoint};

/// Truncated coefficient vector of the spherical Dirac delta at a point, or
/// any other latent of the same length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShddEncoding<T> {
    pub coeffs: Vec<T>,
    pub degree: Degree,
}

impl<T: Scalar> ShddEncoding<T> {
    /// Wraps a raw vector, checking that its length is `(L+1)²` and that
    /// every entry is finite.
    pub fn from_coeffs(coeffs: Vec<T>) -> Result<Self> {
        let degree = Degree::from_dim(coeffs.len())?;
        if let Some(i) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("coefficient {i}")));
        }
        Ok(Self { coeffs, degree })
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }
}

/// The delta's coefficients are the basis values at the point itself.
pub fn encode<T: Scalar>(p: &SphericalPoint<T>, degree: Degree) -> ShddEncoding<T> {
    let mut coeffs = vec![T::zero(); degree.dim()];
    sh_row_into(degree, p, &mut coeffs);
    ShddEncoding { coeffs, degree }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSource {
    Fibonacci,
    EvenGrid,
    Random,
    /// Synthetic non-uniform gallery: dense hubs plus a uniform remainder.
    Clustered,
    GalleryFile,
}

impl std::str::FromStr for AnchorSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fibonacci" | "fib" => Ok(Self::Fibonacci),
            "even_grid" | "grid" => Ok(Self::EvenGrid),
            "random" => Ok(Self::Random),
            "clustered" => Ok(Self::Clustered),
            "gallery_file" | "gallery" => Ok(Self::GalleryFile),
            other => Err(Error::InvalidField {
                field: "anchor source",
                reason: format!("unknown source {other:?}"),
            }),
        }
    }
}

/// Basis matrices up to this many entries are kept in memory; larger ones
/// are regenerated in row chunks on every use.
pub const DEFAULT_DENSE_BUDGET: usize = 1 << 25;
const STREAM_CHUNK: usize = 4096;

/// `N × (L+1)²` matrix of basis values at the anchors.
#[derive(Clone, Debug)]
pub enum BasisTable<T> {
    Dense(Array2<T>),
    Streamed,
}

#[derive(Clone, Debug)]
pub struct AnchorSet<T> {
    points: Vec<SphericalPoint<T>>,
    degree: Degree,
    basis: BasisTable<T>,
    source: AnchorSource,
}

impl<T: Scalar> AnchorSet<T> {
    pub fn from_points(
        points: Vec<SphericalPoint<T>>,
        degree: Degree,
        source: AnchorSource,
    ) -> Result<Self> {
        Self::with_dense_budget(points, degree, source, DEFAULT_DENSE_BUDGET)
    }

    pub fn with_dense_budget(
        points: Vec<SphericalPoint<T>>,
        degree: Degree,
        source: AnchorSource,
        budget: usize,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::pre("an anchor set needs at least one point"));
        }
        let basis = if points.len() * degree.dim() <= budget {
            BasisTable::Dense(basis_matrix(&points, degree))
        } else {
            BasisTable::Streamed
        };
        Ok(Self {
            points,
            degree,
            basis,
            source,
        })
    }

    pub fn fibonacci(n: usize, degree: Degree) -> Result<Self> {
        Self::from_points(fibonacci_points(n), degree, AnchorSource::Fibonacci)
    }

    pub fn random<R: Rng + ?Sized>(n: usize, degree: Degree, rng: &mut R) -> Result<Self> {
        Self::from_points(random_points(n, rng), degree, AnchorSource::Random)
    }

    pub fn even_grid(n: usize, degree: Degree) -> Result<Self> {
        Self::from_points(even_grid_points(n), degree, AnchorSource::EvenGrid)
    }

    pub fn from_gallery_file(path: &Path, degree: Degree) -> Result<Self> {
        Self::from_points(read_gallery(path)?, degree, AnchorSource::GalleryFile)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.degree.dim()
    }

    pub fn degree(&self) -> Degree {
        self.degree
    }

    pub fn source(&self) -> AnchorSource {
        self.source
    }

    pub fn points(&self) -> &[SphericalPoint<T>] {
        &self.points
    }

    pub fn basis(&self) -> &BasisTable<T> {
        &self.basis
    }

    pub fn basis_row(&self, i: usize) -> Vec<T> {
        match &self.basis {
            BasisTable::Dense(b) => b.row(i).to_vec(),
            BasisTable::Streamed => {
                let mut row = vec![T::zero(); self.dim()];
                sh_row_into(self.degree, &self.points[i], &mut row);
                row
            }
        }
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: width,
            });
        }
        Ok(())
    }

    /// Scores `⟨e_b, Y(anchor_i)⟩` for every encoding row `b`: a `B × N`
    /// matrix.
    pub fn logits(&self, encodings: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_width(encodings.ncols())?;
        match &self.basis {
            BasisTable::Dense(b) => Ok(standard_layout(encodings.dot(&b.t()))),
            BasisTable::Streamed => {
                let mut out = Array2::zeros((encodings.nrows(), self.len()));
                self.for_each_chunk(|start, chunk| {
                    let end = start + chunk.nrows();
                    out.slice_mut(s![.., start..end])
                        .assign(&encodings.dot(&chunk.t()));
                });
                Ok(out)
            }
        }
    }

    /// `weights (B × N) · basis (N × d)`, the pull-back of a score gradient
    /// onto the coefficients.
    pub fn pull_back(&self, weights: ArrayView2<T>) -> Result<Array2<T>> {
        if weights.ncols() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: weights.ncols(),
            });
        }
        match &self.basis {
            BasisTable::Dense(b) => Ok(standard_layout(weights.dot(b))),
            BasisTable::Streamed => {
                let mut out = Array2::zeros((weights.nrows(), self.dim()));
                self.for_each_chunk(|start, chunk| {
                    let end = start + chunk.nrows();
                    out.scaled_add(T::one(), &weights.slice(s![.., start..end]).dot(&chunk));
                });
                Ok(out)
            }
        }
    }

    fn for_each_chunk(&self, mut f: impl FnMut(usize, ArrayView2<T>)) {
        let d = self.dim();
        let mut scratch = Vec::new();
        let mut buf = Array2::<T>::zeros((STREAM_CHUNK.min(self.len()), d));
        for start in (0..self.len()).step_by(STREAM_CHUNK) {
            let end = (start + STREAM_CHUNK).min(self.len());
            for (k, p) in self.points[start..end].iter().enumerate() {
                let mut row = buf.row_mut(k);
                let slot = row.as_slice_mut().expect("row-major chunk buffer");
                sh_row_with_scratch(self.degree, p, slot, &mut scratch);
            }
            f(start, buf.slice(s![..end - start, ..]));
        }
    }

    /// Mean spacing `√(4π/N)` of an equal-area partition, radians.
    pub fn spacing_estimate(&self) -> f64 {
        (4.0 * std::f64::consts::PI / self.len() as f64)
            .sqrt()
            .min(std::f64::consts::PI)
    }
}

/// Products with a degenerate inner dimension may come back column-major;
/// callers slice rows, so normalize.
fn standard_layout<T: Scalar>(a: Array2<T>) -> Array2<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn basis_matrix<T: Scalar>(points: &[SphericalPoint<T>], degree: Degree) -> Array2<T> {
    let d = degree.dim();
    let mut m = Array2::<T>::zeros((points.len(), d));
    m.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(points.par_iter())
        .for_each_init(Vec::new, |scratch, (mut row, p)| {
            let slot = row.as_slice_mut().expect("row-major basis");
            sh_row_with_scratch(degree, p, slot, scratch);
        });
    m
}

/// Builds an anchor set. `seed` only matters for random anchors; `path` is
/// required for gallery files, whose line count determines `N`.
pub fn make_anchors<T: Scalar>(
    source: AnchorSource,
    n: usize,
    degree: Degree,
    seed: u64,
    path: Option<&Path>,
) -> Result<AnchorSet<T>> {
    use rand::SeedableRng;
    if source != AnchorSource::GalleryFile && n == 0 {
        return Err(Error::pre("anchor count must be at least 1"));
    }
    match source {
        AnchorSource::Fibonacci => AnchorSet::fibonacci(n, degree),
        AnchorSource::EvenGrid => AnchorSet::even_grid(n, degree),
        AnchorSource::Random => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            AnchorSet::random(n, degree, &mut rng)
        }
        AnchorSource::Clustered => {
            let pts = crate::data::clustered_points(n, CLUSTER_HUBS, 0.6, 300.0, seed)?;
            AnchorSet::from_points(
                pts.iter().map(|p| p.cast()).collect(),
                degree,
                AnchorSource::Clustered,
            )
        }
        AnchorSource::GalleryFile => {
            let path = path.ok_or_else(|| Error::pre("gallery anchors need a file path"))?;
            AnchorSet::from_gallery_file(path, degree)
        }
    }
}

const CLUSTER_HUBS: usize = 64;

/// Anchor set from a `source:count` spec such as `fibonacci:100000`, or
/// `gallery:<path>` for a lat,lon CSV.
pub fn anchors_from_spec<T: Scalar>(spec: &str, degree: Degree, seed: u64) -> Result<AnchorSet<T>> {
    let (kind, arg) = spec.split_once(':').ok_or_else(|| Error::InvalidField {
        field: "anchors spec",
        reason: format!("{spec:?} is not of the form source:count"),
    })?;
    let source: AnchorSource = kind.parse()?;
    if source == AnchorSource::GalleryFile {
        return make_anchors(source, 0, degree, seed, Some(Path::new(arg)));
    }
    let n: usize = arg.parse().map_err(|_| Error::InvalidField {
        field: "anchors spec",
        reason: format!("{arg:?} is not a count"),
    })?;
    make_anchors(source, n, degree, seed, None)
}

/// Golden-angle spiral with equal-area latitude bands.
pub fn fibonacci_points<T: Scalar>(n: usize) -> Vec<SphericalPoint<T>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let phi = (i as f64 * golden).rem_euclid(std::f64::consts::TAU);
            SphericalPoint::new(T::of(z.clamp(-1.0, 1.0).acos()), T::of(phi))
                .expect("Fibonacci angles are in range")
        })
        .collect()
}

/// Area-uniform samples: `cos θ` and `φ` uniform.
pub fn random_points<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<SphericalPoint<T>> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.random_range(-1.0..=1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            SphericalPoint::new(T::of(z.acos()), T::of(phi)).expect("sampled angles are in range")
        })
        .collect()
}

/// Latitude rings spaced `√(4π/n)` apart, each holding a number of points
/// proportional to its circumference, so the lattice thins toward the poles.
/// The total is close to, not exactly, `n`.
pub fn even_grid_points<T: Scalar>(n: usize) -> Vec<SphericalPoint<T>> {
    let step = (4.0 * std::f64::consts::PI / n.max(1) as f64).sqrt();
    let rings = ((std::f64::consts::PI / step).round() as usize).max(1);
    let mut pts = Vec::with_capacity(n + rings);
    for r in 0..rings {
        let theta = (r as f64 + 0.5) * std::f64::consts::PI / rings as f64;
        let count = ((std::f64::consts::TAU * theta.sin() / step).round() as usize).max(1);
        let offset = if r % 2 == 0 { 0.0 } else { 0.5 };
        for k in 0..count {
            let phi = (k as f64 + offset) * std::f64::consts::TAU / count as f64;
            pts.push(SphericalPoint::new(T::of(theta), T::of(phi)).expect("grid angles in range"));
        }
    }
    pts
}

/// Reads `lat,lon` lines (degrees). Blank lines are skipped.
pub fn read_gallery<T: Scalar>(path: &Path) -> Result<Vec<SphericalPoint<T>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason,
        };
        let mut fields = line.split(',').map(str::trim);
        let (Some(lat), Some(lon), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(format!("expected `lat,lon`, got {line:?}")));
        };
        let lat: f64 = lat.parse().map_err(|e| parse_err(format!("lat: {e}")))?;
        let lon: f64 = lon.parse().map_err(|e| parse_err(format!("lon: {e}")))?;
        if !(-180.0..180.0).contains(&lon) {
            return Err(parse_err(format!("lon {lon} outside [-180, 180)")));
        }
        points.push(point_from_lat_lon(lat, lon).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(points)
}

/// Normalized distribution over an anchor set, kept as log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SphericalDistribution<T> {
    pub log_weights: Vec<T>,
}

impl<T: Scalar> SphericalDistribution<T> {
    pub fn probabilities(&self) -> Vec<T> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.log_weights)
    }

    /// Total probability on anchors within `radius` (radians) of `center`.
    pub fn mass_within(
        &self,
        anchors: &AnchorSet<T>,
        center: &SphericalPoint<T>,
        radius: f64,
    ) -> f64 {
        anchors
            .points()
            .iter()
            .zip(&self.log_weights)
            .filter(|(p, _)| crate::geo::central_angle(p, center) <= radius)
            .map(|(_, w)| w.f64().exp())
            .sum()
    }
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// In-place `x ← x − logsumexp(x)`.
fn log_normalize<T: Scalar>(row: &mut [T]) {
    let lse = crate::scalar::logsumexp(row.iter().copied());
    for x in row.iter_mut() {
        *x = *x - lse;
    }
}

fn check_finite<T: Scalar>(what: &str, v: &[T]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what}[{i}]"))),
        None => Ok(()),
    }
}

/// `q_e` over the anchors: softmax of the scores `⟨e, Y(anchor_i)⟩`.
pub fn make_distribution<T: Scalar>(
    e: &[T],
    anchors: &AnchorSet<T>,
) -> Result<SphericalDistribution<T>> {
    anchors.check_width(e.len())?;
    check_finite("encoding", e)?;
    let view = ArrayView2::from_shape((1, e.len()), e).expect("contiguous slice");
    let mut log_weights = anchors.logits(view)?.into_raw_vec_and_offset().0;
    log_normalize(&mut log_weights);
    Ok(SphericalDistribution { log_weights })
}

/// `Σ_i q_i (log q_i − log p_i)` for two score vectors over the same anchors.
pub fn kl_from_logits<T: Scalar>(pred: &[T], target: &[T]) -> T {
    let mut lq = pred.to_vec();
    let mut lp = target.to_vec();
    log_normalize(&mut lq);
    log_normalize(&mut lp);
    lq.iter().zip(&lp).map(|(&a, &b)| a.exp() * (a - b)).sum()
}

/// KL and its gradient with respect to the predicted scores:
/// `∂KL/∂s_i = q_i (log q_i − log p_i − KL)`.
pub fn kl_grad_from_logits<T: Scalar>(pred: &[T], target: &[T], grad: &mut [T]) -> T {
    let mut lq = pred.to_vec();
    let mut lp = target.to_vec();
    log_normalize(&mut lq);
    log_normalize(&mut lp);
    let kl: T = lq.iter().zip(&lp).map(|(&a, &b)| a.exp() * (a - b)).sum();
    for ((g, &a), &b) in grad.iter_mut().zip(&lq).zip(&lp) {
        *g = a.exp() * (a - b - kl);
    }
    kl
}

/// Reverse KL divergence `KL(q_e ‖ p_target)` over the anchor distribution.
pub fn shdd_kl<T: Scalar>(e: &[T], target: &ShddEncoding<T>, anchors: &AnchorSet<T>) -> Result<T> {
    if e.len() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: e.len(),
        });
    }
    anchors.check_width(e.len())?;
    check_finite("encoding", e)?;
    check_finite("target", &target.coeffs)?;
    let mut both = Array2::<T>::zeros((2, e.len()));
    both.row_mut(0).assign(&ndarray::aview1(e));
    both.row_mut(1).assign(&ndarray::aview1(&target.coeffs));
    let logits = anchors.logits(both.view())?;
    let (pred, tgt) = (logits.row(0), logits.row(1));
    Ok(kl_from_logits(
        pred.as_slice().expect("row-major"),
        tgt.as_slice().expect("row-major"),
    ))
}

/// Batch-mean KL loss and its gradient with respect to the predictions.
#[derive(Clone, Debug)]
pub struct KlBatch<T> {
    pub loss: T,
    pub per_sample: Vec<T>,
    pub grad: Array2<T>,
    pub max_abs_logit: f64,
}

/// Mean over rows of `KL(q_pred ‖ p_target)` on shared anchors.
pub fn kl_loss_batch<T: Scalar>(
    pred: ArrayView2<T>,
    target: ArrayView2<T>,
    anchors: &AnchorSet<T>,
) -> Result<KlBatch<T>> {
    if pred.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.len(),
            got: pred.len(),
        });
    }
    let b = pred.nrows();
    if b == 0 {
        return Err(Error::pre("empty batch"));
    }
    let s_pred = anchors.logits(pred)?;
    let s_tgt = anchors.logits(target)?;
    let max_abs_logit = s_pred.iter().fold(0.0f64, |m, v| m.max(v.f64().abs()));
    let mut dlogits = Array2::<T>::zeros(s_pred.dim());
    let scale = T::one() / T::of_usize(b);
    let per_sample: Vec<T> = dlogits
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .map(|(i, mut g)| {
            let g = g.as_slice_mut().expect("row-major");
            let kl = kl_grad_from_logits(
                s_pred.row(i).as_slice().expect("row-major"),
                s_tgt.row(i).as_slice().expect("row-major"),
                g,
            );
            for x in g.iter_mut() {
                *x = *x * scale;
            }
            kl
        })
        .collect();
    let loss = per_sample.iter().copied().sum::<T>() * scale;
    let grad = anchors.pull_back(dlogits.view())?;
    Ok(KlBatch {
        loss,
        per_sample,
        grad,
        max_abs_logit,
    })
}

/// Uniform 3-D hash grid over anchor unit vectors for fixed-radius queries.
#[derive(Clone, Debug)]
struct CellGrid {
    cell: f64,
    chord2: f64,
    units: Vec<[f64; 3]>,
    order: Vec<u32>,
    cells: HashMap<[i32; 3], (u32, u32)>,
}

impl CellGrid {
    fn new(units: Vec<[f64; 3]>, chord: f64) -> Self {
        let cell = chord.max(1e-6);
        let key = |v: &[f64; 3]| v.map(|c| (c / cell).floor() as i32);
        let mut order: Vec<u32> = (0..units.len() as u32).collect();
        order.sort_by_key(|&i| (key(&units[i as usize]), i));
        let mut cells = HashMap::new();
        let mut start = 0usize;
        while start < order.len() {
            let k = key(&units[order[start] as usize]);
            let mut end = start + 1;
            while end < order.len() && key(&units[order[end] as usize]) == k {
                end += 1;
            }
            cells.insert(k, (start as u32, end as u32));
            start = end;
        }
        Self {
            cell,
            chord2: chord * chord,
            units,
            order,
            cells,
        }
    }

    /// Calls `f(j)` for every anchor strictly within the window of anchor `i`
    /// (including `i`).
    #[inline]
    fn for_each_neighbor(&self, i: usize, mut f: impl FnMut(usize)) {
        let u = self.units[i];
        let k = u.map(|c| (c / self.cell).floor() as i32);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(&(a, b)) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else {
                        continue;
                    };
                    for &j in &self.order[a as usize..b as usize] {
                        let v = self.units[j as usize];
                        let d2 =
                            (u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2);
                        if d2 < self.chord2 {
                            f(j as usize);
                        }
                    }
                }
            }
        }
    }
}

/// Mode-seeking decoder: the anchor whose radius-`rho` window carries the
/// largest mass `Σ_j exp⟨e, Y(anchor_j)⟩`; ties go to the lowest index.
///
/// The search is exact but pruned: with `C` the largest window population
/// and `W*` the window mass at the top-scoring anchor, any window whose
/// members all score below `log W* − log C` has mass below `W*`, so only
/// windows touching a member scoring above that bound are evaluated.
#[derive(Clone, Debug)]
pub struct ModeDecoder<'a, T> {
    anchors: &'a AnchorSet<T>,
    rho: f64,
    grid: CellGrid,
    ln_max_window: f64,
}

impl<'a, T: Scalar> ModeDecoder<'a, T> {
    /// Fails when `rho` is not positive or is below half the anchor spacing
    /// estimate, where windows degenerate to single anchors.
    pub fn new(anchors: &'a AnchorSet<T>, rho: T) -> Result<Self> {
        let rho = rho.f64();
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::pre(format!("window radius {rho} must be positive")));
        }
        let spacing = anchors.spacing_estimate() / 2.0;
        if rho < spacing {
            return Err(Error::WindowBelowSpacing { rho, spacing });
        }
        let units = anchors
            .points()
            .iter()
            .map(|p| p.cast::<f64>().to_unit_vector())
            .collect();
        let chord = 2.0 * (rho.min(std::f64::consts::PI) / 2.0).sin();
        let grid = CellGrid::new(units, chord);
        let max_window = (0..anchors.len())
            .into_par_iter()
            .map(|i| {
                let mut c = 0usize;
                grid.for_each_neighbor(i, |_| c += 1);
                c
            })
            .max()
            .unwrap_or(1);
        Ok(Self {
            anchors,
            rho,
            grid,
            ln_max_window: (max_window as f64).ln(),
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn anchors(&self) -> &AnchorSet<T> {
        self.anchors
    }

    fn window_log_mass(&self, i: usize, s: &[T]) -> f64 {
        let mut m = f64::NEG_INFINITY;
        self.grid.for_each_neighbor(i, |j| m = m.max(s[j].f64()));
        let mut acc = 0.0;
        self.grid
            .for_each_neighbor(i, |j| acc += (s[j].f64() - m).exp());
        m + acc.ln()
    }

    /// Anchor index maximizing the window mass for the given anchor scores.
    pub fn decode_scores(&self, s: &[T]) -> usize {
        let i0 = argmax(s);
        let best0 = self.window_log_mass(i0, s);
        let tau = best0 - self.ln_max_window;
        let mut candidates: Vec<u32> = Vec::new();
        for (j, v) in s.iter().enumerate() {
            if v.f64() >= tau {
                self.grid
                    .for_each_neighbor(j, |i| candidates.push(i as u32));
            }
        }
        candidates.sort_unstable();
        candidates.dedup();
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for &i in &candidates {
            let i = i as usize;
            let w = if i == i0 {
                best0
            } else {
                self.window_log_mass(i, s)
            };
            if w > best.1 {
                best = (i, w);
            }
        }
        best.0
    }

    pub fn decode_index(&self, e: &[T]) -> Result<usize> {
        Ok(self.decode_many_indices(std::slice::from_ref(&e.to_vec()))?[0])
    }

    pub fn decode(&self, e: &[T]) -> Result<SphericalPoint<T>> {
        Ok(self.anchors.points()[self.decode_index(e)?])
    }

    pub fn decode_many_indices(&self, encodings: &[Vec<T>]) -> Result<Vec<usize>> {
        const BATCH: usize = 64;
        let d = self.anchors.dim();
        let mut out = Vec::with_capacity(encodings.len());
        for chunk in encodings.chunks(BATCH) {
            let mut m = Array2::<T>::zeros((chunk.len(), d));
            for (mut row, e) in m.axis_iter_mut(Axis(0)).zip(chunk) {
                self.anchors.check_width(e.len())?;
                check_finite("encoding", e)?;
                row.assign(&ndarray::aview1(e));
            }
            let scores = self.anchors.logits(m.view())?;
            let idx: Vec<usize> = scores
                .axis_iter(Axis(0))
                .into_par_iter()
                .map(|row| self.decode_scores(row.as_slice().expect("row-major")))
                .collect();
            out.extend(idx);
        }
        Ok(out)
    }

    pub fn decode_many(&self, encodings: &[Vec<T>]) -> Result<Vec<SphericalPoint<T>>> {
        Ok(self
            .decode_many_indices(encodings)?
            .into_iter()
            .map(|i| self.anchors.points()[i])
            .collect())
    }
}

/// One-shot decode with a fresh [`ModeDecoder`]; build the decoder once when
/// decoding many vectors against the same anchors.
pub fn decode_mode<T: Scalar>(
    e: &[T],
    anchors: &AnchorSet<T>,
    rho: T,
) -> Result<SphericalPoint<T>> {
    ModeDecoder::new(anchors, rho)?.decode(e)
}

/// Per-dimension maximum of `|Y_lm|` over a dense point set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMagnitudes {
    pub degree: Degree,
    pub max_abs: Vec<f64>,
}

impl CoefficientMagnitudes {
    /// Scans a Fibonacci lattice of `grid_points` points plus both poles.
    pub fn compute(degree: Degree, grid_points: usize) -> Self {
        let mut pts: Vec<SphericalPoint<f64>> = fibonacci_points(grid_points);
        pts.push(SphericalPoint::new(0.0, 0.0).expect("north pole"));
        pts.push(SphericalPoint::new(std::f64::consts::PI, 0.0).expect("south pole"));
        let d = degree.dim();
        let max_abs = pts
            .par_chunks(1024)
            .map(|chunk| {
                let mut acc = vec![0.0f64; d];
                let mut row = vec![0.0f64; d];
                let mut scratch = Vec::new();
                for p in chunk {
                    sh_row_with_scratch(degree, p, &mut row, &mut scratch);
                    for (a, v) in acc.iter_mut().zip(&row) {
                        *a = a.max(v.abs());
                    }
                }
                acc
            })
            .reduce(
                || vec![0.0; d],
                |a, b| a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect(),
            );
        Self { degree, max_abs }
    }

    /// Keeps dimensions whose global magnitude does not exceed `threshold`.
    pub fn mask(&self, threshold: f64) -> Result<Vec<bool>> {
        if !(threshold > 0.0) {
            return Err(Error::EmptyMask(threshold));
        }
        let mask: Vec<bool> = self.max_abs.iter().map(|&m| m <= threshold).collect();
        if !mask.iter().any(|&k| k) {
            return Err(Error::EmptyMask(threshold));
        }
        Ok(mask)
    }

    /// Smallest threshold whose mask keeps at least `n_keep` dimensions.
    pub fn threshold_keeping(&self, n_keep: usize) -> f64 {
        let mut v = self.max_abs.clone();
        v.sort_by(|a, b| a.total_cmp(b));
        v[n_keep.clamp(1, v.len()) - 1]
    }
}

/// Zeroes the dimensions rejected by the magnitude mask and returns the mask
/// for reuse on further encodings.
pub fn low_pass_filter<T: Scalar>(
    e: &ShddEncoding<T>,
    magnitudes: &CoefficientMagnitudes,
    threshold: f64,
) -> Result<(ShddEncoding<T>, Vec<bool>)> {
    if magnitudes.degree != e.degree {
        return Err(Error::DimensionMismatch {
            expected: magnitudes.degree.dim(),
            got: e.dim(),
        });
    }
    if threshold == f64::INFINITY {
        return Ok((e.clone(), vec![true; e.dim()]));
    }
    let mask = magnitudes.mask(threshold)?;
    Ok((apply_mask(e, &mask), mask))
}

pub fn apply_mask<T: Scalar>(e: &ShddEncoding<T>, mask: &[bool]) -> ShddEncoding<T> {
    ShddEncoding {
        coeffs: e
            .coeffs
            .iter()
            .zip(mask)
            .map(|(&c, &keep)| if keep { c } else { T::zero() })
            .collect(),
        degree: e.degree,
    }
}
