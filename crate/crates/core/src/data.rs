//! Datasets of (condition vector, location) pairs: JSON-lines I/O, two
//! synthetic generators, and the table of precomputed target encodings.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::TrainSet;
use crate::error::{Error, Result};
use crate::geo::{central_angle, lat_lon_of, point_from_lat_lon, EARTH_RADIUS_KM};
use crate::scalar::Scalar;
use crate::shdd::{encode, random_points};
use crate::sphharm::{sh_row_into, Degree, SphericalPoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoRecord {
    pub condition: Vec<f64>,
    pub lat: f64,
    pub lon: f64,
    pub split: Split,
}

impl GeoRecord {
    /// Checks ranges and, when given, the condition width.
    pub fn validate(&self, cond_dim: Option<usize>) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::InvalidField {
                field: "lat",
                reason: format!("{} outside [-90, 90]", self.lat),
            });
        }
        if !(-180.0..180.0).contains(&self.lon) {
            return Err(Error::InvalidField {
                field: "lon",
                reason: format!("{} outside [-180, 180)", self.lon),
            });
        }
        if let Some(i) = self.condition.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidField {
                field: "condition",
                reason: format!("entry {i} is not finite"),
            });
        }
        if let Some(d) = cond_dim {
            if self.condition.len() != d {
                return Err(Error::InvalidField {
                    field: "condition",
                    reason: format!("length {} but expected {d}", self.condition.len()),
                });
            }
        }
        Ok(())
    }

    pub fn point<T: Scalar>(&self) -> Result<SphericalPoint<T>> {
        point_from_lat_lon(self.lat, self.lon)
    }
}

/// Reads JSON-lines records. Blank lines are skipped; every record is
/// validated and, if `cond_dim` is `None`, must match the first record's
/// condition width.
pub fn load_dataset(path: &Path, cond_dim: Option<usize>) -> Result<Vec<GeoRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut dim = cond_dim;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            reason,
        };
        let rec: GeoRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate(dim).map_err(|e| parse_err(e.to_string()))?;
        dim.get_or_insert(rec.condition.len());
        out.push(rec);
    }
    if out.is_empty() {
        log::warn!("dataset {} contains no records", path.display());
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, records: &[GeoRecord]) -> Result<()> {
    crate::diffusion::write_jsonl(path, records)
}

pub fn split(records: &[GeoRecord], which: Split) -> Vec<GeoRecord> {
    records
        .iter()
        .filter(|r| r.split == which)
        .cloned()
        .collect()
}

pub fn conditions_matrix<T: Scalar>(records: &[GeoRecord]) -> Result<Array2<T>> {
    let d = records.first().map_or(0, |r| r.condition.len());
    let mut m = Array2::zeros((records.len(), d));
    for (mut row, r) in m.axis_iter_mut(Axis(0)).zip(records) {
        if r.condition.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: r.condition.len(),
            });
        }
        for (dst, &v) in row.iter_mut().zip(&r.condition) {
            *dst = T::of(v);
        }
    }
    Ok(m)
}

pub fn points<T: Scalar>(records: &[GeoRecord]) -> Result<Vec<SphericalPoint<T>>> {
    records.iter().map(|r| r.point()).collect()
}

fn standard_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Point displaced from `c` by an isotropic Gaussian of `sigma_km` per
/// tangent axis.
fn perturb<R: Rng + ?Sized>(
    c: &SphericalPoint<f64>,
    sigma_km: f64,
    rng: &mut R,
) -> SphericalPoint<f64> {
    if sigma_km == 0.0 {
        return *c;
    }
    let u = c.to_unit_vector();
    let helper = if u[2].abs() < 0.9 {
        [0.0, 0.0, 1.0]
    } else {
        [1.0, 0.0, 0.0]
    };
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let e1 = cross(u, helper);
    let n1 = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    let e1 = [e1[0] / n1, e1[1] / n1, e1[2] / n1];
    let e2 = cross(u, e1);
    let s = sigma_km / EARTH_RADIUS_KM;
    let (g1, g2): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
    let v = [0, 1, 2].map(|k| u[k] + s * (g1 * e1[k] + g2 * e2[k]));
    SphericalPoint::from_unit_vector(v).expect("non-degenerate displacement")
}

fn record_from_point(condition: Vec<f64>, p: &SphericalPoint<f64>, split: Split) -> GeoRecord {
    let (lat, lon) = lat_lon_of(p);
    GeoRecord {
        condition,
        lat: lat.clamp(-90.0, 90.0),
        lon,
        split,
    }
}

/// 8 / 1 / 1 split by position within a cluster.
fn split_of(i: usize) -> Split {
    match i % 10 {
        8 => Split::Val,
        9 => Split::Test,
        _ => Split::Train,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CitiesConfig {
    pub k: usize,
    pub n_per: usize,
    pub cond_dim: usize,
    pub noise_km: f64,
    pub cond_noise: f64,
    pub min_separation_km: f64,
    pub seed: u64,
}

impl CitiesConfig {
    pub fn new(k: usize, n_per: usize, cond_dim: usize, seed: u64) -> Self {
        Self {
            k,
            n_per,
            cond_dim,
            noise_km: 25.0,
            cond_noise: 0.1,
            min_separation_km: 3000.0,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cities {
    pub records: Vec<GeoRecord>,
    pub centers: Vec<SphericalPoint<f64>>,
    /// City index of each record.
    pub labels: Vec<usize>,
}

const CENTER_ATTEMPTS: usize = 100_000;

/// `k` well-separated city centers, each with a fixed random embedding;
/// each record's condition is its city's embedding plus Gaussian noise and
/// its location is the center displaced by `noise_km`.
pub fn gen_cities(cfg: &CitiesConfig) -> Result<Cities> {
    if cfg.k == 0 {
        return Err(Error::InvalidField {
            field: "k",
            reason: "need at least one city".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let min_sep = cfg.min_separation_km / EARTH_RADIUS_KM;
    let mut centers: Vec<SphericalPoint<f64>> = Vec::with_capacity(cfg.k);
    let mut attempts = 0;
    while centers.len() < cfg.k {
        attempts += 1;
        if attempts > CENTER_ATTEMPTS {
            return Err(Error::pre(format!(
                "could not place {} centers at least {} km apart",
                cfg.k, cfg.min_separation_km
            )));
        }
        let c = random_points::<f64, _>(1, &mut rng)[0];
        if centers.iter().all(|o| central_angle(o, &c) >= min_sep) {
            centers.push(c);
        }
    }
    let embeddings: Vec<Vec<f64>> = (0..cfg.k)
        .map(|_| standard_normal_vec(cfg.cond_dim, &mut rng))
        .collect();
    let mut records = Vec::with_capacity(cfg.k * cfg.n_per);
    let mut labels = Vec::with_capacity(cfg.k * cfg.n_per);
    for i in 0..cfg.n_per {
        for (c, (center, emb)) in centers.iter().zip(&embeddings).enumerate() {
            let cond: Vec<f64> = emb
                .iter()
                .map(|&v| v + cfg.cond_noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let p = perturb(center, cfg.noise_km, &mut rng);
            records.push(record_from_point(cond, &p, split_of(i)));
            labels.push(c);
        }
    }
    Ok(Cities {
        records,
        centers,
        labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Random,
    Identity,
}

/// Uniform locations whose condition is `P · encode(p, l_src) + noise`.
pub fn gen_embedded_loc(
    n: usize,
    cond_dim: usize,
    l_src: Degree,
    projection: Projection,
    noise: f64,
    seed: u64,
) -> Result<Vec<GeoRecord>> {
    let src = l_src.dim();
    if cond_dim > src {
        return Err(Error::pre(format!(
            "condition width {cond_dim} exceeds source encoding width {src}"
        )));
    }
    if projection == Projection::Identity && cond_dim != src {
        return Err(Error::pre(
            "identity projection needs cond_dim == (L_src+1)^2",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p_mat: Option<Array2<f64>> = match projection {
        Projection::Identity => None,
        Projection::Random => {
            let scale = 1.0 / (src as f64).sqrt();
            Some(Array2::from_shape_simple_fn((cond_dim, src), || {
                scale * rng.sample::<f64, _>(StandardNormal)
            }))
        }
    };
    let pts = random_points::<f64, _>(n, &mut rng);
    Ok(pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let e = ndarray::Array1::from(encode(p, l_src).coeffs);
            let mut c = match &p_mat {
                Some(m) => m.dot(&e).to_vec(),
                None => e.to_vec(),
            };
            if noise > 0.0 {
                for v in &mut c {
                    *v += noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            record_from_point(c, p, split_of(i))
        })
        .collect())
}

/// A non-uniform anchor gallery: `frac_clustered` of the points are drawn
/// around `n_clusters` random hubs with `spread_km` Gaussian spread, the
/// rest uniformly.
pub fn clustered_points(
    n: usize,
    n_clusters: usize,
    frac_clustered: f64,
    spread_km: f64,
    seed: u64,
) -> Result<Vec<SphericalPoint<f64>>> {
    if n_clusters == 0 || !(0.0..=1.0).contains(&frac_clustered) {
        return Err(Error::pre("need clusters and a fraction in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hubs = random_points::<f64, _>(n_clusters, &mut rng);
    let n_cl = (n as f64 * frac_clustered).round() as usize;
    let mut out: Vec<_> = (0..n_cl)
        .map(|i| perturb(&hubs[i % n_clusters], spread_km, &mut rng))
        .collect();
    out.extend(random_points::<f64, _>(n - n_cl, &mut rng));
    Ok(out)
}

/// Target encodings of every record, row `i` = `encode(point_i, L)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShddLookup<T> {
    degree: Degree,
    table: Array2<T>,
}

impl<T: Scalar> ShddLookup<T> {
    pub fn degree(&self) -> Degree {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.table.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> &[T] {
        self.table.row(i).to_slice().expect("row-major")
    }

    pub fn table(&self) -> &Array2<T> {
        &self.table
    }

    pub fn into_train_set(self, records: &[GeoRecord]) -> Result<TrainSet<T>> {
        TrainSet::new(conditions_matrix(records)?, self.table)
    }
}

pub fn build_lookup<T: Scalar>(records: &[GeoRecord], degree: Degree) -> Result<ShddLookup<T>> {
    let pts: Vec<SphericalPoint<T>> = points(records)?;
    let mut table = Array2::zeros((pts.len(), degree.dim()));
    table
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(pts.par_iter())
        .for_each(|(mut row, p)| {
            sh_row_into(degree, p, row.as_slice_mut().expect("row-major"));
        });
    Ok(ShddLookup { degree, table })
}

/// Hex SHA-256 of the dataset's canonical JSON.
pub fn dataset_hash(records: &[GeoRecord]) -> Result<String> {
    let mut h = Sha256::new();
    for r in records {
        h.update(serde_json::to_vec(r)?);
        h.update(b"\n");
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Like [`build_lookup`] but reuses `cache_dir/lookup-<hash>-L<l>.bin` when
/// present and writes it otherwise.
pub fn build_lookup_cached<T: Scalar>(
    records: &[GeoRecord],
    degree: Degree,
    cache_dir: &Path,
) -> Result<ShddLookup<T>> {
    let hash = dataset_hash(records)?;
    let path: PathBuf = cache_dir.join(format!("lookup-{}-L{}.bin", &hash[..16], degree.get()));
    let d = degree.dim();
    if let Ok(f) = std::fs::File::open(&path) {
        let mut bytes = Vec::new();
        BufReader::new(f)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(&path, e))?;
        if bytes.len() == records.len() * d * 8 {
            let vals: Vec<T> = bytes
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            let table = Array2::from_shape_vec((records.len(), d), vals)
                .map_err(|e| Error::pre(e.to_string()))?;
            log::debug!("loaded lookup cache {}", path.display());
            return Ok(ShddLookup { degree, table });
        }
        log::warn!(
            "ignoring lookup cache {} with unexpected size",
            path.display()
        );
    }
    let lookup: ShddLookup<T> = build_lookup(records, degree)?;
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    for v in lookup.table.iter() {
        w.write_all(&v.f64().to_le_bytes())
            .map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(lookup)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let recs = gen_cities(&CitiesConfig::new(3, 10, 4, 1)).unwrap().records;
        save_dataset(&p, &recs).unwrap();
        assert_eq!(load_dataset(&p, Some(4)).unwrap(), recs);
        assert!(load_dataset(&p, Some(5)).is_err());

        std::fs::write(&p, "").unwrap();
        assert!(load_dataset(&p, None).unwrap().is_empty());

        std::fs::write(
            &p,
            "{\"condition\":[1.0],\"lat\":10,\"lon\":0,\"split\":\"train\"}\n\n{\"condition\":[1.0],\"lat\":95,\"lon\":0,\"split\":\"test\"}\n",
        )
        .unwrap();
        let err = load_dataset(&p, None).unwrap_err();
        match err {
            Error::Parse { line, reason, .. } => {
                assert_eq!(line, 3);
                assert!(reason.contains("lat"), "{reason}");
            }
            e => panic!("unexpected {e:?}"),
        }
        std::fs::write(&p, "{\"condition\":[1.0],\"lat\":10}\n").unwrap();
        assert!(matches!(
            load_dataset(&p, None),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn cities_examples() {
        let mut cfg = CitiesConfig::new(1, 20, 3, 5);
        cfg.noise_km = 0.0;
        let c = gen_cities(&cfg).unwrap();
        let p0: SphericalPoint<f64> = c.records[0].point().unwrap();
        for r in &c.records {
            let p: SphericalPoint<f64> = r.point().unwrap();
            assert!(crate::geo::great_circle_km(&p, &p0) < 1e-6);
        }

        let cfg = CitiesConfig::new(8, 50, 16, 11);
        let a = gen_cities(&cfg).unwrap();
        assert_eq!(a, gen_cities(&cfg).unwrap());
        for i in 0..8 {
            for j in 0..i {
                assert!(crate::geo::great_circle_km(&a.centers[i], &a.centers[j]) >= 3000.0);
            }
        }
        let n_test = a.records.iter().filter(|r| r.split == Split::Test).count();
        assert_eq!(n_test, 40);
        assert!(gen_cities(&CitiesConfig::new(200, 1, 2, 0)).is_err());
    }

    #[test]
    fn embedded_loc_examples() {
        let l = Degree::new(2).unwrap();
        let recs = gen_embedded_loc(20, 9, l, Projection::Identity, 0.0, 3).unwrap();
        for r in &recs {
            let e = encode(&r.point::<f64>().unwrap(), l).coeffs;
            assert!(r
                .condition
                .iter()
                .zip(&e)
                .all(|(a, b)| (a - b).abs() < 1e-9));
        }
        let a = gen_embedded_loc(20, 5, l, Projection::Random, 0.1, 3).unwrap();
        assert_eq!(
            a,
            gen_embedded_loc(20, 5, l, Projection::Random, 0.1, 3).unwrap()
        );
        assert!(gen_embedded_loc(2, 10, l, Projection::Random, 0.0, 3).is_err());
    }

    #[test]
    fn lookup_matches_encode_and_caches() {
        let recs = gen_cities(&CitiesConfig::new(2, 15, 2, 4)).unwrap().records;
        let l = Degree::new(7).unwrap();
        let lk = build_lookup::<f64>(&recs, l).unwrap();
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(
                lk.get(i),
                encode(&r.point::<f64>().unwrap(), l).coeffs.as_slice()
            );
        }
        assert!(build_lookup::<f64>(&[], l).unwrap().is_empty());
        let dir = tempfile::tempdir().unwrap();
        let a = build_lookup_cached::<f64>(&recs, l, dir.path()).unwrap();
        let b = build_lookup_cached::<f64>(&recs, l, dir.path()).unwrap();
        assert_eq!(a, lk);
        assert_eq!(b, lk);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn clustered_gallery_is_denser_near_hubs() {
        let pts = clustered_points(2000, 5, 0.6, 300.0, 1).unwrap();
        assert_eq!(pts.len(), 2000);
        assert!(clustered_points(10, 0, 0.5, 1.0, 1).is_err());
    }
}
