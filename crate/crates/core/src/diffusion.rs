//! DDPM noise schedule, training of the denoiser against the SHDD-KL loss,
//! and ensemble sampling.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{default_rho, spherical_centroid};
use crate::nn::{adam_step, AdamConfig, AdamState, CsUnet, CsUnetConfig, Mode};
use crate::scalar::Scalar;
use crate::shdd::{kl_loss_batch, AnchorSet, ModeDecoder};
use crate::sphharm::{Degree, SphericalPoint};

/// Variance schedule indexed by step `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(t_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_train == 0 {
            return Err(Error::pre("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::pre(format!(
                "betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let betas: Vec<f64> = (0..t_train)
            .map(|i| {
                if t_train == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// 1000 steps, betas 1e-4 → 0.02.
    pub fn standard() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid constants")
    }

    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Uniformly strided subsequence `τ_1 < … < τ_n = T`.
    pub fn sampling_steps(&self, n: usize) -> Result<Vec<usize>> {
        let t = self.t_train();
        if n == 0 || n > t {
            return Err(Error::InvalidField {
                field: "steps",
                reason: format!("{n} not in 1..={t}"),
            });
        }
        Ok((1..=n).map(|k| k * t / n).collect())
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_train() {
            return Err(Error::pre(format!(
                "step {t} not in 1..={}",
                self.t_train()
            )));
        }
        Ok(())
    }
}

/// `√ᾱ_t e0 + √(1−ᾱ_t) z`.
pub fn forward_noise<T: Scalar, R: Rng + ?Sized>(
    e0: &[T],
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Vec<T>> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    Ok(e0
        .iter()
        .map(|&x| a * x + b * T::of(rng.sample::<f64, _>(StandardNormal)))
        .collect())
}

/// Anything that predicts the clean latent from `(x_t, condition, t)`.
pub trait Denoiser<T> {
    fn predict_x0(
        &self,
        x: ArrayView2<T>,
        cond: ArrayView2<T>,
        steps: &[usize],
    ) -> Result<Array2<T>>;
}

impl<T: Scalar> Denoiser<T> for CsUnet<T> {
    fn predict_x0(
        &self,
        x: ArrayView2<T>,
        cond: ArrayView2<T>,
        steps: &[usize],
    ) -> Result<Array2<T>> {
        self.predict(x, cond, steps)
    }
}

/// Posterior `q(x_prev | x_t, x0)` of the chain respaced to `t → t_prev`.
/// Adds `noise` scaled by the posterior standard deviation unless
/// `t_prev == 0`.
pub fn posterior_step<T: Scalar>(
    x_t: ArrayView2<T>,
    x0: ArrayView2<T>,
    t: usize,
    t_prev: usize,
    schedule: &DiffusionSchedule,
    noise: Option<ArrayView2<T>>,
) -> Result<Array2<T>> {
    schedule.check_step(t)?;
    if t_prev >= t {
        return Err(Error::pre(format!(
            "previous step {t_prev} must precede {t}"
        )));
    }
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let beta = 1.0 - ab / ab_prev;
    let alpha = 1.0 - beta;
    let c0 = T::of(ab_prev.sqrt() * beta / (1.0 - ab));
    let ct = T::of(alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab));
    let mut out = x0.mapv(|v| v * c0);
    out.scaled_add(ct, &x_t);
    if t_prev > 0 {
        if let Some(z) = noise {
            let sd = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            out.scaled_add(T::of(sd), &z);
        }
    }
    Ok(out)
}

/// One reverse step `x_t → x_{t_prev}` driven by a denoiser.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_reverse_step<T: Scalar, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    model: &D,
    x_t: ArrayView2<T>,
    t: usize,
    t_prev: usize,
    cond: ArrayView2<T>,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Array2<T>> {
    let steps = vec![t; x_t.nrows()];
    let x0 = model.predict_x0(x_t, cond, &steps)?;
    let noise = (t_prev > 0).then(|| standard_normal(x_t.dim(), rng));
    posterior_step(
        x_t,
        x0.view(),
        t,
        t_prev,
        schedule,
        noise.as_ref().map(|z| z.view()),
    )
}

fn standard_normal<T: Scalar, R: Rng + ?Sized>(dim: (usize, usize), rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn(dim, || T::of(rng.sample::<f64, _>(StandardNormal)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub degree: Degree,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_betas: [f64; 2],
    pub weight_decay: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub anchors_per_batch: usize,
    /// Reuse one anchor draw for the whole run instead of a fresh draw per
    /// batch.
    pub fixed_anchors: bool,
    pub bottleneck: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            degree: Degree::new(23).expect("valid degree"),
            batch_size: 512,
            lr: 1e-4,
            adam_betas: [0.9, 0.99],
            weight_decay: 5e-4,
            dropout: 0.3,
            epochs: 500,
            anchors_per_batch: 2048,
            fixed_anchors: false,
            bottleneck: 32,
            depth: 6,
            time_dim: 200,
            time_hidden: 64,
            t_train: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Reads TOML when the extension is `.toml`, JSON otherwise. Missing
    /// fields take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: e
                    .span()
                    .map(|s| text[..s.start].lines().count().max(1))
                    .unwrap_or(0),
                reason: e.message().to_owned(),
            })?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("t_train", self.t_train),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::InvalidField {
                    field,
                    reason: "must be positive".into(),
                });
            }
        }
        if self.anchors_per_batch < 2 {
            return Err(Error::InvalidField {
                field: "anchors_per_batch",
                reason: format!("{} < 2", self.anchors_per_batch),
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidField {
                field: "lr",
                reason: format!("{} is not a positive step size", self.lr),
            });
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.t_train, self.beta_start, self.beta_end)
    }

    pub fn net_config(&self, cond_dim: usize) -> CsUnetConfig {
        CsUnetConfig {
            dim: self.degree.dim(),
            cond_dim,
            time_dim: self.time_dim,
            time_hidden: self.time_hidden,
            bottleneck: self.bottleneck,
            depth: self.depth,
            dropout: self.dropout,
            first_omega: 30.0,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_betas[0],
            beta2: self.adam_betas[1],
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Conditions and precomputed target encodings, row-aligned.
#[derive(Clone, Debug)]
pub struct TrainSet<T> {
    pub conditions: Array2<T>,
    pub encodings: Array2<T>,
}

impl<T: Scalar> TrainSet<T> {
    pub fn new(conditions: Array2<T>, encodings: Array2<T>) -> Result<Self> {
        if conditions.nrows() != encodings.nrows() {
            return Err(Error::DimensionMismatch {
                expected: encodings.nrows(),
                got: conditions.nrows(),
            });
        }
        Ok(Self {
            conditions,
            encodings,
        })
    }

    pub fn len(&self) -> usize {
        self.conditions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["step", "loss", "grad_norm"]).map_err(io)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            r.grad_norm.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loss and exact parameter gradient of the batch-mean SHDD-KL between the
/// network's prediction and `target`.
#[allow(clippy::too_many_arguments)]
pub fn kl_objective<T: Scalar, R: Rng + ?Sized>(
    model: &CsUnet<T>,
    x_t: ArrayView2<T>,
    cond: ArrayView2<T>,
    steps: &[usize],
    target: ArrayView2<T>,
    anchors: &AnchorSet<T>,
    mode: Mode,
    rng: Option<&mut R>,
) -> Result<(T, f64, Vec<T>)> {
    let (pred, cache) = model.forward(x_t, cond, steps, mode, rng)?;
    let kl = kl_loss_batch(pred.view(), target, anchors)?;
    let grads = model.backward(Some(&cache), kl.grad.view())?;
    Ok((kl.loss, kl.max_abs_logit, grads))
}

pub struct TrainOutcome<T> {
    pub model: CsUnet<T>,
    pub adam: AdamState<T>,
    pub log: Vec<LossRow>,
}

/// Runs the training loop from a fresh initialization. Everything random
/// (init, shuffling, anchors, steps, noise, dropout) derives from
/// `cfg.seed`, so identical inputs give bit-identical outputs.
pub fn train<T: Scalar>(
    set: &TrainSet<T>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRow),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::pre("training set is empty"));
    }
    let d = cfg.degree.dim();
    if set.encodings.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: set.encodings.ncols(),
        });
    }
    let schedule = cfg.schedule()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = CsUnet::new(cfg.net_config(set.conditions.ncols()), &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    train_from(model, set, cfg, &schedule, &mut rng, &mut on_step)
}

fn train_from<T: Scalar>(
    mut model: CsUnet<T>,
    set: &TrainSet<T>,
    cfg: &TrainConfig,
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
    on_step: &mut impl FnMut(&LossRow),
) -> Result<TrainOutcome<T>> {
    let adam_cfg = cfg.adam();
    let mut adam = AdamState::new(model.num_params());
    let mut log = Vec::new();
    let fixed = if cfg.fixed_anchors {
        Some(AnchorSet::random(cfg.anchors_per_batch, cfg.degree, rng)?)
    } else {
        None
    };
    let mut order: Vec<usize> = (0..set.len()).collect();
    let t_max = schedule.t_train();
    let mut step = 0usize;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let fresh;
            let anchors = match &fixed {
                Some(a) => a,
                None => {
                    fresh = AnchorSet::random(cfg.anchors_per_batch, cfg.degree, rng)?;
                    &fresh
                }
            };
            let cond = set.conditions.select(Axis(0), batch);
            let target = set.encodings.select(Axis(0), batch);
            let steps: Vec<usize> = batch.iter().map(|_| rng.random_range(1..=t_max)).collect();
            let mut x_t = target.clone();
            for (mut row, &t) in x_t.axis_iter_mut(Axis(0)).zip(&steps) {
                let ab = schedule.alpha_bar(t);
                let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
                row.mapv_inplace(|v| a * v + b * T::of(rng.sample::<f64, _>(StandardNormal)));
            }
            let (loss, max_logit, grads) = kl_objective(
                &model,
                x_t.view(),
                cond.view(),
                &steps,
                target.view(),
                anchors,
                Mode::Train,
                Some(&mut *rng),
            )?;
            let loss = loss.f64();
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    batch: step,
                    loss,
                    max_exponent: max_logit,
                });
            }
            let grad_norm = grads.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
            adam_step(model.params_mut(), &grads, &mut adam, &adam_cfg).map_err(|_| {
                Error::Diverged {
                    batch: step,
                    loss,
                    max_exponent: max_logit,
                }
            })?;
            let row = LossRow {
                step,
                loss,
                grad_norm,
            };
            on_step(&row);
            log.push(row);
            step += 1;
        }
    }
    Ok(TrainOutcome { model, adam, log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub ensemble: usize,
    /// Standard deviation of the Gaussian jitter applied to each ensemble
    /// member's copy of the condition.
    pub jitter_sigma: f64,
    /// Decode window; `None` means `π / (2L)`.
    pub rho: Option<f64>,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            ensemble: 16,
            jitter_sigma: 0.05,
            rho: None,
            seed: 0,
        }
    }
}

impl SampleConfig {
    fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if self.ensemble == 0 {
            return Err(Error::InvalidField {
                field: "ensemble",
                reason: "must be at least 1".into(),
            });
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::InvalidField {
                field: "jitter_sigma",
                reason: format!("{} is not a valid standard deviation", self.jitter_sigma),
            });
        }
        schedule.sampling_steps(self.steps).map(|_| ())
    }
}

/// Conditions processed together in one batched chain.
const SAMPLE_CHUNK: usize = 32;

/// Runs `ensemble` reverse chains per condition and returns the final
/// latents, `[condition][member][coefficient]`. Condition `i` draws all its
/// randomness from stream `i` of the seed, so results do not depend on how
/// conditions are batched.
pub fn sample_latents<T: Scalar, D: Denoiser<T> + ?Sized>(
    model: &D,
    conditions: ArrayView2<T>,
    dim: usize,
    cfg: &SampleConfig,
    schedule: &DiffusionSchedule,
) -> Result<Vec<Vec<Vec<T>>>> {
    cfg.validate(schedule)?;
    let taus = schedule.sampling_steps(cfg.steps)?;
    let n = cfg.ensemble;
    let mut out = Vec::with_capacity(conditions.nrows());
    for c0 in (0..conditions.nrows()).step_by(SAMPLE_CHUNK) {
        let c1 = (c0 + SAMPLE_CHUNK).min(conditions.nrows());
        let mut rngs: Vec<ChaCha8Rng> = (c0..c1)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
                r.set_stream(i as u64);
                r
            })
            .collect();
        let rows = (c1 - c0) * n;
        let mut cond = Array2::<T>::zeros((rows, conditions.ncols()));
        let mut x = Array2::<T>::zeros((rows, dim));
        for (k, rng) in rngs.iter_mut().enumerate() {
            let base = conditions.row(c0 + k);
            for m in 0..n {
                let r = k * n + m;
                for (dst, &src) in cond.row_mut(r).iter_mut().zip(base.iter()) {
                    let j: f64 = rng.sample(StandardNormal);
                    *dst = src + T::of(cfg.jitter_sigma * j);
                }
            }
            x.slice_mut(s![k * n..(k + 1) * n, ..])
                .assign(&standard_normal((n, dim), rng));
        }
        for i in (0..taus.len()).rev() {
            let t = taus[i];
            let t_prev = if i == 0 { 0 } else { taus[i - 1] };
            let steps = vec![t; rows];
            let x0 = model.predict_x0(x.view(), cond.view(), &steps)?;
            let noise = (t_prev > 0).then(|| {
                let mut z = Array2::<T>::zeros((rows, dim));
                for (k, rng) in rngs.iter_mut().enumerate() {
                    z.slice_mut(s![k * n..(k + 1) * n, ..])
                        .assign(&standard_normal((n, dim), rng));
                }
                z
            });
            x = posterior_step(
                x.view(),
                x0.view(),
                t,
                t_prev,
                schedule,
                noise.as_ref().map(|z| z.view()),
            )?;
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampled latent entry {i}")));
        }
        for k in 0..(c1 - c0) {
            out.push(
                (0..n)
                    .map(|m| x.row(k * n + m).to_vec())
                    .collect::<Vec<_>>(),
            );
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction<T> {
    pub point: SphericalPoint<T>,
    pub candidates: Vec<SphericalPoint<T>>,
}

/// Decodes each ensemble member and takes the spherical centroid.
pub fn decode_ensembles<T: Scalar>(
    latents: &[Vec<Vec<T>>],
    decoder: &ModeDecoder<'_, T>,
) -> Result<Vec<Prediction<T>>> {
    let flat: Vec<Vec<T>> = latents.iter().flatten().cloned().collect();
    let mut decoded = decoder.decode_many(&flat)?.into_iter();
    latents
        .iter()
        .map(|ens| {
            let candidates: Vec<_> = decoded.by_ref().take(ens.len()).collect();
            Ok(Prediction {
                point: spherical_centroid(&candidates)?,
                candidates,
            })
        })
        .collect()
}

/// Samples and decodes predictions for every row of `conditions`.
pub fn sample<T: Scalar>(
    model: &CsUnet<T>,
    conditions: ArrayView2<T>,
    cfg: &SampleConfig,
    schedule: &DiffusionSchedule,
    anchors: &AnchorSet<T>,
) -> Result<Vec<Prediction<T>>> {
    if conditions.ncols() != model.config().cond_dim {
        return Err(Error::DimensionMismatch {
            expected: model.config().cond_dim,
            got: conditions.ncols(),
        });
    }
    let degree = anchors.degree();
    if degree.dim() != model.config().dim {
        return Err(Error::DimensionMismatch {
            expected: model.config().dim,
            got: degree.dim(),
        });
    }
    let rho = cfg.rho.unwrap_or_else(|| default_rho(degree));
    let decoder = ModeDecoder::new(anchors, T::of(rho))?;
    let latents = sample_latents(model, conditions, degree.dim(), cfg, schedule)?;
    decode_ensembles(&latents, &decoder)
}

/// Writes one JSON object per line.
pub fn write_jsonl<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
