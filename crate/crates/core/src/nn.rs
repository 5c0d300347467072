//! The conditional sine-activated UNet used as the denoiser, with
//! hand-written reverse-mode gradients and an Adam optimizer.
//!
//! All weights live in one flat buffer; layers are offsets into it. That
//! keeps the optimizer, checkpointing and finite-difference checks trivial:
//! each of them is a loop over a slice.
//!
//! A C-Siren block maps `(x, e_I, t)` to
//!
//! ```text
//! h_x = W_in x + b_in
//! (α, ε) = heads(sin(W_t τ(t) + b_t))       τ = sinusoidal embedding
//! u   = (1 + α) ⊙ h_x + ε + (W_c e_I + b_c)
//! y   = dropout(sin(W_f u + b_f))
//! ```
//!
//! and the UNet stacks `depth / 2` narrowing blocks followed by `depth / 2`
//! widening blocks, adding each encoder output to the decoder input of the
//! same width. The final block is linear so the prediction can leave
//! `[-1, 1]`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `[sin(t f_0), cos(t f_0), sin(t f_1), …]` with `f_k = 10000^(-k/(d/2))`.
pub fn sinusoidal_time_embed<T: Scalar>(t: usize, dim: usize) -> Result<Vec<T>> {
    if dim % 2 != 0 || dim == 0 {
        return Err(Error::pre(format!(
            "time embedding dimension {dim} must be even and positive"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let (s, c) = (t as f64 * freq).sin_cos();
        out.push(T::of(s));
        out.push(T::of(c));
    }
    Ok(out)
}

/// Embeddings of the distinct steps in a batch and, per row, which of them
/// it uses. Rows sharing a step share the time path's work.
#[derive(Clone, Debug)]
pub struct TimeRows<T> {
    unique: Array2<T>,
    row_of: Vec<usize>,
}

impl<T: Scalar> TimeRows<T> {
    pub fn new(steps: &[usize], dim: usize) -> Result<Self> {
        let mut distinct: Vec<usize> = steps.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let mut unique = Array2::zeros((distinct.len(), dim));
        for (mut row, &t) in unique.axis_iter_mut(Axis(0)).zip(&distinct) {
            row.assign(&Array1::from(sinusoidal_time_embed::<T>(t, dim)?));
        }
        let row_of = steps
            .iter()
            .map(|t| distinct.binary_search(t).expect("present"))
            .collect();
        Ok(Self { unique, row_of })
    }

    pub fn rows(&self) -> usize {
        self.row_of.len()
    }

    fn gather(&self, m: &Array2<T>) -> Array2<T> {
        m.select(Axis(0), &self.row_of)
    }

    fn scatter_sum(&self, m: &Array2<T>) -> Array2<T> {
        let mut out = Array2::zeros((self.unique.nrows(), m.ncols()));
        for (row, &u) in m.axis_iter(Axis(0)).zip(&self.row_of) {
            out.row_mut(u).scaled_add(T::one(), &row);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    fn w_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn len(&self) -> usize {
        self.w_len() + self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn weight<'a, T>(&self, p: &'a [T]) -> ArrayView2<'a, T> {
        ArrayView2::from_shape(
            (self.fan_out, self.fan_in),
            &p[self.offset..self.offset + self.w_len()],
        )
        .expect("weight block shape")
    }

    fn bias<'a, T>(&self, p: &'a [T]) -> ArrayView1<'a, T> {
        ArrayView1::from(&p[self.offset + self.w_len()..self.offset + self.len()])
    }

    fn grads_mut<'a, T>(&self, g: &'a mut [T]) -> (ArrayViewMut2<'a, T>, ArrayViewMut1<'a, T>) {
        let (w, b) = g[self.offset..self.offset + self.len()].split_at_mut(self.w_len());
        (
            ArrayViewMut2::from_shape((self.fan_out, self.fan_in), w).expect("weight block shape"),
            ArrayViewMut1::from(b),
        )
    }

    fn forward<T: Scalar>(&self, p: &[T], x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight(p).t());
        y.zip_mut_with(&self.bias(p), |a, &b| *a = *a + b);
        y
    }

    /// Accumulates weight/bias gradients; returns `∂/∂x` when asked.
    fn backward<T: Scalar>(
        &self,
        p: &[T],
        g: &mut [T],
        x: ArrayView2<T>,
        dy: ArrayView2<T>,
        want_dx: bool,
    ) -> Option<Array2<T>> {
        let (mut gw, mut gb) = self.grads_mut(g);
        gw.scaled_add(T::one(), &dy.t().dot(&x));
        gb.scaled_add(T::one(), &dy.sum_axis(Axis(0)));
        want_dx.then(|| dy.dot(&self.weight(p)))
    }

    fn init<T: Scalar, R: Rng + ?Sized>(&self, p: &mut [T], w_bound: f64, rng: &mut R) {
        let b_bound = 1.0 / (self.fan_in as f64).sqrt();
        let (w, b) = p[self.offset..self.offset + self.len()].split_at_mut(self.w_len());
        for v in w {
            *v = T::of(rng.random_range(-w_bound..=w_bound));
        }
        for v in b {
            *v = T::of(rng.random_range(-b_bound..=b_bound));
        }
    }
}

/// Offsets of one C-Siren block inside the flat parameter buffer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsirenBlock {
    pub d_in: usize,
    pub d_out: usize,
    pub in_proj: Dense,
    pub cond_proj: Dense,
    pub time_hidden: Dense,
    pub alpha_head: Dense,
    pub shift_head: Dense,
    pub ffn: Dense,
    /// Skip the sine (and dropout) on the output.
    pub linear_output: bool,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    x: Array2<T>,
    th_pre: Array2<T>,
    th: Array2<T>,
    alpha: Array2<T>,
    hx: Array2<T>,
    u: Array2<T>,
    z: Array2<T>,
    mask: Option<Array2<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl CsirenBlock {
    /// Lays out a block starting at `offset`; returns it and the next free
    /// offset.
    pub fn layout(
        offset: usize,
        d_in: usize,
        d_out: usize,
        d_cond: usize,
        d_time: usize,
        time_hidden: usize,
        linear_output: bool,
    ) -> (Self, usize) {
        let mut off = offset;
        let mut dense = |fan_in, fan_out| {
            let d = Dense {
                offset: off,
                fan_in,
                fan_out,
            };
            off += d.len();
            d
        };
        let block = CsirenBlock {
            d_in,
            d_out,
            in_proj: dense(d_in, d_out),
            cond_proj: dense(d_cond, d_out),
            time_hidden: dense(d_time, time_hidden),
            alpha_head: dense(time_hidden, d_out),
            shift_head: dense(time_hidden, d_out),
            ffn: dense(d_out, d_out),
            linear_output,
        };
        (block, off)
    }

    fn dense_layers(&self) -> [(&'static str, Dense); 6] {
        [
            ("in_proj", self.in_proj),
            ("cond_proj", self.cond_proj),
            ("time_hidden", self.time_hidden),
            ("alpha_head", self.alpha_head),
            ("shift_head", self.shift_head),
            ("ffn", self.ffn),
        ]
    }

    /// SIREN-style uniform init: `±√(6/fan_in)` for sine layers, `±ω₀/fan_in`
    /// for the layer that sees the raw latent first. Modulation heads start
    /// small so each block begins close to an unmodulated sine layer.
    fn init<T: Scalar, R: Rng + ?Sized>(&self, p: &mut [T], first: bool, omega0: f64, rng: &mut R) {
        let siren = |d: &Dense| (6.0 / d.fan_in as f64).sqrt();
        let in_bound = if first {
            omega0 / self.in_proj.fan_in as f64
        } else {
            siren(&self.in_proj)
        };
        self.in_proj.init(p, in_bound, rng);
        self.cond_proj.init(p, siren(&self.cond_proj), rng);
        self.time_hidden.init(p, siren(&self.time_hidden), rng);
        self.alpha_head.init(p, 0.1 * siren(&self.alpha_head), rng);
        self.shift_head.init(p, 0.1 * siren(&self.shift_head), rng);
        let ffn_scale = if self.linear_output { 0.1 } else { 1.0 };
        self.ffn.init(p, ffn_scale * siren(&self.ffn), rng);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        p: &[T],
        x: ArrayView2<T>,
        cond: ArrayView2<T>,
        time: &TimeRows<T>,
        dropout: f64,
        mode: Mode,
        rng: Option<&mut R>,
    ) -> Result<(Array2<T>, BlockCache<T>)> {
        if x.ncols() != self.d_in {
            return Err(Error::DimensionMismatch {
                expected: self.d_in,
                got: x.ncols(),
            });
        }
        if cond.ncols() != self.cond_proj.fan_in {
            return Err(Error::DimensionMismatch {
                expected: self.cond_proj.fan_in,
                got: cond.ncols(),
            });
        }
        if cond.nrows() != x.nrows() || time.rows() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: cond.nrows().min(time.rows()),
            });
        }
        let th_pre = self.time_hidden.forward(p, time.unique.view());
        let th = th_pre.mapv(|v| v.sin());
        let alpha = time.gather(&self.alpha_head.forward(p, th.view()));
        let shift = time.gather(&self.shift_head.forward(p, th.view()));
        let hx = self.in_proj.forward(p, x);
        let hc = self.cond_proj.forward(p, cond);
        let mut u = hc;
        Zip::from(&mut u)
            .and(&hx)
            .and(&alpha)
            .and(&shift)
            .for_each(|u, &h, &a, &s| *u = *u + (T::one() + a) * h + s);
        let z = self.ffn.forward(p, u.view());
        let (y, mask) = if self.linear_output {
            (z.clone(), None)
        } else {
            let mut y = z.mapv(|v| v.sin());
            let mask = match (mode, rng) {
                (Mode::Train, Some(rng)) if dropout > 0.0 => {
                    let keep = T::one() / T::of(1.0 - dropout);
                    let m = Array2::from_shape_simple_fn(y.dim(), || {
                        if rng.random::<f64>() < dropout {
                            T::zero()
                        } else {
                            keep
                        }
                    });
                    y.zip_mut_with(&m, |a, &b| *a = *a * b);
                    Some(m)
                }
                _ => None,
            };
            (y, mask)
        };
        let cache = BlockCache {
            x: x.to_owned(),
            th_pre,
            th,
            alpha,
            hx,
            u,
            z,
            mask,
        };
        Ok((y, cache))
    }

    /// Accumulates parameter gradients into `g` and returns `∂/∂x`.
    pub fn backward<T: Scalar>(
        &self,
        p: &[T],
        g: &mut [T],
        cache: &BlockCache<T>,
        cond: ArrayView2<T>,
        time: &TimeRows<T>,
        dy: ArrayView2<T>,
    ) -> Array2<T> {
        let mut dz = dy.to_owned();
        if let Some(m) = &cache.mask {
            dz.zip_mut_with(m, |a, &b| *a = *a * b);
        }
        if !self.linear_output {
            Zip::from(&mut dz)
                .and(&cache.z)
                .for_each(|d, &z| *d = *d * z.cos());
        }
        let du = self
            .ffn
            .backward(p, g, cache.u.view(), dz.view(), true)
            .expect("dx requested");
        self.cond_proj.backward(p, g, cond, du.view(), false);
        let mut dhx = du.clone();
        let mut dalpha = du.clone();
        Zip::from(&mut dhx)
            .and(&mut dalpha)
            .and(&cache.alpha)
            .and(&cache.hx)
            .for_each(|dh, da, &a, &h| {
                let d = *dh;
                *dh = d * (T::one() + a);
                *da = d * h;
            });
        let (dalpha, dshift) = (time.scatter_sum(&dalpha), time.scatter_sum(&du));
        let mut dth = self
            .alpha_head
            .backward(p, g, cache.th.view(), dalpha.view(), true)
            .expect("dx requested");
        let dth_shift = self
            .shift_head
            .backward(p, g, cache.th.view(), dshift.view(), true)
            .expect("dx requested");
        dth.scaled_add(T::one(), &dth_shift);
        Zip::from(&mut dth)
            .and(&cache.th_pre)
            .for_each(|d, &z| *d = *d * z.cos());
        self.time_hidden
            .backward(p, g, time.unique.view(), dth.view(), false);
        self.in_proj
            .backward(p, g, cache.x.view(), dhx.view(), true)
            .expect("dx requested")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsUnetConfig {
    /// Latent dimension `(L+1)²`.
    pub dim: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
    pub bottleneck: usize,
    /// Number of C-Siren blocks; even, at least 2.
    pub depth: usize,
    pub dropout: f64,
    pub first_omega: f64,
}

impl CsUnetConfig {
    pub fn new(dim: usize, cond_dim: usize) -> Self {
        Self {
            dim,
            cond_dim,
            time_dim: 200,
            time_hidden: 64,
            bottleneck: 32,
            depth: 6,
            dropout: 0.3,
            first_omega: 30.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.depth % 2 != 0 {
            return Err(Error::pre(format!(
                "depth {} must be even and >= 2",
                self.depth
            )));
        }
        if self.dim == 0 || self.cond_dim == 0 || self.bottleneck == 0 || self.time_hidden == 0 {
            return Err(Error::pre("all widths must be positive"));
        }
        if self.time_dim % 2 != 0 || self.time_dim == 0 {
            return Err(Error::pre("time embedding dimension must be even"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::pre(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Encoder output widths, geometrically interpolated from `dim` down to
    /// the bottleneck: `[w_1, …, w_k]` with `w_k = bottleneck`.
    pub fn encoder_widths(&self) -> Vec<usize> {
        let k = self.depth / 2;
        let ratio = self.bottleneck as f64 / self.dim as f64;
        (1..=k)
            .map(|i| {
                if i == k {
                    self.bottleneck
                } else {
                    ((self.dim as f64 * ratio.powf(i as f64 / k as f64)).round() as usize).max(1)
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    cond: Array2<T>,
    time: TimeRows<T>,
    blocks: Vec<BlockCache<T>>,
}

/// Conditional Siren UNet predicting the clean latent from a noisy one.
#[derive(Clone, Debug, PartialEq)]
pub struct CsUnet<T> {
    config: CsUnetConfig,
    blocks: Vec<CsirenBlock>,
    params: Vec<T>,
}

impl<T: Scalar> CsUnet<T> {
    /// Zero-initialized network with the given architecture.
    pub fn zeros(config: CsUnetConfig) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![config.dim];
        widths.extend(config.encoder_widths());
        let k = config.depth / 2;
        let mut blocks = Vec::with_capacity(config.depth);
        let mut off = 0;
        let mut push = |d_in, d_out, linear| {
            let (b, next) = CsirenBlock::layout(
                off,
                d_in,
                d_out,
                config.cond_dim,
                config.time_dim,
                config.time_hidden,
                linear,
            );
            off = next;
            blocks.push(b);
        };
        for i in 0..k {
            push(widths[i], widths[i + 1], false);
        }
        for j in 0..k {
            push(widths[k - j], widths[k - j - 1], j == k - 1);
        }
        Ok(Self {
            config,
            blocks,
            params: vec![T::zero(); off],
        })
    }

    pub fn new<R: Rng + ?Sized>(config: CsUnetConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let omega = net.config.first_omega;
        for (i, b) in net.blocks.iter().enumerate() {
            b.init(&mut net.params, i == 0, omega, rng);
        }
        Ok(net)
    }

    /// [`CsUnet::new`] with a ChaCha8 generator seeded from `seed`.
    pub fn seeded(config: CsUnetConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        Self::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn config(&self) -> &CsUnetConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[CsirenBlock] {
        &self.blocks
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// `(name, shape)` of every tensor in buffer order.
    pub fn tensor_names(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, d) in b.dense_layers() {
                out.push((
                    format!("blocks.{i}.{name}.weight"),
                    vec![d.fan_out, d.fan_in],
                ));
                out.push((format!("blocks.{i}.{name}.bias"), vec![d.fan_out]));
            }
        }
        out
    }

    /// Batched forward pass. `x` is `B × dim`, `cond` is `B × cond_dim` and
    /// `steps` holds one diffusion step per row. The dropout RNG is only
    /// consulted in [`Mode::Train`].
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<T>,
        cond: ArrayView2<T>,
        steps: &[usize],
        mode: Mode,
        mut rng: Option<&mut R>,
    ) -> Result<(Array2<T>, ForwardCache<T>)> {
        if x.ncols() != self.config.dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.dim,
                got: x.ncols(),
            });
        }
        if steps.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: steps.len(),
            });
        }
        let time = TimeRows::<T>::new(steps, self.config.time_dim)?;
        let k = self.config.depth / 2;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut skips: Vec<Array2<T>> = Vec::with_capacity(k);
        let mut h = x.to_owned();
        for b in &self.blocks[..k] {
            let (y, c) = b.forward(
                &self.params,
                h.view(),
                cond,
                &time,
                self.config.dropout,
                mode,
                rng.as_deref_mut(),
            )?;
            caches.push(c);
            skips.push(y.clone());
            h = y;
        }
        for (j, b) in self.blocks[k..].iter().enumerate() {
            if j > 0 {
                h.scaled_add(T::one(), &skips[k - 1 - j]);
            }
            let (y, c) = b.forward(
                &self.params,
                h.view(),
                cond,
                &time,
                self.config.dropout,
                mode,
                rng.as_deref_mut(),
            )?;
            caches.push(c);
            h = y;
        }
        Ok((
            h,
            ForwardCache {
                cond: cond.to_owned(),
                time,
                blocks: caches,
            },
        ))
    }

    /// Deterministic inference-mode forward.
    pub fn predict(
        &self,
        x: ArrayView2<T>,
        cond: ArrayView2<T>,
        steps: &[usize],
    ) -> Result<Array2<T>> {
        Ok(self
            .forward::<rand::rngs::ThreadRng>(x, cond, steps, Mode::Eval, None)?
            .0)
    }

    /// Exact parameter gradient of `Σ dy ⊙ output` for the cached pass.
    pub fn backward(&self, cache: Option<&ForwardCache<T>>, dy: ArrayView2<T>) -> Result<Vec<T>> {
        let cache = cache.ok_or(Error::MissingForwardCache)?;
        if cache.blocks.len() != self.blocks.len() {
            return Err(Error::MissingForwardCache);
        }
        let mut g = vec![T::zero(); self.params.len()];
        let k = self.config.depth / 2;
        let p = &self.params;
        let (cond, time) = (cache.cond.view(), &cache.time);
        let mut dskips: Vec<Option<Array2<T>>> = vec![None; k];
        let mut dh = dy.to_owned();
        for j in (0..k).rev() {
            let b = &self.blocks[k + j];
            let dinput = b.backward(p, &mut g, &cache.blocks[k + j], cond, time, dh.view());
            let slot = k - 1 - j;
            dskips[slot] = Some(match dskips[slot].take() {
                Some(acc) => acc + &dinput,
                None => dinput.clone(),
            });
            dh = dinput;
        }
        // `dh` now holds the gradient flowing into the bottleneck output,
        // already folded into dskips[k-1].
        let mut gout = dskips[k - 1].take().expect("bottleneck gradient");
        for i in (0..k).rev() {
            let dinput =
                self.blocks[i].backward(p, &mut g, &cache.blocks[i], cond, time, gout.view());
            if i > 0 {
                gout = dinput + dskips[i - 1].as_ref().expect("skip gradient");
            }
        }
        Ok(g)
    }

    pub fn from_parts(config: CsUnetConfig, params: Vec<T>) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        if params.len() != net.params.len() {
            return Err(Error::DimensionMismatch {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }
}

/// Standalone single block with its own parameters.
#[derive(Clone, Debug)]
pub struct Csiren<T> {
    pub block: CsirenBlock,
    pub params: Vec<T>,
    pub time_dim: usize,
    pub dropout: f64,
}

impl<T: Scalar> Csiren<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        d_cond: usize,
        time_dim: usize,
        time_hidden: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let (block, len) =
            CsirenBlock::layout(0, d_in, d_out, d_cond, time_dim, time_hidden, false);
        let mut params = vec![T::zero(); len];
        block.init(&mut params, false, 30.0, rng);
        Self {
            block,
            params,
            time_dim,
            dropout,
        }
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<T>,
        cond: ArrayView2<T>,
        steps: &[usize],
        mode: Mode,
        rng: Option<&mut R>,
    ) -> Result<(Array2<T>, BlockCache<T>, TimeRows<T>)> {
        let time = TimeRows::new(steps, self.time_dim)?;
        let (y, c) = self
            .block
            .forward(&self.params, x, cond, &time, self.dropout, mode, rng)?;
        Ok((y, c, time))
    }

    pub fn backward(
        &self,
        cache: &BlockCache<T>,
        cond: ArrayView2<T>,
        time: &TimeRows<T>,
        dy: ArrayView2<T>,
    ) -> (Vec<T>, Array2<T>) {
        let mut g = vec![T::zero(); self.params.len()];
        let dx = self
            .block
            .backward(&self.params, &mut g, cache, cond, time, dy);
        (g, dx)
    }

    /// Zeroes the time path so `α = ε = 0`.
    pub fn zero_time_modulation(&mut self) {
        for d in [self.block.alpha_head, self.block.shift_head] {
            self.params[d.offset..d.offset + d.len()].fill(T::zero());
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay. Rejects the
/// step, leaving everything untouched, if any gradient is non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient[{i}]")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() / (T::one() - b1.powi(t));
    let c2 = T::one() / (T::one() - b2.powi(t));
    let (lr, eps, wd) = (T::of(cfg.lr), T::of(cfg.eps), T::of(cfg.weight_decay));
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let update = (*m * c1) / ((*v * c2).sqrt() + eps) + wd * *p;
        *p = *p - lr * update;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn time_embedding_examples() {
        assert_eq!(
            sinusoidal_time_embed::<f64>(0, 4).unwrap(),
            vec![0.0, 1.0, 0.0, 1.0]
        );
        let e = sinusoidal_time_embed::<f64>(5, 200).unwrap();
        assert_eq!(e.len(), 200);
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        let a = sinusoidal_time_embed::<f64>(1, 64).unwrap();
        let b = sinusoidal_time_embed::<f64>(2, 64).unwrap();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (na * nb) < 1.0 - 1e-12);
        assert!(sinusoidal_time_embed::<f64>(3, 5).is_err());
    }

    #[test]
    fn identity_modulation_reduces_to_plain_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut blk = Csiren::<f64>::new(5, 7, 3, 8, 4, 0.0, &mut rng);
        blk.zero_time_modulation();
        let x = rand_mat(&mut rng, 4, 5);
        let c = rand_mat(&mut rng, 4, 3);
        let (y, _, _) = blk
            .forward::<ChaCha8Rng>(x.view(), c.view(), &[1, 5, 9, 300], Mode::Eval, None)
            .unwrap();
        let b = &blk.block;
        let p = &blk.params;
        let u = b.in_proj.forward(p, x.view()) + b.cond_proj.forward(p, c.view());
        let expect = b.ffn.forward(p, u.view()).mapv(f64::sin);
        assert!(y.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-14));
        assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn block_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let blk = Csiren::<f64>::new(5, 7, 3, 8, 4, 0.0, &mut rng);
        let x = rand_mat(&mut rng, 2, 4);
        let c = rand_mat(&mut rng, 2, 3);
        assert!(blk
            .forward::<ChaCha8Rng>(x.view(), c.view(), &[1, 2], Mode::Eval, None)
            .is_err());
    }

    /// Central differences on `Σ w ⊙ y` against the analytic gradient.
    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..5 {
            let (di, dout, dc) = (3 + trial, 4 + trial % 3, 2 + trial % 2);
            let blk = Csiren::<f64>::new(di, dout, dc, 6, 5, 0.3, &mut rng);
            let x = rand_mat(&mut rng, 3, di);
            let c = rand_mat(&mut rng, 3, dc);
            let w = rand_mat(&mut rng, 3, dout);
            let steps = [3, 700, 3];
            let eval = |b: &Csiren<f64>, x: &Array2<f64>| {
                let mut r = ChaCha8Rng::seed_from_u64(99);
                let (y, _, _) = b
                    .forward(x.view(), c.view(), &steps, Mode::Train, Some(&mut r))
                    .unwrap();
                (&y * &w).sum()
            };
            let mut r = ChaCha8Rng::seed_from_u64(99);
            let (_, cache, time) = blk
                .forward(x.view(), c.view(), &steps, Mode::Train, Some(&mut r))
                .unwrap();
            let (g, dx) = blk.backward(&cache, c.view(), &time, w.view());
            let h = 1e-6;
            for i in 0..blk.params.len() {
                let mut up = blk.clone();
                up.params[i] += h;
                let mut dn = blk.clone();
                dn.params[i] -= h;
                let fd = (eval(&up, &x) - eval(&dn, &x)) / (2.0 * h);
                let denom = fd.abs().max(g[i].abs()).max(1e-6);
                assert!(
                    (fd - g[i]).abs() / denom < 1e-5,
                    "param {i}: {fd} vs {}",
                    g[i]
                );
            }
            for r_ in 0..3 {
                for c_ in 0..di {
                    let mut up = x.clone();
                    up[[r_, c_]] += h;
                    let mut dn = x.clone();
                    dn[[r_, c_]] -= h;
                    let fd = (eval(&blk, &up) - eval(&blk, &dn)) / (2.0 * h);
                    assert!((fd - dx[[r_, c_]]).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn unet_shapes_determinism_and_zero_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cfg = CsUnetConfig::new(64, 8);
        cfg.time_dim = 16;
        let net = CsUnet::<f64>::new(cfg, &mut rng).unwrap();
        let x = rand_mat(&mut rng, 5, 64);
        let c = rand_mat(&mut rng, 5, 8);
        let steps = [1, 2, 3, 500, 999];
        let a = net.predict(x.view(), c.view(), &steps).unwrap();
        let b = net.predict(x.view(), c.view(), &steps).unwrap();
        assert_eq!(a.dim(), (5, 64));
        assert_eq!(a, b);
        let (_, cache) = net
            .forward::<ChaCha8Rng>(x.view(), c.view(), &steps, Mode::Eval, None)
            .unwrap();
        let g = net
            .backward(Some(&cache), Array2::zeros((5, 64)).view())
            .unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(matches!(
            net.backward(None, Array2::zeros((5, 64)).view()),
            Err(Error::MissingForwardCache)
        ));
        assert!(net
            .predict(rand_mat(&mut rng, 5, 63).view(), c.view(), &steps)
            .is_err());
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cfg = CsUnetConfig::new(16, 4);
        cfg.time_dim = 8;
        cfg.depth = 4;
        cfg.bottleneck = 4;
        cfg.dropout = 0.5;
        let net = CsUnet::<f64>::new(cfg, &mut rng).unwrap();
        let x = rand_mat(&mut rng, 3, 16);
        let c = rand_mat(&mut rng, 3, 4);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let (t1, _) = net
            .forward(x.view(), c.view(), &[1, 2, 3], Mode::Train, Some(&mut r1))
            .unwrap();
        let (t2, _) = net
            .forward(x.view(), c.view(), &[1, 2, 3], Mode::Train, Some(&mut r2))
            .unwrap();
        assert_ne!(t1, t2);
        let (e1, _) = net
            .forward(x.view(), c.view(), &[1, 2, 3], Mode::Eval, Some(&mut r1))
            .unwrap();
        let (e2, _) = net
            .forward(x.view(), c.view(), &[1, 2, 3], Mode::Eval, Some(&mut r2))
            .unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn architecture_fingerprint() {
        let cfg = CsUnetConfig::new(576, 768);
        assert_eq!(cfg.encoder_widths(), vec![220, 84, 32]);
        let net = CsUnet::<f64>::zeros(cfg.clone()).unwrap();
        // Independent count: per block in·out + cond·out + T·h + 2·h·out + out·out
        // weights plus 5·out + h biases.
        let widths = [576usize, 220, 84, 32, 84, 220, 576];
        let (dc, dt, th) = (768, 200, 64);
        let mut expect = 0;
        for w in widths.windows(2) {
            let (i, o) = (w[0], w[1]);
            expect += i * o + dc * o + dt * th + 2 * th * o + o * o + 5 * o + th;
        }
        assert_eq!(net.num_params(), expect);
        assert_eq!(CsUnet::<f64>::zeros(cfg).unwrap().num_params(), expect);
    }

    #[test]
    fn config_validation() {
        let mut cfg = CsUnetConfig::new(16, 4);
        cfg.depth = 3;
        assert!(CsUnet::<f64>::zeros(cfg.clone()).is_err());
        cfg.depth = 2;
        cfg.dropout = 1.0;
        assert!(CsUnet::<f64>::zeros(cfg).is_err());
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = vec![1.0f64, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        // Constant gradient: the step size tends to lr.
        let mut p = vec![0.0f64];
        let mut st = AdamState::new(1);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0];
            adam_step(&mut p, &[3.0], &mut st, &cfg).unwrap();
            last = before - p[0];
        }
        assert!((last - 0.01).abs() < 1e-6, "{last}");

        // Quadratic bowl.
        let f = |p: &[f64]| {
            p.iter()
                .enumerate()
                .map(|(i, x)| (i + 1) as f64 * x * x)
                .sum::<f64>()
        };
        let mut p = vec![1.0f64, -1.5, 2.0];
        let mut st = AdamState::new(3);
        let f0 = f(&p);
        for _ in 0..200 {
            let g: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(i, x)| 2.0 * (i + 1) as f64 * x)
                .collect();
            adam_step(&mut p, &g, &mut st, &AdamConfig { lr: 0.05, ..cfg }).unwrap();
        }
        assert!(f(&p) < f0 / 10.0);

        let mut st = AdamState::new(2);
        let mut p = vec![1.0f64, 1.0];
        assert!(adam_step(&mut p, &[f64::NAN, 0.0], &mut st, &cfg).is_err());
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(st.step, 0);
    }
}
