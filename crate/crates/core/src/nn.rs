//! Minimal layer library with explicit backward passes.
//!
//! Activations are `(batch, channels, height, width)` arrays. Every layer
//! exposes `forward` returning whatever the matching `backward` needs, and
//! `backward` accumulates parameter gradients into a same-shaped gradient
//! instance of the layer (see [`Module::zeros_like`]).

use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use crate::error::{invalid, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether batch-norm uses batch statistics or frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Tensor role during visitation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Learnable; updated by the optimizer.
    Param,
    /// State carried in checkpoints but not optimized (running statistics).
    Buffer,
}

/// Named-tensor traversal shared by optimizers and checkpoints.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Kind, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Kind, &mut [f64]));

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, _, d| d.fill(0.0));
        z
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn uniform_fill(shape_len: usize, bound: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..shape_len).map(|_| rng.gen_range(-bound..bound)).collect()
}

// ---------------------------------------------------------------- linear

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn init(inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        let b = 1.0 / (inp as f64).sqrt();
        Self {
            weight: Array2::from_shape_vec((out, inp), uniform_fill(out * inp, b, rng)).unwrap(),
            bias: Array1::from_vec(uniform_fill(out, b, rng)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.weight.ncols() {
            return invalid(format!("linear expects {} inputs, got {}", self.weight.ncols(), x.ncols()));
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, g: &mut Linear) -> Array2<f64> {
        g.weight += &dy.t().dot(x);
        g.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Kind, &[usize], &[f64])) {
        f(&join(prefix, "weight"), Kind::Param, self.weight.shape(), self.weight.as_slice().unwrap());
        f(&join(prefix, "bias"), Kind::Param, self.bias.shape(), self.bias.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Kind, &mut [f64])) {
        f(&join(prefix, "weight"), Kind::Param, self.weight.as_slice_mut().unwrap());
        f(&join(prefix, "bias"), Kind::Param, self.bias.as_slice_mut().unwrap());
    }
}

// ---------------------------------------------------------------- conv

/// Stride-1 convolution with "same" zero padding (odd kernels only).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out, in, k, k)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn init(inp: usize, out: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let fan_in = inp * kernel * kernel;
        let b = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Array4::from_shape_vec((out, inp, kernel, kernel), uniform_fill(out * fan_in, b, rng)).unwrap(),
            bias: Array1::from_vec(uniform_fill(out, b, rng)),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (o, i, k, _) = self.weight.dim();
        self.weight.view().into_shape_with_order((o, i * k * k)).expect("standard layout")
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (b, c, h, w) = x.dim();
        if c != self.in_channels() {
            return invalid(format!("conv expects {} channels, got {c}", self.in_channels()));
        }
        let o = self.out_channels();
        let k = self.kernel();
        let wm = self.weight_matrix();
        let mut y = Array4::zeros((b, o, h, w));
        for n in 0..b {
            let cols = im2col(x.index_axis(Axis(0), n), k);
            let out = wm.dot(&cols);
            let mut yn = y.index_axis_mut(Axis(0), n);
            let mut yn2 = yn.view_mut().into_shape_with_order((o, h * w)).expect("contiguous");
            yn2.assign(&out);
            for (oc, mut row) in yn2.outer_iter_mut().enumerate() {
                row += self.bias[oc];
            }
        }
        Ok(y)
    }

    pub fn backward(&self, x: &Array4<f64>, dy: &Array4<f64>, g: &mut Conv2d) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let o = self.out_channels();
        let k = self.kernel();
        let wm = self.weight_matrix();
        let mut dx = Array4::zeros((b, c, h, w));
        for n in 0..b {
            let cols = im2col(x.index_axis(Axis(0), n), k);
            let dyn_ = dy.index_axis(Axis(0), n);
            let dym = dyn_.to_shape((o, h * w)).expect("reshape");
            {
                let mut gw = g.weight.view_mut().into_shape_with_order((o, c * k * k)).expect("standard layout");
                gw += &dym.dot(&cols.t());
            }
            g.bias += &dym.sum_axis(Axis(1));
            let dcols = wm.t().dot(&dym);
            col2im_add(&dcols, k, dx.index_axis_mut(Axis(0), n));
        }
        dx
    }
}

fn im2col(x: ArrayView3<'_, f64>, k: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let p = (k / 2) as isize;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::zeros((c * k * k, h * w));
    let cs = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = (ci * h + sy as usize) * w;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - p;
                        if sx >= 0 && sx < w as isize {
                            cs[row + y * w + xx] = xs[src + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &Array2<f64>, k: usize, mut out: ndarray::ArrayViewMut3<'_, f64>) {
    let (c, h, w) = out.dim();
    let p = (k / 2) as isize;
    let cs = cols.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = (ci * h + sy as usize) * w;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - p;
                        if sx >= 0 && sx < w as isize {
                            os[dst + sx as usize] += cs[row + y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Kind, &[usize], &[f64])) {
        f(&join(prefix, "weight"), Kind::Param, self.weight.shape(), self.weight.as_slice().unwrap());
        f(&join(prefix, "bias"), Kind::Param, self.bias.shape(), self.bias.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Kind, &mut [f64])) {
        f(&join(prefix, "weight"), Kind::Param, self.weight.as_slice_mut().unwrap());
        f(&join(prefix, "bias"), Kind::Param, self.bias.as_slice_mut().unwrap());
    }
}

// ---------------------------------------------------------------- batch norm

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    mode: Mode,
    /// Batch mean and unbiased variance, for the running-statistics update.
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    pub fn forward(&self, x: &Array4<f64>, mode: Mode) -> Result<(Array4<f64>, BnCache)> {
        let (b, c, h, w) = x.dim();
        if c != self.gamma.len() {
            return invalid(format!("batch norm expects {} channels, got {c}", self.gamma.len()));
        }
        let count = (b * h * w) as f64;
        let (mean, var_biased, var_unbiased) = match mode {
            Mode::Train => {
                let mean = Array1::from_shape_fn(c, |ch| x.slice(s![.., ch, .., ..]).sum() / count);
                let var = Array1::from_shape_fn(c, |ch| {
                    x.slice(s![.., ch, .., ..]).mapv(|v| (v - mean[ch]).powi(2)).sum() / count
                });
                let unbiased = if count > 1.0 { &var * (count / (count - 1.0)) } else { var.clone() };
                (mean, var, unbiased)
            }
            Mode::Inference => (self.running_mean.clone(), self.running_var.clone(), self.running_var.clone()),
        };
        let inv_std = var_biased.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut xhat = x.clone();
        let mut y = Array4::zeros(x.dim());
        for ch in 0..c {
            let mut xs = xhat.slice_mut(s![.., ch, .., ..]);
            xs.mapv_inplace(|v| (v - mean[ch]) * inv_std[ch]);
            y.slice_mut(s![.., ch, .., ..]).assign(&xs.mapv(|v| self.gamma[ch] * v + self.beta[ch]));
        }
        Ok((y, BnCache { xhat, inv_std, mode, batch_mean: mean, batch_var: var_unbiased }))
    }

    pub fn backward(&self, cache: &BnCache, dy: &Array4<f64>, g: &mut BatchNorm2d) -> Array4<f64> {
        let (b, c, h, w) = dy.dim();
        let count = (b * h * w) as f64;
        let mut dx = Array4::zeros(dy.dim());
        for ch in 0..c {
            let dys = dy.slice(s![.., ch, .., ..]);
            let xh = cache.xhat.slice(s![.., ch, .., ..]);
            let sum_dy = dys.sum();
            let sum_dy_xh = (&dys * &xh).sum();
            g.beta[ch] += sum_dy;
            g.gamma[ch] += sum_dy_xh;
            let scale = self.gamma[ch] * cache.inv_std[ch];
            let mut dxs = dx.slice_mut(s![.., ch, .., ..]);
            match cache.mode {
                Mode::Train => {
                    // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                    ndarray::Zip::from(&mut dxs).and(&dys).and(&xh).for_each(|d, &gy, &xv| {
                        *d = scale * (gy - sum_dy / count - xv * sum_dy_xh / count);
                    });
                }
                Mode::Inference => dxs.assign(&dys.mapv(|v| v * scale)),
            }
        }
        dx
    }

    pub fn absorb(&mut self, cache: &BnCache) {
        if cache.mode != Mode::Train {
            return;
        }
        self.running_mean = &self.running_mean * (1.0 - BN_MOMENTUM) + &cache.batch_mean * BN_MOMENTUM;
        self.running_var = &self.running_var * (1.0 - BN_MOMENTUM) + &cache.batch_var * BN_MOMENTUM;
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Kind, &[usize], &[f64])) {
        f(&join(prefix, "gamma"), Kind::Param, self.gamma.shape(), self.gamma.as_slice().unwrap());
        f(&join(prefix, "beta"), Kind::Param, self.beta.shape(), self.beta.as_slice().unwrap());
        f(&join(prefix, "running_mean"), Kind::Buffer, self.running_mean.shape(), self.running_mean.as_slice().unwrap());
        f(&join(prefix, "running_var"), Kind::Buffer, self.running_var.shape(), self.running_var.as_slice().unwrap());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Kind, &mut [f64])) {
        f(&join(prefix, "gamma"), Kind::Param, self.gamma.as_slice_mut().unwrap());
        f(&join(prefix, "beta"), Kind::Param, self.beta.as_slice_mut().unwrap());
        f(&join(prefix, "running_mean"), Kind::Buffer, self.running_mean.as_slice_mut().unwrap());
        f(&join(prefix, "running_var"), Kind::Buffer, self.running_var.as_slice_mut().unwrap());
    }
}

// ---------------------------------------------------------------- activations

pub fn leaky_relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

pub fn leaky_relu_backward(pre: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d *= LEAKY_SLOPE;
        }
    });
    dx
}

pub fn upsample_nearest2(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    Array4::from_shape_fn((b, c, 2 * h, 2 * w), |(n, ch, y, xx)| x[[n, ch, y / 2, xx / 2]])
}

pub fn upsample_nearest2_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (b, c, h2, w2) = dy.dim();
    let mut dx = Array4::zeros((b, c, h2 / 2, w2 / 2));
    for ((n, ch, y, x), v) in dy.indexed_iter() {
        dx[[n, ch, y / 2, x / 2]] += v;
    }
    dx
}

// ---------------------------------------------------------------- attention

/// Linear-complexity global attention with a residual connection.
///
/// Keys are softmax-normalized over positions, queries over channels; the
/// key/value product forms a `key × value` context that every position
/// reads from, so cost grows linearly with the number of positions.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficientAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub reproject: Linear,
}

#[derive(Debug, Clone)]
struct AttnSample {
    ks: Array2<f64>,
    qs: Array2<f64>,
    v: Array2<f64>,
    ctx: Array2<f64>,
    attended: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    samples: Vec<AttnSample>,
}

fn softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Backward of a row-wise softmax given its output `s`.
fn softmax_rows_backward(s: &Array2<f64>, ds: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(s.dim());
    for ((mut o, sr), dr) in out.outer_iter_mut().zip(s.outer_iter()).zip(ds.outer_iter()) {
        let inner = sr.dot(&dr);
        ndarray::Zip::from(&mut o).and(&sr).and(&dr).for_each(|o, &sv, &dv| *o = sv * (dv - inner));
    }
    out
}

impl EfficientAttention {
    pub fn init(channels: usize, key_channels: usize, value_channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Linear::init(channels, key_channels, rng),
            key: Linear::init(channels, key_channels, rng),
            value: Linear::init(channels, value_channels, rng),
            reproject: Linear::init(value_channels, channels, rng),
        }
    }

    fn project(l: &Linear, x: &Array2<f64>) -> Array2<f64> {
        // x is (C, N); 1×1 conv == W x + b per column
        let mut y = l.weight.dot(x);
        for (mut row, &b) in y.outer_iter_mut().zip(l.bias.iter()) {
            row += b;
        }
        y
    }

    fn project_backward(l: &Linear, x: &Array2<f64>, dy: &Array2<f64>, g: &mut Linear) -> Array2<f64> {
        g.weight += &dy.dot(&x.t());
        g.bias += &dy.sum_axis(Axis(1));
        l.weight.t().dot(dy)
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<(Array4<f64>, AttnCache)> {
        let (b, c, h, w) = x.dim();
        if c != self.query.weight.ncols() {
            return invalid(format!("attention expects {} channels, got {c}", self.query.weight.ncols()));
        }
        let mut y = Array4::zeros(x.dim());
        let mut samples = Vec::with_capacity(b);
        for n in 0..b {
            let xn = x.index_axis(Axis(0), n).to_shape((c, h * w)).expect("reshape").to_owned();
            let ks = softmax_rows(&Self::project(&self.key, &xn));
            let qs = softmax_rows(&Self::project(&self.query, &xn).t().to_owned()).t().to_owned();
            let v = Self::project(&self.value, &xn);
            let ctx = ks.dot(&v.t());
            let attended = ctx.t().dot(&qs);
            let out = Self::project(&self.reproject, &attended) + &xn;
            y.index_axis_mut(Axis(0), n).assign(&out.into_shape_with_order((c, h, w)).expect("reshape"));
            samples.push(AttnSample { ks, qs, v, ctx, attended });
        }
        Ok((y, AttnCache { samples }))
    }

    pub fn backward(&self, x: &Array4<f64>, cache: &AttnCache, dy: &Array4<f64>, g: &mut EfficientAttention) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let mut dx = Array4::zeros(x.dim());
        for n in 0..b {
            let sm = &cache.samples[n];
            let xn = x.index_axis(Axis(0), n).to_shape((c, h * w)).expect("reshape").to_owned();
            let dyn_ = dy.index_axis(Axis(0), n).to_shape((c, h * w)).expect("reshape").to_owned();
            let d_att = Self::project_backward(&self.reproject, &sm.attended, &dyn_, &mut g.reproject);
            // attended = ctxᵀ qs
            let d_ctx = sm.qs.dot(&d_att.t());
            let d_qs = sm.ctx.dot(&d_att);
            // ctx = ks vᵀ
            let d_ks = d_ctx.dot(&sm.v);
            let d_v = d_ctx.t().dot(&sm.ks);
            let d_k = softmax_rows_backward(&sm.ks, &d_ks);
            let d_q = softmax_rows_backward(&sm.qs.t().to_owned(), &d_qs.t().to_owned()).t().to_owned();
            let mut dxn = dyn_;
            dxn += &Self::project_backward(&self.key, &xn, &d_k, &mut g.key);
            dxn += &Self::project_backward(&self.query, &xn, &d_q, &mut g.query);
            dxn += &Self::project_backward(&self.value, &xn, &d_v, &mut g.value);
            dx.index_axis_mut(Axis(0), n).assign(&dxn.into_shape_with_order((c, h, w)).expect("reshape"));
        }
        dx
    }
}

impl Module for EfficientAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Kind, &[usize], &[f64])) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.reproject.visit(&join(prefix, "reproject"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Kind, &mut [f64])) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.reproject.visit_mut(&join(prefix, "reproject"), f);
    }
}

// ---------------------------------------------------------------- blocks

/// Residual stage: 1×1 skip path plus conv-norm-act-conv-norm-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub skip: Conv2d,
    pub conv_a: Conv2d,
    pub norm_a: BatchNorm2d,
    pub conv_b: Conv2d,
    pub norm_b: BatchNorm2d,
    pub attention: EfficientAttention,
}

#[derive(Debug, Clone)]
pub struct ResCache {
    norm_a: BnCache,
    norm_a_out: Array4<f64>,
    act_a: Array4<f64>,
    norm_b: BnCache,
    norm_b_out: Array4<f64>,
    attention: AttnCache,
    pre_act: Array4<f64>,
}

impl ResBlock {
    pub fn init(inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self {
            skip: Conv2d::init(inp, out, 1, rng),
            conv_a: Conv2d::init(inp, out, 3, rng),
            norm_a: BatchNorm2d::new(out),
            conv_b: Conv2d::init(out, out, 3, rng),
            norm_b: BatchNorm2d::new(out),
            attention: EfficientAttention::init(out, out, out, rng),
        }
    }

    pub fn forward(&self, x: &Array4<f64>, mode: Mode) -> Result<(Array4<f64>, ResCache)> {
        let r = self.skip.forward(x)?;
        let conv_a_out = self.conv_a.forward(x)?;
        let (norm_a_out, norm_a) = self.norm_a.forward(&conv_a_out, mode)?;
        let act_a = leaky_relu(&norm_a_out);
        let conv_b_out = self.conv_b.forward(&act_a)?;
        let (norm_b_out, norm_b) = self.norm_b.forward(&conv_b_out, mode)?;
        let (att, attention) = self.attention.forward(&norm_b_out)?;
        let pre_act = att + &r;
        let y = leaky_relu(&pre_act);
        Ok((y, ResCache { norm_a, norm_a_out, act_a, norm_b, norm_b_out, attention, pre_act }))
    }

    pub fn backward(&self, x: &Array4<f64>, cache: &ResCache, dy: &Array4<f64>, g: &mut ResBlock) -> Array4<f64> {
        let d_pre = leaky_relu_backward(&cache.pre_act, dy);
        let mut dx = self.skip.backward(x, &d_pre, &mut g.skip);
        let d_nb = self.attention.backward(&cache.norm_b_out, &cache.attention, &d_pre, &mut g.attention);
        let d_cb = self.norm_b.backward(&cache.norm_b, &d_nb, &mut g.norm_b);
        let d_act = self.conv_b.backward(&cache.act_a, &d_cb, &mut g.conv_b);
        let d_na = leaky_relu_backward(&cache.norm_a_out, &d_act);
        let d_ca = self.norm_a.backward(&cache.norm_a, &d_na, &mut g.norm_a);
        dx += &self.conv_a.backward(x, &d_ca, &mut g.conv_a);
        dx
    }

    pub fn absorb(&mut self, cache: &ResCache) {
        self.norm_a.absorb(&cache.norm_a);
        self.norm_b.absorb(&cache.norm_b);
    }
}

impl Module for ResBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Kind, &[usize], &[f64])) {
        self.skip.visit(&join(prefix, "skip"), f);
        self.conv_a.visit(&join(prefix, "conv_a"), f);
        self.norm_a.visit(&join(prefix, "norm_a"), f);
        self.conv_b.visit(&join(prefix, "conv_b"), f);
        self.norm_b.visit(&join(prefix, "norm_b"), f);
        self.attention.visit(&join(prefix, "attention"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Kind, &mut [f64])) {
        self.skip.visit_mut(&join(prefix, "skip"), f);
        self.conv_a.visit_mut(&join(prefix, "conv_a"), f);
        self.norm_a.visit_mut(&join(prefix, "norm_a"), f);
        self.conv_b.visit_mut(&join(prefix, "conv_b"), f);
        self.norm_b.visit_mut(&join(prefix, "norm_b"), f);
        self.attention.visit_mut(&join(prefix, "attention"), f);
    }
}

/// ×2 nearest upsample, 3×3 conv, norm, leaky activation.
#[derive(Debug, Clone, PartialEq)]
pub struct UpBlock {
    pub conv: Conv2d,
    pub norm: BatchNorm2d,
}

#[derive(Debug, Clone)]
pub struct UpCache {
    upsampled: Array4<f64>,
    norm: BnCache,
    norm_out: Array4<f64>,
}

impl UpBlock {
    pub fn init(inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self { conv: Conv2d::init(inp, out, 3, rng), norm: BatchNorm2d::new(out) }
    }

    pub fn forward(&self, x: &Array4<f64>, mode: Mode) -> Result<(Array4<f64>, UpCache)> {
        if x.dim().1 != self.conv.in_channels() {
            return invalid(format!("up block expects {} channels, got {}", self.conv.in_channels(), x.dim().1));
        }
        let upsampled = upsample_nearest2(x);
        let conv_out = self.conv.forward(&upsampled)?;
        let (norm_out, norm) = self.norm.forward(&conv_out, mode)?;
        let y = leaky_relu(&norm_out);
        Ok((y, UpCache { upsampled, norm, norm_out }))
    }

    pub fn backward(&self, cache: &UpCache, dy: &Array4<f64>, g: &mut UpBlock) -> Array4<f64> {
        let d_norm = leaky_relu_backward(&cache.norm_out, dy);
        let d_conv = self.norm.backward(&cache.norm, &d_norm, &mut g.norm);
        let d_up = self.conv.backward(&cache.upsampled, &d_conv, &mut g.conv);
        upsample_nearest2_backward(&d_up)
    }

    pub fn absorb(&mut self, cache: &UpCache) {
        self.norm.absorb(&cache.norm);
    }
}

impl Module for UpBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Kind, &[usize], &[f64])) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Kind, &mut [f64])) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}
