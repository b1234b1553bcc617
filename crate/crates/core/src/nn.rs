//! Minimal f64 layers with explicit forward and backward passes.
//!
//! Layers are stateless between calls: `forward` returns the output together
//! with whatever the backward pass needs, and `backward` accumulates
//! parameter gradients into each [`Param`] and returns the input gradient.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;

/// A trainable tensor stored as a matrix; biases are `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Param {
    pub fn new(value: Array2<f64>) -> Self {
        let value = value.as_standard_layout().into_owned();
        let grad = Array2::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        Self::new(Array2::from_shape_fn((rows, cols), |_| dist.sample(rng)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Serialized form of a parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlob {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Param> for ParamBlob {
    fn from(p: &Param) -> Self {
        Self {
            rows: p.value.nrows(),
            cols: p.value.ncols(),
            data: p.value.iter().copied().collect(),
        }
    }
}

impl ParamBlob {
    pub fn load_into(&self, p: &mut Param) -> Result<(), String> {
        if p.value.dim() != (self.rows, self.cols) || self.data.len() != self.rows * self.cols {
            return Err(format!(
                "shape mismatch: expected {:?}, found ({}, {})",
                p.value.dim(),
                self.rows,
                self.cols
            ));
        }
        p.value = Array2::from_shape_vec((self.rows, self.cols), self.data.clone()).map_err(|e| e.to_string())?;
        Ok(())
    }
}

/// 2D convolution over a `(channels, height, width)` tensor.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(out, in * k * k)`
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize),
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        Self::with_std(in_channels, out_channels, kernel, stride, padding, std, rng)
    }

    pub fn with_std<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Param::normal(out_channels, in_channels * kernel * kernel, std, rng),
            bias: Param::zeros(1, out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (k, st, p) = (self.kernel, self.stride, self.padding as isize);
        let (ho, wo) = self.output_size(h, w);
        let mut cols = Array2::zeros((c * k * k, ho * wo));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let mut row = cols.row_mut(r);
                    for oy in 0..ho {
                        let iy = (oy * st + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * st + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                row[oy * wo + ox] = x[[ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, in_dim: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = in_dim;
        let (k, st, p) = (self.kernel, self.stride, self.padding as isize);
        let (ho, wo) = self.output_size(h, w);
        let mut x = Array3::zeros(in_dim);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = cols.row((ci * k + ky) * k + kx);
                    for oy in 0..ho {
                        let iy = (oy * st + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * st + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                x[[ci, iy as usize, ix as usize]] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Conv2dCache) {
        let (_, h, w) = x.dim();
        let (ho, wo) = self.output_size(h, w);
        let cols = self.im2col(x);
        let mut y = self.weight.value.dot(&cols);
        y += &self.bias.value.t();
        let y = y.into_shape_with_order((self.out_channels, ho, wo)).expect("conv output shape");
        (y, Conv2dCache { cols, in_dim: x.dim() })
    }

    pub fn backward(&mut self, cache: &Conv2dCache, dy: &Array3<f64>) -> Array3<f64> {
        let (o, ho, wo) = dy.dim();
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, ho * wo))
            .expect("conv grad shape");
        self.weight.grad += &dy2.dot(&cache.cols.t());
        self.bias.grad.row_mut(0).scaled_add(1.0, &dy2.sum_axis(Axis(1)));
        let dcols = self.weight.value.t().dot(&dy2);
        self.col2im(&dcols, cache.in_dim)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Fully connected layer on row vectors: `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::normal(out_dim, in_dim, std, rng),
            bias: Param::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.value.t());
        y += &self.bias.value;
        y
    }

    /// `x` is the input seen by `forward`.
    pub fn backward(&mut self, x: ArrayView2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.weight.grad += &dy.t().dot(&x);
        self.bias.grad.row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        dy.dot(&self.weight.value)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Single-channel 1D convolution whose stride equals its kernel, reducing a
/// length-`L` vector to `L / kernel` outputs.
#[derive(Debug, Clone)]
pub struct StridedConv1d {
    /// `1 x kernel`
    pub weight: Param,
    pub bias: Option<Param>,
}

impl StridedConv1d {
    pub fn new<R: Rng>(kernel: usize, with_bias: bool, rng: &mut R) -> Self {
        let std = (1.0 / kernel as f64).sqrt();
        Self {
            weight: Param::normal(1, kernel, std, rng),
            bias: with_bias.then(|| Param::zeros(1, 1)),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        let k = self.kernel();
        let n = x.len() / k;
        let windows = x.slice(s![..n * k]).into_shape_with_order((n, k)).expect("window shape");
        let mut y = windows.dot(&self.weight.value.row(0));
        if let Some(b) = &self.bias {
            y += b.value[[0, 0]];
        }
        y
    }

    pub fn backward(&mut self, x: &Array1<f64>, dy: &Array1<f64>) -> Array1<f64> {
        let k = self.kernel();
        let n = dy.len();
        let windows = x.slice(s![..n * k]).into_shape_with_order((n, k)).expect("window shape");
        self.weight.grad.row_mut(0).scaled_add(1.0, &windows.t().dot(dy));
        if let Some(b) = &mut self.bias {
            b.grad[[0, 0]] += dy.sum();
        }
        let mut dx = Array1::zeros(x.len());
        let w = self.weight.value.row(0);
        for (j, g) in dy.iter().enumerate() {
            dx.slice_mut(s![j * k..(j + 1) * k]).scaled_add(*g, &w);
        }
        dx
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

pub fn relu3(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

pub fn relu2(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes gradient entries where the post-activation output is zero.
pub fn relu_backward3(out: &Array3<f64>, dy: &mut Array3<f64>) {
    ndarray::Zip::from(dy).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

pub fn relu_backward2(out: &Array2<f64>, dy: &mut Array2<f64>) {
    ndarray::Zip::from(dy).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Region pooling with bilinear sampling (half-pixel aligned).
#[derive(Debug, Clone, Copy)]
pub struct RoiAlign {
    pub output_size: usize,
    pub sampling_ratio: usize,
    pub spatial_scale: f64,
}

/// Per output bin, the flat feature positions and weights it averages.
#[derive(Debug, Clone)]
pub struct RoiAlignCache {
    taps: Vec<Vec<(usize, f64)>>,
    n_rois: usize,
    feat_dim: (usize, usize, usize),
}

impl RoiAlign {
    pub fn bins(&self) -> usize {
        self.output_size * self.output_size
    }

    fn taps(&self, roi: &BBox, h: usize, w: usize) -> Vec<Vec<(usize, f64)>> {
        let ps = self.output_size;
        let sr = self.sampling_ratio;
        let x0 = roi.x1 * self.spatial_scale - 0.5;
        let y0 = roi.y1 * self.spatial_scale - 0.5;
        let bin_w = roi.width() * self.spatial_scale / ps as f64;
        let bin_h = roi.height() * self.spatial_scale / ps as f64;
        let norm = 1.0 / (sr * sr) as f64;
        let mut out = Vec::with_capacity(ps * ps);
        for py in 0..ps {
            for px in 0..ps {
                let mut taps = Vec::with_capacity(4 * sr * sr);
                for iy in 0..sr {
                    let y = y0 + py as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sr as f64;
                    for ix in 0..sr {
                        let x = x0 + px as f64 * bin_w + (ix as f64 + 0.5) * bin_w / sr as f64;
                        bilinear_taps(y, x, h, w, norm, &mut taps);
                    }
                }
                out.push(taps);
            }
        }
        out
    }

    /// Returns `(n_rois, channels * bins)` with channel-major feature order.
    pub fn forward(&self, feat: &Array3<f64>, rois: &[BBox]) -> (Array2<f64>, RoiAlignCache) {
        let (c, h, w) = feat.dim();
        let bins = self.bins();
        let flat = feat.as_standard_layout();
        let flat = flat.as_slice().expect("contiguous");
        let plane = h * w;
        let mut out = Array2::zeros((rois.len(), c * bins));
        let mut all = Vec::with_capacity(rois.len() * bins);
        for (r, roi) in rois.iter().enumerate() {
            let taps = self.taps(roi, h, w);
            let mut row = out.row_mut(r);
            for (b, bin_taps) in taps.iter().enumerate() {
                for ch in 0..c {
                    let base = ch * plane;
                    row[ch * bins + b] = bin_taps.iter().map(|(p, wt)| flat[base + p] * wt).sum();
                }
            }
            all.extend(taps);
        }
        (out, RoiAlignCache { taps: all, n_rois: rois.len(), feat_dim: (c, h, w) })
    }

    pub fn backward(&self, cache: &RoiAlignCache, dy: &Array2<f64>) -> Array3<f64> {
        let (c, h, w) = cache.feat_dim;
        let bins = self.bins();
        let plane = h * w;
        let mut dfeat = vec![0.0; c * plane];
        for r in 0..cache.n_rois {
            let row = dy.row(r);
            for b in 0..bins {
                for &(p, wt) in &cache.taps[r * bins + b] {
                    for ch in 0..c {
                        dfeat[ch * plane + p] += wt * row[ch * bins + b];
                    }
                }
            }
        }
        Array3::from_shape_vec((c, h, w), dfeat).expect("feature shape")
    }
}

fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, scale: f64, taps: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let (y, x) = (y.max(0.0), x.max(0.0));
    let (mut y_low, mut x_low) = (y as usize, x as usize);
    let (y_high, x_high);
    let (mut yy, mut xx) = (y, x);
    if y_low >= h - 1 {
        y_low = h - 1;
        y_high = h - 1;
        yy = y_low as f64;
    } else {
        y_high = y_low + 1;
    }
    if x_low >= w - 1 {
        x_low = w - 1;
        x_high = w - 1;
        xx = x_low as f64;
    } else {
        x_high = x_low + 1;
    }
    let ly = yy - y_low as f64;
    let lx = xx - x_low as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    taps.push((y_low * w + x_low, hy * hx * scale));
    taps.push((y_low * w + x_high, hy * lx * scale));
    taps.push((y_high * w + x_low, ly * hx * scale));
    taps.push((y_high * w + x_high, ly * lx * scale));
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross entropy on a logit with a weight on the positive term.
/// Returns `(loss, d loss / d logit)`.
pub fn bce_with_logits(logit: f64, target: f64, pos_weight: f64) -> (f64, f64) {
    let loss = pos_weight * target * softplus(-logit) + (1.0 - target) * softplus(logit);
    let p = sigmoid(logit);
    let grad = -pos_weight * target * (1.0 - p) + (1.0 - target) * p;
    (loss, grad)
}

/// Softmax cross entropy for one row of logits.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = m + sum.ln() - logits[target];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Huber-style loss with transition point `beta`. Returns `(loss, grad)`.
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    if x.abs() < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (x.abs() - 0.5 * beta, x.signum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    steps: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self { kind, lr, weight_decay, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update using the accumulated gradients scaled by
    /// `grad_scale`, then clears them.
    pub fn step(&mut self, params: Vec<&mut Param>, grad_scale: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (i, p) in params.into_iter().enumerate() {
            let wd = self.weight_decay;
            let mut g = &p.grad * grad_scale;
            if wd > 0.0 {
                g.scaled_add(wd, &p.value);
            }
            match self.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    m.zip_mut_with(&g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
                    v.zip_mut_with(&g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let lr = self.lr;
                    ndarray::Zip::from(&mut p.value).and(&*m).and(&*v).for_each(|w, &m, &v| {
                        *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                    });
                }
                OptimizerKind::Sgd { momentum } => {
                    let m = &mut self.m[i];
                    m.zip_mut_with(&g, |m, &g| *m = momentum * *m + g);
                    p.value.scaled_add(-self.lr, m);
                }
            }
            p.zero_grad();
        }
    }
}
