//! Layer kinds with forward and backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{shape_err, Batch, Mode, NnError, Result, Tensor, CHUNK};

pub type Shape3 = (usize, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    /// Output size `ceil(n / s)`; an odd total pad puts the extra element
    /// on the trailing side.
    Same,
}

/// Output length and leading pad along one dimension.
fn out_dim(n: usize, k: usize, s: usize, padding: Padding) -> Result<(usize, usize)> {
    if k == 0 || s == 0 {
        return Err(shape_err("kernel and stride must be positive"));
    }
    match padding {
        Padding::Valid => {
            if k > n {
                return Err(shape_err(format!("kernel {k} larger than input {n}")));
            }
            Ok(((n - k) / s + 1, 0))
        }
        Padding::Same => {
            if n == 0 {
                return Err(shape_err("empty input"));
            }
            let out = n.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(n);
            Ok((out, total / 2))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    ic: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    pt: usize,
    pl: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: Shape3, kernel: (usize, usize), stride: (usize, usize), padding: Padding) -> Result<Self> {
        let (ic, h, w) = input;
        let (oh, pt) = out_dim(h, kernel.0, stride.0, padding)?;
        let (ow, pl) = out_dim(w, kernel.1, stride.1, padding)?;
        Ok(Self { ic, h, w, kh: kernel.0, kw: kernel.1, sh: stride.0, sw: stride.1, pt, pl, oh, ow })
    }

    fn k(&self) -> usize {
        self.ic * self.kh * self.kw
    }

    fn n(&self) -> usize {
        self.oh * self.ow
    }

    /// Input column feeding output column `o` through kernel tap `j`.
    #[inline]
    fn src(o: usize, s: usize, j: usize, pad: usize, len: usize) -> Option<usize> {
        let p = (o * s + j).checked_sub(pad)?;
        (p < len).then_some(p)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut cols = vec![0.0; self.k() * n];
        for c in 0..self.ic {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let r = (c * self.kh + i) * self.kw + j;
                    let row = &mut cols[r * n..(r + 1) * n];
                    for oy in 0..self.oh {
                        let Some(y) = Self::src(oy, self.sh, i, self.pt, self.h) else { continue };
                        let xrow = &x[(c * self.h + y) * self.w..(c * self.h + y + 1) * self.w];
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        if self.sw == 1 && j >= self.pl && j - self.pl + self.ow <= self.w {
                            dst.copy_from_slice(&xrow[j - self.pl..j - self.pl + self.ow]);
                            continue;
                        }
                        for (ox, d) in dst.iter_mut().enumerate() {
                            if let Some(xx) = Self::src(ox, self.sw, j, self.pl, self.w) {
                                *d = xrow[xx];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let n = self.n();
        for c in 0..self.ic {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let r = (c * self.kh + i) * self.kw + j;
                    let row = &cols[r * n..(r + 1) * n];
                    for oy in 0..self.oh {
                        let Some(y) = Self::src(oy, self.sh, i, self.pt, self.h) else { continue };
                        let xrow = &mut dx[(c * self.h + y) * self.w..(c * self.h + y + 1) * self.w];
                        let src = &row[oy * self.ow..(oy + 1) * self.ow];
                        for (ox, &g) in src.iter().enumerate() {
                            if let Some(xx) = Self::src(ox, self.sw, j, self.pl, self.w) {
                                xrow[xx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_one(x: ArrayView3<f64>, w: ArrayView2<f64>, b: &Array1<f64>, g: &ConvGeom) -> Array3<f64> {
    let x = x.as_standard_layout();
    let cols = g.im2col(x.as_slice().expect("standard layout"));
    let cols = ArrayView2::from_shape((g.k(), g.n()), &cols).expect("im2col shape");
    let oc = w.nrows();
    let mut out = Array2::zeros((oc, g.n()));
    for (mut row, &bias) in out.rows_mut().into_iter().zip(b) {
        row.fill(bias);
    }
    general_mat_mul(1.0, &w, &cols, 1.0, &mut out);
    out.into_shape_with_order((oc, g.oh, g.ow)).expect("conv output shape")
}

/// Weight, bias and input gradients for a run of samples.
fn conv_backward_chunk(
    xs: ArrayView4<f64>,
    dys: ArrayView4<f64>,
    w: ArrayView2<f64>,
    g: &ConvGeom,
) -> (Array2<f64>, Array1<f64>, Array4<f64>) {
    let oc = w.nrows();
    let mut dw = Array2::zeros((oc, g.k()));
    let mut db = Array1::zeros(oc);
    let mut dx = Array4::zeros((xs.dim().0, g.ic, g.h, g.w));
    let wt = w.t();
    for ((x, dy), mut dxi) in xs.outer_iter().zip(dys.outer_iter()).zip(dx.outer_iter_mut()) {
        let x = x.as_standard_layout();
        let cols = g.im2col(x.as_slice().expect("standard layout"));
        let cols = ArrayView2::from_shape((g.k(), g.n()), &cols).expect("im2col shape");
        let dy = dy.as_standard_layout();
        let dy = dy.view().into_shape_with_order((oc, g.n())).expect("grad shape");
        general_mat_mul(1.0, &dy, &cols.t(), 1.0, &mut dw);
        db += &dy.sum_axis(Axis(1));
        let mut dcols = Array2::zeros((g.k(), g.n()));
        general_mat_mul(1.0, &wt, &dy, 0.0, &mut dcols);
        g.col2im(dcols.as_slice().expect("standard layout"), dxi.as_slice_mut().expect("standard layout"));
    }
    (dw, db, dx)
}

/// Applies `f` to every sample in parallel and stacks the results.
fn map_samples<F>(x: &Batch, out: Shape3, f: F) -> Batch
where
    F: Fn(ArrayView3<f64>) -> Array3<f64> + Sync,
{
    let n = x.dim().0;
    let parts: Vec<Array3<f64>> = (0..n).into_par_iter().map(|i| f(x.index_axis(Axis(0), i))).collect();
    let mut y = Array4::zeros((n, out.0, out.1, out.2));
    for (mut dst, p) in y.outer_iter_mut().zip(parts) {
        dst.assign(&p);
    }
    y
}

fn sample_shape(x: &Batch) -> Shape3 {
    let (_, c, h, w) = x.dim();
    (c, h, w)
}

fn check_input(x: &Batch, expect: Shape3, layer: &str) -> Result<()> {
    if sample_shape(x) != expect {
        return Err(shape_err(format!("{layer} expects {:?} per sample, got {:?}", expect, sample_shape(x))));
    }
    Ok(())
}

/// Cross-correlation of one `(c, h, w)` input with an `(oc, c, kh, kw)`
/// kernel.
pub fn conv2d_forward(x: &Tensor, kernel: &Array4<f64>, stride: (usize, usize), padding: Padding) -> Result<Tensor> {
    let (oc, ic, kh, kw) = kernel.dim();
    if x.dim().0 != ic {
        return Err(shape_err(format!("kernel expects {ic} input channels, got {}", x.dim().0)));
    }
    let g = ConvGeom::new(x.dim(), (kh, kw), stride, padding)?;
    let kernel = kernel.as_standard_layout();
    let w = kernel.view().into_shape_with_order((oc, g.k())).expect("kernel shape");
    Ok(conv_one(x.view(), w, &Array1::zeros(oc), &g))
}

/// `(grad_x, grad_kernel)` of [`conv2d_forward`].
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Array4<f64>,
    stride: (usize, usize),
    padding: Padding,
    grad_out: &Tensor,
) -> Result<(Tensor, Array4<f64>)> {
    let (oc, ic, kh, kw) = kernel.dim();
    if x.dim().0 != ic {
        return Err(shape_err(format!("kernel expects {ic} input channels, got {}", x.dim().0)));
    }
    let g = ConvGeom::new(x.dim(), (kh, kw), stride, padding)?;
    if grad_out.dim() != (oc, g.oh, g.ow) {
        return Err(shape_err(format!("gradient shape {:?}, forward output {:?}", grad_out.dim(), (oc, g.oh, g.ow))));
    }
    let kernel = kernel.as_standard_layout();
    let w = kernel.view().into_shape_with_order((oc, g.k())).expect("kernel shape");
    let xs = x.view().insert_axis(Axis(0));
    let dys = grad_out.view().insert_axis(Axis(0));
    let (dw, _, dx) = conv_backward_chunk(xs, dys, w, &g);
    Ok((
        dx.index_axis_move(Axis(0), 0),
        dw.into_shape_with_order((oc, ic, kh, kw)).expect("kernel shape"),
    ))
}

/// Glorot (Xavier) uniform initialisation, the Keras default.
fn glorot_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: (usize, usize)) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || rng.random_range(-limit..limit))
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub input: Shape3,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    /// `(out_channels, in_channels * kh * kw)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    grad_weight: Array2<f64>,
    grad_bias: Array1<f64>,
    geom: ConvGeom,
    cache: Option<Batch>,
}

impl Conv2d {
    pub fn new(
        input: Shape3,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if out_channels == 0 {
            return Err(shape_err("convolution needs at least one output channel"));
        }
        let geom = ConvGeom::new(input, kernel, stride, padding)?;
        let weight = glorot_uniform(rng, geom.k(), out_channels * kernel.0 * kernel.1, (out_channels, geom.k()));
        Ok(Self {
            input,
            out_channels,
            kernel,
            stride,
            padding,
            grad_weight: Array2::zeros(weight.dim()),
            weight,
            bias: Array1::zeros(out_channels),
            grad_bias: Array1::zeros(out_channels),
            geom,
            cache: None,
        })
    }

    pub fn output_shape(&self) -> Shape3 {
        (self.out_channels, self.geom.oh, self.geom.ow)
    }

    fn run(&self, x: &Batch) -> Result<Batch> {
        check_input(x, self.input, "conv2d")?;
        let w = self.weight.view();
        Ok(map_samples(x, self.output_shape(), |xi| conv_one(xi, w, &self.bias, &self.geom)))
    }

    fn backward(&mut self, grad: &Batch) -> Result<Batch> {
        let x = self.cache.as_ref().ok_or_else(|| shape_err("conv2d backward before forward"))?;
        if grad.dim() != (x.dim().0, self.out_channels, self.geom.oh, self.geom.ow) {
            return Err(shape_err("conv2d gradient shape"));
        }
        let n = x.dim().0;
        let w = self.weight.view();
        let g = &self.geom;
        let parts: Vec<_> = (0..n)
            .step_by(CHUNK)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|start| {
                let end = (start + CHUNK).min(n);
                conv_backward_chunk(
                    x.slice(ndarray::s![start..end, .., .., ..]),
                    grad.slice(ndarray::s![start..end, .., .., ..]),
                    w,
                    g,
                )
            })
            .collect();
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
        let mut dx = Array4::zeros(x.dim());
        let mut at = 0;
        for (dw, db, dxc) in parts {
            self.grad_weight += &dw;
            self.grad_bias += &db;
            let len = dxc.dim().0;
            dx.slice_mut(ndarray::s![at..at + len, .., .., ..]).assign(&dxc);
            at += len;
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Option<Batch>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Per-channel batch normalisation over `(n, rows, cols)`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    grad_gamma: Array1<f64>,
    grad_beta: Array1<f64>,
    cache: Option<(Batch, Array1<f64>)>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            momentum: 0.99,
            eps: 1e-3,
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
            cache: None,
        }
    }

    fn infer(&self, x: &Batch) -> Batch {
        let mut y = x.clone();
        for (c, mut ch) in y.axis_iter_mut(Axis(1)).enumerate() {
            let scale = self.gamma[c] / (self.running_var[c] + self.eps).sqrt();
            let shift = self.beta[c] - self.running_mean[c] * scale;
            ch.mapv_inplace(|v| v * scale + shift);
        }
        y
    }

    fn train_forward(&mut self, x: &Batch) -> Result<Batch> {
        let (n, _, h, w) = x.dim();
        if n < 2 {
            return Err(NnError::DegenerateBatch);
        }
        let m = (n * h * w) as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(self.channels);
        for (c, mut ch) in xhat.axis_iter_mut(Axis(1)).enumerate() {
            let mean = ch.sum() / m;
            let var = ch.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / m;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[c] = is;
            ch.mapv_inplace(|v| (v - mean) * is);
            self.running_mean[c] = self.momentum * self.running_mean[c] + (1.0 - self.momentum) * mean;
            self.running_var[c] = self.momentum * self.running_var[c] + (1.0 - self.momentum) * var;
        }
        let mut y = xhat.clone();
        for (c, mut ch) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (g, b) = (self.gamma[c], self.beta[c]);
            ch.mapv_inplace(|v| v * g + b);
        }
        self.cache = Some((xhat, inv_std));
        Ok(y)
    }

    fn backward(&mut self, grad: &Batch) -> Result<Batch> {
        let (xhat, inv_std) = self.cache.as_ref().ok_or_else(|| shape_err("batchnorm backward before forward"))?;
        if grad.dim() != xhat.dim() {
            return Err(shape_err("batchnorm gradient shape"));
        }
        let (n, _, h, w) = grad.dim();
        let m = (n * h * w) as f64;
        let mut dx = Array4::zeros(grad.dim());
        for c in 0..self.channels {
            let dy = grad.index_axis(Axis(1), c);
            let xh = xhat.index_axis(Axis(1), c);
            let sum_dy = dy.sum();
            let sum_dy_xh = (&dy * &xh).sum();
            self.grad_beta[c] = sum_dy;
            self.grad_gamma[c] = sum_dy_xh;
            let k = self.gamma[c] * inv_std[c] / m;
            let mut out = dx.index_axis_mut(Axis(1), c);
            ndarray::Zip::from(&mut out).and(&dy).and(&xh).for_each(|o, &d, &x| {
                *o = k * (m * d - sum_dy - x * sum_dy_xh);
            });
        }
        Ok(dx)
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
    cache: Option<Batch>,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidConfig(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate, seed, cache: None })
    }

    /// The mask for one training step is a function of `(seed, step)`.
    fn train_forward(&mut self, x: &Batch, step: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        let keep = 1.0 / (1.0 - self.rate);
        let mask = Array4::from_shape_simple_fn(x.dim(), || if rng.random::<f64>() >= self.rate { keep } else { 0.0 });
        let y = x * &mask;
        self.cache = Some(mask);
        y
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool {
    pub input: Shape3,
    pub window: (usize, usize),
    pub stride: (usize, usize),
    out: Shape3,
    cache: Option<(usize, Vec<usize>)>,
}

impl MaxPool {
    pub fn new(input: Shape3, window: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        let (oh, _) = out_dim(input.1, window.0, stride.0, Padding::Valid)?;
        let (ow, _) = out_dim(input.2, window.1, stride.1, Padding::Valid)?;
        Ok(Self { input, window, stride, out: (input.0, oh, ow), cache: None })
    }

    pub fn output_shape(&self) -> Shape3 {
        self.out
    }

    /// Flat argmax offsets (into one sample) per output element.
    fn pool_one(&self, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let (c, h, w) = self.input;
        let (_, oh, ow) = self.out;
        let mut vals = Vec::with_capacity(c * oh * ow);
        let mut idx = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = usize::MAX;
                    for i in 0..self.window.0 {
                        for j in 0..self.window.1 {
                            let p = (ch * h + oy * self.stride.0 + i) * w + ox * self.stride.1 + j;
                            // Strict comparison keeps the first index on ties.
                            if x[p] > best || at == usize::MAX {
                                best = x[p];
                                at = p;
                            }
                        }
                    }
                    vals.push(best);
                    idx.push(at);
                }
            }
        }
        (vals, idx)
    }

    fn run(&self, x: &Batch) -> Result<(Batch, Vec<usize>)> {
        check_input(x, self.input, "maxpool")?;
        let n = x.dim().0;
        let x = x.as_standard_layout();
        let per = self.input.0 * self.input.1 * self.input.2;
        let flat = x.as_slice().expect("standard layout");
        let parts: Vec<_> = (0..n).into_par_iter().map(|i| self.pool_one(&flat[i * per..(i + 1) * per])).collect();
        let mut vals = Vec::with_capacity(n * self.out.0 * self.out.1 * self.out.2);
        let mut idx = Vec::with_capacity(vals.capacity());
        for (v, i) in parts {
            vals.extend(v);
            idx.extend(i);
        }
        let y = Array4::from_shape_vec((n, self.out.0, self.out.1, self.out.2), vals).expect("pool shape");
        Ok((y, idx))
    }

    fn backward(&mut self, grad: &Batch) -> Result<Batch> {
        let (n, idx) = self.cache.as_ref().ok_or_else(|| shape_err("maxpool backward before forward"))?;
        if grad.dim() != (*n, self.out.0, self.out.1, self.out.2) {
            return Err(shape_err("maxpool gradient shape"));
        }
        let per_in = self.input.0 * self.input.1 * self.input.2;
        let per_out = self.out.0 * self.out.1 * self.out.2;
        let mut dx = vec![0.0; n * per_in];
        let grad = grad.as_standard_layout();
        for (k, (&g, &p)) in grad.iter().zip(idx).enumerate() {
            dx[(k / per_out) * per_in + p] += g;
        }
        Ok(Array4::from_shape_vec((*n, self.input.0, self.input.1, self.input.2), dx).expect("pool shape"))
    }
}

/// Per-window maxima of one sample.
pub fn maxpool_forward(x: &Tensor, window: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    let pool = MaxPool::new(x.dim(), window, stride)?;
    let (y, _) = pool.run(&x.clone().insert_axis(Axis(0)))?;
    Ok(y.index_axis_move(Axis(0), 0))
}

/// Routes `grad_out` to each window's first maximal element.
pub fn maxpool_backward(x: &Tensor, window: (usize, usize), stride: (usize, usize), grad_out: &Tensor) -> Result<Tensor> {
    let mut pool = MaxPool::new(x.dim(), window, stride)?;
    let (_, idx) = pool.run(&x.clone().insert_axis(Axis(0)))?;
    pool.cache = Some((1, idx));
    Ok(pool.backward(&grad_out.clone().insert_axis(Axis(0)))?.index_axis_move(Axis(0), 0))
}

/// Fully connected layer over the flattened sample.
#[derive(Debug, Clone)]
pub struct Dense {
    pub input: Shape3,
    pub out_features: usize,
    /// `(out_features, in_features)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    grad_weight: Array2<f64>,
    grad_bias: Array1<f64>,
    cache: Option<Array2<f64>>,
}

impl Dense {
    pub fn new(input: Shape3, out_features: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let fan_in = input.0 * input.1 * input.2;
        if fan_in == 0 || out_features == 0 {
            return Err(shape_err("dense layer with zero size"));
        }
        let weight = glorot_uniform(rng, fan_in, out_features, (out_features, fan_in));
        Ok(Self {
            input,
            out_features,
            grad_weight: Array2::zeros(weight.dim()),
            weight,
            bias: Array1::zeros(out_features),
            grad_bias: Array1::zeros(out_features),
            cache: None,
        })
    }

    fn flatten(&self, x: &Batch) -> Result<Array2<f64>> {
        check_input(x, self.input, "dense")?;
        let n = x.dim().0;
        let f = self.weight.ncols();
        Ok(x.as_standard_layout().into_owned().into_shape_with_order((n, f)).expect("flatten"))
    }

    fn apply(&self, flat: &Array2<f64>) -> Batch {
        let n = flat.nrows();
        let mut y = Array2::zeros((n, self.out_features));
        for mut row in y.rows_mut() {
            row.assign(&self.bias);
        }
        general_mat_mul(1.0, flat, &self.weight.t(), 1.0, &mut y);
        y.into_shape_with_order((n, self.out_features, 1, 1)).expect("dense output")
    }

    fn backward(&mut self, grad: &Batch) -> Result<Batch> {
        let x = self.cache.as_ref().ok_or_else(|| shape_err("dense backward before forward"))?;
        let n = x.nrows();
        if grad.dim() != (n, self.out_features, 1, 1) {
            return Err(shape_err("dense gradient shape"));
        }
        let dy = grad.view().into_shape_with_order((n, self.out_features)).expect("dense grad");
        self.grad_weight.fill(0.0);
        general_mat_mul(1.0, &dy.t(), x, 0.0, &mut self.grad_weight);
        self.grad_bias = dy.sum_axis(Axis(0));
        let dx = dy.dot(&self.weight);
        Ok(dx.into_shape_with_order((n, self.input.0, self.input.1, self.input.2)).expect("dense input"))
    }
}

/// Softmax over a sample's flattened features; output is `(n, k, 1, 1)`.
#[derive(Debug, Clone, Default)]
pub struct Softmax {
    cache: Option<Array2<f64>>,
}

impl Softmax {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(x: &Batch) -> Array2<f64> {
        let n = x.dim().0;
        let k = x.len() / n.max(1);
        let mut y = x.as_standard_layout().into_owned().into_shape_with_order((n, k)).expect("softmax flatten");
        for mut row in y.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        y
    }
}

/// One entry of a layer stack.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    Relu(Relu),
    BatchNorm(BatchNorm),
    Dropout(Dropout),
    MaxPool(MaxPool),
    Dense(Dense),
    Softmax(Softmax),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu(_) => "relu",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Dropout(_) => "dropout",
            Layer::MaxPool(_) => "max_pool",
            Layer::Dense(_) => "dense",
            Layer::Softmax(_) => "softmax",
        }
    }

    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        match self {
            Layer::Conv2d(l) => {
                if input != l.input {
                    return Err(shape_err(format!("conv2d built for {:?}, fed {:?}", l.input, input)));
                }
                Ok(l.output_shape())
            }
            Layer::MaxPool(l) => {
                if input != l.input {
                    return Err(shape_err(format!("max_pool built for {:?}, fed {:?}", l.input, input)));
                }
                Ok(l.output_shape())
            }
            Layer::Dense(l) => {
                if input != l.input {
                    return Err(shape_err(format!("dense built for {:?}, fed {:?}", l.input, input)));
                }
                Ok((l.out_features, 1, 1))
            }
            Layer::BatchNorm(l) => {
                if input.0 != l.channels {
                    return Err(shape_err(format!("batch_norm over {} channels, fed {}", l.channels, input.0)));
                }
                Ok(input)
            }
            Layer::Softmax(_) => Ok((input.0 * input.1 * input.2, 1, 1)),
            Layer::Relu(_) | Layer::Dropout(_) => Ok(input),
        }
    }

    /// Forward pass. In [`Mode::Train`] inputs are cached for
    /// [`Layer::backward`] and `step` selects the dropout mask.
    pub fn forward(&mut self, x: &Batch, mode: Mode, step: u64) -> Result<Batch> {
        if mode == Mode::Inference {
            return self.infer(x);
        }
        match self {
            Layer::Conv2d(l) => {
                let y = l.run(x)?;
                l.cache = Some(x.clone());
                Ok(y)
            }
            Layer::Relu(l) => {
                l.cache = Some(x.clone());
                Ok(x.mapv(|v| v.max(0.0)))
            }
            Layer::BatchNorm(l) => {
                if x.dim().1 != l.channels {
                    return Err(shape_err(format!("batch_norm over {} channels, fed {}", l.channels, x.dim().1)));
                }
                l.train_forward(x)
            }
            Layer::Dropout(l) => Ok(l.train_forward(x, step)),
            Layer::MaxPool(l) => {
                let (y, idx) = l.run(x)?;
                l.cache = Some((x.dim().0, idx));
                Ok(y)
            }
            Layer::Dense(l) => {
                let flat = l.flatten(x)?;
                let y = l.apply(&flat);
                l.cache = Some(flat);
                Ok(y)
            }
            Layer::Softmax(l) => {
                let y = Softmax::apply(x);
                let (n, k) = y.dim();
                l.cache = Some(y.clone());
                Ok(y.into_shape_with_order((n, k, 1, 1)).expect("softmax output"))
            }
        }
    }

    /// Pure inference-mode forward pass.
    pub fn infer(&self, x: &Batch) -> Result<Batch> {
        match self {
            Layer::Conv2d(l) => l.run(x),
            Layer::Relu(_) => Ok(x.mapv(|v| v.max(0.0))),
            Layer::BatchNorm(l) => {
                self.output_shape(sample_shape(x))?;
                Ok(l.infer(x))
            }
            Layer::Dropout(_) => Ok(x.clone()),
            Layer::MaxPool(l) => Ok(l.run(x)?.0),
            Layer::Dense(l) => Ok(l.apply(&l.flatten(x)?)),
            Layer::Softmax(_) => {
                let y = Softmax::apply(x);
                let (n, k) = y.dim();
                Ok(y.into_shape_with_order((n, k, 1, 1)).expect("softmax output"))
            }
        }
    }

    /// Gradient with respect to the input of the last training-mode
    /// forward pass; parameter gradients are stored on the layer.
    pub fn backward(&mut self, grad: &Batch) -> Result<Batch> {
        match self {
            Layer::Conv2d(l) => l.backward(grad),
            Layer::Relu(l) => {
                let x = l.cache.as_ref().ok_or_else(|| shape_err("relu backward before forward"))?;
                if x.dim() != grad.dim() {
                    return Err(shape_err("relu gradient shape"));
                }
                let mut dx = grad.clone();
                ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                Ok(dx)
            }
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::Dropout(l) => {
                let mask = l.cache.as_ref().ok_or_else(|| shape_err("dropout backward before forward"))?;
                if mask.dim() != grad.dim() {
                    return Err(shape_err("dropout gradient shape"));
                }
                Ok(grad * mask)
            }
            Layer::MaxPool(l) => l.backward(grad),
            Layer::Dense(l) => l.backward(grad),
            Layer::Softmax(l) => {
                let y = l.cache.as_ref().ok_or_else(|| shape_err("softmax backward before forward"))?;
                let (n, k) = y.dim();
                if grad.len() != n * k || grad.dim().0 != n {
                    return Err(shape_err("softmax gradient shape"));
                }
                let dy = grad.view().into_shape_with_order((n, k)).expect("softmax grad");
                let mut dx = Array2::zeros((n, k));
                for ((mut d, yr), gr) in dx.rows_mut().into_iter().zip(y.rows()).zip(dy.rows()) {
                    let dot = yr.dot(&gr);
                    ndarray::Zip::from(&mut d).and(&yr).and(&gr).for_each(|d, &y, &g| *d = y * (g - dot));
                }
                Ok(dx.into_shape_with_order((n, k, 1, 1)).expect("softmax grad"))
            }
        }
    }

    /// Trainable parameters paired with their latest gradients.
    pub fn params_and_grads(&mut self) -> Vec<(&mut [f64], &[f64])> {
        fn pair<'a>(p: &'a mut [f64], g: &'a [f64]) -> (&'a mut [f64], &'a [f64]) {
            (p, g)
        }
        match self {
            Layer::Conv2d(l) => vec![
                pair(l.weight.as_slice_mut().unwrap(), l.grad_weight.as_slice().unwrap()),
                pair(l.bias.as_slice_mut().unwrap(), l.grad_bias.as_slice().unwrap()),
            ],
            Layer::Dense(l) => vec![
                pair(l.weight.as_slice_mut().unwrap(), l.grad_weight.as_slice().unwrap()),
                pair(l.bias.as_slice_mut().unwrap(), l.grad_bias.as_slice().unwrap()),
            ],
            Layer::BatchNorm(l) => vec![
                pair(l.gamma.as_slice_mut().unwrap(), l.grad_gamma.as_slice().unwrap()),
                pair(l.beta.as_slice_mut().unwrap(), l.grad_beta.as_slice().unwrap()),
            ],
            _ => Vec::new(),
        }
    }

    /// Every stored value: parameters, then running statistics.
    pub fn buffers(&self) -> Vec<&[f64]> {
        match self {
            Layer::Conv2d(l) => vec![l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()],
            Layer::Dense(l) => vec![l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()],
            Layer::BatchNorm(l) => vec![
                l.gamma.as_slice().unwrap(),
                l.beta.as_slice().unwrap(),
                l.running_mean.as_slice().unwrap(),
                l.running_var.as_slice().unwrap(),
            ],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Conv2d(l) => vec![l.weight.as_slice_mut().unwrap(), l.bias.as_slice_mut().unwrap()],
            Layer::Dense(l) => vec![l.weight.as_slice_mut().unwrap(), l.bias.as_slice_mut().unwrap()],
            Layer::BatchNorm(l) => vec![
                l.gamma.as_slice_mut().unwrap(),
                l.beta.as_slice_mut().unwrap(),
                l.running_mean.as_slice_mut().unwrap(),
                l.running_var.as_slice_mut().unwrap(),
            ],
            _ => Vec::new(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Layer::Conv2d(l) => l.weight.len() + l.bias.len(),
            Layer::Dense(l) => l.weight.len() + l.bias.len(),
            Layer::BatchNorm(l) => 2 * l.channels,
            _ => 0,
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv2d(l) => l.cache = None,
            Layer::Relu(l) => l.cache = None,
            Layer::BatchNorm(l) => l.cache = None,
            Layer::Dropout(l) => l.cache = None,
            Layer::MaxPool(l) => l.cache = None,
            Layer::Dense(l) => l.cache = None,
            Layer::Softmax(l) => l.cache = None,
        }
    }
}
