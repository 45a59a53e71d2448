//! Minimal layers with hand-written backward passes.
//!
//! Activations are `(N, C, H, W)` arrays in standard layout. Every layer
//! exposes a pure `forward` returning a cache and a `backward` that
//! accumulates parameter gradients into a gradient container of the same
//! type as the layer.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Anything holding trainable parameters and optional non-trainable buffers.
///
/// The slice order is fixed; optimizers and checkpoints rely on it.
pub trait Module {
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn buffers(&self) -> Vec<&[f64]> {
        Vec::new()
    }

    /// Parameters followed by buffers, in `to_flat` order.
    fn state_mut(&mut self) -> Vec<&mut [f64]> {
        self.params_mut()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|s| s.len()).sum()
    }

    fn zero_params(&mut self) {
        for s in self.params_mut() {
            s.fill(0.0);
        }
    }

    /// Parameters followed by buffers, flattened.
    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for s in self.params().into_iter().chain(self.buffers()) {
            out.extend_from_slice(s);
        }
        out
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = self
            .params()
            .iter()
            .chain(self.buffers().iter())
            .map(|s| s.len())
            .sum();
        if expected != flat.len() {
            return Err(Error::Shape(format!(
                "flat state has {} values, module expects {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for s in self.state_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

pub(crate) fn slice_of<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are kept in standard layout")
}

pub(crate) fn slice_of_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut()
        .expect("parameters are kept in standard layout")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `(out_channels, in_channels * kernel * kernel)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<Array2<f64>>,
    in_dims: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        assert!(stride >= 1 && dilation >= 1);
        Self {
            weight: Array2::zeros((out_channels, in_channels * kernel * kernel)),
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation,
        }
    }

    /// He-normal initialisation, zero bias.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = (self.in_channels * self.kernel * self.kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        self.weight
            .mapv_inplace(|_| std * rng.sample::<f64, _>(StandardNormal));
        self.bias.fill(0.0);
    }

    /// Same-padding: `ceil(H / stride)` outputs along each axis.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.padding();
        let span = self.dilation * (self.kernel - 1);
        (
            (h + 2 * p - span - 1) / self.stride + 1,
            (w + 2 * p - span - 1) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<(Array4<f64>, ConvCache)> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = self.output_size(h, w);
        let mut out = Array4::zeros((n, self.out_channels, ho, wo));
        let mut cols_all = Vec::with_capacity(n);
        for (i, xi) in x.outer_iter().enumerate() {
            let cols = self.im2col(xi, ho, wo);
            let y = self.weight.dot(&cols);
            let mut oi = out.index_axis_mut(Axis(0), i);
            let oi = oi.as_slice_mut().expect("fresh array");
            let ys = y.as_slice().expect("fresh product");
            let plane = ho * wo;
            for o in 0..self.out_channels {
                let b = self.bias[o];
                for (dst, &src) in oi[o * plane..(o + 1) * plane]
                    .iter_mut()
                    .zip(&ys[o * plane..(o + 1) * plane])
                {
                    *dst = src + b;
                }
            }
            cols_all.push(cols);
        }
        Ok((
            out,
            ConvCache {
                cols: cols_all,
                in_dims: (n, c, h, w),
            },
        ))
    }

    /// Accumulates into `grads` and returns the input gradient.
    pub fn backward(&self, cache: &ConvCache, dy: &Array4<f64>, grads: &mut Conv2d) -> Array4<f64> {
        let (n, c, h, w) = cache.in_dims;
        let (_, oc, ho, wo) = dy.dim();
        let mut dx = Array4::zeros((n, c, h, w));
        for i in 0..n {
            let dyi = dy
                .index_axis(Axis(0), i)
                .to_owned()
                .into_shape_with_order((oc, ho * wo))
                .expect("contiguous");
            grads.weight += &dyi.dot(&cache.cols[i].t());
            grads.bias += &dyi.sum_axis(Axis(1));
            let dcols = self.weight.t().dot(&dyi);
            self.col2im(&dcols, dx.index_axis_mut(Axis(0), i), ho, wo);
        }
        dx
    }

    fn im2col(&self, x: ArrayView3<f64>, ho: usize, wo: usize) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let k = self.kernel;
        let p = self.padding() as isize;
        let plane = ho * wo;
        let mut cols = vec![0.0; c * k * k * plane];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let base = row * plane;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = (ci * h + iy as usize) * w;
                        let dst_row = base + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx * self.dilation) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                cols[dst_row + ox] = xs[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((c * k * k, plane), cols).expect("sized above")
    }

    fn col2im(
        &self,
        dcols: &Array2<f64>,
        mut dx: ndarray::ArrayViewMut3<f64>,
        ho: usize,
        wo: usize,
    ) {
        let (c, h, w) = dx.dim();
        let dxs = dx.as_slice_mut().expect("fresh array");
        let ds = dcols.as_slice().expect("fresh product");
        let k = self.kernel;
        let p = self.padding() as isize;
        let plane = ho * wo;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let base = ((ci * k + ky) * k + kx) * plane;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky * self.dilation) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = (ci * h + iy as usize) * w;
                        let src_row = base + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx * self.dilation) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dxs[dst_row + ix as usize] += ds[src_row + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&[f64]> {
        vec![slice_of(&self.weight), slice_of(&self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![slice_of_mut(&mut self.weight), slice_of_mut(&mut self.bias)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with the running statistics; deterministic per sample.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug)]
pub struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    mode: NormMode,
}

/// Batch statistics observed during a training-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub count: usize,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(
        &self,
        x: &Array4<f64>,
        mode: NormMode,
    ) -> (Array4<f64>, BnCache, Option<BnStats>) {
        let (n, c, h, w) = x.dim();
        let m = n * h * w;
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                let mut mean = Array1::zeros(c);
                let mut var = Array1::zeros(c);
                for ch in 0..c {
                    let v = x.index_axis(Axis(1), ch);
                    let mu = v.sum() / m as f64;
                    let s2 = v.fold(0.0, |acc, &e| acc + (e - mu) * (e - mu)) / m as f64;
                    mean[ch] = mu;
                    var[ch] = s2;
                }
                let stats = BnStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: m,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval => (self.running_mean.clone(), self.running_var.clone(), None),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        let mut y = Array4::zeros((n, c, h, w));
        for ch in 0..c {
            let (mu, is, g, b) = (mean[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
            xhat.index_axis_mut(Axis(1), ch).mapv_inplace(|e| (e - mu) * is);
            ndarray::Zip::from(y.index_axis_mut(Axis(1), ch))
                .and(xhat.index_axis(Axis(1), ch))
                .for_each(|o, &xh| *o = g * xh + b);
        }
        (y, BnCache { xhat, inv_std, mode }, stats)
    }

    pub fn backward(&self, cache: &BnCache, dy: &Array4<f64>, grads: &mut BatchNorm2d) -> Array4<f64> {
        let (n, c, h, w) = dy.dim();
        let m = (n * h * w) as f64;
        let mut dx = Array4::zeros((n, c, h, w));
        for ch in 0..c {
            let dyc = dy.index_axis(Axis(1), ch);
            let xh = cache.xhat.index_axis(Axis(1), ch);
            let sum_dy = dyc.sum();
            let sum_dy_xh = ndarray::Zip::from(&dyc)
                .and(&xh)
                .fold(0.0, |acc, &d, &x| acc + d * x);
            grads.gamma[ch] += sum_dy_xh;
            grads.beta[ch] += sum_dy;
            let g = self.gamma[ch];
            let is = cache.inv_std[ch];
            let mut dxc = dx.index_axis_mut(Axis(1), ch);
            match cache.mode {
                NormMode::Train => {
                    // dxhat = dy * g, then the usual batch-norm contraction.
                    let k = g * is / m;
                    ndarray::Zip::from(&mut dxc)
                        .and(&dyc)
                        .and(&xh)
                        .for_each(|o, &d, &x| {
                            *o = k * (m * d - sum_dy - x * sum_dy_xh);
                        });
                }
                NormMode::Eval => {
                    ndarray::Zip::from(&mut dxc)
                        .and(&dyc)
                        .for_each(|o, &d| *o = d * g * is);
                }
            }
        }
        dx
    }

    pub fn update_running(&mut self, stats: &BnStats) {
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        let m = self.momentum;
        ndarray::Zip::from(&mut self.running_mean)
            .and(&stats.mean)
            .for_each(|r, &b| *r = (1.0 - m) * *r + m * b);
        ndarray::Zip::from(&mut self.running_var)
            .and(&stats.var)
            .for_each(|r, &b| *r = (1.0 - m) * *r + m * b * unbias);
    }
}

impl Module for BatchNorm2d {
    fn params(&self) -> Vec<&[f64]> {
        vec![slice_of(&self.gamma), slice_of(&self.beta)]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![slice_of_mut(&mut self.gamma), slice_of_mut(&mut self.beta)]
    }

    fn buffers(&self) -> Vec<&[f64]> {
        vec![slice_of(&self.running_mean), slice_of(&self.running_var)]
    }

    fn state_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            slice_of_mut(&mut self.gamma),
            slice_of_mut(&mut self.beta),
            slice_of_mut(&mut self.running_mean),
            slice_of_mut(&mut self.running_var),
        ]
    }
}

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through a ReLU given its output.
pub fn relu_backward(out: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx)
        .and(out)
        .for_each(|d, &o| {
            if o <= 0.0 {
                *d = 0.0
            }
        });
    dx
}

/// Per-pixel softmax over the channel axis of a `(C, H, W)` array.
pub fn softmax_channels(logits: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = logits.dim();
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut mx = f64::NEG_INFINITY;
            for k in 0..c {
                mx = mx.max(logits[[k, y, x]]);
            }
            let mut z = 0.0;
            for k in 0..c {
                let e = (logits[[k, y, x]] - mx).exp();
                out[[k, y, x]] = e;
                z += e;
            }
            for k in 0..c {
                out[[k, y, x]] /= z;
            }
        }
    }
    out
}

/// Vector-Jacobian product of the channel softmax.
pub fn softmax_channels_backward(p: &Array3<f64>, dp: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = p.dim();
    let mut dz = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut dot = 0.0;
            for k in 0..c {
                dot += p[[k, y, x]] * dp[[k, y, x]];
            }
            for k in 0..c {
                dz[[k, y, x]] = p[[k, y, x]] * (dp[[k, y, x]] - dot);
            }
        }
    }
    dz
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn all_finite<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> bool {
    a.iter().all(|v| v.is_finite())
}
