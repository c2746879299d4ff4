//! Layer primitives. Each layer exposes a forward pass plus an explicit
//! backward pass that accumulates parameter gradients into a same-shaped
//! gradient layer and returns the gradient with respect to its input.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| normal.sample(rng)).collect(),
    }
}

/// Fully connected layer, `y = x W^T + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Dense {
            weight: he_normal(&[output, input], input, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let (inp, out) = (self.input_dim(), self.output_dim());
        if x.shape.len() != 2 || x.shape[1] != inp {
            return Err(Error::shape(name, ["B".to_string(), inp.to_string()], &x.shape));
        }
        let b = x.shape[0];
        let mut y = Tensor::zeros(&[b, out]);
        for row in y.data.chunks_mut(out) {
            row.copy_from_slice(&self.bias.data);
        }
        gemm(b, inp, out, 1.0, &x.data, false, &self.weight.data, true, 1.0, &mut y.data);
        Ok(y)
    }

    /// Accumulates `dW`, `db` into `grad` and returns `dx`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Dense) -> Tensor {
        let (inp, out) = (self.input_dim(), self.output_dim());
        let b = x.shape[0];
        gemm(out, b, inp, 1.0, &dy.data, true, &x.data, false, 1.0, &mut grad.weight.data);
        for row in dy.data.chunks(out) {
            for (g, d) in grad.bias.data.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(&[b, inp]);
        gemm(b, out, inp, 1.0, &dy.data, false, &self.weight.data, false, 0.0, &mut dx.data);
        dx
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Batch normalization over axis 1 of a `(B, C)` or `(B, C, H, W)` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

/// Saved statistics of one batch-norm forward call.
#[derive(Debug, Clone)]
pub struct BnCache {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
    spatial: usize,
    mode: Mode,
}

impl BatchNorm {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn layout(&self, x: &Tensor, name: &str) -> Result<(usize, usize, usize)> {
        let c = self.channels();
        match x.shape.as_slice() {
            [b, ch] if *ch == c => Ok((*b, c, 1)),
            [b, ch, h, w] if *ch == c => Ok((*b, c, h * w)),
            _ => Err(Error::shape(name, format!("(B, {c}) or (B, {c}, H, W)"), &x.shape)),
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, name: &str) -> Result<(Tensor, BnCache)> {
        let (b, c, s) = self.layout(x, name)?;
        let count = b * s;
        if count == 0 {
            return Err(Error::shape(name, "non-empty batch", &x.shape));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        match mode {
            Mode::Train => {
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * s;
                        mean[ci] += x.data[off..off + s].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * s;
                        var[ci] += x.data[off..off + s].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
            }
            Mode::Eval => {
                mean.copy_from_slice(&self.running_mean.data);
                var.copy_from_slice(&self.running_var.data);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut x_hat = vec![0.0; x.len()];
        let mut y = Tensor::zeros(&x.shape);
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                let (g, bt) = (self.gamma.data[ci], self.beta.data[ci]);
                for k in off..off + s {
                    let h = (x.data[k] - mean[ci]) * inv_std[ci];
                    x_hat[k] = h;
                    y.data[k] = g * h + bt;
                }
            }
        }
        Ok((
            y,
            BnCache {
                x_hat,
                inv_std,
                mean,
                var,
                count,
                spatial: s,
                mode,
            },
        ))
    }

    pub fn backward(&self, cache: &BnCache, dy: &Tensor, grad: &mut BatchNorm) -> Tensor {
        let c = self.channels();
        let s = cache.spatial;
        let b = cache.count / s;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                for k in off..off + s {
                    sum_dy[ci] += dy.data[k];
                    sum_dy_xhat[ci] += dy.data[k] * cache.x_hat[k];
                }
            }
        }
        for ci in 0..c {
            grad.gamma.data[ci] += sum_dy_xhat[ci];
            grad.beta.data[ci] += sum_dy[ci];
        }
        let mut dx = Tensor::zeros(&dy.shape);
        let n = cache.count as f64;
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                let scale = self.gamma.data[ci] * cache.inv_std[ci];
                for k in off..off + s {
                    dx.data[k] = match cache.mode {
                        Mode::Eval => scale * dy.data[k],
                        Mode::Train => {
                            scale * (dy.data[k] - sum_dy[ci] / n - cache.x_hat[k] * sum_dy_xhat[ci] / n)
                        }
                    };
                }
            }
        }
        dx
    }

    /// Folds the batch statistics of a training-mode forward into the
    /// running estimates. Inference-mode caches are ignored.
    pub fn update_running(&mut self, cache: &BnCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.momentum;
        let n = cache.count as f64;
        let unbias = if cache.count > 1 { n / (n - 1.0) } else { 1.0 };
        for ci in 0..self.channels() {
            self.running_mean.data[ci] = (1.0 - m) * self.running_mean.data[ci] + m * cache.mean[ci];
            self.running_var.data[ci] = (1.0 - m) * self.running_var.data[ci] + m * cache.var[ci] * unbias;
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("gamma", &self.gamma), ("beta", &self.beta)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Square-kernel 2-D convolution with zero padding, computed via im2col.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `(C_out, C_in, K, K)`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        Conv2d {
            weight: he_normal(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel, rng),
            bias: Tensor::zeros(&[c_out]),
            stride,
            padding,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape[2]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return None;
        }
        Some(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f64]) {
        let (k, s, p) = (self.kernel(), self.stride as isize, self.padding as isize);
        let npix = oh * ow;
        for ci in 0..self.c_in() {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + ki) * k + kj) * npix;
                    for oy in 0..oh {
                        let iy = oy as isize * s + ki as isize - p;
                        let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
        let (k, s, p) = (self.kernel(), self.stride as isize, self.padding as isize);
        let npix = oh * ow;
        for ci in 0..self.c_in() {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((ci * k + ki) * k + kj) * npix;
                    for oy in 0..oh {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += cols[row + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn dims(&self, x: &Tensor, name: &str) -> Result<(usize, usize, usize, usize, usize)> {
        let c_in = self.c_in();
        let bad = || Error::shape(name, format!("(B, {c_in}, H, W)"), &x.shape);
        match x.shape.as_slice() {
            [b, c, h, w] if *c == c_in => {
                let (oh, ow) = self.output_hw(*h, *w).ok_or_else(bad)?;
                Ok((*b, *h, *w, oh, ow))
            }
            _ => Err(bad()),
        }
    }

    pub fn forward(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let (b, h, w, oh, ow) = self.dims(x, name)?;
        let (c_in, c_out, k) = (self.c_in(), self.c_out(), self.kernel());
        let ckk = c_in * k * k;
        let npix = oh * ow;
        let mut cols = vec![0.0; ckk * npix];
        let mut y = Tensor::zeros(&[b, c_out, oh, ow]);
        for bi in 0..b {
            self.im2col(&x.data[bi * c_in * h * w..(bi + 1) * c_in * h * w], h, w, oh, ow, &mut cols);
            let out = &mut y.data[bi * c_out * npix..(bi + 1) * c_out * npix];
            for (co, plane) in out.chunks_mut(npix).enumerate() {
                plane.fill(self.bias.data[co]);
            }
            gemm(c_out, ckk, npix, 1.0, &self.weight.data, false, &cols, false, 1.0, out);
        }
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Conv2d) -> Tensor {
        let (b, c_in, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (c_out, k) = (self.c_out(), self.kernel());
        let (oh, ow) = (dy.shape[2], dy.shape[3]);
        let ckk = c_in * k * k;
        let npix = oh * ow;
        let mut cols = vec![0.0; ckk * npix];
        let mut dcols = vec![0.0; ckk * npix];
        let mut dx = Tensor::zeros(&x.shape);
        for bi in 0..b {
            let xin = &x.data[bi * c_in * h * w..(bi + 1) * c_in * h * w];
            let dyb = &dy.data[bi * c_out * npix..(bi + 1) * c_out * npix];
            self.im2col(xin, h, w, oh, ow, &mut cols);
            gemm(c_out, npix, ckk, 1.0, dyb, false, &cols, true, 1.0, &mut grad.weight.data);
            for (co, plane) in dyb.chunks(npix).enumerate() {
                grad.bias.data[co] += plane.iter().sum::<f64>();
            }
            gemm(ckk, c_out, npix, 1.0, &self.weight.data, true, dyb, false, 0.0, &mut dcols);
            self.col2im(&dcols, h, w, oh, ow, &mut dx.data[bi * c_in * h * w..(bi + 1) * c_in * h * w]);
        }
        dx
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

/// Backward of ReLU given its output.
pub fn relu_backward(out: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        shape: dy.shape.clone(),
        data: out.data.iter().zip(&dy.data).map(|(o, d)| if *o > 0.0 { *d } else { 0.0 }).collect(),
    }
}

/// 2x2 average pooling with stride 2. A trailing odd row or column is dropped.
pub fn avg_pool2(x: &Tensor, name: &str) -> Result<Tensor> {
    let [b, c, h, w] = match x.shape.as_slice() {
        &[b, c, h, w] if h >= 2 && w >= 2 => [b, c, h, w],
        _ => return Err(Error::shape(name, "(B, C, H>=2, W>=2)", &x.shape)),
    };
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[b, c, oh, ow]);
    for p in 0..b * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut y.data[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let (r, q) = (2 * i * w, 2 * j);
                dst[i * ow + j] = 0.25 * (src[r + q] + src[r + q + 1] + src[r + w + q] + src[r + w + q + 1]);
            }
        }
    }
    Ok(y)
}

pub fn avg_pool2_backward(in_shape: &[usize], dy: &Tensor) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(in_shape);
    for p in 0..in_shape[0] * in_shape[1] {
        let src = &dy.data[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let g = 0.25 * src[i * ow + j];
                let (r, q) = (2 * i * w, 2 * j);
                dst[r + q] += g;
                dst[r + q + 1] += g;
                dst[r + w + q] += g;
                dst[r + w + q + 1] += g;
            }
        }
    }
    dx
}

/// `(B, C, H, W)` to `(B, C)` by spatial mean.
pub fn global_avg_pool(x: &Tensor, name: &str) -> Result<Tensor> {
    if x.shape.len() != 4 {
        return Err(Error::shape(name, "(B, C, H, W)", &x.shape));
    }
    let (b, c, s) = (x.shape[0], x.shape[1], x.shape[2] * x.shape[3]);
    let data = x.data.chunks(s).map(|p| p.iter().sum::<f64>() / s as f64).collect();
    Ok(Tensor { shape: vec![b, c], data })
}

pub fn global_avg_pool_backward(in_shape: &[usize], dy: &Tensor) -> Tensor {
    let s = in_shape[2] * in_shape[3];
    let mut dx = Tensor::zeros(in_shape);
    for (plane, g) in dx.data.chunks_mut(s).zip(&dy.data) {
        plane.fill(g / s as f64);
    }
    dx
}

/// Two 3x3 conv + batch-norm stages with an identity or projected shortcut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub shortcut: Option<(Conv2d, BatchNorm)>,
}

#[derive(Debug, Clone)]
pub struct ResidualCache {
    x: Tensor,
    bn1: BnCache,
    r1: Tensor,
    bn2: BnCache,
    shortcut: Option<BnCache>,
    out: Tensor,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        stride: usize,
        momentum: f64,
        eps: f64,
        rng: &mut R,
    ) -> Self {
        let shortcut = (stride != 1 || c_in != c_out).then(|| {
            (
                Conv2d::new(c_in, c_out, 1, stride, 0, rng),
                BatchNorm::new(c_out, momentum, eps),
            )
        });
        ResidualBlock {
            conv1: Conv2d::new(c_in, c_out, 3, stride, 1, rng),
            bn1: BatchNorm::new(c_out, momentum, eps),
            conv2: Conv2d::new(c_out, c_out, 3, 1, 1, rng),
            bn2: BatchNorm::new(c_out, momentum, eps),
            shortcut,
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, name: &str) -> Result<(Tensor, ResidualCache)> {
        let h1 = self.conv1.forward(x, &format!("{name}.conv1"))?;
        let (a1, bn1) = self.bn1.forward(&h1, mode, &format!("{name}.bn1"))?;
        let r1 = relu(&a1);
        let h2 = self.conv2.forward(&r1, &format!("{name}.conv2"))?;
        let (mut sum, bn2) = self.bn2.forward(&h2, mode, &format!("{name}.bn2"))?;
        let shortcut = match &self.shortcut {
            Some((conv, bn)) => {
                let hs = conv.forward(x, &format!("{name}.shortcut.conv"))?;
                let (s, cache) = bn.forward(&hs, mode, &format!("{name}.shortcut.bn"))?;
                sum.add_assign(&s);
                Some(cache)
            }
            None => {
                if x.shape != sum.shape {
                    return Err(Error::shape(format!("{name}.shortcut"), &sum.shape, &x.shape));
                }
                sum.add_assign(x);
                None
            }
        };
        let out = relu(&sum);
        out.check_finite(name)?;
        Ok((
            out.clone(),
            ResidualCache {
                x: x.clone(),
                bn1,
                r1,
                bn2,
                shortcut,
                out,
            },
        ))
    }

    pub fn backward(&self, cache: &ResidualCache, dy: &Tensor, grad: &mut ResidualBlock) -> Tensor {
        let d_sum = relu_backward(&cache.out, dy);
        let d_h2 = self.bn2.backward(&cache.bn2, &d_sum, &mut grad.bn2);
        let d_r1 = self.conv2.backward(&cache.r1, &d_h2, &mut grad.conv2);
        let d_a1 = relu_backward(&cache.r1, &d_r1);
        let d_h1 = self.bn1.backward(&cache.bn1, &d_a1, &mut grad.bn1);
        let mut dx = self.conv1.backward(&cache.x, &d_h1, &mut grad.conv1);
        match (&self.shortcut, &cache.shortcut, &mut grad.shortcut) {
            (Some((conv, bn)), Some(bn_cache), Some((gconv, gbn))) => {
                let d_hs = bn.backward(bn_cache, &d_sum, gbn);
                dx.add_assign(&conv.backward(&cache.x, &d_hs, gconv));
            }
            _ => dx.add_assign(&d_sum),
        }
        dx
    }

    pub fn update_running(&mut self, cache: &ResidualCache) {
        self.bn1.update_running(&cache.bn1);
        self.bn2.update_running(&cache.bn2);
        if let (Some((_, bn)), Some(c)) = (&mut self.shortcut, &cache.shortcut) {
            bn.update_running(c);
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = named("conv1", self.conv1.params());
        out.extend(named("bn1", self.bn1.params()));
        out.extend(named("conv2", self.conv2.params()));
        out.extend(named("bn2", self.bn2.params()));
        if let Some((conv, bn)) = &self.shortcut {
            out.extend(named("shortcut.conv", conv.params()));
            out.extend(named("shortcut.bn", bn.params()));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.conv1.params_mut();
        out.extend(self.bn1.params_mut());
        out.extend(self.conv2.params_mut());
        out.extend(self.bn2.params_mut());
        if let Some((conv, bn)) = &mut self.shortcut {
            out.extend(conv.params_mut());
            out.extend(bn.params_mut());
        }
        out
    }
}

pub(crate) fn named<'a, S: AsRef<str>>(prefix: &str, list: Vec<(S, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    list.into_iter().map(|(n, t)| (format!("{prefix}.{}", n.as_ref()), t)).collect()
}
