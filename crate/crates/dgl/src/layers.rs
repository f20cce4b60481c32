//! The layer set of the training engine: 3x3/1x1 convolutions with
//! shape-preserving padding, dense layers, ReLU, 2x2 max pooling, adaptive
//! average pooling to a target extent, and batch normalization. Each layer
//! caches what its backward pass needs; `Stack` chains them.

use crate::error::{Error, Result};
use crate::optim::Parameter;
use crate::tensor::{shape_string, Scalar, Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Construction-time description of a layer; `build` initializes parameters
/// from the given generator (Kaiming-uniform for conv/dense).
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// Stride-1 convolution with shape-preserving padding (kernel / 2).
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    /// Fully connected on the flattened sample; output is `out x 1 x 1`.
    Dense { in_features: usize, out_features: usize },
    Relu,
    MaxPool2,
    /// Adaptive average pooling to `target x target` spatial extent.
    AvgPoolTo { target: usize },
    BatchNorm { channels: usize },
}

impl LayerSpec {
    pub fn build<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> Layer<T> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
            } => Layer::Conv(Conv2d::new(in_channels, out_channels, kernel, rng)),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Layer::Dense(Dense::new(in_features, out_features, rng)),
            LayerSpec::Relu => Layer::Relu(Relu::default()),
            LayerSpec::MaxPool2 => Layer::MaxPool(MaxPool2::default()),
            LayerSpec::AvgPoolTo { target } => Layer::AvgPool(AvgPoolTo::new(target)),
            LayerSpec::BatchNorm { channels } => Layer::BatchNorm(BatchNorm2d::new(channels)),
        }
    }
}

fn kaiming_uniform<T: Scalar>(shape: Shape, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut data = Vec::with_capacity(shape.iter().product());
    for _ in 0..shape.iter().product() {
        data.push(T::from_f64(rng.random_range(-bound..bound)));
    }
    Tensor::new(shape, data).expect("kaiming init shape")
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
    /// Weight laid out as `out_channels x in_channels x kernel x kernel`.
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    cached_input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            pad: kernel / 2,
            weight: Parameter::new(kaiming_uniform(
                [out_channels, in_channels, kernel, kernel],
                fan_in,
                rng,
            )),
            bias: Parameter::new(Tensor::zeros([out_channels, 1, 1, 1])),
            cached_input: None,
        }
    }

    fn out_shape(&self, s: Shape) -> Result<Shape> {
        if s[1] != self.in_channels {
            return Err(Error::shape(
                format!("conv {}x{}", self.kernel, self.kernel),
                format!("{} input channels", self.in_channels),
                shape_string(s),
            ));
        }
        let h = s[2] + 2 * self.pad;
        let w = s[3] + 2 * self.pad;
        if h < self.kernel || w < self.kernel {
            return Err(Error::shape(
                format!("conv {}x{}", self.kernel, self.kernel),
                format!("spatial extent >= {}", self.kernel - 2 * self.pad),
                shape_string(s),
            ));
        }
        Ok([s[0], self.out_channels, h - self.kernel + 1, w - self.kernel + 1])
    }

    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let out_shape = self.out_shape(x.shape())?;
        let (b_n, h_out, w_out) = (out_shape[0], out_shape[2], out_shape[3]);
        let (h_in, w_in) = (x.height(), x.width());
        let k = self.kernel;
        let pad = self.pad as isize;
        let mut out = Tensor::zeros(out_shape);
        let wgt = self.weight.value.data();
        let bias = self.bias.value.data();
        for b in 0..b_n {
            for co in 0..self.out_channels {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = bias[co];
                        for ci in 0..self.in_channels {
                            let w_base = ((co * self.in_channels + ci) * k) * k;
                            for ky in 0..k {
                                let iy = oy as isize + ky as isize - pad;
                                if iy < 0 || iy >= h_in as isize {
                                    continue;
                                }
                                let x_row = x.offset(b, ci, iy as usize, 0);
                                for kx in 0..k {
                                    let ix = ox as isize + kx as isize - pad;
                                    if ix < 0 || ix >= w_in as isize {
                                        continue;
                                    }
                                    acc = acc
                                        + wgt[w_base + ky * k + kx] * x.data()[x_row + ix as usize];
                                }
                            }
                        }
                        *out.at_mut(b, co, oy, ox) = acc;
                    }
                }
            }
        }
        self.cached_input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cached_input
            .take()
            .ok_or_else(|| Error::InvalidArgument("conv backward before forward".into()))?;
        let (h_in, w_in) = (x.height(), x.width());
        let (h_out, w_out) = (grad_out.height(), grad_out.width());
        let k = self.kernel;
        let pad = self.pad as isize;
        let mut grad_in = Tensor::zeros(x.shape());
        let wgt = self.weight.value.data().to_vec();
        let dw = self.weight.grad.data_mut();
        let db = self.bias.grad.data_mut();
        for b in 0..x.batch() {
            for co in 0..self.out_channels {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let g = grad_out.at(b, co, oy, ox);
                        db[co] += g;
                        for ci in 0..self.in_channels {
                            let w_base = ((co * self.in_channels + ci) * k) * k;
                            for ky in 0..k {
                                let iy = oy as isize + ky as isize - pad;
                                if iy < 0 || iy >= h_in as isize {
                                    continue;
                                }
                                let x_row = x.offset(b, ci, iy as usize, 0);
                                let gi_row = grad_in.offset(b, ci, iy as usize, 0);
                                for kx in 0..k {
                                    let ix = ox as isize + kx as isize - pad;
                                    if ix < 0 || ix >= w_in as isize {
                                        continue;
                                    }
                                    dw[w_base + ky * k + kx] += g * x.data()[x_row + ix as usize];
                                    grad_in.data_mut()[gi_row + ix as usize] +=
                                        g * wgt[w_base + ky * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }

    /// Multiply-accumulate counted as 2 flops, per output site and sample.
    fn flops(&self, in_shape: Shape) -> u64 {
        let out = self.out_shape(in_shape).expect("flops on valid shape");
        2 * (self.in_channels * self.out_channels * self.kernel * self.kernel * out[2] * out[3])
            as u64
    }
}

#[derive(Clone, Debug)]
pub struct Dense<T: Scalar> {
    pub in_features: usize,
    pub out_features: usize,
    /// Weight laid out as `out_features x in_features`.
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    cached_input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            in_features,
            out_features,
            weight: Parameter::new(kaiming_uniform(
                [out_features, in_features, 1, 1],
                in_features,
                rng,
            )),
            bias: Parameter::new(Tensor::zeros([out_features, 1, 1, 1])),
            cached_input: None,
        }
    }

    fn out_shape(&self, s: Shape) -> Result<Shape> {
        if s[1] * s[2] * s[3] != self.in_features {
            return Err(Error::shape(
                "dense",
                format!("{} input features", self.in_features),
                shape_string(s),
            ));
        }
        Ok([s[0], self.out_features, 1, 1])
    }

    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let out_shape = self.out_shape(x.shape())?;
        let mut out = Tensor::zeros(out_shape);
        let wgt = self.weight.value.data();
        let bias = self.bias.value.data();
        for b in 0..x.batch() {
            let row = x.sample(b);
            for o in 0..self.out_features {
                let w_row = &wgt[o * self.in_features..(o + 1) * self.in_features];
                let mut acc = bias[o];
                for (w, v) in w_row.iter().zip(row.iter()) {
                    acc = acc + *w * *v;
                }
                out.data_mut()[b * self.out_features + o] = acc;
            }
        }
        self.cached_input = Some(x.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cached_input
            .take()
            .ok_or_else(|| Error::InvalidArgument("dense backward before forward".into()))?;
        let mut grad_in = Tensor::zeros(x.shape());
        let wgt = self.weight.value.data().to_vec();
        let dw = self.weight.grad.data_mut();
        let db = self.bias.grad.data_mut();
        let n = self.in_features;
        for b in 0..x.batch() {
            let row = x.sample(b);
            let gi = &mut grad_in.data_mut()[b * n..(b + 1) * n];
            for o in 0..self.out_features {
                let g = grad_out.data()[b * self.out_features + o];
                db[o] += g;
                let w_row = &wgt[o * n..(o + 1) * n];
                let dw_row = &mut dw[o * n..(o + 1) * n];
                for i in 0..n {
                    dw_row[i] += g * row[i];
                    gi[i] += g * w_row[i];
                }
            }
        }
        Ok(grad_in)
    }

    fn flops(&self, _in_shape: Shape) -> u64 {
        2 * (self.in_features * self.out_features) as u64
    }
}

#[derive(Clone, Debug)]
pub struct Relu<T: Scalar> {
    mask: Option<Vec<bool>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Default for Relu<T> {
    fn default() -> Self {
        Relu { mask: None, _marker: std::marker::PhantomData }
    }
}

impl<T: Scalar> Relu<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.mask = Some(x.data().iter().map(|v| *v > T::zero()).collect());
        x.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| Error::InvalidArgument("relu backward before forward".into()))?;
        let data = grad_out
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(g, m)| if *m { *g } else { T::zero() })
            .collect();
        Tensor::new(grad_out.shape(), data)
    }
}

#[derive(Clone, Debug)]
pub struct MaxPool2<T: Scalar> {
    argmax: Option<(Shape, Vec<usize>)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Default for MaxPool2<T> {
    fn default() -> Self {
        MaxPool2 { argmax: None, _marker: std::marker::PhantomData }
    }
}

impl<T: Scalar> MaxPool2<T> {
    fn out_shape(s: Shape) -> Result<Shape> {
        if s[2] < 2 || s[3] < 2 {
            return Err(Error::shape(
                "maxpool 2x2",
                "spatial extent >= 2".to_string(),
                shape_string(s),
            ));
        }
        Ok([s[0], s[1], s[2] / 2, s[3] / 2])
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = Self::out_shape(x.shape())?;
        let mut out = Tensor::zeros(out_shape);
        let mut argmax = vec![0usize; out.len()];
        let mut oi = 0;
        for b in 0..out_shape[0] {
            for c in 0..out_shape[1] {
                for oy in 0..out_shape[2] {
                    for ox in 0..out_shape[3] {
                        let mut best = x.at(b, c, 2 * oy, 2 * ox);
                        let mut best_idx = x.offset(b, c, 2 * oy, 2 * ox);
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = x.offset(b, c, 2 * oy + dy, 2 * ox + dx);
                            let v = x.data()[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                        out.data_mut()[oi] = best;
                        argmax[oi] = best_idx;
                        oi += 1;
                    }
                }
            }
        }
        self.argmax = Some((x.shape(), argmax));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (in_shape, argmax) = self
            .argmax
            .take()
            .ok_or_else(|| Error::InvalidArgument("maxpool backward before forward".into()))?;
        let mut grad_in = Tensor::zeros(in_shape);
        for (g, idx) in grad_out.data().iter().zip(argmax.iter()) {
            grad_in.data_mut()[*idx] += *g;
        }
        Ok(grad_in)
    }
}

/// Adaptive average pooling: output cell `(oy, ox)` averages the input window
/// `[floor(oy*H/t), ceil((oy+1)*H/t))` per axis.
#[derive(Clone, Debug)]
pub struct AvgPoolTo<T: Scalar> {
    pub target: usize,
    cached_in_shape: Option<Shape>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> AvgPoolTo<T> {
    pub fn new(target: usize) -> Self {
        AvgPoolTo {
            target,
            cached_in_shape: None,
            _marker: std::marker::PhantomData,
        }
    }

    fn out_shape(&self, s: Shape) -> Result<Shape> {
        if self.target == 0 || s[2] < self.target || s[3] < self.target {
            return Err(Error::shape(
                format!("avgpool to {0}x{0}", self.target),
                format!("spatial extent >= {}", self.target.max(1)),
                shape_string(s),
            ));
        }
        Ok([s[0], s[1], self.target, self.target])
    }

    #[inline]
    fn window(extent: usize, target: usize, o: usize) -> (usize, usize) {
        (o * extent / target, ((o + 1) * extent).div_ceil(target))
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = self.out_shape(x.shape())?;
        let (h, w) = (x.height(), x.width());
        let mut out = Tensor::zeros(out_shape);
        for b in 0..out_shape[0] {
            for c in 0..out_shape[1] {
                for oy in 0..self.target {
                    let (y0, y1) = Self::window(h, self.target, oy);
                    for ox in 0..self.target {
                        let (x0, x1) = Self::window(w, self.target, ox);
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                acc = acc + x.at(b, c, y, xx);
                            }
                        }
                        let count = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                        *out.at_mut(b, c, oy, ox) = acc / count;
                    }
                }
            }
        }
        self.cached_in_shape = Some(x.shape());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let in_shape = self
            .cached_in_shape
            .take()
            .ok_or_else(|| Error::InvalidArgument("avgpool backward before forward".into()))?;
        let (h, w) = (in_shape[2], in_shape[3]);
        let mut grad_in = Tensor::zeros(in_shape);
        for b in 0..in_shape[0] {
            for c in 0..in_shape[1] {
                for oy in 0..self.target {
                    let (y0, y1) = Self::window(h, self.target, oy);
                    for ox in 0..self.target {
                        let (x0, x1) = Self::window(w, self.target, ox);
                        let count = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                        let g = grad_out.at(b, c, oy, ox) / count;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                *grad_in.at_mut(b, c, y, xx) += g;
                            }
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }
}

/// Batch normalization over (batch, height, width) per channel. Training uses
/// per-batch statistics and maintains running statistics (momentum 0.1,
/// unbiased variance); evaluation normalizes with the running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Scalar> {
    pub channels: usize,
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T: Scalar> {
    input: Tensor<T>,
    mean: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Parameter::new(Tensor::full([channels, 1, 1, 1], T::one())),
            beta: Parameter::new(Tensor::zeros([channels, 1, 1, 1])),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn check_shape(&self, s: Shape) -> Result<()> {
        if s[1] != self.channels {
            return Err(Error::shape(
                "batchnorm",
                format!("{} channels", self.channels),
                shape_string(s),
            ));
        }
        Ok(())
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        self.check_shape(x.shape())?;
        let s = x.shape();
        let n = (s[0] * s[2] * s[3]) as f64;
        let eps = T::from_f64(self.eps);
        let mut out = Tensor::zeros(s);
        if train {
            let mut mean = vec![T::zero(); self.channels];
            let mut inv_std = vec![T::zero(); self.channels];
            for c in 0..self.channels {
                let mut sum = T::zero();
                for b in 0..s[0] {
                    for y in 0..s[2] {
                        for xx in 0..s[3] {
                            sum = sum + x.at(b, c, y, xx);
                        }
                    }
                }
                let mu = sum / T::from_f64(n);
                let mut var_sum = T::zero();
                for b in 0..s[0] {
                    for y in 0..s[2] {
                        for xx in 0..s[3] {
                            let d = x.at(b, c, y, xx) - mu;
                            var_sum = var_sum + d * d;
                        }
                    }
                }
                let var = var_sum / T::from_f64(n);
                let istd = T::one() / (var + eps).sqrt();
                let g = self.gamma.value.data()[c];
                let bta = self.beta.value.data()[c];
                for b in 0..s[0] {
                    for y in 0..s[2] {
                        for xx in 0..s[3] {
                            *out.at_mut(b, c, y, xx) = g * (x.at(b, c, y, xx) - mu) * istd + bta;
                        }
                    }
                }
                let mom = T::from_f64(self.momentum);
                let unbiased = if n > 1.0 {
                    var_sum / T::from_f64(n - 1.0)
                } else {
                    var
                };
                self.running_mean[c] = (T::one() - mom) * self.running_mean[c] + mom * mu;
                self.running_var[c] = (T::one() - mom) * self.running_var[c] + mom * unbiased;
                mean[c] = mu;
                inv_std[c] = istd;
            }
            self.cache = Some(BnCache {
                input: x.clone(),
                mean,
                inv_std,
            });
        } else {
            for c in 0..self.channels {
                let istd = T::one() / (self.running_var[c] + eps).sqrt();
                let mu = self.running_mean[c];
                let g = self.gamma.value.data()[c];
                let bta = self.beta.value.data()[c];
                for b in 0..s[0] {
                    for y in 0..s[2] {
                        for xx in 0..s[3] {
                            *out.at_mut(b, c, y, xx) = g * (x.at(b, c, y, xx) - mu) * istd + bta;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidArgument("batchnorm backward before forward".into()))?;
        let x = &cache.input;
        let s = x.shape();
        let n = T::from_f64((s[0] * s[2] * s[3]) as f64);
        let mut grad_in = Tensor::zeros(s);
        for c in 0..self.channels {
            let mu = cache.mean[c];
            let istd = cache.inv_std[c];
            let g = self.gamma.value.data()[c];
            // Two reductions, then the standard train-mode formula:
            // dx = (gamma * istd / n) * (n * dy - sum(dy) - xhat * sum(dy * xhat))
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..s[0] {
                for y in 0..s[2] {
                    for xx in 0..s[3] {
                        let dy = grad_out.at(b, c, y, xx);
                        let xhat = (x.at(b, c, y, xx) - mu) * istd;
                        sum_dy = sum_dy + dy;
                        sum_dy_xhat = sum_dy_xhat + dy * xhat;
                    }
                }
            }
            self.gamma.grad.data_mut()[c] += sum_dy_xhat;
            self.beta.grad.data_mut()[c] += sum_dy;
            let scale = g * istd / n;
            for b in 0..s[0] {
                for y in 0..s[2] {
                    for xx in 0..s[3] {
                        let dy = grad_out.at(b, c, y, xx);
                        let xhat = (x.at(b, c, y, xx) - mu) * istd;
                        *grad_in.at_mut(b, c, y, xx) =
                            scale * (n * dy - sum_dy - xhat * sum_dy_xhat);
                    }
                }
            }
        }
        Ok(grad_in)
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T: Scalar> {
    Conv(Conv2d<T>),
    Dense(Dense<T>),
    Relu(Relu<T>),
    MaxPool(MaxPool2<T>),
    AvgPool(AvgPoolTo<T>),
    BatchNorm(BatchNorm2d<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward(x, train),
            Layer::Dense(l) => l.forward(x, train),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::MaxPool(l) => l.forward(x),
            Layer::AvgPool(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x, train),
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.backward(grad_out),
            Layer::Dense(l) => l.backward(grad_out),
            Layer::Relu(l) => l.backward(grad_out),
            Layer::MaxPool(l) => l.backward(grad_out),
            Layer::AvgPool(l) => l.backward(grad_out),
            Layer::BatchNorm(l) => l.backward(grad_out),
        }
    }

    pub fn out_shape(&self, s: Shape) -> Result<Shape> {
        match self {
            Layer::Conv(l) => l.out_shape(s),
            Layer::Dense(l) => l.out_shape(s),
            Layer::Relu(_) => Ok(s),
            Layer::MaxPool(_) => MaxPool2::<T>::out_shape(s),
            Layer::AvgPool(l) => l.out_shape(s),
            Layer::BatchNorm(l) => l.check_shape(s).map(|_| s),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            _ => vec![],
        }
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        match self {
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            _ => vec![],
        }
    }

    /// Conv and dense multiply-accumulates counted as 2 flops per sample;
    /// activations, pooling, and normalization are not counted.
    pub fn flops(&self, in_shape: Shape) -> u64 {
        match self {
            Layer::Conv(l) => l.flops(in_shape),
            Layer::Dense(l) => l.flops(in_shape),
            _ => 0,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Dense(_) => "dense",
            Layer::Relu(_) => "relu",
            Layer::MaxPool(_) => "maxpool",
            Layer::AvgPool(_) => "avgpool",
            Layer::BatchNorm(_) => "batchnorm",
        }
    }
}

/// An ordered stack of layers trained as one unit.
#[derive(Clone, Debug, Default)]
pub struct Stack<T: Scalar> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Stack<T> {
    pub fn from_specs(specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Self {
        Stack {
            layers: specs.iter().map(|s| s.build(rng)).collect(),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in self.layers.iter_mut() {
            cur = layer.forward(&cur, train)?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    pub fn out_shape(&self, mut s: Shape) -> Result<Shape> {
        for layer in &self.layers {
            s = layer.out_shape(s)?;
        }
        Ok(s)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn grad_sq_norm(&self) -> f64 {
        self.params().iter().map(|p| p.grad_sq_norm()).sum()
    }

    /// Per-sample flop count along the stack for the given input shape.
    pub fn flops(&self, mut s: Shape) -> Result<u64> {
        let mut total = 0;
        for layer in &self.layers {
            total += layer.flops(s);
            s = layer.out_shape(s)?;
        }
        Ok(total)
    }

    /// Flattened copy of all parameter values, for trajectory comparison.
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in self.params() {
            out.extend(p.value.data().iter().map(|v| v.as_f64()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn rng() -> ChaCha8Rng {
        seed::rng(0, "layer-tests", 0)
    }

    #[test]
    fn identity_conv_preserves_ones() {
        // 1x1 convolution with weight 1, bias 0 is the identity map.
        let mut conv = Conv2d::<f64>::new(1, 1, 1, &mut rng());
        conv.weight.value.fill(1.0);
        let x = Tensor::full([1, 1, 4, 4], 1.0);
        let y = conv.forward(&x, true).unwrap();
        assert_eq!(y.shape(), [1, 1, 4, 4]);
        assert!(y.data().iter().all(|v| (*v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn maxpool_shape_arithmetic() {
        let mut pool = MaxPool2::<f32>::default();
        let x = Tensor::from_fn([1, 1, 4, 4], |_, _, y, xx| (y * 4 + xx) as f32);
        let y = pool.forward(&x).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        // Direct nested-loop convolution over all positions, written
        // independently of the layer's indexing.
        let mut r = rng();
        let mut conv = Conv2d::<f64>::new(3, 2, 3, &mut r);
        let x = Tensor::from_fn([2, 3, 8, 8], |_, _, _, _| r.random_range(-1.0..1.0));
        let y = conv.forward(&x, true).unwrap();
        assert_eq!(y.shape(), [2, 2, 8, 8]);
        for b in 0..2 {
            for co in 0..2 {
                for oy in 0..8i64 {
                    for ox in 0..8i64 {
                        let mut expect = conv.bias.value.data()[co];
                        for ci in 0..3 {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let iy = oy + ky - 1;
                                    let ix = ox + kx - 1;
                                    if (0..8).contains(&iy) && (0..8).contains(&ix) {
                                        expect += conv.weight.value.at(co, ci, ky as usize, kx as usize)
                                            * x.at(b, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        let got = y.at(b, co, oy as usize, ox as usize);
                        assert!(
                            (got - expect).abs() < 1e-12,
                            "mismatch at ({b},{co},{oy},{ox}): {got} vs {expect}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut conv = Conv2d::<f32>::new(3, 2, 3, &mut rng());
        let x = Tensor::zeros([1, 4, 8, 8]);
        let err = conv.forward(&x, true).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("conv 3x3") && msg.contains("3 input channels"), "{msg}");
    }

    #[test]
    fn avgpool_window_covers_input() {
        let mut pool = AvgPoolTo::<f64>::new(2);
        let x = Tensor::from_fn([1, 1, 4, 4], |_, _, y, xx| (y * 4 + xx) as f64);
        let y = pool.forward(&x).unwrap();
        // Each output cell is the mean of one 2x2 quadrant.
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
        // Pooling to the same extent is the identity.
        let mut same = AvgPoolTo::<f64>::new(4);
        assert_eq!(same.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let x = Tensor::new([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3); // eps shifts it slightly
    }

    #[test]
    fn stack_forward_is_deterministic_given_seed() {
        let specs = vec![
            LayerSpec::Conv { in_channels: 1, out_channels: 2, kernel: 3 },
            LayerSpec::BatchNorm { channels: 2 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
        ];
        let mut a = Stack::<f32>::from_specs(&specs, &mut seed::rng(9, "init", 0));
        let mut b = Stack::<f32>::from_specs(&specs, &mut seed::rng(9, "init", 0));
        let x = Tensor::from_fn([2, 1, 8, 8], |b, _, y, xx| (b + y + xx) as f32 * 0.1);
        let ya = a.forward(&x, true).unwrap();
        let yb = b.forward(&x, true).unwrap();
        assert_eq!(ya.data(), yb.data());
    }
}
