use rand::Rng;

use super::{ParamSlot, Tensor};

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    grad_gamma: Vec<f32>,
    grad_beta: Vec<f32>,
    normalized: Option<Tensor>,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-3;
    /// Weight of the current batch in the running statistics.
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            grad_gamma: Vec::new(),
            grad_beta: Vec::new(),
            normalized: None,
            inv_std: Vec::new(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn forward(&mut self, mut x: Tensor, train: bool) -> Tensor {
        let m = x.channel_len();
        if !train {
            for (c, chan) in x.data.chunks_exact_mut(m).enumerate() {
                let inv = (1.0 / (self.running_var[c] as f64 + Self::EPS).sqrt()) as f32;
                let (mean, g, b) = (self.running_mean[c], self.gamma[c], self.beta[c]);
                chan.iter_mut().for_each(|v| *v = (*v - mean) * inv * g + b);
            }
            return x;
        }
        self.inv_std.clear();
        for (c, chan) in x.data.chunks_exact_mut(m).enumerate() {
            let mean = chan.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
            let var = chan.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + Self::EPS).sqrt();
            let mean32 = mean as f32;
            let inv32 = inv as f32;
            chan.iter_mut().for_each(|v| *v = (*v - mean32) * inv32);
            self.inv_std.push(inv32);
            let mo = Self::MOMENTUM;
            self.running_mean[c] = ((1.0 - mo) * self.running_mean[c] as f64 + mo * mean) as f32;
            self.running_var[c] = ((1.0 - mo) * self.running_var[c] as f64 + mo * var) as f32;
        }
        let normalized = x.clone();
        for (c, chan) in x.data.chunks_exact_mut(m).enumerate() {
            let (g, b) = (self.gamma[c], self.beta[c]);
            chan.iter_mut().for_each(|v| *v = *v * g + b);
        }
        self.normalized = Some(normalized);
        x
    }

    pub fn backward(&mut self, mut dout: Tensor) -> Tensor {
        let xhat = self
            .normalized
            .take()
            .expect("batch-norm backward without a training forward pass");
        let m = dout.channel_len();
        self.grad_gamma.clear();
        self.grad_beta.clear();
        for (c, (dy, xh)) in dout.data.chunks_exact_mut(m).zip(xhat.data.chunks_exact(m)).enumerate() {
            let sum_dy: f64 = dy.iter().map(|&v| v as f64).sum();
            let sum_dy_xhat: f64 = dy.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum();
            self.grad_gamma.push(sum_dy_xhat as f32);
            self.grad_beta.push(sum_dy as f32);
            let scale = self.gamma[c] * self.inv_std[c];
            let (mean_dy, mean_dyx) = ((sum_dy / m as f64) as f32, (sum_dy_xhat / m as f64) as f32);
            for (d, &xv) in dy.iter_mut().zip(xh) {
                *d = scale * (*d - mean_dy - xv * mean_dyx);
            }
        }
        dout
    }

    pub fn params<'a>(&'a mut self, out: &mut Vec<ParamSlot<'a>>) {
        let n = self.gamma.len();
        self.grad_gamma.resize(n, 0.0);
        self.grad_beta.resize(n, 0.0);
        out.push((&mut self.gamma, &self.grad_gamma));
        out.push((&mut self.beta, &self.grad_beta));
    }

    pub fn state<'a>(&'a self, out: &mut Vec<&'a [f32]>) {
        out.extend([&self.gamma[..], &self.beta, &self.running_mean, &self.running_var]);
    }

    pub fn state_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f32]>) {
        out.extend([
            &mut self.gamma[..],
            &mut self.beta[..],
            &mut self.running_mean[..],
            &mut self.running_var[..],
        ]);
    }

    pub fn clear_cache(&mut self) {
        self.normalized = None;
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    active: Vec<bool>,
}

impl Relu {
    pub fn forward(&mut self, mut x: Tensor, train: bool) -> Tensor {
        x.data.iter_mut().for_each(|v| *v = v.max(0.0));
        if train {
            self.active = x.data.iter().map(|&v| v > 0.0).collect();
        }
        x
    }

    pub fn backward(&mut self, mut dout: Tensor) -> Tensor {
        assert_eq!(
            self.active.len(),
            dout.data.len(),
            "relu backward without a training forward pass"
        );
        for (d, &a) in dout.data.iter_mut().zip(&self.active) {
            if !a {
                *d = 0.0;
            }
        }
        self.active = Vec::new();
        dout
    }

    pub fn clear_cache(&mut self) {
        self.active = Vec::new();
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)` in training.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f32,
    keep: Vec<bool>,
}

impl Dropout {
    pub fn new(rate: f32) -> Self {
        Self { rate, keep: Vec::new() }
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, mut x: Tensor, train: bool, rng: &mut R) -> Tensor {
        if !train || self.rate <= 0.0 {
            return x;
        }
        let scale = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        self.keep = x.data.iter().map(|_| rng.random::<f32>() >= rate).collect();
        for (v, &k) in x.data.iter_mut().zip(&self.keep) {
            *v = if k { *v * scale } else { 0.0 };
        }
        x
    }

    pub fn backward(&mut self, mut dout: Tensor) -> Tensor {
        if self.rate <= 0.0 {
            return dout;
        }
        let scale = 1.0 / (1.0 - self.rate);
        for (d, &k) in dout.data.iter_mut().zip(&self.keep) {
            *d = if k { *d * scale } else { 0.0 };
        }
        self.keep = Vec::new();
        dout
    }

    pub fn clear_cache(&mut self) {
        self.keep = Vec::new();
    }
}

/// 2×2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    argmax: Vec<u8>,
    input_shape: [usize; 4],
}

impl MaxPool2 {
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        assert!(
            x.height.is_multiple_of(2) && x.width.is_multiple_of(2),
            "max-pool needs even spatial dims"
        );
        let (h, w) = (x.height / 2, x.width / 2);
        let mut out = Tensor::zeros(x.channels, x.batch, h, w);
        let mut argmax = Vec::with_capacity(if train { out.data.len() } else { 0 });
        let planes = x.channels * x.batch;
        for p in 0..planes {
            let src = &x.data[p * x.plane()..(p + 1) * x.plane()];
            let dst = &mut out.data[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let base = 2 * y * x.width + 2 * xx;
                    let cand = [src[base], src[base + 1], src[base + x.width], src[base + x.width + 1]];
                    let mut best = 0;
                    for i in 1..4 {
                        if cand[i] > cand[best] {
                            best = i;
                        }
                    }
                    dst[y * w + xx] = cand[best];
                    if train {
                        argmax.push(best as u8);
                    }
                }
            }
        }
        if train {
            self.argmax = argmax;
            self.input_shape = x.shape();
        }
        out
    }

    pub fn backward(&mut self, dout: &Tensor) -> Tensor {
        let [c, n, h, w] = self.input_shape;
        assert_eq!(
            self.argmax.len(),
            dout.data.len(),
            "max-pool backward without a training forward pass"
        );
        let mut dx = Tensor::zeros(c, n, h, w);
        let (oh, ow) = (h / 2, w / 2);
        for p in 0..c * n {
            for y in 0..oh {
                for xx in 0..ow {
                    let o = p * oh * ow + y * ow + xx;
                    let a = self.argmax[o] as usize;
                    let (dy, dxo) = (a / 2, a % 2);
                    dx.data[p * h * w + (2 * y + dy) * w + 2 * xx + dxo] = dout.data[o];
                }
            }
        }
        self.argmax = Vec::new();
        dx
    }

    pub fn clear_cache(&mut self) {
        self.argmax = Vec::new();
    }
}

/// Nearest-neighbor 2× up-sampling.
#[derive(Debug, Clone, Copy, Default)]
pub struct Upsample2;

impl Upsample2 {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (h, w) = (x.height * 2, x.width * 2);
        let mut out = Tensor::zeros(x.channels, x.batch, h, w);
        for p in 0..x.channels * x.batch {
            let src = &x.data[p * x.plane()..(p + 1) * x.plane()];
            let dst = &mut out.data[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    dst[y * w + xx] = src[(y / 2) * x.width + xx / 2];
                }
            }
        }
        out
    }

    pub fn backward(&self, dout: &Tensor) -> Tensor {
        let (h, w) = (dout.height / 2, dout.width / 2);
        let mut dx = Tensor::zeros(dout.channels, dout.batch, h, w);
        for p in 0..dout.channels * dout.batch {
            let src = &dout.data[p * dout.plane()..(p + 1) * dout.plane()];
            let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
            for y in 0..dout.height {
                for xx in 0..dout.width {
                    dst[(y / 2) * w + xx / 2] += src[y * dout.width + xx];
                }
            }
        }
        dx
    }
}
