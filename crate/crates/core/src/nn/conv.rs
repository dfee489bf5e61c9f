use rand::Rng;

use super::{ParamSlot, Tensor};

/// `C = alpha·A·B + beta·C` over row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (a.len() > (m - 1) * rsa + (k - 1) * csa));
    debug_assert!(k == 0 || (b.len() > (k - 1) * rsb + (n - 1) * csb));
    // SAFETY: the debug assertions above spell out the bounds every caller
    // upholds; the output is a dense row-major m×n block.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D convolution, stride 1, "same" output size. Kernels with an even
/// side pad one extra row/column at the bottom/right.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out_channels × (in_channels·kernel·kernel)`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    grad_weight: Vec<f32>,
    grad_bias: Vec<f32>,
    input: Option<Tensor>,
    /// Skip the input gradient (first layer of the network).
    pub input_grad: bool,
}

impl Conv2d {
    /// He-uniform initialization (bound `sqrt(6 / fan_in)`), zero bias.
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let weight = (0..out_channels * fan_in)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias: vec![0.0; out_channels],
            grad_weight: Vec::new(),
            grad_bias: Vec::new(),
            input: None,
            input_grad: true,
        }
    }

    fn pad_before(&self) -> usize {
        (self.kernel - 1) / 2
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Unfolds `x` into a `(C·k·k) × (N·H·W)` patch matrix.
    fn im2col(&self, x: &Tensor) -> Vec<f32> {
        let (k, pad) = (self.kernel, self.pad_before() as isize);
        let (h, w) = (x.height, x.width);
        let cols_n = x.channel_len();
        let mut cols = vec![0.0f32; self.patch_len() * cols_n];
        for c in 0..x.channels {
            let chan = &x.data[c * cols_n..(c + 1) * cols_n];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for n in 0..x.batch {
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src = n * h * w + sy as usize * w;
                            let dst = n * h * w + y * w;
                            let s0 = (src as isize + x_lo as isize + dx) as usize;
                            dst_row[dst + x_lo..dst + x_hi].copy_from_slice(&chan[s0..s0 + (x_hi - x_lo)]);
                        }
                    }
                }
            }
        }
        cols
    }

    /// Folds a patch-matrix gradient back onto the input layout.
    fn col2im(&self, cols: &[f32], batch: usize, h: usize, w: usize) -> Tensor {
        let (k, pad) = (self.kernel, self.pad_before() as isize);
        let mut dx = Tensor::zeros(self.in_channels, batch, h, w);
        let cols_n = dx.channel_len();
        for c in 0..self.in_channels {
            let chan = &mut dx.data[c * cols_n..(c + 1) * cols_n];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                    let dy = ky as isize - pad;
                    let dxo = kx as isize - pad;
                    let x_lo = (-dxo).max(0) as usize;
                    let x_hi = (w as isize - dxo).min(w as isize).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for n in 0..batch {
                        for y in 0..h {
                            let sy = y as isize + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let dst = n * h * w + sy as usize * w;
                            let src = n * h * w + y * w;
                            let d0 = (dst as isize + x_lo as isize + dxo) as usize;
                            for (d, s) in chan[d0..d0 + (x_hi - x_lo)]
                                .iter_mut()
                                .zip(&src_row[src + x_lo..src + x_hi])
                            {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: Tensor, train: bool) -> Tensor {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let m = x.channel_len();
        let kk = self.patch_len();
        let mut out = Tensor::zeros(self.out_channels, x.batch, x.height, x.width);
        let owned;
        let cols: &[f32] = if self.kernel == 1 {
            &x.data
        } else {
            owned = self.im2col(&x);
            &owned
        };
        gemm(
            self.out_channels,
            kk,
            m,
            &self.weight,
            (kk, 1),
            cols,
            (m, 1),
            0.0,
            &mut out.data,
        );
        for (row, b) in out.data.chunks_exact_mut(m).zip(&self.bias) {
            row.iter_mut().for_each(|v| *v += b);
        }
        self.input = train.then_some(x);
        out
    }

    /// Stores parameter gradients and returns the input gradient (unless
    /// disabled via `input_grad`).
    pub fn backward(&mut self, dout: &Tensor) -> Option<Tensor> {
        let x = self
            .input
            .take()
            .expect("conv backward without a training forward pass");
        let m = x.channel_len();
        let kk = self.patch_len();
        self.grad_bias = dout.data.chunks_exact(m).map(|r| r.iter().sum()).collect();
        self.grad_weight.resize(self.weight.len(), 0.0);
        let owned;
        let cols: &[f32] = if self.kernel == 1 {
            &x.data
        } else {
            owned = self.im2col(&x);
            &owned
        };
        // dW = dOut · colsᵀ
        gemm(
            self.out_channels,
            m,
            kk,
            &dout.data,
            (m, 1),
            cols,
            (1, m),
            0.0,
            &mut self.grad_weight,
        );
        if !self.input_grad {
            return None;
        }
        // dCols = Wᵀ · dOut
        let mut dcols = vec![0.0f32; kk * m];
        gemm(
            kk,
            self.out_channels,
            m,
            &self.weight,
            (1, kk),
            &dout.data,
            (m, 1),
            0.0,
            &mut dcols,
        );
        if self.kernel == 1 {
            return Some(Tensor {
                channels: self.in_channels,
                batch: x.batch,
                height: x.height,
                width: x.width,
                data: dcols,
            });
        }
        Some(self.col2im(&dcols, x.batch, x.height, x.width))
    }

    pub fn params<'a>(&'a mut self, out: &mut Vec<ParamSlot<'a>>) {
        let n_w = self.weight.len();
        let n_b = self.bias.len();
        self.grad_weight.resize(n_w, 0.0);
        self.grad_bias.resize(n_b, 0.0);
        out.push((&mut self.weight, &self.grad_weight));
        out.push((&mut self.bias, &self.grad_bias));
    }

    pub fn state<'a>(&'a self, out: &mut Vec<&'a [f32]>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }

    pub fn state_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f32]>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}
