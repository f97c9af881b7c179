//! Convolution and fully connected layers with hand-written backward passes.
//!
//! Tensors are flat `f64` slices in planar `C x H x W` order. Convolutions go
//! through im2col and a GEMM.

use rand::Rng;

use super::params::{init_weight, DetectorParams, Grads, Param, Partition};

/// `c = alpha * a * b + beta * c` for row-major `a: m x k`, `b: k x n`, `c: m x n`.
/// `a_t` / `b_t` read the operand as its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths checked above cover every index the strides reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu_inplace(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Backprop through leaky ReLU given the activation *output*.
pub fn leaky_relu_backward(out: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub partition: Partition,
}

/// Forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f64>,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        partition: Partition,
    ) -> Self {
        Self {
            name: name.to_string(),
            in_c,
            out_c,
            kernel,
            stride,
            pad: kernel / 2,
            partition,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn fan_in(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn init(&self, params: &mut DetectorParams, gain: f64, rng: &mut impl Rng) {
        params.insert(
            self.weight_name(),
            init_weight(
                self.partition,
                vec![self.out_c, self.in_c, self.kernel, self.kernel],
                self.fan_in(),
                gain,
                rng,
            ),
        );
        params.insert(self.bias_name(), Param::zeros(self.partition, vec![self.out_c]));
    }

    fn im2col(&self, input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let p = oh * ow;
        let mut cols = vec![0.0; self.fan_in() * p];
        for c in 0..self.in_c {
            let plane = &input[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let p = oh * ow;
        let mut out = vec![0.0; self.in_c * h * w];
        for c in 0..self.in_c {
            let plane = &mut out[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the pre-activation output (`out_c x oh x ow`) and the cache.
    pub fn forward(
        &self,
        params: &DetectorParams,
        input: &[f64],
        h: usize,
        w: usize,
    ) -> (Vec<f64>, ConvCache) {
        debug_assert_eq!(input.len(), self.in_c * h * w);
        let (oh, ow) = self.out_size(h, w);
        let p = oh * ow;
        let cols = if self.kernel == 1 && self.stride == 1 {
            input.to_vec()
        } else {
            self.im2col(input, h, w)
        };
        let weight = params.data(&self.weight_name());
        let bias = params.data(&self.bias_name());
        let mut out = vec![0.0; self.out_c * p];
        for (o, chunk) in out.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[o]);
        }
        gemm(self.out_c, self.fan_in(), p, weight, false, &cols, false, &mut out, 1.0);
        (out, ConvCache { cols, in_h: h, in_w: w })
    }

    /// Accumulates parameter gradients into `grads` (unless `skip_params`)
    /// and returns the input gradient when `need_input` is set.
    pub fn backward(
        &self,
        params: &DetectorParams,
        cache: &ConvCache,
        dout: &[f64],
        grads: &mut Grads,
        skip_params: bool,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let (oh, ow) = self.out_size(cache.in_h, cache.in_w);
        let p = oh * ow;
        let kdim = self.fan_in();
        if !skip_params {
            gemm(
                self.out_c,
                p,
                kdim,
                dout,
                false,
                &cache.cols,
                true,
                grads.get_mut(&self.weight_name()),
                1.0,
            );
            let db = grads.get_mut(&self.bias_name());
            for (o, chunk) in dout.chunks(p).enumerate() {
                db[o] += chunk.iter().sum::<f64>();
            }
        }
        if !need_input {
            return None;
        }
        let weight = params.data(&self.weight_name());
        let mut dcols = vec![0.0; kdim * p];
        gemm(kdim, self.out_c, p, weight, true, dout, false, &mut dcols, 0.0);
        if self.kernel == 1 && self.stride == 1 {
            Some(dcols)
        } else {
            Some(self.col2im(&dcols, cache.in_h, cache.in_w))
        }
    }
}

/// Fully connected layer applied to a batch of row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub partition: Partition,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, partition: Partition) -> Self {
        Self {
            name: name.to_string(),
            in_dim,
            out_dim,
            partition,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, params: &mut DetectorParams, gain: f64, rng: &mut impl Rng) {
        params.insert(
            self.weight_name(),
            init_weight(self.partition, vec![self.out_dim, self.in_dim], self.in_dim, gain, rng),
        );
        params.insert(self.bias_name(), Param::zeros(self.partition, vec![self.out_dim]));
    }

    /// `x: n x in_dim` -> `n x out_dim`.
    pub fn forward(&self, params: &DetectorParams, x: &[f64], n: usize) -> Vec<f64> {
        let weight = params.data(&self.weight_name());
        let bias = params.data(&self.bias_name());
        let mut out = vec![0.0; n * self.out_dim];
        for row in out.chunks_mut(self.out_dim) {
            row.copy_from_slice(bias);
        }
        gemm(n, self.in_dim, self.out_dim, x, false, weight, true, &mut out, 1.0);
        out
    }

    pub fn backward(
        &self,
        params: &DetectorParams,
        x: &[f64],
        dout: &[f64],
        n: usize,
        grads: &mut Grads,
        skip_params: bool,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        if !skip_params {
            gemm(
                self.out_dim,
                n,
                self.in_dim,
                dout,
                true,
                x,
                false,
                grads.get_mut(&self.weight_name()),
                1.0,
            );
            let db = grads.get_mut(&self.bias_name());
            for row in dout.chunks(self.out_dim) {
                for (a, b) in db.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        if !need_input {
            return None;
        }
        let weight = params.data(&self.weight_name());
        let mut dx = vec![0.0; n * self.in_dim];
        gemm(n, self.out_dim, self.in_dim, dout, false, weight, false, &mut dx, 0.0);
        Some(dx)
    }
}
