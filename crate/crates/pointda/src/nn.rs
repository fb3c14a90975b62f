//! Dense conv-net primitives: 2-D convolution with explicit backward passes,
//! pointwise activations and an Adam optimizer.
//!
//! Convolutions go through im2col and a GEMM, which keeps the training loop
//! fast enough for CPU-scale experiments. With kernel 3 and padding 1 the
//! output spatial size is exactly `ceil(input / stride)` for strides 1 and 2,
//! so no extra input padding is ever needed.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A single convolution layer; weight is `(out_c, in_c, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

/// Per-layer parameter gradients, same shapes as the layer.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub dw: Array4<f64>,
    pub db: Array1<f64>,
}

impl ConvGrads {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        Self {
            dw: Array4::zeros(conv.weight.dim()),
            db: Array1::zeros(conv.bias.dim()),
        }
    }

    pub fn add_assign(&mut self, other: &ConvGrads) {
        self.dw += &other.dw;
        self.db += &other.db;
    }

    pub fn scale(&mut self, factor: f64) {
        self.dw *= factor;
        self.db *= factor;
    }

    pub fn abs_sum(&self) -> f64 {
        self.dw.iter().map(|v| v.abs()).sum::<f64>()
            + self.db.iter().map(|v| v.abs()).sum::<f64>()
    }
}

/// Standard normal via Box-Muller; keeps initialization free of extra deps.
fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl Conv2d {
    /// He-normal initialization, the default for ReLU stacks.
    pub fn new_he(
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        Self::new_scaled(out_c, in_c, k, stride, pad, std, rng)
    }

    /// Normal initialization with explicit standard deviation; heads use a
    /// small std so initial logits sit near zero.
    pub fn new_scaled(
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = Array4::from_shape_fn((out_c, in_c, k, k), |_| std * sample_normal(rng));
        Self {
            weight,
            bias: Array1::zeros(out_c),
            stride,
            pad,
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.dim().2;
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (in_c, h, w) = x.dim();
        let (out_c, w_in_c, k, _) = self.weight.dim();
        assert_eq!(in_c, w_in_c, "input has {in_c} channels, layer expects {w_in_c}");
        let (oh, ow) = self.out_spatial(h, w);
        let col = im2col(x, k, self.stride, self.pad, oh, ow);
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .unwrap();
        let mut y2 = w2.dot(&col);
        for (mut row, &b) in y2.outer_iter_mut().zip(self.bias.iter()) {
            row += b;
        }
        y2.into_shape_with_order((out_c, oh, ow)).unwrap()
    }

    /// Gradients of a scalar loss given `dy = dL/dy`; returns
    /// `(dL/dx, dL/dweight, dL/dbias)`.
    pub fn backward(
        &self,
        x: &Array3<f64>,
        dy: &Array3<f64>,
    ) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
        let (in_c, h, w) = x.dim();
        let (out_c, _, k, _) = self.weight.dim();
        let (_, oh, ow) = dy.dim();
        debug_assert_eq!((oh, ow), self.out_spatial(h, w));
        let col = im2col(x, k, self.stride, self.pad, oh, ow);
        let dy2 = dy
            .view()
            .into_shape_with_order((out_c, oh * ow))
            .unwrap();
        let dw2 = dy2.dot(&col.t());
        let db = dy2.sum_axis(Axis(1));
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .unwrap();
        let dcol = standardize(w2.t().dot(&dy2));
        let dx = col2im(&dcol, in_c, h, w, k, self.stride, self.pad, oh, ow);
        // `dot` may hand back an F-order array; copy in logical order.
        let dw =
            Array4::from_shape_vec((out_c, in_c, k, k), dw2.iter().copied().collect()).unwrap();
        (dx, dw, db)
    }

    /// Input gradient only; used when the layer's own parameters are frozen.
    pub fn backward_input(&self, x_dim: (usize, usize, usize), dy: &Array3<f64>) -> Array3<f64> {
        let (in_c, h, w) = x_dim;
        let (out_c, _, k, _) = self.weight.dim();
        let (oh, ow) = (dy.dim().1, dy.dim().2);
        let dy2 = dy
            .view()
            .into_shape_with_order((out_c, oh * ow))
            .unwrap();
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .unwrap();
        let dcol = standardize(w2.t().dot(&dy2));
        col2im(&dcol, in_c, h, w, k, self.stride, self.pad, oh, ow)
    }
}

/// Copies an array into row-major layout when `dot` produced an F-order one.
fn standardize(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        let dim = a.dim();
        Array2::from_shape_vec(dim, a.iter().copied().collect()).unwrap()
    }
}

fn im2col(
    x: &Array3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let xs = x.as_slice().expect("standard layout");
    let mut col = Array2::zeros((c * k * k, oh * ow));
    let cs = col.as_slice_mut().unwrap();
    let plane = oh * ow;
    let mut row = 0usize;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_base = ci * h * w + iy as usize * w;
                    let out_base = row * plane + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cs[out_base + ox] = xs[in_base + ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<f64> {
    let mut dx = Array3::zeros((c, h, w));
    let ds = dx.as_slice_mut().unwrap();
    let cs = dcol.as_slice().expect("standard layout");
    let plane = oh * ow;
    let mut row = 0usize;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_base = ci * h * w + iy as usize * w;
                    let out_base = row * plane + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            ds[in_base + ix as usize] += cs[out_base + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given the layer *output* `y`.
pub fn relu_backward(y: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn leaky_relu(x: &Array3<f64>, slope: f64) -> Array3<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

/// Gradient through leaky ReLU given the layer output `y` (sign-preserving
/// for positive slopes, so the output sign identifies the branch).
pub fn leaky_relu_backward(y: &Array3<f64>, dy: &Array3<f64>, slope: f64) -> Array3<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d *= slope;
        }
    });
    dx
}

pub fn tanh(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(f64::tanh)
}

/// Gradient through tanh given the output `y`: `1 - y^2`.
pub fn tanh_backward(y: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| *d *= 1.0 - v * v);
    dx
}

/// Numerically stable two-way softmax.
pub fn softmax2(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let sum = ea + eb;
    (ea / sum, eb / sum)
}

/// Chain rule through a two-way softmax: maps `(dL/dp, dL/dq)` at output
/// probabilities `(p, q)` to gradients on the two logits.
pub fn softmax2_backward(p: f64, q: f64, dp: f64, dq: f64) -> (f64, f64) {
    let inner = dp * p + dq * q;
    (p * (dp - inner), q * (dq - inner))
}

/// Adam with bias correction; one `(m, v)` pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(tensor_sizes: &[usize]) -> Self {
        Self {
            t: 0,
            m: tensor_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: tensor_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, lr: f64, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_array3(dim: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct convolution, the oracle for the im2col path.
    fn conv_reference(conv: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (in_c, h, w) = x.dim();
        let (out_c, _, k, _) = conv.weight.dim();
        let (oh, ow) = conv.out_spatial(h, w);
        let mut y = Array3::zeros((out_c, oh, ow));
        for oc in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[oc];
                    for ic in 0..in_c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += conv.weight[[oc, ic, ky, kx]]
                                        * x[[ic, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    y[[oc, oy, ox]] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_forward_matches_reference() {
        let mut r = rng(1);
        for &(stride, k, pad) in &[(1usize, 3usize, 1usize), (2, 3, 1), (1, 1, 0)] {
            let conv = Conv2d::new_he(4, 3, k, stride, pad, &mut r);
            let x = random_array3((3, 7, 9), &mut r);
            let y = conv.forward(&x);
            let y_ref = conv_reference(&conv, &x);
            assert_eq!(y.dim(), y_ref.dim());
            for (a, b) in y.iter().zip(y_ref.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_stride2_output_is_ceil_of_input() {
        let mut r = rng(2);
        let conv = Conv2d::new_he(2, 1, 3, 2, 1, &mut r);
        for h in 1..20 {
            let (oh, _) = conv.out_spatial(h, 8);
            assert_eq!(oh, h.div_ceil(2), "h = {h}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut r = rng(3);
        let conv = Conv2d::new_he(3, 2, 3, 2, 1, &mut r);
        let x = random_array3((2, 5, 6), &mut r);
        let y = conv.forward(&x);
        // Scalar loss: weighted sum of outputs with fixed random weights.
        let w = random_array3(y.dim(), &mut r);
        let loss = |y: &Array3<f64>| (y * &w).sum();
        let dy = w.clone();
        let (dx, dw, db) = conv.backward(&x, &dy);

        let step = 1e-6;
        for idx in [(0, 0, 0), (1, 2, 3), (0, 4, 5), (1, 1, 1)] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[idx] += step;
            xm[idx] -= step;
            let fd = (loss(&conv.forward(&xp)) - loss(&conv.forward(&xm))) / (2.0 * step);
            assert!((dx[idx] - fd).abs() < 1e-6, "dx {idx:?}: {} vs {fd}", dx[idx]);
        }
        for idx in [(0, 0, 0, 0), (2, 1, 2, 2), (1, 0, 1, 1)] {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.weight[idx] += step;
            cm.weight[idx] -= step;
            let fd = (loss(&cp.forward(&x)) - loss(&cm.forward(&x))) / (2.0 * step);
            assert!((dw[idx] - fd).abs() < 1e-6, "dw {idx:?}");
        }
        for oc in 0..3 {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.bias[oc] += step;
            cm.bias[oc] -= step;
            let fd = (loss(&cp.forward(&x)) - loss(&cm.forward(&x))) / (2.0 * step);
            assert!((db[oc] - fd).abs() < 1e-6, "db {oc}");
        }
    }

    #[test]
    fn backward_input_agrees_with_full_backward() {
        let mut r = rng(4);
        let conv = Conv2d::new_he(3, 2, 3, 2, 1, &mut r);
        let x = random_array3((2, 6, 6), &mut r);
        let dy = random_array3(conv.forward(&x).dim(), &mut r);
        let (dx_full, _, _) = conv.backward(&x, &dy);
        let dx_only = conv.backward_input(x.dim(), &dy);
        for (a, b) in dx_full.iter().zip(dx_only.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut r = rng(5);
        let x = random_array3((2, 3, 3), &mut r);
        let dy = random_array3((2, 3, 3), &mut r);
        let step = 1e-6;

        let y = tanh(&x);
        let dx = tanh_backward(&y, &dy);
        for idx in [(0, 0, 0), (1, 2, 2)] {
            let mut xp = x.clone();
            xp[idx] += step;
            let mut xm = x.clone();
            xm[idx] -= step;
            let fd = ((tanh(&xp) * &dy).sum() - (tanh(&xm) * &dy).sum()) / (2.0 * step);
            assert!((dx[idx] - fd).abs() < 1e-6);
        }

        let y = leaky_relu(&x, 0.2);
        let dx = leaky_relu_backward(&y, &dy, 0.2);
        for idx in [(0, 1, 0), (1, 0, 2)] {
            let mut xp = x.clone();
            xp[idx] += step;
            let mut xm = x.clone();
            xm[idx] -= step;
            let fd = ((leaky_relu(&xp, 0.2) * &dy).sum() - (leaky_relu(&xm, 0.2) * &dy).sum())
                / (2.0 * step);
            assert!((dx[idx] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax2_pair_sums_to_one_and_backward_matches_fd() {
        let (p, q) = softmax2(1.3, -0.4);
        assert!((p + q - 1.0).abs() < 1e-12);
        assert_eq!(softmax2(5.0, 5.0), (0.5, 0.5));

        let (dp, dq) = (0.7, -0.2);
        let (da, db) = softmax2_backward(p, q, dp, dq);
        let step = 1e-6;
        let f = |a: f64, b: f64| {
            let (p, q) = softmax2(a, b);
            dp * p + dq * q
        };
        let fd_a = (f(1.3 + step, -0.4) - f(1.3 - step, -0.4)) / (2.0 * step);
        let fd_b = (f(1.3, -0.4 + step) - f(1.3, -0.4 - step)) / (2.0 * step);
        assert!((da - fd_a).abs() < 1e-8);
        assert!((db - fd_b).abs() < 1e-8);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = vec![5.0f64, -3.0];
        let mut adam = AdamState::new(&[2]);
        for _ in 0..2000 {
            let grads: Vec<f64> = params.iter().map(|&p| 2.0 * p).collect();
            adam.step(0.05, &mut [params.as_mut_slice()], &[grads.as_slice()]);
        }
        assert!(params.iter().all(|p| p.abs() < 1e-3), "{params:?}");
    }
}
