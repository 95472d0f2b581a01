//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Activations are `(B, C, H, W)` arrays. A layer's `forward` records what
//! its `backward` needs; `infer` evaluates without recording. Parameter
//! gradients accumulate into [`Param::grad`] until cleared.

use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayView3, ArrayView4, Axis, IxDyn, Zip};
use rand::Rng;

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Square `k×k` convolution, stride 1, circular padding `k/2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    cache: Option<Vec<Array2<f64>>>,
}

/// Unrolls periodic `k×k` neighbourhoods into `(C·k·k, H·W)` columns.
pub fn im2col(x: ArrayView3<f64>, k: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let mut cols = Array2::<f64>::zeros((c * k * k, h * w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let mut row = cols.row_mut((ci * k + ky) * k + kx);
                let row = row.as_slice_mut().expect("standard layout");
                for y in 0..h {
                    let sy = (y as isize + ky as isize - pad).rem_euclid(h as isize) as usize;
                    for xx in 0..w {
                        let sx = (xx as isize + kx as isize - pad).rem_euclid(w as isize) as usize;
                        row[y * w + xx] = x[[ci, sy, sx]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back with periodic wrap.
pub fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, k: usize) -> ndarray::Array3<f64> {
    let pad = (k / 2) as isize;
    let mut x = ndarray::Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ci * k + ky) * k + kx);
                for y in 0..h {
                    let sy = (y as isize + ky as isize - pad).rem_euclid(h as isize) as usize;
                    for xx in 0..w {
                        let sx = (xx as isize + kx as isize - pad).rem_euclid(w as isize) as usize;
                        x[[ci, sy, sx]] += row[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

impl Conv2d {
    /// Weights and biases uniform in `±1/√(c_in·k²)`.
    pub fn new<R: Rng>(c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weight = ArrayD::from_shape_fn(IxDyn(&[c_out, c_in, k, k]), |_| rng.gen_range(-bound..bound));
        let bias = ArrayD::from_shape_fn(IxDyn(&[c_out]), |_| rng.gen_range(-bound..bound));
        Conv2d {
            weight: Param::new(weight),
            bias: Param::new(bias),
            c_in,
            c_out,
            k,
            cache: None,
        }
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, f64> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.c_out, self.c_in * self.k * self.k))
            .expect("contiguous weights")
    }

    fn apply(&self, x: ArrayView4<f64>, keep: bool) -> (Array4<f64>, Vec<Array2<f64>>) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.c_in, "conv input channels");
        let wm = self.weight_matrix();
        let mut y = Array4::<f64>::zeros((b, self.c_out, h, w));
        let mut caches = Vec::with_capacity(if keep { b } else { 0 });
        for bi in 0..b {
            let cols = im2col(x.index_axis(Axis(0), bi), self.k);
            let mut out = wm.dot(&cols);
            for (mut row, &bias) in out.rows_mut().into_iter().zip(self.bias.value.iter()) {
                row.mapv_inplace(|v| v + bias);
            }
            y.slice_mut(s![bi, .., .., ..])
                .assign(&out.into_shape_with_order((self.c_out, h, w)).expect("contiguous"));
            if keep {
                caches.push(cols);
            }
        }
        (y, caches)
    }

    pub fn forward(&mut self, x: ArrayView4<f64>) -> Array4<f64> {
        let (y, cols) = self.apply(x, true);
        self.cache = Some(cols);
        y
    }

    pub fn infer(&self, x: ArrayView4<f64>) -> Array4<f64> {
        self.apply(x, false).0
    }

    pub fn backward(&mut self, dy: ArrayView4<f64>) -> Array4<f64> {
        let cols = self.cache.take().expect("Conv2d::backward without forward");
        let (b, _, h, w) = dy.dim();
        let kk = self.c_in * self.k * self.k;
        let mut dw = Array2::<f64>::zeros((self.c_out, kk));
        let mut dx = Array4::<f64>::zeros((b, self.c_in, h, w));
        let wm = self.weight_matrix().to_owned();
        for (bi, col) in cols.iter().enumerate() {
            let g = dy
                .index_axis(Axis(0), bi)
                .to_owned()
                .into_shape_with_order((self.c_out, h * w))
                .expect("contiguous");
            dw += &g.dot(&col.t());
            for (db, row) in self.bias.grad.iter_mut().zip(g.rows()) {
                *db += row.sum();
            }
            let dcols = wm.t().dot(&g);
            dx.slice_mut(s![bi, .., .., ..])
                .assign(&col2im(&dcols, self.c_in, h, w, self.k));
        }
        self.weight.grad += &dw.into_shape_with_order(self.weight.value.raw_dim()).expect("same size");
        dx
    }
}

/// Per-channel batch normalization over `(B, H, W)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    /// Unbiased running variance.
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ArrayD::ones(IxDyn(&[c]))),
            beta: Param::new(ArrayD::zeros(IxDyn(&[c]))),
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn normalize(&self, x: ArrayView4<f64>, mean: &Array1<f64>, inv_std: &Array1<f64>) -> (Array4<f64>, Array4<f64>) {
        let mut xhat = x.to_owned();
        for (c, mut plane) in xhat.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (mean[c], inv_std[c]);
            plane.mapv_inplace(|v| (v - m) * s);
        }
        let mut y = xhat.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            plane.mapv_inplace(|v| g * v + b);
        }
        (xhat, y)
    }

    fn batch_stats(x: ArrayView4<f64>) -> (Array1<f64>, Array1<f64>, usize) {
        let c = x.dim().1;
        let count = x.len() / c;
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for (ci, plane) in x.axis_iter(Axis(1)).enumerate() {
            let m = plane.sum() / count as f64;
            mean[ci] = m;
            var[ci] = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / count as f64;
        }
        (mean, var, count)
    }

    /// Train mode uses batch statistics and updates the running ones; eval
    /// mode uses the running statistics only.
    pub fn forward(&mut self, x: ArrayView4<f64>, train: bool) -> Array4<f64> {
        let (mean, var) = if train {
            let (mean, var, count) = Self::batch_stats(x);
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let m = self.momentum;
            Zip::from(&mut self.running_mean)
                .and(&mean)
                .for_each(|r, &v| *r = (1.0 - m) * *r + m * v);
            Zip::from(&mut self.running_var)
                .and(&var)
                .for_each(|r, &v| *r = (1.0 - m) * *r + m * v * unbias);
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let (xhat, y) = self.normalize(x, &mean, &inv_std);
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            batch_stats: train,
        });
        y
    }

    pub fn infer(&self, x: ArrayView4<f64>) -> Array4<f64> {
        let inv_std = self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        self.normalize(x, &self.running_mean, &inv_std).1
    }

    pub fn backward(&mut self, dy: ArrayView4<f64>) -> Array4<f64> {
        let cache = self.cache.take().expect("BatchNorm2d::backward without forward");
        let c = dy.dim().1;
        let count = (dy.len() / c) as f64;
        let mut dx = Array4::<f64>::zeros(dy.raw_dim());
        for ci in 0..c {
            let g = dy.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let sum_g = g.sum();
            let sum_gx = Zip::from(&g).and(&xh).fold(0.0, |acc, &a, &b| acc + a * b);
            self.gamma.grad[ci] += sum_gx;
            self.beta.grad[ci] += sum_g;
            let scale = self.gamma.value[ci] * cache.inv_std[ci];
            let mut out = dx.index_axis_mut(Axis(1), ci);
            if cache.batch_stats {
                Zip::from(&mut out).and(&g).and(&xh).for_each(|d, &gv, &xv| {
                    *d = scale * (gv - sum_g / count - xv * sum_gx / count);
                });
            } else {
                Zip::from(&mut out).and(&g).for_each(|d, &gv| *d = scale * gv);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Clone, Debug, Default)]
pub struct Gelu {
    cache: Option<Array4<f64>>,
}

impl Gelu {
    pub fn new() -> Self {
        Gelu { cache: None }
    }

    pub fn forward(&mut self, x: ArrayView4<f64>) -> Array4<f64> {
        self.cache = Some(x.to_owned());
        x.mapv(gelu)
    }

    pub fn infer(&self, x: ArrayView4<f64>) -> Array4<f64> {
        x.mapv(gelu)
    }

    pub fn backward(&mut self, dy: ArrayView4<f64>) -> Array4<f64> {
        let x = self.cache.take().expect("Gelu::backward without forward");
        Zip::from(&dy).and(&x).map_collect(|&g, &v| g * gelu_derivative(v))
    }
}
