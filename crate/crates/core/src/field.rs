//! Complex and real fields on periodic 2D grids, and the spectral operators
//! every other module is built on.
//!
//! Conventions, fixed once for the whole crate:
//!
//! * arrays are indexed `[y, x]` (row-major, `x` fastest);
//! * the forward transform uses the kernel `exp(-i 2π q·r)` and both
//!   directions carry a `1/sqrt(nx·ny)` factor, so the transform is unitary;
//! * frequencies follow DFT ordering, `k/(n·pitch)` for `k < n/2` and
//!   `(k-n)/(n·pitch)` otherwise, in 1/Å;
//! * free-space propagation multiplies the spectrum by `exp(-iπλ|q|²dz)`.
//!
//! First-derivative multipliers are zeroed on the Nyquist row/column of even
//! grids, where `i2πq` has no Hermitian partner. This keeps gradient and
//! divergence real and exactly skew-adjoint. The Laplacian keeps its Nyquist
//! entries, so `divergence(gradient(φ)) == laplacian(φ)` only for fields
//! without Nyquist content.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Zip};
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// A periodic 2D sampling grid. Pitches are in Å.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2 {
    pub nx: usize,
    pub ny: usize,
    pub pitch_x: f64,
    pub pitch_y: f64,
}

impl Grid2 {
    pub fn new(nx: usize, ny: usize, pitch_x: f64, pitch_y: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid must be at least 2x2, got {ny}x{nx}"
            )));
        }
        if !(pitch_x > 0.0 && pitch_y > 0.0 && pitch_x.is_finite() && pitch_y.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "grid pitch must be positive, got ({pitch_x}, {pitch_y})"
            )));
        }
        Ok(Grid2 {
            nx,
            ny,
            pitch_x,
            pitch_y,
        })
    }

    pub fn square(n: usize, pitch: f64) -> Result<Self> {
        Self::new(n, n, pitch, pitch)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Array shape `(ny, nx)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.ny, self.nx)
    }

    pub fn extent_x(&self) -> f64 {
        self.nx as f64 * self.pitch_x
    }

    pub fn extent_y(&self) -> f64 {
        self.ny as f64 * self.pitch_y
    }

    pub fn pixel_area(&self) -> f64 {
        self.pitch_x * self.pitch_y
    }

    pub fn freqs_x(&self) -> Vec<f64> {
        fft_freqs(self.nx, self.pitch_x)
    }

    pub fn freqs_y(&self) -> Vec<f64> {
        fft_freqs(self.ny, self.pitch_y)
    }

    /// `|q|²` on the spectral grid, `[y, x]`.
    pub fn q2(&self) -> Array2<f64> {
        let qx = self.freqs_x();
        let qy = self.freqs_y();
        Array2::from_shape_fn(self.shape(), |(iy, ix)| qx[ix] * qx[ix] + qy[iy] * qy[iy])
    }

    pub(crate) fn check_shape(&self, shape: &[usize], context: &'static str) -> Result<()> {
        if shape != [self.ny, self.nx] {
            return Err(Error::shape(context, &[self.ny, self.nx], shape));
        }
        Ok(())
    }
}

/// DFT sample frequencies in cycles per unit length.
pub fn fft_freqs(n: usize, pitch: f64) -> Vec<f64> {
    let extent = n as f64 * pitch;
    (0..n)
        .map(|k| {
            if 2 * k < n {
                k as f64 / extent
            } else {
                (k as f64 - n as f64) / extent
            }
        })
        .collect()
}

/// Frequencies for first-derivative multipliers: as [`fft_freqs`] with the
/// Nyquist entry of an even axis set to zero.
fn derivative_freqs(n: usize, pitch: f64) -> Vec<f64> {
    let mut q = fft_freqs(n, pitch);
    if n % 2 == 0 {
        q[n / 2] = 0.0;
    }
    q
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    pub grid: Grid2,
    pub values: Array2<C64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: Grid2,
    pub values: Array2<f64>,
}

/// Two real components sharing one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField2 {
    pub grid: Grid2,
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

impl ComplexField {
    pub fn new(grid: Grid2, values: Array2<C64>) -> Result<Self> {
        grid.check_shape(values.shape(), "complex field")?;
        Ok(ComplexField { grid, values })
    }

    pub fn zeros(grid: Grid2) -> Self {
        ComplexField {
            grid,
            values: Array2::zeros(grid.shape()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// `Σ|ψ|²` over pixels.
    pub fn power(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn intensity(&self) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: self.values.mapv(|v| v.norm_sqr()),
        }
    }
}

impl ScalarField {
    pub fn new(grid: Grid2, values: Array2<f64>) -> Result<Self> {
        grid.check_shape(values.shape(), "scalar field")?;
        Ok(ScalarField { grid, values })
    }

    pub fn zeros(grid: Grid2) -> Self {
        ScalarField {
            grid,
            values: Array2::zeros(grid.shape()),
        }
    }

    pub fn from_fn(grid: Grid2, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = Array2::from_shape_fn(grid.shape(), |(iy, ix)| {
            f(ix as f64 * grid.pitch_x, iy as f64 * grid.pitch_y)
        });
        ScalarField { grid, values }
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn zero_mean(mut self) -> Self {
        let m = self.mean();
        self.values.mapv_inplace(|v| v - m);
        self
    }
}

impl VectorField2 {
    pub fn new(grid: Grid2, x: Array2<f64>, y: Array2<f64>) -> Result<Self> {
        grid.check_shape(x.shape(), "vector field x component")?;
        grid.check_shape(y.shape(), "vector field y component")?;
        Ok(VectorField2 { grid, x, y })
    }

    pub fn zeros(grid: Grid2) -> Self {
        VectorField2 {
            grid,
            x: Array2::zeros(grid.shape()),
            y: Array2::zeros(grid.shape()),
        }
    }

    /// `Σ (x·x' + y·y')`.
    pub fn dot(&self, other: &VectorField2) -> f64 {
        let dx: f64 = Zip::from(&self.x).and(&other.x).fold(0.0, |acc, a, b| acc + a * b);
        let dy: f64 = Zip::from(&self.y).and(&other.y).fold(0.0, |acc, a, b| acc + a * b);
        dx + dy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Planned unitary 2D FFT for one array shape.
#[derive(Clone)]
pub struct Fft2 {
    ny: usize,
    nx: usize,
    fwd_x: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("ny", &self.ny)
            .field("nx", &self.nx)
            .finish()
    }
}

impl Fft2 {
    pub fn new(ny: usize, nx: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            ny,
            nx,
            fwd_x: planner.plan_fft_forward(nx),
            inv_x: planner.plan_fft_inverse(nx),
            fwd_y: planner.plan_fft_forward(ny),
            inv_y: planner.plan_fft_inverse(ny),
            scale: 1.0 / ((nx * ny) as f64).sqrt(),
        }
    }

    pub fn for_grid(grid: &Grid2) -> Self {
        Self::new(grid.ny, grid.nx)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.ny, self.nx)
    }

    /// Transforms a row-major `ny × nx` buffer in place.
    pub fn process_slice(&self, data: &mut [C64], dir: Direction) {
        assert_eq!(data.len(), self.ny * self.nx, "fft buffer length");
        let (row_plan, col_plan) = match dir {
            Direction::Forward => (&self.fwd_x, &self.fwd_y),
            Direction::Inverse => (&self.inv_x, &self.inv_y),
        };
        row_plan.process(data);
        let mut col = vec![C64::new(0.0, 0.0); self.ny];
        for ix in 0..self.nx {
            for iy in 0..self.ny {
                col[iy] = data[iy * self.nx + ix];
            }
            col_plan.process(&mut col);
            for iy in 0..self.ny {
                data[iy * self.nx + ix] = col[iy] * self.scale;
            }
        }
    }

    pub fn process(&self, data: &mut Array2<C64>, dir: Direction) {
        assert_eq!(data.dim(), (self.ny, self.nx), "fft array shape");
        if let Some(slice) = data.as_slice_mut() {
            self.process_slice(slice, dir);
        } else {
            let mut owned: Vec<C64> = data.iter().copied().collect();
            self.process_slice(&mut owned, dir);
            data.iter_mut().zip(owned).for_each(|(d, v)| *d = v);
        }
    }

    pub fn forward(&self, data: &mut Array2<C64>) {
        self.process(data, Direction::Forward)
    }

    pub fn inverse(&self, data: &mut Array2<C64>) {
        self.process(data, Direction::Inverse)
    }

    pub fn forward_real(&self, data: ArrayView2<f64>) -> Array2<C64> {
        let mut out = data.mapv(|v| C64::new(v, 0.0));
        self.forward(&mut out);
        out
    }
}

/// Unitary 2D FFT of a field.
pub fn fft2(field: &ComplexField, dir: Direction) -> Result<ComplexField> {
    if !field.is_finite() {
        return Err(Error::NonFinite("fft2 input"));
    }
    let mut out = field.clone();
    Fft2::for_grid(&field.grid).process(&mut out.values, dir);
    Ok(out)
}

/// Reusable spectral derivative context for one grid.
#[derive(Clone, Debug)]
pub struct Spectral {
    grid: Grid2,
    fft: Fft2,
    dqx: Vec<f64>,
    dqy: Vec<f64>,
    q2: Array2<f64>,
}

impl Spectral {
    pub fn new(grid: Grid2) -> Self {
        Spectral {
            grid,
            fft: Fft2::for_grid(&grid),
            dqx: derivative_freqs(grid.nx, grid.pitch_x),
            dqy: derivative_freqs(grid.ny, grid.pitch_y),
            q2: grid.q2(),
        }
    }

    pub fn grid(&self) -> &Grid2 {
        &self.grid
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    fn real_inverse(&self, mut spec: Array2<C64>) -> Array2<f64> {
        self.fft.inverse(&mut spec);
        spec.mapv(|v| v.re)
    }

    /// `(∂φ/∂x, ∂φ/∂y)` by spectral multiplication with `i2πq`.
    pub fn gradient(&self, phi: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let spec = self.fft.forward_real(phi);
        let two_pi_i = C64::new(0.0, 2.0 * PI);
        let gx = Array2::from_shape_fn(spec.dim(), |(iy, ix)| spec[[iy, ix]] * two_pi_i * self.dqx[ix]);
        let gy = Array2::from_shape_fn(spec.dim(), |(iy, ix)| spec[[iy, ix]] * two_pi_i * self.dqy[iy]);
        (self.real_inverse(gx), self.real_inverse(gy))
    }

    pub fn divergence(&self, vx: ArrayView2<f64>, vy: ArrayView2<f64>) -> Array2<f64> {
        let sx = self.fft.forward_real(vx);
        let sy = self.fft.forward_real(vy);
        let two_pi_i = C64::new(0.0, 2.0 * PI);
        let div = Array2::from_shape_fn(sx.dim(), |(iy, ix)| {
            two_pi_i * (sx[[iy, ix]] * self.dqx[ix] + sy[[iy, ix]] * self.dqy[iy])
        });
        self.real_inverse(div)
    }

    pub fn laplacian(&self, phi: ArrayView2<f64>) -> Array2<f64> {
        let mut spec = self.fft.forward_real(phi);
        Zip::from(&mut spec)
            .and(&self.q2)
            .for_each(|s, &q2| *s *= -4.0 * PI * PI * q2);
        self.real_inverse(spec)
    }

    /// Solves `∇²φ - εφ = rhs` spectrally with the DC mode nulled.
    pub fn poisson(&self, rhs: ArrayView2<f64>, tikhonov_eps: f64) -> Array2<f64> {
        let mut spec = self.fft.forward_real(rhs);
        Zip::from(&mut spec).and(&self.q2).for_each(|s, &q2| {
            let denom = -4.0 * PI * PI * q2 - tikhonov_eps;
            *s = if q2 == 0.0 { C64::new(0.0, 0.0) } else { *s / denom };
        });
        self.real_inverse(spec)
    }

    /// Pseudo-inverse of `divergence ∘ gradient`: divides by
    /// `-4π²(q̃x² + q̃y²)` with the Nyquist-zeroed derivative frequencies and
    /// nulls every mode the gradient annihilates.
    fn pinv_div_grad(&self, rhs: ArrayView2<f64>) -> Array2<f64> {
        let mut spec = self.fft.forward_real(rhs);
        for ((iy, ix), s) in spec.indexed_iter_mut() {
            let symbol = -4.0 * PI * PI * (self.dqx[ix] * self.dqx[ix] + self.dqy[iy] * self.dqy[iy]);
            *s = if symbol == 0.0 { C64::new(0.0, 0.0) } else { *s / symbol };
        }
        self.real_inverse(spec)
    }

    /// Least-squares integral of a vector field: the zero-mean `φ`
    /// minimizing `‖∇φ - v‖²`.
    pub fn integrate(&self, vx: ArrayView2<f64>, vy: ArrayView2<f64>) -> Array2<f64> {
        let div = self.divergence(vx, vy);
        self.pinv_div_grad(div.view())
    }

    /// Adjoint of [`Spectral::integrate`].
    pub fn integrate_adjoint(&self, g: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let p = self.pinv_div_grad(g);
        let (gx, gy) = self.gradient(p.view());
        (gx.mapv(|v| -v), gy.mapv(|v| -v))
    }
}

fn check_finite_scalar(f: &ScalarField, what: &'static str) -> Result<()> {
    if f.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub fn spectral_gradient(phi: &ScalarField) -> Result<VectorField2> {
    check_finite_scalar(phi, "spectral_gradient input")?;
    let (x, y) = Spectral::new(phi.grid).gradient(phi.values.view());
    Ok(VectorField2 { grid: phi.grid, x, y })
}

pub fn spectral_divergence(v: &VectorField2) -> Result<ScalarField> {
    v.grid.check_shape(v.x.shape(), "divergence x component")?;
    v.grid.check_shape(v.y.shape(), "divergence y component")?;
    if !v.x.iter().chain(v.y.iter()).all(|a| a.is_finite()) {
        return Err(Error::NonFinite("spectral_divergence input"));
    }
    let values = Spectral::new(v.grid).divergence(v.x.view(), v.y.view());
    Ok(ScalarField { grid: v.grid, values })
}

pub fn spectral_laplacian(phi: &ScalarField) -> Result<ScalarField> {
    check_finite_scalar(phi, "spectral_laplacian input")?;
    let values = Spectral::new(phi.grid).laplacian(phi.values.view());
    Ok(ScalarField { grid: phi.grid, values })
}

/// Inverts the spectral Laplacian (optionally Tikhonov-shifted by `ε`).
/// The result has zero mean: the DC mode is always nulled.
pub fn poisson_solve(rhs: &ScalarField, tikhonov_eps: f64) -> Result<ScalarField> {
    check_finite_scalar(rhs, "poisson_solve input")?;
    if !(tikhonov_eps >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "tikhonov eps must be >= 0, got {tikhonov_eps}"
        )));
    }
    let values = Spectral::new(rhs.grid).poisson(rhs.values.view(), tikhonov_eps);
    Ok(ScalarField { grid: rhs.grid, values })
}

/// Precomputed Fresnel transfer function `exp(-iπλ|q|²dz)` for one grid.
#[derive(Clone, Debug)]
pub struct Propagator {
    fft: Fft2,
    kernel: Array2<C64>,
}

impl Propagator {
    pub fn new(grid: &Grid2, dz: f64, lambda: f64) -> Self {
        let kernel = grid
            .q2()
            .mapv(|q2| C64::from_polar(1.0, -PI * lambda * q2 * dz));
        Propagator {
            fft: Fft2::for_grid(grid),
            kernel,
        }
    }

    pub fn kernel(&self) -> &Array2<C64> {
        &self.kernel
    }

    pub fn apply(&self, wave: &mut Array2<C64>) {
        self.fft.forward(wave);
        Zip::from(&mut *wave).and(&self.kernel).for_each(|w, &h| *w *= h);
        self.fft.inverse(wave);
    }
}

pub fn fresnel_propagate(wave: &ComplexField, dz: f64, lambda: f64) -> Result<ComplexField> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("wavelength must be > 0, got {lambda}")));
    }
    if !dz.is_finite() {
        return Err(Error::NonFinite("propagation distance"));
    }
    if !wave.is_finite() {
        return Err(Error::NonFinite("fresnel_propagate input"));
    }
    let mut out = wave.clone();
    if dz != 0.0 {
        Propagator::new(&wave.grid, dz, lambda).apply(&mut out.values);
    }
    Ok(out)
}

/// Periodic roll: `out[y, x] = a[y - sy, x - sx]` (indices wrap).
pub fn roll<T: Clone>(a: ArrayView2<T>, sy: isize, sx: isize) -> Array2<T> {
    let (ny, nx) = a.dim();
    Array2::from_shape_fn((ny, nx), |(iy, ix)| {
        let y = (iy as isize - sy).rem_euclid(ny as isize) as usize;
        let x = (ix as isize - sx).rem_euclid(nx as isize) as usize;
        a[[y, x]].clone()
    })
}
