//! The three training losses and their gradients with respect to the
//! predicted flow `(B, 2, C, H, W)`.
//!
//! Spatial axes are scan coordinates, described by a [`Grid2`] whose
//! pitches are the scan steps.

use std::f64::consts::PI;

use ndarray::{s, Array4, Array5, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid2, Spectral};

/// A scalar loss and its gradient with respect to the prediction.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array5<f64>,
}

/// Component weights of the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

/// Component values plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub vf: f64,
    pub cont: f64,
    pub phase: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted(vf: f64, cont: f64, phase: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            vf,
            cont,
            phase,
            total: w.alpha * vf + w.beta * cont + w.gamma * phase,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.vf.is_finite() && self.cont.is_finite() && self.phase.is_finite() && self.total.is_finite()
    }
}

fn flow_shape(v: &Array5<f64>, context: &str) -> Result<(usize, usize, usize, usize)> {
    let (b, two, c, h, w) = v.dim();
    if two != 2 {
        return Err(Error::shape(context, &[b, 2, c, h, w], v.shape()));
    }
    Ok((b, c, h, w))
}

fn check_scalar_stack(a: &Array4<f64>, dims: (usize, usize, usize, usize), context: &str) -> Result<()> {
    let (b, c, h, w) = dims;
    if a.dim() != dims {
        return Err(Error::shape(context, &[b, c, h, w], a.shape()));
    }
    Ok(())
}

fn check_scan(grid: &Grid2, h: usize, w: usize, context: &str) -> Result<()> {
    if (grid.ny, grid.nx) != (h, w) {
        return Err(Error::shape(context, &[grid.ny, grid.nx], &[h, w]));
    }
    Ok(())
}

/// Mean squared difference.
pub fn loss_vf(v_pred: &Array5<f64>, v_gt: &Array5<f64>) -> Result<LossGrad> {
    if v_pred.shape() != v_gt.shape() {
        return Err(Error::shape("loss_vf", v_gt.shape(), v_pred.shape()));
    }
    let n = v_pred.len() as f64;
    let diff = v_pred - v_gt;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.mapv(|d| 2.0 * d / n);
    Ok(LossGrad { value, grad })
}

/// Periodic central-difference divergence of `(fx, fy)` planes.
pub fn div_stencil(fx: ndarray::ArrayView2<f64>, fy: ndarray::ArrayView2<f64>, hx: f64, hy: f64) -> ndarray::Array2<f64> {
    let (h, w) = fx.dim();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        (fx[[y, (x + 1) % w]] - fx[[y, (x + w - 1) % w]]) / (2.0 * hx)
            + (fy[[(y + 1) % h, x]] - fy[[(y + h - 1) % h, x]]) / (2.0 * hy)
    })
}

/// Continuity residual `r = ∂I/∂z + (λ/2π)·div(I₀·v)`; loss `mean(r²)`.
pub fn loss_cont(
    i_deriv: &Array4<f64>,
    i_zero: &Array4<f64>,
    v_pred: &Array5<f64>,
    lambda: f64,
    scan: &Grid2,
) -> Result<LossGrad> {
    let dims = flow_shape(v_pred, "loss_cont v_pred")?;
    check_scalar_stack(i_deriv, dims, "loss_cont i_deriv")?;
    check_scalar_stack(i_zero, dims, "loss_cont i_zero")?;
    let (b, c, h, w) = dims;
    check_scan(scan, h, w, "loss_cont scan")?;
    let (hx, hy) = (scan.pitch_x, scan.pitch_y);
    let kappa = lambda / (2.0 * PI);
    let n = (b * c * h * w) as f64;
    let mut value = 0.0;
    let mut grad = Array5::<f64>::zeros(v_pred.raw_dim());
    for bi in 0..b {
        for ci in 0..c {
            let i0 = i_zero.slice(s![bi, ci, .., ..]);
            let fx = &i0 * &v_pred.slice(s![bi, 0, ci, .., ..]);
            let fy = &i0 * &v_pred.slice(s![bi, 1, ci, .., ..]);
            let div = div_stencil(fx.view(), fy.view(), hx, hy);
            let r = Zip::from(i_deriv.slice(s![bi, ci, .., ..]))
                .and(&div)
                .map_collect(|&d, &dv| d + kappa * dv);
            value += r.iter().map(|v| v * v).sum::<f64>();
            // The transpose of a central difference is its negative.
            for y in 0..h {
                for x in 0..w {
                    let gx = (r[[y, (x + w - 1) % w]] - r[[y, (x + 1) % w]]) / (2.0 * hx);
                    let gy = (r[[(y + h - 1) % h, x]] - r[[(y + 1) % h, x]]) / (2.0 * hy);
                    let scale = 2.0 / n * kappa * i0[[y, x]];
                    grad[[bi, 0, ci, y, x]] = scale * gx;
                    grad[[bi, 1, ci, y, x]] = scale * gy;
                }
            }
        }
    }
    Ok(LossGrad { value: value / n, grad })
}

/// `mean((integrate(v) − zero_mean(φ_gt))²)` per `(B, C)` slice.
pub fn loss_phase(v_pred: &Array5<f64>, phase_gt: &Array4<f64>, scan: &Grid2) -> Result<LossGrad> {
    let spectral = Spectral::new(*scan);
    loss_phase_with(v_pred, phase_gt, &spectral)
}

/// [`loss_phase`] reusing a spectral context for the scan grid.
pub fn loss_phase_with(v_pred: &Array5<f64>, phase_gt: &Array4<f64>, spectral: &Spectral) -> Result<LossGrad> {
    let dims = flow_shape(v_pred, "loss_phase v_pred")?;
    check_scalar_stack(phase_gt, dims, "loss_phase phase_gt")?;
    let (b, c, h, w) = dims;
    check_scan(spectral.grid(), h, w, "loss_phase scan")?;
    let n = (b * c * h * w) as f64;
    let mut value = 0.0;
    let mut grad = Array5::<f64>::zeros(v_pred.raw_dim());
    for bi in 0..b {
        for ci in 0..c {
            let phi = spectral.integrate(v_pred.slice(s![bi, 0, ci, .., ..]), v_pred.slice(s![bi, 1, ci, .., ..]));
            let gt = phase_gt.slice(s![bi, ci, .., ..]);
            let gt_mean = gt.mean().unwrap_or(0.0);
            let diff = Zip::from(&phi).and(&gt).map_collect(|&p, &g| p - (g - gt_mean));
            value += diff.iter().map(|d| d * d).sum::<f64>();
            let dphi = diff.mapv(|d| 2.0 * d / n);
            let (gx, gy) = spectral.integrate_adjoint(dphi.view());
            grad.slice_mut(s![bi, 0, ci, .., ..]).assign(&gx);
            grad.slice_mut(s![bi, 1, ci, .., ..]).assign(&gy);
        }
    }
    Ok(LossGrad { value: value / n, grad })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vf_unit_offset() {
        let a = Array5::from_elem((1, 2, 3, 4, 4), 0.7);
        let b = &a + 1.0;
        assert_eq!(loss_vf(&a, &a).unwrap().value, 0.0);
        assert!((loss_vf(&b, &a).unwrap().value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cont_with_zero_flow_is_mean_square_derivative() {
        let grid = Grid2::square(6, 0.4).unwrap();
        let di = Array4::from_shape_fn((1, 2, 6, 6), |(_, c, y, x)| (c as f64 + 1.0) * ((x * y) as f64).cos());
        let i0 = Array4::from_elem((1, 2, 6, 6), 0.3);
        let v = Array5::zeros((1, 2, 2, 6, 6));
        let l = loss_cont(&di, &i0, &v, 0.02, &grid).unwrap();
        let expected = di.iter().map(|d| d * d).sum::<f64>() / di.len() as f64;
        assert!((l.value - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let grid = Grid2::square(4, 1.0).unwrap();
        let v = Array5::zeros((1, 2, 2, 4, 4));
        let bad = Array4::zeros((1, 3, 4, 4));
        assert!(loss_phase(&v, &bad, &grid).is_err());
        assert!(loss_cont(&bad, &bad, &v, 0.02, &grid).is_err());
        assert!(loss_vf(&v, &Array5::zeros((1, 2, 2, 4, 5))).is_err());
    }
}
