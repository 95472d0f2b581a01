//! Fourier–Poisson transport-of-intensity baseline.
//!
//! Each diffraction channel is treated as an image over scan coordinates.
//! With the channel intensity approximated by its scan mean `ī₀`, the
//! continuity equation reduces to a Poisson problem
//!
//! ```text
//! ∇²φ = -(2π/λ) · ∂I/∂z / ī₀
//! ```
//!
//! solved spectrally on the periodic scan grid.

use std::f64::consts::PI;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Spectral;
use crate::microscope::{FourDDataset, ScanGrid};
use crate::recon::{self, Method, ReconResult, TailOptions};

/// Channels whose mean intensity falls below this are dark.
pub const DARK_CHANNEL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieVariant {
    /// Constant-intensity approximation: one Poisson solve per channel.
    #[default]
    Poisson,
    /// Teague's form `∇·(I∇φ) = -(2π/λ)∂I/∂z` via two Poisson solves.
    Teague,
}

impl FromStr for TieVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" => Ok(TieVariant::Poisson),
            "teague" => Ok(TieVariant::Teague),
            other => Err(Error::InvalidParameter(format!(
                "unknown TIE variant {other:?} (expected poisson or teague)"
            ))),
        }
    }
}

/// Per-channel phases together with the indices of dark channels.
#[derive(Clone, Debug, PartialEq)]
pub struct TiePhase {
    pub phase: Array3<f64>,
    pub dark_channels: Vec<usize>,
}

fn check_stacks(i_zero: &Array3<f64>, i_deriv: &Array3<f64>, scan: &ScanGrid) -> Result<()> {
    if i_zero.shape() != i_deriv.shape() {
        return Err(Error::shape("tie_phase i_deriv", i_zero.shape(), i_deriv.shape()));
    }
    let (_, sy, sx) = i_zero.dim();
    if (sy, sx) != (scan.sy, scan.sx) {
        return Err(Error::shape("tie_phase scan", &[scan.sy, scan.sx], &[sy, sx]));
    }
    Ok(())
}

/// Solves the constant-intensity TIE independently for every channel.
pub fn tie_phase(
    i_zero: &Array3<f64>,
    i_deriv: &Array3<f64>,
    lambda: f64,
    scan: &ScanGrid,
    eps: f64,
) -> Result<TiePhase> {
    tie_phase_with(i_zero, i_deriv, lambda, scan, eps, TieVariant::Poisson)
}

/// [`tie_phase`] with an explicit solver variant.
pub fn tie_phase_with(
    i_zero: &Array3<f64>,
    i_deriv: &Array3<f64>,
    lambda: f64,
    scan: &ScanGrid,
    eps: f64,
    variant: TieVariant,
) -> Result<TiePhase> {
    check_stacks(i_zero, i_deriv, scan)?;
    if !(eps >= 0.0) {
        return Err(Error::InvalidParameter(format!("Tikhonov eps must be >= 0, got {eps}")));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("wavelength must be > 0, got {lambda}")));
    }
    let spectral = Spectral::new(scan.grid());
    let k = 2.0 * PI / lambda;
    let mut phase = Array3::<f64>::zeros(i_zero.dim());
    let mut dark_channels = Vec::new();
    for c in 0..i_zero.dim().0 {
        let i0 = i_zero.slice(s![c, .., ..]);
        let di = i_deriv.slice(s![c, .., ..]);
        let mean = i0.mean().unwrap_or(0.0);
        if !(mean >= DARK_CHANNEL) {
            dark_channels.push(c);
            continue;
        }
        let rhs = di.mapv(|v| -k * v);
        let phi = match variant {
            TieVariant::Poisson => spectral.poisson(rhs.mapv(|v| v / mean).view(), eps),
            TieVariant::Teague => {
                // ∇ψ = I∇φ, so ∇φ = ∇ψ / I; pixels far below the channel
                // mean are clamped to keep the division bounded.
                let psi = spectral.poisson(rhs.view(), eps);
                let (gx, gy) = spectral.gradient(psi.view());
                let floor = 1e-3 * mean;
                let inv = i0.mapv(|v| 1.0 / v.max(floor));
                spectral.integrate((&gx * &inv).view(), (&gy * &inv).view())
            }
        };
        let m = phi.mean().unwrap_or(0.0);
        Zip::from(phase.slice_mut(s![c, .., ..]))
            .and(&phi)
            .for_each(|d, &v| *d = v - m);
    }
    Ok(TiePhase { phase, dark_channels })
}

/// Full TIE reconstruction: per-channel phases followed by the shared tail.
pub fn tie_reconstruct(ds: &FourDDataset, eps: f64, variant: TieVariant) -> Result<ReconResult> {
    tie_reconstruct_with(ds, eps, variant, &TailOptions::default())
}

pub fn tie_reconstruct_with(
    ds: &FourDDataset,
    eps: f64,
    variant: TieVariant,
    tail: &TailOptions,
) -> Result<ReconResult> {
    ds.validate()?;
    let start = Instant::now();
    let i_deriv = ds.axial_derivative()?;
    let tp = tie_phase_with(&ds.i_zero, &i_deriv, ds.lambda, &ds.scan, eps, variant)?;
    let out = recon::inference_tail(ds, &tp.phase, tail)?;
    let wall_time = start.elapsed().as_secs_f64();
    let mut result = ReconResult::from_tail(Method::Tie, ds, out, tp.phase, wall_time, tail)?;
    result.dark_channels = tp.dark_channels.len();
    result.set_config("tie_eps", eps);
    result.set_config("tie_variant", variant);
    Ok(result)
}

/// Linear TIE operator applied to one channel image, exposed for tests.
pub fn tie_channel(i_deriv: &Array2<f64>, mean_intensity: f64, lambda: f64, scan: &ScanGrid, eps: f64) -> Array2<f64> {
    let spectral = Spectral::new(scan.grid());
    let k = 2.0 * PI / lambda;
    let rhs = i_deriv.mapv(|v| -k * v / mean_intensity);
    let phi = spectral.poisson(rhs.view(), eps);
    let m = phi.mean().unwrap_or(0.0);
    phi.mapv(|v| v - m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Grid2;

    fn scan16() -> ScanGrid {
        ScanGrid::new(&Grid2::square(16, 0.3).unwrap(), 16, 16).unwrap()
    }

    #[test]
    fn zero_derivative_gives_zero_phase() {
        let scan = scan16();
        let i0 = Array3::from_elem((3, 16, 16), 0.5);
        let di = Array3::zeros((3, 16, 16));
        let tp = tie_phase(&i0, &di, 0.02, &scan, 0.0).unwrap();
        assert!(tp.phase.iter().all(|v| *v == 0.0));
        assert!(tp.dark_channels.is_empty());
    }

    #[test]
    fn dark_channels_are_flagged_and_zeroed() {
        let scan = scan16();
        let mut i0 = Array3::from_elem((2, 16, 16), 0.5);
        i0.slice_mut(s![1, .., ..]).fill(0.0);
        let di = Array3::from_shape_fn((2, 16, 16), |(_, y, x)| ((x + 2 * y) as f64).sin());
        let tp = tie_phase(&i0, &di, 0.02, &scan, 0.0).unwrap();
        assert_eq!(tp.dark_channels, vec![1]);
        assert!(tp.phase.slice(s![1, .., ..]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let scan = scan16();
        let i0 = Array3::from_elem((2, 16, 16), 0.5);
        let di = Array3::zeros((2, 16, 8));
        assert!(tie_phase(&i0, &di, 0.02, &scan, 0.0).is_err());
        let di = Array3::zeros((2, 16, 16));
        assert!(tie_phase(&i0, &di, 0.02, &scan, -1.0).is_err());
        assert!("teague".parse::<TieVariant>().is_ok());
        assert!("bogus".parse::<TieVariant>().is_err());
    }
}
