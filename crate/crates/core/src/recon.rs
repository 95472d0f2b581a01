//! Shared reconstruction tail, the gradient-descent baseline and metrics.
//!
//! Every method ends in the same three steps. Per-channel phases are turned
//! into exit-wave spectra `√I₀·e^{iφ}`, moved from the probe frame back to the
//! lab frame, and combined with the known probe into a matrix potential
//!
//! ```text
//! A_pred = F⁻¹E·Pᴴ · diag(1 / (d + ridge)),   d_r = Σ_s |P(r, s)|²
//! ```
//!
//! whose diagonal phase, sampled at the scan positions, is the projected
//! phase. For a single pure-phase slice `F⁻¹E = diag(O)·P`, so the diagonal of
//! `F⁻¹E·Pᴴ` is exactly `O_r·d_r`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, Array3, Array4, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::container::{self, Bundle, Tensor};
use crate::error::{Error, Result};
use crate::field::{Direction, Grid2, Spectral, C64};
use crate::microscope::{carrier_phase, check_dense, fft_columns, probe_matrix, stack_to_matrix, FourDDataset, ScanGrid};
use crate::nn::FlowModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "TIE")]
    Tie,
    #[serde(rename = "FlowTIE")]
    FlowTie,
    #[serde(rename = "GD")]
    Gd,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Tie, Method::FlowTie, Method::Gd];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tie => "TIE",
            Method::FlowTie => "FlowTIE",
            Method::Gd => "GD",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tie" => Ok(Method::Tie),
            "flowtie" => Ok(Method::FlowTie),
            "gd" => Ok(Method::Gd),
            other => Err(Error::InvalidParameter(format!(
                "unknown method {other:?} (expected tie, flowtie or gd)"
            ))),
        }
    }
}

/// Options of the shared tail.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TailOptions {
    /// Absolute ridge added to the probe footprint; `None` uses
    /// `1e-6 · max(d)`.
    pub ridge: Option<f64>,
    /// Keep the dense matrix potential in the result.
    pub keep_matrix: bool,
}

/// Output of [`inference_tail`].
#[derive(Clone, Debug)]
pub struct TailOutput {
    pub a_pred: Array2<C64>,
    pub phase_proj: Array2<f64>,
    pub flagged_pixels: usize,
    pub off_diagonal: f64,
}

#[derive(Clone, Debug)]
pub struct ReconResult {
    pub method: Method,
    /// Zero-mean projected phase on the scan grid (rad).
    pub phase_proj: Array2<f64>,
    pub matrix_potential: Option<Array2<C64>>,
    pub phase_stack: Option<Array3<f64>>,
    /// Gauge-aligned MSE against the dataset's projected phase.
    pub mse: f64,
    /// Wall-clock seconds for the full pipeline.
    pub wall_time: f64,
    /// Fraction of `‖A_pred‖²_F` off the diagonal.
    pub off_diagonal: f64,
    pub dark_channels: usize,
    pub flagged_pixels: usize,
    /// Objective per iteration (gradient descent only).
    pub objective: Vec<f64>,
    pub config: BTreeMap<String, Value>,
}

impl ReconResult {
    pub(crate) fn from_tail(
        method: Method,
        ds: &FourDDataset,
        out: TailOutput,
        phase_stack: Array3<f64>,
        wall_time: f64,
        tail: &TailOptions,
    ) -> Result<Self> {
        let mse = phase_mse(&out.phase_proj, &ds.proj_phase_gt)?;
        let mut config = BTreeMap::new();
        config.insert("structure".to_string(), Value::from(ds.structure.clone()));
        config.insert("thickness".to_string(), Value::from(ds.thickness));
        if let Some(r) = tail.ridge {
            config.insert("ridge".to_string(), Value::from(r));
        }
        Ok(ReconResult {
            method,
            phase_proj: out.phase_proj,
            matrix_potential: tail.keep_matrix.then_some(out.a_pred),
            phase_stack: Some(phase_stack),
            mse,
            wall_time: wall_time.max(f64::MIN_POSITIVE),
            off_diagonal: out.off_diagonal,
            dark_channels: 0,
            flagged_pixels: out.flagged_pixels,
            objective: Vec::new(),
            config,
        })
    }

    pub fn set_config(&mut self, key: &str, value: impl Serialize) {
        self.config
            .insert(key.to_string(), serde_json::to_value(value).expect("serializable config"));
    }

    /// Writes the result as a bundle; the phase stack and matrix are
    /// included only when present.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut b = Bundle::create(dir, "recon-result")?;
        b.put_f64("phase_proj", &self.phase_proj)?;
        if let Some(stack) = &self.phase_stack {
            b.put_f64("phase_stack", stack)?;
        }
        if let Some(a) = &self.matrix_potential {
            b.put("matrix_potential", &Tensor::C128(a.clone().into_dyn()))?;
        }
        b.set_meta("method", self.method);
        b.set_meta("mse", self.mse);
        b.set_meta("wall_time", self.wall_time);
        b.set_meta("off_diagonal", self.off_diagonal);
        b.set_meta("dark_channels", self.dark_channels);
        b.set_meta("flagged_pixels", self.flagged_pixels);
        b.set_meta("objective", &self.objective);
        b.set_meta("config", &self.config);
        b.finish()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let b = Bundle::open(dir)?;
        let phase_proj = container::as_array2(b.get_f64("phase_proj")?, "phase_proj")?;
        let phase_stack = if b.has("phase_stack") {
            Some(container::as_array3(b.get_f64("phase_stack")?, "phase_stack")?)
        } else {
            None
        };
        let matrix_potential = if b.has("matrix_potential") {
            let a = b.get("matrix_potential")?.into_c128()?;
            let shape = a.shape().to_vec();
            Some(
                a.into_dimensionality()
                    .map_err(|_| Error::shape("matrix_potential", &[0, 0], &shape))?,
            )
        } else {
            None
        };
        Ok(ReconResult {
            method: b.meta("method")?,
            phase_proj,
            matrix_potential,
            phase_stack,
            mse: b.meta("mse")?,
            wall_time: b.meta("wall_time")?,
            off_diagonal: b.meta("off_diagonal")?,
            dark_channels: b.meta("dark_channels")?,
            flagged_pixels: b.meta("flagged_pixels")?,
            objective: b.meta("objective")?,
            config: b.meta("config")?,
        })
    }
}

/// Least-squares integral of per-channel vector fields `(2, C, Sy, Sx)`
/// (x component first) on the scan grid; each channel comes out zero-mean.
pub fn integrate_vector_field(v: &Array4<f64>, scan: &ScanGrid) -> Result<Array3<f64>> {
    let (two, c, sy, sx) = v.dim();
    if two != 2 || (sy, sx) != (scan.sy, scan.sx) {
        return Err(Error::shape("integrate_vector_field", &[2, c, scan.sy, scan.sx], v.shape()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("integrate_vector_field input"));
    }
    let spectral = Spectral::new(scan.grid());
    let mut out = Array3::<f64>::zeros((c, sy, sx));
    for ch in 0..c {
        let phi = spectral.integrate(v.slice(s![0, ch, .., ..]), v.slice(s![1, ch, .., ..]));
        out.slice_mut(s![ch, .., ..]).assign(&phi);
    }
    Ok(out)
}

/// `√I₀ · e^{iφ}` elementwise.
pub fn assemble_exit_wave(i_zero: &Array3<f64>, phase: &Array3<f64>) -> Result<Array3<C64>> {
    if i_zero.shape() != phase.shape() {
        return Err(Error::shape("assemble_exit_wave", i_zero.shape(), phase.shape()));
    }
    if let Some((index, &value)) = i_zero.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::NegativeIntensity { index, value });
    }
    Ok(Zip::from(i_zero)
        .and(phase)
        .map_collect(|&i, &p| C64::from_polar(i.sqrt(), p)))
}

/// Re-applies the scan carrier `exp(-i2πq·r̂)` and flattens to `(N², S)`.
pub fn to_lab_frame(e: &Array3<C64>, detector: &Grid2, scan: &ScanGrid) -> Result<Array2<C64>> {
    let (c, sy, sx) = e.dim();
    if c != detector.len() || (sy, sx) != (scan.sy, scan.sx) {
        return Err(Error::shape("to_lab_frame", &[detector.len(), scan.sy, scan.sx], e.shape()));
    }
    let mut out = stack_to_matrix(e);
    for iy in 0..scan.sy {
        for ix in 0..scan.sx {
            let col = iy * scan.sx + ix;
            for ch in 0..c {
                out[[ch, col]] *= C64::from_polar(1.0, carrier_phase(detector, scan, ch, iy, ix));
            }
        }
    }
    Ok(out)
}

/// Probe footprint `d_r = Σ_s |P(r, s)|²`.
pub fn probe_footprint(p: &Array2<C64>) -> Vec<f64> {
    p.rows().into_iter().map(|r| r.iter().map(|v| v.norm_sqr()).sum()).collect()
}

/// `F⁻¹E·Pᴴ·diag(1/(d + ridge))` from lab-frame spectra `e_lab (N², S)`.
pub fn estimate_matrix_potential(
    e_lab: &Array2<C64>,
    p: &Array2<C64>,
    grid: &Grid2,
    ridge: Option<f64>,
) -> Result<Array2<C64>> {
    check_dense(grid)?;
    if e_lab.dim() != p.dim() || p.nrows() != grid.len() {
        return Err(Error::shape("estimate_matrix_potential", p.shape(), e_lab.shape()));
    }
    let d = probe_footprint(p);
    let d_max = d.iter().cloned().fold(0.0, f64::max);
    if !(d_max >= 1e-12) {
        return Err(Error::DarkProbe(d_max));
    }
    let ridge = ridge.unwrap_or(1e-6 * d_max);
    if !(ridge >= 0.0) {
        return Err(Error::InvalidParameter(format!("ridge must be >= 0, got {ridge}")));
    }
    let real_space = fft_columns(e_lab, grid, Direction::Inverse);
    let ph = p.t().mapv(|v| v.conj());
    let mut m = real_space.dot(&ph);
    for (mut col, dr) in m.columns_mut().into_iter().zip(d.iter()) {
        let denom = dr + ridge;
        if denom > 0.0 {
            col.mapv_inplace(|v| v / denom);
        } else {
            col.fill(C64::new(0.0, 0.0));
        }
    }
    Ok(m)
}

/// Diagonal phase of `A`, sampled at the scan pixels and made zero-mean.
/// Returns the phase and the number of zero-diagonal pixels (set to 0).
pub fn project_phase(a: &Array2<C64>, grid: &Grid2, scan: &ScanGrid) -> Result<(Array2<f64>, usize)> {
    if a.nrows() != a.ncols() || a.nrows() != grid.len() {
        return Err(Error::shape("project_phase", &[grid.len(), grid.len()], a.shape()));
    }
    scan.check_fits(grid)?;
    let mut flagged = 0;
    let mut phase = Array2::<f64>::zeros((scan.sy, scan.sx));
    let mut valid = Vec::with_capacity(scan.len());
    for iy in 0..scan.sy {
        for ix in 0..scan.sx {
            let (py, px) = scan.pixel(iy, ix, grid.ny, grid.nx);
            let r = py * grid.nx + px;
            let v = a[[r, r]];
            if v.norm() < 1e-12 {
                flagged += 1;
            } else {
                phase[[iy, ix]] = v.arg();
                valid.push((iy, ix));
            }
        }
    }
    if !valid.is_empty() {
        let mean = valid.iter().map(|&(y, x)| phase[[y, x]]).sum::<f64>() / valid.len() as f64;
        for &(y, x) in &valid {
            phase[[y, x]] -= mean;
        }
    }
    Ok((phase, flagged))
}

/// Fraction of squared Frobenius norm lying off the diagonal.
pub fn off_diagonal_fraction(a: &Array2<C64>) -> f64 {
    let total: f64 = a.iter().map(|v| v.norm_sqr()).sum();
    if total == 0.0 {
        return 0.0;
    }
    let diag: f64 = a.diag().iter().map(|v| v.norm_sqr()).sum();
    (total - diag) / total
}

/// Exit wave → matrix potential → projected phase, from probe-frame
/// per-channel phases.
pub fn inference_tail(ds: &FourDDataset, phase: &Array3<f64>, opts: &TailOptions) -> Result<TailOutput> {
    let e = assemble_exit_wave(&ds.i_zero, phase)?;
    let e_lab = to_lab_frame(&e, &ds.detector, &ds.scan)?;
    let p = probe_matrix(&ds.focused_probe()?, &ds.scan)?;
    let a_pred = estimate_matrix_potential(&e_lab, &p, &ds.detector, opts.ridge)?;
    let (phase_proj, flagged_pixels) = project_phase(&a_pred, &ds.detector, &ds.scan)?;
    let off_diagonal = off_diagonal_fraction(&a_pred);
    Ok(TailOutput {
        a_pred,
        phase_proj,
        flagged_pixels,
        off_diagonal,
    })
}

/// `mean((pred - gt - mean(pred - gt))²)`.
pub fn phase_mse(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("phase_mse", gt.shape(), pred.shape()));
    }
    let diff = pred - gt;
    let mean = diff.mean().unwrap_or(0.0);
    Ok(diff.mapv(|d| (d - mean) * (d - mean)).mean().unwrap_or(0.0))
}

/// Pearson correlation of two equally shaped maps.
pub fn correlation(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("correlation", a.shape(), b.shape()));
    }
    let (ma, mb) = (a.mean().unwrap_or(0.0), b.mean().unwrap_or(0.0));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    Zip::from(a).and(b).for_each(|&x, &y| {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    });
    Ok(if saa == 0.0 || sbb == 0.0 { 0.0 } else { sab / (saa * sbb).sqrt() })
}

/// FlowTIE inference: predicted scan gradients, integrated per channel,
/// then the shared tail.
pub fn flowtie_reconstruct(ds: &FourDDataset, model: &FlowModel) -> Result<ReconResult> {
    flowtie_reconstruct_with(ds, model, &TailOptions::default())
}

pub fn flowtie_reconstruct_with(ds: &FourDDataset, model: &FlowModel, tail: &TailOptions) -> Result<ReconResult> {
    ds.validate()?;
    model.check_geometry(ds.channels(), ds.scan.sy, ds.scan.sx)?;
    let start = Instant::now();
    let i_deriv = ds.axial_derivative()?;
    let v = model.predict(&i_deriv)?;
    let phase = integrate_vector_field(&v, &ds.scan)?;
    let out = inference_tail(ds, &phase, tail)?;
    let wall_time = start.elapsed().as_secs_f64();
    ReconResult::from_tail(Method::FlowTie, ds, out, phase, wall_time, tail)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GdOptions {
    pub iters: usize,
    pub power_iters: usize,
    /// Seed of the power-iteration start vector.
    pub seed: u64,
    /// Consecutive objective increases that trigger halving the step.
    pub patience: usize,
    pub keep_matrix: bool,
}

impl Default for GdOptions {
    fn default() -> Self {
        GdOptions {
            iters: 100,
            power_iters: 20,
            seed: 0,
            patience: 5,
            keep_matrix: false,
        }
    }
}

/// Estimates `‖P‖₂²` by power iteration on `PᴴP`.
pub fn spectral_norm_sq(p: &Array2<C64>, iters: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: ndarray::Array1<C64> =
        ndarray::Array1::from_shape_fn(p.ncols(), |_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
    let ph = p.t().mapv(|v| v.conj());
    let mut estimate = 0.0;
    for _ in 0..iters.max(1) {
        let norm = x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        x.mapv_inplace(|v| v / norm);
        let y = ph.dot(&p.dot(&x));
        estimate = x.iter().zip(y.iter()).map(|(a, b)| (a.conj() * b).re).sum::<f64>();
        x = y;
    }
    estimate
}

/// Amplitude-flow gradient descent on `‖√I − |F A P|‖²_F` from `A = I`.
pub fn gd_reconstruct(ds: &FourDDataset, opts: &GdOptions) -> Result<ReconResult> {
    ds.validate()?;
    check_dense(&ds.detector)?;
    let start = Instant::now();
    let grid = ds.detector;
    let amp = stack_to_matrix(&ds.i_zero);
    if let Some((index, &value)) = amp.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::NegativeIntensity { index, value });
    }
    let amp = amp.mapv(f64::sqrt);
    let p = probe_matrix(&ds.focused_probe()?, &ds.scan)?;
    let ph = p.t().mapv(|v| v.conj());
    let lipschitz = spectral_norm_sq(&p, opts.power_iters, opts.seed);
    if !(lipschitz > 0.0) {
        return Err(Error::DarkProbe(lipschitz));
    }
    let mut eta = 1.0 / lipschitz;
    let n = grid.len();
    let mut a = Array2::<C64>::from_diag_elem(n, C64::new(1.0, 0.0));
    let mut objective = Vec::with_capacity(opts.iters + 1);
    let mut halvings = 0usize;
    let mut increases = 0usize;
    for it in 0..=opts.iters {
        let w = fft_columns(&a.dot(&p), &grid, Direction::Forward);
        let mut obj = 0.0;
        let residual = Zip::from(&w).and(&amp).map_collect(|&wv, &av| {
            let mag = wv.norm();
            obj += (av - mag) * (av - mag);
            wv * ((av - mag) / mag.max(1e-12))
        });
        if !obj.is_finite() {
            return Err(Error::NonFinite("gradient-descent objective"));
        }
        if let Some(&prev) = objective.last() {
            if obj > prev {
                increases += 1;
                if increases >= opts.patience {
                    eta *= 0.5;
                    halvings += 1;
                    increases = 0;
                }
            } else {
                increases = 0;
            }
        }
        objective.push(obj);
        if it == opts.iters {
            break;
        }
        let g = fft_columns(&residual, &grid, Direction::Inverse).dot(&ph);
        a.scaled_add(C64::new(eta, 0.0), &g);
    }
    let (phase_proj, flagged_pixels) = project_phase(&a, &grid, &ds.scan)?;
    let off_diagonal = off_diagonal_fraction(&a);
    let wall_time = start.elapsed().as_secs_f64();
    let tail = TailOptions {
        ridge: None,
        keep_matrix: opts.keep_matrix,
    };
    let out = TailOutput {
        a_pred: a,
        phase_proj,
        flagged_pixels,
        off_diagonal,
    };
    let mut result = ReconResult::from_tail(Method::Gd, ds, out, Array3::zeros((0, 0, 0)), wall_time, &tail)?;
    result.phase_stack = None;
    result.objective = objective;
    result.set_config("gd_iters", opts.iters);
    result.set_config("gd_step", 1.0 / lipschitz);
    result.set_config("gd_halvings", halvings);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_gauge_and_identity() {
        let gt = Array2::from_shape_fn((8, 8), |(y, x)| (x as f64 * 0.3).sin() + y as f64 * 0.1);
        assert_eq!(phase_mse(&gt, &gt).unwrap(), 0.0);
        assert!(phase_mse(&(&gt + 3.7), &gt).unwrap() < 1e-28);
        assert!(phase_mse(&gt, &Array2::zeros((8, 4))).is_err());
    }

    #[test]
    fn exit_wave_preserves_intensity() {
        let i0 = Array3::from_shape_fn((2, 3, 3), |(c, y, x)| (c + y * x) as f64 * 0.25);
        let ph = Array3::from_shape_fn((2, 3, 3), |(c, y, x)| c as f64 - y as f64 + 0.3 * x as f64);
        let e = assemble_exit_wave(&i0, &ph).unwrap();
        for (v, i) in e.iter().zip(i0.iter()) {
            assert!((v.norm_sqr() - i).abs() < 1e-12);
        }
        let mut bad = i0.clone();
        bad[[1, 1, 1]] = -1e-3;
        assert!(matches!(assemble_exit_wave(&bad, &ph), Err(Error::NegativeIntensity { .. })));
    }

    #[test]
    fn identity_projects_to_zero() {
        let grid = Grid2::square(8, 0.5).unwrap();
        let scan = ScanGrid::dense(&grid);
        let a = Array2::<C64>::from_diag_elem(64, C64::new(1.0, 0.0));
        let (p, flagged) = project_phase(&a, &grid, &scan).unwrap();
        assert!(p.iter().all(|v| *v == 0.0));
        assert_eq!(flagged, 0);
        let mut z = a.clone();
        z[[3, 3]] = C64::new(0.0, 0.0);
        assert_eq!(project_phase(&z, &grid, &scan).unwrap().1, 1);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
