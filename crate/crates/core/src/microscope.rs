//! Probe formation, the multislice loop, defocus-triplet 4D acquisition and
//! the dense matrix form of the scattering process.
//!
//! Detector channels are indexed `c = qy·nx + qx` in DFT order. Scan
//! positions are whole pixels, so shifting the probe is an exact periodic
//! roll and scan index `s = sy·Sx + sx` maps to pixel
//! `(origin_y + sy·step_y, origin_x + sx·step_x)`.
//!
//! Recorded phases and flows live in the lab frame, the frame in which
//! intensity transport holds. Every lab-frame spectrum carries the scan
//! carrier `exp(-i2πq·r̂)`, a ramp that winds through `2π` across the scan
//! and contributes the constant `-2πq` to the scan gradient. Periodic
//! integrators cannot represent it, so [`FourDDataset::probe_frame_phase`]
//! strips it for the reconstruction tail and the phase loss.

use std::f64::consts::PI;

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{roll, ComplexField, Fft2, Grid2, Propagator, C64};
use crate::specimen::PotentialSlices;

/// Intensities below this are treated as dark: their phase is undefined and
/// recorded as zero, with zero gradient.
pub const DARK_INTENSITY: f64 = 1e-14;

/// Largest `N` for which dense `N²×N²` operators are built.
pub const DENSE_LIMIT: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub grid: Grid2,
    pub semi_angle_mrad: f64,
    pub defocus: f64,
    pub lambda: f64,
    /// Real-space probe centred on pixel `(0, 0)`, `Σ|P|² = 1`.
    pub values: ComplexField,
}

/// Builds an aberration-free probe with the given defocus (Å).
pub fn make_probe(grid: Grid2, semi_angle_mrad: f64, defocus: f64, lambda: f64) -> Result<Probe> {
    if !(semi_angle_mrad > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "probe semi-angle must be positive, got {semi_angle_mrad} mrad"
        )));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("wavelength must be > 0, got {lambda}")));
    }
    let q_max = semi_angle_mrad * 1e-3 / lambda;
    let nyquist = (0.5 / grid.pitch_x).min(0.5 / grid.pitch_y);
    if q_max > nyquist {
        return Err(Error::InvalidParameter(format!(
            "aperture {q_max:.4} 1/Å exceeds Nyquist {nyquist:.4} 1/Å (aliased probe)"
        )));
    }
    let q2 = grid.q2();
    let inside = q2.iter().filter(|&&v| v <= q_max * q_max).count();
    if inside < 4 {
        return Err(Error::InvalidParameter(format!(
            "aperture holds only {inside} spectral samples, need at least 4"
        )));
    }
    let mut spec = q2.mapv(|v| {
        if v <= q_max * q_max {
            C64::from_polar(1.0, -PI * lambda * defocus * v)
        } else {
            C64::new(0.0, 0.0)
        }
    });
    Fft2::for_grid(&grid).inverse(&mut spec);
    let norm = spec.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    spec.mapv_inplace(|v| v / norm);
    Ok(Probe {
        grid,
        semi_angle_mrad,
        defocus,
        lambda,
        values: ComplexField { grid, values: spec },
    })
}

impl Probe {
    pub fn spectrum(&self) -> Array2<C64> {
        let mut s = self.values.values.clone();
        Fft2::for_grid(&self.grid).forward(&mut s);
        s
    }

    /// The probe rolled to scan pixel `(py, px)`.
    pub fn shifted(&self, py: usize, px: usize) -> Array2<C64> {
        roll(self.values.values.view(), py as isize, px as isize)
    }
}

/// A pixel-aligned raster that tiles the periodic cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGrid {
    pub sy: usize,
    pub sx: usize,
    /// Step between scan positions in pixels.
    pub step_px_y: usize,
    pub step_px_x: usize,
    pub origin_px_y: usize,
    pub origin_px_x: usize,
    pub pitch_y: f64,
    pub pitch_x: f64,
}

impl ScanGrid {
    /// `sy × sx` positions covering `grid`; both counts must divide the grid.
    pub fn new(grid: &Grid2, sy: usize, sx: usize) -> Result<Self> {
        if sy < 2 || sx < 2 || grid.ny % sy != 0 || grid.nx % sx != 0 {
            return Err(Error::InvalidParameter(format!(
                "scan {sy}x{sx} does not tile the {}x{} grid with whole-pixel steps",
                grid.ny, grid.nx
            )));
        }
        Ok(ScanGrid {
            sy,
            sx,
            step_px_y: grid.ny / sy,
            step_px_x: grid.nx / sx,
            origin_px_y: 0,
            origin_px_x: 0,
            pitch_y: grid.pitch_y,
            pitch_x: grid.pitch_x,
        })
    }

    /// One scan position per pixel.
    pub fn dense(grid: &Grid2) -> Self {
        Self::new(grid, grid.ny, grid.nx).expect("dense scan always tiles")
    }

    pub fn with_origin(mut self, oy: usize, ox: usize) -> Self {
        self.origin_px_y = oy;
        self.origin_px_x = ox;
        self
    }

    pub fn len(&self) -> usize {
        self.sy * self.sx
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step_y(&self) -> f64 {
        self.step_px_y as f64 * self.pitch_y
    }

    pub fn step_x(&self) -> f64 {
        self.step_px_x as f64 * self.pitch_x
    }

    /// Scan coordinates as a grid of their own (pitch = scan step).
    pub fn grid(&self) -> Grid2 {
        Grid2 {
            nx: self.sx,
            ny: self.sy,
            pitch_x: self.step_x(),
            pitch_y: self.step_y(),
        }
    }

    /// Pixel of scan index `(sy, sx)` on a grid of `(ny, nx)`.
    pub fn pixel(&self, sy: usize, sx: usize, ny: usize, nx: usize) -> (usize, usize) {
        (
            (self.origin_px_y + sy * self.step_px_y) % ny,
            (self.origin_px_x + sx * self.step_px_x) % nx,
        )
    }

    pub(crate) fn check_fits(&self, grid: &Grid2) -> Result<()> {
        if self.sy * self.step_px_y != grid.ny || self.sx * self.step_px_x != grid.nx {
            return Err(Error::GridMismatch(format!(
                "scan {}x{} with steps ({}, {}) does not tile {}x{}",
                self.sy, self.sx, self.step_px_y, self.step_px_x, grid.ny, grid.nx
            )));
        }
        Ok(())
    }
}

fn check_same_grid(a: &Grid2, b: &Grid2, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Reusable multislice state: transmissions and the inter-slab propagator.
pub struct Multislice {
    transmissions: Vec<Array2<C64>>,
    propagator: Propagator,
    grid: Grid2,
}

impl Multislice {
    pub fn new(slices: &PotentialSlices) -> Self {
        Multislice {
            transmissions: slices.transmissions(),
            propagator: Propagator::new(&slices.grid, slices.delta_z, slices.lambda),
            grid: slices.grid,
        }
    }

    /// Runs the wave through every slab; the last slab is not followed by
    /// propagation.
    pub fn run(&self, mut wave: Array2<C64>) -> Array2<C64> {
        let m = self.transmissions.len();
        for (k, t) in self.transmissions.iter().enumerate() {
            Zip::from(&mut wave).and(t).for_each(|w, &o| *w *= o);
            if k + 1 < m {
                self.propagator.apply(&mut wave);
            }
        }
        wave
    }
}

/// Exit wave for the probe centred on scan pixel `shift = (py, px)`.
pub fn multislice_exitwave(
    probe: &Probe,
    shift: (usize, usize),
    slices: &PotentialSlices,
) -> Result<ComplexField> {
    check_same_grid(&probe.grid, &slices.grid, "probe vs slices")?;
    let wave = probe.shifted(shift.0, shift.1);
    let values = Multislice::new(slices).run(wave);
    Ok(ComplexField {
        grid: slices.grid,
        values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub semi_angle_mrad: f64,
}

impl Default for ProbeParams {
    fn default() -> Self {
        ProbeParams {
            semi_angle_mrad: 20.0,
        }
    }
}

/// Defocus-triplet 4D-STEM data with ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FourDDataset {
    /// `(N², Sy, Sx)` intensities at defocus `-Δz`, `0`, `+Δz`.
    pub i_minus: Array3<f64>,
    pub i_zero: Array3<f64>,
    pub i_plus: Array3<f64>,
    /// Spectrum phase of the in-focus exit wave, `(-π, π]`.
    pub phase_gt: Array3<f64>,
    /// `(2, N², Sy, Sx)` wrap-robust scan gradient of `phase_gt` (x then
    /// y), rad/Å.
    pub vfield_gt: Array4<f64>,
    /// `σ·ΣV_z` at the scan positions, `(Sy, Sx)`.
    pub proj_phase_gt: Array2<f64>,
    pub detector: Grid2,
    pub scan: ScanGrid,
    pub lambda: f64,
    pub sigma: f64,
    pub accel_kv: f64,
    pub delta_z_defocus: f64,
    pub probe: ProbeParams,
    pub structure: String,
    pub thickness: f64,
    pub n_slices: usize,
}

impl FourDDataset {
    pub fn channels(&self) -> usize {
        self.detector.len()
    }

    pub fn axial_derivative(&self) -> Result<Array3<f64>> {
        axial_derivative(self.i_plus.view(), self.i_minus.view(), self.delta_z_defocus)
    }

    /// In-focus probe used for the acquisition.
    pub fn focused_probe(&self) -> Result<Probe> {
        make_probe(self.detector, self.probe.semi_angle_mrad, 0.0, self.lambda)
    }

    /// `phase_gt` with the scan carrier removed, wrapped to `(-π, π]`;
    /// dark channels stay zero.
    pub fn probe_frame_phase(&self) -> Array3<f64> {
        let mut out = self.phase_gt.clone();
        for ((c, sy, sx), v) in out.indexed_iter_mut() {
            if self.i_zero[[c, sy, sx]] >= DARK_INTENSITY {
                *v = wrap_angle(*v - carrier_phase(&self.detector, &self.scan, c, sy, sx));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let shape = [self.channels(), self.scan.sy, self.scan.sx];
        for (name, a) in [
            ("i_minus", &self.i_minus),
            ("i_zero", &self.i_zero),
            ("i_plus", &self.i_plus),
            ("phase_gt", &self.phase_gt),
        ] {
            if a.shape() != shape {
                return Err(Error::shape(format!("dataset {name}"), &shape, a.shape()));
            }
        }
        let vshape = [2, shape[0], shape[1], shape[2]];
        if self.vfield_gt.shape() != vshape {
            return Err(Error::shape("dataset vfield_gt", &vshape, self.vfield_gt.shape()));
        }
        if self.proj_phase_gt.shape() != [shape[1], shape[2]] {
            return Err(Error::shape(
                "dataset proj_phase_gt",
                &shape[1..],
                self.proj_phase_gt.shape(),
            ));
        }
        self.scan.check_fits(&self.detector)
    }
}

/// Forward spectra in the probe frame for every scan position, `(N², S)`.
fn probe_frame_spectra(
    ms: &Multislice,
    probe: &Probe,
    scan: &ScanGrid,
    fft: &Fft2,
) -> Array2<C64> {
    let grid = ms.grid;
    let mut out = Array2::<C64>::zeros((grid.len(), scan.len()));
    for sy in 0..scan.sy {
        for sx in 0..scan.sx {
            let (py, px) = scan.pixel(sy, sx, grid.ny, grid.nx);
            let exit = ms.run(probe.shifted(py, px));
            let mut local = roll(exit.view(), -(py as isize), -(px as isize));
            fft.forward(&mut local);
            let col = sy * scan.sx + sx;
            for (c, v) in local.iter().enumerate() {
                out[[c, col]] = *v;
            }
        }
    }
    out
}

/// Phase `-2πq·r̂` of the scan carrier for channel `c` at scan index
/// `(sy, sx)`.
pub fn carrier_phase(detector: &Grid2, scan: &ScanGrid, c: usize, sy: usize, sx: usize) -> f64 {
    let (py, px) = scan.pixel(sy, sx, detector.ny, detector.nx);
    let (qy, qx) = (c / detector.nx, c % detector.nx);
    let angle = (qy * py) as f64 / detector.ny as f64 + (qx * px) as f64 / detector.nx as f64;
    -2.0 * PI * angle.fract()
}

/// Folds an angle onto `(-π, π]`.
fn wrap_angle(a: f64) -> f64 {
    let w = a.sin().atan2(a.cos());
    if w <= -PI {
        PI
    } else {
        w
    }
}

fn wrapped_phase(v: C64) -> f64 {
    if v.norm_sqr() < DARK_INTENSITY {
        0.0
    } else {
        wrap_angle(v.arg())
    }
}

/// Scan gradient via neighbour phase differences, which never see a
/// `2π` jump: `v_x = arg(E(r̂+e_x)·conj E(r̂)) / Δs`.
fn wrap_robust_gradient(spectra: &Array3<C64>, scan: &ScanGrid) -> Array4<f64> {
    let (nc, sy_n, sx_n) = spectra.dim();
    let (dx, dy) = (scan.step_x(), scan.step_y());
    let mut v = Array4::<f64>::zeros((2, nc, sy_n, sx_n));
    for c in 0..nc {
        for sy in 0..sy_n {
            for sx in 0..sx_n {
                let here = spectra[[c, sy, sx]];
                if here.norm_sqr() < DARK_INTENSITY {
                    continue;
                }
                let right = spectra[[c, sy, (sx + 1) % sx_n]];
                let down = spectra[[c, (sy + 1) % sy_n, sx]];
                if right.norm_sqr() >= DARK_INTENSITY {
                    v[[0, c, sy, sx]] = (right * here.conj()).arg() / dx;
                }
                if down.norm_sqr() >= DARK_INTENSITY {
                    v[[1, c, sy, sx]] = (down * here.conj()).arg() / dy;
                }
            }
        }
    }
    v
}

/// Simulates the defocus triplet and its ground-truth labels.
pub fn simulate_4d(
    slices: &PotentialSlices,
    probe_params: &ProbeParams,
    scan: &ScanGrid,
    delta_z_defocus: f64,
) -> Result<FourDDataset> {
    if !(delta_z_defocus > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "defocus step must be > 0, got {delta_z_defocus}"
        )));
    }
    let grid = slices.grid;
    scan.check_fits(&grid)?;
    let ms = Multislice::new(slices);
    let fft = Fft2::for_grid(&grid);
    let shape = (grid.len(), scan.sy, scan.sx);

    let mut stacks = Vec::with_capacity(3);
    let mut focused = None;
    for df in [-delta_z_defocus, 0.0, delta_z_defocus] {
        let probe = make_probe(grid, probe_params.semi_angle_mrad, df, slices.lambda)?;
        let spectra = probe_frame_spectra(&ms, &probe, scan, &fft)
            .into_shape_with_order(shape)
            .expect("scan-major layout");
        stacks.push(spectra.mapv(|v| v.norm_sqr()));
        if df == 0.0 {
            focused = Some(spectra);
        }
    }
    let mut focused = focused.expect("in-focus pass ran");
    for ((c, sy, sx), v) in focused.indexed_iter_mut() {
        *v *= C64::from_polar(1.0, carrier_phase(&grid, scan, c, sy, sx));
    }
    let phase_gt = focused.mapv(wrapped_phase);
    let vfield_gt = wrap_robust_gradient(&focused, scan);

    let projected = slices.projected_phase();
    let proj_phase_gt = Array2::from_shape_fn((scan.sy, scan.sx), |(sy, sx)| {
        let (py, px) = scan.pixel(sy, sx, grid.ny, grid.nx);
        projected[[py, px]]
    });

    let i_plus = stacks.pop().expect("three passes");
    let i_zero = stacks.pop().expect("three passes");
    let i_minus = stacks.pop().expect("three passes");
    Ok(FourDDataset {
        i_minus,
        i_zero,
        i_plus,
        phase_gt,
        vfield_gt,
        proj_phase_gt,
        detector: grid,
        scan: *scan,
        lambda: slices.lambda,
        sigma: slices.sigma,
        accel_kv: slices.accel_kv,
        delta_z_defocus,
        probe: *probe_params,
        structure: slices.structure.clone(),
        thickness: slices.thickness(),
        n_slices: slices.len(),
    })
}

/// Central difference `(I₊ - I₋)/(2Δz)` along the optical axis.
pub fn axial_derivative(
    i_plus: ArrayView3<f64>,
    i_minus: ArrayView3<f64>,
    delta_z: f64,
) -> Result<Array3<f64>> {
    if i_plus.shape() != i_minus.shape() {
        return Err(Error::shape("axial_derivative", i_plus.shape(), i_minus.shape()));
    }
    if !(delta_z > 0.0) {
        return Err(Error::InvalidParameter(format!("defocus step must be > 0, got {delta_z}")));
    }
    let scale = 1.0 / (2.0 * delta_z);
    Ok(Zip::from(&i_plus)
        .and(&i_minus)
        .map_collect(|&p, &m| (p - m) * scale))
}

/// Dense matrix form `I = |F A P|²` of the multislice model.
#[derive(Clone, Debug)]
pub struct MatrixModel {
    /// `N² × S` detector intensities.
    pub intensity: Array2<f64>,
    /// `N² × N²` scattering matrix.
    pub a: Array2<C64>,
    /// `N² × S` shifted probes.
    pub p: Array2<C64>,
}

pub(crate) fn check_dense(grid: &Grid2) -> Result<()> {
    let n = grid.nx.max(grid.ny);
    if n > DENSE_LIMIT {
        return Err(Error::DenseLimit { n, max: DENSE_LIMIT });
    }
    Ok(())
}

/// Column `s` is the probe shifted to scan position `s`, flattened row-major.
pub fn probe_matrix(probe: &Probe, scan: &ScanGrid) -> Result<Array2<C64>> {
    let grid = probe.grid;
    scan.check_fits(&grid)?;
    let mut p = Array2::<C64>::zeros((grid.len(), scan.len()));
    for sy in 0..scan.sy {
        for sx in 0..scan.sx {
            let (py, px) = scan.pixel(sy, sx, grid.ny, grid.nx);
            let shifted = probe.shifted(py, px);
            p.column_mut(sy * scan.sx + sx)
                .iter_mut()
                .zip(shifted.iter())
                .for_each(|(d, v)| *d = *v);
        }
    }
    Ok(p)
}

/// Dense Fresnel operator: a circulant built from the propagated delta.
pub fn propagator_matrix(grid: &Grid2, dz: f64, lambda: f64) -> Array2<C64> {
    let mut delta = Array2::<C64>::zeros(grid.shape());
    delta[[0, 0]] = C64::new(1.0, 0.0);
    Propagator::new(grid, dz, lambda).apply(&mut delta);
    let (ny, nx) = grid.shape();
    Array2::from_shape_fn((grid.len(), grid.len()), |(r, rp)| {
        let (ry, rx) = (r / nx, r % nx);
        let (py, px) = (rp / nx, rp % nx);
        delta[[(ry + ny - py) % ny, (rx + nx - px) % nx]]
    })
}

/// Applies the unitary 2D DFT to every column of an `N² × S` matrix.
pub fn fft_columns(m: &Array2<C64>, grid: &Grid2, dir: crate::field::Direction) -> Array2<C64> {
    let fft = Fft2::for_grid(grid);
    let mut out = Array2::<C64>::zeros(m.dim());
    let mut buf = vec![C64::new(0.0, 0.0); grid.len()];
    for (col_in, mut col_out) in m.columns().into_iter().zip(out.columns_mut()) {
        buf.iter_mut().zip(col_in.iter()).for_each(|(b, v)| *b = *v);
        fft.process_slice(&mut buf, dir);
        col_out.iter_mut().zip(buf.iter()).for_each(|(d, v)| *d = *v);
    }
    out
}

/// Builds `A = D(O_m)·V·…·V·D(O_1)` and `I = |F A P|²`.
pub fn matrix_forward(slices: &PotentialSlices, probe: &Probe, scan: &ScanGrid) -> Result<MatrixModel> {
    let grid = slices.grid;
    check_dense(&grid)?;
    check_same_grid(&probe.grid, &grid, "probe vs slices")?;
    let p = probe_matrix(probe, scan)?;
    let transmissions = slices.transmissions();
    let diag_left = |d: &Array2<C64>, m: &Array2<C64>| {
        let flat: Vec<C64> = d.iter().copied().collect();
        let mut out = m.clone();
        for (mut row, &o) in out.rows_mut().into_iter().zip(flat.iter()) {
            row.mapv_inplace(|v| v * o);
        }
        out
    };
    let mut a = Array2::<C64>::zeros((grid.len(), grid.len()));
    for (i, o) in transmissions[0].iter().enumerate() {
        a[[i, i]] = *o;
    }
    if transmissions.len() > 1 {
        let v = propagator_matrix(&grid, slices.delta_z, slices.lambda);
        for t in &transmissions[1..] {
            a = diag_left(t, &v.dot(&a));
        }
    }
    let w = fft_columns(&a.dot(&p), &grid, crate::field::Direction::Forward);
    let intensity = w.mapv(|v| v.norm_sqr());
    Ok(MatrixModel { intensity, a, p })
}

/// Flattens `(N², Sy, Sx)` into `(N², S)` with `s = sy·Sx + sx`.
pub fn stack_to_matrix<T: Clone>(stack: &Array3<T>) -> Array2<T> {
    let (c, sy, sx) = stack.dim();
    stack
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, sy * sx))
        .expect("contiguous")
}

/// Channel-`c` scan image of a stack.
pub fn channel(stack: &Array3<f64>, c: usize) -> Array2<f64> {
    stack.slice(s![c, .., ..]).to_owned()
}
