//! `export-viz`: 8-bit PGM snapshots of phases, flow fields and
//! diffraction patterns.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, ArrayD, Ix2, Ix3, Ix4};

use flowtie::container::Bundle;
use flowtie::field::roll;

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VizKind {
    ProjPhase,
    Vfield,
    Diffraction,
}

impl FromStr for VizKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proj-phase" => Ok(VizKind::ProjPhase),
            "vfield" => Ok(VizKind::Vfield),
            "diffraction" => Ok(VizKind::Diffraction),
            other => Err(CliError::Usage(format!(
                "unknown export {other:?} (expected proj-phase, vfield or diffraction)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VizOptions {
    pub input: PathBuf,
    pub what: VizKind,
    /// Output path; `.pgm` is appended when missing.
    pub out: PathBuf,
    /// Tensor override; defaults depend on `what`.
    pub tensor: Option<String>,
    /// Detector channel for `vfield`.
    pub channel: usize,
    /// Scan position `(sy, sx)` for `diffraction`.
    pub position: (usize, usize),
    /// Target number of arrows per side in the arrow list.
    pub arrows: usize,
}

impl VizOptions {
    pub fn new(input: impl Into<PathBuf>, what: VizKind, out: impl Into<PathBuf>) -> Self {
        VizOptions {
            input: input.into(),
            what,
            out: out.into(),
            tensor: None,
            channel: 0,
            position: (0, 0),
            arrows: 8,
        }
    }
}

/// Min-max range used for one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub fn degenerate(&self) -> bool {
        !(self.max > self.min)
    }
}

/// Pixel bytes `round((v - min) / (max - min) · 255)`, row-major; a
/// constant field maps to mid-gray 128.
pub fn normalize(field: &Array2<f64>) -> Result<(Vec<u8>, Range)> {
    if field.is_empty() {
        return Err(CliError::Usage("cannot export an empty field".into()));
    }
    if field.iter().any(|v| !v.is_finite()) {
        return Err(flowtie::Error::NonFinite("exported field").into());
    }
    let min = field.iter().copied().fold(f64::INFINITY, f64::min);
    let max = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = Range { min, max };
    let bytes = if range.degenerate() {
        vec![128; field.len()]
    } else {
        field.iter().map(|v| ((v - min) / (max - min) * 255.0).round() as u8).collect()
    };
    Ok((bytes, range))
}

/// Binary PGM (`P5`) file contents.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5 {width} {height} 255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a `P5` file written by [`encode_pgm`]: `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |why: &str| CliError::Usage(format!("not a P5 image: {why}"));
    let end = bytes.iter().position(|b| *b == b'\n').ok_or_else(|| bad("missing header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not text"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "P5" || parts[3] != "255" {
        return Err(bad("unexpected header"));
    }
    let w: usize = parts[1].parse().map_err(|_| bad("width"))?;
    let h: usize = parts[2].parse().map_err(|_| bad("height"))?;
    let pixels = bytes[end + 1..].to_vec();
    if pixels.len() != w * h {
        return Err(bad("payload length"));
    }
    Ok((w, h, pixels))
}

fn with_suffix(base: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    base.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes `<base><suffix>.pgm` and its `.txt` sidecar; returns both paths.
fn export_image(field: &Array2<f64>, base: &Path, suffix: &str, source: &str) -> Result<Vec<PathBuf>> {
    let (pixels, range) = normalize(field)?;
    let (h, w) = field.dim();
    let pgm = with_suffix(base, suffix, "pgm");
    write(&pgm, &encode_pgm(w, h, &pixels))?;
    let mut side = format!("source {source}\nshape {h} {w}\nmin {}\nmax {}\n", range.min, range.max);
    if range.degenerate() {
        side.push_str("range degenerate (constant field, written as mid-gray 128)\n");
    } else {
        side.push_str("mapping round((v - min) / (max - min) * 255)\n");
    }
    let txt = with_suffix(base, suffix, "txt");
    write(&txt, side.as_bytes())?;
    Ok(vec![pgm, txt])
}

fn tensor<D: ndarray::Dimension>(b: &Bundle, name: &str) -> Result<ndarray::Array<f64, D>> {
    let a: ArrayD<f64> = b.get_f64(name)?;
    let shape = a.shape().to_vec();
    a.into_dimensionality::<D>().map_err(|_| {
        CliError::Usage(format!(
            "tensor {name} has shape {shape:?}, expected {} dimensions",
            D::NDIM.unwrap_or(0)
        ))
    })
}

fn side_of(channels: usize) -> Result<usize> {
    let n = (channels as f64).sqrt().round() as usize;
    if n * n != channels {
        return Err(CliError::Usage(format!("{channels} channels do not form a square detector")));
    }
    Ok(n)
}

/// Downsampled `y x vx vy` arrow list of one channel's flow.
pub fn arrow_list(vx: &Array2<f64>, vy: &Array2<f64>, per_side: usize) -> String {
    let (h, w) = vx.dim();
    let step_y = h.div_ceil(per_side.max(1)).max(1);
    let step_x = w.div_ceil(per_side.max(1)).max(1);
    let mut out = String::from("# y x vx vy\n");
    for y in (0..h).step_by(step_y) {
        for x in (0..w).step_by(step_x) {
            let _ = writeln!(out, "{y} {x} {} {}", vx[[y, x]], vy[[y, x]]);
        }
    }
    out
}

/// Exports the requested view; returns the files written.
pub fn export_viz(opts: &VizOptions) -> Result<Vec<PathBuf>> {
    let b = Bundle::open(&opts.input)?;
    let base = if opts.out.extension().is_some() { opts.out.clone() } else { opts.out.with_extension("pgm") };
    match opts.what {
        VizKind::ProjPhase => {
            let name = match &opts.tensor {
                Some(n) => n.clone(),
                None if b.has("phase_proj") => "phase_proj".into(),
                None => "proj_phase_gt".into(),
            };
            let field = tensor::<Ix2>(&b, &name)?;
            export_image(&field, &base, "", &name)
        }
        VizKind::Vfield => {
            let name = opts.tensor.clone().unwrap_or_else(|| "vfield_gt".into());
            let v = tensor::<Ix4>(&b, &name)?;
            let (two, c, _, _) = v.dim();
            if two != 2 || opts.channel >= c {
                return Err(CliError::Usage(format!(
                    "channel {} outside the {c} channels of {name} (shape {:?})",
                    opts.channel,
                    v.shape()
                )));
            }
            let vx = v.slice(s![0, opts.channel, .., ..]).to_owned();
            let vy = v.slice(s![1, opts.channel, .., ..]).to_owned();
            let src = format!("{name} channel {}", opts.channel);
            let mut files = export_image(&vx, &base, "_x", &format!("{src} x"))?;
            files.extend(export_image(&vy, &base, "_y", &format!("{src} y"))?);
            let arrows = with_suffix(&base, "_arrows", "txt");
            write(&arrows, arrow_list(&vx, &vy, opts.arrows).as_bytes())?;
            files.push(arrows);
            Ok(files)
        }
        VizKind::Diffraction => {
            let name = opts.tensor.clone().unwrap_or_else(|| "i_zero".into());
            let stack = tensor::<Ix3>(&b, &name)?;
            let (c, sy, sx) = stack.dim();
            let (py, px) = opts.position;
            if py >= sy || px >= sx {
                return Err(CliError::Usage(format!("scan position ({py}, {px}) outside the {sy}x{sx} scan")));
            }
            let n = side_of(c)?;
            let pattern = stack
                .slice(s![.., py, px])
                .to_owned()
                .into_shape_with_order((n, n))
                .expect("square detector");
            let centred = roll(pattern.view(), (n / 2) as isize, (n / 2) as isize);
            export_image(&centred, &base, "", &format!("{name} at scan ({py}, {px}), zero frequency centred"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let px = vec![0, 7, 255, 128, 3, 9];
        let bytes = encode_pgm(3, 2, &px);
        assert!(bytes.starts_with(b"P5 3 2 255\n"));
        assert_eq!(decode_pgm(&bytes).unwrap(), (3, 2, px));
    }

    #[test]
    fn constant_is_mid_gray() {
        let (px, r) = normalize(&Array2::from_elem((2, 2), 4.5)).unwrap();
        assert!(r.degenerate());
        assert_eq!(px, vec![128; 4]);
    }
}
