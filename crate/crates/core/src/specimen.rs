//! Crystal structures and their sliced projected potentials.
//!
//! Atoms are rasterized with the Gaussian terms of Kirkland's electron
//! scattering-factor fit. Each Gaussian is averaged analytically over the
//! pixel footprint (an `erf` difference per axis, summed over periodic
//! images), so the pixel sum of a slab times the pixel area reproduces the
//! continuous integral `2π a₀e Σcᵢ` per atom regardless of sampling.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid2, C64};

/// Bohr radius times elementary charge, `a₀·e` in V·Å².
pub const A0_E: f64 = 0.5292 * 14.4;

/// Electron rest energy in eV.
pub const ELECTRON_REST_ENERGY_EV: f64 = 510_998.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Element {
    Ga,
    As,
    Sr,
    Ti,
    O,
}

impl Element {
    pub const ALL: [Element; 5] = [Element::Ga, Element::As, Element::Sr, Element::Ti, Element::O];

    pub fn symbol(self) -> &'static str {
        match self {
            Element::Ga => "Ga",
            Element::As => "As",
            Element::Sr => "Sr",
            Element::Ti => "Ti",
            Element::O => "O",
        }
    }

    /// Gaussian amplitudes `cᵢ` (Å) and widths `dᵢ` (Å²) of Kirkland's fit.
    pub fn gaussian_terms(self) -> [(f64, f64); 3] {
        match self {
            Element::Ga => [
                (0.207910594, 0.327807224),
                (0.345079617, 0.743139061),
                (0.006556343, 0.0309411369),
            ],
            Element::As => [
                (0.179880226, 0.331800852),
                (0.863267222, 5.85490274),
                (0.0095905343, 0.0233777569),
            ],
            Element::Sr => [
                (0.173263882, 0.201624958),
                (4.66280378, 25.3027803),
                (0.0016126506, 0.0153610568),
            ],
            Element::Ti => [
                (0.362555269, 0.955524906),
                (1.4915939, 16.2221677),
                (0.0161659509, 0.0733140839),
            ],
            Element::O => [
                (0.0883326058, 0.760635525),
                (0.1965867, 2.07401094),
                (0.00099622, 0.0303266869),
            ],
        }
    }

    /// Projected potential of one atom at radius `r` (Å), in V·Å.
    pub fn projected_potential(self, r: f64) -> f64 {
        2.0 * PI * PI * A0_E
            * self
                .gaussian_terms()
                .iter()
                .map(|&(c, d)| c / d * (-PI * PI * r * r / d).exp())
                .sum::<f64>()
    }

    /// `∫ v_z d²r` in V·Å³.
    pub fn projected_integral(self) -> f64 {
        2.0 * PI * A0_E * self.gaussian_terms().iter().map(|&(c, _)| c).sum::<f64>()
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Element {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Element::ALL
            .iter()
            .copied()
            .find(|e| e.symbol() == s)
            .ok_or_else(|| Error::UnsupportedElement(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub element: Element,
    pub frac: [f64; 3],
}

/// An orthogonal periodic unit cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrystalStructure {
    pub name: String,
    pub cell: [f64; 3],
    pub atoms: Vec<Atom>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    GaAs,
    SrTiO3,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::GaAs, Preset::SrTiO3];

    pub fn name(self) -> &'static str {
        match self {
            Preset::GaAs => "GaAs",
            Preset::SrTiO3 => "SrTiO3",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .iter()
            .copied()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownPreset {
                name: s.to_string(),
                available: Preset::ALL.map(Preset::name).join(", "),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Motif {
    Rocksalt,
    Zincblende,
    Perovskite,
}

impl Motif {
    pub const ALL: [Motif; 3] = [Motif::Rocksalt, Motif::Zincblende, Motif::Perovskite];
}

const FCC: [[f64; 3]; 4] = [
    [0.0, 0.0, 0.0],
    [0.5, 0.5, 0.0],
    [0.5, 0.0, 0.5],
    [0.0, 0.5, 0.5],
];

fn fcc_sublattice(element: Element, offset: [f64; 3]) -> impl Iterator<Item = Atom> {
    FCC.into_iter().map(move |p| Atom {
        element,
        frac: [0, 1, 2].map(|i| wrap_frac(p[i] + offset[i])),
    })
}

fn wrap_frac(x: f64) -> f64 {
    let w = x - x.floor();
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

impl CrystalStructure {
    pub fn new(name: impl Into<String>, cell: [f64; 3], atoms: Vec<Atom>) -> Result<Self> {
        let s = CrystalStructure {
            name: name.into(),
            cell,
            atoms,
        };
        s.validate(false)?;
        Ok(s)
    }

    /// A cell with no atoms.
    pub fn vacuum(cell: [f64; 3]) -> Result<Self> {
        let s = CrystalStructure {
            name: "vacuum".into(),
            cell,
            atoms: Vec::new(),
        };
        s.validate(true)?;
        Ok(s)
    }

    fn validate(&self, allow_empty: bool) -> Result<()> {
        if !self.cell.iter().all(|&a| a > 0.0 && a.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "cell lengths must be positive, got {:?}",
                self.cell
            )));
        }
        if self.atoms.is_empty() && !allow_empty {
            return Err(Error::InvalidParameter(format!(
                "structure {:?} has no atoms",
                self.name
            )));
        }
        for atom in &self.atoms {
            if !atom.frac.iter().all(|&f| (0.0..1.0).contains(&f)) {
                return Err(Error::InvalidParameter(format!(
                    "fractional position {:?} outside [0, 1)",
                    atom.frac
                )));
            }
        }
        Ok(())
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::GaAs => {
                let atoms = fcc_sublattice(Element::Ga, [0.0; 3])
                    .chain(fcc_sublattice(Element::As, [0.25; 3]))
                    .collect();
                CrystalStructure {
                    name: "GaAs".into(),
                    cell: [5.6533; 3],
                    atoms,
                }
            }
            Preset::SrTiO3 => {
                let at = |element, frac| Atom { element, frac };
                CrystalStructure {
                    name: "SrTiO3".into(),
                    cell: [3.905; 3],
                    atoms: vec![
                        at(Element::Sr, [0.0, 0.0, 0.0]),
                        at(Element::Ti, [0.5, 0.5, 0.5]),
                        at(Element::O, [0.5, 0.5, 0.0]),
                        at(Element::O, [0.5, 0.0, 0.5]),
                        at(Element::O, [0.0, 0.5, 0.5]),
                    ],
                }
            }
        }
    }

    pub fn count(&self, element: Element) -> usize {
        self.atoms.iter().filter(|a| a.element == element).count()
    }

    /// Translates every atom by `shift` (fractional units), wrapping into the cell.
    pub fn translated(&self, shift: [f64; 3]) -> Self {
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom {
                element: a.element,
                frac: [0, 1, 2].map(|i| wrap_frac(a.frac[i] + shift[i])),
            })
            .collect();
        CrystalStructure {
            name: self.name.clone(),
            cell: self.cell,
            atoms,
        }
    }

    /// All atoms of both structures in one cell. The cells must agree.
    pub fn union(&self, other: &CrystalStructure) -> Result<Self> {
        if self.cell != other.cell {
            return Err(Error::InvalidParameter(format!(
                "cannot merge cells {:?} and {:?}",
                self.cell, other.cell
            )));
        }
        let mut atoms = self.atoms.clone();
        atoms.extend_from_slice(&other.atoms);
        Ok(CrystalStructure {
            name: format!("{}+{}", self.name, other.name),
            cell: self.cell,
            atoms,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: StructureFile = serde_json::from_str(text)?;
        let atoms = file
            .atoms
            .into_iter()
            .map(|a| {
                Ok(Atom {
                    element: a.element.parse()?,
                    frac: a.frac,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let s = CrystalStructure {
            name: file.name,
            cell: file.cell,
            atoms,
        };
        s.validate(false)?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = StructureFile {
            name: self.name.clone(),
            cell: self.cell,
            atoms: self
                .atoms
                .iter()
                .map(|a| AtomEntry {
                    element: a.element.symbol().to_string(),
                    frac: a.frac,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("structure serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct StructureFile {
    name: String,
    cell: [f64; 3],
    atoms: Vec<AtomEntry>,
}

#[derive(Serialize, Deserialize)]
struct AtomEntry {
    element: String,
    frac: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomCubicParams {
    pub lattice_min: f64,
    pub lattice_max: f64,
    pub motifs: Vec<Motif>,
    pub elements: Vec<Element>,
}

impl Default for RandomCubicParams {
    fn default() -> Self {
        RandomCubicParams {
            lattice_min: 3.8,
            lattice_max: 6.0,
            motifs: Motif::ALL.to_vec(),
            elements: Element::ALL.to_vec(),
        }
    }
}

/// A seeded random cubic crystal built from one of the supported motifs.
pub fn random_cubic(seed: u64, params: &RandomCubicParams) -> Result<CrystalStructure> {
    if params.elements.is_empty() {
        return Err(Error::InvalidParameter("element set is empty".into()));
    }
    if params.motifs.is_empty() {
        return Err(Error::InvalidParameter("motif set is empty".into()));
    }
    let (lo, hi) = (params.lattice_min, params.lattice_max);
    if !(3.0 <= lo && lo <= hi && hi <= 7.0) {
        return Err(Error::InvalidParameter(format!(
            "lattice range [{lo}, {hi}] must lie within [3.0, 7.0] Å"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motif = *params.motifs.choose(&mut rng).expect("non-empty");
    // Four decimals keeps generated cells readable in manifests.
    let a = if hi > lo {
        (rng.gen_range(lo..=hi) * 1e4).round() / 1e4
    } else {
        lo
    };
    let a = a.clamp(lo, hi);

    let mut pool = params.elements.clone();
    pool.shuffle(&mut rng);
    let pick = |i: usize| pool[i % pool.len()];
    let (ea, eb, ex) = (pick(0), pick(1), pick(2));

    let atoms: Vec<Atom> = match motif {
        Motif::Rocksalt => fcc_sublattice(ea, [0.0; 3])
            .chain(fcc_sublattice(eb, [0.5, 0.0, 0.0]))
            .collect(),
        Motif::Zincblende => fcc_sublattice(ea, [0.0; 3])
            .chain(fcc_sublattice(eb, [0.25; 3]))
            .collect(),
        Motif::Perovskite => vec![
            Atom { element: ea, frac: [0.0, 0.0, 0.0] },
            Atom { element: eb, frac: [0.5, 0.5, 0.5] },
            Atom { element: ex, frac: [0.5, 0.5, 0.0] },
            Atom { element: ex, frac: [0.5, 0.0, 0.5] },
            Atom { element: ex, frac: [0.0, 0.5, 0.5] },
        ],
    };
    let name = format!("{motif:?}-{ea}{eb}{}-{seed}", if motif == Motif::Perovskite { ex.symbol() } else { "" })
        .to_lowercase();
    CrystalStructure::new(name, [a; 3], atoms)
}

/// Relativistic electron wavelength in Å for an accelerating voltage in kV.
pub fn wavelength(accel_kv: f64) -> f64 {
    let v = accel_kv * 1e3;
    12.2639 / (v * (1.0 + 0.97845e-6 * v)).sqrt()
}

/// Interaction constant σ in rad/(V·Å).
pub fn interaction_constant(accel_kv: f64) -> f64 {
    let v = accel_kv * 1e3;
    let lambda = wavelength(accel_kv);
    2.0 * PI / (lambda * v) * (ELECTRON_REST_ENERGY_EV + v) / (2.0 * ELECTRON_REST_ENERGY_EV + v)
}

/// Slicing and rasterization settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceParams {
    /// Pixels per cell edge; the pitch is `a/n`.
    pub n: usize,
    /// Slab thickness in Å. `None` means one unit cell per slab.
    pub delta_z: Option<f64>,
    pub n_cells_z: usize,
    pub accel_kv: f64,
}

impl Default for SliceParams {
    fn default() -> Self {
        SliceParams {
            n: 16,
            delta_z: None,
            n_cells_z: 1,
            accel_kv: 300.0,
        }
    }
}

/// Projected potential slabs on an `n × n` grid covering one unit cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialSlices {
    pub grid: Grid2,
    /// One `[y, x]` array per slab, V·Å.
    pub slabs: Vec<Array2<f64>>,
    pub delta_z: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub accel_kv: f64,
    pub structure: String,
}

impl PotentialSlices {
    pub fn len(&self) -> usize {
        self.slabs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slabs.is_empty()
    }

    pub fn thickness(&self) -> f64 {
        self.delta_z * self.slabs.len() as f64
    }

    /// `exp(iσV_z)` for slab `k`.
    pub fn transmission(&self, k: usize) -> Array2<C64> {
        self.slabs[k].mapv(|v| C64::from_polar(1.0, self.sigma * v))
    }

    pub fn transmissions(&self) -> Vec<Array2<C64>> {
        (0..self.len()).map(|k| self.transmission(k)).collect()
    }

    /// `σ·Σ_k V_z,k`, the projected phase of the whole specimen.
    pub fn projected_phase(&self) -> Array2<f64> {
        let mut total = Array2::zeros(self.grid.shape());
        for slab in &self.slabs {
            total += slab;
        }
        total * self.sigma
    }
}

/// Pixel-averaged 1D Gaussian `exp(-π²x²/d)` for every pixel of a periodic
/// axis, atom at `x0`.
fn pixel_profile(n: usize, pitch: f64, x0: f64, d: f64) -> Vec<f64> {
    let period = n as f64 * pitch;
    let width = (d / (2.0 * PI * PI)).sqrt();
    let images = (10.0 * width / period).ceil() as i64 + 1;
    let scale = 0.5 * (d / PI).sqrt() / pitch;
    let k = PI / d.sqrt();
    (0..n)
        .map(|i| {
            let centre = i as f64 * pitch - x0;
            let mut acc = 0.0;
            for m in -images..=images {
                let c = centre + m as f64 * period;
                acc += libm::erf(k * (c + 0.5 * pitch)) - libm::erf(k * (c - 0.5 * pitch));
            }
            acc * scale
        })
        .collect()
}

/// Rasterizes `structure` into projected-potential slabs.
pub fn potential_slices(structure: &CrystalStructure, params: &SliceParams) -> Result<PotentialSlices> {
    let n = params.n;
    if n < 8 {
        return Err(Error::InvalidParameter(format!("grid must have n >= 8, got {n}")));
    }
    if params.n_cells_z == 0 {
        return Err(Error::InvalidParameter("need at least one cell along z".into()));
    }
    if !(params.accel_kv > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "accelerating voltage must be positive, got {}",
            params.accel_kv
        )));
    }
    let [a, b, c] = structure.cell;
    let delta_z = params.delta_z.unwrap_or(c);
    if !(delta_z > 0.0) {
        return Err(Error::InvalidParameter(format!("slab thickness must be > 0, got {delta_z}")));
    }
    let total = c * params.n_cells_z as f64;
    let m_float = total / delta_z;
    let m = m_float.round() as usize;
    if m == 0 || (m_float - m as f64).abs() > 1e-9 * m_float.max(1.0) {
        return Err(Error::InvalidParameter(format!(
            "slab thickness {delta_z} Å does not divide the specimen thickness {total} Å"
        )));
    }

    let grid = Grid2::new(n, n, a / n as f64, b / n as f64)?;
    let mut slabs = vec![Array2::<f64>::zeros(grid.shape()); m];
    let prefactor = 2.0 * PI * PI * A0_E;

    for atom in &structure.atoms {
        if !atom.frac.iter().all(|&f| (0.0..1.0).contains(&f)) {
            return Err(Error::InvalidParameter(format!(
                "atom at {:?} lies outside the cell",
                atom.frac
            )));
        }
        let (x0, y0) = (atom.frac[0] * a, atom.frac[1] * b);
        let mut footprint = Array2::<f64>::zeros(grid.shape());
        for (cc, d) in atom.element.gaussian_terms() {
            let px = pixel_profile(n, grid.pitch_x, x0, d);
            let py = pixel_profile(n, grid.pitch_y, y0, d);
            let amp = prefactor * cc / d;
            for (iy, row) in footprint.outer_iter_mut().enumerate() {
                for (ix, v) in row.into_iter().enumerate() {
                    *v += amp * py[iy] * px[ix];
                }
            }
        }
        for rep in 0..params.n_cells_z {
            let z = (atom.frac[2] + rep as f64) * c;
            let k = ((z / delta_z).floor() as usize).min(m - 1);
            slabs[k] += &footprint;
        }
    }

    Ok(PotentialSlices {
        grid,
        slabs,
        delta_z,
        sigma: interaction_constant(params.accel_kv),
        lambda: wavelength(params.accel_kv),
        accel_kv: params.accel_kv,
        structure: structure.name.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_known_cells() {
        let gaas = CrystalStructure::preset(Preset::GaAs);
        assert_eq!(gaas.cell, [5.6533; 3]);
        assert_eq!(gaas.atoms.len(), 8);
        assert_eq!(gaas.count(Element::Ga), 4);
        assert_eq!(gaas.count(Element::As), 4);
        let sto = CrystalStructure::preset(Preset::SrTiO3);
        assert_eq!(sto.cell, [3.905; 3]);
        assert_eq!(sto.atoms.len(), 5);
        assert_eq!(
            (sto.count(Element::Sr), sto.count(Element::Ti), sto.count(Element::O)),
            (1, 1, 3)
        );
    }

    #[test]
    fn unknown_preset_lists_choices() {
        let err = "Si".parse::<Preset>().unwrap_err();
        assert!(err.to_string().contains("GaAs, SrTiO3"));
        assert_eq!("srtio3".parse::<Preset>().unwrap(), Preset::SrTiO3);
    }

    #[test]
    fn random_cubic_is_deterministic_and_in_range() {
        let params = RandomCubicParams::default();
        assert_eq!(random_cubic(42, &params).unwrap(), random_cubic(42, &params).unwrap());
        for seed in 0..100 {
            let s = random_cubic(seed, &params).unwrap();
            assert!(s.cell[0] >= params.lattice_min && s.cell[0] <= params.lattice_max);
            assert!(s.atoms.iter().all(|a| params.elements.contains(&a.element)));
        }
    }

    #[test]
    fn random_cubic_rejects_bad_params() {
        let empty = RandomCubicParams {
            elements: vec![],
            ..Default::default()
        };
        assert!(random_cubic(1, &empty).is_err());
        let wide = RandomCubicParams {
            lattice_min: 2.0,
            ..Default::default()
        };
        assert!(random_cubic(1, &wide).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let s = CrystalStructure::preset(Preset::SrTiO3);
        assert_eq!(CrystalStructure::from_json(&s.to_json()).unwrap(), s);
        let bad = r#"{"name":"x","cell":[4,4,4],"atoms":[{"element":"Fe","frac":[0,0,0]}]}"#;
        assert!(matches!(CrystalStructure::from_json(bad), Err(Error::UnsupportedElement(_))));
        let outside = r#"{"name":"x","cell":[4,4,4],"atoms":[{"element":"O","frac":[1.0,0,0]}]}"#;
        assert!(CrystalStructure::from_json(outside).is_err());
    }

    #[test]
    fn vacuum_slices_are_zero_and_transparent() {
        let s = CrystalStructure::vacuum([4.0; 3]).unwrap();
        let p = potential_slices(&s, &SliceParams { n: 8, ..Default::default() }).unwrap();
        assert!(p.slabs[0].iter().all(|&v| v == 0.0));
        assert!(p.transmission(0).iter().all(|&t| t == C64::new(1.0, 0.0)));
    }

    #[test]
    fn single_atom_peaks_at_its_pixel() {
        let s = CrystalStructure::new(
            "Ti",
            [4.0; 3],
            vec![Atom { element: Element::Ti, frac: [0.5, 0.5, 0.0] }],
        )
        .unwrap();
        let p = potential_slices(&s, &SliceParams { n: 16, ..Default::default() }).unwrap();
        let v = &p.slabs[0];
        let (imax, _) = v
            .indexed_iter()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert_eq!(imax, (8, 8));
        // four-fold symmetry about the atom
        for d in 1..6 {
            let r = v[[8, 8 + d]];
            for other in [v[[8, 8 - d]], v[[8 + d, 8]], v[[8 - d, 8]]] {
                assert!((r - other).abs() < 1e-9 * r.abs().max(1.0));
            }
        }
        assert!(v.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn slab_assignment_and_thickness() {
        let s = CrystalStructure::preset(Preset::GaAs);
        let half = potential_slices(
            &s,
            &SliceParams { n: 8, delta_z: Some(5.6533 / 2.0), n_cells_z: 1, accel_kv: 300.0 },
        )
        .unwrap();
        assert_eq!(half.len(), 2);
        assert!((half.thickness() - 5.6533).abs() < 1e-12);
        assert!(potential_slices(
            &s,
            &SliceParams { n: 8, delta_z: Some(2.0), n_cells_z: 1, accel_kv: 300.0 },
        )
        .is_err());
        assert!(potential_slices(&s, &SliceParams { n: 4, ..Default::default() }).is_err());
    }

    #[test]
    fn wavelength_at_300kv() {
        assert!((wavelength(300.0) - 0.019687).abs() < 1e-6);
        assert!((interaction_constant(300.0) - 6.526e-4).abs() < 1e-6);
    }
}
