//! `gen-data`: procedural training corpus plus held-out test datasets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowtie::container::save_dataset;
use flowtie::microscope::{simulate_4d, ProbeParams, ScanGrid};
use flowtie::specimen::{potential_slices, random_cubic, CrystalStructure, Preset, RandomCubicParams, SliceParams};

use crate::corpus::{Acquisition, Corpus, Split, StructureEntry, TestEntry};
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GenDataOptions {
    pub out: PathBuf,
    pub structures: usize,
    pub n: usize,
    pub scan: usize,
    pub seed: u64,
    pub accel_kv: f64,
    pub semi_angle_mrad: f64,
    pub defocus_step: f64,
    /// Candidate thicknesses (unit cells) for training structures.
    pub cells: Vec<usize>,
    pub val_fraction: f64,
    pub presets: Vec<Preset>,
    pub test_cells: Vec<usize>,
    pub structure_files: Vec<PathBuf>,
    pub threads: usize,
}

impl GenDataOptions {
    /// Desk-scale defaults writing to `out`.
    pub fn desk(out: impl Into<PathBuf>) -> Self {
        GenDataOptions {
            out: out.into(),
            structures: 10,
            n: 16,
            scan: 16,
            seed: 7,
            accel_kv: 300.0,
            semi_angle_mrad: 20.0,
            defocus_step: 50.0,
            cells: vec![1, 2, 3, 4, 5],
            val_fraction: 0.1,
            presets: vec![Preset::GaAs, Preset::SrTiO3],
            test_cells: vec![1, 5],
            structure_files: Vec::new(),
            threads: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Core(flowtie::Error::InvalidParameter(m)));
        if self.structures == 0 {
            return bad("at least one structure is required".into());
        }
        if self.scan == 0 || self.n % self.scan != 0 {
            return bad(format!(
                "scan {0}x{0} does not cover the {1}x{1} grid with whole-pixel steps",
                self.scan, self.n
            ));
        }
        if self.cells.is_empty() || self.cells.contains(&0) || self.test_cells.contains(&0) {
            return bad("thickness lists need positive cell counts".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("validation fraction {} must lie in [0, 1)", self.val_fraction));
        }
        Ok(())
    }

    fn acquisition(&self) -> Acquisition {
        Acquisition {
            n: self.n,
            scan: self.scan,
            accel_kv: self.accel_kv,
            semi_angle_mrad: self.semi_angle_mrad,
            defocus_step: self.defocus_step,
        }
    }
}

/// Number of validation structures out of `count`: at least one whenever
/// two or more exist and the fraction is positive.
pub fn validation_count(count: usize, fraction: f64) -> usize {
    if count < 2 || fraction <= 0.0 {
        return 0;
    }
    ((count as f64 * fraction).round() as usize).clamp(1, count - 1)
}

/// Train/validation assignment; a pure function of seed and count.
pub fn split_assignment(seed: u64, count: usize, fraction: f64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    order.shuffle(&mut rng);
    let n_val = validation_count(count, fraction);
    let mut splits = vec![Split::Train; count];
    for &i in &order[..n_val] {
        splits[i] = Split::Val;
    }
    splits
}

struct Job {
    structure: CrystalStructure,
    cells: usize,
    dir: PathBuf,
}

fn simulate_and_save(job: &Job, opts: &GenDataOptions) -> Result<f64> {
    let slices = potential_slices(
        &job.structure,
        &SliceParams {
            n: opts.n,
            delta_z: None,
            n_cells_z: job.cells,
            accel_kv: opts.accel_kv,
        },
    )?;
    let scan = ScanGrid::new(&slices.grid, opts.scan, opts.scan)?;
    let probe = ProbeParams {
        semi_angle_mrad: opts.semi_angle_mrad,
    };
    let ds = simulate_4d(&slices, &probe, &scan, opts.defocus_step)?;
    save_dataset(&ds, &job.dir)?;
    let path = job.dir.join("structure.json");
    fs::write(&path, job.structure.to_json()).map_err(|e| CliError::io(&path, e))?;
    Ok(ds.thickness)
}

fn run_jobs(jobs: &[Job], opts: &GenDataOptions) -> Result<Vec<f64>> {
    let threads = opts.threads.max(1).min(jobs.len().max(1));
    if threads == 1 {
        return jobs.iter().map(|j| simulate_and_save(j, opts)).collect();
    }
    let chunk = jobs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|j| simulate_and_save(j, opts)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(jobs.len());
        for h in handles {
            out.extend(h.join().expect("generation worker panicked")?);
        }
        Ok(out)
    })
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

/// Generates the corpus and returns its manifest.
pub fn gen_data(opts: &GenDataOptions) -> Result<Corpus> {
    opts.validate()?;
    fs::create_dir_all(&opts.out).map_err(|e| CliError::io(&opts.out, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let params = RandomCubicParams::default();
    let splits = split_assignment(opts.seed, opts.structures, opts.val_fraction);

    let mut jobs = Vec::new();
    let mut entries = Vec::new();
    for (i, split) in splits.iter().enumerate() {
        let seed = rng.next_u64();
        let cells = opts.cells[rng.gen_range(0..opts.cells.len())];
        let structure = random_cubic(seed, &params)?;
        let path = format!("structures/{i:03}-{}", slug(&structure.name));
        entries.push(StructureEntry {
            name: structure.name.clone(),
            path: path.clone(),
            split: *split,
            seed,
            cells,
            lattice: structure.cell[0],
            thickness: 0.0,
        });
        jobs.push(Job {
            structure,
            cells,
            dir: opts.out.join(path),
        });
    }

    let mut tests = Vec::new();
    let mut test_structures: Vec<(String, CrystalStructure)> =
        opts.presets.iter().map(|p| (p.name().to_string(), CrystalStructure::preset(*p))).collect();
    for file in &opts.structure_files {
        let s = CrystalStructure::load(file)?;
        test_structures.push((s.name.clone(), s));
    }
    for (material, structure) in test_structures {
        for &cells in &opts.test_cells {
            let label = format!("{material}-{cells}");
            let path = format!("test/{}", slug(&label));
            tests.push(TestEntry {
                label,
                material: material.clone(),
                path: path.clone(),
                cells,
                thickness: 0.0,
            });
            jobs.push(Job {
                structure: structure.clone(),
                cells,
                dir: opts.out.join(path),
            });
        }
    }

    let thicknesses = run_jobs(&jobs, opts)?;
    let (train_t, test_t) = thicknesses.split_at(entries.len());
    entries.iter_mut().zip(train_t).for_each(|(e, t)| e.thickness = *t);
    tests.iter_mut().zip(test_t).for_each(|(e, t)| e.thickness = *t);

    let corpus = Corpus {
        kind: "flowtie-corpus".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: opts.seed,
        acquisition: opts.acquisition(),
        structures: entries,
        tests,
    };
    corpus.save(&opts.out)?;
    Ok(corpus)
}

/// One-line summary of a generated corpus.
pub fn describe(corpus: &Corpus, root: &Path) -> String {
    let n_train = corpus.split(Split::Train).count();
    let n_val = corpus.split(Split::Val).count();
    format!(
        "wrote {} structures ({n_train} train / {n_val} val) and {} test datasets to {}",
        corpus.structures.len(),
        corpus.tests.len(),
        root.display()
    )
}
