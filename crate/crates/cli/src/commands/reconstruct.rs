//! `reconstruct`: one method on one dataset.

use std::path::PathBuf;

use serde::Serialize;

use flowtie::container::load_dataset;
use flowtie::microscope::FourDDataset;
use flowtie::nn::{load_model, FlowModel};
use flowtie::recon::{flowtie_reconstruct_with, gd_reconstruct, GdOptions, Method, ReconResult, TailOptions};
use flowtie::tie::{tie_reconstruct_with, TieVariant};

use crate::error::{CliError, Result};

/// Method settings shared by `reconstruct` and `benchmark`.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodParams {
    pub tie_eps: f64,
    pub tie_variant: TieVariant,
    pub gd_iters: usize,
    /// Seed of the gradient-descent step-size estimate.
    pub seed: u64,
    /// Absolute ridge for the matrix-potential estimate; relative default
    /// when absent.
    pub ridge: Option<f64>,
    pub keep_matrix: bool,
}

impl Default for MethodParams {
    fn default() -> Self {
        MethodParams {
            tie_eps: 0.0,
            tie_variant: TieVariant::Poisson,
            gd_iters: GdOptions::default().iters,
            seed: 0,
            ridge: None,
            keep_matrix: false,
        }
    }
}

impl MethodParams {
    fn tail(&self) -> TailOptions {
        TailOptions {
            ridge: self.ridge,
            keep_matrix: self.keep_matrix,
        }
    }
}

/// Runs `method`; FlowTIE needs a model.
pub fn run_method(ds: &FourDDataset, method: Method, model: Option<&FlowModel>, params: &MethodParams) -> Result<ReconResult> {
    Ok(match method {
        Method::Tie => tie_reconstruct_with(ds, params.tie_eps, params.tie_variant, &params.tail())?,
        Method::FlowTie => {
            let model = model.ok_or_else(|| CliError::Usage("FlowTIE needs --checkpoint".into()))?;
            flowtie_reconstruct_with(ds, model, &params.tail())?
        }
        Method::Gd => {
            let opts = GdOptions {
                iters: params.gd_iters,
                seed: params.seed,
                keep_matrix: params.keep_matrix,
                ..GdOptions::default()
            };
            let mut r = gd_reconstruct(ds, &opts)?;
            if let Some(ridge) = params.ridge {
                r.set_config("ridge", ridge);
            }
            r
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructOptions {
    pub dataset: PathBuf,
    pub method: Method,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub params: MethodParams,
}

/// Printed as JSON on stdout.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReconSummary {
    pub method: Method,
    pub dataset: PathBuf,
    pub structure: String,
    pub thickness: f64,
    pub mse: f64,
    pub wall_time: f64,
    pub off_diagonal: f64,
    pub dark_channels: usize,
    pub flagged_pixels: usize,
    pub objective_first: Option<f64>,
    pub objective_last: Option<f64>,
    pub out: Option<PathBuf>,
}

pub fn reconstruct(opts: &ReconstructOptions) -> Result<(ReconResult, ReconSummary)> {
    let ds = load_dataset(&opts.dataset)?;
    let model = match (&opts.checkpoint, opts.method) {
        (Some(dir), Method::FlowTie) => Some(load_model(dir)?),
        _ => None,
    };
    let result = run_method(&ds, opts.method, model.as_ref(), &opts.params)?;
    if let Some(out) = &opts.out {
        result.save(out)?;
    }
    let summary = ReconSummary {
        method: result.method,
        dataset: opts.dataset.clone(),
        structure: ds.structure.clone(),
        thickness: ds.thickness,
        mse: result.mse,
        wall_time: result.wall_time,
        off_diagonal: result.off_diagonal,
        dark_channels: result.dark_channels,
        flagged_pixels: result.flagged_pixels,
        objective_first: result.objective.first().copied(),
        objective_last: result.objective.last().copied(),
        out: opts.out.clone(),
    };
    Ok((result, summary))
}
