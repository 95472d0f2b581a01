//! Training loop and checkpoints.
//!
//! One batch is one 4D sample. The visiting order of every epoch comes from
//! a generator seeded by `(seed, epoch)`, so a run resumed from a checkpoint
//! replays exactly the batches the uninterrupted run would have seen.

use std::path::Path;

use ndarray::{Array1, Array4, Array5, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Param;
use super::loss::{loss_cont, loss_phase_with, loss_vf, LossBreakdown, LossWeights};
use super::model::{FlowConfig, FlowModel};
use super::optim::{AdamW, AdamWConfig};
use crate::container::{self, Bundle, Tensor};
use crate::error::{Error, Result};
use crate::field::{Grid2, Spectral};
use crate::microscope::FourDDataset;

/// One training example: a single 4D dataset with its labels, batch axis
/// of length one.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub i_deriv: Array4<f64>,
    pub i_zero: Array4<f64>,
    pub v_gt: Array5<f64>,
    /// Carrier-free phase, the part a periodic integrator can reproduce.
    pub phase_gt: Array4<f64>,
    pub lambda: f64,
    /// Scan grid (pitch = scan step).
    pub scan: Grid2,
}

impl Sample {
    pub fn from_dataset(ds: &FourDDataset) -> Result<Self> {
        ds.validate()?;
        Ok(Sample {
            name: ds.structure.clone(),
            i_deriv: ds.axial_derivative()?.insert_axis(Axis(0)),
            i_zero: ds.i_zero.clone().insert_axis(Axis(0)),
            v_gt: ds.vfield_gt.clone().insert_axis(Axis(0)),
            phase_gt: ds.probe_frame_phase().insert_axis(Axis(0)),
            lambda: ds.lambda,
            scan: ds.scan.grid(),
        })
    }

    /// `(C, H, W)` of the sample.
    pub fn geometry(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.i_deriv.dim();
        (c, h, w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub d: usize,
    pub kernel: usize,
    pub weights: LossWeights,
    pub optim: AdamWConfig,
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            seed: 0,
            d: 32,
            kernel: 3,
            weights: LossWeights::default(),
            optim: AdamWConfig::default(),
            normalization: Normalization::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's batches, measured before each update.
    pub train: LossBreakdown,
    /// Evaluation-mode losses after the epoch.
    pub val: Option<LossBreakdown>,
}

impl EpochRecord {
    /// Validation total when available, else training total.
    pub fn score(&self) -> f64 {
        self.val.map_or(self.train.total, |v| v.total)
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: FlowModel,
    pub optimizer: AdamW,
    pub history: Vec<EpochRecord>,
    pub best: FlowModel,
    pub best_epoch: usize,
}

impl TrainState {
    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn best_score(&self) -> f64 {
        self.history
            .iter()
            .find(|r| r.epoch == self.best_epoch)
            .map_or(f64::INFINITY, EpochRecord::score)
    }
}

/// How input statistics are pooled over the training corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// One mean and deviation shared by every channel.
    #[default]
    Scalar,
    /// A mean and deviation per detector channel.
    PerChannel,
}

/// Corpus mean and standard deviation of the inputs, per channel or pooled.
/// Zero deviations fall back to one.
pub fn input_statistics(samples: &[Sample], mode: Normalization) -> (Array1<f64>, Array1<f64>) {
    let c = samples.first().map_or(0, |s| s.geometry().0);
    let mut sum = Array1::<f64>::zeros(c);
    let mut count = 0usize;
    for s in samples {
        for (ci, plane) in s.i_deriv.axis_iter(Axis(1)).enumerate() {
            sum[ci] += plane.sum();
        }
        count += s.i_deriv.len() / c.max(1);
    }
    let pooled = |a: &Array1<f64>| Array1::from_elem(c, a.sum() / c.max(1) as f64);
    let mut mean = sum / count.max(1) as f64;
    if mode == Normalization::Scalar {
        mean = pooled(&mean);
    }
    let mut var = Array1::<f64>::zeros(c);
    for s in samples {
        for (ci, plane) in s.i_deriv.axis_iter(Axis(1)).enumerate() {
            let m = mean[ci];
            var[ci] += plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
    }
    let mut var = var / count.max(1) as f64;
    if mode == Normalization::Scalar {
        var = pooled(&var);
    }
    let std = var.mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
    (mean, std)
}

fn check_samples(train: &[Sample], val: &[Sample]) -> Result<(usize, usize, usize)> {
    let first = train
        .first()
        .ok_or_else(|| Error::InvalidParameter("training needs at least one sample".into()))?;
    let geometry = first.geometry();
    for s in train.iter().chain(val) {
        if s.geometry() != geometry {
            return Err(Error::GridMismatch(format!(
                "sample {} has geometry {:?}, expected {:?}",
                s.name,
                s.geometry(),
                geometry
            )));
        }
    }
    Ok(geometry)
}

/// Fresh model and optimizer for the given corpus.
pub fn init_training(train: &[Sample], val: &[Sample], config: &TrainConfig) -> Result<TrainState> {
    let (c, h, w) = check_samples(train, val)?;
    let flow = FlowConfig {
        c_in: c,
        d: config.d,
        kernel: config.kernel,
        height: h,
        width: w,
    };
    let mut model = FlowModel::new(flow, config.seed)?;
    let (mean, std) = input_statistics(train, config.normalization);
    model.set_normalization(mean, std)?;
    Ok(TrainState {
        config: *config,
        best: model.clone(),
        model,
        optimizer: AdamW::new(config.optim)?,
        history: Vec::new(),
        best_epoch: 0,
    })
}

/// Losses of one prediction against one sample.
pub fn sample_losses(
    v: &Array5<f64>,
    sample: &Sample,
    spectral: &Spectral,
    weights: &LossWeights,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Array5<f64>>)> {
    let vf = loss_vf(v, &sample.v_gt)?;
    let cont = loss_cont(&sample.i_deriv, &sample.i_zero, v, sample.lambda, &sample.scan)?;
    let phase = loss_phase_with(v, &sample.phase_gt, spectral)?;
    let breakdown = LossBreakdown::weighted(vf.value, cont.value, phase.value, weights);
    let grad = with_grad.then(|| {
        let mut g = vf.grad * weights.alpha;
        g.scaled_add(weights.beta, &cont.grad);
        g.scaled_add(weights.gamma, &phase.grad);
        g
    });
    Ok((breakdown, grad))
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        vf: sum(|b| b.vf),
        cont: sum(|b| b.cont),
        phase: sum(|b| b.phase),
        total: sum(|b| b.total),
    }
}

/// Evaluation-mode losses averaged over samples.
pub fn evaluate(model: &FlowModel, samples: &[Sample], weights: &LossWeights) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Ok(LossBreakdown::default());
    }
    let mut items = Vec::with_capacity(samples.len());
    for s in samples {
        let v = model.infer(s.i_deriv.view())?;
        items.push(sample_losses(&v, s, &Spectral::new(s.scan), weights, false)?.0);
    }
    Ok(mean_breakdown(&items))
}

/// Visiting order of epoch `epoch` (1-based).
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Runs one epoch and appends its record.
pub fn train_epoch(state: &mut TrainState, train: &[Sample], val: &[Sample]) -> Result<EpochRecord> {
    check_samples(train, val)?;
    let epoch = state.epochs_done() + 1;
    let weights = state.config.weights;
    let mut items = Vec::with_capacity(train.len());
    state.model.train();
    for (batch, &idx) in epoch_order(state.config.seed, epoch, train.len()).iter().enumerate() {
        let sample = &train[idx];
        let diverged = |what: String| Error::Diverged { epoch, batch, what };
        state.model.zero_grad();
        let v = state
            .model
            .forward(sample.i_deriv.view())
            .map_err(|e| diverged(format!("forward on {}: {e}", sample.name)))?;
        let (losses, grad) = sample_losses(&v, sample, &Spectral::new(sample.scan), &weights, true)?;
        if !losses.is_finite() {
            return Err(diverged(format!("non-finite loss {losses:?} on {}", sample.name)));
        }
        state.model.backward(&grad.expect("gradient requested"));
        let mut params: Vec<(&'static str, &mut Param)> = state.model.params_mut();
        state
            .optimizer
            .step(&mut params)
            .map_err(|e| diverged(format!("optimizer step on {}: {e}", sample.name)))?;
        items.push(losses);
    }
    state.model.eval();
    let val_losses = if val.is_empty() {
        None
    } else {
        Some(evaluate(&state.model, val, &weights)?)
    };
    let record = EpochRecord {
        epoch,
        train: mean_breakdown(&items),
        val: val_losses,
    };
    state.history.push(record);
    if record.score() < state.best_score() {
        state.best = state.model.clone();
        state.best_epoch = epoch;
    }
    Ok(record)
}

/// Trains until `state.config.epochs` epochs are done, calling `on_epoch`
/// after each.
pub fn train_until(
    state: &mut TrainState,
    train: &[Sample],
    val: &[Sample],
    mut on_epoch: impl FnMut(&TrainState, &EpochRecord) -> Result<()>,
) -> Result<()> {
    while state.epochs_done() < state.config.epochs {
        let record = train_epoch(state, train, val)?;
        on_epoch(state, &record)?;
    }
    Ok(())
}

/// Fresh training run over a corpus; returns the final state whose `best`
/// field holds the best-validation model.
pub fn train_flowtie(train: &[Sample], val: &[Sample], config: &TrainConfig) -> Result<TrainState> {
    let mut state = init_training(train, val, config)?;
    train_until(&mut state, train, val, |_, _| Ok(()))?;
    Ok(state)
}

pub const CHECKPOINT_BEST: &str = "best";
pub const CHECKPOINT_LAST: &str = "last";

fn write_model(b: &mut Bundle, model: &FlowModel) -> Result<()> {
    for (name, p) in model.params() {
        b.put(name, &Tensor::F64(p.value.clone()))?;
    }
    let mut m = model.clone();
    for (name, buf) in m.buffers_mut() {
        b.put_f64(name, buf)?;
    }
    b.set_meta("flow_config", model.config);
    b.put_f64("input_mean", &model.input_mean)?;
    b.put_f64("input_std", &model.input_std)?;
    Ok(())
}

fn read_model(b: &Bundle) -> Result<FlowModel> {
    let config: FlowConfig = b.meta("flow_config")?;
    let mut model = FlowModel::new(config, 0)?;
    let stat = |name: &str| -> Result<Array1<f64>> {
        let a = b.get_f64(name)?;
        let shape = a.shape().to_vec();
        a.into_dimensionality()
            .map_err(|_| Error::shape(format!("checkpoint {name}"), &[config.c_in], &shape))
    };
    model.set_normalization(stat("input_mean")?, stat("input_std")?)?;
    for (name, p) in model.params_mut() {
        let v = b.get_f64(name)?;
        if v.shape() != p.value.shape() {
            return Err(Error::shape(format!("checkpoint {name}"), p.value.shape(), v.shape()));
        }
        p.value = v;
    }
    for (name, buf) in model.buffers_mut() {
        let v = b.get_f64(name)?;
        if v.shape() != buf.shape() {
            return Err(Error::shape(format!("checkpoint {name}"), buf.shape(), v.shape()));
        }
        *buf = v.into_dimensionality().expect("1-D buffer");
    }
    model.eval();
    Ok(model)
}

/// Writes `dir/best` (model) and `dir/last` (model, optimizer, history).
pub fn save_checkpoint(dir: &Path, state: &TrainState) -> Result<()> {
    let mut best = Bundle::create(&dir.join(CHECKPOINT_BEST), "flowtie-model")?;
    write_model(&mut best, &state.best)?;
    best.set_meta("epoch", state.best_epoch);
    best.set_meta("seed", state.config.seed);
    best.set_meta("score", state.best_score());
    best.finish()?;

    let mut last = Bundle::create(&dir.join(CHECKPOINT_LAST), "flowtie-train-state")?;
    write_model(&mut last, &state.model)?;
    for (name, m) in &state.optimizer.m {
        last.put(&format!("adamw.m.{name}"), &Tensor::F64(m.clone()))?;
    }
    for (name, v) in &state.optimizer.v {
        last.put(&format!("adamw.v.{name}"), &Tensor::F64(v.clone()))?;
    }
    last.set_meta("adamw_step", state.optimizer.step);
    last.set_meta("train_config", state.config);
    last.set_meta("history", &state.history);
    last.set_meta("best_epoch", state.best_epoch);
    last.set_meta("epoch", state.epochs_done());
    last.set_meta("seed", state.config.seed);
    last.finish()
}

/// Restores a training state written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let last = Bundle::open(&dir.join(CHECKPOINT_LAST))?;
    let config: TrainConfig = last.meta("train_config")?;
    let mut model = read_model(&last)?;
    model.train();
    let mut optimizer = AdamW::new(config.optim)?;
    optimizer.step = last.meta("adamw_step")?;
    for name in last.manifest.tensors.keys() {
        if let Some(param) = name.strip_prefix("adamw.m.") {
            optimizer.m.insert(param.to_string(), last.get_f64(name)?);
        } else if let Some(param) = name.strip_prefix("adamw.v.") {
            optimizer.v.insert(param.to_string(), last.get_f64(name)?);
        }
    }
    let best = read_model(&Bundle::open(&dir.join(CHECKPOINT_BEST))?)?;
    Ok(TrainState {
        config,
        model,
        optimizer,
        history: last.meta("history")?,
        best,
        best_epoch: last.meta("best_epoch")?,
    })
}

/// Loads an inference model from a checkpoint directory (its `best` model)
/// or directly from a model bundle.
pub fn load_model(dir: &Path) -> Result<FlowModel> {
    let best = dir.join(CHECKPOINT_BEST);
    let path = if best.join(container::MANIFEST).exists() { best } else { dir.to_path_buf() };
    read_model(&Bundle::open(&path)?)
}
