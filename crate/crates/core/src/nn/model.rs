//! The convolutional flow predictor.

use ndarray::{Array1, Array3, Array4, Array5, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, Conv2d, Gelu, Param};
use crate::error::{Error, Result};

/// Architecture hyperparameters stored with every checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Input channels (`N²` detector pixels).
    pub c_in: usize,
    /// Hidden width.
    pub d: usize,
    pub kernel: usize,
    /// Scan grid the model was built for.
    pub height: usize,
    pub width: usize,
}

/// `conv → BN → GELU` three times, then a linear `conv` to `2·C_in`
/// channels read as `(x, y)` flow components per input channel.
#[derive(Clone, Debug)]
pub struct FlowModel {
    pub config: FlowConfig,
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    act1: Gelu,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    act2: Gelu,
    pub conv3: Conv2d,
    pub bn3: BatchNorm2d,
    act3: Gelu,
    pub conv4: Conv2d,
    /// Per-channel input standardization `(x - mean[c]) / std[c]`.
    pub input_mean: Array1<f64>,
    pub input_std: Array1<f64>,
    pub training: bool,
}

impl FlowModel {
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        let FlowConfig { c_in, d, kernel, height, width } = config;
        if c_in == 0 || d == 0 {
            return Err(Error::InvalidParameter("model widths must be positive".into()));
        }
        if kernel % 2 == 0 || kernel > height.min(width) {
            return Err(Error::InvalidParameter(format!(
                "kernel {kernel} must be odd and no larger than the {height}x{width} scan"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(FlowModel {
            config,
            conv1: Conv2d::new(c_in, d, kernel, &mut rng),
            bn1: BatchNorm2d::new(d),
            act1: Gelu::new(),
            conv2: Conv2d::new(d, d, kernel, &mut rng),
            bn2: BatchNorm2d::new(d),
            act2: Gelu::new(),
            conv3: Conv2d::new(d, d, kernel, &mut rng),
            bn3: BatchNorm2d::new(d),
            act3: Gelu::new(),
            conv4: Conv2d::new(d, 2 * c_in, kernel, &mut rng),
            input_mean: Array1::zeros(c_in),
            input_std: Array1::ones(c_in),
            training: true,
        })
    }

    pub fn set_normalization(&mut self, mean: Array1<f64>, std: Array1<f64>) -> Result<()> {
        let c = self.config.c_in;
        if mean.len() != c || std.len() != c {
            return Err(Error::shape("input normalization", &[c], &[mean.len().min(std.len())]));
        }
        if mean.iter().any(|m| !m.is_finite()) || std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter(
                "input normalization needs finite means and positive finite deviations".into(),
            ));
        }
        self.input_mean = mean;
        self.input_std = std;
        Ok(())
    }

    pub fn train(&mut self) {
        self.training = true;
    }

    pub fn eval(&mut self) {
        self.training = false;
    }

    /// Rejects inputs whose channel count or scan shape differ from the
    /// model's.
    pub fn check_geometry(&self, c: usize, h: usize, w: usize) -> Result<()> {
        let cfg = &self.config;
        if (c, h, w) != (cfg.c_in, cfg.height, cfg.width) {
            return Err(Error::GridMismatch(format!(
                "model expects {} channels on a {}x{} scan, data has {c} channels on {h}x{w}",
                cfg.c_in, cfg.height, cfg.width
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        self.check_geometry(c, h, w)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input"));
        }
        Ok(())
    }

    fn standardize(&self, x: ArrayView4<f64>) -> Array4<f64> {
        let mut out = x.to_owned();
        for (c, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.input_mean[c], self.input_std[c]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    fn split_output(&self, y: Array4<f64>) -> Array5<f64> {
        let (b, _, h, w) = y.dim();
        y.into_shape_with_order((b, 2, self.config.c_in, h, w))
            .expect("contiguous output")
    }

    /// Forward pass recording caches for [`FlowModel::backward`]. Batch
    /// norm uses batch statistics in training mode.
    pub fn forward(&mut self, x: ArrayView4<f64>) -> Result<Array5<f64>> {
        self.check_input(&x)?;
        let train = self.training;
        let h = self.standardize(x);
        let h = self.conv1.forward(h.view());
        let h = self.bn1.forward(h.view(), train);
        let h = self.act1.forward(h.view());
        let h = self.conv2.forward(h.view());
        let h = self.bn2.forward(h.view(), train);
        let h = self.act2.forward(h.view());
        let h = self.conv3.forward(h.view());
        let h = self.bn3.forward(h.view(), train);
        let h = self.act3.forward(h.view());
        let y = self.conv4.forward(h.view());
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model output"));
        }
        Ok(self.split_output(y))
    }

    /// Evaluation-mode forward without caches.
    pub fn infer(&self, x: ArrayView4<f64>) -> Result<Array5<f64>> {
        self.check_input(&x)?;
        let h = self.standardize(x);
        let h = self.act1.infer(self.bn1.infer(self.conv1.infer(h.view()).view()).view());
        let h = self.act2.infer(self.bn2.infer(self.conv2.infer(h.view()).view()).view());
        let h = self.act3.infer(self.bn3.infer(self.conv3.infer(h.view()).view()).view());
        let y = self.conv4.infer(h.view());
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model output"));
        }
        Ok(self.split_output(y))
    }

    /// Predicted `(2, C, H, W)` flow for one `(C, H, W)` axial derivative.
    pub fn predict(&self, i_deriv: &Array3<f64>) -> Result<Array4<f64>> {
        let x = i_deriv.view().insert_axis(Axis(0));
        Ok(self.infer(x)?.index_axis_move(Axis(0), 0))
    }

    /// Back-propagates `dL/dy` through the last forward pass, accumulating
    /// parameter gradients; returns `dL/dx`.
    pub fn backward(&mut self, dy: &Array5<f64>) -> Array4<f64> {
        let (b, two, c, h, w) = dy.dim();
        let g = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, two * c, h, w))
            .expect("contiguous gradient");
        let g = self.conv4.backward(g.view());
        let g = self.act3.backward(g.view());
        let g = self.bn3.backward(g.view());
        let g = self.conv3.backward(g.view());
        let g = self.act2.backward(g.view());
        let g = self.bn2.backward(g.view());
        let g = self.conv2.backward(g.view());
        let g = self.act1.backward(g.view());
        let g = self.bn1.backward(g.view());
        let mut g = self.conv1.backward(g.view());
        for (c, mut plane) in g.axis_iter_mut(Axis(1)).enumerate() {
            let s = self.input_std[c];
            plane.mapv_inplace(|v| v / s);
        }
        g
    }

    /// Trainable parameters in a fixed order with stable names.
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![
            ("conv1.weight", &mut self.conv1.weight),
            ("conv1.bias", &mut self.conv1.bias),
            ("bn1.gamma", &mut self.bn1.gamma),
            ("bn1.beta", &mut self.bn1.beta),
            ("conv2.weight", &mut self.conv2.weight),
            ("conv2.bias", &mut self.conv2.bias),
            ("bn2.gamma", &mut self.bn2.gamma),
            ("bn2.beta", &mut self.bn2.beta),
            ("conv3.weight", &mut self.conv3.weight),
            ("conv3.bias", &mut self.conv3.bias),
            ("bn3.gamma", &mut self.bn3.gamma),
            ("bn3.beta", &mut self.bn3.beta),
            ("conv4.weight", &mut self.conv4.weight),
            ("conv4.bias", &mut self.conv4.bias),
        ]
    }

    pub fn params(&self) -> Vec<(&'static str, &Param)> {
        vec![
            ("conv1.weight", &self.conv1.weight),
            ("conv1.bias", &self.conv1.bias),
            ("bn1.gamma", &self.bn1.gamma),
            ("bn1.beta", &self.bn1.beta),
            ("conv2.weight", &self.conv2.weight),
            ("conv2.bias", &self.conv2.bias),
            ("bn2.gamma", &self.bn2.gamma),
            ("bn2.beta", &self.bn2.beta),
            ("conv3.weight", &self.conv3.weight),
            ("conv3.bias", &self.conv3.bias),
            ("bn3.gamma", &self.bn3.gamma),
            ("bn3.beta", &self.bn3.beta),
            ("conv4.weight", &self.conv4.weight),
            ("conv4.bias", &self.conv4.bias),
        ]
    }

    /// Batch-norm running statistics by name.
    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut ndarray::Array1<f64>)> {
        vec![
            ("bn1.running_mean", &mut self.bn1.running_mean),
            ("bn1.running_var", &mut self.bn1.running_var),
            ("bn2.running_mean", &mut self.bn2.running_mean),
            ("bn2.running_var", &mut self.bn2.running_var),
            ("bn3.running_mean", &mut self.bn3.running_mean),
            ("bn3.running_var", &mut self.bn3.running_var),
        ]
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}
