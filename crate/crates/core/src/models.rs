//! Small reconstruction / forecasting models with per-channel losses.
//!
//! Every architecture applies one shared map to each channel's column of
//! the window, so internally a window is handled channel-major: an
//! `N × window` matrix whose row `j` is channel `j`. `mlp_mix` first mixes
//! the rows through an `N × N` matrix.
//!
//! The loss of a channel is the SUM of squared errors over its output
//! timesteps, and the loss of a window is the sum over channels. Gradient
//! linearity then makes per-channel gradients add up to the window gradient
//! exactly, which is what the influence decomposition relies on.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientVector, NodeId, ParamSubset, Params, Tape, Tensor};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::series::MtsWindow;

pub const MIX_WEIGHT: &str = "mix.weight";
pub const HIDDEN_WEIGHT: &str = "hidden.weight";
pub const HIDDEN_BIAS: &str = "hidden.bias";
pub const OUT_WEIGHT: &str = "out.weight";
pub const OUT_BIAS: &str = "out.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// One linear map per channel column, shared across channels.
    LinearCi,
    /// Shared two-layer perceptron per channel column.
    MlpCi,
    /// Linear channel mixing followed by the shared perceptron.
    MlpMix,
}

impl Architecture {
    pub fn is_channel_independent(self) -> bool {
        !matches!(self, Architecture::MlpMix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Input length `w`.
    pub window: usize,
    /// Forecast horizon; `None` reconstructs the input window.
    #[serde(default)]
    pub horizon: Option<usize>,
    pub channels: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_hidden() -> usize {
    16
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl ModelSpec {
    pub fn reconstruction(architecture: Architecture, window: usize, channels: usize, hidden: usize) -> Self {
        Self {
            architecture,
            window,
            horizon: None,
            channels,
            hidden,
            activation: Activation::Relu,
        }
    }

    pub fn forecasting(
        architecture: Architecture,
        window: usize,
        horizon: usize,
        channels: usize,
        hidden: usize,
    ) -> Self {
        Self {
            horizon: Some(horizon),
            ..Self::reconstruction(architecture, window, channels, hidden)
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn output_len(&self) -> usize {
        self.horizon.unwrap_or(self.window)
    }

    /// Rows a sample window must have: input plus horizon when forecasting.
    pub fn sample_len(&self) -> usize {
        self.window + self.horizon.unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(invalid("window must be positive"));
        }
        if self.horizon == Some(0) {
            return Err(invalid("horizon must be positive when set"));
        }
        if self.channels == 0 {
            return Err(invalid("channels must be positive"));
        }
        if self.architecture != Architecture::LinearCi && self.hidden == 0 {
            return Err(invalid("hidden width must be positive for mlp architectures"));
        }
        Ok(())
    }

    /// Parameter names and shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (w, out, h) = (self.window, self.output_len(), self.hidden);
        match self.architecture {
            Architecture::LinearCi => vec![(OUT_WEIGHT, vec![w, out]), (OUT_BIAS, vec![out])],
            Architecture::MlpCi => vec![
                (HIDDEN_WEIGHT, vec![w, h]),
                (HIDDEN_BIAS, vec![h]),
                (OUT_WEIGHT, vec![h, out]),
                (OUT_BIAS, vec![out]),
            ],
            Architecture::MlpMix => vec![
                (MIX_WEIGHT, vec![self.channels, self.channels]),
                (HIDDEN_WEIGHT, vec![w, h]),
                (HIDDEN_BIAS, vec![h]),
                (OUT_WEIGHT, vec![h, out]),
                (OUT_BIAS, vec![out]),
            ],
        }
    }
}

/// Which parameters a gradient is taken over.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum GradientSelector {
    /// The output layer's weight and bias.
    #[default]
    LastLayer,
    All,
    Names(Vec<String>),
}

impl GradientSelector {
    pub fn resolve<T: Scalar>(&self, state: &ModelState<T>) -> Result<ParamSubset> {
        let names: Vec<String> = match self {
            GradientSelector::LastLayer => vec![OUT_WEIGHT.into(), OUT_BIAS.into()],
            GradientSelector::All => state.params.names().map(str::to_string).collect(),
            GradientSelector::Names(names) => names.clone(),
        };
        if let Some(bad) = names.iter().find(|n| state.params.get(n).is_none()) {
            return Err(Error::UnknownParameter(bad.clone()));
        }
        Ok(ParamSubset::new(self.to_string(), names))
    }
}

impl fmt::Display for GradientSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradientSelector::LastLayer => f.write_str("last_layer"),
            GradientSelector::All => f.write_str("all"),
            GradientSelector::Names(names) => f.write_str(&names.join("+")),
        }
    }
}

impl FromStr for GradientSelector {
    type Err = Error;

    /// `last_layer`, `all`, or parameter names joined by `+`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_layer" => Ok(Self::LastLayer),
            "all" => Ok(Self::All),
            "" => Err(invalid("empty gradient selector")),
            names => Ok(Self::Names(names.split('+').map(str::to_string).collect())),
        }
    }
}

impl Serialize for GradientSelector {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GradientSelector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parameters of a model plus the learning rate of its last training run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub spec: ModelSpec,
    pub params: Params<T>,
    pub trained_lr: Option<T>,
}

/// Uniform `±1/√fan_in` weights and zero biases drawn from `seed`.
///
/// The per-channel map is drawn before the mixing layer, so two specs that
/// differ only in channel count share their per-channel initialization.
pub fn init_params<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ModelState<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = spec.param_shapes();
    let draw = |shape: &[usize], rng: &mut ChaCha8Rng| {
        let bound = 1.0 / (shape[0] as f64).sqrt();
        let len = shape.iter().product();
        (0..len)
            .map(|_| T::lit(rng.random_range(-bound..=bound)))
            .collect::<Vec<T>>()
    };
    let mut drawn: Vec<(&str, Tensor<T>)> = Vec::new();
    for (name, shape) in shapes.iter().filter(|(n, _)| *n != MIX_WEIGHT) {
        let tensor = if shape.len() == 1 {
            Tensor::zeros(shape.clone())
        } else {
            Tensor::new(shape.clone(), draw(shape, &mut rng))?
        };
        drawn.push((name, tensor));
    }
    if let Some((_, shape)) = shapes.iter().find(|(n, _)| *n == MIX_WEIGHT) {
        drawn.push((MIX_WEIGHT, Tensor::new(shape.clone(), draw(shape, &mut rng))?));
    }
    let mut params = Params::new();
    for (name, _) in &shapes {
        let pos = drawn.iter().position(|(n, _)| n == name).expect("drawn above");
        params.insert(*name, drawn.swap_remove(pos).1);
    }
    Ok(ModelState {
        spec: spec.clone(),
        params,
        trained_lr: None,
    })
}

struct ParamNodes {
    mix: Option<NodeId>,
    hidden: Option<(NodeId, NodeId)>,
    out: (NodeId, NodeId),
}

impl<T: Scalar> ModelState<T> {
    fn register(&self, tape: &mut Tape<T>) -> Result<ParamNodes> {
        let ids = self.params.register(tape)?;
        let find = |name: &str| {
            self.params
                .names()
                .position(|n| n == name)
                .map(|i| ids[i])
                .ok_or_else(|| Error::UnknownParameter(name.to_string()))
        };
        let hidden = match self.spec.architecture {
            Architecture::LinearCi => None,
            _ => Some((find(HIDDEN_WEIGHT)?, find(HIDDEN_BIAS)?)),
        };
        let mix = match self.spec.architecture {
            Architecture::MlpMix => Some(find(MIX_WEIGHT)?),
            _ => None,
        };
        Ok(ParamNodes {
            mix,
            hidden,
            out: (find(OUT_WEIGHT)?, find(OUT_BIAS)?),
        })
    }

    fn check_window(&self, window: &MtsWindow<T>) -> Result<()> {
        let expected = [self.spec.sample_len(), self.spec.channels];
        let got = [window.len(), window.n_channels()];
        if expected != got {
            return Err(Error::Shape {
                op: "model input",
                left: expected.to_vec(),
                right: got.to_vec(),
            });
        }
        Ok(())
    }

    /// Shared per-channel map on a stack of channel rows.
    fn channel_map(&self, tape: &mut Tape<T>, p: &ParamNodes, rows: NodeId) -> Result<NodeId> {
        let mut x = rows;
        if let Some((w, b)) = p.hidden {
            let h = tape.matmul(x, w)?;
            let h = tape.add_bias(h, b)?;
            x = match self.spec.activation {
                Activation::Relu => tape.relu(h)?,
                Activation::Tanh => tape.tanh(h)?,
            };
        }
        let out = tape.matmul(x, p.out.0)?;
        tape.add_bias(out, p.out.1)
    }

    /// Records the forward pass for a batch of windows and returns the
    /// stacked residual `output - target`, shape `(B·N) × output_len`.
    fn residual(&self, tape: &mut Tape<T>, p: &ParamNodes, windows: &[&MtsWindow<T>]) -> Result<NodeId> {
        let (w, n, out_len) = (self.spec.window, self.spec.channels, self.spec.output_len());
        let target_start = if self.spec.horizon.is_some() { w } else { 0 };
        let mut inputs = Vec::with_capacity(windows.len() * n * w);
        let mut targets = Vec::with_capacity(windows.len() * n * out_len);
        for win in windows {
            self.check_window(win)?;
            inputs.extend(win.channel_major(0, w));
            targets.extend(win.channel_major(target_start, target_start + out_len));
        }
        let rows = windows.len() * n;
        let target = tape.constant(Tensor::matrix(rows, out_len, targets)?);
        let stacked = match p.mix {
            None => tape.constant(Tensor::matrix(rows, w, inputs)?),
            Some(mix) => {
                let mut mixed = Vec::with_capacity(windows.len());
                for chunk in inputs.chunks(n * w) {
                    let x = tape.constant(Tensor::matrix(n, w, chunk.to_vec())?);
                    mixed.push(tape.matmul(mix, x)?);
                }
                if mixed.len() == 1 {
                    mixed[0]
                } else {
                    tape.concat_rows(&mixed)?
                }
            }
        };
        let output = self.channel_map(tape, p, stacked)?;
        tape.subtract(output, target)
    }

    /// Model output for one window as a `output_len × N` time-major matrix.
    pub fn reconstruct(&self, window: &MtsWindow<T>) -> Result<Tensor<T>> {
        self.check_window(window)?;
        let mut tape = Tape::new();
        let p = self.register(&mut tape)?;
        let n = self.spec.channels;
        let x = tape.constant(Tensor::matrix(
            n,
            self.spec.window,
            window.channel_major(0, self.spec.window),
        )?);
        let x = match p.mix {
            Some(mix) => tape.matmul(mix, x)?,
            None => x,
        };
        let out = self.channel_map(&mut tape, &p, x)?;
        tape.value(out).transpose()
    }

    fn check_channel(&self, j: usize) -> Result<()> {
        if j >= self.spec.channels {
            return Err(Error::ChannelOutOfRange {
                index: j,
                channels: self.spec.channels,
            });
        }
        Ok(())
    }

    /// Squared reconstruction error of channel `j`, summed over timesteps.
    pub fn channel_loss(&self, window: &MtsWindow<T>, j: usize) -> Result<T> {
        self.check_channel(j)?;
        Ok(self.channel_losses(window)?[j])
    }

    /// Every channel's loss for one window.
    pub fn channel_losses(&self, window: &MtsWindow<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let p = self.register(&mut tape)?;
        let r = self.residual(&mut tape, &p, &[window])?;
        let out_len = self.spec.output_len();
        Ok(tape
            .value(r)
            .data()
            .chunks(out_len)
            .map(|row| row.iter().fold(T::zero(), |acc, &e| acc + e * e))
            .collect())
    }

    /// Whole-window loss: the sum over channels.
    pub fn window_loss(&self, window: &MtsWindow<T>) -> Result<T> {
        let mut tape = Tape::new();
        let p = self.register(&mut tape)?;
        let r = self.residual(&mut tape, &p, &[window])?;
        let sq = tape.square(r)?;
        let s = tape.sum(sq)?;
        Ok(tape.value(s).item())
    }

    /// Mean squared error per element over a set of windows.
    pub fn mean_squared_error(&self, windows: &[MtsWindow<T>]) -> Result<T> {
        if windows.is_empty() {
            return Err(invalid("no windows to evaluate"));
        }
        let total = windows
            .iter()
            .map(|w| self.window_loss(w))
            .try_fold(T::zero(), |acc, l| l.map(|l| acc + l))?;
        let count = windows.len() * self.spec.channels * self.spec.output_len();
        Ok(total / T::from_usize_lossy(count))
    }

    /// Gradient of `channel_loss(window, j)` with respect to the selection.
    pub fn channel_gradient(
        &self,
        window: &MtsWindow<T>,
        j: usize,
        selector: &GradientSelector,
    ) -> Result<GradientVector<T>> {
        self.check_channel(j)?;
        let subset = selector.resolve(self)?;
        let mut tape = Tape::new();
        let p = self.register(&mut tape)?;
        let r = self.residual(&mut tape, &p, &[window])?;
        let loss = self.channel_loss_node(&mut tape, r, j)?;
        tape.backward(loss, &subset)
    }

    fn channel_loss_node(&self, tape: &mut Tape<T>, residual: NodeId, j: usize) -> Result<NodeId> {
        let row = tape.slice_rows(residual, j, j + 1)?;
        let sq = tape.square(row)?;
        tape.sum(sq)
    }

    /// All `N` per-channel gradients from a single recorded forward pass.
    pub fn channel_gradients(&self, window: &MtsWindow<T>, subset: &ParamSubset) -> Result<Vec<GradientVector<T>>> {
        let mut tape = Tape::new();
        let p = self.register(&mut tape)?;
        let r = self.residual(&mut tape, &p, &[window])?;
        (0..self.spec.channels)
            .map(|j| {
                let loss = self.channel_loss_node(&mut tape, r, j)?;
                tape.backward(loss, subset)
            })
            .collect()
    }

    /// Gradient of the whole-window loss, taken directly (not via channels).
    pub fn window_gradient(&self, window: &MtsWindow<T>, subset: &ParamSubset) -> Result<GradientVector<T>> {
        let mut tape = Tape::new();
        let p = self.register(&mut tape)?;
        let r = self.residual(&mut tape, &p, &[window])?;
        let sq = tape.square(r)?;
        let loss = tape.sum(sq)?;
        tape.backward(loss, subset)
    }

    /// The same channel-shared model declared for a different channel count.
    pub fn with_channels(&self, channels: usize) -> Result<Self> {
        if channels == self.spec.channels {
            return Ok(self.clone());
        }
        if !self.spec.architecture.is_channel_independent() {
            return Err(invalid("a channel-mixing model cannot change its channel count"));
        }
        let mut out = self.clone();
        out.spec.channels = channels;
        out.spec.validate()?;
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| NamedArray {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
            trained_lr: self.trained_lr.map(Scalar::as_f64),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.spec.validate()?;
        let mut params = Params::new();
        for (name, shape) in ckpt.spec.param_shapes() {
            let arr = ckpt
                .params
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| invalid(format!("checkpoint lacks parameter `{name}`")))?;
            if arr.shape != shape {
                return Err(Error::Shape {
                    op: "checkpoint parameter",
                    left: shape,
                    right: arr.shape.clone(),
                });
            }
            params.insert(
                name,
                Tensor::new(arr.shape.clone(), arr.data.iter().map(|&v| T::lit(v)).collect())?,
            );
        }
        if let Some(extra) = ckpt.params.iter().find(|a| params.get(&a.name).is_none()) {
            return Err(Error::UnknownParameter(extra.name.clone()));
        }
        Ok(Self {
            spec: ckpt.spec.clone(),
            params,
            trained_lr: ckpt.trained_lr.map(T::lit),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint(&serde_json::from_str(&text)?)
    }
}

/// Self-describing JSON checkpoint document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Vec<NamedArray>,
    pub trained_lr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-2,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid("learning_rate must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Plain mini-batch gradient descent on the mean squared error of all
/// parameters.
pub fn train<T: Scalar>(
    state: &ModelState<T>,
    windows: &[MtsWindow<T>],
    config: &TrainConfig,
) -> Result<ModelState<T>> {
    let all = GradientSelector::All.resolve(state)?;
    train_params(state, windows, config, &all)
}

/// Gradient descent restricted to `trainable`; other parameters stay fixed.
pub fn train_params<T: Scalar>(
    state: &ModelState<T>,
    windows: &[MtsWindow<T>],
    config: &TrainConfig,
    trainable: &ParamSubset,
) -> Result<ModelState<T>> {
    config.validate()?;
    if windows.is_empty() {
        return Err(invalid("no training windows"));
    }
    let mut state = state.clone();
    let lr = T::lit(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let per_window = state.spec.channels * state.spec.output_len();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let diverged = || Error::NonFiniteLoss { epoch, batch };
            let batch_windows: Vec<&MtsWindow<T>> = idx.iter().map(|&i| &windows[i]).collect();
            let mut tape = Tape::new();
            let p = state.register(&mut tape)?;
            let r = state.residual(&mut tape, &p, &batch_windows).map_err(|e| match e {
                Error::NonFinite(_) => diverged(),
                other => other,
            })?;
            let loss = tape.square(r).and_then(|sq| tape.mean(sq)).map_err(|_| diverged())?;
            debug_assert_eq!(tape.value(r).len(), batch_windows.len() * per_window);
            if !tape.value(loss).item().is_finite() {
                return Err(diverged());
            }
            let grad = tape.backward(loss, trainable)?;
            let mut offset = 0;
            for name in &trainable.names {
                let t = state
                    .params
                    .get_mut(name)
                    .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
                let len = t.len();
                for (v, &g) in t.data_mut().iter_mut().zip(&grad.values[offset..offset + len]) {
                    *v = *v - lr * g;
                }
                offset += len;
            }
        }
    }
    state.trained_lr = Some(lr);
    Ok(state)
}
