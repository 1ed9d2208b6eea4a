//! The attention-based convolutional odometry network and the feed-forward
//! baseline, built on [`crate::autodiff`].
//!
//! The convolutional variant keeps the sensor-channel axis `C` apart from
//! the filter axis `F`: every convolution has a `K x 1` kernel that slides
//! over time only.
//!
//! ```text
//! [T, C, 1] --stem conv K x 1, ReLU--> [T, C, F]
//!   repeat N_rrm times:
//!     Res: x + SE(ReLU(conv K x 1 (x)))
//!     Red: conv K x 1 stride 2 (x) + conv 1 x 1 stride 2 (x)   -> [ceil(T/2), C, F]
//! flatten -> dropout -> dense(3) * output_scale
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, NamedTensor, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::se2::{arc_increment, boxplus};
use crate::simulator::{dead_reckon, RobotParams};
use crate::training::Normalizer;
use crate::types::{MeasurementWindow, Pose2D, RelativePose, TrajectoryLog, CHANNELS, DEFAULT_SAMPLE_RATE};

/// Fixed term added to the learned output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prior {
    /// The network output is the increment.
    None,
    /// Arc driven by the newest sample's mean wheel speed and z gyro rate;
    /// the network learns the correction.
    #[default]
    Kinematic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Residual-reduction convolutional network with squeeze-and-excitation.
    #[default]
    Remnet2d,
    /// Fully connected baseline on the flattened window.
    Ffnn,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Remnet2d => "remnet2d",
            Variant::Ffnn => "ffnn",
        })
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    /// Window length `T` [samples].
    pub window_len: usize,
    /// Sensor channels `C`.
    pub channels: usize,
    /// Filters `F`.
    pub filters: usize,
    /// Number of residual reduction modules.
    pub rrm_count: usize,
    /// Squeeze ratio `R` of the attention bottleneck.
    pub ratio: usize,
    /// Temporal kernel extent `K`.
    pub kernel: usize,
    pub dropout_rate: f64,
    pub output_dim: usize,
    pub variant: Variant,
    pub ffnn_hidden: Vec<usize>,
    /// Factor applied to the head output.
    pub output_scale: f64,
    pub prior: Prior,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            window_len: 10,
            channels: CHANNELS,
            filters: 64,
            rrm_count: 2,
            ratio: 4,
            kernel: 3,
            dropout_rate: 0.1,
            output_dim: 3,
            variant: Variant::Remnet2d,
            ffnn_hidden: vec![128, 128],
            output_scale: 0.004,
            prior: Prior::Kinematic,
        }
    }
}

impl ModelSpec {
    pub fn ffnn() -> Self {
        Self {
            variant: Variant::Ffnn,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.output_dim != 3 {
            return fail(format!("output_dim must be 3, got {}", self.output_dim));
        }
        if self.channels != CHANNELS {
            return fail(format!("channels must be {CHANNELS}, got {}", self.channels));
        }
        if self.window_len == 0 {
            return fail("window_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return fail(format!("output_scale must be positive, got {}", self.output_scale));
        }
        match self.variant {
            Variant::Remnet2d => {
                if self.filters == 0 || self.ratio == 0 || self.kernel == 0 {
                    return fail("filters, ratio and kernel must be positive".into());
                }
                if !self.filters.is_multiple_of(self.ratio) {
                    return fail(format!(
                        "filters ({}) not divisible by ratio ({})",
                        self.filters, self.ratio
                    ));
                }
                if self.rrm_count >= usize::BITS as usize || self.window_len < 1 << self.rrm_count {
                    return fail(format!(
                        "window_len {} < 2^rrm_count ({} modules)",
                        self.window_len, self.rrm_count
                    ));
                }
                if self.kernel > self.window_len {
                    return fail(format!("kernel {} longer than window {}", self.kernel, self.window_len));
                }
            }
            Variant::Ffnn => {
                if self.ffnn_hidden.contains(&0) {
                    return fail("ffnn hidden layers must be non-empty".into());
                }
            }
        }
        Ok(())
    }

    /// Per-sample shapes after the stem, after each reduction module, after
    /// flattening and at the output. The FFNN trace is its layer widths.
    pub fn expected_trace(&self) -> Vec<Vec<usize>> {
        match self.variant {
            Variant::Remnet2d => {
                let mut trace = vec![vec![self.window_len, self.channels, self.filters]];
                let mut t = self.window_len;
                for _ in 0..self.rrm_count {
                    t = ConvGeometry::same(t, self.kernel, 2).0;
                    trace.push(vec![t, self.channels, self.filters]);
                }
                trace.push(vec![t * self.channels * self.filters]);
                trace.push(vec![self.output_dim]);
                trace
            }
            Variant::Ffnn => {
                let mut trace = vec![vec![self.window_len * self.channels]];
                trace.extend(self.ffnn_hidden.iter().map(|&h| vec![h]));
                trace.push(vec![self.output_dim]);
                trace
            }
        }
    }

    /// Flattened feature size feeding the head.
    pub fn flatten_size(&self) -> usize {
        let trace = self.expected_trace();
        trace[trace.len() - 2][0]
    }

    /// Parameter shapes in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match self.variant {
            Variant::Remnet2d => {
                let (f, k) = (self.filters, self.kernel);
                let squeeze = f / self.ratio.max(1);
                out.push(("stem.kernel".into(), vec![k, 1, 1, f]));
                out.push(("stem.bias".into(), vec![f]));
                for i in 0..self.rrm_count {
                    let p = format!("rrm{i}");
                    out.push((format!("{p}.res.kernel"), vec![k, 1, f, f]));
                    out.push((format!("{p}.res.bias"), vec![f]));
                    out.push((format!("{p}.se.squeeze.weight"), vec![f, squeeze]));
                    out.push((format!("{p}.se.squeeze.bias"), vec![squeeze]));
                    out.push((format!("{p}.se.excite.weight"), vec![squeeze, f]));
                    out.push((format!("{p}.se.excite.bias"), vec![f]));
                    out.push((format!("{p}.red.wide.kernel"), vec![k, 1, f, f]));
                    out.push((format!("{p}.red.wide.bias"), vec![f]));
                    out.push((format!("{p}.red.narrow.kernel"), vec![1, 1, f, f]));
                    out.push((format!("{p}.red.narrow.bias"), vec![f]));
                }
            }
            Variant::Ffnn => {
                let mut d_in = self.window_len * self.channels;
                for (i, &h) in self.ffnn_hidden.iter().enumerate() {
                    out.push((format!("ffnn.hidden{i}.weight"), vec![d_in, h]));
                    out.push((format!("ffnn.hidden{i}.bias"), vec![h]));
                    d_in = h;
                }
            }
        }
        out.push(("head.weight".into(), vec![self.flatten_size(), self.output_dim]));
        out.push(("head.bias".into(), vec![self.output_dim]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Attention parameters of one squeeze-and-excitation block.
#[derive(Debug, Clone, Copy)]
pub struct SeParams {
    pub squeeze_weight: Var,
    pub squeeze_bias: Var,
    pub excite_weight: Var,
    pub excite_bias: Var,
}

/// Per-filter attention weights: pool over time and channels, ReLU
/// bottleneck of `F / R` units, sigmoid expansion back to `F`.
pub fn se_attention<S: Scalar>(tape: &mut Tape<S>, features: Var, p: &SeParams) -> Result<Var> {
    let pooled = tape.mean_pool_tc(features)?;
    let squeezed = tape.dense(pooled, p.squeeze_weight, p.squeeze_bias)?;
    let squeezed = tape.relu(squeezed)?;
    let excited = tape.dense(squeezed, p.excite_weight, p.excite_bias)?;
    tape.sigmoid(excited)
}

/// Features rescaled by their own attention weights.
pub fn se_block<S: Scalar>(tape: &mut Tape<S>, features: Var, p: &SeParams) -> Result<Var> {
    let weights = se_attention(tape, features, p)?;
    tape.scale_broadcast(features, weights)
}

/// Increment of an arc driven by the newest sample's mean wheel speed and
/// z gyro rate over the newest sampling interval.
pub fn kinematic_prior(window: &MeasurementWindow) -> RelativePose {
    let samples = window.samples();
    let newest = window.newest();
    let dt = match samples.len() {
        0 | 1 => 1.0 / DEFAULT_SAMPLE_RATE,
        n => newest.stamp - samples[n - 2].stamp,
    };
    arc_increment((newest.v_l + newest.v_r) / 2.0, newest.gyro_z, dt)
}

/// Network input: normalized windows and optional prior increments.
#[derive(Debug, Clone)]
pub struct ModelInput<S> {
    /// `[B, T, C]`
    pub features: Tensor<S>,
    /// `[B, 3]`
    pub prior: Option<Tensor<S>>,
}

/// Result of recording one forward pass.
#[derive(Debug)]
pub struct Recorded {
    /// `[B, 3]` increments in pose units.
    pub output: Var,
    /// Parameter handles in canonical order.
    pub params: Vec<Var>,
    /// Per-sample intermediate shapes, see [`ModelSpec::expected_trace`].
    pub trace: Vec<Vec<usize>>,
}

/// Learned parameters plus the dropout stream.
#[derive(Debug, Clone)]
pub struct ModelState<S = f32> {
    spec: ModelSpec,
    names: Vec<String>,
    params: Vec<Tensor<S>>,
    training: bool,
    seed: u64,
    rng: ChaCha8Rng,
}

impl<S: Scalar> ModelState<S> {
    /// Allocates and initializes every parameter: fan-in scaled uniform
    /// weights (He), zero biases and a zero head, so an untrained model
    /// predicts no motion. The result is verified against the
    /// expected shape trace.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in spec.parameter_shapes() {
            let len: usize = shape.iter().product();
            let tensor = if name.ends_with(".bias") || name == "head.weight" {
                Tensor::zeros(&shape)
            } else {
                // conv kernels [K, 1, F_in, F_out]; dense weights [D_in, D_out]
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let limit = (6.0 / fan_in as f64).sqrt();
                Tensor::new(
                    &shape,
                    (0..len)
                        .map(|_| S::from_f64(init.random_range(-limit..limit)))
                        .collect(),
                )?
            };
            names.push(name);
            params.push(tensor);
        }
        let state = Self {
            spec: spec.clone(),
            names,
            params,
            training: false,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xD80F_0A7D),
        };
        state.verify_shapes()?;
        Ok(state)
    }

    /// Rebuilds a model from named parameters (e.g. a checkpoint).
    pub fn from_named(spec: &ModelSpec, seed: u64, named: Vec<(String, Tensor<S>)>) -> Result<Self> {
        let mut state = Self::build(spec, seed)?;
        if named.len() != state.params.len() {
            return Err(Error::SpecMismatch(format!(
                "expected {} parameter tensors, found {}",
                state.params.len(),
                named.len()
            )));
        }
        for ((name, tensor), (expect_name, slot)) in named.into_iter().zip(state.names.iter().zip(&mut state.params)) {
            if &name != expect_name || tensor.shape() != slot.shape() {
                return Err(Error::SpecMismatch(format!(
                    "parameter `{name}` {:?} does not match `{expect_name}` {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(state)
    }

    fn verify_shapes(&self) -> Result<()> {
        let mut probe = self.clone();
        probe.training = false;
        let input = ModelInput {
            features: Tensor::zeros(&[1, self.spec.window_len, self.spec.channels]),
            prior: (self.spec.prior == Prior::Kinematic).then(|| Tensor::zeros(&[1, 3])),
        };
        let mut tape = Tape::new();
        let rec = probe
            .record(&mut tape, input)
            .map_err(|e| Error::InvalidSpec(format!("architecture does not assemble: {e}")))?;
        let expected = self.spec.expected_trace();
        if rec.trace != expected {
            return Err(Error::InvalidSpec(format!(
                "shape trace {:?} differs from expected {:?}",
                rec.trace, expected
            )));
        }
        Ok(())
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Training mode enables dropout.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Parameters converted to 32-bit, for serialization.
    pub fn to_named_f32(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.params)
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                tensor: t.cast(),
            })
            .collect()
    }

    /// Converts the element type, keeping the dropout stream position.
    pub fn cast<T: Scalar>(&self) -> ModelState<T> {
        ModelState {
            spec: self.spec.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            training: self.training,
            seed: self.seed,
            rng: self.rng.clone(),
        }
    }

    /// Stacks normalized windows into a `[B, T, C]` tensor, plus the prior
    /// increments when the spec uses one.
    pub fn encode(&self, windows: &[&MeasurementWindow], norm: &Normalizer) -> Result<ModelInput<S>> {
        let (t, c) = (self.spec.window_len, self.spec.channels);
        let mut data = Vec::with_capacity(windows.len() * t * c);
        for w in windows {
            if w.len() != t {
                return Err(Error::ShapeMismatch(format!(
                    "window has {} samples, model expects {t}",
                    w.len()
                )));
            }
            for m in w.samples() {
                data.extend(norm.normalize(m).iter().map(|&v| S::from_f64(v)));
            }
        }
        let prior = match self.spec.prior {
            Prior::None => None,
            Prior::Kinematic => Some(Tensor::new(
                &[windows.len(), 3],
                windows
                    .iter()
                    .flat_map(|w| kinematic_prior(w).as_array().map(S::from_f64))
                    .collect(),
            )?),
        };
        Ok(ModelInput {
            features: Tensor::new(&[windows.len(), t, c], data)?,
            prior,
        })
    }

    /// Records the forward pass. Dropout is active only in training mode and
    /// then consumes the model's random stream.
    pub fn record(&mut self, tape: &mut Tape<S>, input: ModelInput<S>) -> Result<Recorded> {
        let (t, c) = (self.spec.window_len, self.spec.channels);
        let ModelInput { features: input, prior } = input;
        let shape = input.shape().to_vec();
        if shape.len() != 3 || shape[1] != t || shape[2] != c {
            return Err(Error::ShapeMismatch(format!(
                "model input must be [B, {t}, {c}], got {shape:?}"
            )));
        }
        let batch = shape[0];
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let mut trace = Vec::new();
        let per_sample = |tape: &Tape<S>, v: Var| tape.shape(v)[1..].to_vec();

        let features = match self.spec.variant {
            Variant::Remnet2d => {
                let x = tape.constant(input.reshape(&[batch, t, c, 1])?);
                let mut h = tape.conv2d(x, params[0], params[1], 1)?;
                h = tape.relu(h)?;
                trace.push(per_sample(tape, h));
                for i in 0..self.spec.rrm_count {
                    let p = &params[2 + 10 * i..2 + 10 * (i + 1)];
                    // residual block
                    let r = tape.conv2d(h, p[0], p[1], 1)?;
                    let r = tape.relu(r)?;
                    let se = SeParams {
                        squeeze_weight: p[2],
                        squeeze_bias: p[3],
                        excite_weight: p[4],
                        excite_bias: p[5],
                    };
                    let r = se_block(tape, r, &se)?;
                    let res = tape.add(h, r)?;
                    // reduction block
                    let wide = tape.conv2d(res, p[6], p[7], 2)?;
                    let narrow = tape.conv2d(res, p[8], p[9], 2)?;
                    h = tape.add(wide, narrow)?;
                    trace.push(per_sample(tape, h));
                }
                let flat: usize = tape.shape(h)[1..].iter().product();
                let flat = tape.reshape(h, &[batch, flat])?;
                trace.push(per_sample(tape, flat));
                if self.training && self.spec.dropout_rate > 0.0 {
                    let rng = &mut self.rng;
                    tape.dropout(flat, self.spec.dropout_rate, || rng.random::<f64>())?
                } else {
                    flat
                }
            }
            Variant::Ffnn => {
                let x = tape.constant(input.reshape(&[batch, t * c])?);
                trace.push(per_sample(tape, x));
                let mut h = x;
                for i in 0..self.spec.ffnn_hidden.len() {
                    h = tape.dense(h, params[2 * i], params[2 * i + 1])?;
                    h = tape.relu(h)?;
                    trace.push(per_sample(tape, h));
                }
                h
            }
        };
        let n = params.len();
        let head = tape.dense(features, params[n - 2], params[n - 1])?;
        let mut output = tape.scale(head, S::from_f64(self.spec.output_scale))?;
        if let Some(prior) = prior {
            if prior.shape() != [batch, 3] {
                return Err(Error::ShapeMismatch(format!(
                    "prior must be [{batch}, 3], got {:?}",
                    prior.shape()
                )));
            }
            let prior = tape.constant(prior);
            output = tape.add(output, prior)?;
        }
        trace.push(per_sample(tape, output));
        Ok(Recorded { output, params, trace })
    }

    /// Predicted increment for one window. Deterministic unless the model is
    /// in training mode.
    pub fn forward(&mut self, window: &MeasurementWindow, norm: &Normalizer) -> Result<RelativePose> {
        let input = self.encode(&[window], norm)?;
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, input)?;
        let out = tape.value(rec.output).data();
        Ok(RelativePose::new(out[0].as_f64(), out[1].as_f64(), out[2].as_f64()))
    }

    /// Inference-mode predictions for many windows at once.
    pub fn predict(&self, windows: &[&MeasurementWindow], norm: &Normalizer) -> Result<Vec<RelativePose>> {
        const CHUNK: usize = 256;
        let mut model = self.clone();
        model.training = false;
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(CHUNK) {
            let input = model.encode(chunk, norm)?;
            let mut tape = Tape::new();
            let rec = model.record(&mut tape, input)?;
            out.extend(
                tape.value(rec.output)
                    .data()
                    .chunks_exact(3)
                    .map(|v| RelativePose::new(v[0].as_f64(), v[1].as_f64(), v[2].as_f64())),
            );
        }
        Ok(out)
    }
}

/// Trajectory reconstructed from predicted increments, aligned with `log`.
///
/// The first `T` poses, before a full window exists, come from encoder
/// dead-reckoning anchored at the first ground-truth pose.
pub fn predict_trajectory(
    model: &ModelState<f32>,
    norm: &Normalizer,
    log: &TrajectoryLog,
    robot: &RobotParams,
) -> Result<Vec<Pose2D>> {
    let t = model.spec().window_len;
    let mut out = dead_reckon(log, robot);
    if log.len() <= t {
        return Ok(out);
    }
    out.truncate(t);
    let meas = log.measurements();
    let windows = (t..log.len())
        .map(|n| MeasurementWindow::new(meas[n + 1 - t..=n].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&MeasurementWindow> = windows.iter().collect();
    let mut pose = out[t - 1];
    for delta in model.predict(&refs, norm)? {
        pose = boxplus(&pose, &delta);
        out.push(pose);
    }
    Ok(out)
}
