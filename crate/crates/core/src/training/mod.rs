//! Loss, optimizer, input scaling and the two training regimes: offline
//! batch training over a fixed dataset and streaming online training.

mod normalizer;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use normalizer::{NormMode, Normalizer, STD_FLOOR};

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::network::ModelState;
use crate::se2::relative_between;
use crate::types::{MeasurementWindow, RelativePose, TrajectoryLog};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for a list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState<S = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &[Tensor<S>], lr: f64) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<S>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<S>] {
        &self.v
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<S: Scalar>(params: &mut [Tensor<S>], grads: &[Tensor<S>], state: &mut AdamState<S>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::ShapeMismatch(format!(
                "adam: parameter {:?}, gradient {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::from_f64(state.beta1);
    let b2 = S::from_f64(state.beta2);
    let one_b1 = S::from_f64(1.0 - state.beta1);
    let one_b2 = S::from_f64(1.0 - state.beta2);
    let step_size = S::from_f64(state.lr / (1.0 - state.beta1.powi(t)));
    let v_corr = S::from_f64(1.0 / (1.0 - state.beta2.powi(t)));
    let eps = S::from_f64(state.eps);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            p[i] -= step_size * m[i] / ((v[i] * v_corr).sqrt() + eps);
        }
    }
    Ok(())
}

/// Mean over samples and components of `|pred - target|`.
pub fn mae_loss(pred: &[RelativePose], target: &[RelativePose]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "mae: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| {
            let (p, t) = (p.as_array(), t.as_array());
            [(p[0] - t[0]).abs(), (p[1] - t[1]).abs(), (p[2] - t[2]).abs()]
        })
        .sum();
    Ok(total / (3 * pred.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_batch: f64,
    pub lr_online: f64,
    /// Maximum epochs in batch mode.
    pub epochs: usize,
    /// Epochs without validation improvement before batch training stops;
    /// 0 disables early stopping.
    pub patience: usize,
    pub shuffle: bool,
    /// Trailing fraction of the dataset held out in batch mode.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr_batch: 1e-4,
            lr_online: 7e-5,
            epochs: 50,
            patience: 5,
            shuffle: true,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        for (field, lr) in [("train.lr_batch", self.lr_batch), ("train.lr_online", self.lr_online)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::config(
                    field,
                    format!("must be a finite non-negative rate, got {lr}"),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config(
                "train.validation_fraction",
                format!("must lie in [0, 1), got {}", self.validation_fraction),
            ));
        }
        Ok(())
    }
}

/// A measurement window and the ground-truth increment of its newest sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub window: MeasurementWindow,
    pub label: RelativePose,
}

/// Windows of `window_len` samples ending at every sample `n >= window_len`
/// (zero-based), each labeled with the motion from sample `n - 1` to `n`.
pub fn make_labels(log: &TrajectoryLog, window_len: usize) -> Result<Vec<LabeledSample>> {
    if window_len == 0 || log.len() < window_len {
        return Err(Error::LogTooShort {
            len: log.len(),
            window: window_len,
        });
    }
    let (meas, gt) = (log.measurements(), log.gt_poses());
    (window_len..log.len())
        .map(|n| {
            Ok(LabeledSample {
                window: MeasurementWindow::new(meas[n + 1 - window_len..=n].to_vec())?,
                label: relative_between(&gt[n - 1], &gt[n]),
            })
        })
        .collect()
}

/// One forward/backward pass and Adam update on `batch`, with dropout
/// active. Returns the batch loss before the update.
pub fn train_step(
    model: &mut ModelState<f32>,
    adam: &mut AdamState<f32>,
    batch: &[&LabeledSample],
    norm: &Normalizer,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let windows: Vec<&MeasurementWindow> = batch.iter().map(|s| &s.window).collect();
    let input = model.encode(&windows, norm)?;
    let target = Tensor::new(
        &[batch.len(), 3],
        batch
            .iter()
            .flat_map(|s| s.label.as_array().map(|v| v as f32))
            .collect(),
    )?;
    let was_training = model.is_training();
    model.set_training(true);
    let mut tape = Tape::new();
    let recorded = model.record(&mut tape, input);
    model.set_training(was_training);
    let rec = recorded?;
    let loss = tape.mae(rec.output, &target)?;
    let loss_value = tape.value(loss).data()[0].as_f64();
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Tensor<f32>> = rec
        .params
        .iter()
        .map(|&p| grads.take(p).expect("every parameter has a gradient"))
        .collect();
    adam_step(model.params_mut(), &grads, adam)?;
    Ok(loss_value)
}

/// Inference-mode MAE of `model` over `samples`.
pub fn evaluate_mae(model: &ModelState<f32>, samples: &[LabeledSample], norm: &Normalizer) -> Result<f64> {
    let windows: Vec<&MeasurementWindow> = samples.iter().map(|s| &s.window).collect();
    let pred = model.predict(&windows, norm)?;
    let target: Vec<RelativePose> = samples.iter().map(|s| s.label).collect();
    mae_loss(&pred, &target)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the untrained model.
    pub epoch: usize,
    /// Mean training-batch loss of the epoch (inference-mode MAE at epoch 0).
    pub train_mae: f64,
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    /// Frozen training-set statistics the model was trained with.
    pub normalizer: Normalizer,
    pub curve: Vec<EpochRecord>,
    pub steps: usize,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Offline training: the trailing `validation_fraction` of `samples` is held
/// out, the rest is visited in (optionally shuffled) mini-batches for up to
/// `epochs` epochs. Incomplete trailing batches are skipped. With a
/// validation set, training stops after `patience` epochs without
/// improvement and the best parameters are restored.
pub fn train_batch(model: &mut ModelState<f32>, samples: &[LabeledSample], cfg: &TrainConfig) -> Result<BatchOutcome> {
    cfg.validate()?;
    let n_val = (samples.len() as f64 * cfg.validation_fraction).round() as usize;
    let n_train = samples.len() - n_val;
    if n_train < cfg.batch_size {
        return Err(Error::InsufficientData {
            needed: cfg.batch_size,
            got: n_train,
        });
    }
    let (train, val) = samples.split_at(n_train);
    let norm = Normalizer::fit(train.iter().map(|s| s.window.newest()));
    let mut adam = AdamState::new(model.params(), cfg.lr_batch);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val_mae = |m: &ModelState<f32>| -> Result<Option<f64>> {
        if val.is_empty() {
            Ok(None)
        } else {
            evaluate_mae(m, val, &norm).map(Some)
        }
    };

    let mut curve = vec![EpochRecord {
        epoch: 0,
        train_mae: evaluate_mae(model, train, &norm)?,
        val_mae: val_mae(model)?,
    }];
    let mut best = (curve[0].val_mae.unwrap_or(f64::INFINITY), 0, model.params().to_vec());
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &train[i]).collect();
            total += train_step(model, &mut adam, &batch, &norm)?;
            batches += 1;
        }
        steps += batches;
        let record = EpochRecord {
            epoch,
            train_mae: total / batches as f64,
            val_mae: val_mae(model)?,
        };
        curve.push(record);
        if let Some(v) = record.val_mae {
            if v < best.0 {
                best = (v, epoch, model.params().to_vec());
            } else if cfg.patience > 0 && epoch - best.1 >= cfg.patience {
                break;
            }
        }
    }
    let best_epoch = if val.is_empty() {
        curve.len() - 1
    } else {
        model.params_mut().clone_from_slice(&best.2);
        best.1
    };
    Ok(BatchOutcome {
        normalizer: norm,
        curve,
        steps,
        best_epoch,
    })
}

/// Streaming trainer: samples arrive one at a time; every `batch_size`
/// samples trigger one Adam update with the online learning rate.
///
/// Inputs are scaled by running statistics over every sample seen so far,
/// frozen for the duration of each update.
#[derive(Debug, Clone)]
pub struct OnlineTrainer {
    model: ModelState<f32>,
    adam: AdamState<f32>,
    norm: Normalizer,
    pending: Vec<LabeledSample>,
    batch_size: usize,
    losses: Vec<f64>,
}

impl OnlineTrainer {
    pub fn new(model: ModelState<f32>, cfg: &TrainConfig) -> Result<Self> {
        Self::resume(model, Normalizer::running(), cfg)
    }

    /// Continues from existing statistics (made running if frozen).
    pub fn resume(model: ModelState<f32>, norm: Normalizer, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(model.params(), cfg.lr_online);
        let norm = if norm.mode() == NormMode::Running {
            norm
        } else {
            norm.running_copy()
        };
        Ok(Self {
            model,
            adam,
            norm,
            pending: Vec::with_capacity(cfg.batch_size),
            batch_size: cfg.batch_size,
            losses: Vec::new(),
        })
    }

    /// Adds a sample; returns the batch loss when an update happened.
    pub fn push(&mut self, sample: LabeledSample) -> Result<Option<f64>> {
        self.norm.observe(sample.window.newest());
        self.pending.push(sample);
        if self.pending.len() < self.batch_size {
            return Ok(None);
        }
        let frozen = self.norm.frozen();
        let batch: Vec<&LabeledSample> = self.pending.iter().collect();
        let loss = train_step(&mut self.model, &mut self.adam, &batch, &frozen)?;
        self.pending.clear();
        self.losses.push(loss);
        Ok(Some(loss))
    }

    /// Prediction with the current parameters and statistics.
    pub fn predict(&mut self, window: &MeasurementWindow) -> Result<RelativePose> {
        let frozen = self.norm.frozen();
        self.model.forward(window, &frozen)
    }

    pub fn updates(&self) -> usize {
        self.losses.len()
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn model(&self) -> &ModelState<f32> {
        &self.model
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    /// Trained model and frozen statistics; pending samples are dropped.
    pub fn finish(self) -> (ModelState<f32>, Normalizer, Vec<f64>) {
        (self.model, self.norm.frozen(), self.losses)
    }
}

#[derive(Debug, Clone)]
pub struct OnlineOutcome {
    pub normalizer: Normalizer,
    /// Loss of every update, in order.
    pub losses: Vec<f64>,
}

impl OnlineOutcome {
    pub fn updates(&self) -> usize {
        self.losses.len()
    }
}

/// Runs [`OnlineTrainer`] over a time-ordered stream. The trailing samples
/// that do not fill a batch are discarded.
pub fn train_online(
    model: &mut ModelState<f32>,
    stream: impl IntoIterator<Item = LabeledSample>,
    cfg: &TrainConfig,
) -> Result<OnlineOutcome> {
    let mut trainer = OnlineTrainer::new(model.clone(), cfg)?;
    for sample in stream {
        trainer.push(sample)?;
    }
    let (trained, normalizer, losses) = trainer.finish();
    *model = trained;
    Ok(OnlineOutcome { normalizer, losses })
}
