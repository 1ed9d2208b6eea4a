//! Run configuration, log and checkpoint files, and the four pipeline
//! commands behind the `odocorr` binary.
//!
//! Output directory layout:
//!
//! ```text
//! <out>/logs/<kind>_<seed>.csv
//! <out>/checkpoints/<online|batch|ffnn>.ckpt
//! <out>/traces/<online|batch|ffnn>_loss.csv
//! <out>/results/table.csv, table.txt, trajectories/, errors/, histograms/
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{read_params, write_params, Tensor};
use crate::ekf::{self, EkfTuning};
use crate::error::{Error, Result};
use crate::metrics::{MetricConfig, MetricReport, PoseStat};
use crate::network::{predict_trajectory, ModelSpec, ModelState, Variant};
use crate::simulator::{dead_reckon, generate, NoiseModel, RobotParams, ScenarioScript};
use crate::training::{
    make_labels, train_batch, train_online, train_step, AdamState, LabeledSample, Normalizer, TrainConfig,
};
use crate::types::{LogMeta, Measurement, MeasurementWindow, Pose2D, ScenarioKind, TrajectoryLog};

pub const LOG_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ODOCKPT1";
pub const LOG_COLUMNS: [&str; 12] = [
    "stamp", "v_l", "v_r", "acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z", "gt_x", "gt_y", "gt_theta",
];

/// Which logs a run simulates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Random-drive training runs.
    pub train_runs: usize,
    /// [s]
    pub train_duration: f64,
    /// Test runs of each of the kinds A, B and C.
    pub test_runs_per_kind: usize,
    /// [s]
    pub test_duration: f64,
    pub sample_rate: f64,
    pub first_train_seed: u64,
    pub first_test_seed: u64,
    /// Explicit scripts; when non-empty they replace the generated list.
    pub scenarios: Vec<ScenarioScript>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_runs: 40,
            train_duration: 60.0,
            test_runs_per_kind: 4,
            test_duration: 60.0,
            sample_rate: crate::types::DEFAULT_SAMPLE_RATE,
            first_train_seed: 1000,
            first_test_seed: 5000,
            scenarios: Vec::new(),
        }
    }
}

impl DatasetConfig {
    pub fn scripts(&self) -> Vec<ScenarioScript> {
        if !self.scenarios.is_empty() {
            return self.scenarios.clone();
        }
        let script = |kind, duration, seed| ScenarioScript {
            kind,
            duration,
            sample_rate: self.sample_rate,
            seed,
        };
        let mut out: Vec<ScenarioScript> = (0..self.train_runs as u64)
            .map(|i| script(ScenarioKind::Random, self.train_duration, self.first_train_seed + i))
            .collect();
        for (k, kind) in ScenarioKind::TEST_KINDS.into_iter().enumerate() {
            for i in 0..self.test_runs_per_kind as u64 {
                let seed = self.first_test_seed + 100 * k as u64 + i;
                out.push(script(kind, self.test_duration, seed));
            }
        }
        out
    }
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: model initialization, shuffling, dropout and the sensor
    /// noise streams.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub robot: RobotParams,
    pub noise: NoiseModel,
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    /// Fields left out fall back to the baseline defaults, not the main
    /// model's.
    #[serde(deserialize_with = "ffnn_spec")]
    pub ffnn: ModelSpec,
    pub train: TrainConfig,
    pub metrics: MetricConfig,
    pub ekf: EkfTuning,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            robot: RobotParams::default(),
            noise: NoiseModel::default(),
            dataset: DatasetConfig::default(),
            model: ModelSpec::default(),
            ffnn: ModelSpec::ffnn(),
            train: TrainConfig::default(),
            metrics: MetricConfig::default(),
            ekf: EkfTuning::default(),
        }
    }
}

fn ffnn_spec<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<ModelSpec, D::Error> {
    use serde::de::Error as _;
    let given = toml::Table::deserialize(d)?;
    let mut table = toml::Table::try_from(ModelSpec::ffnn()).map_err(D::Error::custom)?;
    table.extend(given);
    table.try_into().map_err(D::Error::custom)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::parse("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse("config", e.to_string()))
    }

    /// Checks every section and the constraints between them.
    pub fn validate(&self) -> Result<()> {
        self.robot.validate()?;
        self.noise.validate()?;
        self.train.validate()?;
        self.metrics.validate()?;
        self.ekf.validate()?;
        let spec_err = |field: &str, e: Error| match e {
            Error::InvalidSpec(msg) => Error::config(field, msg),
            other => other,
        };
        self.model.validate().map_err(|e| spec_err("model", e))?;
        self.ffnn.validate().map_err(|e| spec_err("ffnn", e))?;
        if self.model.variant != Variant::Remnet2d {
            return Err(Error::config("model.variant", "the main model must be remnet2d"));
        }
        if self.ffnn.variant != Variant::Ffnn {
            return Err(Error::config("ffnn.variant", "the baseline must be ffnn"));
        }
        if self.ffnn.window_len != self.model.window_len {
            return Err(Error::config(
                "ffnn.window_len",
                format!(
                    "baseline window {} differs from model window {}",
                    self.ffnn.window_len, self.model.window_len
                ),
            ));
        }
        let scripts = self.dataset.scripts();
        if scripts.is_empty() {
            return Err(Error::config("dataset", "no scenarios configured"));
        }
        for (i, s) in scripts.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::config(format!("dataset.scenarios[{i}]"), e.to_string()))?;
            if s.sample_count() <= self.model.window_len {
                return Err(Error::config(
                    format!("dataset.scenarios[{i}]"),
                    format!(
                        "{} samples do not exceed the model window of {}",
                        s.sample_count(),
                        self.model.window_len
                    ),
                ));
            }
        }
        if !scripts.iter().any(|s| s.kind == ScenarioKind::Random) {
            return Err(Error::config("dataset", "no training (random) scenarios configured"));
        }
        Ok(())
    }

    /// Noise model with the master seed mixed in.
    pub fn seeded_noise(&self) -> NoiseModel {
        NoiseModel {
            seed: self.noise.seed ^ self.seed,
            ..self.noise
        }
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.output_dir.join("logs")
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.output_dir.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn results_dir(&self) -> PathBuf {
        self.output_dir.join("results")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- log files

pub fn log_file_name(meta: &LogMeta) -> String {
    format!("{}_{}.csv", meta.kind.label(), meta.seed)
}

/// Serializes a log: `#` header lines, a column row, one row per sample.
/// Numbers use the shortest representation that parses back exactly.
pub fn log_to_string(log: &TrajectoryLog) -> String {
    let meta = log.meta();
    let mut out = String::new();
    let _ = writeln!(out, "# odocorr-log {LOG_VERSION}");
    let _ = writeln!(out, "# sample_rate {}", meta.sample_rate);
    let _ = writeln!(out, "# kind {}", meta.kind.label());
    let _ = writeln!(out, "# seed {}", meta.seed);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LOG_COLUMNS).expect("in-memory write");
    for (m, p) in log.measurements().iter().zip(log.gt_poses()) {
        let row = [
            m.stamp, m.v_l, m.v_r, m.acc_x, m.acc_y, m.acc_z, m.gyro_x, m.gyro_y, m.gyro_z, p.x, p.y, p.theta,
        ];
        w.write_record(row.iter().map(|v| v.to_string()))
            .expect("in-memory write");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii"));
    out
}

pub fn log_from_str(text: &str) -> Result<TrajectoryLog> {
    let bad = |msg: String| Error::parse("log", msg);
    let mut version = None;
    let mut rate = None;
    let mut kind = None;
    let mut seed = None;
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        let mut parts = line.trim_start_matches('#').split_whitespace();
        let (key, value) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
        match key {
            "odocorr-log" => version = Some(value.parse::<u32>().map_err(|e| bad(format!("version: {e}")))?),
            "sample_rate" => rate = Some(value.parse::<f64>().map_err(|e| bad(format!("sample_rate: {e}")))?),
            "kind" => kind = Some(value.parse::<ScenarioKind>()?),
            "seed" => seed = Some(value.parse::<u64>().map_err(|e| bad(format!("seed: {e}")))?),
            _ => {}
        }
    }
    match version {
        Some(LOG_VERSION) => {}
        Some(v) => return Err(bad(format!("unsupported version {v}"))),
        None => return Err(bad("missing `# odocorr-log` header".into())),
    }
    let meta = LogMeta {
        kind: kind.ok_or_else(|| bad("missing kind".into()))?,
        sample_rate: rate.ok_or_else(|| bad("missing sample_rate".into()))?,
        seed: seed.ok_or_else(|| bad("missing seed".into()))?,
    };
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?;
    if headers.iter().ne(LOG_COLUMNS.iter().copied()) {
        return Err(bad(format!("columns must be {}", LOG_COLUMNS.join(","))));
    }
    let mut measurements = Vec::new();
    let mut gt = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let mut v = [0.0; 12];
        for (slot, field) in v.iter_mut().zip(record.iter()) {
            *slot = field
                .trim()
                .parse()
                .map_err(|e| bad(format!("row {}: `{field}`: {e}", i + 1)))?;
        }
        if record.len() != 12 {
            return Err(bad(format!("row {} has {} fields", i + 1, record.len())));
        }
        measurements.push(Measurement {
            v_l: v[1],
            v_r: v[2],
            acc_x: v[3],
            acc_y: v[4],
            acc_z: v[5],
            gyro_x: v[6],
            gyro_y: v[7],
            gyro_z: v[8],
            stamp: v[0],
        });
        gt.push(Pose2D::new(v[9], v[10], v[11]));
    }
    TrajectoryLog::new(measurements, gt, meta)
}

pub fn write_log(path: &Path, log: &TrajectoryLog) -> Result<()> {
    write_file(path, log_to_string(log).as_bytes())
}

pub fn read_log(path: &Path) -> Result<TrajectoryLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    log_from_str(&text)
}

/// Every `.csv` log in `dir`, sorted by kind then seed.
pub fn read_logs(dir: &Path) -> Result<Vec<TrajectoryLog>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            paths.push(path);
        }
    }
    let mut logs = paths.iter().map(|p| read_log(p)).collect::<Result<Vec<_>>>()?;
    logs.sort_by_key(|l| (l.meta().kind, l.meta().seed));
    Ok(logs)
}

// -------------------------------------------------------------- checkpoints

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    seed: u64,
    spec: ModelSpec,
    normalizer: Normalizer,
}

/// A trained model with the input statistics it expects.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelState<f32>,
    pub normalizer: Normalizer,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            seed: self.model.seed(),
            spec: self.model.spec().clone(),
            normalizer: self.normalizer.frozen(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::parse("checkpoint header", e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        write_params(&mut out, &self.model.to_named_f32())?;
        Ok(out)
    }

    pub fn from_reader(mut r: impl Read) -> Result<Self> {
        let bad = |msg: String| Error::parse("checkpoint", msg);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|e| bad(e.to_string()))?;
        let len = u32::from_le_bytes(len) as usize;
        if len > 1 << 20 {
            return Err(bad(format!("header of {len} bytes")));
        }
        let mut text = vec![0u8; len];
        r.read_exact(&mut text).map_err(|e| bad(e.to_string()))?;
        let text = String::from_utf8(text).map_err(|e| bad(e.to_string()))?;
        let header: CheckpointHeader = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let named = read_params(&mut r)?
            .into_iter()
            .map(|n| (n.name, n.tensor))
            .collect::<Vec<(String, Tensor<f32>)>>();
        let model = ModelState::from_named(&header.spec, header.seed, named)?;
        Ok(Self {
            model,
            normalizer: header.normalizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file))
    }
}

// ----------------------------------------------------------------- commands

#[derive(Debug, Clone, PartialEq)]
pub struct LogSummary {
    pub path: PathBuf,
    pub kind: ScenarioKind,
    pub seed: u64,
    pub samples: usize,
    pub duration: f64,
    pub path_length: f64,
}

/// Generates every configured scenario in memory.
pub fn simulate_logs(cfg: &RunConfig) -> Result<Vec<TrajectoryLog>> {
    cfg.validate()?;
    let noise = cfg.seeded_noise();
    cfg.dataset
        .scripts()
        .iter()
        .map(|s| generate(s, &cfg.robot, &noise))
        .collect()
}

/// Simulates every scenario and writes one log file each.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Vec<LogSummary>> {
    let logs = simulate_logs(cfg)?;
    let dir = cfg.logs_dir();
    create_dir(&dir)?;
    logs.iter()
        .map(|log| {
            let path = dir.join(log_file_name(log.meta()));
            write_log(&path, log)?;
            Ok(LogSummary {
                path,
                kind: log.meta().kind,
                seed: log.meta().seed,
                samples: log.len(),
                duration: log.duration(),
                path_length: log.gt_path_length(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Online,
    Batch,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online" => Ok(TrainMode::Online),
            "batch" => Ok(TrainMode::Batch),
            other => Err(Error::parse(
                "train mode",
                format!("expected online or batch, got `{other}`"),
            )),
        }
    }
}

/// Loss history of a training run.
#[derive(Debug, Clone, PartialEq)]
pub enum LossTrace {
    /// Loss of every online update.
    Updates(Vec<f64>),
    /// `(epoch, train MAE, validation MAE)`.
    Epochs(Vec<(usize, f64, Option<f64>)>),
}

impl LossTrace {
    pub fn len(&self) -> usize {
        match self {
            LossTrace::Updates(v) => v.len(),
            LossTrace::Epochs(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self {
            LossTrace::Updates(v) => {
                out.push_str("step,loss\n");
                for (i, l) in v.iter().enumerate() {
                    let _ = writeln!(out, "{},{l}", i + 1);
                }
            }
            LossTrace::Epochs(v) => {
                out.push_str("epoch,train_mae,val_mae\n");
                for (e, t, val) in v {
                    let val = val.map(|x| x.to_string()).unwrap_or_default();
                    let _ = writeln!(out, "{e},{t},{val}");
                }
            }
        }
        out
    }
}

/// Name under which a trained model is stored.
pub fn model_name(mode: TrainMode, variant: Variant) -> &'static str {
    match (variant, mode) {
        (Variant::Ffnn, _) => "ffnn",
        (Variant::Remnet2d, TrainMode::Online) => "online",
        (Variant::Remnet2d, TrainMode::Batch) => "batch",
    }
}

/// Trains a fresh model on the training (random-drive) logs. Online mode
/// streams the logs in order; batch mode labels them all up front.
pub fn train_model(
    cfg: &RunConfig,
    mode: TrainMode,
    variant: Variant,
    logs: &[TrajectoryLog],
) -> Result<(Checkpoint, LossTrace)> {
    let spec = match variant {
        Variant::Remnet2d => &cfg.model,
        Variant::Ffnn => &cfg.ffnn,
    };
    let train_logs: Vec<&TrajectoryLog> = logs.iter().filter(|l| l.meta().kind == ScenarioKind::Random).collect();
    if train_logs.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let t = spec.window_len;
    let mut model = ModelState::<f32>::build(spec, cfg.seed)?;
    let train_cfg = TrainConfig {
        seed: cfg.train.seed ^ cfg.seed,
        ..cfg.train.clone()
    };
    match mode {
        TrainMode::Online => {
            for log in &train_logs {
                make_labels(log, t)?;
            }
            let stream = train_logs
                .iter()
                .flat_map(|log| make_labels(log, t).expect("checked above"));
            let out = train_online(&mut model, stream, &train_cfg)?;
            Ok((
                Checkpoint {
                    model,
                    normalizer: out.normalizer,
                },
                LossTrace::Updates(out.losses),
            ))
        }
        TrainMode::Batch => {
            let mut samples = Vec::new();
            for log in &train_logs {
                samples.extend(make_labels(log, t)?);
            }
            let out = train_batch(&mut model, &samples, &train_cfg)?;
            Ok((
                Checkpoint {
                    model,
                    normalizer: out.normalizer,
                },
                LossTrace::Epochs(out.curve.iter().map(|r| (r.epoch, r.train_mae, r.val_mae)).collect()),
            ))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub loss_trace: LossTrace,
}

/// Trains on the logs in `<out>/logs` and writes the checkpoint and its
/// loss trace.
pub fn cmd_train(cfg: &RunConfig, mode: TrainMode, variant: Variant) -> Result<TrainSummary> {
    cfg.validate()?;
    let logs = read_logs(&cfg.logs_dir())?;
    let (ckpt, trace) = train_model(cfg, mode, variant, &logs)?;
    let name = model_name(mode, variant);
    let checkpoint = cfg.checkpoint_path(name);
    ckpt.save(&checkpoint)?;
    let trace_path = cfg.output_dir.join("traces").join(format!("{name}_loss.csv"));
    write_file(&trace_path, trace.to_csv().as_bytes())?;
    Ok(TrainSummary {
        checkpoint,
        trace: trace_path,
        loss_trace: trace,
    })
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    /// `A`, `B`, `C` or `Overall`.
    pub scenario: String,
    pub m_ate: PoseStat,
    pub segment: PoseStat,
}

/// Per-method reports on every test log plus the summary table.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub rows: Vec<ResultRow>,
    /// `(method, log, estimate, report)`.
    pub runs: Vec<(String, LogMeta, Vec<Pose2D>, MetricReport)>,
    pub segment_length: f64,
}

impl Evaluation {
    pub fn row(&self, method: &str, scenario: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method && r.scenario == scenario)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,scenario,m_ate_xy,m_ate_xy_std,m_ate_theta,m_ate_theta_std,se_xy,se_xy_std,se_theta,se_theta_std\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.method,
                r.scenario,
                r.m_ate.position.mean,
                r.m_ate.position.std,
                r.m_ate.heading.mean,
                r.m_ate.heading.std,
                r.segment.position.mean,
                r.segment.position.std,
                r.segment.heading.mean,
                r.segment.heading.std
            );
        }
        out
    }

    /// Aligned text table.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<8} {:<16} {:>16} {:>16} {:>16} {:>16}\n",
            "Test",
            "Method",
            "m-ATE_xy [m]",
            "m-ATE_th [rad]",
            format!("SE_xy [m] s={}", self.segment_length),
            "SE_th [rad]"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<8} {:<16} {:>16} {:>16} {:>16} {:>16}",
                r.scenario,
                r.method,
                r.m_ate.position.to_string(),
                r.m_ate.heading.to_string(),
                r.segment.position.to_string(),
                r.segment.heading.to_string()
            );
        }
        out
    }
}

/// A named trajectory estimator.
pub type Estimator<'a> = (String, Box<dyn Fn(&TrajectoryLog) -> Result<Vec<Pose2D>> + 'a>);

/// Runs every estimator on every test log (kinds A, B, C) and summarizes
/// per kind and overall. Rows are grouped by scenario, then method.
pub fn evaluate(estimators: &[Estimator<'_>], logs: &[TrajectoryLog], metrics: &MetricConfig) -> Result<Evaluation> {
    let tests: Vec<&TrajectoryLog> = logs.iter().filter(|l| l.meta().kind != ScenarioKind::Random).collect();
    if tests.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut runs = Vec::new();
    for (name, estimate) in estimators {
        for log in &tests {
            let est = estimate(log)?;
            let report = MetricReport::compute(&est, log.gt_poses(), metrics)?;
            runs.push((name.clone(), *log.meta(), est, report));
        }
    }
    let mut rows = Vec::new();
    let groups = ScenarioKind::TEST_KINDS
        .iter()
        .map(|k| (k.label().to_string(), Some(*k)))
        .chain([("Overall".to_string(), None)]);
    for (scenario, kind) in groups {
        for (name, _) in estimators {
            let reports: Vec<&MetricReport> = runs
                .iter()
                .filter(|(m, meta, _, _)| m == name && kind.is_none_or(|k| meta.kind == k))
                .map(|(_, _, _, r)| r)
                .collect();
            if reports.is_empty() {
                continue;
            }
            let (m_ate, segment) = MetricReport::pooled(reports)?;
            rows.push(ResultRow {
                method: name.clone(),
                scenario: scenario.clone(),
                m_ate,
                segment,
            });
        }
    }
    Ok(Evaluation {
        rows,
        runs,
        segment_length: metrics.segment_length,
    })
}

/// The standard estimators: EKF, whichever trained models are given, and
/// encoder dead-reckoning.
pub fn standard_estimators<'a>(
    cfg: &'a RunConfig,
    online: Option<&'a Checkpoint>,
    batch: Option<&'a Checkpoint>,
    ffnn: Option<&'a Checkpoint>,
) -> Vec<Estimator<'a>> {
    let robot = cfg.robot;
    let mut out: Vec<Estimator<'a>> = vec![(
        "EKF".into(),
        Box::new(move |log: &TrajectoryLog| Ok(ekf::run(log, &robot, &cfg.ekf))),
    )];
    for (name, ckpt) in [("Online", online), ("Batch", batch), ("FFNN", ffnn)] {
        if let Some(c) = ckpt {
            out.push((
                name.into(),
                Box::new(move |log: &TrajectoryLog| predict_trajectory(&c.model, &c.normalizer, log, &robot)),
            ));
        }
    }
    out.push((
        "Dead-reckoning".into(),
        Box::new(move |log: &TrajectoryLog| Ok(dead_reckon(log, &robot))),
    ));
    out
}

fn check_spec(name: &str, ckpt: &Checkpoint, expected: &ModelSpec) -> Result<()> {
    let got = ckpt.model.spec();
    if got != expected {
        return Err(Error::SpecMismatch(format!(
            "{name} checkpoint was built for {got:?}, configuration expects {expected:?}"
        )));
    }
    Ok(())
}

fn slug(name: &str) -> String {
    name.to_lowercase().replace(' ', "_")
}

/// Writes the table and the plot-ready CSVs of an evaluation.
pub fn write_evaluation(dir: &Path, eval: &Evaluation, logs: &[TrajectoryLog]) -> Result<()> {
    write_file(&dir.join("table.csv"), eval.to_csv().as_bytes())?;
    write_file(&dir.join("table.txt"), eval.to_text().as_bytes())?;
    for (method, meta, est, report) in &eval.runs {
        let stem = format!("{}_{}_{}", slug(method), meta.kind.label(), meta.seed);
        let gt = logs
            .iter()
            .find(|l| l.meta() == meta)
            .map(|l| l.gt_poses())
            .unwrap_or(&[]);
        let mut traj = String::from("index,x,y,theta,gt_x,gt_y,gt_theta\n");
        for (i, (p, g)) in est.iter().zip(gt).enumerate() {
            let _ = writeln!(traj, "{i},{},{},{},{},{},{}", p.x, p.y, p.theta, g.x, g.y, g.theta);
        }
        write_file(&dir.join("trajectories").join(format!("{stem}.csv")), traj.as_bytes())?;
        let mut err = String::from("time,position_error,heading_error\n");
        for (i, (p, h)) in report.position_series.iter().zip(&report.heading_series).enumerate() {
            let _ = writeln!(err, "{},{p},{h}", (i + 1) as f64 / meta.sample_rate);
        }
        write_file(&dir.join("errors").join(format!("{stem}.csv")), err.as_bytes())?;
        let mut hist = String::from("quantity,bin_low,bin_high,count\n");
        for (q, h) in [
            ("position", &report.se_position_hist),
            ("heading", &report.se_heading_hist),
        ] {
            for (i, c) in h.counts.iter().enumerate() {
                let _ = writeln!(hist, "{q},{},{},{c}", h.edges[i], h.edges[i + 1]);
            }
        }
        write_file(&dir.join("histograms").join(format!("{stem}.csv")), hist.as_bytes())?;
    }
    Ok(())
}

/// Evaluates the EKF, every checkpoint found under `<out>/checkpoints` and
/// dead-reckoning on the test logs, then writes the results.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Evaluation> {
    cfg.validate()?;
    let logs = read_logs(&cfg.logs_dir())?;
    let load = |name: &str, spec: &ModelSpec| -> Result<Option<Checkpoint>> {
        let path = cfg.checkpoint_path(name);
        if !path.exists() {
            return Ok(None);
        }
        let ckpt = Checkpoint::load(&path)?;
        check_spec(name, &ckpt, spec)?;
        Ok(Some(ckpt))
    };
    let online = load("online", &cfg.model)?;
    let batch = load("batch", &cfg.model)?;
    let ffnn = load("ffnn", &cfg.ffnn)?;
    let estimators = standard_estimators(cfg, online.as_ref(), batch.as_ref(), ffnn.as_ref());
    let eval = evaluate(&estimators, &logs, &cfg.metrics)?;
    write_evaluation(&cfg.results_dir(), &eval, &logs)?;
    Ok(eval)
}

/// Latency statistics in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub iterations: usize,
    pub inference_mean_ms: f64,
    pub inference_median_ms: f64,
    pub inference_p99_ms: f64,
    pub train_step_mean_ms: f64,
    pub batch_size: usize,
    /// Whether a second inference pass reproduced every output exactly.
    pub deterministic: bool,
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "iterations            {}", self.iterations)?;
        writeln!(
            f,
            "inference [ms]        mean {:.3}  median {:.3}  p99 {:.3}",
            self.inference_mean_ms, self.inference_median_ms, self.inference_p99_ms
        )?;
        writeln!(
            f,
            "train step [ms]       mean {:.3}  (batch of {})",
            self.train_step_mean_ms, self.batch_size
        )?;
        write!(f, "deterministic outputs {}", self.deterministic)
    }
}

/// Times `iterations` single-window inferences and `iterations` training
/// steps on windows from a simulated log. A few untimed warm-up runs come
/// first.
pub fn cmd_bench(ckpt: &Checkpoint, iterations: usize, batch_size: usize) -> Result<BenchReport> {
    if iterations == 0 || batch_size == 0 {
        return Err(Error::config(
            "bench.iterations",
            "iterations and batch size must be positive",
        ));
    }
    const WARMUP: usize = 5;
    let spec = ckpt.model.spec();
    let robot = RobotParams::default();
    let samples_needed = spec.window_len + batch_size.max(iterations) + 1;
    let script = ScenarioScript::new(
        ScenarioKind::C,
        samples_needed as f64 / crate::types::DEFAULT_SAMPLE_RATE + 1.0,
        7,
    );
    let log = generate(&script, &robot, &NoiseModel::default())?;
    let samples = make_labels(&log, spec.window_len)?;
    let windows: Vec<&MeasurementWindow> = samples.iter().map(|s| &s.window).collect();

    let mut model = ckpt.model.clone();
    model.set_training(false);
    let norm = &ckpt.normalizer;
    let mut outputs = Vec::with_capacity(iterations);
    let mut times = Vec::with_capacity(iterations);
    for i in 0..WARMUP {
        model.forward(windows[i % windows.len()], norm)?;
    }
    for i in 0..iterations {
        let w = windows[i % windows.len()];
        let start = Instant::now();
        let out = model.forward(w, norm)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        outputs.push(out);
    }
    let deterministic = (0..iterations).try_fold(true, |same, i| {
        Ok::<_, Error>(same && model.forward(windows[i % windows.len()], norm)? == outputs[i])
    })?;

    let mut trainee = ckpt.model.clone();
    let mut adam = AdamState::new(trainee.params(), 1e-4);
    let batches: Vec<Vec<&LabeledSample>> = (0..iterations + WARMUP)
        .map(|i| {
            (0..batch_size)
                .map(|j| &samples[(i * batch_size + j) % samples.len()])
                .collect()
        })
        .collect();
    for batch in &batches[..WARMUP] {
        train_step(&mut trainee, &mut adam, batch, norm)?;
    }
    let start = Instant::now();
    for batch in &batches[WARMUP..] {
        train_step(&mut trainee, &mut adam, batch, norm)?;
    }
    let train_step_mean_ms = start.elapsed().as_secs_f64() * 1e3 / iterations as f64;

    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let pct = |p: f64| sorted[(((sorted.len() - 1) as f64) * p).round() as usize];
    Ok(BenchReport {
        iterations: times.len(),
        inference_mean_ms: times.iter().sum::<f64>() / iterations as f64,
        inference_median_ms: pct(0.5),
        inference_p99_ms: pct(0.99),
        train_step_mean_ms,
        batch_size,
        deterministic,
    })
}

/// Writes `text` to a file, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let file = {
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        fs::File::create(path).map_err(|e| Error::io(path, e))?
    };
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
