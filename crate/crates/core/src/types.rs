//! Shared domain types: sensor samples, windows, planar poses and logs.
//!
//! A [`MeasurementWindow`] stores samples in chronological order, newest
//! last. The model input `(u_n, u_{n-1}, ..., u_{n-T+1})` is therefore the
//! window read back to front.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of sensor channels in one [`Measurement`].
pub const CHANNELS: usize = 8;

/// Default sampling rate of every log [Hz].
pub const DEFAULT_SAMPLE_RATE: f64 = 25.0;

/// Relative tolerance on the spacing of consecutive stamps.
pub const STAMP_TOLERANCE: f64 = 0.10;

/// Wraps an angle into `(-pi, pi]`. Values already in range are returned
/// bit-for-bit unchanged.
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    // rem_euclid can land on exactly -pi after the shift for some inputs.
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// One 8-channel sensor sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Measurement {
    /// Left wheel velocity [m/s].
    pub v_l: f64,
    /// Right wheel velocity [m/s].
    pub v_r: f64,
    pub acc_x: f64,
    pub acc_y: f64,
    pub acc_z: f64,
    pub gyro_x: f64,
    pub gyro_y: f64,
    pub gyro_z: f64,
    /// Sample time [s].
    pub stamp: f64,
}

impl Measurement {
    /// Channel values in model input order.
    pub fn channels(&self) -> [f64; CHANNELS] {
        [
            self.v_l,
            self.v_r,
            self.acc_x,
            self.acc_y,
            self.acc_z,
            self.gyro_x,
            self.gyro_y,
            self.gyro_z,
        ]
    }

    pub fn from_channels(channels: [f64; CHANNELS], stamp: f64) -> Self {
        let [v_l, v_r, acc_x, acc_y, acc_z, gyro_x, gyro_y, gyro_z] = channels;
        Self {
            v_l,
            v_r,
            acc_x,
            acc_y,
            acc_z,
            gyro_x,
            gyro_y,
            gyro_z,
            stamp,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.channels().iter().all(|v| v.is_finite()) && self.stamp.is_finite()
    }
}

/// The latest `T` measurements, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementWindow {
    samples: Vec<Measurement>,
}

impl MeasurementWindow {
    /// Builds a window, rejecting non-finite samples and stamps that do not
    /// strictly increase.
    pub fn new(samples: Vec<Measurement>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(bad) = samples.iter().position(|m| !m.is_finite()) {
            return Err(Error::InvalidLog(format!("non-finite sample at window index {bad}")));
        }
        if let Some(i) = samples.windows(2).position(|w| w[1].stamp <= w[0].stamp) {
            return Err(Error::InvalidLog(format!(
                "window stamps not strictly increasing at index {}",
                i + 1
            )));
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Measurement] {
        &self.samples
    }

    pub fn newest(&self) -> &Measurement {
        self.samples.last().expect("window is never empty")
    }
}

/// Extracts the latest `len` samples of `buffer`, preserving order.
pub fn window_from_stream(buffer: &[Measurement], len: usize) -> Result<MeasurementWindow> {
    if len == 0 || buffer.len() < len {
        return Err(Error::InsufficientSamples {
            needed: len.max(1),
            got: buffer.len(),
        });
    }
    MeasurementWindow::new(buffer[buffer.len() - len..].to_vec())
}

/// Absolute planar pose. `theta` is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn origin() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn distance(&self, other: &Pose2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Pose increment expressed in the frame of the previous pose.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RelativePose {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl RelativePose {
    pub fn new(dx: f64, dy: f64, dtheta: f64) -> Self {
        Self { dx, dy, dtheta }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dtheta]
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.dtheta.is_finite()
    }

    /// Whether the increment is physically plausible for one step of length
    /// `dt` given the velocity limits, with a 2x margin.
    pub fn within_kinematic_bounds(&self, dt: f64, max_v: f64, max_w: f64) -> bool {
        const MARGIN: f64 = 2.0;
        self.is_finite()
            && self.dx.abs() <= max_v * dt * MARGIN
            && self.dy.abs() <= max_v * dt * MARGIN
            && self.dtheta.abs() <= max_w * dt * MARGIN
    }
}

/// Trajectory family of a log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioKind {
    /// Repeated circles.
    A,
    /// Figure-eight (lemniscate).
    B,
    /// Irregular motion with hard brakings, accelerations and spins.
    C,
    /// Random teleoperation used for training.
    #[serde(rename = "train", alias = "random", alias = "RANDOM")]
    Random,
}

impl ScenarioKind {
    pub const TEST_KINDS: [ScenarioKind; 3] = [ScenarioKind::A, ScenarioKind::B, ScenarioKind::C];

    pub fn label(&self) -> &'static str {
        match self {
            ScenarioKind::A => "A",
            ScenarioKind::B => "B",
            ScenarioKind::C => "C",
            ScenarioKind::Random => "train",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(ScenarioKind::A),
            "B" | "b" => Ok(ScenarioKind::B),
            "C" | "c" => Ok(ScenarioKind::C),
            "train" | "random" | "RANDOM" => Ok(ScenarioKind::Random),
            other => Err(Error::parse("scenario kind", format!("unknown kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    pub kind: ScenarioKind,
    /// Sampling rate [Hz].
    pub sample_rate: f64,
    pub seed: u64,
}

impl LogMeta {
    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }
}

/// Time-aligned measurements and ground-truth poses.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    measurements: Vec<Measurement>,
    gt_poses: Vec<Pose2D>,
    meta: LogMeta,
}

impl TrajectoryLog {
    /// Validates alignment, finiteness and uniform sampling (spacing within
    /// +-10% of `1 / sample_rate`).
    pub fn new(measurements: Vec<Measurement>, gt_poses: Vec<Pose2D>, meta: LogMeta) -> Result<Self> {
        if measurements.len() != gt_poses.len() {
            return Err(Error::InvalidLog(format!(
                "{} measurements but {} ground-truth poses",
                measurements.len(),
                gt_poses.len()
            )));
        }
        if !(meta.sample_rate.is_finite() && meta.sample_rate > 0.0) {
            return Err(Error::InvalidLog(format!(
                "sample rate {} is not positive",
                meta.sample_rate
            )));
        }
        if let Some(i) = measurements.iter().position(|m| !m.is_finite()) {
            return Err(Error::InvalidLog(format!("non-finite measurement at row {i}")));
        }
        if let Some(i) = gt_poses.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidLog(format!("non-finite ground-truth pose at row {i}")));
        }
        let dt = meta.dt();
        for (i, w) in measurements.windows(2).enumerate() {
            let step = w[1].stamp - w[0].stamp;
            if (step - dt).abs() > STAMP_TOLERANCE * dt {
                return Err(Error::InvalidLog(format!(
                    "irregular stamp spacing {step:.6} s at row {} (expected {dt:.6} s +-10%)",
                    i + 1
                )));
            }
        }
        Ok(Self {
            measurements,
            gt_poses,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn measurements(&self) -> &[Measurement] {
        &self.measurements
    }

    pub fn gt_poses(&self) -> &[Pose2D] {
        &self.gt_poses
    }

    pub fn meta(&self) -> &LogMeta {
        &self.meta
    }

    pub fn dt(&self) -> f64 {
        self.meta.dt()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 * self.dt()
    }

    /// Ground-truth path length [m].
    pub fn gt_path_length(&self) -> f64 {
        self.gt_poses.windows(2).map(|w| w[0].distance(&w[1])).sum()
    }
}
