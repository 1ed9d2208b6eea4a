//! Kinematic skid-steer simulator producing ground truth and corrupted
//! wheel/IMU streams.
//!
//! Ground truth is integrated from a commanded twist sequence with exact
//! circular arcs. Sample `k` carries the twist held over `((k)dt, (k+1)dt]`
//! and the pose reached at its end, so a log starts one step away from the
//! origin.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se2::{arc_increment, boxplus, relative_between};
use crate::types::{LogMeta, Measurement, Pose2D, ScenarioKind, TrajectoryLog, DEFAULT_SAMPLE_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotParams {
    /// Distance between left and right wheels [m].
    pub track_width: f64,
    pub wheel_radius: f64,
    /// Linear velocity limit [m/s].
    pub max_v: f64,
    /// Angular velocity limit [rad/s].
    pub max_w: f64,
}

impl Default for RobotParams {
    fn default() -> Self {
        Self {
            track_width: 0.37,
            wheel_radius: 0.098,
            max_v: 0.4,
            max_w: 1.0,
        }
    }
}

impl RobotParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("robot.track_width", self.track_width),
            ("robot.wheel_radius", self.wheel_radius),
            ("robot.max_v", self.max_v),
            ("robot.max_w", self.max_w),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Body twist `(v, w)` implied by wheel speeds under the differential
    /// drive model.
    pub fn wheel_twist(&self, v_l: f64, v_r: f64) -> (f64, f64) {
        ((v_l + v_r) / 2.0, (v_r - v_l) / self.track_width)
    }
}

/// Which wheel a slip event affects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlipSide {
    #[default]
    Either,
    Left,
    Right,
}

/// Sensor corruption applied on top of the ideal readings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// White noise on each wheel speed [m/s].
    pub encoder_gauss_std: f64,
    /// Probability per sample that a slip event starts.
    pub encoder_slip_prob: f64,
    /// Multiplier on the slipping wheel's reported speed.
    pub encoder_slip_gain: f64,
    /// Length of a slip event [samples].
    pub slip_duration: usize,
    pub slip_side: SlipSide,
    /// Ratio of the effective skid-steer track width to the geometric one.
    /// Turning makes the wheels spin `skid_factor` times faster than the
    /// differential-drive model predicts.
    pub skid_factor: f64,
    /// Ratio of reported to true wheel speed (wheel radius miscalibration).
    pub wheel_scale: f64,
    /// Ratio of reported to true z turn rate.
    pub gyro_scale: f64,
    /// Accelerometer white noise [m/s^2].
    pub imu_acc_std: f64,
    /// Gyroscope white noise [rad/s].
    pub imu_gyro_std: f64,
    /// Initial gyro z bias drawn per log [rad/s].
    pub gyro_bias_std: f64,
    /// Gyro z bias random walk [rad/s per sqrt(s)].
    pub gyro_bias_walk_std: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            encoder_gauss_std: 0.01,
            encoder_slip_prob: 0.01,
            encoder_slip_gain: 1.6,
            slip_duration: 10,
            slip_side: SlipSide::Either,
            skid_factor: 1.25,
            wheel_scale: 1.05,
            gyro_scale: 1.08,
            imu_acc_std: 0.05,
            imu_gyro_std: 0.01,
            gyro_bias_std: 0.001,
            gyro_bias_walk_std: 0.0002,
            seed: 0,
        }
    }
}

impl NoiseModel {
    /// Ideal sensors: readings equal the differential-drive kinematics.
    pub fn noiseless() -> Self {
        Self {
            encoder_gauss_std: 0.0,
            encoder_slip_prob: 0.0,
            encoder_slip_gain: 1.0,
            slip_duration: 0,
            slip_side: SlipSide::Either,
            skid_factor: 1.0,
            wheel_scale: 1.0,
            gyro_scale: 1.0,
            imu_acc_std: 0.0,
            imu_gyro_std: 0.0,
            gyro_bias_std: 0.0,
            gyro_bias_walk_std: 0.0,
            seed: 0,
        }
    }

    /// Multiplies every stochastic magnitude by `factor`; the slip
    /// probability saturates at 1.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            encoder_gauss_std: self.encoder_gauss_std * factor,
            encoder_slip_prob: (self.encoder_slip_prob * factor).min(1.0),
            imu_acc_std: self.imu_acc_std * factor,
            imu_gyro_std: self.imu_gyro_std * factor,
            gyro_bias_std: self.gyro_bias_std * factor,
            gyro_bias_walk_std: self.gyro_bias_walk_std * factor,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("noise.encoder_gauss_std", self.encoder_gauss_std),
            ("noise.imu_acc_std", self.imu_acc_std),
            ("noise.imu_gyro_std", self.imu_gyro_std),
            ("noise.gyro_bias_std", self.gyro_bias_std),
            ("noise.gyro_bias_walk_std", self.gyro_bias_walk_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, format!("standard deviation must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.encoder_slip_prob) {
            return Err(Error::config(
                "noise.encoder_slip_prob",
                format!("probability must lie in [0, 1], got {}", self.encoder_slip_prob),
            ));
        }
        if !(self.encoder_slip_gain.is_finite() && self.encoder_slip_gain >= 0.0) {
            return Err(Error::config("noise.encoder_slip_gain", "must be finite and >= 0"));
        }
        for (name, v) in [
            ("noise.skid_factor", self.skid_factor),
            ("noise.wheel_scale", self.wheel_scale),
            ("noise.gyro_scale", self.gyro_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub kind: ScenarioKind,
    /// Length of the run [s].
    pub duration: f64,
    /// [Hz]
    #[serde(default = "default_rate")]
    pub sample_rate: f64,
    /// Seeds the maneuver choices of the script.
    #[serde(default)]
    pub seed: u64,
}

fn default_rate() -> f64 {
    DEFAULT_SAMPLE_RATE
}

impl ScenarioScript {
    pub fn new(kind: ScenarioKind, duration: f64, seed: u64) -> Self {
        Self {
            kind,
            duration,
            sample_rate: DEFAULT_SAMPLE_RATE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::InvalidScript(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(Error::InvalidScript(format!(
                "sample rate must be positive, got {}",
                self.sample_rate
            )));
        }
        if self.sample_count() == 0 {
            return Err(Error::InvalidScript("duration shorter than one sample".into()));
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }
}

/// Commanded body twist.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub v: f64,
    pub w: f64,
}

impl Twist {
    pub fn new(v: f64, w: f64) -> Self {
        Self { v, w }
    }
}

/// Simulates one scenario.
pub fn generate(script: &ScenarioScript, robot: &RobotParams, noise: &NoiseModel) -> Result<TrajectoryLog> {
    script.validate()?;
    robot.validate()?;
    let twists = scenario_twists(script, robot);
    let meta = LogMeta {
        kind: script.kind,
        sample_rate: script.sample_rate,
        seed: script.seed,
    };
    generate_from_twists(&twists, meta, robot, noise)
}

/// Simulates an explicit twist sequence. Every twist must respect the
/// robot's velocity limits.
pub fn generate_from_twists(
    twists: &[Twist],
    meta: LogMeta,
    robot: &RobotParams,
    noise: &NoiseModel,
) -> Result<TrajectoryLog> {
    noise.validate()?;
    if twists.is_empty() {
        return Err(Error::InvalidScript("empty twist sequence".into()));
    }
    const SLACK: f64 = 1e-9;
    if let Some(i) = twists
        .iter()
        .position(|t| !(t.v.abs() <= robot.max_v + SLACK && t.w.abs() <= robot.max_w + SLACK))
    {
        return Err(Error::InvalidScript(format!(
            "twist {i} ({:.3} m/s, {:.3} rad/s) exceeds robot limits",
            twists[i].v, twists[i].w
        )));
    }

    let dt = meta.dt();
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed ^ meta.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let gauss = |std: f64, rng: &mut ChaCha8Rng| -> f64 {
        if std == 0.0 {
            0.0
        } else {
            std * rng.sample::<f64, _>(StandardNormal)
        }
    };

    let half_track = robot.track_width / 2.0;
    let mut bias = gauss(noise.gyro_bias_std, &mut rng);
    let mut slip_left = 0usize;
    let mut slip_on_right = false;
    let mut pose = Pose2D::origin();
    let mut prev = twists[0];

    let mut measurements = Vec::with_capacity(twists.len());
    let mut gt = Vec::with_capacity(twists.len());
    for (k, tw) in twists.iter().enumerate() {
        pose = boxplus(&pose, &arc_increment(tw.v, tw.w, dt));
        gt.push(pose);

        let skid_w = noise.skid_factor * tw.w * half_track;
        let mut v_l = noise.wheel_scale * (tw.v - skid_w);
        let mut v_r = noise.wheel_scale * (tw.v + skid_w);
        if slip_left == 0
            && noise.slip_duration > 0
            && noise.encoder_slip_prob > 0.0
            && rng.random::<f64>() < noise.encoder_slip_prob
        {
            slip_left = noise.slip_duration;
            slip_on_right = match noise.slip_side {
                SlipSide::Left => false,
                SlipSide::Right => true,
                SlipSide::Either => rng.random::<bool>(),
            };
        }
        if slip_left > 0 {
            if slip_on_right {
                v_r *= noise.encoder_slip_gain;
            } else {
                v_l *= noise.encoder_slip_gain;
            }
            slip_left -= 1;
        }
        v_l += gauss(noise.encoder_gauss_std, &mut rng);
        v_r += gauss(noise.encoder_gauss_std, &mut rng);

        let acc_x = (tw.v - prev.v) / dt + gauss(noise.imu_acc_std, &mut rng);
        let acc_y = tw.v * tw.w + gauss(noise.imu_acc_std, &mut rng);
        let acc_z = gauss(noise.imu_acc_std, &mut rng);
        let gyro_x = gauss(noise.imu_gyro_std, &mut rng);
        let gyro_y = gauss(noise.imu_gyro_std, &mut rng);
        let gyro_z = noise.gyro_scale * tw.w + bias + gauss(noise.imu_gyro_std, &mut rng);
        bias += gauss(noise.gyro_bias_walk_std * dt.sqrt(), &mut rng);

        measurements.push(Measurement {
            v_l,
            v_r,
            acc_x,
            acc_y,
            acc_z,
            gyro_x,
            gyro_y,
            gyro_z,
            stamp: (k + 1) as f64 / meta.sample_rate,
        });
        prev = *tw;
    }
    TrajectoryLog::new(measurements, gt, meta)
}

/// Integrates encoder-only odometry, anchored at the first ground-truth pose.
pub fn dead_reckon(log: &TrajectoryLog, robot: &RobotParams) -> Vec<Pose2D> {
    let Some(first) = log.gt_poses().first() else {
        return Vec::new();
    };
    let dt = log.dt();
    let mut pose = *first;
    let mut out = Vec::with_capacity(log.len());
    out.push(pose);
    for m in &log.measurements()[1..] {
        let (v, w) = robot.wheel_twist(m.v_l, m.v_r);
        pose = boxplus(&pose, &arc_increment(v, w, dt));
        out.push(pose);
    }
    out
}

/// Commanded twists for a built-in scenario.
pub fn scenario_twists(script: &ScenarioScript, robot: &RobotParams) -> Vec<Twist> {
    let n = script.sample_count();
    let dt = script.dt();
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
    let twists = match script.kind {
        ScenarioKind::A => circles(n, dt, robot, &mut rng),
        ScenarioKind::B => lemniscate(n, dt, robot, &mut rng),
        ScenarioKind::C => irregular(n, dt, robot, &mut rng),
        ScenarioKind::Random => random_drive(n, dt, robot, &mut rng),
    };
    debug_assert_eq!(twists.len(), n);
    twists
}

/// Drives the commanded twist toward piecewise targets under acceleration
/// limits.
struct RateLimiter {
    current: Twist,
    dt: f64,
}

impl RateLimiter {
    fn new(dt: f64) -> Self {
        Self {
            current: Twist::default(),
            dt,
        }
    }

    fn step(&mut self, target: Twist, max_acc: f64, max_alpha: f64) -> Twist {
        let dv = (target.v - self.current.v).clamp(-max_acc * self.dt, max_acc * self.dt);
        let dw = (target.w - self.current.w).clamp(-max_alpha * self.dt, max_alpha * self.dt);
        self.current.v += dv;
        self.current.w += dw;
        self.current
    }
}

fn clamp_twist(t: Twist, robot: &RobotParams) -> Twist {
    Twist::new(
        t.v.clamp(-robot.max_v, robot.max_v),
        t.w.clamp(-robot.max_w, robot.max_w),
    )
}

/// Type A: repeated circles in one turning direction, radius alternating
/// between a tight (0.5-0.9 m) and a wide (1.1-1.5 m) loop.
fn circles(n: usize, dt: f64, robot: &RobotParams, rng: &mut ChaCha8Rng) -> Vec<Twist> {
    let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut limiter = RateLimiter::new(dt);
    let mut out = Vec::with_capacity(n);
    let mut lap = 0usize;
    while out.len() < n {
        let radius = if lap.is_multiple_of(2) {
            rng.random_range(0.5..0.9)
        } else {
            rng.random_range(1.1..1.5)
        };
        let v = rng.random_range(0.25..0.38f64).min(robot.max_w * radius);
        let target = clamp_twist(Twist::new(v, dir * v / radius), robot);
        let steps = ((TAU * radius / v) / dt).round() as usize;
        for _ in 0..steps {
            if out.len() == n {
                break;
            }
            out.push(limiter.step(target, 0.5, 1.5));
        }
        lap += 1;
    }
    out
}

/// Point on the lemniscate of Bernoulli stretched to a 3 x 1.5 m footprint.
fn lemniscate_point(s: f64) -> [f64; 2] {
    const HALF_WIDTH: f64 = 1.5;
    // max of sin*cos/(1+sin^2) is 1/(2 sqrt 2); stretch it to 0.75 m
    const Y_GAIN: f64 = 0.75 * 2.0 * std::f64::consts::SQRT_2;
    let (sn, cs) = s.sin_cos();
    let den = 1.0 + sn * sn;
    [HALF_WIDTH * cs / den, Y_GAIN * sn * cs / den]
}

/// Type B: follows the figure-eight through exact arcs between curve samples,
/// so every sample lies on the curve and a full period closes the loop.
/// The period is a whole number of samples.
fn lemniscate(n: usize, dt: f64, robot: &RobotParams, rng: &mut ChaCha8Rng) -> Vec<Twist> {
    let mirror = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let speed_fraction = rng.random_range(0.75..0.95);
    let period = lemniscate_period_samples(dt, robot, speed_fraction);
    let points = lemniscate_points(period, mirror);
    let mut pose = Pose2D::origin();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let target = points[(k + 1) % period];
        let tw = chase_arc(&pose, target, dt);
        pose = boxplus(&pose, &arc_increment(tw.v, tw.w, dt));
        out.push(clamp_twist(tw, robot));
    }
    out
}

/// Curve samples of one period, expressed in the frame whose origin is the
/// start point with the x axis along the initial tangent.
fn lemniscate_points(period: usize, mirror: f64) -> Vec<[f64; 2]> {
    let start = lemniscate_point(0.0);
    // tangent at s=0 points along +y; rotate by -pi/2 (mirror flips the lobe order)
    (0..period)
        .map(|k| {
            let s = mirror * TAU * k as f64 / period as f64;
            let p = lemniscate_point(s);
            let (ex, ey) = (p[0] - start[0], p[1] - start[1]);
            [mirror * ey, -mirror * ex]
        })
        .collect()
}

/// Smallest period (in samples) whose chase twists stay within
/// `speed_fraction` of both velocity limits.
pub(crate) fn lemniscate_period_samples(dt: f64, robot: &RobotParams, speed_fraction: f64) -> usize {
    let mut period = (10.0 / dt).ceil() as usize;
    loop {
        let points = lemniscate_points(period, 1.0);
        let mut pose = Pose2D::origin();
        let mut ok = true;
        for k in 0..period {
            let tw = chase_arc(&pose, points[(k + 1) % period], dt);
            if tw.v.abs() > speed_fraction * robot.max_v || tw.w.abs() > speed_fraction * robot.max_w {
                ok = false;
                break;
            }
            pose = boxplus(&pose, &arc_increment(tw.v, tw.w, dt));
        }
        if ok {
            return period;
        }
        period = (period as f64 * 1.05).ceil() as usize;
    }
}

/// Twist whose arc starts tangent to `pose`'s heading and ends on `target`.
fn chase_arc(pose: &Pose2D, target: [f64; 2], dt: f64) -> Twist {
    let rel = relative_between(pose, &Pose2D::new(target[0], target[1], pose.theta));
    let chord = rel.dx.hypot(rel.dy);
    let half = rel.dy.atan2(rel.dx);
    let turn = 2.0 * half;
    let length = if half.abs() < 1e-9 {
        chord
    } else {
        chord * half / half.sin()
    };
    Twist::new(length / dt, turn / dt)
}

#[derive(Debug, Clone, Copy)]
enum Maneuver {
    Sprint,
    HardBrake,
    Spin,
    TightCurve,
    Cruise,
    Arc,
}

impl Maneuver {
    /// Target twist plus linear/angular acceleration limits.
    fn plan(self, robot: &RobotParams, rng: &mut ChaCha8Rng) -> (Twist, f64, f64) {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        match self {
            Maneuver::Sprint => (
                Twist::new(robot.max_v * rng.random_range(0.8..1.0), rng.random_range(-0.3..0.3)),
                rng.random_range(1.0..2.0),
                3.0,
            ),
            Maneuver::HardBrake => (Twist::new(0.0, 0.0), rng.random_range(1.5..2.5), 4.0),
            Maneuver::Spin => (
                Twist::new(0.0, sign * robot.max_w * rng.random_range(0.7..1.0)),
                1.5,
                rng.random_range(2.0..4.0),
            ),
            Maneuver::TightCurve => {
                let v = rng.random_range(0.2..0.35);
                (Twist::new(v, sign * (v / 0.35).min(robot.max_w)), 1.0, 3.0)
            }
            Maneuver::Cruise => (
                Twist::new(rng.random_range(0.15..0.35), rng.random_range(-0.2..0.2)),
                0.5,
                1.5,
            ),
            Maneuver::Arc => {
                let v = rng.random_range(0.1..0.4);
                let radius = rng.random_range(0.4..2.0);
                (Twist::new(v, sign * v / radius), rng.random_range(0.3..1.0), 1.5)
            }
        }
    }
}

fn piecewise(
    n: usize,
    dt: f64,
    robot: &RobotParams,
    rng: &mut ChaCha8Rng,
    menu: &[Maneuver],
    seconds: std::ops::Range<f64>,
) -> Vec<Twist> {
    let mut limiter = RateLimiter::new(dt);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let maneuver = menu[rng.random_range(0..menu.len())];
        let (target, acc, alpha) = maneuver.plan(robot, rng);
        let target = clamp_twist(target, robot);
        let steps = (rng.random_range(seconds.clone()) / dt).round() as usize;
        for _ in 0..steps.max(1) {
            if out.len() == n {
                break;
            }
            out.push(limiter.step(target, acc, alpha));
        }
    }
    out
}

/// Type C: bang-bang segments of brakes, sprints, spins and tight curves.
fn irregular(n: usize, dt: f64, robot: &RobotParams, rng: &mut ChaCha8Rng) -> Vec<Twist> {
    use Maneuver::*;
    piecewise(
        n,
        dt,
        robot,
        rng,
        &[Sprint, HardBrake, Spin, TightCurve, Cruise],
        1.5..4.0,
    )
}

/// Training drive: every maneuver family, including steady arcs.
fn random_drive(n: usize, dt: f64, robot: &RobotParams, rng: &mut ChaCha8Rng) -> Vec<Twist> {
    use Maneuver::*;
    piecewise(
        n,
        dt,
        robot,
        rng,
        &[Sprint, HardBrake, Spin, TightCurve, Cruise, Arc, Arc],
        1.0..6.0,
    )
}

/// Lemniscate period in seconds for the given speed fraction.
pub fn lemniscate_period(sample_rate: f64, robot: &RobotParams, speed_fraction: f64) -> f64 {
    lemniscate_period_samples(1.0 / sample_rate, robot, speed_fraction) as f64 / sample_rate
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, PI};

    use approx::assert_abs_diff_eq;

    use super::*;

    fn meta(kind: ScenarioKind) -> LogMeta {
        LogMeta {
            kind,
            sample_rate: 25.0,
            seed: 1,
        }
    }

    fn constant(v: f64, w: f64, seconds: f64) -> Vec<Twist> {
        vec![Twist::new(v, w); (seconds * 25.0) as usize]
    }

    #[test]
    fn straight_line_noiseless() {
        let robot = RobotParams::default();
        let log = generate_from_twists(
            &constant(0.2, 0.0, 1.0),
            meta(ScenarioKind::Random),
            &robot,
            &NoiseModel::noiseless(),
        )
        .unwrap();
        assert_eq!(log.len(), 25);
        let end = log.gt_poses().last().unwrap();
        assert_abs_diff_eq!(end.x, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(end.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(end.theta, 0.0, epsilon = 1e-12);
        for m in log.measurements() {
            assert_abs_diff_eq!(m.v_l, 0.2, epsilon = 1e-15);
            assert_abs_diff_eq!(m.v_r, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn pure_spin_noiseless() {
        // pi/2 rad/s is above the default 1 rad/s limit
        let robot = RobotParams {
            max_w: 2.0,
            ..Default::default()
        };
        let log = generate_from_twists(
            &constant(0.0, FRAC_PI_2, 2.0),
            meta(ScenarioKind::Random),
            &robot,
            &NoiseModel::noiseless(),
        )
        .unwrap();
        let end = log.gt_poses().last().unwrap();
        assert_abs_diff_eq!(end.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(end.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(end.theta.abs(), PI, epsilon = 1e-12);
        assert!(log.measurements().iter().all(|m| m.gyro_z == FRAC_PI_2));
    }

    #[test]
    fn limits_are_enforced() {
        let robot = RobotParams::default();
        let err = generate_from_twists(
            &constant(0.0, FRAC_PI_2, 1.0),
            meta(ScenarioKind::Random),
            &robot,
            &NoiseModel::noiseless(),
        );
        assert!(matches!(err, Err(Error::InvalidScript(_))));
    }

    #[test]
    fn rejects_bad_scripts() {
        let robot = RobotParams::default();
        let noise = NoiseModel::noiseless();
        for duration in [0.0, -1.0, f64::NAN] {
            let script = ScenarioScript::new(ScenarioKind::A, duration, 0);
            assert!(matches!(
                generate(&script, &robot, &noise),
                Err(Error::InvalidScript(_))
            ));
        }
    }

    #[test]
    fn builtin_scripts_respect_limits() {
        let robot = RobotParams::default();
        for kind in [ScenarioKind::A, ScenarioKind::B, ScenarioKind::C, ScenarioKind::Random] {
            for seed in 0..4 {
                let twists = scenario_twists(&ScenarioScript::new(kind, 120.0, seed), &robot);
                assert_eq!(twists.len(), 3000);
                for t in &twists {
                    assert!(t.v.abs() <= 0.4 + 1e-12 && t.w.abs() <= 1.0 + 1e-12, "{kind}: {t:?}");
                }
            }
        }
    }

    #[test]
    fn lemniscate_closes_after_one_period() {
        let robot = RobotParams::default();
        for seed in 0..6 {
            let script = ScenarioScript::new(ScenarioKind::B, 60.0, seed);
            let log = generate(&script, &robot, &NoiseModel::noiseless()).unwrap();
            // speed fraction is drawn the same way the script does
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let _mirror: bool = rng.random();
            let fraction = rng.random_range(0.75..0.95);
            let period = lemniscate_period_samples(script.dt(), &robot, fraction);
            assert!(period < log.len());
            // sample k holds the pose after k+1 steps; the origin is step 0
            let closing = log.gt_poses()[period - 1];
            assert!(closing.x.hypot(closing.y) < 1e-6, "seed {seed}: {closing:?}");
            // footprint of the stretched lemniscate
            let xs = log.gt_poses().iter().map(|p| p.x);
            let span = xs.clone().fold(f64::MIN, f64::max) - xs.fold(f64::MAX, f64::min);
            assert!(span > 1.0 && span < 3.2);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let robot = RobotParams::default();
        let noise = NoiseModel {
            seed: 9,
            ..Default::default()
        };
        let script = ScenarioScript::new(ScenarioKind::C, 30.0, 5);
        let a = generate(&script, &robot, &noise).unwrap();
        let b = generate(&script, &robot, &noise).unwrap();
        assert_eq!(a, b);
        let c = generate(&ScenarioScript { seed: 6, ..script }, &robot, &noise).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dead_reckon_noiseless_matches_truth() {
        let robot = RobotParams::default();
        for kind in [ScenarioKind::A, ScenarioKind::B, ScenarioKind::C, ScenarioKind::Random] {
            let log = generate(&ScenarioScript::new(kind, 40.0, 3), &robot, &NoiseModel::noiseless()).unwrap();
            let est = dead_reckon(&log, &robot);
            assert_eq!(est.len(), log.len());
            for (e, g) in est.iter().zip(log.gt_poses()) {
                assert!(e.distance(g) < 1e-9);
            }
        }
    }

    #[test]
    fn right_wheel_slip_turns_heading_negative() {
        let robot = RobotParams::default();
        let noise = NoiseModel {
            encoder_slip_prob: 1.0,
            encoder_slip_gain: 0.5,
            slip_duration: 5,
            slip_side: SlipSide::Right,
            ..NoiseModel::noiseless()
        };
        let log = generate_from_twists(&constant(0.3, 0.0, 4.0), meta(ScenarioKind::Random), &robot, &noise).unwrap();
        let est = dead_reckon(&log, &robot);
        // omega = (0.5 v - v) / track_width < 0
        assert!(est.last().unwrap().theta < -0.5);
        assert!(log.gt_poses().last().unwrap().theta.abs() < 1e-12);
    }

    #[test]
    fn stationary_log_stays_put() {
        let robot = RobotParams::default();
        let log = generate_from_twists(
            &constant(0.0, 0.0, 2.0),
            meta(ScenarioKind::Random),
            &robot,
            &NoiseModel::noiseless(),
        )
        .unwrap();
        let est = dead_reckon(&log, &robot);
        assert!(est.iter().all(|p| *p == Pose2D::origin()));
    }

    #[test]
    fn stamps_are_uniform() {
        let robot = RobotParams::default();
        let log = generate(
            &ScenarioScript::new(ScenarioKind::A, 10.0, 0),
            &robot,
            &NoiseModel::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(log.measurements()[0].stamp, 0.04, epsilon = 1e-15);
        assert_abs_diff_eq!(log.duration(), 10.0, epsilon = 1e-9);
    }
}
