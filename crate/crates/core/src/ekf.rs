//! Extended Kalman filter fusing wheel encoders and the z gyro.
//!
//! The state is `(x, y, theta, v, w)`. Body velocities are observed directly
//! (`v` by the encoder mean, `w` by both the encoder difference and the
//! gyro) and the pose follows by integrating them along exact circular
//! arcs.

use nalgebra::{Matrix3, Matrix3x5, Matrix5, Vector3, Vector5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se2::{arc_factors, arc_increment, boxplus};
use crate::simulator::RobotParams;
use crate::types::{wrap_angle, Measurement, Pose2D, TrajectoryLog};

/// Noise settings of the filter; all entries are variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EkfTuning {
    /// Process noise density of `(x, y, theta, v, w)`, per second.
    pub process_noise: [f64; 5],
    /// Encoder speed, encoder turn rate, gyro turn rate.
    pub measurement_noise: [f64; 3],
    pub initial_cov: [f64; 5],
}

impl Default for EkfTuning {
    fn default() -> Self {
        Self {
            process_noise: [1e-6, 1e-6, 1e-6, 0.005, 0.2],
            measurement_noise: [0.1, 10.0, 1e-5],
            initial_cov: [1e-9, 1e-9, 1e-9, 1.0, 1.0],
        }
    }
}

impl EkfTuning {
    pub fn validate(&self) -> Result<()> {
        let groups: [(&str, &[f64], bool); 3] = [
            ("ekf.process_noise", &self.process_noise, false),
            ("ekf.measurement_noise", &self.measurement_noise, true),
            ("ekf.initial_cov", &self.initial_cov, false),
        ];
        for (field, values, strict) in groups {
            if values
                .iter()
                .any(|&v| !v.is_finite() || v < 0.0 || (strict && v == 0.0))
            {
                let req = if strict { "positive" } else { "non-negative" };
                return Err(Error::config(
                    field,
                    format!("variances must be finite and {req}, got {values:?}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub mean: Vector5<f64>,
    pub cov: Matrix5<f64>,
    /// Process noise density.
    pub q: Matrix5<f64>,
    /// Measurement noise.
    pub rm: Matrix3<f64>,
}

fn observation() -> Matrix3x5<f64> {
    Matrix3x5::new(
        0.0, 0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 0.0, 1.0, //
        0.0, 0.0, 0.0, 0.0, 1.0,
    )
}

impl EkfState {
    /// Filter at `pose` with unknown velocities.
    pub fn new(pose: &Pose2D, tuning: &EkfTuning) -> Self {
        Self {
            mean: Vector5::new(pose.x, pose.y, pose.theta, 0.0, 0.0),
            cov: Matrix5::from_diagonal(&Vector5::from(tuning.initial_cov)),
            q: Matrix5::from_diagonal(&Vector5::from(tuning.process_noise)),
            rm: Matrix3::from_diagonal(&Vector3::from(tuning.measurement_noise)),
        }
    }

    pub fn pose(&self) -> Pose2D {
        Pose2D::new(self.mean[0], self.mean[1], self.mean[2])
    }

    /// Motion over `dt` seconds with constant body velocities.
    pub fn predict(&mut self, dt: f64) {
        let (v, w) = (self.mean[3], self.mean[4]);
        let theta = self.mean[2];
        let next = boxplus(&self.pose(), &arc_increment(v, w, dt));
        let jac = motion_jacobian(theta, v, w, dt);
        self.mean[0] = next.x;
        self.mean[1] = next.y;
        self.mean[2] = next.theta;
        self.cov = jac * self.cov * jac.transpose() + self.q * dt;
        self.symmetrize();
    }

    /// Fuses one sensor sample.
    pub fn update(&mut self, meas: &Measurement, robot: &RobotParams) {
        let (v_enc, w_enc) = robot.wheel_twist(meas.v_l, meas.v_r);
        let z = Vector3::new(v_enc, w_enc, meas.gyro_z);
        let h = observation();
        let innovation = z - h * self.mean;
        let s = h * self.cov * h.transpose() + self.rm;
        let Some(s_inv) = s.try_inverse() else {
            return;
        };
        let gain = self.cov * h.transpose() * s_inv;
        self.mean += gain * innovation;
        self.mean[2] = wrap_angle(self.mean[2]);
        // Joseph form keeps the covariance positive semi-definite.
        let i_kh = Matrix5::identity() - gain * h;
        self.cov = i_kh * self.cov * i_kh.transpose() + gain * self.rm * gain.transpose();
        self.symmetrize();
    }

    fn symmetrize(&mut self) {
        self.cov = (self.cov + self.cov.transpose()) * 0.5;
    }
}

/// Jacobian of the arc motion model with respect to `(x, y, theta, v, w)`.
pub fn motion_jacobian(theta: f64, v: f64, w: f64, dt: f64) -> Matrix5<f64> {
    let (s, c) = theta.sin_cos();
    let (a, b) = arc_factors(w, dt);
    let phi = w * dt;
    // derivatives of the arc factors with respect to w
    let (da, db) = if phi.abs() < 1e-4 {
        (-dt * dt * phi / 3.0, dt * dt * (0.5 - phi * phi / 8.0))
    } else {
        let (sp, cp) = phi.sin_cos();
        ((dt * cp * w - sp) / (w * w), (dt * sp * w - (1.0 - cp)) / (w * w))
    };
    let (dx, dy) = (v * a, v * b);
    let mut j = Matrix5::identity();
    j[(0, 2)] = -s * dx - c * dy;
    j[(1, 2)] = c * dx - s * dy;
    j[(0, 3)] = c * a - s * b;
    j[(1, 3)] = s * a + c * b;
    j[(0, 4)] = v * (c * da - s * db);
    j[(1, 4)] = v * (s * da + c * db);
    j[(2, 4)] = dt;
    j
}

/// Filters a whole log. The estimate starts at the first ground-truth pose
/// and is aligned sample by sample with the log.
pub fn run(log: &TrajectoryLog, robot: &RobotParams, tuning: &EkfTuning) -> Vec<Pose2D> {
    let Some(first) = log.gt_poses().first() else {
        return Vec::new();
    };
    let dt = log.dt();
    let mut state = EkfState::new(first, tuning);
    let mut out = Vec::with_capacity(log.len());
    out.push(state.pose());
    for m in &log.measurements()[1..] {
        state.update(m, robot);
        state.predict(dt);
        out.push(state.pose());
    }
    out
}
