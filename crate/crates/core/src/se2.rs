//! Planar rigid motions and the pose update operator.

use serde::{Deserialize, Serialize};

use crate::types::{wrap_angle, Pose2D, RelativePose};

/// Rigid transform of the plane, parameterized by its rotation angle so the
/// rotation block is orthonormal by construction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Transform2D {
    pub angle: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Transform2D {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(angle: f64, tx: f64, ty: f64) -> Self {
        Self { angle, tx, ty }
    }

    /// Robot-to-global transform of a pose.
    pub fn from_pose(p: &Pose2D) -> Self {
        Self::new(p.theta, p.x, p.y)
    }

    pub fn to_pose(&self) -> Pose2D {
        Pose2D::new(self.tx, self.ty, self.angle)
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Transform2D) -> Transform2D {
        let (s, c) = self.angle.sin_cos();
        Transform2D {
            angle: wrap_angle(self.angle + other.angle),
            tx: self.tx + c * other.tx - s * other.ty,
            ty: self.ty + s * other.tx + c * other.ty,
        }
    }

    pub fn inverse(&self) -> Transform2D {
        let (s, c) = self.angle.sin_cos();
        Transform2D {
            angle: wrap_angle(-self.angle),
            tx: -(c * self.tx + s * self.ty),
            ty: -(-s * self.tx + c * self.ty),
        }
    }

    pub fn apply(&self, point: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        [
            self.tx + c * point[0] - s * point[1],
            self.ty + s * point[0] + c * point[1],
        ]
    }

    /// Homogeneous 3x3 matrix, row-major.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let (s, c) = self.angle.sin_cos();
        [[c, -s, self.tx], [s, c, self.ty], [0.0, 0.0, 1.0]]
    }
}

impl From<RelativePose> for Transform2D {
    fn from(d: RelativePose) -> Self {
        Transform2D::new(d.dtheta, d.dx, d.dy)
    }
}

/// Applies an increment expressed in `prev`'s frame.
pub fn boxplus(prev: &Pose2D, delta: &RelativePose) -> Pose2D {
    Transform2D::from_pose(prev)
        .compose(&Transform2D::from(*delta))
        .to_pose()
}

/// The increment `d` with `boxplus(a, d) == b`.
pub fn relative_between(a: &Pose2D, b: &Pose2D) -> RelativePose {
    let (s, c) = a.theta.sin_cos();
    let ex = b.x - a.x;
    let ey = b.y - a.y;
    RelativePose {
        dx: c * ex + s * ey,
        dy: -s * ex + c * ey,
        dtheta: wrap_angle(b.theta - a.theta),
    }
}

/// Chains increments from `start`; the output excludes `start` itself.
pub fn accumulate(start: &Pose2D, deltas: &[RelativePose]) -> Vec<Pose2D> {
    let mut pose = *start;
    deltas
        .iter()
        .map(|d| {
            pose = boxplus(&pose, d);
            pose
        })
        .collect()
}

/// Increment produced by holding a twist `(v, w)` for `dt` seconds along an
/// exact circular arc.
pub fn arc_increment(v: f64, w: f64, dt: f64) -> RelativePose {
    let (along, across) = arc_factors(w, dt);
    RelativePose::new(v * along, v * across, w * dt)
}

/// `(sin(w dt) / w, (1 - cos(w dt)) / w)` with a series expansion near zero.
pub(crate) fn arc_factors(w: f64, dt: f64) -> (f64, f64) {
    let phi = w * dt;
    if phi.abs() < 1e-4 {
        let p2 = phi * phi;
        (dt * (1.0 - p2 / 6.0), dt * phi * (0.5 - p2 / 24.0))
    } else {
        (phi.sin() / w, (1.0 - phi.cos()) / w)
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, PI};

    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        out
    }

    fn assert_pose(p: Pose2D, x: f64, y: f64, theta: f64) {
        assert_abs_diff_eq!(p.x, x, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, y, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(p.theta - theta), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn from_pose_mapping() {
        assert_eq!(Transform2D::from_pose(&Pose2D::origin()), Transform2D::identity());
        let t = Transform2D::from_pose(&Pose2D::new(1.0, 2.0, PI));
        assert_eq!((t.angle, t.tx, t.ty), (PI, 1.0, 2.0));
    }

    #[test]
    fn boxplus_cases() {
        assert_pose(
            boxplus(&Pose2D::origin(), &RelativePose::new(0.1, 0.0, 0.05)),
            0.1,
            0.0,
            0.05,
        );
        let prev = Pose2D::new(1.0, 0.0, FRAC_PI_2);
        let got = boxplus(&prev, &RelativePose::new(1.0, 0.0, 0.0));
        // hand product of [[0,-1,1],[1,0,0],[0,0,1]] and [[1,0,1],[0,1,0],[0,0,1]]
        let m = matmul(
            &Transform2D::from_pose(&prev).matrix(),
            &Transform2D::new(0.0, 1.0, 0.0).matrix(),
        );
        assert_abs_diff_eq!(m[0][2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m[1][2], 1.0, epsilon = 1e-12);
        assert_pose(got, 1.0, 1.0, FRAC_PI_2);

        let p = Pose2D::new(-3.0, 0.7, 2.1);
        assert_eq!(boxplus(&p, &RelativePose::zero()), p);
    }

    #[test]
    fn relative_between_cases() {
        let a = Pose2D::new(0.3, -1.2, 0.4);
        assert_eq!(relative_between(&a, &a), RelativePose::zero());
        let d = relative_between(&Pose2D::new(0.0, 0.0, FRAC_PI_2), &Pose2D::new(0.0, 1.0, FRAC_PI_2));
        assert_abs_diff_eq!(d.dx, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.dy, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.dtheta, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn accumulate_cases() {
        assert!(accumulate(&Pose2D::origin(), &[]).is_empty());
        let start = Pose2D::new(1.0, 2.0, 0.5);
        assert_eq!(accumulate(&start, &[RelativePose::zero(); 2]), vec![start, start]);
        let quarter = RelativePose::new(0.0, 0.0, FRAC_PI_2);
        let out = accumulate(&Pose2D::origin(), &[quarter; 4]);
        assert_eq!(out.len(), 4);
        assert_pose(out[1], 0.0, 0.0, PI);
        assert_abs_diff_eq!(out[3].theta, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn arc_increment_matches_series_branch() {
        let dt = 0.04;
        let small = arc_increment(0.3, 1e-3, dt);
        let tiny = arc_increment(0.3, 2e-3, dt);
        assert!((small.dx - 0.3 * dt).abs() < 1e-9);
        assert!(tiny.dy > small.dy);
        let exact = arc_increment(0.3, 0.8, dt);
        assert_abs_diff_eq!(exact.dx, 0.3 * (0.8f64 * dt).sin() / 0.8, epsilon = 1e-15);
    }

    fn pose() -> impl Strategy<Value = Pose2D> {
        (-50.0..50.0f64, -50.0..50.0f64, -PI..PI).prop_map(|(x, y, t)| Pose2D::new(x, y, t))
    }

    proptest! {
        #[test]
        fn transform_round_trip(p in pose()) {
            let back = Transform2D::from_pose(&p).to_pose();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn compose_associative(a in pose(), b in pose(), c in pose()) {
            let (ta, tb, tc) = (Transform2D::from_pose(&a), Transform2D::from_pose(&b), Transform2D::from_pose(&c));
            let l = ta.compose(&tb).compose(&tc);
            let r = ta.compose(&tb.compose(&tc));
            prop_assert!((l.tx - r.tx).abs() < 1e-12 && (l.ty - r.ty).abs() < 1e-12);
            prop_assert!(wrap_angle(l.angle - r.angle).abs() < 1e-12);
        }

        #[test]
        fn inverse_cancels(a in pose()) {
            let t = Transform2D::from_pose(&a);
            let id = t.compose(&t.inverse());
            prop_assert!(id.tx.abs() < 1e-12 && id.ty.abs() < 1e-12 && wrap_angle(id.angle).abs() < 1e-12);
        }

        #[test]
        fn heading_stays_wrapped(a in pose(), d in (-5.0..5.0f64, -5.0..5.0f64, -10.0..10.0f64)) {
            let p = boxplus(&a, &RelativePose::new(d.0, d.1, d.2));
            prop_assert!(p.theta > -PI && p.theta <= PI);
        }
    }
}
