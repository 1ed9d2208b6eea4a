//! Trajectory error metrics: mean absolute trajectory error (m-ATE), the
//! re-anchored segment error (SE), per-sample error series and histograms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::se2::{boxplus, relative_between};
use crate::types::{wrap_angle, Pose2D};

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt() })
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

/// Position [m] and heading [rad] error summary.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseStat {
    pub position: Stat,
    pub heading: Stat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Segment length along the ground-truth path [m].
    pub segment_length: f64,
    /// Spacing of segment start points [samples].
    pub segment_stride: usize,
    pub histogram_bins: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            segment_length: 1.0,
            segment_stride: 1,
            histogram_bins: 20,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.segment_length.is_finite() && self.segment_length > 0.0) {
            return Err(Error::config("metrics.segment_length", "must be positive"));
        }
        if self.segment_stride == 0 {
            return Err(Error::config("metrics.segment_stride", "must be at least 1"));
        }
        if self.histogram_bins == 0 {
            return Err(Error::config("metrics.histogram_bins", "must be at least 1"));
        }
        Ok(())
    }
}

fn check_lengths(est: &[Pose2D], gt: &[Pose2D]) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch {
            est: est.len(),
            gt: gt.len(),
        });
    }
    if est.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

fn heading_error(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Per-sample position and absolute wrapped heading errors.
pub fn error_series(est: &[Pose2D], gt: &[Pose2D]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lengths(est, gt)?;
    Ok(est
        .iter()
        .zip(gt)
        .map(|(e, g)| (e.distance(g), heading_error(e.theta, g.theta)))
        .unzip())
}

pub fn m_ate(est: &[Pose2D], gt: &[Pose2D]) -> Result<PoseStat> {
    let (pos, head) = error_series(est, gt)?;
    Ok(PoseStat {
        position: Stat::of(&pos)?,
        heading: Stat::of(&head)?,
    })
}

/// End-pose errors of every segment whose ground-truth path is longer than
/// `length`, starting every `stride` samples. Each estimated segment is
/// re-anchored at the ground-truth start pose.
pub fn segment_errors(est: &[Pose2D], gt: &[Pose2D], length: f64, stride: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lengths(est, gt)?;
    if stride == 0 {
        return Err(Error::config("metrics.segment_stride", "must be at least 1"));
    }
    // cumulative ground-truth arc length
    let mut arc = Vec::with_capacity(gt.len());
    let mut total = 0.0;
    arc.push(0.0);
    for w in gt.windows(2) {
        total += w[0].distance(&w[1]);
        arc.push(total);
    }
    let mut pos = Vec::new();
    let mut head = Vec::new();
    let mut end = 0;
    for start in (0..gt.len()).step_by(stride) {
        end = end.max(start);
        while end < gt.len() && arc[end] - arc[start] <= length {
            end += 1;
        }
        if end == gt.len() {
            break;
        }
        let anchored = boxplus(&gt[start], &relative_between(&est[start], &est[end]));
        pos.push(anchored.distance(&gt[end]));
        head.push(heading_error(anchored.theta, gt[end].theta));
    }
    if pos.is_empty() {
        return Err(Error::TrajectoryTooShort {
            arc_length: total,
            segment_length: length,
        });
    }
    Ok((pos, head))
}

pub fn segment_error(est: &[Pose2D], gt: &[Pose2D], length: f64, stride: usize) -> Result<PoseStat> {
    let (pos, head) = segment_errors(est, gt, length, stride)?;
    Ok(PoseStat {
        position: Stat::of(&pos)?,
        heading: Stat::of(&head)?,
    })
}

/// Equal-width bins over `[0, max(values)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` bin boundaries.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if bins == 0 {
        return Err(Error::config("metrics.histogram_bins", "must be at least 1"));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let idx = ((v.max(0.0) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Every metric of one estimated trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub m_ate: PoseStat,
    pub segment: PoseStat,
    pub segment_length: f64,
    pub position_series: Vec<f64>,
    pub heading_series: Vec<f64>,
    pub se_position_hist: Histogram,
    pub se_heading_hist: Histogram,
    /// Raw per-segment errors, kept for pooling across trajectories.
    pub se_position: Vec<f64>,
    pub se_heading: Vec<f64>,
}

impl MetricReport {
    pub fn compute(est: &[Pose2D], gt: &[Pose2D], cfg: &MetricConfig) -> Result<Self> {
        cfg.validate()?;
        let (position_series, heading_series) = error_series(est, gt)?;
        let (se_position, se_heading) = segment_errors(est, gt, cfg.segment_length, cfg.segment_stride)?;
        Ok(Self {
            m_ate: PoseStat {
                position: Stat::of(&position_series)?,
                heading: Stat::of(&heading_series)?,
            },
            segment: PoseStat {
                position: Stat::of(&se_position)?,
                heading: Stat::of(&se_heading)?,
            },
            segment_length: cfg.segment_length,
            se_position_hist: histogram(&se_position, cfg.histogram_bins)?,
            se_heading_hist: histogram(&se_heading, cfg.histogram_bins)?,
            position_series,
            heading_series,
            se_position,
            se_heading,
        })
    }

    /// Statistics over the samples and segments of several reports taken
    /// together.
    pub fn pooled<'a>(reports: impl IntoIterator<Item = &'a MetricReport>) -> Result<(PoseStat, PoseStat)> {
        let mut series = (Vec::new(), Vec::new());
        let mut segs = (Vec::new(), Vec::new());
        for r in reports {
            series.0.extend_from_slice(&r.position_series);
            series.1.extend_from_slice(&r.heading_series);
            segs.0.extend_from_slice(&r.se_position);
            segs.1.extend_from_slice(&r.se_heading);
        }
        Ok((
            PoseStat {
                position: Stat::of(&series.0)?,
                heading: Stat::of(&series.1)?,
            },
            PoseStat {
                position: Stat::of(&segs.0)?,
                heading: Stat::of(&segs.1)?,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(n: usize, step: f64) -> Vec<Pose2D> {
        (0..n).map(|i| Pose2D::new(i as f64 * step, 0.0, 0.0)).collect()
    }

    #[test]
    fn identical_trajectories() {
        let gt = straight(50, 0.1);
        let r = MetricReport::compute(&gt, &gt, &MetricConfig::default()).unwrap();
        assert_eq!(r.m_ate, PoseStat::default());
        assert!(r.segment.position.mean < 1e-12 && r.segment.heading.mean < 1e-12);
        assert!(r.position_series.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn constant_offset() {
        let gt = straight(20, 0.1);
        let est: Vec<Pose2D> = gt.iter().map(|p| Pose2D::new(p.x + 0.1, p.y, p.theta)).collect();
        let m = m_ate(&est, &gt).unwrap();
        assert!((m.position.mean - 0.1).abs() < 1e-12);
        assert!(m.position.std < 1e-12);
        assert_eq!(m.heading, Stat::default());
        // a pure translation disappears after re-anchoring
        assert!(segment_error(&est, &gt, 0.5, 1).unwrap().position.mean < 1e-12);
    }

    #[test]
    fn three_pose_hand_case() {
        let gt = [
            Pose2D::new(0.0, 0.0, 0.0),
            Pose2D::new(1.0, 0.0, 0.0),
            Pose2D::new(2.0, 0.0, 0.5),
        ];
        let est = [
            Pose2D::new(0.0, 0.0, 0.0),
            Pose2D::new(1.0, 3.0, 0.0),
            Pose2D::new(2.0, 4.0, -0.5),
        ];
        // position errors 0, 3, 4; heading errors 0, 0, 1
        let m = m_ate(&est, &gt).unwrap();
        assert!((m.position.mean - 7.0 / 3.0).abs() < 1e-12);
        let var: f64 = [0.0f64, 3.0, 4.0].iter().map(|e| (e - 7.0 / 3.0).powi(2)).sum::<f64>() / 3.0;
        assert!((m.position.std - var.sqrt()).abs() < 1e-12);
        assert!((m.heading.mean - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn heading_error_wraps() {
        let gt = [Pose2D::new(0.0, 0.0, 3.1)];
        let est = [Pose2D::new(0.0, 0.0, -3.1)];
        let m = m_ate(&est, &gt).unwrap();
        assert!((m.heading.mean - (2.0 * std::f64::consts::PI - 6.2)).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        let gt = straight(3, 1.0);
        assert!(matches!(
            m_ate(&gt[..2], &gt),
            Err(Error::LengthMismatch { est: 2, gt: 3 })
        ));
        assert!(matches!(m_ate(&[], &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn segment_heading_bias() {
        // 10 m straight line; the estimate moves at angle eps to its
        // reported heading, so each re-anchored segment of length L ends
        // 2 L sin(eps / 2) ~ L eps away from the truth
        let step = 0.03;
        let gt = straight(334, step);
        for eps in [1e-3f64, 5e-3, 1e-2] {
            let est: Vec<Pose2D> = (0..gt.len())
                .map(|i| Pose2D::new(i as f64 * step * eps.cos(), i as f64 * step * eps.sin(), 0.0))
                .collect();
            let se = segment_error(&est, &gt, 1.0, 1).unwrap();
            // first sample beyond 1 m is 34 steps away
            let l = 34.0 * step;
            assert!((se.position.mean - 2.0 * l * (eps / 2.0).sin()).abs() < 1e-9);
            assert!((se.position.mean - l * eps).abs() < 1e-6);
            assert!(se.position.std < 1e-9);
            assert_eq!(se.heading.mean, 0.0);
        }
    }

    #[test]
    fn segment_constant_curvature() {
        let step = 0.03;
        let gt = straight(334, step);
        let kappa = 1e-2;
        let inc = crate::types::RelativePose::new(step, 0.0, kappa * step);
        let mut est = vec![Pose2D::origin()];
        for _ in 1..gt.len() {
            est.push(boxplus(est.last().unwrap(), &inc));
        }
        let se = segment_error(&est, &gt, 1.0, 1).unwrap();
        // chord of 34 steps turning kappa * step each, against a straight 1.02 m
        let (n, phi) = (34.0, kappa * step);
        let (mut x, mut y, mut th) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..34 {
            x += step * th.cos();
            y += step * th.sin();
            th += phi;
        }
        let expected = ((x - n * step).powi(2) + y * y).sqrt();
        assert!((se.position.mean - expected).abs() < 1e-9);
        assert!((se.heading.mean - n * phi).abs() < 1e-9);
    }

    #[test]
    fn single_segment_with_full_stride() {
        let gt = straight(11, 0.2);
        let est: Vec<Pose2D> = gt.iter().map(|p| Pose2D::new(p.x * 1.1, 0.0, 0.0)).collect();
        let (pos, head) = segment_errors(&est, &gt, 1.0, gt.len()).unwrap();
        assert_eq!(pos.len(), 1);
        // start 0, end = first sample beyond 1 m = index 6 (1.2 m)
        assert!((pos[0] - 0.12).abs() < 1e-12);
        assert_eq!(head[0], 0.0);
    }

    #[test]
    fn too_short_for_segment() {
        let gt = straight(5, 0.1);
        assert!(matches!(
            segment_error(&gt, &gt, 1.0, 1),
            Err(Error::TrajectoryTooShort { .. })
        ));
    }

    #[test]
    fn histogram_cases() {
        let h = histogram(&[0.3; 7], 5).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.counts.iter().sum::<usize>(), 7);
        assert_eq!(h.edges.len(), 6);
        assert_eq!(*h.edges.last().unwrap(), 0.3);

        let h = histogram(&[0.0; 3], 4).unwrap();
        assert_eq!(h.counts[0], 3);
        assert!(matches!(histogram(&[], 3), Err(Error::EmptyInput)));

        let values: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let h = histogram(&values, 10).unwrap();
        assert!(h.counts.iter().all(|&c| (99..=101).contains(&c)), "{:?}", h.counts);
    }

    #[test]
    fn series_mean_matches_m_ate() {
        let gt = straight(30, 0.1);
        let est: Vec<Pose2D> = gt
            .iter()
            .enumerate()
            .map(|(i, p)| Pose2D::new(p.x, (i as f64 * 0.7).sin() * 0.1, 0.01 * i as f64))
            .collect();
        let (pos, _) = error_series(&est, &gt).unwrap();
        let m = m_ate(&est, &gt).unwrap();
        assert!((pos.iter().sum::<f64>() / pos.len() as f64 - m.position.mean).abs() < 1e-15);
    }
}
