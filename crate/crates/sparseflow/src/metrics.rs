//! Scene-flow evaluation metrics and cross-scene aggregation.

use crate::geometry::{project_points, CameraIntrinsics, PointCloud};
use crate::numerics::Value;

/// Whether the accuracy/outlier thresholds combine with OR (default, the
/// looser reading) or AND.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccSemantics {
    Or,
    And,
}

impl AccSemantics {
    pub fn parse(s: &str) -> Option<AccSemantics> {
        match s {
            "or" => Some(AccSemantics::Or),
            "and" => Some(AccSemantics::And),
            _ => None,
        }
    }
}

/// Per-scene metric values plus the point counts needed to aggregate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowMetrics {
    /// Mean 3D endpoint error, meters.
    pub epe3d: f64,
    /// Percent of points with epe < 0.05 m or relative error < 5%.
    pub acc3ds: f64,
    /// Percent of points with epe < 0.1 m or relative error < 10%.
    pub acc3dr: f64,
    /// Percent of points with epe > 0.3 m or relative error > 10%.
    pub out3d: f64,
    /// Mean 2D endpoint error in pixels, over points with all three
    /// projections valid.
    pub epe2d: f64,
    pub n_points: usize,
    pub n_valid2d: usize,
}

fn combine(a: bool, b: bool, semantics: AccSemantics) -> bool {
    match semantics {
        AccSemantics::Or => a || b,
        AccSemantics::And => a && b,
    }
}

/// Evaluates one scene. `est` and `gt` are N x 3, row-aligned with `pc_t`.
pub fn compute_metrics(
    est: &Value,
    gt: &[[f64; 3]],
    pc_t: &PointCloud,
    cam: &CameraIntrinsics,
    semantics: AccSemantics,
) -> FlowMetrics {
    let n = pc_t.len();
    assert_eq!(est.shape(), &[n, 3], "estimate must be N x 3");
    assert_eq!(gt.len(), n, "ground truth must be N x 3");

    let mut sum_epe = 0.0;
    let (mut n_s, mut n_r, mut n_out) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let e = [est.at(i, 0) - gt[i][0], est.at(i, 1) - gt[i][1], est.at(i, 2) - gt[i][2]];
        let epe = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
        let gt_norm = (gt[i][0] * gt[i][0] + gt[i][1] * gt[i][1] + gt[i][2] * gt[i][2]).sqrt();
        // zero ground truth: only the absolute branch can pass
        let rel = if gt_norm > 0.0 { epe / gt_norm } else { f64::INFINITY };
        sum_epe += epe;
        if combine(epe < 0.05, rel < 0.05, semantics) {
            n_s += 1;
        }
        if combine(epe < 0.1, rel < 0.1, semantics) {
            n_r += 1;
        }
        if combine(epe > 0.3, rel > 0.1, semantics) {
            n_out += 1;
        }
    }

    // 2D error from the three projections: point, point + est, point + gt
    let (px0, v0) = project_points(pc_t, cam);
    let moved = |d: &dyn Fn(usize) -> [f64; 3]| -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|i| {
                    let p = pc_t.point(i);
                    let f = d(i);
                    [p[0] + f[0], p[1] + f[1], p[2] + f[2]]
                })
                .collect(),
        )
    };
    let (px_est, v_est) = project_points(&moved(&|i| [est.at(i, 0), est.at(i, 1), est.at(i, 2)]), cam);
    let (px_gt, v_gt) = project_points(&moved(&|i| gt[i]), cam);
    let mut sum_2d = 0.0;
    let mut n_valid2d = 0usize;
    for i in 0..n {
        if !(v0[i] && v_est[i] && v_gt[i]) {
            continue;
        }
        let du = (px_est[i][0] - px0[i][0]) - (px_gt[i][0] - px0[i][0]);
        let dv = (px_est[i][1] - px0[i][1]) - (px_gt[i][1] - px0[i][1]);
        sum_2d += (du * du + dv * dv).sqrt();
        n_valid2d += 1;
    }

    FlowMetrics {
        epe3d: sum_epe / n as f64,
        acc3ds: 100.0 * n_s as f64 / n as f64,
        acc3dr: 100.0 * n_r as f64 / n as f64,
        out3d: 100.0 * n_out as f64 / n as f64,
        epe2d: if n_valid2d > 0 { sum_2d / n_valid2d as f64 } else { 0.0 },
        n_points: n,
        n_valid2d,
    }
}

/// Point-weighted aggregation across scenes: equals the metric computed over
/// the pooled point set.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricsAccumulator {
    sum_epe3d: f64,
    sum_acc3ds: f64,
    sum_acc3dr: f64,
    sum_out3d: f64,
    sum_epe2d: f64,
    n_points: usize,
    n_valid2d: usize,
}

impl MetricsAccumulator {
    pub fn new() -> MetricsAccumulator {
        MetricsAccumulator::default()
    }

    pub fn add(&mut self, m: &FlowMetrics) {
        let np = m.n_points as f64;
        self.sum_epe3d += m.epe3d * np;
        self.sum_acc3ds += m.acc3ds * np;
        self.sum_acc3dr += m.acc3dr * np;
        self.sum_out3d += m.out3d * np;
        self.sum_epe2d += m.epe2d * m.n_valid2d as f64;
        self.n_points += m.n_points;
        self.n_valid2d += m.n_valid2d;
    }

    pub fn finish(&self) -> FlowMetrics {
        assert!(self.n_points > 0, "no scenes accumulated");
        let np = self.n_points as f64;
        FlowMetrics {
            epe3d: self.sum_epe3d / np,
            acc3ds: self.sum_acc3ds / np,
            acc3dr: self.sum_acc3dr / np,
            out3d: self.sum_out3d / np,
            epe2d: if self.n_valid2d > 0 { self.sum_epe2d / self.n_valid2d as f64 } else { 0.0 },
            n_points: self.n_points,
            n_valid2d: self.n_valid2d,
        }
    }
}

/// Line-oriented `key=value` report with the fixed field names.
pub fn format_report(m: &FlowMetrics) -> String {
    format!(
        "epe3d={:.6}\nacc3ds={:.3}\nacc3dr={:.3}\nout3d={:.3}\nepe2d={:.6}\n",
        m.epe3d, m.acc3ds, m.acc3dr, m.out3d, m.epe2d
    )
}
