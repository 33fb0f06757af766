//! ROC/AUC, Chamfer distance and 2D line-position error.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ScalarImage, ScalarVolume};
use crate::polyline::Point3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// From (0, 0) at threshold +inf down to (1, 1).
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,tpr,fpr\n");
        for p in &self.points {
            s.push_str(&format!("{:e},{:.9},{:.9}\n", p.threshold, p.tpr, p.fpr));
        }
        s
    }
}

/// Sweep every distinct score as a threshold (`score >= t` is positive) and
/// integrate with the trapezoidal rule.
pub fn roc_curve(scores: &[f64], truth: &[bool]) -> Result<RocCurve> {
    if scores.len() != truth.len() {
        return Err(Error::mismatch(scores.len(), truth.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("ROC scores".into()));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidParameter(format!(
            "ROC needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let p = RocPoint {
            threshold: t,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        };
        let prev = points.last().unwrap();
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Ok(RocCurve { points, auc })
}

/// ROC of a score image against a binary truth image (`> 0.5` is positive).
pub fn roc_curve_images(scores: &ScalarImage, truth: &ScalarImage) -> Result<RocCurve> {
    if scores.dims() != truth.dims() {
        return Err(Error::mismatch(scores.dims(), truth.dims()));
    }
    let t: Vec<bool> = truth.data().iter().map(|&v| v > 0.5).collect();
    roc_curve(scores.data(), &t)
}

/// ROC of a score volume against a binary truth volume.
pub fn roc_curve_volumes(scores: &ScalarVolume, truth: &ScalarVolume) -> Result<RocCurve> {
    if scores.dims() != truth.dims() {
        return Err(Error::mismatch(scores.dims(), truth.dims()));
    }
    let t: Vec<bool> = truth.data().iter().map(|&v| v > 0.5).collect();
    roc_curve(scores.data(), &t)
}

/// Uniform hash grid for exact nearest-neighbour queries.
struct GridIndex<'a> {
    points: &'a [Point3],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> GridIndex<'a> {
    /// `span` is the largest extent of all points that will be queried
    /// together with `points`; cells never get smaller than `span / 64`.
    fn new(points: &'a [Point3], span: f64) -> Self {
        let ext = extent(points);
        let vol: f64 = ext.iter().map(|e| e.max(1.0)).product();
        let mut cell = (vol / points.len() as f64).cbrt() * 2.0;
        cell = cell.max(span / 64.0);
        if !(cell.is_finite() && cell > 0.0) {
            cell = 1.0;
        }
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let k = Self::key(p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
            cells.entry(k).or_default().push(i);
        }
        Self {
            points,
            cell,
            cells,
            lo,
            hi,
        }
    }

    fn key(p: &Point3, cell: f64) -> [i64; 3] {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    }

    fn nearest_dist(&self, q: &Point3) -> f64 {
        let c = Self::key(q, self.cell);
        // Farthest ring that can still contain points.
        let r_max = (0..3)
            .map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs()))
            .max()
            .unwrap();
        let mut best = f64::INFINITY;
        for r in 0..=r_max {
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            for &i in ids {
                                let p = self.points[i];
                                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                                best = best.min(d);
                            }
                        }
                    }
                }
            }
            // Anything outside ring r is at least r cells away.
            let bound = r as f64 * self.cell;
            if best <= bound * bound {
                break;
            }
        }
        best.sqrt()
    }
}

fn extent(points: &[Point3]) -> [f64; 3] {
    let mut bmin = [f64::INFINITY; 3];
    let mut bmax = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            bmin[a] = bmin[a].min(p[a]);
            bmax[a] = bmax[a].max(p[a]);
        }
    }
    std::array::from_fn(|a| bmax[a] - bmin[a])
}

fn mean_nearest(from: &[Point3], index: &GridIndex) -> f64 {
    let d: Vec<f64> = from.par_iter().map(|q| index.nearest_dist(q)).collect();
    d.iter().sum::<f64>() / d.len() as f64
}

/// Symmetric mean-of-means Chamfer distance (Euclidean, exact).
pub fn chamfer_distance(a: &[Point3], b: &[Point3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("Chamfer distance needs two nonempty point sets".into()));
    }
    let all: Vec<Point3> = a.iter().chain(b).copied().collect();
    let span = extent(&all).into_iter().fold(0.0, f64::max);
    let ia = GridIndex::new(a, span);
    let ib = GridIndex::new(b, span);
    Ok(0.5 * (mean_nearest(a, &ib) + mean_nearest(b, &ia)))
}

/// Voxel centres whose value is at least `rel` times the volume maximum.
pub fn volume_points(vol: &ScalarVolume, rel: f64) -> Vec<Point3> {
    let m = vol.max();
    if !(m > 0.0) {
        return Vec::new();
    }
    let t = rel * m;
    (0..vol.len())
        .filter(|&i| vol.data()[i] >= t)
        .map(|i| {
            let c = vol.coords(i);
            [c[0] as f64, c[1] as f64, c[2] as f64]
        })
        .collect()
}

/// Pixel centres of a binary mask (`> 0.5`).
pub fn mask_points(mask: &ScalarImage) -> Vec<Point3> {
    let w = mask.width();
    (0..mask.data().len())
        .filter(|&i| mask.data()[i] > 0.5)
        .map(|i| [(i % w) as f64, (i / w) as f64, 0.0])
        .collect()
}

/// Chamfer distance between voxel sets of two volumes thresholded at half
/// their maxima.
pub fn volume_chamfer(estimate: &ScalarVolume, truth: &ScalarVolume) -> Result<f64> {
    chamfer_distance(&volume_points(estimate, 0.5), &volume_points(truth, 0.5))
}

/// Symmetric mean nearest-pixel distance between two binary masks.
pub fn line_position_error_2d(detected: &ScalarImage, truth: &ScalarImage) -> Result<f64> {
    if detected.dims() != truth.dims() {
        return Err(Error::mismatch(detected.dims(), truth.dims()));
    }
    let a = mask_points(detected);
    let b = mask_points(truth);
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("line position error needs two nonempty masks".into()));
    }
    chamfer_distance(&a, &b)
}
