//! Line enhancement on projections, the no-prior 3D map, and polyline
//! extraction from feature volumes.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ScalarImage, ScalarVolume};
use crate::polyline::{Point3, Polyline3};
use crate::projector::{make_bp_evidence, StereoGeometry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Expected line radius on the detector, pixels. Sets the filter scale.
    pub marker_radius_px: f64,
    pub orientations: usize,
    /// Along-line smoothing scale relative to the across-line scale.
    pub elongation: f64,
    /// Radius of the disk whose grey opening is subtracted first, pixels.
    /// Zero disables background removal.
    pub background_radius: f64,
    /// Binary detections in 8-connected groups smaller than this are
    /// discarded.
    pub min_component_px: usize,
    /// Score the weaker of the two kernel halves, rejecting one-sided edges.
    pub symmetric: bool,
    /// Fixed binarisation threshold on the normalised response. `None` picks
    /// one by Otsu's method.
    pub threshold: Option<f64>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            marker_radius_px: 1.5,
            orientations: 12,
            elongation: 3.0,
            background_radius: 3.0,
            min_component_px: 1,
            symmetric: false,
            threshold: None,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.marker_radius_px > 0.0) || !self.marker_radius_px.is_finite() {
            return Err(Error::InvalidParameter("marker radius must be > 0".into()));
        }
        if self.orientations < 8 {
            return Err(Error::InvalidParameter("at least 8 filter orientations are needed".into()));
        }
        if !(self.elongation >= 1.0) || !self.elongation.is_finite() {
            return Err(Error::InvalidParameter("elongation must be >= 1".into()));
        }
        if !(self.background_radius >= 0.0) {
            return Err(Error::InvalidParameter("background radius must be >= 0".into()));
        }
        if let Some(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidParameter("threshold must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Line-likelihood map in [0, 1] with its binarisation threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap2 {
    pub response: ScalarImage,
    pub threshold: f64,
    /// 8-connected detections smaller than this are dropped by
    /// [`FeatureMap2::binary`].
    pub min_component_px: usize,
}

impl FeatureMap2 {
    /// 1 where `response > threshold` inside a large enough component, else 0.
    pub fn binary(&self) -> ScalarImage {
        let (w, h) = self.response.dims();
        let mask: Vec<bool> = self.response.data().iter().map(|&r| r > self.threshold && r > 0.0).collect();
        let mut out = ScalarImage::zeros(w, h).with_pitch(self.response.pixel_pitch());
        for comp in connected_components(&mask, [w, h, 1]) {
            if comp.len() >= self.min_component_px {
                for i in comp {
                    out.data_mut()[i] = 1.0;
                }
            }
        }
        out
    }
}

/// Halves of the oriented second-derivative-of-Gaussian line kernel for
/// direction `theta`: across-line scale `s`, along-line scale
/// `s * elongation`, split at the line axis into the side at negative and at
/// positive normal offset (the axis row is shared equally). Each half is
/// forced to zero mean, so constant offsets give exactly no response.
/// Returned as (radius, left, right), row-major over `[-radius, radius]^2`.
fn half_kernels(s: f64, elongation: f64, theta: f64) -> (i64, Vec<f64>, Vec<f64>) {
    let sa = s * elongation;
    let r = (3.0 * s.max(sa)).ceil() as i64;
    let (c, sn) = (theta.cos(), theta.sin());
    let (mut left, mut right) = (Vec::new(), Vec::new());
    let mut norm = 0.0;
    for y in -r..=r {
        for x in -r..=r {
            let (x, y) = (x as f64, y as f64);
            // Along-line and across-line coordinates.
            let a = x * c + y * sn;
            let n = -x * sn + y * c;
            let g = (-a * a / (2.0 * sa * sa) - n * n / (2.0 * s * s)).exp();
            norm += g;
            // Negated second derivative across the line: positive on the axis.
            let k = -(n * n / (s * s) - 1.0) / (s * s) * g;
            let wl = if n < -1e-9 { 1.0 } else if n > 1e-9 { 0.0 } else { 0.5 };
            left.push(wl * k);
            right.push((1.0 - wl) * k);
        }
    }
    for k in [&mut left, &mut right] {
        k.iter_mut().for_each(|v| *v *= s * s / norm);
        let mean = k.iter().sum::<f64>() / k.len() as f64;
        k.iter_mut().for_each(|v| *v -= mean);
    }
    (r, left, right)
}

/// Offsets of a flat disk structuring element.
fn disk(radius: f64) -> Vec<(i64, i64)> {
    let r = radius.floor() as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) <= radius * radius + 1e-9 {
                out.push((dx, dy));
            }
        }
    }
    out
}

fn morph(data: &[f64], w: usize, h: usize, se: &[(i64, i64)], dilate: bool) -> Vec<f64> {
    (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            let vals = se.iter().map(|&(dx, dy)| {
                let xx = (x + dx).clamp(0, w as i64 - 1) as usize;
                let yy = (y + dy).clamp(0, h as i64 - 1) as usize;
                data[xx + w * yy]
            });
            if dilate {
                vals.fold(f64::NEG_INFINITY, f64::max)
            } else {
                vals.fold(f64::INFINITY, f64::min)
            }
        })
        .collect()
}

/// White top-hat: the image minus its grey opening by a disk. Keeps bright
/// structures narrower than the disk and removes broad ones with their edges.
pub fn white_top_hat(img: &ScalarImage, radius: f64) -> ScalarImage {
    let (w, h) = img.dims();
    let se = disk(radius);
    let opened = morph(&morph(img.data(), w, h, &se, false), w, h, &se, true);
    let data = img.data().iter().zip(&opened).map(|(v, o)| v - o).collect();
    ScalarImage::new(w, h, data).expect("same shape").with_pitch(img.pixel_pitch())
}

/// Direct 2D correlation with clamp-to-edge borders.
fn correlate(img: &ScalarImage, r: i64, k: &[f64]) -> Vec<f64> {
    let (w, h) = img.dims();
    let data = img.data();
    let side = (2 * r + 1) as usize;
    (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            let mut acc = 0.0;
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as i64 - 1) as usize;
                let row = &k[(dy + r) as usize * side..];
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as i64 - 1) as usize;
                    acc += row[(dx + r) as usize] * data[xx + w * yy];
                }
            }
            acc
        })
        .collect()
}

/// Multi-orientation matched filter for bright lines.
///
/// Each orientation correlates the image with the two halves of a
/// scale-normalised second-derivative-of-Gaussian line kernel and scores
/// twice the smaller half. On a symmetric ridge both halves agree and the
/// score is the plain filter response; at a step edge one half goes negative
/// and the edge is rejected. The map is the per-pixel maximum over
/// orientations, clipped at zero and divided by its image maximum.
pub fn detect_features_2d_with(img: &ScalarImage, cfg: &DetectorConfig) -> Result<FeatureMap2> {
    cfg.validate()?;
    if img.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("detector input".into()));
    }
    let top;
    let img = if cfg.background_radius > 0.0 {
        top = white_top_hat(img, cfg.background_radius);
        &top
    } else {
        img
    };
    let mut resp = vec![f64::NEG_INFINITY; img.data().len()];
    for k in 0..cfg.orientations {
        let th = std::f64::consts::PI * k as f64 / cfg.orientations as f64;
        let (r, kl, kr) = half_kernels(cfg.marker_radius_px, cfg.elongation, th);
        let (hl, hr) = (correlate(img, r, &kl), correlate(img, r, &kr));
        for i in 0..resp.len() {
            let v = if cfg.symmetric { 2.0 * hl[i].min(hr[i]) } else { hl[i] + hr[i] };
            if v > resp[i] {
                resp[i] = v;
            }
        }
    }
    let m = resp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = resp.iter().copied().fold(f64::INFINITY, f64::min);
    // Responses at round-off level are noise from a featureless image.
    let scale = img.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(m - lo > 1e-12 * scale.max(f64::MIN_POSITIVE)) || !(m > 0.0) {
        resp.iter_mut().for_each(|v| *v = 0.0);
    } else {
        resp.iter_mut().for_each(|v| *v = v.max(0.0) / m);
    }
    let (w, h) = img.dims();
    let response = ScalarImage::new(w, h, resp)?.with_pitch(img.pixel_pitch());
    let threshold = match cfg.threshold {
        Some(t) => t,
        None => otsu_threshold(response.data()),
    };
    Ok(FeatureMap2 {
        response,
        threshold,
        min_component_px: cfg.min_component_px,
    })
}

/// [`detect_features_2d_with`] at the given marker radius and default
/// settings otherwise.
pub fn detect_features_2d(img: &ScalarImage, marker_radius_px: f64) -> Result<FeatureMap2> {
    detect_features_2d_with(
        img,
        &DetectorConfig {
            marker_radius_px,
            ..DetectorConfig::default()
        },
    )
}

/// Otsu threshold of values in [0, 1] over 256 bins. Only strictly positive
/// values take part, since the rectified response is zero over most of the
/// image.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    let mut n = 0usize;
    for &v in values {
        if v > 0.0 {
            hist[((v * BINS as f64) as usize).min(BINS - 1)] += 1;
            n += 1;
        }
    }
    if n == 0 {
        return 1.0;
    }
    let total: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, 0);
    for (k, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += k as f64 * c as f64;
        let w1 = n as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1).powi(2);
        if between > best {
            best = between;
            best_k = k;
        }
    }
    (best_k + 1) as f64 / BINS as f64
}

/// 3D feature estimate: a [0, 1] volume plus extracted centrelines.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub volume: ScalarVolume,
    pub lines: Vec<Polyline3>,
    pub warning: Option<String>,
}

/// Stereo back-projection of two binarised feature maps without a prior.
pub fn map_3d_no_prior(
    feat0: &FeatureMap2,
    feat1: &FeatureMap2,
    geom: &StereoGeometry,
    dims: [usize; 3],
    expected_lines: usize,
) -> Result<FeatureVolume> {
    let ev = make_bp_evidence(&feat0.binary(), &feat1.binary(), geom, dims)?;
    if ev.empty {
        return Err(Error::NoEvidence("feature rays do not intersect".into()));
    }
    let ex = extract_polylines(&ev.volume, expected_lines)?;
    Ok(FeatureVolume {
        volume: ev.volume,
        lines: ex.lines,
        warning: ex.warning,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub lines: Vec<Polyline3>,
    /// Set when the component count differs from the expected count.
    pub warning: Option<String>,
}

/// Components smaller than this are treated as noise.
pub const MIN_COMPONENT_VOXELS: usize = 5;

/// 26-connected components of `mask`, in order of their first voxel.
pub fn connected_components(mask: &[bool], dims: [usize; 3]) -> Vec<Vec<usize>> {
    let [nx, ny, nz] = dims;
    let mut label = vec![false; mask.len()];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] {
            continue;
        }
        label[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (x, y, z) = ((i % nx) as i64, ((i / nx) % ny) as i64, (i / (nx * ny)) as i64);
            for dz in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let (a, b, c) = (x + dx, y + dy, z + dz);
                        if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                            continue;
                        }
                        let j = a as usize + nx * (b as usize + ny * c as usize);
                        if mask[j] && !label[j] {
                            label[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

fn centreline(voxels: &[Point3]) -> Option<Polyline3> {
    let n = voxels.len() as f64;
    let mean: [f64; 3] = std::array::from_fn(|a| voxels.iter().map(|p| p[a]).sum::<f64>() / n);
    let mut cov = Matrix3::zeros();
    for p in voxels {
        let d = Vector3::new(p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / n);
    let k = eig.eigenvalues.imax();
    let mut axis = eig.eigenvectors.column(k).into_owned();
    // Fix the sign so the ordering of points is reproducible.
    let lead = (0..3).max_by(|&a, &b| axis[a].abs().total_cmp(&axis[b].abs())).unwrap();
    if axis[lead] < 0.0 {
        axis = -axis;
    }
    let proj: Vec<f64> = voxels
        .iter()
        .map(|p| (p[0] - mean[0]) * axis[0] + (p[1] - mean[1]) * axis[1] + (p[2] - mean[2]) * axis[2])
        .collect();
    let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
    let bins = (proj.iter().copied().fold(f64::NEG_INFINITY, f64::max) - lo).floor() as usize + 1;
    let mut acc = vec![([0.0f64; 3], 0usize); bins];
    for (p, t) in voxels.iter().zip(&proj) {
        let b = ((t - lo).floor() as usize).min(bins - 1);
        for a in 0..3 {
            acc[b].0[a] += p[a];
        }
        acc[b].1 += 1;
    }
    let centroids: Vec<Point3> = acc
        .iter()
        .filter(|(_, c)| *c > 0)
        .map(|(s, c)| [s[0] / *c as f64, s[1] / *c as f64, s[2] / *c as f64])
        .collect();
    // Window-3 moving average; the ends average over what exists.
    let m = centroids.len();
    let mut pts: Vec<Point3> = (0..m)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(m - 1));
            let k = (b - a + 1) as f64;
            std::array::from_fn(|d| centroids[a..=b].iter().map(|p| p[d]).sum::<f64>() / k)
        })
        .collect();
    pts.dedup_by(|a, b| crate::polyline::norm(crate::polyline::sub(*a, *b)) < 1e-9);
    if pts.len() < 2 {
        let (i0, i1) = proj
            .iter()
            .enumerate()
            .fold((0, 0), |(lo_i, hi_i), (i, &t)| {
                (if t < proj[lo_i] { i } else { lo_i }, if t > proj[hi_i] { i } else { hi_i })
            });
        if i0 == i1 {
            return None;
        }
        pts = vec![voxels[i0], voxels[i1]];
    }
    let length: f64 = pts.windows(2).map(|w| crate::polyline::norm(crate::polyline::sub(w[1], w[0]))).sum();
    let radius = (n / (std::f64::consts::PI * length.max(1.0))).sqrt();
    Polyline3::new(pts, radius).ok()
}

/// Centrelines of the components of `fv` thresholded at half its maximum.
pub fn extract_polylines(fv: &ScalarVolume, expected: usize) -> Result<Extraction> {
    let m = fv.max();
    if !(m > 0.0) {
        return Ok(Extraction {
            lines: Vec::new(),
            warning: (expected > 0).then(|| format!("expected {expected} lines, volume is empty")),
        });
    }
    let mask: Vec<bool> = fv.data().iter().map(|&v| v >= 0.5 * m).collect();
    let dims = fv.dims();
    let mut lines = Vec::new();
    for comp in connected_components(&mask, dims) {
        if comp.len() < MIN_COMPONENT_VOXELS {
            continue;
        }
        let pts: Vec<Point3> = comp
            .iter()
            .map(|&i| {
                let c = fv.coords(i);
                [c[0] as f64, c[1] as f64, c[2] as f64]
            })
            .collect();
        if let Some(l) = centreline(&pts) {
            lines.push(l);
        }
    }
    let warning = (lines.len() != expected).then(|| format!("expected {expected} lines, found {}", lines.len()));
    Ok(Extraction { lines, warning })
}
