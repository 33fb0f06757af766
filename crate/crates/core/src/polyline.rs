//! Line fiducials as ordered 3D point sequences, and their rasterisation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ScalarVolume;

pub type Point3 = [f64; 3];

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: Point3) -> Point3 {
    scale(a, 1.0 / norm(a))
}

/// Squared distance from `p` to the segment `a`-`b`.
#[inline]
pub fn point_segment_dist2(p: Point3, a: Point3, b: Point3) -> f64 {
    let d = sub(b, a);
    let len2 = dot(d, d);
    let t = if len2 > 0.0 { (dot(sub(p, a), d) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = add(a, scale(d, t));
    let e = sub(p, q);
    dot(e, e)
}

/// An ordered sequence of points with a tube radius, in voxel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline3 {
    points: Vec<Point3>,
    radius: f64,
}

impl Polyline3 {
    pub fn new(points: Vec<Point3>, radius: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("polyline has no points".into()));
        }
        if points.len() < 2 {
            return Err(Error::InvalidParameter("polyline needs at least 2 points".into()));
        }
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::InvalidParameter(format!("radius must be >= 0, got {radius}")));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("polyline point".into()));
        }
        if points.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter("consecutive polyline points coincide".into()));
        }
        Ok(Self { points, radius })
    }

    pub fn segment(a: Point3, b: Point3, radius: f64) -> Result<Self> {
        Self::new(vec![a, b], radius)
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        self.radius = radius;
        self
    }

    pub fn first(&self) -> Point3 {
        self.points[0]
    }

    pub fn last(&self) -> Point3 {
        *self.points.last().unwrap()
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| norm(sub(w[1], w[0]))).sum()
    }

    /// Squared distance from `p` to the nearest segment.
    pub fn dist2_to(&self, p: Point3) -> f64 {
        self.points
            .windows(2)
            .map(|w| point_segment_dist2(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn distance_to(&self, p: Point3) -> f64 {
        self.dist2_to(p).sqrt()
    }

    /// Point at normalised arc length `t` in [0, 1].
    pub fn point_at(&self, t: f64) -> Point3 {
        let total = self.length();
        let mut target = t.clamp(0.0, 1.0) * total;
        for w in self.points.windows(2) {
            let l = norm(sub(w[1], w[0]));
            if target <= l {
                return add(w[0], scale(sub(w[1], w[0]), if l > 0.0 { target / l } else { 0.0 }));
            }
            target -= l;
        }
        self.last()
    }

    /// Resample to `segments + 1` points evenly spaced in arc length. The
    /// first and last points are copied exactly.
    pub fn resample(&self, segments: usize) -> Result<Self> {
        if segments == 0 {
            return Err(Error::InvalidParameter("resample needs >= 1 segment".into()));
        }
        let mut pts: Vec<Point3> = (0..=segments).map(|i| self.point_at(i as f64 / segments as f64)).collect();
        pts[0] = self.first();
        pts[segments] = self.last();
        Self::new(pts, self.radius)
    }

    /// Dense samples spaced no more than `spacing` apart.
    pub fn densify(&self, spacing: f64) -> Vec<Point3> {
        let mut out = vec![self.points[0]];
        for w in self.points.windows(2) {
            let l = norm(sub(w[1], w[0]));
            let n = (l / spacing).ceil().max(1.0) as usize;
            for k in 1..=n {
                out.push(add(w[0], scale(sub(w[1], w[0]), k as f64 / n as f64)));
            }
        }
        out
    }

    pub fn in_bounds(&self, dims: [usize; 3], margin: f64) -> bool {
        self.points.iter().all(|p| {
            (0..3).all(|a| p[a] >= margin && p[a] <= dims[a] as f64 - 1.0 - margin)
        })
    }

    /// Minimum distance between any two segments of `self` and `other`,
    /// evaluated on a dense sampling of `self`.
    pub fn min_distance_to(&self, other: &Polyline3) -> f64 {
        self.densify(0.25)
            .into_iter()
            .map(|p| other.dist2_to(p))
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }
}

/// Binary tube volume: a voxel is 1 iff its centre lies within `radius` of the
/// polyline.
pub fn rasterize_polyline(line: &Polyline3, dims: [usize; 3]) -> Result<ScalarVolume> {
    let mut vol = ScalarVolume::zeros(dims);
    rasterize_into(line, &mut vol, 1.0)?;
    Ok(vol)
}

/// Rasterise several lines into one binary volume.
pub fn rasterize_polylines(lines: &[Polyline3], dims: [usize; 3]) -> Result<ScalarVolume> {
    let mut vol = ScalarVolume::zeros(dims);
    for l in lines {
        rasterize_into(l, &mut vol, 1.0)?;
    }
    Ok(vol)
}

/// Set every voxel inside the tube of `line` to `value`.
pub(crate) fn rasterize_into(line: &Polyline3, vol: &mut ScalarVolume, value: f64) -> Result<()> {
    let dims = vol.dims();
    if !line.in_bounds(dims, 0.0) {
        return Err(Error::InvalidParameter("polyline leaves the volume bounds".into()));
    }
    let r = line.radius;
    let r2 = r * r + 1e-12;
    let lo: Vec<i64> = (0..3)
        .map(|a| line.points.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min))
        .map(|v| (v - r).floor() as i64)
        .collect();
    let hi: Vec<i64> = (0..3)
        .map(|a| line.points.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max))
        .map(|v| (v + r).ceil() as i64)
        .collect();
    let clampa = |v: i64, a: usize| v.clamp(0, dims[a] as i64 - 1) as usize;
    let (x0, x1) = (clampa(lo[0], 0), clampa(hi[0], 0));
    let (y0, y1) = (clampa(lo[1], 1), clampa(hi[1], 1));
    let (z0, z1) = (clampa(lo[2], 2), clampa(hi[2], 2));

    let hits: Vec<usize> = (z0..=z1)
        .into_par_iter()
        .flat_map_iter(|z| {
            let mut local = Vec::new();
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = [x as f64, y as f64, z as f64];
                    if line.dist2_to(p) <= r2 {
                        local.push(x + dims[0] * (y + dims[1] * z));
                    }
                }
            }
            local
        })
        .collect();
    let data = vol.data_mut();
    for i in hits {
        data[i] = value;
    }
    Ok(())
}
