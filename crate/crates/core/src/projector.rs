//! Two-view cone-beam geometry, ray-driven forward projection and
//! voxel-driven back-projection.
//!
//! World coordinates are voxel index coordinates. The rotation isocentre is
//! the volume centre. At view angle 0 the source sits at `-SOD` along y and
//! the detector plane at `+ODD` along y, with detector columns along +x and
//! rows along +z. A view angle rotates source and detector about z.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{bilinear_raw, ScalarImage, ScalarVolume};
use crate::polyline::{add, dot, norm, scale, sub, Point3, Polyline3};

/// Maximum ray-marching step, voxels.
pub const RAY_STEP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StereoGeometry {
    /// Source to isocentre, voxels.
    pub source_object_distance: f64,
    /// Isocentre to detector plane, voxels.
    pub object_detector_distance: f64,
    /// Detector size in pixels (columns, rows).
    pub detector: [usize; 2],
    /// Detector pixel pitch, voxel units.
    pub pixel_pitch: f64,
    pub view_angles_deg: [f64; 2],
}

impl Default for StereoGeometry {
    fn default() -> Self {
        Self::desk()
    }
}

impl StereoGeometry {
    /// 64^3 volumes on a 64^2 detector, magnification 2.
    pub fn desk() -> Self {
        Self {
            source_object_distance: 128.0,
            object_detector_distance: 128.0,
            detector: [64, 64],
            pixel_pitch: 2.0,
            view_angles_deg: [-30.0, 30.0],
        }
    }

    /// 256^3 volumes on a 256^2 detector. Source and detector each sit 128
    /// voxels beyond the faces of the volume, so magnification stays 2.
    pub fn paper() -> Self {
        Self {
            source_object_distance: 256.0,
            object_detector_distance: 256.0,
            detector: [256, 256],
            pixel_pitch: 2.0,
            view_angles_deg: [-30.0, 30.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.source_object_distance > 0.0 && self.object_detector_distance > 0.0) {
            return Err(Error::Geometry("distances must be positive".into()));
        }
        if self.detector[0] == 0 || self.detector[1] == 0 {
            return Err(Error::Geometry("detector must have pixels".into()));
        }
        if !(self.pixel_pitch > 0.0) {
            return Err(Error::Geometry("pixel pitch must be positive".into()));
        }
        if self.view_angles_deg.iter().any(|a| !a.is_finite()) {
            return Err(Error::Geometry("view angles must be finite".into()));
        }
        Ok(())
    }

    pub fn magnification(&self) -> f64 {
        (self.source_object_distance + self.object_detector_distance) / self.source_object_distance
    }

    pub fn source_detector_distance(&self) -> f64 {
        self.source_object_distance + self.object_detector_distance
    }

    /// Frame of one view for a volume of `dims`.
    pub fn view(&self, view: usize, dims: [usize; 3]) -> Result<ViewFrame> {
        if view > 1 {
            return Err(Error::InvalidParameter(format!("view must be 0 or 1, got {view}")));
        }
        self.validate()?;
        let theta = self.view_angles_deg[view].to_radians();
        let (s, c) = theta.sin_cos();
        let rot = |v: Point3| [v[0] * c - v[1] * s, v[0] * s + v[1] * c, v[2]];
        let center = [
            (dims[0] as f64 - 1.0) / 2.0,
            (dims[1] as f64 - 1.0) / 2.0,
            (dims[2] as f64 - 1.0) / 2.0,
        ];
        let normal = rot([0.0, 1.0, 0.0]);
        Ok(ViewFrame {
            source: add(center, scale(normal, -self.source_object_distance)),
            detector_center: add(center, scale(normal, self.object_detector_distance)),
            u_axis: rot([1.0, 0.0, 0.0]),
            v_axis: [0.0, 0.0, 1.0],
            normal,
            sdd: self.source_detector_distance(),
            sod: self.source_object_distance,
            pitch: self.pixel_pitch,
            detector: self.detector,
        })
    }
}

/// Resolved positions and axes of one source-detector pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewFrame {
    pub source: Point3,
    pub detector_center: Point3,
    pub u_axis: Point3,
    pub v_axis: Point3,
    /// Unit vector from source towards detector.
    pub normal: Point3,
    pub sdd: f64,
    pub sod: f64,
    pub pitch: f64,
    pub detector: [usize; 2],
}

impl ViewFrame {
    /// World position of a (continuous) detector pixel coordinate.
    pub fn pixel_position(&self, u: f64, v: f64) -> Point3 {
        let du = (u - (self.detector[0] as f64 - 1.0) / 2.0) * self.pitch;
        let dv = (v - (self.detector[1] as f64 - 1.0) / 2.0) * self.pitch;
        add(add(self.detector_center, scale(self.u_axis, du)), scale(self.v_axis, dv))
    }

    /// Continuous detector pixel coordinate hit by the ray through `p`.
    /// `None` if `p` is not in front of the source.
    pub fn project(&self, p: Point3) -> Option<[f64; 2]> {
        let d = sub(p, self.source);
        let depth = dot(d, self.normal);
        if depth <= 0.0 {
            return None;
        }
        let t = self.sdd / depth;
        let rel = sub(add(self.source, scale(d, t)), self.detector_center);
        Some([
            dot(rel, self.u_axis) / self.pitch + (self.detector[0] as f64 - 1.0) / 2.0,
            dot(rel, self.v_axis) / self.pitch + (self.detector[1] as f64 - 1.0) / 2.0,
        ])
    }

    /// Distance from the source along the central axis.
    pub fn depth(&self, p: Point3) -> f64 {
        dot(sub(p, self.source), self.normal)
    }

    fn check_source_outside(&self, dims: [usize; 3]) -> Result<()> {
        let inside = (0..3).all(|a| self.source[a] >= -0.5 && self.source[a] <= dims[a] as f64 - 0.5);
        if inside {
            return Err(Error::Geometry(format!(
                "source at {:?} lies inside the {:?} volume",
                self.source, dims
            )));
        }
        Ok(())
    }
}

/// Entry/exit parameters of the ray `o + t d` through the box
/// `[-0.5, n - 0.5]^3`.
fn clip_to_box(o: Point3, d: Point3, dims: [usize; 3]) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let lo = -0.5;
        let hi = dims[a] as f64 - 0.5;
        if d[a].abs() < 1e-300 {
            if o[a] < lo || o[a] > hi {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 > t0).then_some((t0, t1))
}

#[inline]
fn axis_weights(p: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 || p <= 0.0 {
        return (0, 0, 0.0);
    }
    let hi = (n - 1) as f64;
    if p >= hi {
        return (n - 1, n - 1, 0.0);
    }
    let i0 = p.floor() as usize;
    (i0, i0 + 1, p - i0 as f64)
}

/// The eight (index, weight) pairs of clamp-to-edge trilinear interpolation.
#[inline]
fn trilinear_stencil(p: Point3, dims: [usize; 3]) -> [(usize, f64); 8] {
    let (x0, x1, fx) = axis_weights(p[0], dims[0]);
    let (y0, y1, fy) = axis_weights(p[1], dims[1]);
    let (z0, z1, fz) = axis_weights(p[2], dims[2]);
    let idx = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
    [
        (idx(x0, y0, z0), (1.0 - fx) * (1.0 - fy) * (1.0 - fz)),
        (idx(x1, y0, z0), fx * (1.0 - fy) * (1.0 - fz)),
        (idx(x0, y1, z0), (1.0 - fx) * fy * (1.0 - fz)),
        (idx(x1, y1, z0), fx * fy * (1.0 - fz)),
        (idx(x0, y0, z1), (1.0 - fx) * (1.0 - fy) * fz),
        (idx(x1, y0, z1), fx * (1.0 - fy) * fz),
        (idx(x0, y1, z1), (1.0 - fx) * fy * fz),
        (idx(x1, y1, z1), fx * fy * fz),
    ]
}

/// Visit the midpoint samples of the ray from `from` to `to` inside the
/// volume box; `f(position, step_length)`.
fn march(from: Point3, to: Point3, dims: [usize; 3], mut f: impl FnMut(Point3, f64)) {
    let d = sub(to, from);
    let len = norm(d);
    if len == 0.0 {
        return;
    }
    let dir = scale(d, 1.0 / len);
    let Some((t0, t1)) = clip_to_box(from, dir, dims) else {
        return;
    };
    let (t0, t1) = (t0.max(0.0), t1.min(len));
    if t1 <= t0 {
        return;
    }
    let steps = ((t1 - t0) / RAY_STEP).ceil().max(1.0) as usize;
    let ds = (t1 - t0) / steps as f64;
    for k in 0..steps {
        let t = t0 + (k as f64 + 0.5) * ds;
        f(add(from, scale(dir, t)), ds);
    }
}

/// Ray-driven line integrals for one view. Units: value x voxels.
pub fn forward_project(vol: &ScalarVolume, geom: &StereoGeometry, view: usize) -> Result<ScalarImage> {
    let dims = vol.dims();
    let frame = geom.view(view, dims)?;
    frame.check_source_outside(dims)?;
    let [w, h] = geom.detector;
    let data: Vec<f64> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let target = frame.pixel_position((i % w) as f64, (i / w) as f64);
            let mut acc = 0.0;
            march(frame.source, target, dims, |p, ds| {
                let s: f64 = trilinear_stencil(p, dims).iter().map(|&(j, wt)| wt * vol.data()[j]).sum();
                acc += s * ds;
            });
            acc
        })
        .collect();
    Ok(ScalarImage::new(w, h, data)?.with_pitch(geom.pixel_pitch))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Voxel-driven with the FDK inverse-square distance weight.
    Fdk,
    /// Voxel-driven with unit weight: pure ray-cone evidence.
    Uniform,
    /// Exact transpose of [`forward_project`] (ray-driven scatter).
    Adjoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackProjectOptions {
    /// Cosine-weight and ramp-filter detector rows first.
    pub filtered: bool,
    pub weighting: Weighting,
}

impl Default for BackProjectOptions {
    fn default() -> Self {
        Self {
            filtered: false,
            weighting: Weighting::Fdk,
        }
    }
}

/// Spatial-domain Ram-Lak kernel sampled at the detector pitch.
pub fn ramp_kernel(half_width: usize, pitch: f64) -> Vec<f64> {
    let n = half_width as i64;
    (-n..=n)
        .map(|k| {
            if k == 0 {
                1.0 / (4.0 * pitch * pitch)
            } else if k % 2 != 0 {
                -1.0 / ((k * k) as f64 * std::f64::consts::PI.powi(2) * pitch * pitch)
            } else {
                0.0
            }
        })
        .collect()
}

/// FDK pre-processing: cosine weighting then row-wise ramp filtering.
pub fn ramp_filter_rows(img: &ScalarImage, frame: &ViewFrame) -> ScalarImage {
    let (w, h) = img.dims();
    let kernel = ramp_kernel(w, frame.pitch);
    let cw = |u: usize, v: usize| {
        let du = (u as f64 - (w as f64 - 1.0) / 2.0) * frame.pitch;
        let dv = (v as f64 - (h as f64 - 1.0) / 2.0) * frame.pitch;
        frame.sdd / (frame.sdd * frame.sdd + du * du + dv * dv).sqrt()
    };
    let weighted = ScalarImage::from_fn(w, h, |u, v| img.get(u, v) * cw(u, v));
    let data: Vec<f64> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (u, v) = ((i % w) as i64, i / w);
            (0..w as i64)
                .map(|k| weighted.get(k as usize, v) * kernel[(u - k + w as i64) as usize])
                .sum::<f64>()
                * frame.pitch
        })
        .collect();
    ScalarImage::new(w, h, data).expect("filtered image keeps its shape")
}

/// Bilinear detector sample that is zero off the detector.
#[inline]
fn detector_sample(img: &ScalarImage, uv: [f64; 2]) -> f64 {
    let (w, h) = img.dims();
    if uv[0] < -0.5 || uv[1] < -0.5 || uv[0] > w as f64 - 0.5 || uv[1] > h as f64 - 0.5 {
        return 0.0;
    }
    bilinear_raw(img.data(), w, h, uv[0], uv[1])
}

/// Back-project one view's detector image into a volume of `dims`.
pub fn back_project(
    img: &ScalarImage,
    geom: &StereoGeometry,
    view: usize,
    dims: [usize; 3],
    opts: BackProjectOptions,
) -> Result<ScalarVolume> {
    let frame = geom.view(view, dims)?;
    if [img.width(), img.height()] != geom.detector {
        return Err(Error::mismatch(geom.detector, img.dims()));
    }
    frame.check_source_outside(dims)?;
    let src = if opts.filtered { ramp_filter_rows(img, &frame) } else { img.clone() };

    match opts.weighting {
        Weighting::Fdk | Weighting::Uniform => {
            let fdk = opts.weighting == Weighting::Fdk;
            Ok(ScalarVolume::from_fn(dims, |x, y, z| {
                let p = [x as f64, y as f64, z as f64];
                let Some(uv) = frame.project(p) else { return 0.0 };
                let s = detector_sample(&src, uv);
                if fdk {
                    let ratio = frame.sod / frame.depth(p);
                    s * ratio * ratio
                } else {
                    s
                }
            }))
        }
        Weighting::Adjoint => {
            let [w, h] = geom.detector;
            let n: usize = dims.iter().product();
            // Per-row partial volumes combined in row order, so the result is
            // independent of scheduling.
            let partials: Vec<Vec<(usize, f64)>> = (0..h)
                .into_par_iter()
                .map(|v| {
                    let mut acc = Vec::new();
                    for u in 0..w {
                        let y = src.get(u, v);
                        if y == 0.0 {
                            continue;
                        }
                        let target = frame.pixel_position(u as f64, v as f64);
                        march(frame.source, target, dims, |p, ds| {
                            for (j, wt) in trilinear_stencil(p, dims) {
                                if wt != 0.0 {
                                    acc.push((j, wt * ds * y));
                                }
                            }
                        });
                    }
                    acc
                })
                .collect();
            let mut data = vec![0.0; n];
            for part in partials {
                for (j, v) in part {
                    data[j] += v;
                }
            }
            ScalarVolume::new(dims, data)
        }
    }
}

/// Back-projection evidence of two views.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub volume: ScalarVolume,
    /// Set when either feature map carried no signal.
    pub empty: bool,
}

/// Pointwise product of the two views' max-normalised ray-cone volumes,
/// max-normalised to [0, 1].
pub fn make_bp_evidence(
    feat0: &ScalarImage,
    feat1: &ScalarImage,
    geom: &StereoGeometry,
    dims: [usize; 3],
) -> Result<Evidence> {
    let opts = BackProjectOptions {
        filtered: false,
        weighting: Weighting::Uniform,
    };
    let normalised = |img: &ScalarImage, view: usize| -> Result<Option<ScalarVolume>> {
        let mut v = back_project(img, geom, view, dims, opts)?;
        let m = v.max();
        if !(m > 0.0) {
            return Ok(None);
        }
        v.data_mut().iter_mut().for_each(|x| *x /= m);
        Ok(Some(v))
    };
    let (a, b) = (normalised(feat0, 0)?, normalised(feat1, 1)?);
    let (Some(a), Some(mut b)) = (a, b) else {
        return Ok(Evidence {
            volume: ScalarVolume::zeros(dims),
            empty: true,
        });
    };
    b.data_mut().iter_mut().zip(a.data()).for_each(|(y, x)| *y *= x);
    let m = b.max();
    if !(m > 0.0) {
        return Ok(Evidence {
            volume: ScalarVolume::zeros(dims),
            empty: true,
        });
    }
    b.data_mut().iter_mut().for_each(|x| *x /= m);
    Ok(Evidence { volume: b, empty: false })
}

/// Binary detector mask of the projected tubes of `lines`: a pixel is set
/// when its centre lies within the projected radius of a projected line.
pub fn line_mask_2d(lines: &[Polyline3], geom: &StereoGeometry, view: usize, dims: [usize; 3]) -> Result<ScalarImage> {
    let frame = geom.view(view, dims)?;
    let [w, h] = geom.detector;
    let mut mask = ScalarImage::zeros(w, h);
    for line in lines {
        let pts: Vec<[f64; 2]> = line.densify(0.25).into_iter().filter_map(|p| frame.project(p)).collect();
        let radii: Vec<f64> = line
            .densify(0.25)
            .into_iter()
            .map(|p| line.radius() * frame.sdd / frame.depth(p) / frame.pitch)
            .collect();
        for (q, r) in pts.iter().zip(&radii) {
            let r = r.max(0.5);
            let (u0, u1) = ((q[0] - r).floor().max(0.0) as usize, ((q[0] + r).ceil().max(0.0) as usize).min(w - 1));
            let (v0, v1) = ((q[1] - r).floor().max(0.0) as usize, ((q[1] + r).ceil().max(0.0) as usize).min(h - 1));
            for v in v0..=v1 {
                for u in u0..=u1 {
                    let (du, dv) = (u as f64 - q[0], v as f64 - q[1]);
                    if du * du + dv * dv <= r * r {
                        mask.set(u, v, 1.0);
                    }
                }
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_geom(det: usize) -> StereoGeometry {
        StereoGeometry {
            source_object_distance: 40.0,
            object_detector_distance: 40.0,
            detector: [det, det],
            pixel_pitch: 2.0,
            view_angles_deg: [-30.0, 30.0],
        }
    }

    #[test]
    fn zero_volume_projects_to_zero() {
        let g = small_geom(16);
        let img = forward_project(&ScalarVolume::zeros([16; 3]), &g, 0).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        assert!(forward_project(&ScalarVolume::zeros([16; 3]), &g, 2).is_err());
    }

    #[test]
    fn source_inside_volume_is_rejected() {
        let g = StereoGeometry {
            source_object_distance: 5.0,
            ..small_geom(16)
        };
        assert!(matches!(
            forward_project(&ScalarVolume::zeros([32; 3]), &g, 0),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn principal_ray_hits_detector_centre() {
        let g = small_geom(17);
        let dims = [17; 3];
        for view in 0..2 {
            let f = g.view(view, dims).unwrap();
            let uv = f.project([8.0, 8.0, 8.0]).unwrap();
            assert!((uv[0] - 8.0).abs() < 1e-12 && (uv[1] - 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = [12; 3];
        let n = 12 * 12 * 12;
        let x = ScalarVolume::new(dims, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap();
        let y = ScalarVolume::new(dims, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap();
        let (a, b) = (1.7, -0.4);
        let comb = ScalarVolume::new(dims, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let g = small_geom(12);
        let px = forward_project(&x, &g, 1).unwrap();
        let py = forward_project(&y, &g, 1).unwrap();
        let pc = forward_project(&comb, &g, 1).unwrap();
        for i in 0..pc.data().len() {
            let expect = a * px.data()[i] + b * py.data()[i];
            assert!((pc.data()[i] - expect).abs() <= 1e-9 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn ramp_kernel_values() {
        let k = ramp_kernel(3, 1.0);
        assert_eq!(k.len(), 7);
        assert_eq!(k[3], 0.25);
        assert_eq!(k[5], 0.0);
        assert!((k[4] + 1.0 / std::f64::consts::PI.powi(2)).abs() < 1e-15);
    }

    #[test]
    fn zero_image_back_projects_to_zero() {
        let g = small_geom(16);
        for weighting in [Weighting::Fdk, Weighting::Uniform, Weighting::Adjoint] {
            for filtered in [false, true] {
                let v = back_project(&ScalarImage::zeros(16, 16), &g, 0, [16; 3], BackProjectOptions { filtered, weighting }).unwrap();
                assert!(v.data().iter().all(|&x| x == 0.0));
            }
        }
        assert!(back_project(&ScalarImage::zeros(15, 16), &g, 0, [16; 3], BackProjectOptions::default()).is_err());
    }

    #[test]
    fn empty_maps_give_flagged_zero_evidence() {
        let g = small_geom(16);
        let z = ScalarImage::zeros(16, 16);
        let e = make_bp_evidence(&z, &z, &g, [16; 3]).unwrap();
        assert!(e.empty);
        assert!(e.volume.data().iter().all(|&x| x == 0.0));
    }
}
