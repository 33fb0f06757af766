//! Synthetic phantoms: ellipsoid backgrounds with straight line fiducials,
//! smooth volumetric deformation sequences, trigonometric line bending and
//! Poisson projection noise.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{warp_volume, DisplacementField3, GaussianSmooth, ScalarImage, ScalarVolume};
use crate::polyline::{self, add, cross, dot, norm, normalize, scale, sub, Point3, Polyline3};
use crate::rng::{derive_seed, stream};

const MAX_LINE_ATTEMPTS: usize = 10_000;
const MAX_REGEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub n_lines: usize,
    pub n_ellipsoids: usize,
    /// Tube radius of the line fiducials, voxels.
    pub line_radius: f64,
    pub line_intensity: f64,
    /// Ellipsoid intensities are drawn uniformly from this range.
    pub ellipsoid_intensity: [f64; 2],
    /// Minimum distance between a line and the volume border, voxels.
    /// Zero selects `dims / 8`.
    pub line_margin: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64; 3],
            n_lines: 5,
            n_ellipsoids: 10,
            line_radius: 2.0,
            line_intensity: 1.0,
            ellipsoid_intensity: [0.2, 0.5],
            line_margin: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::InvalidParameter(format!("phantom dims must be >= 16, got {:?}", self.dims)));
        }
        if !(self.line_radius > 0.0) {
            return Err(Error::InvalidParameter("line radius must be > 0".into()));
        }
        let [lo, hi] = self.ellipsoid_intensity;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(Error::InvalidParameter("ellipsoid intensity range must satisfy 0 <= lo <= hi".into()));
        }
        if !(self.line_intensity > hi) {
            return Err(Error::InvalidParameter("line intensity must exceed every ellipsoid intensity".into()));
        }
        Ok(())
    }

    fn margin(&self) -> f64 {
        if self.line_margin > 0.0 {
            self.line_margin
        } else {
            self.dims.iter().copied().min().unwrap() as f64 / 8.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformationSpec {
    /// Gaussian smoothing of the white-noise background field, voxels.
    pub sigma: f64,
    /// Peak background displacement per frame, voxels.
    pub amplitude: f64,
    /// Per-frame peak line displacement is drawn uniformly from this range.
    pub line_magnitude: [f64; 2],
    pub n_frames: usize,
    pub seed: u64,
}

impl Default for DeformationSpec {
    fn default() -> Self {
        Self {
            sigma: 6.0,
            amplitude: 2.0,
            line_magnitude: [3.0, 6.0],
            n_frames: 2,
            seed: 0,
        }
    }
}

impl DeformationSpec {
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidParameter("deformation sigma must be > 0".into()));
        }
        if !(self.amplitude >= 0.0) {
            return Err(Error::InvalidParameter("deformation amplitude must be >= 0".into()));
        }
        let [lo, hi] = self.line_magnitude;
        let cap = dims.iter().copied().min().unwrap() as f64 / 4.0;
        if !(lo >= 0.0 && hi >= lo && hi <= cap) {
            return Err(Error::InvalidParameter(format!(
                "line magnitude range must lie within [0, {cap}], got [{lo}, {hi}]"
            )));
        }
        if self.n_frames < 2 {
            return Err(Error::InvalidParameter("n_frames must be >= 2".into()));
        }
        Ok(())
    }
}

/// A starting volume together with its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: ScalarVolume,
    /// Ellipsoids only.
    pub background: ScalarVolume,
    pub lines: Vec<Polyline3>,
    pub line_intensity: f64,
}

/// One state of a deforming object.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub volume: ScalarVolume,
    pub background: ScalarVolume,
    pub lines: Vec<Polyline3>,
}

/// Uniformly random rotation matrix (unit quaternion method).
fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin(), b * (tau * u3).cos());
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn add_ellipsoid(vol: &mut ScalarVolume, center: Point3, axes: Point3, rot: [[f64; 3]; 3], value: f64) {
    let dims = vol.dims();
    let reach = axes.iter().copied().fold(0.0, f64::max);
    let lo: Vec<usize> = (0..3).map(|a| (center[a] - reach).floor().max(0.0) as usize).collect();
    let hi: Vec<usize> = (0..3)
        .map(|a| ((center[a] + reach).ceil() as usize).min(dims[a] - 1))
        .collect();
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let d = sub([x as f64, y as f64, z as f64], center);
                // body coordinates: R^T d
                let q = [
                    rot[0][0] * d[0] + rot[1][0] * d[1] + rot[2][0] * d[2],
                    rot[0][1] * d[0] + rot[1][1] * d[1] + rot[2][1] * d[2],
                    rot[0][2] * d[0] + rot[1][2] * d[1] + rot[2][2] * d[2],
                ];
                let r: f64 = (0..3).map(|a| (q[a] / axes[a]).powi(2)).sum();
                if r <= 1.0 {
                    let i = vol.index(x, y, z);
                    vol.data_mut()[i] += value;
                }
            }
        }
    }
}

/// Background plus the union of the line tubes at `line_intensity`.
pub fn compose(background: &ScalarVolume, lines: &[Polyline3], line_intensity: f64) -> Result<ScalarVolume> {
    let mut tubes = ScalarVolume::zeros(background.dims());
    for l in lines {
        polyline::rasterize_into(l, &mut tubes, line_intensity)?;
    }
    let mut vol = background.clone();
    vol.data_mut().iter_mut().zip(tubes.data()).for_each(|(v, t)| *v += t);
    Ok(vol)
}

fn random_line(rng: &mut impl Rng, dims: [usize; 3], margin: f64, radius: f64) -> Result<Polyline3> {
    let n = dims.iter().copied().min().unwrap() as f64;
    // Near-vertical lines: the two views rotate about z, so lines lying in
    // the horizontal plane are degenerate for stereo matching.
    let dir = loop {
        let v: Point3 = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let l = norm(v);
        if l > 1e-9 && (v[2] / l).abs() >= 0.5 {
            break normalize(v);
        }
    };
    let length = rng.random_range(n / 3.0..n / 2.0);
    let lo: Vec<f64> = (0..3).map(|a| margin + (dir[a] * length / 2.0).abs()).collect();
    let hi: Vec<f64> = (0..3)
        .map(|a| dims[a] as f64 - 1.0 - margin - (dir[a] * length / 2.0).abs())
        .collect();
    if (0..3).any(|a| lo[a] >= hi[a]) {
        return Err(Error::InvalidParameter("volume too small for the requested line length and margin".into()));
    }
    let c: Point3 = [
        rng.random_range(lo[0]..hi[0]),
        rng.random_range(lo[1]..hi[1]),
        rng.random_range(lo[2]..hi[2]),
    ];
    Polyline3::segment(add(c, scale(dir, -length / 2.0)), add(c, scale(dir, length / 2.0)), radius)
}

/// Random ellipsoid background plus straight, pairwise separated line
/// fiducials.
pub fn gen_start_volume(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims;
    let n = dims.iter().copied().min().unwrap() as f64;

    let mut rng = stream(spec.seed, "volume/ellipsoids");
    let mut background = ScalarVolume::zeros(dims);
    for _ in 0..spec.n_ellipsoids {
        let center: Point3 = [
            rng.random_range(dims[0] as f64 / 8.0..dims[0] as f64 * 7.0 / 8.0),
            rng.random_range(dims[1] as f64 / 8.0..dims[1] as f64 * 7.0 / 8.0),
            rng.random_range(dims[2] as f64 / 8.0..dims[2] as f64 * 7.0 / 8.0),
        ];
        let axes: Point3 = [
            rng.random_range(n / 16.0..=n / 4.0),
            rng.random_range(n / 16.0..=n / 4.0),
            rng.random_range(n / 16.0..=n / 4.0),
        ];
        let rot = random_rotation(&mut rng);
        let [lo, hi] = spec.ellipsoid_intensity;
        let value = if hi > lo { rng.random_range(lo..hi) } else { lo };
        add_ellipsoid(&mut background, center, axes, rot, value);
    }

    let mut rng = stream(spec.seed, "volume/lines");
    let min_sep = 4.0 * spec.line_radius;
    let mut lines: Vec<Polyline3> = Vec::with_capacity(spec.n_lines);
    let mut attempts = 0;
    while lines.len() < spec.n_lines {
        attempts += 1;
        if attempts > MAX_LINE_ATTEMPTS {
            return Err(Error::Exhausted {
                what: format!("placing {} separated lines", spec.n_lines),
                attempts: MAX_LINE_ATTEMPTS,
            });
        }
        let cand = random_line(&mut rng, dims, spec.margin(), spec.line_radius)?;
        if lines.iter().all(|l| l.min_distance_to(&cand) >= min_sep) {
            lines.push(cand);
        }
    }

    let volume = compose(&background, &lines, spec.line_intensity)?;
    Ok(Phantom {
        volume,
        background,
        lines,
        line_intensity: spec.line_intensity,
    })
}

/// Gaussian-smoothed white noise rescaled to a given peak displacement.
pub fn gen_smooth_field(dims: [usize; 3], sigma: f64, amplitude: f64, seed: u64) -> Result<DisplacementField3> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
    }
    if !(amplitude >= 0.0) || !amplitude.is_finite() {
        return Err(Error::InvalidParameter(format!("amplitude must be >= 0, got {amplitude}")));
    }
    if amplitude == 0.0 {
        return Ok(DisplacementField3::zeros(dims));
    }
    let n: usize = dims.iter().product();
    let mut rng = stream(seed, "field");
    let comps: [Vec<f64>; 3] = std::array::from_fn(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect());
    let field = DisplacementField3::from_components(dims, comps)?.gaussian_smooth(sigma)?;
    let peak = field.max_magnitude();
    if peak == 0.0 {
        return Ok(DisplacementField3::zeros(dims));
    }
    Ok(field.scaled(amplitude / peak))
}

fn transverse_basis(dir: Point3) -> (Point3, Point3) {
    let helper = if dir[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = normalize(cross(dir, helper));
    let e2 = cross(dir, e1);
    (e1, e2)
}

/// Resample so that points sit at evenly spaced chord coordinates
/// `t = i / segments`. Requires chord coordinate to increase along the line,
/// which holds for lines bent only perpendicular to their chord.
fn resample_by_chord(line: &Polyline3, segments: usize) -> Vec<(f64, Point3)> {
    let a = line.first();
    let chord = sub(line.last(), a);
    let l2 = dot(chord, chord);
    let tcoord = |p: Point3| dot(sub(p, a), chord) / l2;
    let pts = line.points();
    let mut out = Vec::with_capacity(segments + 1);
    let mut seg = 0;
    for i in 0..=segments {
        let t = i as f64 / segments as f64;
        if i == 0 {
            out.push((0.0, pts[0]));
            continue;
        }
        if i == segments {
            out.push((1.0, *pts.last().unwrap()));
            continue;
        }
        while seg + 2 < pts.len() && tcoord(pts[seg + 1]) < t {
            seg += 1;
        }
        let (p0, p1) = (pts[seg], pts[seg + 1]);
        let (t0, t1) = (tcoord(p0), tcoord(p1));
        let f = if t1 > t0 { ((t - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 0.0 };
        let mut p = add(p0, scale(sub(p1, p0), f));
        // Pin the chord coordinate exactly to t.
        let off = t - tcoord(p);
        p = add(p, scale(chord, off));
        out.push((t, p));
    }
    out
}

/// Bend a line by `magnitude * sin(k pi t) * u`, with `t` the normalised
/// chord coordinate, `k` in {1, 2} and `u` a random unit vector perpendicular
/// to the chord. Endpoints stay fixed; the peak added displacement equals
/// `magnitude`. Identical seeds give identical modes, so re-applying with the
/// same seed keeps bending the line in the same shape.
pub fn gen_line_trig_deformation(line: &Polyline3, magnitude: f64, seed: u64) -> Result<Polyline3> {
    if !(magnitude >= 0.0) || !magnitude.is_finite() {
        return Err(Error::InvalidParameter(format!("magnitude must be >= 0, got {magnitude}")));
    }
    let a = line.first();
    let chord = sub(line.last(), a);
    if norm(chord) == 0.0 {
        return Err(Error::InvalidParameter("line endpoints coincide".into()));
    }
    let dir = normalize(chord);
    let mut rng = stream(seed, "line-trig");
    let k = if rng.random::<bool>() { 1.0 } else { 2.0 };
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let (e1, e2) = transverse_basis(dir);
    let u = add(scale(e1, phi.cos()), scale(e2, phi.sin()));

    let bend = |samples: Vec<(f64, Point3)>| -> Vec<Point3> {
        let last = samples.len() - 1;
        samples
            .into_iter()
            .enumerate()
            .map(|(i, (t, p))| {
                if i == 0 || i == last {
                    p
                } else {
                    add(p, scale(u, magnitude * (k * std::f64::consts::PI * t).sin()))
                }
            })
            .collect()
    };
    // Multiples of 4 keep t = 1/4, 1/2, 3/4 (the sine peaks) on the grid.
    let mut segments = 4 * (line.length() / 2.0).ceil().max(1.0) as usize;
    let pts = loop {
        let pts = bend(resample_by_chord(line, segments));
        let max_gap = pts.windows(2).map(|w| norm(sub(w[1], w[0]))).fold(0.0, f64::max);
        if max_gap <= 0.5 || segments > 1 << 16 {
            break pts;
        }
        segments *= 2;
    };
    Polyline3::new(pts, line.radius())
}

fn fold_free_field(dims: [usize; 3], dspec: &DeformationSpec, key: &str) -> Result<DisplacementField3> {
    for attempt in 0..MAX_REGEN {
        let seed = derive_seed(dspec.seed, &format!("{key}/attempt{attempt}"));
        let f = gen_smooth_field(dims, dspec.sigma, dspec.amplitude, seed)?;
        if f.max_axis_gradient() < 1.0 {
            return Ok(f);
        }
    }
    Err(Error::Exhausted {
        what: "fold-free background field".into(),
        attempts: MAX_REGEN,
    })
}

/// Deform a phantom over `n_frames` frames (the first returned frame is the
/// starting state). Each step warps the background by a fresh smooth field
/// and bends every line once more.
pub fn apply_deformation_sequence(start: &Phantom, dspec: &DeformationSpec) -> Result<Vec<Frame>> {
    let dims = start.volume.dims();
    dspec.validate(dims)?;
    let mut frames = vec![Frame {
        volume: start.volume.clone(),
        background: start.background.clone(),
        lines: start.lines.clone(),
    }];
    let mut line_seeds: Vec<u64> = (0..start.lines.len())
        .map(|j| derive_seed(dspec.seed, &format!("line{j}")))
        .collect();
    let margin = start.lines.first().map(|l| l.radius()).unwrap_or(0.0);

    for f in 1..dspec.n_frames {
        let prev = frames.last().unwrap();
        let field = fold_free_field(dims, dspec, &format!("frame{f}/field"))?;
        let background = warp_volume(&prev.background, &field)?;

        let mut mag_rng = stream(dspec.seed, &format!("frame{f}/magnitude"));
        let mut lines = Vec::with_capacity(prev.lines.len());
        for (j, line) in prev.lines.iter().enumerate() {
            let [lo, hi] = dspec.line_magnitude;
            let magnitude = if hi > lo { mag_rng.random_range(lo..=hi) } else { lo };
            let mut placed = None;
            for attempt in 0..MAX_REGEN {
                let cand = gen_line_trig_deformation(line, magnitude, line_seeds[j])?;
                if cand.in_bounds(dims, margin) {
                    placed = Some(cand);
                    break;
                }
                line_seeds[j] = derive_seed(line_seeds[j], &format!("retry{f}/{attempt}"));
            }
            match placed {
                Some(l) => lines.push(l),
                None => {
                    return Err(Error::Exhausted {
                        what: format!("keeping line {j} inside the volume at frame {f}"),
                        attempts: MAX_REGEN,
                    })
                }
            }
        }
        let volume = compose(&background, &lines, start.line_intensity)?;
        frames.push(Frame {
            volume,
            background,
            lines,
        });
    }
    Ok(frames)
}

/// `Poisson(value * scale) / scale`, independently per pixel.
pub fn add_poisson_noise(img: &ScalarImage, scale: f64, seed: u64) -> Result<ScalarImage> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidParameter(format!("noise scale must be > 0, got {scale}")));
    }
    if img.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidParameter("Poisson noise needs non-negative pixels".into()));
    }
    let mut rng = stream(seed, "noise");
    let mut out = img.clone();
    for v in out.data_mut() {
        let lambda = *v * scale;
        *v = if lambda > 0.0 {
            let count: f64 = Poisson::new(lambda)
                .map_err(|e| Error::InvalidParameter(format!("poisson rate {lambda}: {e}")))?
                .sample(&mut rng);
            count / scale
        } else {
            0.0
        };
    }
    Ok(out)
}
