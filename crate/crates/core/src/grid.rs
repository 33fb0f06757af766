//! Dense image/volume containers, displacement fields, interpolation,
//! pull-back warping and separable Gaussian smoothing.
//!
//! Pixel and voxel centres sit at integer coordinates starting from zero.
//! All sampling clamps to the border node (clamp-to-edge).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains non-finite values")))
    }
}

/// Dense 2D grid stored row-major (x fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
    pixel_pitch: f64,
}

impl ScalarImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("image dimensions must be nonzero".into()));
        }
        if data.len() != width * height {
            return Err(Error::mismatch(width * height, data.len()));
        }
        check_finite(&data, "image")?;
        Ok(Self {
            width,
            height,
            data,
            pixel_pitch: 1.0,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be nonzero");
        Self {
            width,
            height,
            data: vec![value; width * height],
            pixel_pitch: 1.0,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be nonzero");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
            pixel_pitch: 1.0,
        }
    }

    pub fn with_pitch(mut self, pitch: f64) -> Self {
        self.pixel_pitch = pitch;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[x + self.width * y]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[x + self.width * y] = v;
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Lift to a single-slice volume; bilinear sampling of the image equals
    /// trilinear sampling of the slice.
    pub(crate) fn to_volume(&self) -> ScalarVolume {
        ScalarVolume {
            nx: self.width,
            ny: self.height,
            nz: 1,
            data: self.data.clone(),
            voxel_pitch: self.pixel_pitch,
        }
    }
}

/// Dense 3D grid stored x-fastest, then y, then z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarVolume {
    nx: usize,
    ny: usize,
    nz: usize,
    data: Vec<f64>,
    voxel_pitch: f64,
}

impl ScalarVolume {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let [nx, ny, nz] = dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidParameter("volume dimensions must be nonzero".into()));
        }
        if data.len() != nx * ny * nz {
            return Err(Error::mismatch(nx * ny * nz, data.len()));
        }
        check_finite(&data, "volume")?;
        Ok(Self {
            nx,
            ny,
            nz,
            data,
            voxel_pitch: 1.0,
        })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 3], value: f64) -> Self {
        let [nx, ny, nz] = dims;
        assert!(nx > 0 && ny > 0 && nz > 0, "volume dimensions must be nonzero");
        Self {
            nx,
            ny,
            nz,
            data: vec![value; nx * ny * nz],
            voxel_pitch: 1.0,
        }
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f64 + Sync) -> Self {
        let [nx, ny, nz] = dims;
        assert!(nx > 0 && ny > 0 && nz > 0, "volume dimensions must be nonzero");
        let data = (0..nx * ny * nz)
            .into_par_iter()
            .map(|i| f(i % nx, (i / nx) % ny, i / (nx * ny)))
            .collect();
        Self {
            nx,
            ny,
            nz,
            data,
            voxel_pitch: 1.0,
        }
    }

    pub fn with_pitch(mut self, pitch: f64) -> Self {
        self.voxel_pitch = pitch;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn voxel_pitch(&self) -> f64 {
        self.voxel_pitch
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        [i % self.nx, (i / self.nx) % self.ny, i / (self.nx * self.ny)]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Deterministic sum (fixed chunking, sequential combine).
    pub fn sum(&self) -> f64 {
        deterministic_sum(&self.data)
    }

    pub fn count_above(&self, threshold: f64) -> usize {
        self.data.iter().filter(|&&v| v > threshold).count()
    }
}

pub(crate) const SUM_CHUNK: usize = 4096;

/// Sum whose rounding does not depend on thread scheduling.
pub(crate) fn deterministic_sum(values: &[f64]) -> f64 {
    values
        .par_chunks(SUM_CHUNK)
        .map(|c| c.iter().sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// Per-pixel (dx, dy) displacement in pixels, living on the fixed grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField2 {
    width: usize,
    height: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl DisplacementField2 {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, [0.0, 0.0])
    }

    pub fn constant(width: usize, height: usize, d: [f64; 2]) -> Self {
        Self {
            width,
            height,
            dx: vec![d[0]; width * height],
            dy: vec![d[1]; width * height],
        }
    }

    pub fn from_components(width: usize, height: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if dx.len() != n || dy.len() != n {
            return Err(Error::mismatch(n, (dx.len(), dy.len())));
        }
        check_finite(&dx, "field dx")?;
        check_finite(&dy, "field dy")?;
        Ok(Self { width, height, dx, dy })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 2]) -> Self {
        let mut out = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let d = f(x, y);
                out.dx[x + width * y] = d[0];
                out.dy[x + width * y] = d[1];
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        let i = x + self.width * y;
        [self.dx[i], self.dy[i]]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.dx.iter().zip(&self.dy).map(|(a, b)| a.hypot(*b)).collect()
    }

    pub fn mean_magnitude(&self) -> f64 {
        let m = self.magnitudes();
        m.iter().sum::<f64>() / m.len() as f64
    }

    pub(crate) fn to_field3(&self) -> DisplacementField3 {
        DisplacementField3 {
            nx: self.width,
            ny: self.height,
            nz: 1,
            d: [self.dx.clone(), self.dy.clone(), vec![0.0; self.dx.len()]],
        }
    }

    pub(crate) fn from_field3(f: DisplacementField3) -> Self {
        let [dx, dy, _] = f.d;
        Self {
            width: f.nx,
            height: f.ny,
            dx,
            dy,
        }
    }
}

/// Per-voxel (dx, dy, dz) displacement in voxels, living on the target grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField3 {
    nx: usize,
    ny: usize,
    nz: usize,
    d: [Vec<f64>; 3],
}

impl DisplacementField3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::constant(dims, [0.0; 3])
    }

    pub fn constant(dims: [usize; 3], v: [f64; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self {
            nx: dims[0],
            ny: dims[1],
            nz: dims[2],
            d: [vec![v[0]; n], vec![v[1]; n], vec![v[2]; n]],
        }
    }

    pub fn from_components(dims: [usize; 3], d: [Vec<f64>; 3]) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        for (c, comp) in d.iter().enumerate() {
            if comp.len() != n {
                return Err(Error::mismatch(n, comp.len()));
            }
            check_finite(comp, &format!("field component {c}"))?;
        }
        Ok(Self {
            nx: dims[0],
            ny: dims[1],
            nz: dims[2],
            d,
        })
    }

    pub(crate) fn from_raw(dims: [usize; 3], d: [Vec<f64>; 3]) -> Self {
        Self {
            nx: dims[0],
            ny: dims[1],
            nz: dims[2],
            d,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn len(&self) -> usize {
        self.d[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.d[0].is_empty()
    }

    pub fn component(&self, c: usize) -> &[f64] {
        &self.d[c]
    }

    pub fn components(&self) -> &[Vec<f64>; 3] {
        &self.d
    }

    #[inline]
    pub fn get(&self, i: usize) -> [f64; 3] {
        [self.d[0][i], self.d[1][i], self.d[2][i]]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let v = self.get(i);
                (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            })
            .collect()
    }

    pub fn max_magnitude(&self) -> f64 {
        self.magnitudes().into_iter().fold(0.0, f64::max)
    }

    pub fn mean_magnitude(&self) -> f64 {
        let m = self.magnitudes();
        m.iter().sum::<f64>() / m.len() as f64
    }

    /// Scale every vector by `s`.
    pub fn scaled(mut self, s: f64) -> Self {
        for comp in &mut self.d {
            comp.iter_mut().for_each(|v| *v *= s);
        }
        self
    }

    /// Trilinearly interpolated displacement at a continuous position.
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let dims = self.dims();
        [
            trilinear_raw(&self.d[0], dims, p),
            trilinear_raw(&self.d[1], dims, p),
            trilinear_raw(&self.d[2], dims, p),
        ]
    }

    /// Largest absolute forward-difference derivative of any component along
    /// any axis. Values below 1 mean `x + phi(x)` is monotone along each axis.
    pub fn max_axis_gradient(&self) -> f64 {
        let [nx, ny, nz] = self.dims();
        let strides = [1, nx, nx * ny];
        let sizes = [nx, ny, nz];
        let mut worst: f64 = 0.0;
        for comp in &self.d {
            for (axis, (&stride, &size)) in strides.iter().zip(&sizes).enumerate() {
                if size < 2 {
                    continue;
                }
                for i in 0..comp.len() {
                    let c = [i % nx, (i / nx) % ny, i / (nx * ny)][axis];
                    if c + 1 < size {
                        worst = worst.max((comp[i + stride] - comp[i]).abs());
                    }
                }
            }
        }
        worst
    }
}

#[inline]
fn clamp_axis(p: f64, n: usize) -> (usize, usize, f64, bool) {
    // (lower index, upper index, fraction, inside-open-interval)
    let hi = (n - 1) as f64;
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    if p <= 0.0 {
        return (0, 0, 0.0, false);
    }
    if p >= hi {
        return (n - 1, n - 1, 0.0, false);
    }
    let i0 = p.floor() as usize;
    (i0, i0 + 1, p - i0 as f64, true)
}

#[inline]
pub(crate) fn bilinear_raw(data: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let (x0, x1, fx, _) = clamp_axis(x, w);
    let (y0, y1, fy, _) = clamp_axis(y, h);
    let v00 = data[x0 + w * y0];
    let v10 = data[x1 + w * y0];
    let v01 = data[x0 + w * y1];
    let v11 = data[x1 + w * y1];
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
}

#[inline]
pub(crate) fn trilinear_raw(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    trilinear_with_grad(data, dims, p).0
}

/// Trilinear value and its derivative with respect to the sample position.
/// The derivative along a clamped axis is zero.
#[inline]
pub(crate) fn trilinear_with_grad(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> (f64, [f64; 3]) {
    let [nx, ny, nz] = dims;
    let (x0, x1, fx, inx) = clamp_axis(p[0], nx);
    let (y0, y1, fy, iny) = clamp_axis(p[1], ny);
    let (z0, z1, fz, inz) = clamp_axis(p[2], nz);
    let at = |x: usize, y: usize, z: usize| data[x + nx * (y + ny * z)];
    let c000 = at(x0, y0, z0);
    let c100 = at(x1, y0, z0);
    let c010 = at(x0, y1, z0);
    let c110 = at(x1, y1, z0);
    let c001 = at(x0, y0, z1);
    let c101 = at(x1, y0, z1);
    let c011 = at(x0, y1, z1);
    let c111 = at(x1, y1, z1);

    let c00 = c000 + fx * (c100 - c000);
    let c10 = c010 + fx * (c110 - c010);
    let c01 = c001 + fx * (c101 - c001);
    let c11 = c011 + fx * (c111 - c011);
    let c0 = c00 + fy * (c10 - c00);
    let c1 = c01 + fy * (c11 - c01);
    let value = c0 + fz * (c1 - c0);

    let gx = if inx {
        let a = (1.0 - fy) * (c100 - c000) + fy * (c110 - c010);
        let b = (1.0 - fy) * (c101 - c001) + fy * (c111 - c011);
        (1.0 - fz) * a + fz * b
    } else {
        0.0
    };
    let gy = if iny { (1.0 - fz) * (c10 - c00) + fz * (c11 - c01) } else { 0.0 };
    let gz = if inz { c1 - c0 } else { 0.0 };
    (value, [gx, gy, gz])
}

fn check_point<const N: usize>(p: [f64; N]) -> Result<()> {
    if p.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("sample point {p:?}")))
    }
}

/// Bilinear interpolation with clamp-to-edge.
pub fn sample_bilinear(img: &ScalarImage, p: [f64; 2]) -> Result<f64> {
    check_point(p)?;
    Ok(bilinear_raw(&img.data, img.width, img.height, p[0], p[1]))
}

/// Trilinear interpolation with clamp-to-edge.
pub fn sample_trilinear(vol: &ScalarVolume, p: [f64; 3]) -> Result<f64> {
    check_point(p)?;
    Ok(trilinear_raw(&vol.data, vol.dims(), p))
}

/// Pull-back warp: `out(x) = m(x + phi(x))`.
pub fn warp_image(m: &ScalarImage, phi: &DisplacementField2) -> Result<ScalarImage> {
    if phi.dims() != m.dims() {
        return Err(Error::mismatch(m.dims(), phi.dims()));
    }
    let (w, h) = m.dims();
    let data = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            bilinear_raw(&m.data, w, h, x as f64 + phi.dx[i], y as f64 + phi.dy[i])
        })
        .collect();
    Ok(ScalarImage {
        width: w,
        height: h,
        data,
        pixel_pitch: m.pixel_pitch,
    })
}

/// Pull-back warp: `out(x) = v(x + phi(x))`.
pub fn warp_volume(v: &ScalarVolume, phi: &DisplacementField3) -> Result<ScalarVolume> {
    if phi.dims() != v.dims() {
        return Err(Error::mismatch(v.dims(), phi.dims()));
    }
    let dims = v.dims();
    let [nx, ny, _] = dims;
    let data = (0..v.len())
        .into_par_iter()
        .map(|i| {
            let p = [
                (i % nx) as f64 + phi.d[0][i],
                ((i / nx) % ny) as f64 + phi.d[1][i],
                (i / (nx * ny)) as f64 + phi.d[2][i],
            ];
            trilinear_raw(&v.data, dims, p)
        })
        .collect();
    Ok(ScalarVolume {
        nx: v.nx,
        ny: v.ny,
        nz: v.nz,
        data,
        voxel_pitch: v.voxel_pitch,
    })
}

/// Normalised Gaussian kernel truncated at `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Convolve `data` (laid out x-fastest with `dims`) along `axis`, clamping at
/// the borders.
pub(crate) fn convolve_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let n = dims[axis];
    if kernel.len() == 1 || n == 1 {
        return data.iter().map(|v| v * kernel.iter().sum::<f64>()).collect();
    }
    let r = (kernel.len() / 2) as i64;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let [nx, ny, _] = dims;
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let c = [i % nx, (i / nx) % ny, i / (nx * ny)][axis] as i64;
            let base = i as i64 - c * stride as i64;
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let j = (c + k as i64 - r).clamp(0, n as i64 - 1);
                    w * data[(base + j * stride as i64) as usize]
                })
                .sum()
        })
        .collect()
}

fn smooth_raw(data: &[f64], dims: [usize; 3], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return data.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let mut out = data.to_vec();
    for axis in 0..3 {
        if dims[axis] > 1 {
            out = convolve_axis(&out, dims, axis, &kernel);
        }
    }
    out
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
    }
    Ok(())
}

/// Separable Gaussian smoothing with clamp-to-edge borders.
pub trait GaussianSmooth: Sized {
    fn gaussian_smooth(&self, sigma: f64) -> Result<Self>;
}

impl GaussianSmooth for ScalarImage {
    fn gaussian_smooth(&self, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        let data = smooth_raw(&self.data, [self.width, self.height, 1], sigma);
        Ok(Self { data, ..self.clone() })
    }
}

impl GaussianSmooth for ScalarVolume {
    fn gaussian_smooth(&self, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        let data = smooth_raw(&self.data, self.dims(), sigma);
        Ok(Self { data, ..self.clone() })
    }
}

impl GaussianSmooth for DisplacementField2 {
    fn gaussian_smooth(&self, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        let dims = [self.width, self.height, 1];
        Ok(Self {
            width: self.width,
            height: self.height,
            dx: smooth_raw(&self.dx, dims, sigma),
            dy: smooth_raw(&self.dy, dims, sigma),
        })
    }
}

impl GaussianSmooth for DisplacementField3 {
    fn gaussian_smooth(&self, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        let dims = self.dims();
        Ok(Self {
            nx: self.nx,
            ny: self.ny,
            nz: self.nz,
            d: [
                smooth_raw(&self.d[0], dims, sigma),
                smooth_raw(&self.d[1], dims, sigma),
                smooth_raw(&self.d[2], dims, sigma),
            ],
        })
    }
}

pub fn gaussian_smooth<G: GaussianSmooth>(grid: &G, sigma: f64) -> Result<G> {
    grid.gaussian_smooth(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> ScalarVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        ScalarVolume::new(dims, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn bilinear_basics() {
        let c = ScalarImage::filled(5, 4, 5.0);
        assert_eq!(sample_bilinear(&c, [1.3, 2.7]).unwrap(), 5.0);
        assert_eq!(sample_bilinear(&c, [-10.0, 99.0]).unwrap(), 5.0);

        let img = ScalarImage::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!((sample_bilinear(&img, [0.5, 0.5]).unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(sample_bilinear(&img, [1.0, 0.0]).unwrap(), 1.0);
        assert!(sample_bilinear(&img, [f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn trilinear_nodes_and_constant() {
        let c = ScalarVolume::filled([3, 4, 5], 2.0);
        assert_eq!(sample_trilinear(&c, [0.3, 1.7, 3.9]).unwrap(), 2.0);
        let v = random_volume([4, 4, 4], 1);
        for (x, y, z) in [(0, 0, 0), (3, 2, 1), (1, 3, 3)] {
            let s = sample_trilinear(&v, [x as f64, y as f64, z as f64]).unwrap();
            assert_eq!(s, v.get(x, y, z));
        }
        assert!(sample_trilinear(&v, [0.0, f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn trilinear_gradient_matches_finite_differences() {
        let v = random_volume([5, 5, 5], 2);
        let p = [1.37, 2.61, 3.12];
        let (_, g) = trilinear_with_grad(&v.data, v.dims(), p);
        let h = 1e-6;
        for a in 0..3 {
            let mut pp = p;
            let mut pm = p;
            pp[a] += h;
            pm[a] -= h;
            let fd = (trilinear_raw(&v.data, v.dims(), pp) - trilinear_raw(&v.data, v.dims(), pm)) / (2.0 * h);
            assert!((fd - g[a]).abs() < 1e-8);
        }
    }

    #[test]
    fn warp_identity_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ScalarImage::from_fn(7, 6, |_, _| rng.random::<f64>());
        let out = warp_image(&m, &DisplacementField2::zeros(7, 6)).unwrap();
        assert_eq!(out, m);

        let shifted = warp_image(&m, &DisplacementField2::constant(7, 6, [1.0, 0.0])).unwrap();
        for y in 0..6 {
            for x in 0..7 {
                assert_eq!(shifted.get(x, y), m.get((x + 1).min(6), y));
            }
        }

        let c = ScalarImage::filled(7, 6, 3.25);
        let phi = DisplacementField2::from_fn(7, 6, |x, y| [(x as f64 * 0.7).sin() * 2.0, (y as f64).cos()]);
        let out = warp_image(&c, &phi).unwrap();
        assert!(out.data().iter().all(|&v| (v - 3.25).abs() < 1e-15));

        assert!(warp_image(&m, &DisplacementField2::zeros(6, 6)).is_err());
    }

    #[test]
    fn warp_volume_identity_and_z_shift() {
        let v = random_volume([5, 4, 6], 4);
        assert_eq!(warp_volume(&v, &DisplacementField3::zeros(v.dims())).unwrap(), v);
        let out = warp_volume(&v, &DisplacementField3::constant(v.dims(), [0.0, 0.0, 2.0])).unwrap();
        for z in 0..6 {
            for y in 0..4 {
                for x in 0..5 {
                    assert_eq!(out.get(x, y, z), v.get(x, y, (z + 2).min(5)));
                }
            }
        }
        let c = ScalarVolume::filled([5, 4, 6], -1.5);
        let phi = DisplacementField3::constant(c.dims(), [0.3, -2.2, 7.0]);
        assert_eq!(warp_volume(&c, &phi).unwrap(), c);
        assert!(warp_volume(&v, &DisplacementField3::zeros([5, 4, 5])).is_err());
    }

    #[test]
    fn gaussian_kernel_is_truncated_and_normalised() {
        let k = gaussian_kernel(2.0);
        assert_eq!(k.len(), 13);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
    }

    #[test]
    fn gaussian_smooth_impulse_matches_closed_form() {
        let n = 41;
        let mut img = ScalarImage::zeros(n, 1);
        img.set(20, 0, 1.0);
        let out = img.gaussian_smooth(2.0).unwrap();
        // Directly evaluated normalised Gaussian on the integer support |k| <= 6.
        let norm: f64 = (-6..=6).map(|k: i32| (-(k * k) as f64 / 8.0).exp()).sum();
        for x in 0..n {
            let k = x as i32 - 20;
            let expect = if k.abs() <= 6 { (-(k * k) as f64 / 8.0).exp() / norm } else { 0.0 };
            assert!((out.get(x, 0) - expect).abs() < 1e-10, "x={x}");
        }
    }

    #[test]
    fn gaussian_smooth_zero_sigma_and_constants() {
        let v = random_volume([6, 5, 4], 5);
        assert_eq!(v.gaussian_smooth(0.0).unwrap(), v);
        let c = ScalarVolume::filled([6, 5, 4], 0.7);
        let s = c.gaussian_smooth(1.5).unwrap();
        assert!(s.data().iter().all(|&x| (x - 0.7).abs() < 1e-12));
        assert!(v.gaussian_smooth(-1.0).is_err());
        let f = DisplacementField3::constant([6, 5, 4], [1.0, 2.0, 3.0]).gaussian_smooth(1.0).unwrap();
        assert!(f.component(2).iter().all(|&x| (x - 3.0).abs() < 1e-12));
    }

    #[test]
    fn constructors_reject_bad_data() {
        assert!(ScalarImage::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ScalarImage::new(1, 1, vec![f64::NAN]).is_err());
        assert!(ScalarVolume::new([2, 2, 2], vec![0.0; 7]).is_err());
        assert!(DisplacementField3::from_components([1, 1, 1], [vec![0.0], vec![0.0], vec![]]).is_err());
    }
}
