//! Factor-2 image pyramids and field prolongation.

use crate::grid::{trilinear_raw, DisplacementField3, ScalarVolume};

/// Smallest extent an axis may be reduced to.
const MIN_EXTENT: usize = 8;

fn reducible(n: usize) -> bool {
    n >= 2 * MIN_EXTENT
}

/// Which axes the next coarser level halves.
pub(crate) fn halved_axes(dims: [usize; 3]) -> [bool; 3] {
    [reducible(dims[0]), reducible(dims[1]), reducible(dims[2])]
}

/// Block-average each halved axis by 2 (the last block of an odd axis
/// repeats its border node).
pub(crate) fn downsample(v: &ScalarVolume, halve: [bool; 3]) -> ScalarVolume {
    let dims = v.dims();
    let out_dims: [usize; 3] = std::array::from_fn(|a| if halve[a] { dims[a].div_ceil(2) } else { dims[a] });
    ScalarVolume::from_fn(out_dims, |x, y, z| {
        let c = [x, y, z];
        let ranges: [(usize, usize); 3] = std::array::from_fn(|a| {
            if halve[a] {
                (2 * c[a], (2 * c[a] + 1).min(dims[a] - 1))
            } else {
                (c[a], c[a])
            }
        });
        let mut s = 0.0;
        let mut k = 0.0;
        for zz in [ranges[2].0, ranges[2].1] {
            for yy in [ranges[1].0, ranges[1].1] {
                for xx in [ranges[0].0, ranges[0].1] {
                    s += v.get(xx, yy, zz);
                    k += 1.0;
                }
            }
        }
        s / k
    })
    .with_pitch(v.voxel_pitch())
}

/// Interpolate a coarse field onto the finer grid and rescale its vectors.
pub(crate) fn upsample_field(coarse: &DisplacementField3, fine_dims: [usize; 3], halved: [bool; 3]) -> DisplacementField3 {
    let cd = coarse.dims();
    let n: usize = fine_dims.iter().product();
    let [nx, ny, _] = fine_dims;
    let mut comps: [Vec<f64>; 3] = std::array::from_fn(|_| Vec::with_capacity(n));
    for i in 0..n {
        let c = [i % nx, (i / nx) % ny, i / (nx * ny)];
        let p: [f64; 3] = std::array::from_fn(|a| {
            if halved[a] {
                (c[a] as f64 - 0.5) / 2.0
            } else {
                c[a] as f64
            }
        });
        for a in 0..3 {
            let s = if halved[a] { 2.0 } else { 1.0 };
            comps[a].push(s * trilinear_raw(coarse.component(a), cd, p));
        }
    }
    DisplacementField3::from_raw(fine_dims, comps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_averages_blocks() {
        let v = ScalarVolume::from_fn([16, 16, 1], |x, _, _| x as f64);
        let h = halved_axes(v.dims());
        assert_eq!(h, [true, true, false]);
        let d = downsample(&v, h);
        assert_eq!(d.dims(), [8, 8, 1]);
        assert_eq!(d.get(3, 2, 0), 6.5);
    }

    #[test]
    fn constant_field_upsamples_to_doubled_constant() {
        let c = DisplacementField3::constant([8, 8, 8], [1.0, -0.5, 0.25]);
        let f = upsample_field(&c, [16, 16, 16], [true; 3]);
        assert!(f.component(0).iter().all(|&v| (v - 2.0).abs() < 1e-15));
        assert!(f.component(1).iter().all(|&v| (v + 1.0).abs() < 1e-15));
        assert!(f.component(2).iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }
}
