//! Similarity + diffusion objective and its analytic gradient.
//!
//! Images are handled as single-slice volumes, so the same code serves 2D
//! and 3D. Along an axis of extent 1 the sampling derivative is zero, which
//! keeps the z component of 2D fields at zero.

use rayon::prelude::*;

use super::Similarity;
use crate::grid::{deterministic_sum, trilinear_with_grad, DisplacementField3, ScalarVolume};

pub(crate) struct Evaluation {
    pub value: f64,
    pub similarity: f64,
    pub gradient: DisplacementField3,
}

fn warped_with_grad(m: &ScalarVolume, phi: &DisplacementField3) -> Vec<(f64, [f64; 3])> {
    let dims = m.dims();
    let [nx, ny, _] = dims;
    let comps = phi.components();
    (0..m.len())
        .into_par_iter()
        .map(|i| {
            let p = [
                (i % nx) as f64 + comps[0][i],
                ((i / nx) % ny) as f64 + comps[1][i],
                (i / (nx * ny)) as f64 + comps[2][i],
            ];
            trilinear_with_grad(m.data(), dims, p)
        })
        .collect()
}

/// Sum of squared forward differences of every component along every axis,
/// and its gradient (unnormalised).
fn diffusion(phi: &DisplacementField3) -> (f64, [Vec<f64>; 3]) {
    let dims = phi.dims();
    let [nx, ny, nz] = dims;
    let strides = [1usize, nx, nx * ny];
    let sizes = [nx, ny, nz];
    let mut energy = 0.0;
    let grads: Vec<(f64, Vec<f64>)> = phi
        .components()
        .par_iter()
        .map(|comp| {
            let n = comp.len();
            let per_node: Vec<(f64, f64)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let c = [i % nx, (i / nx) % ny, i / (nx * ny)];
                    let mut e = 0.0;
                    let mut g = 0.0;
                    for a in 0..3 {
                        if sizes[a] < 2 {
                            continue;
                        }
                        if c[a] + 1 < sizes[a] {
                            let d = comp[i + strides[a]] - comp[i];
                            e += d * d;
                            g -= 2.0 * d;
                        }
                        if c[a] > 0 {
                            g += 2.0 * (comp[i] - comp[i - strides[a]]);
                        }
                    }
                    (e, g)
                })
                .collect();
            let e: Vec<f64> = per_node.iter().map(|p| p.0).collect();
            (deterministic_sum(&e), per_node.into_iter().map(|p| p.1).collect())
        })
        .collect();
    let mut out: [Vec<f64>; 3] = Default::default();
    for (c, (e, g)) in grads.into_iter().enumerate() {
        energy += e;
        out[c] = g;
    }
    (energy, out)
}

/// `E(phi) = Sim(m o (id + phi), f) + lambda * mean(|grad phi|^2)` and
/// `dE/dphi`.
pub(crate) fn evaluate(
    m: &ScalarVolume,
    f: &ScalarVolume,
    phi: &DisplacementField3,
    similarity: Similarity,
    lambda: f64,
) -> Evaluation {
    let n = m.len() as f64;
    let wg = warped_with_grad(m, phi);

    // d Sim / d w_i
    let (sim, dsim): (f64, Vec<f64>) = match similarity {
        Similarity::Ssd => {
            let r: Vec<f64> = wg.iter().zip(f.data()).map(|((w, _), fv)| w - fv).collect();
            let sq: Vec<f64> = r.iter().map(|v| v * v).collect();
            let value = deterministic_sum(&sq) / n;
            (value, r.into_iter().map(|v| 2.0 * v / n).collect())
        }
        Similarity::Ncc => {
            let w: Vec<f64> = wg.iter().map(|p| p.0).collect();
            let wm = deterministic_sum(&w) / n;
            let fm = deterministic_sum(f.data()) / n;
            let a: Vec<f64> = w.iter().map(|v| v - wm).collect();
            let b: Vec<f64> = f.data().iter().map(|v| v - fm).collect();
            let sab = deterministic_sum(&a.iter().zip(&b).map(|(x, y)| x * y).collect::<Vec<_>>());
            let saa = deterministic_sum(&a.iter().map(|x| x * x).collect::<Vec<_>>());
            let sbb = deterministic_sum(&b.iter().map(|x| x * x).collect::<Vec<_>>());
            if saa <= 0.0 || sbb <= 0.0 {
                (1.0, vec![0.0; a.len()])
            } else {
                let denom = (saa * sbb).sqrt();
                let ncc = sab / denom;
                let d = a.iter().zip(&b).map(|(ai, bi)| -(bi / denom - ncc * ai / saa)).collect();
                (1.0 - ncc, d)
            }
        }
    };

    let (reg, reg_grad) = diffusion(phi);
    let grad: [Vec<f64>; 3] = std::array::from_fn(|c| {
        wg.par_iter()
            .zip(dsim.par_iter())
            .zip(reg_grad[c].par_iter())
            .map(|(((_, g), ds), rg)| ds * g[c] + lambda * rg / n)
            .collect()
    });
    Evaluation {
        value: sim + lambda * reg / n,
        similarity: sim,
        gradient: DisplacementField3::from_raw(m.dims(), grad),
    }
}
