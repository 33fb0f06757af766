//! Variational deformable registration.
//!
//! Minimises `Sim(m o (id + phi), f) + lambda * mean(|grad phi|^2)` by
//! normalised gradient descent with backtracking line search, coarse to fine
//! over a factor-2 pyramid. 2D images run through the 3D engine as
//! single-slice volumes.

mod objective;
mod pyramid;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DisplacementField2, DisplacementField3, GaussianSmooth, ScalarImage, ScalarVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Mean squared difference.
    Ssd,
    /// One minus global normalised cross-correlation.
    Ncc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub similarity: Similarity,
    /// Weight of the diffusion regulariser.
    pub lambda: f64,
    pub levels: usize,
    pub max_iterations: usize,
    /// Initial step: largest per-node displacement update, pixels/voxels.
    pub step: f64,
    /// Step shrink factor on a rejected step.
    pub backtrack: f64,
    /// Stop a level when the relative objective decrease falls below this.
    pub tolerance: f64,
    /// Gaussian pre-smoothing of both inputs at every level, in that level's
    /// pixels. Zero disables it.
    pub smoothing: f64,
    /// Gaussian smoothing of the descent direction, in the level's pixels.
    /// Zero uses the plain gradient.
    pub gradient_smoothing: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self::default_2d()
    }
}

impl RegConfig {
    pub fn default_2d() -> Self {
        Self {
            similarity: Similarity::Ssd,
            lambda: 0.1,
            levels: 3,
            max_iterations: 200,
            step: 0.5,
            backtrack: 0.5,
            tolerance: 1e-5,
            smoothing: 0.0,
            gradient_smoothing: 0.0,
        }
    }

    pub fn default_3d() -> Self {
        Self {
            similarity: Similarity::Ncc,
            lambda: 5.0,
            levels: 3,
            max_iterations: 100,
            step: 0.5,
            backtrack: 0.5,
            tolerance: 1e-5,
            smoothing: 0.5,
            gradient_smoothing: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("registration: {m}")));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be >= 0");
        }
        if self.levels < 1 {
            return bad("levels must be >= 1");
        }
        if !(self.step > 0.0) {
            return bad("step must be > 0");
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return bad("backtrack factor must lie in (0, 1)");
        }
        if !(self.tolerance >= 0.0) {
            return bad("tolerance must be >= 0");
        }
        if !(self.smoothing >= 0.0) {
            return bad("smoothing must be >= 0");
        }
        if !(self.gradient_smoothing >= 0.0) {
            return bad("gradient smoothing must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub level: usize,
    pub iteration: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegResult<F> {
    pub field: F,
    /// Objective at the returned field on the finest level.
    pub objective: f64,
    /// Accepted iterates; `level` 0 is the finest.
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
}

impl<F> RegResult<F> {
    /// Trace as CSV with header `iteration,level,objective`.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iteration,level,objective\n");
        for t in &self.trace {
            s.push_str(&format!("{},{},{:e}\n", t.iteration, t.level, t.objective));
        }
        s
    }
}

/// Smallest relative step before a level is declared converged.
const MIN_STEP_FRACTION: f64 = 1e-4;
const ARMIJO: f64 = 1e-4;
const GROWTH: f64 = 1.5;

struct LevelOutcome {
    field: DisplacementField3,
    value: f64,
    converged: bool,
}

fn optimise_level(
    m: &ScalarVolume,
    f: &ScalarVolume,
    init: DisplacementField3,
    cfg: &RegConfig,
    level: usize,
    trace: &mut Vec<TraceEntry>,
) -> Result<LevelOutcome> {
    let diverged = |iteration: usize, trace: &[TraceEntry]| Error::Diverged {
        level,
        iteration,
        trace: trace.iter().map(|t| t.objective).collect(),
    };

    // Never start worse than the identity.
    let zero = DisplacementField3::zeros(m.dims());
    let e_init = objective::evaluate(m, f, &init, cfg.similarity, cfg.lambda);
    let e_zero = objective::evaluate(m, f, &zero, cfg.similarity, cfg.lambda);
    let (mut phi, mut cur) = if e_zero.value < e_init.value { (zero, e_zero) } else { (init, e_init) };
    if !cur.value.is_finite() {
        return Err(diverged(0, trace));
    }
    trace.push(TraceEntry {
        level,
        iteration: 0,
        objective: cur.value,
    });

    let mut step = cfg.step;
    let min_step = cfg.step * MIN_STEP_FRACTION;
    let max_step = cfg.step * 4.0;
    let mut converged = false;

    for it in 1..=cfg.max_iterations {
        let g = &cur.gradient;
        // Smoothing the gradient keeps it a descent direction (the Gaussian
        // is positive definite) and spreads updates over neighbouring nodes.
        let smoothed;
        let dir = if cfg.gradient_smoothing > 0.0 {
            smoothed = g.gaussian_smooth(cfg.gradient_smoothing)?;
            &smoothed
        } else {
            g
        };
        let gmax = (0..3)
            .flat_map(|c| dir.component(c).iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()));
        if gmax == 0.0 {
            converged = true;
            break;
        }
        let gnorm2: f64 = (0..3)
            .flat_map(|c| g.component(c).iter().zip(dir.component(c)))
            .map(|(a, b)| a * b)
            .sum();

        let accepted = loop {
            let scale = step / gmax;
            let comps: [Vec<f64>; 3] = std::array::from_fn(|c| {
                phi.component(c)
                    .iter()
                    .zip(dir.component(c))
                    .map(|(p, d)| p - scale * d)
                    .collect()
            });
            let cand = DisplacementField3::from_raw(phi.dims(), comps);
            let next = objective::evaluate(m, f, &cand, cfg.similarity, cfg.lambda);
            if !next.value.is_finite() {
                return Err(diverged(it, trace));
            }
            if next.value <= cur.value - ARMIJO * scale * gnorm2 {
                break Some((cand, next));
            }
            step *= cfg.backtrack;
            if step < min_step {
                break None;
            }
        };

        let Some((cand, next)) = accepted else {
            converged = true;
            break;
        };
        let rel = (cur.value - next.value) / cur.value.abs().max(f64::MIN_POSITIVE);
        phi = cand;
        cur = next;
        trace.push(TraceEntry {
            level,
            iteration: it,
            objective: cur.value,
        });
        step = (step * GROWTH).min(max_step);
        if rel < cfg.tolerance {
            converged = true;
            break;
        }
    }
    Ok(LevelOutcome {
        field: phi,
        value: cur.value,
        converged,
    })
}

/// Coarse-to-fine registration of `m` onto `f` (both volumes, possibly
/// single-slice).
fn register_volumes(m: &ScalarVolume, f: &ScalarVolume, cfg: &RegConfig) -> Result<RegResult<DisplacementField3>> {
    cfg.validate()?;
    if m.dims() != f.dims() {
        return Err(Error::mismatch(m.dims(), f.dims()));
    }
    // Level 0 is the finest.
    let mut ms = vec![m.clone()];
    let mut fs = vec![f.clone()];
    let mut halvings = Vec::new();
    for _ in 1..cfg.levels {
        let h = pyramid::halved_axes(ms.last().unwrap().dims());
        if !h.iter().any(|&b| b) {
            break;
        }
        ms.push(pyramid::downsample(ms.last().unwrap(), h));
        fs.push(pyramid::downsample(fs.last().unwrap(), h));
        halvings.push(h);
    }

    let mut trace = Vec::new();
    let coarsest = ms.len() - 1;
    let mut field = DisplacementField3::zeros(ms[coarsest].dims());
    let mut outcome = None;
    for level in (0..=coarsest).rev() {
        if level < coarsest {
            field = pyramid::upsample_field(&field, ms[level].dims(), halvings[level]);
        }
        let (ml, fl) = if cfg.smoothing > 0.0 {
            (ms[level].gaussian_smooth(cfg.smoothing)?, fs[level].gaussian_smooth(cfg.smoothing)?)
        } else {
            (ms[level].clone(), fs[level].clone())
        };
        let out = optimise_level(&ml, &fl, field, cfg, level, &mut trace)?;
        field = out.field.clone();
        outcome = Some(out);
    }
    let out = outcome.expect("at least one level");
    Ok(RegResult {
        field: out.field,
        objective: out.value,
        trace,
        converged: out.converged,
    })
}

fn check_finite_inputs(data: &[&[f64]]) -> Result<()> {
    if data.iter().all(|d| d.iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(Error::NonFinite("registration input".into()))
    }
}

/// Field `phi` such that `warp_image(m, phi)` approximates `f`.
pub fn register_2d(m: &ScalarImage, f: &ScalarImage, cfg: &RegConfig) -> Result<RegResult<DisplacementField2>> {
    if m.dims() != f.dims() {
        return Err(Error::mismatch(m.dims(), f.dims()));
    }
    check_finite_inputs(&[m.data(), f.data()])?;
    let r = register_volumes(&m.to_volume(), &f.to_volume(), cfg)?;
    Ok(RegResult {
        field: DisplacementField2::from_field3(r.field),
        objective: r.objective,
        trace: r.trace,
        converged: r.converged,
    })
}

/// Field `psi` such that `warp_volume(v_prior, psi)` matches the evidence
/// `v_bp`.
pub fn register_3d_prior(
    v_prior: &ScalarVolume,
    v_bp: &ScalarVolume,
    cfg: &RegConfig,
) -> Result<RegResult<DisplacementField3>> {
    if v_prior.dims() != v_bp.dims() {
        return Err(Error::mismatch(v_prior.dims(), v_bp.dims()));
    }
    check_finite_inputs(&[v_prior.data(), v_bp.data()])?;
    if v_bp.data().iter().all(|&v| v == 0.0) {
        return Err(Error::NoEvidence("back-projection volume is all zero".into()));
    }
    register_volumes(v_prior, v_bp, cfg)
}

/// Objective and gradient for a 2D instance, without pyramid or smoothing.
pub fn eval_objective_2d(
    m: &ScalarImage,
    f: &ScalarImage,
    phi: &DisplacementField2,
    cfg: &RegConfig,
) -> Result<(f64, DisplacementField2)> {
    if m.dims() != f.dims() || phi.dims() != m.dims() {
        return Err(Error::mismatch(m.dims(), (f.dims(), phi.dims())));
    }
    let e = objective::evaluate(&m.to_volume(), &f.to_volume(), &phi.to_field3(), cfg.similarity, cfg.lambda);
    Ok((e.value, DisplacementField2::from_field3(e.gradient)))
}

/// Objective and gradient for a 3D instance, without pyramid or smoothing.
pub fn eval_objective_3d(
    m: &ScalarVolume,
    f: &ScalarVolume,
    phi: &DisplacementField3,
    cfg: &RegConfig,
) -> Result<(f64, DisplacementField3)> {
    if m.dims() != f.dims() || phi.dims() != m.dims() {
        return Err(Error::mismatch(m.dims(), (f.dims(), phi.dims())));
    }
    let e = objective::evaluate(m, f, phi, cfg.similarity, cfg.lambda);
    Ok((e.value, e.gradient))
}

/// Similarity term alone, for diagnostics.
pub fn similarity_3d(m: &ScalarVolume, f: &ScalarVolume, phi: &DisplacementField3, similarity: Similarity) -> Result<f64> {
    if m.dims() != f.dims() || phi.dims() != m.dims() {
        return Err(Error::mismatch(m.dims(), (f.dims(), phi.dims())));
    }
    Ok(objective::evaluate(m, f, phi, similarity, 0.0).similarity)
}
