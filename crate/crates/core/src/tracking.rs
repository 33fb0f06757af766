//! Per-frame tracking pipeline and the two ways of chaining priors across a
//! sequence.

use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::eval::{line_position_error_2d, roc_curve_images, volume_chamfer};
use crate::features::{detect_features_2d_with, extract_polylines, DetectorConfig, FeatureMap2};
use crate::grid::{warp_image, warp_volume, DisplacementField2, DisplacementField3, ScalarImage, ScalarVolume};
use crate::io::{polylines_csv, sha256_hex};
use crate::polyline::{norm, rasterize_polylines, sub, Point3, Polyline3};
use crate::projector::{forward_project, line_mask_2d, make_bp_evidence, StereoGeometry};
use crate::registration::{register_2d, register_3d_prior, RegConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub reg2d: RegConfig,
    pub reg3d: RegConfig,
    pub detector: DetectorConfig,
    /// Which form of the feature maps is back-projected.
    pub evidence_input: EvidenceInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceInput {
    /// Thresholded maps.
    Binary,
    /// The normalised response in [0, 1].
    Response,
}

impl EvidenceInput {
    fn map(&self, feat: &FeatureMap2) -> ScalarImage {
        match self {
            EvidenceInput::Binary => feat.binary(),
            EvidenceInput::Response => feat.response.clone(),
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            reg2d: RegConfig::default_2d(),
            reg3d: RegConfig::default_3d(),
            detector: DetectorConfig::default(),
            evidence_input: EvidenceInput::Binary,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.reg2d.validate()?;
        self.reg3d.validate()?;
        self.detector.validate()
    }
}

pub const STAGES: [&str; 9] = [
    "forward_project",
    "register_2d",
    "warp_image",
    "detect_features_2d",
    "make_bp_evidence",
    "rasterize_prior",
    "register_3d_prior",
    "warp_volume",
    "extract_polylines",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// SHA-256 of the stage output as little-endian f32 (CSV text for
    /// polylines).
    pub checksum: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub stages: Vec<StageRecord>,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    pub fn checksum(&self, stage: &str) -> Option<&str> {
        self.stages.iter().find(|s| s.stage == stage).map(|s| s.checksum.as_str())
    }
}

fn f32_hash<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> String {
    let bytes: Vec<u8> = parts
        .into_iter()
        .flat_map(|p| p.iter().flat_map(|v| (*v as f32).to_le_bytes()))
        .collect();
    sha256_hex(&bytes)
}

/// The feature prior of a frame: a binary feature volume and the lines it
/// stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorFeatures {
    pub lines: Vec<Polyline3>,
    pub volume: ScalarVolume,
}

impl PriorFeatures {
    /// Rasterised known lines.
    pub fn from_lines(lines: Vec<Polyline3>, dims: [usize; 3]) -> Result<Self> {
        let volume = rasterize_polylines(&lines, dims)?;
        Ok(Self { lines, volume })
    }

    /// A previous frame's estimate: its extracted lines rasterised. Falls back
    /// to the transported prior lines when extraction found a different count.
    pub fn from_estimate(est: &FrameEstimate, prior_count: usize) -> Result<Self> {
        let lines = if est.lines.len() == prior_count { est.lines.clone() } else { est.tracked_lines.clone() };
        Self::from_lines(lines, est.feature_volume.dims())
    }
}

/// Every intermediate of one tracked frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEstimate {
    pub moving: [ScalarImage; 2],
    pub fields_2d: [DisplacementField2; 2],
    pub moved: [ScalarImage; 2],
    pub features: [FeatureMap2; 2],
    pub evidence: ScalarVolume,
    pub prior: ScalarVolume,
    pub field_3d: DisplacementField3,
    pub feature_volume: ScalarVolume,
    /// Centrelines extracted from `feature_volume`.
    pub lines: Vec<Polyline3>,
    /// Prior lines carried to the current frame through the 3D field.
    pub tracked_lines: Vec<Polyline3>,
    pub diagnostics: Diagnostics,
}

struct Recorder {
    diag: Diagnostics,
    clock: Instant,
}

impl Recorder {
    fn new() -> Self {
        Self {
            diag: Diagnostics::default(),
            clock: Instant::now(),
        }
    }

    fn record(&mut self, stage: &str, checksum: String) {
        let now = Instant::now();
        self.diag.stages.push(StageRecord {
            stage: stage.into(),
            checksum,
            seconds: (now - self.clock).as_secs_f64(),
        });
        self.clock = now;
    }
}

/// Map prior points to the current frame: find `q` with `q + psi(q) = p`
/// (the field is a pull-back). Fixed-point iteration first; where the field
/// folds and that fails, the voxel with the smallest residual near `p` seeds
/// a few Gauss-Newton steps.
pub fn transport_points(points: &[Point3], psi: &DisplacementField3) -> Vec<Point3> {
    let dims = psi.dims();
    let clamp = |q: Point3| -> Point3 { std::array::from_fn(|a| q[a].clamp(0.0, dims[a] as f64 - 1.0)) };
    let residual = |q: Point3, p: Point3| -> Point3 {
        let d = psi.sample(q);
        std::array::from_fn(|a| q[a] + d[a] - p[a])
    };
    let reach = psi.max_magnitude().ceil() as i64 + 1;
    points
        .par_iter()
        .map(|&p| {
            let mut q = p;
            for _ in 0..30 {
                let d = psi.sample(q);
                let next = clamp(std::array::from_fn(|a| p[a] - d[a]));
                let moved = norm(sub(next, q));
                q = next;
                if moved < 1e-6 {
                    break;
                }
            }
            if norm(residual(q, p)) < 1e-3 {
                return q;
            }
            let c: [i64; 3] = std::array::from_fn(|a| p[a].round() as i64);
            let mut best = (norm(residual(q, p)), q);
            for dz in -reach..=reach {
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        let g = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if (0..3).any(|a| g[a] < 0 || g[a] >= dims[a] as i64) {
                            continue;
                        }
                        let x: Point3 = std::array::from_fn(|a| g[a] as f64);
                        let r = norm(residual(x, p));
                        if r < best.0 {
                            best = (r, x);
                        }
                    }
                }
            }
            let mut q = best.1;
            for _ in 0..10 {
                let r = residual(q, p);
                if norm(r) < 1e-6 {
                    break;
                }
                let h = 0.25;
                let mut jac = Matrix3::identity();
                for b in 0..3 {
                    let mut lo = q;
                    let mut hi = q;
                    lo[b] -= h;
                    hi[b] += h;
                    let (dl, dh) = (psi.sample(lo), psi.sample(hi));
                    for a in 0..3 {
                        jac[(a, b)] += (dh[a] - dl[a]) / (2.0 * h);
                    }
                }
                let Some(step) = jac.lu().solve(&Vector3::new(r[0], r[1], r[2])) else {
                    break;
                };
                let next = clamp(std::array::from_fn(|a| q[a] - step[a]));
                if norm(residual(next, p)) >= norm(r) {
                    break;
                }
                q = next;
            }
            q
        })
        .collect()
}

/// Carry a line through `psi`, densified to unit spacing first so that the
/// field can bend straight segments.
pub fn transport_polyline(line: &Polyline3, psi: &DisplacementField3) -> Result<Polyline3> {
    let mut pts = transport_points(&line.densify(1.0), psi);
    pts.dedup_by(|a, b| norm(sub(*a, *b)) < 1e-6);
    if pts.len() < 2 {
        return Err(Error::Geometry("transported line collapsed to a point".into()));
    }
    Polyline3::new(pts, line.radius())
}

fn run_2d(
    moving: &ScalarImage,
    noisy: &ScalarImage,
    cfg: &PipelineConfig,
) -> Result<(DisplacementField2, ScalarImage, FeatureMap2)> {
    let phi = register_2d(moving, noisy, &cfg.reg2d).stage("register_2d")?.field;
    let moved = warp_image(moving, &phi).stage("warp_image")?;
    let feat = detect_features_2d_with(&moved, &cfg.detector).stage("detect_features_2d")?;
    Ok((phi, moved, feat))
}

/// Stages 2 to 9 given the two moving images.
pub fn track_from_moving(
    moving: [ScalarImage; 2],
    prior: &PriorFeatures,
    noisy: [&ScalarImage; 2],
    geom: &StereoGeometry,
    cfg: &PipelineConfig,
) -> Result<FrameEstimate> {
    let mut rec = Recorder::new();
    rec.record("forward_project", f32_hash([moving[0].data(), moving[1].data()]));
    track_rest(rec, moving, prior, noisy, geom, cfg)
}

fn track_rest(
    mut rec: Recorder,
    moving: [ScalarImage; 2],
    prior: &PriorFeatures,
    noisy: [&ScalarImage; 2],
    geom: &StereoGeometry,
    cfg: &PipelineConfig,
) -> Result<FrameEstimate> {
    let dims = prior.volume.dims();
    cfg.validate()?;
    // The views are independent up to the back-projection.
    let (a, b) = rayon::join(|| run_2d(&moving[0], noisy[0], cfg), || run_2d(&moving[1], noisy[1], cfg));
    let ((phi0, moved0, feat0), (phi1, moved1, feat1)) = (a?, b?);
    // One combined timing for the three 2D stages, attributed to the first.
    let dt = rec.clock.elapsed().as_secs_f64();
    rec.record(
        "register_2d",
        f32_hash([phi0.dx(), phi0.dy(), phi1.dx(), phi1.dy()]),
    );
    rec.diag.stages.last_mut().unwrap().seconds = dt;
    rec.record("warp_image", f32_hash([moved0.data(), moved1.data()]));
    rec.record(
        "detect_features_2d",
        f32_hash([feat0.response.data(), feat1.response.data(), &[feat0.threshold, feat1.threshold]]),
    );

    let ev = make_bp_evidence(
        &cfg.evidence_input.map(&feat0),
        &cfg.evidence_input.map(&feat1),
        geom,
        dims,
    ).stage("make_bp_evidence")?;
    if ev.empty {
        return Err(Error::NoEvidence("a feature map has no detections".into()).at_stage("make_bp_evidence"));
    }
    rec.record("make_bp_evidence", f32_hash([ev.volume.data()]));

    if prior.volume.max() <= 0.0 {
        return Err(Error::InvalidParameter("empty prior feature volume".into()).at_stage("rasterize_prior"));
    }
    rec.record("rasterize_prior", f32_hash([prior.volume.data()]));

    let psi = register_3d_prior(&prior.volume, &ev.volume, &cfg.reg3d).stage("register_3d_prior")?.field;
    let c = psi.components();
    rec.record("register_3d_prior", f32_hash([c[0].as_slice(), &c[1], &c[2]]));

    let fv = warp_volume(&prior.volume, &psi).stage("warp_volume")?;
    rec.record("warp_volume", f32_hash([fv.data()]));

    let ex = extract_polylines(&fv, prior.lines.len()).stage("extract_polylines")?;
    let tracked = prior
        .lines
        .iter()
        .map(|l| transport_polyline(l, &psi))
        .collect::<Result<Vec<_>>>()
        .stage("extract_polylines")?;
    rec.record(
        "extract_polylines",
        sha256_hex(format!("{}{}", polylines_csv(&ex.lines), polylines_csv(&tracked)).as_bytes()),
    );
    rec.diag.warnings.extend(ex.warning);

    Ok(FrameEstimate {
        moving,
        fields_2d: [phi0, phi1],
        moved: [moved0, moved1],
        features: [feat0, feat1],
        evidence: ev.volume,
        prior: prior.volume.clone(),
        field_3d: psi,
        feature_volume: fv,
        lines: ex.lines,
        tracked_lines: tracked,
        diagnostics: rec.diag,
    })
}

/// Full nine-stage pipeline for one frame with a prior volume and its lines.
pub fn track_frame(
    prior_volume: &ScalarVolume,
    prior_lines: &[Polyline3],
    noisy: [&ScalarImage; 2],
    geom: &StereoGeometry,
    cfg: &PipelineConfig,
) -> Result<FrameEstimate> {
    let mut rec = Recorder::new();
    let m0 = forward_project(prior_volume, geom, 0).stage("forward_project")?;
    let m1 = forward_project(prior_volume, geom, 1).stage("forward_project")?;
    rec.record("forward_project", f32_hash([m0.data(), m1.data()]));
    let prior = PriorFeatures::from_lines(prior_lines.to_vec(), prior_volume.dims()).stage("rasterize_prior")?;
    track_rest(rec, [m0, m1], &prior, noisy, geom, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Every frame uses the starting frame as its prior.
    StartFramePrior,
    /// Frame k uses the estimates of frame k - 1.
    ChainedPrior,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::StartFramePrior => "start_frame_prior",
            Strategy::ChainedPrior => "chained_prior",
        }
    }
}

/// One frame of a sequence as the tracker sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFrame {
    pub noisy: [ScalarImage; 2],
    /// Ground truth, used only for metrics.
    pub truth_lines: Vec<Polyline3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    /// Chamfer distance of the feature volume to the rasterised truth, voxels.
    pub chamfer: Option<f64>,
    /// Mean over views of the feature-map AUC against projected truth masks.
    pub auc: Option<f64>,
    /// Mean over views of the 2D line-position error, pixels.
    pub line_error_2d: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    pub metrics: FrameMetrics,
    /// `None` when the frame failed or estimates were not retained.
    pub estimate: Option<FrameEstimate>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingRun {
    pub start_volume: ScalarVolume,
    pub start_lines: Vec<Polyline3>,
    /// Index 0 is the starting frame itself and is not tracked.
    pub frames: Vec<SequenceFrame>,
    pub strategy: Strategy,
    /// Filled by [`track_sequence`]: one entry per tracked frame (1..).
    pub outcomes: Vec<FrameOutcome>,
}

impl TrackingRun {
    pub fn new(
        start_volume: ScalarVolume,
        start_lines: Vec<Polyline3>,
        frames: Vec<SequenceFrame>,
        strategy: Strategy,
    ) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "a tracking run needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        if start_lines.is_empty() {
            return Err(Error::InvalidParameter("a tracking run needs prior lines".into()));
        }
        Ok(Self {
            start_volume,
            start_lines,
            frames,
            strategy,
            outcomes: Vec::new(),
        })
    }
}

/// Metrics of an estimate against the frame's ground truth.
pub fn frame_metrics(
    frame: usize,
    est: &FrameEstimate,
    truth_lines: &[Polyline3],
    geom: &StereoGeometry,
) -> Result<FrameMetrics> {
    let dims = est.feature_volume.dims();
    let truth = rasterize_polylines(truth_lines, dims)?;
    let chamfer = volume_chamfer(&est.feature_volume, &truth)?;
    let mut auc = 0.0;
    let mut err = 0.0;
    for v in 0..2 {
        let mask = line_mask_2d(truth_lines, geom, v, dims)?;
        auc += roc_curve_images(&est.features[v].response, &mask)?.auc / 2.0;
        err += line_position_error_2d(&est.features[v].binary(), &mask)? / 2.0;
    }
    Ok(FrameMetrics {
        frame,
        chamfer: Some(chamfer),
        auc: Some(auc),
        line_error_2d: Some(err),
        error: None,
    })
}

/// Track frames 1.. of `run`. Frame failures are recorded and the run goes
/// on; a chained run then keeps using the last good estimate. `sink` sees
/// each successful estimate before it is dropped (unless `retain`).
pub fn track_sequence_with(
    mut run: TrackingRun,
    geom: &StereoGeometry,
    cfg: &PipelineConfig,
    retain: bool,
    mut sink: impl FnMut(usize, &FrameEstimate) -> Result<()>,
) -> Result<TrackingRun> {
    cfg.validate()?;
    let dims = run.start_volume.dims();
    let start_moving = [
        forward_project(&run.start_volume, geom, 0).stage("forward_project")?,
        forward_project(&run.start_volume, geom, 1).stage("forward_project")?,
    ];
    let start_prior = PriorFeatures::from_lines(run.start_lines.clone(), dims).stage("rasterize_prior")?;
    let mut prior_moving = start_moving.clone();
    let mut prior = start_prior.clone();
    let mut outcomes = Vec::new();

    for (k, frame) in run.frames.iter().enumerate().skip(1) {
        let (moving, frame_prior) = match run.strategy {
            Strategy::StartFramePrior => (start_moving.clone(), &start_prior),
            Strategy::ChainedPrior => (prior_moving.clone(), &prior),
        };
        let result = track_from_moving(moving, frame_prior, [&frame.noisy[0], &frame.noisy[1]], geom, cfg)
            .and_then(|est| {
                let m = frame_metrics(k, &est, &frame.truth_lines, geom).stage("metrics")?;
                Ok((est, m))
            });
        match result {
            Ok((est, metrics)) => {
                sink(k, &est)?;
                if run.strategy == Strategy::ChainedPrior {
                    prior_moving = est.moved.clone();
                    prior = PriorFeatures::from_estimate(&est, prior.lines.len())?;
                }
                let diagnostics = est.diagnostics.clone();
                outcomes.push(FrameOutcome {
                    metrics,
                    estimate: retain.then_some(est),
                    diagnostics,
                });
            }
            Err(e) => outcomes.push(FrameOutcome {
                metrics: FrameMetrics {
                    frame: k,
                    chamfer: None,
                    auc: None,
                    line_error_2d: None,
                    error: Some(e.to_string()),
                },
                estimate: None,
                diagnostics: Diagnostics::default(),
            }),
        }
    }
    run.outcomes = outcomes;
    Ok(run)
}

pub fn track_sequence(run: TrackingRun, geom: &StereoGeometry, cfg: &PipelineConfig) -> Result<TrackingRun> {
    track_sequence_with(run, geom, cfg, true, |_, _| Ok(()))
}

/// Per-frame metrics as CSV.
pub fn metrics_csv(outcomes: &[FrameOutcome]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut s = String::from("frame,chamfer,auc,line_error_2d,error\n");
    for o in outcomes {
        let m = &o.metrics;
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            m.frame,
            opt(m.chamfer),
            opt(m.auc),
            opt(m.line_error_2d),
            m.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        ));
    }
    s
}

/// Per-frame stage timings as CSV (kept apart from the checksummed metrics).
pub fn timings_csv(outcomes: &[FrameOutcome]) -> String {
    let mut s = format!("frame,{}\n", STAGES.join(","));
    for o in outcomes {
        let cols: Vec<String> = STAGES
            .iter()
            .map(|st| {
                o.diagnostics
                    .stages
                    .iter()
                    .find(|r| r.stage == *st)
                    .map(|r| format!("{:.4}", r.seconds))
                    .unwrap_or_default()
            })
            .collect();
        s.push_str(&format!("{},{}\n", o.metrics.frame, cols.join(",")));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transport_inverts_a_constant_shift() {
        let psi = DisplacementField3::constant([16; 3], [1.5, -1.0, 0.0]);
        let q = transport_points(&[[8.0, 8.0, 8.0]], &psi);
        assert!(norm(sub(q[0], [6.5, 9.0, 8.0])) < 1e-9);
        let l = Polyline3::segment([8.0, 8.0, 2.0], [8.0, 8.0, 12.0], 1.0).unwrap();
        let t = transport_polyline(&l, &psi).unwrap();
        let warped = warp_volume(&rasterize_polylines(&[l], [16; 3]).unwrap(), &psi).unwrap();
        for p in t.densify(0.5) {
            let v = crate::grid::sample_trilinear(&warped, p).unwrap();
            assert!(v > 0.5, "{p:?} {v}");
        }
    }

    #[test]
    fn run_needs_two_frames() {
        let l = Polyline3::segment([1.0, 1.0, 1.0], [1.0, 1.0, 5.0], 1.0).unwrap();
        let r = TrackingRun::new(ScalarVolume::zeros([8; 3]), vec![l], Vec::new(), Strategy::ChainedPrior);
        assert!(r.is_err());
    }

    #[test]
    fn csv_headers() {
        assert_eq!(metrics_csv(&[]), "frame,chamfer,auc,line_error_2d,error\n");
        assert!(timings_csv(&[]).starts_with("frame,forward_project,register_2d"));
    }
}
