//! Dataset generation, sequence tracking and evaluation on disk.
//!
//! Layout under the output root:
//!
//! ```text
//! dataset/manifest.json  config.toml  frame_NNN/{volume,proj_vV,clean_vV,noisy_vV}.{json,raw} lines.csv
//! run/manifest.json      config.toml  <strategy>/{metrics.csv,timings.csv,diagnostics.json,frame_NNN/...}
//! ```
//!
//! Every artifact is listed in its directory's manifest with a SHA-256.
//! Timing files are listed without one since wall time is not reproducible.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Thresholds};
use crate::error::{Error, Result};
use crate::grid::ScalarImage;
use crate::io::{mip_y, overlay, read_image, read_polylines, read_volume, sha256_file, write_image, write_pgm,
    write_polylines, write_volume};
use crate::phantom::{add_poisson_noise, apply_deformation_sequence, gen_start_volume};
use crate::projector::forward_project;
use crate::tracking::{metrics_csv, timings_csv, track_sequence_with, FrameMetrics, SequenceFrame, Strategy,
    TrackingRun, STAGES};

pub const DATASET_DIR: &str = "dataset";
pub const RUN_DIR: &str = "run";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest, `/`-separated.
    pub path: String,
    /// `None` for volatile artifacts (timings).
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `dataset` or `run`.
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub frames: usize,
    /// Run manifests only: the strategies tracked and the dataset's config
    /// hash.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub strategies: Vec<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Check that every listed artifact exists and matches its checksum.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let mut bad = Vec::new();
        for a in &self.artifacts {
            let p = dir.join(&a.path);
            match (&a.sha256, p.exists()) {
                (_, false) => bad.push(format!("missing {}", a.path)),
                (Some(want), true) if sha256_file(&p)? != *want => bad.push(format!("checksum mismatch {}", a.path)),
                _ => {}
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(bad.join("; ")))
        }
    }

    /// Combined hash of all stable artifacts.
    pub fn digest(&self) -> String {
        let mut s = String::new();
        for a in &self.artifacts {
            if let Some(h) = &a.sha256 {
                s.push_str(&format!("{} {}\n", a.path, h));
            }
        }
        crate::io::sha256_hex(s.as_bytes())
    }
}

struct Collector {
    root: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Collector {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn rel(&self, p: &Path) -> String {
        let r = p.strip_prefix(&self.root).unwrap_or(p);
        r.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
    }

    fn add(&mut self, files: impl IntoIterator<Item = PathBuf>) -> Result<()> {
        for f in files {
            let sha256 = Some(sha256_file(&f)?);
            self.artifacts.push(Artifact { path: self.rel(&f), sha256 });
        }
        Ok(())
    }

    fn add_volatile(&mut self, f: PathBuf) {
        self.artifacts.push(Artifact {
            path: self.rel(&f),
            sha256: None,
        });
    }

    fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.root.join(rel);
        if let Some(d) = p.parent() {
            fs::create_dir_all(d)?;
        }
        fs::write(&p, text)?;
        self.add([p])
    }

    fn finish(mut self, mut manifest: Manifest) -> Result<Manifest> {
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        manifest.artifacts = self.artifacts;
        fs::write(self.root.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }
}

fn frame_dir(k: usize) -> String {
    format!("frame_{k:03}")
}

fn base_seeds(cfg: &ExperimentConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("master".to_string(), cfg.seed),
        ("phantom".to_string(), cfg.phantom_seed()),
        ("deformation".to_string(), cfg.deformation_seed()),
    ])
}

/// Generate the phantom sequence with exact, clean and noisy projections.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut c = Collector::new(out)?;
    c.text("config.toml", &cfg.to_toml())?;
    let start = gen_start_volume(&cfg.phantom_spec())?;
    let frames = apply_deformation_sequence(&start, &cfg.deformation_spec())?;
    let mut seeds = base_seeds(cfg);
    let n = &cfg.noise;
    for (k, f) in frames.iter().enumerate() {
        let dir = out.join(frame_dir(k));
        c.add(write_volume(&dir.join("volume"), &f.volume)?)?;
        c.add([write_polylines(&dir.join("lines.csv"), &f.lines)?])?;
        for v in 0..2 {
            let exact = forward_project(&f.volume, &cfg.geometry, v)?;
            c.add(write_image(&dir.join(format!("proj_v{v}")), &exact)?)?;
            for (kind, scale) in [("clean", n.clean_scale), ("noisy", n.noisy_scale)] {
                let seed = cfg.noise_seed(kind, k, v);
                seeds.insert(format!("noise/{kind}/{k}/{v}"), seed);
                let img = add_poisson_noise(&exact, scale * n.exposure, seed)?;
                c.add(write_image(&dir.join(format!("{kind}_v{v}")), &img)?)?;
                if cfg.output.overlays && kind == "noisy" {
                    c.add([write_pgm(&dir.join(format!("{kind}_v{v}.pgm")), &img)?])?;
                }
            }
        }
    }
    c.finish(Manifest {
        kind: "dataset".into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        seeds,
        frames: frames.len(),
        strategies: Vec::new(),
        dataset_hash: None,
        artifacts: Vec::new(),
    })
}

/// A generated dataset read back for tracking.
pub struct Dataset {
    pub manifest: Manifest,
    pub start_volume: crate::grid::ScalarVolume,
    pub start_lines: Vec<crate::polyline::Polyline3>,
    pub frames: Vec<SequenceFrame>,
}

pub fn load_dataset(dir: &Path, line_radius: f64) -> Result<Dataset> {
    let manifest = Manifest::read(dir)?;
    if manifest.kind != "dataset" {
        return Err(Error::Format(format!("{}: not a dataset manifest", dir.display())));
    }
    manifest.verify(dir)?;
    let mut frames = Vec::with_capacity(manifest.frames);
    for k in 0..manifest.frames {
        let d = dir.join(frame_dir(k));
        frames.push(SequenceFrame {
            noisy: [read_image(&d.join("noisy_v0.json"))?, read_image(&d.join("noisy_v1.json"))?],
            truth_lines: read_polylines(&d.join("lines.csv"), line_radius)?,
        });
    }
    let d0 = dir.join(frame_dir(0));
    Ok(Dataset {
        start_volume: read_volume(&d0.join("volume.json"))?,
        start_lines: read_polylines(&d0.join("lines.csv"), line_radius)?,
        frames,
        manifest,
    })
}

/// Track the dataset with each configured strategy.
pub fn cmd_track(cfg: &ExperimentConfig, dataset: &Path, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let data = load_dataset(dataset, cfg.phantom.line_radius)?;
    if data.manifest.config_hash != cfg.hash() {
        // Tracking parameters may differ from generation; only the data
        // sections have to agree.
        let gen = ExperimentConfig::from_toml(&fs::read_to_string(dataset.join("config.toml"))?, None)?;
        if gen.phantom != cfg.phantom
            || gen.deformation != cfg.deformation
            || gen.geometry != cfg.geometry
            || gen.noise != cfg.noise
            || gen.seed != cfg.seed
        {
            return Err(Error::Config("dataset was generated with different data sections or seed".into()));
        }
    }
    let pipeline = cfg.pipeline();
    let mut c = Collector::new(out)?;
    c.text("config.toml", &cfg.to_toml())?;
    let strategies = cfg.tracking.strategy.strategies();
    for &strategy in &strategies {
        let sdir = out.join(strategy.name());
        let run = TrackingRun::new(data.start_volume.clone(), data.start_lines.clone(), data.frames.clone(), strategy)?;
        let mut files: Vec<PathBuf> = Vec::new();
        let run = track_sequence_with(run, &cfg.geometry, &pipeline, false, |k, est| {
            let d = sdir.join(frame_dir(k));
            files.extend(write_volume(&d.join("feature_volume"), &est.feature_volume)?);
            files.extend(write_volume(&d.join("evidence"), &est.evidence)?);
            files.push(write_polylines(&d.join("lines.csv"), &est.lines)?);
            files.push(write_polylines(&d.join("tracked_lines.csv"), &est.tracked_lines)?);
            for v in 0..2 {
                files.extend(write_image(&d.join(format!("moved_v{v}")), &est.moved[v])?);
                files.extend(write_image(&d.join(format!("response_v{v}")), &est.features[v].response)?);
                if cfg.output.overlays {
                    let ov = overlay(&est.moved[v], &est.features[v].binary())?;
                    files.push(write_pgm(&d.join(format!("overlay_v{v}.pgm")), &ov)?);
                }
            }
            if cfg.output.overlays {
                files.push(write_pgm(&d.join("feature_mip.pgm"), &mip_y(&est.feature_volume))?);
            }
            Ok(())
        })?;
        c.add(files)?;
        let rel = strategy.name();
        c.text(&format!("{rel}/metrics.csv"), &metrics_csv(&run.outcomes))?;
        let diag: Vec<_> = run
            .outcomes
            .iter()
            .map(|o| {
                let checksums: BTreeMap<&str, &str> = STAGES.iter().filter_map(|s| Some((*s, o.diagnostics.checksum(s)?))).collect();
                serde_json::json!({
                    "frame": o.metrics.frame,
                    "checksums": checksums,
                    "warnings": o.diagnostics.warnings,
                })
            })
            .collect();
        c.text(&format!("{rel}/diagnostics.json"), &(serde_json::to_string_pretty(&diag)? + "\n"))?;
        let tp = sdir.join("timings.csv");
        fs::write(&tp, timings_csv(&run.outcomes))?;
        c.add_volatile(tp);
    }
    c.finish(Manifest {
        kind: "run".into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        seeds: base_seeds(cfg),
        frames: data.frames.len(),
        strategies,
        dataset_hash: Some(data.manifest.digest()),
        artifacts: Vec::new(),
    })
}

/// One row of the evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub strategy: Strategy,
    pub metrics: FrameMetrics,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Human-readable descriptions of violated thresholds.
    pub violations: Vec<String>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::from("strategy,frame,chamfer,auc,line_error_2d,seconds,error\n");
        for r in &self.rows {
            let m = &r.metrics;
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.strategy.name(),
                m.frame,
                opt(m.chamfer),
                opt(m.auc),
                opt(m.line_error_2d),
                opt(r.seconds),
                m.error.as_deref().unwrap_or("")
            ));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>, w: usize| v.map(|x| format!("{x:>w$.3}")).unwrap_or_else(|| format!("{:>w$}", "-"));
        let mut s = format!(
            "{:<18} {:>5} {:>8} {:>7} {:>9} {:>8}\n",
            "strategy", "frame", "chamfer", "auc", "line_err", "seconds"
        );
        for r in &self.rows {
            let m = &r.metrics;
            s.push_str(&format!(
                "{:<18} {:>5} {} {} {} {}\n",
                r.strategy.name(),
                m.frame,
                opt(m.chamfer, 8),
                opt(m.auc, 7),
                opt(m.line_error_2d, 9),
                opt(r.seconds, 8)
            ));
        }
        if self.violations.is_empty() {
            s.push_str("all thresholds met\n");
        } else {
            for v in &self.violations {
                s.push_str(&format!("VIOLATION {v}\n"));
            }
        }
        s
    }
}

fn parse_metrics(text: &str) -> Result<Vec<FrameMetrics>> {
    let mut rows = text.lines();
    if rows.next() != Some("frame,chamfer,auc,line_error_2d,error") {
        return Err(Error::Format("metrics.csv has an unexpected header".into()));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Format(format!("bad number {s:?}")))
        }
    };
    rows.filter(|r| !r.is_empty())
        .map(|r| {
            let f: Vec<&str> = r.splitn(5, ',').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("bad metrics row {r:?}")));
            }
            Ok(FrameMetrics {
                frame: f[0].parse().map_err(|_| Error::Format(format!("bad frame {:?}", f[0])))?,
                chamfer: num(f[1])?,
                auc: num(f[2])?,
                line_error_2d: num(f[3])?,
                error: (!f[4].is_empty()).then(|| f[4].to_string()),
            })
        })
        .collect()
}

fn parse_frame_seconds(text: &str) -> BTreeMap<usize, f64> {
    text.lines()
        .skip(1)
        .filter_map(|r| {
            let mut f = r.split(',');
            let frame = f.next()?.parse().ok()?;
            let total = f.filter_map(|x| x.parse::<f64>().ok()).sum();
            Some((frame, total))
        })
        .collect()
}

/// Check every row against the thresholds.
pub fn check_thresholds(rows: &[ReportRow], t: &Thresholds) -> Vec<String> {
    let mut out = Vec::new();
    for r in rows {
        let m = &r.metrics;
        let at = format!("{} frame {}", r.strategy.name(), m.frame);
        if let Some(e) = &m.error {
            out.push(format!("{at}: failed ({e})"));
            continue;
        }
        let checks = [
            ("chamfer", m.chamfer, t.max_chamfer, true),
            ("auc", m.auc, t.min_auc, false),
            ("line_error_2d", m.line_error_2d, t.max_line_error_2d, true),
            ("seconds", r.seconds, t.max_frame_seconds, true),
        ];
        for (name, value, limit, upper) in checks {
            let (Some(v), Some(l)) = (value, limit) else { continue };
            if (upper && v > l) || (!upper && v < l) {
                let rel = if upper { ">" } else { "<" };
                out.push(format!("{at}: {name} {v:.4} {rel} {l}"));
            }
        }
    }
    out
}

/// Aggregate a run into a report and check it against the run's thresholds.
pub fn cmd_eval(run: &Path) -> Result<Report> {
    let mut missing = Vec::new();
    for f in [MANIFEST, "config.toml"] {
        if !run.join(f).exists() {
            missing.push(f.to_string());
        }
    }
    if !missing.is_empty() {
        return Err(Error::Format(format!("{}: missing {}", run.display(), missing.join(", "))));
    }
    let manifest = Manifest::read(run)?;
    if manifest.kind != "run" {
        return Err(Error::Format(format!("{}: not a run manifest", run.display())));
    }
    manifest.verify(run)?;
    let cfg = ExperimentConfig::from_toml(&fs::read_to_string(run.join("config.toml"))?, None)?;
    let mut rows = Vec::new();
    for &s in &manifest.strategies {
        let dir = run.join(s.name());
        let metrics = parse_metrics(&fs::read_to_string(dir.join("metrics.csv"))?)?;
        let seconds = parse_frame_seconds(&fs::read_to_string(dir.join("timings.csv"))?);
        rows.extend(metrics.into_iter().map(|m| ReportRow {
            strategy: s,
            seconds: seconds.get(&m.frame).copied(),
            metrics: m,
        }));
    }
    let violations = check_thresholds(&rows, &cfg.acceptance);
    Ok(Report { rows, violations })
}

/// Noisy projection pair of one generated frame.
pub fn read_noisy_pair(dataset: &Path, frame: usize) -> Result<[ScalarImage; 2]> {
    let d = dataset.join(frame_dir(frame));
    Ok([read_image(&d.join("noisy_v0.json"))?, read_image(&d.join("noisy_v1.json"))?])
}
