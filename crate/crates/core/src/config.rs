//! Experiment configuration: one TOML document with a section per stage.
//!
//! A file is read on top of a scale preset, so it only needs the keys it
//! changes. Unknown keys anywhere are rejected. Sections do not carry seeds of
//! their own; every random stream derives from the master `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::DetectorConfig;
use crate::io::sha256_hex;
use crate::phantom::{DeformationSpec, PhantomSpec};
use crate::projector::StereoGeometry;
use crate::registration::RegConfig;
use crate::rng::derive_seed;
use crate::tracking::{EvidenceInput, PipelineConfig, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 64^3 volumes, 64^2 detector.
    Desk,
    /// 256^3 volumes, 256^2 detector.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Poisson scale of the near noise-free projections.
    pub clean_scale: f64,
    /// Poisson scale of the projections that are tracked.
    pub noisy_scale: f64,
    /// Photon count multiplier for the detector pixel size. The applied
    /// Poisson scale is `scale * exposure`.
    pub exposure: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyChoice {
    StartFramePrior,
    ChainedPrior,
    Both,
}

impl StrategyChoice {
    pub fn strategies(&self) -> Vec<Strategy> {
        match self {
            StrategyChoice::StartFramePrior => vec![Strategy::StartFramePrior],
            StrategyChoice::ChainedPrior => vec![Strategy::ChainedPrior],
            StrategyChoice::Both => vec![Strategy::StartFramePrior, Strategy::ChainedPrior],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingConfig {
    pub strategy: StrategyChoice,
    pub evidence_input: EvidenceInput,
}

/// Limits checked by `eval`. Absent entries are not checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub max_chamfer: Option<f64>,
    pub min_auc: Option<f64>,
    pub max_line_error_2d: Option<f64>,
    /// Wall time of one tracked frame.
    pub max_frame_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write PGM quick-look images next to the raw artifacts.
    pub overlays: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scale: Scale,
    /// Master seed.
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub deformation: DeformationSpec,
    pub geometry: StereoGeometry,
    pub noise: NoiseConfig,
    pub reg2d: RegConfig,
    pub reg3d: RegConfig,
    pub detector: DetectorConfig,
    pub tracking: TrackingConfig,
    pub acceptance: Thresholds,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn preset(scale: Scale) -> Self {
        let (dims, geometry, exposure, max_frame_seconds) = match scale {
            Scale::Desk => ([64; 3], StereoGeometry::desk(), 64.0, Some(60.0)),
            Scale::Paper => ([256; 3], StereoGeometry::paper(), 1.0, None),
        };
        Self {
            scale,
            seed: 0,
            phantom: PhantomSpec {
                dims,
                ..PhantomSpec::default()
            },
            deformation: DeformationSpec::default(),
            geometry,
            noise: NoiseConfig {
                clean_scale: 10.0,
                noisy_scale: 0.24,
                exposure,
            },
            reg2d: RegConfig::default_2d(),
            reg3d: RegConfig::default_3d(),
            detector: DetectorConfig::default(),
            tracking: TrackingConfig {
                strategy: StrategyChoice::Both,
                evidence_input: EvidenceInput::Binary,
            },
            acceptance: Thresholds {
                max_chamfer: Some(1.0),
                min_auc: Some(0.95),
                max_line_error_2d: Some(3.0),
                max_frame_seconds,
            },
            output: OutputConfig {
                dir: PathBuf::from("out"),
                overlays: true,
            },
        }
    }

    pub fn desk() -> Self {
        Self::preset(Scale::Desk)
    }

    pub fn paper() -> Self {
        Self::preset(Scale::Paper)
    }

    /// Parse `text` over the preset for `scale`. `scale` wins over a `scale`
    /// key in the text; without either the desk preset is used.
    pub fn from_toml(text: &str, scale: Option<Scale>) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let scale = match (scale, file.get("scale")) {
            (Some(s), _) => s,
            (None, Some(v)) => v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("scale: {e}")))?,
            (None, None) => Scale::Desk,
        };
        let mut merged = toml::Table::try_from(Self::preset(scale)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, file);
        merged.insert("scale".into(), toml::Value::try_from(scale).map_err(|e| Error::Config(e.to_string()))?);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from a file (or the preset alone), then apply a seed override.
    pub fn load(path: Option<&Path>, scale: Option<Scale>, seed: Option<u64>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml(&text, scale)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| r.map_err(|e| Error::Config(format!("[{section}] {e}")));
        wrap("phantom", self.phantom.validate())?;
        wrap("deformation", self.deformation.validate(self.phantom.dims))?;
        wrap("geometry", self.geometry.validate())?;
        wrap("reg2d", self.reg2d.validate())?;
        wrap("reg3d", self.reg3d.validate())?;
        wrap("detector", self.detector.validate())?;
        let n = &self.noise;
        for (name, v) in [
            ("clean_scale", n.clean_scale),
            ("noisy_scale", n.noisy_scale),
            ("exposure", n.exposure),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("[noise] {name} must be > 0, got {v}")));
            }
        }
        if self.phantom.seed != 0 || self.deformation.seed != 0 {
            return Err(Error::Config("section seeds must stay 0; every seed derives from the master `seed`".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn phantom_seed(&self) -> u64 {
        derive_seed(self.seed, "phantom")
    }

    pub fn deformation_seed(&self) -> u64 {
        derive_seed(self.seed, "deformation")
    }

    /// Seed of one noise realisation; `kind` is `clean` or `noisy`.
    pub fn noise_seed(&self, kind: &str, frame: usize, view: usize) -> u64 {
        derive_seed(self.seed, &format!("noise/{kind}/{frame}/{view}"))
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            seed: self.phantom_seed(),
            ..self.phantom.clone()
        }
    }

    pub fn deformation_spec(&self) -> DeformationSpec {
        DeformationSpec {
            seed: self.deformation_seed(),
            ..self.deformation.clone()
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            reg2d: self.reg2d.clone(),
            reg3d: self.reg3d.clone(),
            detector: self.detector.clone(),
            evidence_input: self.tracking.evidence_input,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
