use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detect::DetectionThresholds;
use crate::forge::OptimizerConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Forge,
    Sweep,
    Ablate,
    Detect,
    Calibrate,
    Gradcheck,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Forge => "forge",
            Self::Sweep => "sweep",
            Self::Ablate => "ablate",
            Self::Detect => "detect",
            Self::Calibrate => "calibrate",
            Self::Gradcheck => "gradcheck",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSpec {
    pub images: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<DetectionThresholds>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thresholds_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSpec {
    /// CSV with columns `image_path,label,prompt_set_id`; image paths are
    /// relative to the manifest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic_samples: Option<usize>,
    pub sigma: f64,
}

impl Default for CalibrateSpec {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic_samples: None,
            sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSpec {
    pub images: usize,
    pub eps: f64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self { images: 20, eps: 1e-3 }
    }
}

/// One experiment, as read from a JSON file and/or CLI flags.
///
/// Relative paths are resolved against the directory of the config file,
/// or the working directory for configs built in code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Option<ExperimentKind>,
    /// Backend descriptor JSON; the built-in toy encoder when absent.
    pub backend: Option<PathBuf>,
    pub prompts: Vec<String>,
    pub prompt_file: Option<PathBuf>,
    pub init_image: Option<PathBuf>,
    pub optimizer: OptimizerConfig,
    pub extended_stage: bool,
    /// One image per prompt for the master check.
    pub stand_ins: Vec<PathBuf>,
    /// Use uniform-noise stand-ins drawn from the seed instead of files.
    pub random_stand_ins: bool,
    pub sweep: SweepSpec,
    pub detect: DetectSpec,
    pub calibrate: CalibrateSpec,
    pub gradcheck: GradcheckSpec,
    pub workers: usize,
    pub out: PathBuf,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: None,
            backend: None,
            prompts: Vec::new(),
            prompt_file: None,
            init_image: None,
            optimizer: OptimizerConfig::default(),
            extended_stage: false,
            stand_ins: Vec::new(),
            random_stand_ins: false,
            sweep: SweepSpec::default(),
            detect: DetectSpec::default(),
            calibrate: CalibrateSpec::default(),
            gradcheck: GradcheckSpec::default(),
            workers: 1,
            out: super::default_out(),
            base_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("config: {e}")]))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    /// Copy with every path resolved, so it can be rerun from anywhere.
    pub fn frozen(&self) -> Self {
        let r = |p: &PathBuf| self.resolve(p);
        let mut c = self.clone();
        c.backend = self.backend.as_ref().map(r);
        c.prompt_file = self.prompt_file.as_ref().map(r);
        c.init_image = self.init_image.as_ref().map(r);
        c.stand_ins = self.stand_ins.iter().map(r).collect();
        c.detect.images = self.detect.images.iter().map(r).collect();
        c.detect.thresholds_file = self.detect.thresholds_file.as_ref().map(r);
        c.calibrate.manifest = self.calibrate.manifest.as_ref().map(r);
        c.out = r(&self.out);
        c.base_dir = None;
        c
    }

    /// Resolve a config-relative path.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }
}
