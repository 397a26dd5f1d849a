//! TOML pipeline configuration with one section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::SdConvention;
use crate::image_io::Scale;
use crate::morphometry::HexNeighbors;
use crate::postprocess::{DecodeParams, CELL_THRESHOLD, MIN_REGION_PX};
use crate::synth::{Split, SynthConfig};
use crate::unet::{TrainConfig, UNetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory (synth output, training and evaluation input).
    pub data_root: PathBuf,
    pub weights: PathBuf,
    pub output_dir: PathBuf,
    /// Browser UI assets served at `/` when set.
    pub static_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_root: "data".into(),
            weights: "out/weights.bin".into(),
            output_dir: "out".into(),
            static_dir: None,
        }
    }
}

/// Pixel size overrides in micrometres.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleOverride {
    pub x_um: Option<f64>,
    pub y_um: Option<f64>,
}

impl ScaleOverride {
    /// `base` with any configured component replaced.
    pub fn apply(&self, base: Scale) -> Result<Scale> {
        Scale::new(self.x_um.unwrap_or(base.x_um), self.y_um.unwrap_or(base.y_um))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    #[serde(flatten)]
    pub image: SynthConfig,
    pub split: Split,
    /// Cycle images through the mild / moderate / severe guttae bands.
    pub stratified: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            image: SynthConfig::default(),
            split: Split::default(),
            stratified: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessSection {
    pub cell_threshold: f32,
    pub min_region_px: usize,
}

impl Default for PostprocessSection {
    fn default() -> Self {
        PostprocessSection {
            cell_threshold: CELL_THRESHOLD,
            min_region_px: MIN_REGION_PX,
        }
    }
}

impl PostprocessSection {
    pub fn params(&self) -> DecodeParams {
        DecodeParams {
            cell_threshold: self.cell_threshold,
            min_region_px: self.min_region_px,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MorphometrySection {
    pub hex_neighbors: HexNeighbors,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub sd: SdConvention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub host: String,
    pub port: u16,
    /// Concurrent inference jobs.
    pub workers: usize,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection {
            host: "127.0.0.1".into(),
            port: 8080,
            workers: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub scale: ScaleOverride,
    pub synth: SynthSection,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub postprocess: PostprocessSection,
    pub morphometry: MorphometrySection,
    pub evaluation: EvaluationSection,
    pub service: ServiceSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at_path(path))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            config.paths.resolve_against(dir);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.postprocess.cell_threshold > 0.0 && self.postprocess.cell_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "postprocess.cell_threshold must be > 0, got {}",
                self.postprocess.cell_threshold
            )));
        }
        self.scale.apply(Scale::default())?;
        self.synth.image.validate()?;
        self.unet.validate()?;
        self.train.validate()?;
        if self.service.workers == 0 {
            return Err(Error::Config("service.workers must be >= 1".into()));
        }
        Ok(())
    }

    /// Applies a seed to every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.image.seed = seed;
        self.unet.seed = seed;
        self.train.seed = seed;
        self
    }
}

impl Paths {
    fn resolve_against(&mut self, dir: &Path) {
        for p in [&mut self.data_root, &mut self.weights, &mut self.output_dir] {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        if let Some(p) = self.static_dir.as_mut().filter(|p| p.is_relative()) {
            *p = dir.join(&*p);
        }
    }
}
