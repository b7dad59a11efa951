use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nalgebra::Vector3;
use psimap::eval::SyntheticSpec;
use psimap::raster::RasterConfig;
use psimap::sogmm::SogmmConfig;
use psimap::trainer::{ModelInit, TrainConfig};
use psimap::{Camera, Error};
use serde::{Deserialize, Serialize};

/// Everything a run depends on. Loaded from TOML, then overridden by flags,
/// then written next to the outputs as `run_config.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    /// Seeds every random stage.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub inputs: Inputs,
    pub sogmm: SogmmSettings,
    pub synth: SyntheticSpec,
    pub init: ModelInit,
    pub train: TrainConfig,
    pub camera: CameraSpec,
    pub render: RenderSettings,
    pub bench: BenchSettings,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            seed: 0,
            out_dir: PathBuf::from("out"),
            inputs: Inputs::default(),
            sogmm: SogmmSettings::default(),
            synth: SyntheticSpec::default(),
            init: ModelInit::default(),
            train: TrainConfig::default(),
            camera: CameraSpec::default(),
            render: RenderSettings::default(),
            bench: BenchSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub ply: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub sogmm: Option<PathBuf>,
    /// Camera JSON; wins over `[camera]`.
    pub camera: Option<PathBuf>,
    /// Dataset view to use as the camera; wins over `[camera]`.
    pub view: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SogmmSettings {
    pub planarity_threshold: f64,
    pub min_points: usize,
    pub max_depth: usize,
    pub em_iters: usize,
}

impl Default for SogmmSettings {
    fn default() -> Self {
        let d = SogmmConfig::default();
        SogmmSettings {
            planarity_threshold: d.planarity_threshold,
            min_points: d.min_points,
            max_depth: d.max_depth,
            em_iters: d.em_iters,
        }
    }
}

impl SogmmSettings {
    pub fn to_config(&self, viewpoints: Vec<Vector3<f64>>) -> SogmmConfig {
        SogmmConfig {
            planarity_threshold: self.planarity_threshold,
            min_points: self.min_points,
            max_depth: self.max_depth,
            em_iters: self.em_iters,
            viewpoints,
        }
    }
}

/// Look-at camera; z is up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        CameraSpec {
            eye: [3.0, 0.0, 1.8],
            target: [0.0, 0.0, 0.3],
            up: [0.0, 0.0, 1.0],
            focal: 90.0,
            width: 96,
            height: 72,
            near: 0.05,
            far: 50.0,
        }
    }
}

impl CameraSpec {
    pub fn to_camera(&self) -> Result<Camera> {
        Ok(Camera::look_at(
            Vector3::from(self.eye),
            Vector3::from(self.target),
            Vector3::from(self.up),
            self.focal,
            self.width,
            self.height,
            self.near,
            self.far,
        )?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    pub raster: RasterConfig,
    /// Also write PNG next to every PPM.
    pub png: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub repetitions: usize,
    pub warmup: usize,
    pub top_k: usize,
    pub raster: RasterConfig,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            repetitions: 10,
            warmup: 1,
            top_k: 16,
            raster: RasterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub tau: f64,
    pub raster: RasterConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            tau: 0.05,
            raster: RasterConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Pushes the master seed into every stage.
    pub fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.init.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
        match value {
            Some(p) if p.exists() => Ok(p),
            Some(p) => Err(Error::InvalidInput(format!("{} does not exist", p.display())).into()),
            None => Err(Error::InvalidInput(format!("missing --{flag}")).into()),
        }
    }
}
