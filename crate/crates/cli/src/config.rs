//! Experiment configuration read from TOML.

use std::path::Path;

use benthos_core::substrate::SubstrateHyper;
use benthos_core::{DetectorConfig, PipelineParams, SceneConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetProfile {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DatasetProfile {
    fn default() -> Self {
        Self { train: 3, val: 1, test: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingProfile {
    /// Every n-th frame carrying keyframed boxes becomes a detector sample.
    pub frame_stride: u32,
    /// Every n-th frame of a training video becomes a substrate sample.
    pub substrate_frame_stride: u32,
}

impl Default for TrainingProfile {
    fn default() -> Self {
        Self { frame_stride: 30, substrate_frame_stride: 15 }
    }
}

/// Value lists to cross. Empty lists fall back to the single configured value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub lr: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub rho: Vec<f64>,
    pub tau: Vec<f64>,
    pub gamma: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub repeat: usize,
    pub dataset: DatasetProfile,
    pub scene: SceneConfig,
    pub detector: DetectorConfig,
    pub training: TrainingProfile,
    pub pipeline: PipelineParams,
    pub substrate: SubstrateHyper,
    pub sweep: SweepGrid,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            repeat: 4,
            dataset: DatasetProfile::default(),
            scene: SceneConfig::default(),
            detector: DetectorConfig::default(),
            training: TrainingProfile::default(),
            pipeline: PipelineParams::default(),
            substrate: SubstrateHyper::default(),
            sweep: SweepGrid::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: Self = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                toml::from_str(&text)?
            }
            None => Self::default(),
        };
        if cfg.repeat == 0 {
            return Err(CliError::Usage("repeat must be at least 1".into()));
        }
        cfg.scene.validate()?;
        Ok(cfg)
    }

    /// Detector settings sized to the given frames.
    pub fn detector_for(&self, width: u32, height: u32, seed: u64) -> DetectorConfig {
        DetectorConfig { image_width: width as usize, image_height: height as usize, seed, ..self.detector.clone() }
    }

    pub fn grid(&self) -> ResolvedGrid {
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        ResolvedGrid {
            lr: or(&self.sweep.lr, self.detector.lr),
            alpha: or(&self.sweep.alpha, self.detector.alpha),
            beta: or(&self.sweep.beta, self.detector.beta),
            rho: or(&self.sweep.rho, self.detector.rho),
            tau: or(&self.sweep.tau, self.pipeline.tau),
            gamma: if self.sweep.gamma.is_empty() { vec![self.pipeline.gamma] } else { self.sweep.gamma.clone() },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedGrid {
    pub lr: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub rho: Vec<f64>,
    pub tau: Vec<f64>,
    pub gamma: Vec<usize>,
}

/// Detector-side coordinates of one sweep row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorPoint {
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
}

impl ResolvedGrid {
    pub fn detector_points(&self) -> Vec<DetectorPoint> {
        let mut out = Vec::new();
        for &lr in &self.lr {
            for &alpha in &self.alpha {
                for &beta in &self.beta {
                    for &rho in &self.rho {
                        out.push(DetectorPoint { lr, alpha, beta, rho });
                    }
                }
            }
        }
        out
    }

    pub fn tracking_points(&self) -> Vec<(f64, usize)> {
        self.tau.iter().flat_map(|&t| self.gamma.iter().map(move |&g| (t, g))).collect()
    }
}
