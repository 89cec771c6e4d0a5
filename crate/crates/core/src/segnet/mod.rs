//! The full segmentation network: configuration, parameters, raster and
//! weight files, the memory-budgeted forward pipeline, loss and metrics.

mod config;
mod metrics;
mod params;
mod pipeline;
mod raster;
mod synth;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{NetworkConfig, DEFAULT_BUDGET};
pub use metrics::{confusion, miou, MiouReport};
pub use params::{load_weights, save_weights, NetworkParams};
pub use pipeline::{
    backbone_forward, ecr_bytes, holistic_forward, minimal_budget, run_stage, SegmentationOutput,
};
pub use raster::{
    load_image, load_mask, save_image, save_mask, DType, RasterHeader, RasterKind,
};
pub use synth::synth;

use crate::bae::{total_loss, BaeError, LabelMask};
use crate::ecr::EcrError;
use crate::lrd::LrdError;
use crate::offload::OffloadError;
use crate::tensor::{bilinear_resize, TensorError};

#[derive(Debug, Error)]
pub enum SegnetError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("raster: {0}")]
    Raster(String),
    #[error("weights: {0}")]
    Weights(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Offload(#[from] OffloadError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lrd(#[from] LrdError),
    #[error(transparent)]
    Ecr(#[from] EcrError),
    #[error(transparent)]
    Bae(#[from] BaeError),
}

impl SegnetError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        SegnetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub const CLASS_MAP_FILE: &str = "class_map.raster";
pub const STATS_FILE: &str = "stats.json";

/// Writes the class map raster and the stats JSON into `dir`, creating it if
/// needed.
pub fn write_outputs(output: &SegmentationOutput, dir: &Path) -> Result<(), SegnetError> {
    std::fs::create_dir_all(dir).map_err(|e| SegnetError::io(dir, e))?;
    save_mask(&dir.join(CLASS_MAP_FILE), &output.class_map)?;
    let stats = dir.join(STATS_FILE);
    let mut json = serde_json::to_string_pretty(&output.stats)?;
    json.push('\n');
    std::fs::write(&stats, json).map_err(|e| SegnetError::io(&stats, e))
}

/// Main plus weighted auxiliary loss, with both logit maps upsampled to the
/// mask resolution first.
pub fn compute_loss(
    output: &SegmentationOutput,
    mask: &LabelMask,
    config: &NetworkConfig,
) -> Result<f64, SegnetError> {
    let (h, w) = (mask.height, mask.width);
    let mut mask = mask.clone();
    mask.ignore_id = config.ignore_id;
    let seg = bilinear_resize(&output.seg_logits, h, w)?;
    let aux = bilinear_resize(&output.aux_logits, h, w)?;
    Ok(total_loss(&seg, &aux, &mask, config.lambda, config.sobel_ksize)?)
}
