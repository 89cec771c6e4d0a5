use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SegnetError;
use crate::bae::{DEFAULT_LAMBDA, DEFAULT_SOBEL_KSIZE, IGNORE_ID};
use crate::ecr::AttentionMode;

pub const DEFAULT_BUDGET: usize = 256 << 20;

/// Network and run settings. Every field has a default, so a JSON config
/// only needs the fields it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_bands: usize,
    pub num_classes: usize,
    /// Widths of the three stride-2 backbone stages.
    pub backbone_channels: Vec<usize>,
    pub output_stride: usize,
    /// LRD output width, also the width ECR operates on.
    pub d: usize,
    /// LRD reduced width.
    pub k: usize,
    /// Hard-region size in percent of feature pixels.
    pub a: f64,
    pub lambda: f64,
    pub seed: u64,
    pub arena_budget: usize,
    pub attention_mode: AttentionMode,
    pub attn_dim: usize,
    pub sobel_ksize: usize,
    pub ignore_id: u8,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_bands: 4,
            num_classes: 24,
            backbone_channels: vec![32, 64, 128],
            output_stride: 8,
            d: 256,
            k: 256,
            a: 10.0,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            arena_budget: DEFAULT_BUDGET,
            attention_mode: AttentionMode::Linear,
            attn_dim: 64,
            sobel_ksize: DEFAULT_SOBEL_KSIZE,
            ignore_id: IGNORE_ID,
        }
    }
}

impl NetworkConfig {
    pub fn load(path: &Path) -> Result<Self, SegnetError> {
        let text = std::fs::read_to_string(path).map_err(|e| SegnetError::io(path, e))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| SegnetError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), SegnetError> {
        let fail = |m: String| Err(SegnetError::Config(m));
        if !(3..=4).contains(&self.in_bands) {
            return fail(format!("in_bands must be 3 or 4, got {}", self.in_bands));
        }
        if self.num_classes < 2 || self.num_classes > usize::from(self.ignore_id) {
            return fail(format!(
                "num_classes must lie in 2..={} (below ignore_id), got {}",
                self.ignore_id, self.num_classes
            ));
        }
        if self.output_stride != 8 {
            return fail(format!("output_stride must be 8, got {}", self.output_stride));
        }
        if self.backbone_channels.len() != 3 || self.backbone_channels.contains(&0) {
            return fail(format!(
                "backbone_channels must list three nonzero widths, got {:?}",
                self.backbone_channels
            ));
        }
        if self.d == 0 || self.k == 0 || self.attn_dim == 0 {
            return fail("d, k and attn_dim must be nonzero".into());
        }
        if !(self.a > 0.0 && self.a <= 100.0) {
            return fail(format!("a must lie in (0, 100], got {}", self.a));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return fail(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if self.sobel_ksize != 3 && self.sobel_ksize != 5 {
            return fail(format!("sobel_ksize must be 3 or 5, got {}", self.sobel_ksize));
        }
        if self.arena_budget == 0 {
            return fail("arena_budget must be positive".into());
        }
        Ok(())
    }

    /// Feature channels produced by the backbone.
    pub fn feature_channels(&self) -> usize {
        self.backbone_channels[2]
    }
}
