use serde::{Deserialize, Serialize};

use super::kernels::Dims;
use super::ModelError;
use crate::types::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpatialRank {
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "2d")]
    TwoD,
}

/// Architecture hyperparameters of the late-fusion network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub modalities: Vec<Modality>,
    pub encoder_channels: Vec<usize>,
    pub embedding_dim: usize,
    pub fused_dim: usize,
    pub head_hidden: usize,
    pub dropout_p: f64,
    pub n_classes: usize,
    pub spatial_rank: SpatialRank,
    pub conv_kernel: usize,
    pub pool_kernel: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modalities: Modality::ALL.to_vec(),
            encoder_channels: vec![16, 32, 64],
            embedding_dim: 64,
            fused_dim: 256,
            head_hidden: 128,
            dropout_p: 0.30,
            n_classes: 2,
            spatial_rank: SpatialRank::ThreeD,
            conv_kernel: 3,
            pool_kernel: 2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// Single-channel 2D variant with a four-class head, used by the slice
    /// diagnostic protocols.
    pub fn slice_2d() -> Self {
        ModelConfig {
            modalities: vec![Modality::T1],
            fused_dim: 64,
            n_classes: 4,
            spatial_rank: SpatialRank::TwoD,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.modalities.is_empty() {
            return bad("at least one modality is required".into());
        }
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return bad("modalities must be distinct".into());
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return bad(format!("encoder_channels must be non-empty and positive, got {:?}", self.encoder_channels));
        }
        for (name, v) in [
            ("embedding_dim", self.embedding_dim),
            ("fused_dim", self.fused_dim),
            ("head_hidden", self.head_hidden),
            ("conv_kernel", self.conv_kernel),
            ("pool_kernel", self.pool_kernel),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel must be odd for same padding, got {}", self.conv_kernel));
        }
        if *self.encoder_channels.last().unwrap() != self.embedding_dim {
            return bad(format!(
                "embedding_dim {} must equal the last encoder channel count {}",
                self.embedding_dim,
                self.encoder_channels.last().unwrap()
            ));
        }
        if self.embedding_dim * self.modalities.len() != self.fused_dim {
            return bad(format!(
                "fused_dim {} must equal embedding_dim {} x {} modalities",
                self.fused_dim,
                self.embedding_dim,
                self.modalities.len()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_eps must be positive and bn_momentum in [0, 1]".into());
        }
        Ok(())
    }

    pub fn kernel_dims(&self) -> Dims {
        match self.spatial_rank {
            SpatialRank::ThreeD => [self.conv_kernel; 3],
            SpatialRank::TwoD => [self.conv_kernel, self.conv_kernel, 1],
        }
    }

    pub fn pool_dims(&self) -> Dims {
        match self.spatial_rank {
            SpatialRank::ThreeD => [self.pool_kernel; 3],
            SpatialRank::TwoD => [self.pool_kernel, self.pool_kernel, 1],
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Smallest accepted extent along each pooled axis: every pooling stage
    /// must leave at least two voxels.
    pub fn min_spatial_extent(&self) -> usize {
        2 * self.pool_kernel.pow(self.n_blocks().saturating_sub(1) as u32)
    }
}
