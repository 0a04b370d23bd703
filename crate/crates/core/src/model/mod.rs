//! The recognition network: two-path conv backbone, per-AU sigmoid attention
//! heads, per-AU detector perceptrons, two GCN layers over the AU graph,
//! sumpool fusion, and the class head.

mod forward;
mod params;

pub use forward::{
    aggregate_and_fuse, attention_au_features, au_detect, backbone_forward, classify,
    gcn_forward, model_forward, ForwardOutput,
};
pub use params::{init_params, load_checkpoint, save_checkpoint, ModelParams, ParamGroup};

use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Gating nonlinearity of the attention heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Sigmoid,
    /// Ablation: softmax across the feature positions of each head's logits.
    Softmax,
}

impl AttentionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionKind::Sigmoid => "sigmoid",
            AttentionKind::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sigmoid" => Some(AttentionKind::Sigmoid),
            "softmax" => Some(AttentionKind::Softmax),
            _ => None,
        }
    }
}

/// How the sumpooled AU feature and the relational feature are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Sum,
    /// Ablation: concatenation, doubling the classifier input width.
    Concat,
}

impl FusionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionKind::Sum => "sum",
            FusionKind::Concat => "concat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sum" => Some(FusionKind::Sum),
            "concat" => Some(FusionKind::Concat),
            _ => None,
        }
    }
}

/// Architecture hyperparameters. `au_count` must match the graph in use.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Global facial feature width d.
    pub feature_dim: usize,
    pub au_count: usize,
    /// First GCN layer width d1.
    pub gcn_hidden: usize,
    /// Second GCN layer width d2; also the fused-feature width under sum
    /// fusion.
    pub gcn_out: usize,
    pub num_classes: usize,
    /// Channel widths of the two conv stages in each backbone path.
    pub conv_channels: (usize, usize),
    /// Hidden width of each AU detector perceptron.
    pub detector_hidden: usize,
    pub attention: AttentionKind,
    pub fusion: FusionKind,
    /// Propagate through D^{-1/2} G D^{-1/2} instead of raw G. Off by
    /// default; the propagation rule uses the raw matrix.
    pub normalize_adjacency: bool,
}

impl ModelConfig {
    /// Shipped defaults: 28x28 input, d = 1024, d2 = 64.
    pub fn default_for(au_count: usize) -> Self {
        ModelConfig {
            input_height: 28,
            input_width: 28,
            feature_dim: 1024,
            au_count,
            gcn_hidden: 256,
            gcn_out: 64,
            num_classes: 5,
            conv_channels: (8, 16),
            detector_hidden: 64,
            attention: AttentionKind::Sigmoid,
            fusion: FusionKind::Sum,
            normalize_adjacency: false,
        }
    }

    /// Small configuration for gradient checking: 8x8 input, d = 16, K = 3,
    /// d1 = 8, d2 = 4.
    pub fn tiny() -> Self {
        ModelConfig {
            input_height: 8,
            input_width: 8,
            feature_dim: 16,
            au_count: 3,
            gcn_hidden: 8,
            gcn_out: 4,
            num_classes: 5,
            conv_channels: (2, 4),
            detector_hidden: 8,
            attention: AttentionKind::Sigmoid,
            fusion: FusionKind::Sum,
            normalize_adjacency: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            self.input_height,
            self.input_width,
            self.feature_dim,
            self.au_count,
            self.gcn_hidden,
            self.gcn_out,
            self.conv_channels.0,
            self.conv_channels.1,
            self.detector_hidden,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(ModelError::BadConfig("zero-sized dimension".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::BadConfig("need at least two classes".into()));
        }
        if self.input_height / 4 == 0 || self.input_width / 4 == 0 {
            return Err(ModelError::BadConfig(
                "input too small for two pooling stages".into(),
            ));
        }
        Ok(())
    }

    /// Spatial extent after the two stride-2 pools (3x3 convs keep extent).
    pub fn pooled_extent(&self) -> (usize, usize) {
        (self.input_height / 2 / 2, self.input_width / 2 / 2)
    }

    /// Flattened width of one backbone path.
    pub fn path_flat_dim(&self) -> usize {
        let (ph, pw) = self.pooled_extent();
        self.conv_channels.1 * ph * pw
    }

    /// Width of the fused feature entering the classifier.
    pub fn fused_dim(&self) -> usize {
        match self.fusion {
            FusionKind::Sum => self.gcn_out,
            FusionKind::Concat => 2 * self.gcn_out,
        }
    }
}
