use serde::{Deserialize, Serialize};

use crate::error::{HorstError, Result};

/// How queued states are weighted when aggregating values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Temporal weights times per-state spatial maps.
    SpatialTemporal,
    /// Temporal weights only; every pixel of a state shares its weight.
    TemporalOnly,
    /// Spatial maps averaged uniformly over states.
    SpatialOnly,
    /// Unfiltered scaled dot-product attention over whole flattened maps.
    FullTemporal,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::SpatialTemporal,
        AttentionMode::TemporalOnly,
        AttentionMode::SpatialOnly,
        AttentionMode::FullTemporal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::SpatialTemporal => "spatial_temporal",
            AttentionMode::TemporalOnly => "temporal_only",
            AttentionMode::SpatialOnly => "spatial_only",
            AttentionMode::FullTemporal => "full_temporal",
        }
    }

    pub(crate) fn uses_spatial_maps(self) -> bool {
        matches!(
            self,
            AttentionMode::SpatialTemporal | AttentionMode::SpatialOnly
        )
    }
}

/// Which features feed the key and value embeddings before they are queued.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// `[h, a]` feeds both embeddings.
    ConcatToBoth,
    /// `h` alone feeds the value embedding, the raw attention output alone
    /// feeds the key embedding.
    SplitHToV,
}

impl RoutingMode {
    pub fn name(self) -> &'static str {
        match self {
            RoutingMode::ConcatToBoth => "concat_to_both",
            RoutingMode::SplitHToV => "split_h_to_v",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub channels_in: usize,
    pub channels_out: usize,
    /// Number of past states kept in the queue.
    pub order: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_mode")]
    pub attention_mode: AttentionMode,
    #[serde(default = "default_routing")]
    pub routing_mode: RoutingMode,
}

fn default_stride() -> usize {
    1
}

fn default_mode() -> AttentionMode {
    AttentionMode::SpatialTemporal
}

fn default_routing() -> RoutingMode {
    RoutingMode::ConcatToBoth
}

impl LayerConfig {
    pub fn new(channels_in: usize, channels_out: usize, order: usize) -> Self {
        LayerConfig {
            channels_in,
            channels_out,
            order,
            stride: 1,
            attention_mode: AttentionMode::SpatialTemporal,
            routing_mode: RoutingMode::ConcatToBoth,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_mode(mut self, mode: AttentionMode) -> Self {
        self.attention_mode = mode;
        self
    }

    pub fn with_routing(mut self, routing: RoutingMode) -> Self {
        self.routing_mode = routing;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(HorstError::Config("layer order must be >= 1".into()));
        }
        if self.channels_in == 0 || self.channels_out == 0 {
            return Err(HorstError::Config("layer channels must be >= 1".into()));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(HorstError::Config(format!(
                "layer stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        Ok(())
    }
}
