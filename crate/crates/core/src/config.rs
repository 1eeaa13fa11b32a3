//! Model configuration shared by the parameter store, backbone, and model.

use serde::{Deserialize, Serialize};

/// One of the four working scales. Scales 2 and 3 downsample by that factor;
/// `Half` upsamples by 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scale {
    #[serde(rename = "1")]
    S1,
    #[serde(rename = "2")]
    S2,
    #[serde(rename = "3")]
    S3,
    #[serde(rename = "0.5")]
    Half,
}

impl Scale {
    /// Fixed processing order: 1, 2, 3, 0.5.
    pub const ALL: [Scale; 4] = [Scale::S1, Scale::S2, Scale::S3, Scale::Half];

    /// Resampling factor applied to the image side length divisor.
    pub fn factor(self) -> f64 {
        match self {
            Scale::S1 => 1.0,
            Scale::S2 => 2.0,
            Scale::S3 => 3.0,
            Scale::Half => 0.5,
        }
    }

    /// Side length after rescaling: `round(n / 2)`, `round(n / 3)`, or `2n`.
    pub fn scaled_len(self, n: usize) -> usize {
        match self {
            Scale::S1 => n,
            Scale::S2 => ((n as f64) / 2.0).round() as usize,
            Scale::S3 => ((n as f64) / 3.0).round() as usize,
            Scale::Half => 2 * n,
        }
    }

    /// Parameter-name prefix for this scale's independent parameter group.
    pub fn prefix(self) -> &'static str {
        match self {
            Scale::S1 => "scale1",
            Scale::S2 => "scale2",
            Scale::S3 => "scale3",
            Scale::Half => "scale05",
        }
    }

    /// Spatial size `a_i` of the reference backbone's blocks at this scale.
    /// Metadata only; the interpolation block makes downstream shapes
    /// independent of it.
    pub fn reference_spatial(self) -> usize {
        match self {
            Scale::S1 => 21,
            Scale::S2 => 15,
            Scale::S3 => 9,
            Scale::Half => 33,
        }
    }

    /// Numeric code used in feature-volume file headers.
    pub fn code(self) -> f32 {
        self.factor() as f32
    }

    pub fn from_code(code: f32) -> Option<Scale> {
        Scale::ALL.iter().copied().find(|s| s.code() == code)
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scale::Half => write!(f, "0.5"),
            Scale::S1 => write!(f, "1"),
            Scale::S2 => write!(f, "2"),
            Scale::S3 => write!(f, "3"),
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "1" => Ok(Scale::S1),
            "2" => Ok(Scale::S2),
            "3" => Ok(Scale::S3),
            "0.5" => Ok(Scale::Half),
            other => Err(format!("unknown scale '{other}' (expected 1, 2, 3 or 0.5)")),
        }
    }
}

/// Hyperparameters of the per-scale transformer stacks and the stand-in
/// backbone. The transformer equations fix the structure; the sizes are
/// configurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Transformer input dimension D.
    pub embed_dim: usize,
    /// Encoder and decoder layer count L.
    pub num_layers: usize,
    pub num_heads: usize,
    /// Hidden width of the MLP blocks.
    pub mlp_dim: usize,
    /// Canonical grid every feature volume is interpolated to.
    pub target_h: usize,
    pub target_w: usize,
    /// Channels per backbone block; six blocks are concatenated.
    pub block_channels: usize,
    /// Working scales in processing order.
    #[serde(default = "default_scales")]
    pub scales: Vec<Scale>,
}

fn default_scales() -> Vec<Scale> {
    Scale::ALL.to_vec()
}

impl ModelConfig {
    /// Small configuration for CPU-scale experiments.
    pub fn desk() -> Self {
        ModelConfig {
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_dim: 256,
            target_h: 7,
            target_w: 7,
            block_channels: 32,
            scales: default_scales(),
        }
    }

    /// Full-size configuration: 1920-channel volumes on a 21×21 grid,
    /// giving a 442-token sequence.
    pub fn full_size() -> Self {
        ModelConfig {
            embed_dim: 128,
            num_layers: 2,
            num_heads: 4,
            mlp_dim: 512,
            target_h: 21,
            target_w: 21,
            block_channels: 320,
            scales: default_scales(),
        }
    }

    /// Total feature channels after concatenating the six blocks.
    pub fn feature_channels(&self) -> usize {
        6 * self.block_channels
    }

    /// Grid tokens N = target_h * target_w.
    pub fn grid_tokens(&self) -> usize {
        self.target_h * self.target_w
    }

    /// Sequence length including the quality token: 1 + N.
    pub fn seq_len(&self) -> usize {
        1 + self.grid_tokens()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.embed_dim == 0 || self.mlp_dim == 0 || self.block_channels == 0 {
            return Err("widths must be positive".into());
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.target_h == 0 || self.target_w == 0 {
            return Err("target grid must be positive".into());
        }
        if self.scales.is_empty() {
            return Err("at least one scale required".into());
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.scales {
            if !seen.insert(*s) {
                return Err(format!("duplicate scale {s}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_sequence_length() {
        let cfg = ModelConfig::full_size();
        assert_eq!(cfg.feature_channels(), 1920);
        assert_eq!(cfg.seq_len(), 442);
    }

    #[test]
    fn desk_sequence_length() {
        let cfg = ModelConfig::desk();
        assert_eq!(cfg.seq_len(), 50);
        cfg.validate().unwrap();
    }

    #[test]
    fn scale_codes_round_trip() {
        for s in Scale::ALL {
            assert_eq!(Scale::from_code(s.code()), Some(s));
            assert_eq!(s.to_string().parse::<Scale>().unwrap(), s);
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut cfg = ModelConfig::desk();
        cfg.num_heads = 5;
        assert!(cfg.validate().is_err());
    }
}
