use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ScaleConvention;

/// Truncated-normal initialisation of the learnable query latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentInitSpec {
    pub mean: f64,
    pub std: f64,
    /// Absolute truncation bounds (not in units of `std`).
    pub lower: f64,
    pub upper: f64,
}

impl Default for LatentInitSpec {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 0.02,
            lower: -2.0,
            upper: 2.0,
        }
    }
}

impl LatentInitSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lower < self.upper && self.std > 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "latent init needs lower < upper and std > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel width `C` of the TDNN output and every attention block.
    pub channels: usize,
    /// Number of latent slots `E`; also the embedding length.
    pub embedding_size: usize,
    /// Hidden width of each block's feed-forward layer.
    pub ffn_size: usize,
    /// Number of latent self-attention blocks `j` after the cross-attention block.
    pub n_latent_blocks: usize,
    pub num_heads: usize,
    pub dropout_p: f64,
    /// Filterbank channels `C0` feeding the TDNN block.
    pub n_filters: usize,
    /// All latent blocks share one parameter set.
    pub weight_sharing: bool,
    pub use_posenc: bool,
    /// Concatenate every latent block output before the aggregation conv;
    /// otherwise only the last block's output is convolved.
    pub use_mla_concat: bool,
    /// Aggregation conv uses `groups = C` (output channel `c` mixes channel
    /// `c` of every latent block); `false` selects a dense conv.
    pub mla_depthwise: bool,
    pub attention_scale: ScaleConvention,
    pub latent_init: LatentInitSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 256,
            embedding_size: 512,
            ffn_size: 1024,
            n_latent_blocks: 3,
            num_heads: 4,
            dropout_p: 0.2,
            n_filters: 80,
            weight_sharing: false,
            use_posenc: true,
            use_mla_concat: true,
            mla_depthwise: true,
            attention_scale: ScaleConvention::PerHead,
            latent_init: LatentInitSpec::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration used for desk-scale experiments.
    pub fn desk() -> Self {
        Self {
            channels: 64,
            embedding_size: 64,
            ffn_size: 128,
            n_latent_blocks: 2,
            num_heads: 4,
            dropout_p: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.num_heads == 0 || !self.channels.is_multiple_of(self.num_heads) {
            return fail(format!(
                "channels ({}) must be a positive multiple of num_heads ({})",
                self.channels, self.num_heads
            ));
        }
        if self.use_posenc && !self.channels.is_multiple_of(2) {
            return fail(format!("positional encoding needs even channels, got {}", self.channels));
        }
        if self.embedding_size == 0 || self.ffn_size == 0 || self.n_filters == 0 {
            return fail("embedding_size, ffn_size and n_filters must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.use_mla_concat && self.n_latent_blocks == 0 {
            return fail("MLA concatenation needs at least one latent block".into());
        }
        self.latent_init.validate()
    }
}

/// Ablations of the base architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    NoMla,
    NoLatentBlocks,
    NoPosenc,
    WeightSharing,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::NoMla,
        AblationVariant::NoLatentBlocks,
        AblationVariant::NoPosenc,
        AblationVariant::WeightSharing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::NoMla => "no_mla",
            AblationVariant::NoLatentBlocks => "no_latent_blocks",
            AblationVariant::NoPosenc => "no_posenc",
            AblationVariant::WeightSharing => "weight_sharing",
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown variant {s:?}; expected one of no_mla, no_latent_blocks, no_posenc, weight_sharing"
                ))
            })
    }
}

pub fn build_ablation(cfg: &ModelConfig, variant: AblationVariant) -> Result<ModelConfig> {
    cfg.validate()?;
    let mut out = cfg.clone();
    match variant {
        AblationVariant::NoMla => out.use_mla_concat = false,
        AblationVariant::NoLatentBlocks => {
            // cross-attention output goes straight to the aggregation conv
            out.n_latent_blocks = 0;
            out.use_mla_concat = false;
        }
        AblationVariant::NoPosenc => out.use_posenc = false,
        AblationVariant::WeightSharing => out.weight_sharing = true,
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let bad = ModelConfig {
            num_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            n_latent_blocks: 0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            dropout_p: 1.0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::default();
        bad.latent_init.lower = 3.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn variants_parse_and_apply() {
        let base = ModelConfig::default();
        for v in AblationVariant::ALL {
            assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
            build_ablation(&base, v).unwrap();
        }
        assert!("bogus".parse::<AblationVariant>().is_err());
        assert!(!build_ablation(&base, AblationVariant::NoMla).unwrap().use_mla_concat);
        assert!(!build_ablation(&base, AblationVariant::NoPosenc).unwrap().use_posenc);
        assert!(build_ablation(&base, AblationVariant::WeightSharing).unwrap().weight_sharing);
        assert_eq!(build_ablation(&base, AblationVariant::NoLatentBlocks).unwrap().n_latent_blocks, 0);
    }
}
