use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which of the three mechanisms are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Plain D-TDNN with statistics pooling over the last features.
    DtdnnBaseline,
    /// Dynamic kernel convolution in place of the D-TDNN convolutions.
    Dkconv,
    /// Local multi-scale blocks built from dynamic kernel convolutions.
    LocalMs,
    /// Local multi-scale blocks plus global multi-scale pooling.
    GlobalLocalMs,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::DtdnnBaseline,
        Variant::Dkconv,
        Variant::LocalMs,
        Variant::GlobalLocalMs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::DtdnnBaseline => "dtdnn-baseline",
            Variant::Dkconv => "dkconv",
            Variant::LocalMs => "local-ms",
            Variant::GlobalLocalMs => "global-local-ms",
        }
    }

    pub fn dynamic_kernels(self) -> bool {
        self != Variant::DtdnnBaseline
    }

    pub fn local_multiscale(self) -> bool {
        matches!(self, Variant::LocalMs | Variant::GlobalLocalMs)
    }

    pub fn global_pooling(self) -> bool {
        self == Variant::GlobalLocalMs
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of dtdnn-baseline, dkconv, local-ms, global-local-ms"
                ))
            })
    }
}

/// Declarative description of the network.
///
/// Contexts are half-widths in frames; a layer with kernel `K` and context
/// `c` uses dilation `c / ((K − 1) / 2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// 64 MFCC + 3 pitch channels.
    pub input_dim: usize,
    pub tdnn_channels: usize,
    pub tdnn_context: usize,
    pub bottleneck: usize,
    /// Growth rate of every D-TDNN layer ("filters").
    pub growth: usize,
    pub kernel: usize,
    pub block_sizes: Vec<usize>,
    /// The last this-many D-TDNN layers use `wide_context`.
    pub wide_context_layers: usize,
    pub wide_context: usize,
    pub narrow_context: usize,
    /// The first this-many D-TDNN layers carry the dynamic kernel or
    /// multi-scale operator in the non-baseline variants.
    pub dynamic_layers: usize,
    /// Split count `s` of the local multi-scale block.
    pub scales: usize,
    /// Attention reduction ratio `r`.
    pub reduction: usize,
    /// Transitions (1-based) whose outputs feed global multi-scale pooling.
    pub pool_taps: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub aam_margin: f64,
    pub aam_scale: f64,
    /// Sliding mean-normalization window applied to features; 0 disables.
    pub mean_norm_window_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::GlobalLocalMs,
            input_dim: 67,
            tdnn_channels: 128,
            tdnn_context: 5,
            bottleneck: 128,
            growth: 64,
            kernel: 3,
            block_sizes: vec![6, 12],
            wide_context_layers: 6,
            wide_context: 5,
            narrow_context: 3,
            dynamic_layers: 12,
            scales: 4,
            reduction: 4,
            pool_taps: vec![1, 2],
            embedding_dim: 512,
            num_classes: 16,
            aam_margin: 0.2,
            aam_scale: 30.0,
            mean_norm_window_frames: 300,
        }
    }
}

impl ModelConfig {
    pub fn reference(variant: Variant) -> Self {
        ModelConfig {
            variant,
            ..Default::default()
        }
    }

    /// Small network for desk-scale training runs.
    pub fn desk(variant: Variant, input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            variant,
            input_dim,
            tdnn_channels: 32,
            tdnn_context: 2,
            bottleneck: 32,
            growth: 16,
            block_sizes: vec![2, 2],
            wide_context_layers: 2,
            wide_context: 2,
            narrow_context: 1,
            dynamic_layers: 2,
            scales: 4,
            reduction: 2,
            embedding_dim: 64,
            num_classes,
            ..Default::default()
        }
    }

    /// Smallest useful network (C ≤ 8) for gradient checks.
    pub fn tiny(variant: Variant) -> Self {
        ModelConfig {
            variant,
            input_dim: 3,
            tdnn_channels: 4,
            tdnn_context: 1,
            bottleneck: 8,
            growth: 4,
            block_sizes: vec![1, 1],
            wide_context_layers: 1,
            wide_context: 2,
            narrow_context: 1,
            dynamic_layers: 1,
            scales: 2,
            reduction: 2,
            embedding_dim: 4,
            num_classes: 3,
            aam_scale: 4.0,
            mean_norm_window_frames: 0,
            ..Default::default()
        }
    }

    pub fn total_dtdnn_layers(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    pub fn dilation_for(&self, context: usize) -> Result<usize> {
        let half = (self.kernel - 1) / 2;
        if half == 0 {
            return Ok(1);
        }
        if context == 0 || !context.is_multiple_of(half) {
            return Err(Error::Config(format!(
                "context {context} is not reachable with kernel {} (half-width must be a multiple of {half})",
                self.kernel
            )));
        }
        Ok(context / half)
    }

    /// Context half-width of D-TDNN layer `index` (0-based across blocks).
    pub fn layer_context(&self, index: usize) -> usize {
        let total = self.total_dtdnn_layers();
        if index + self.wide_context_layers >= total {
            self.wide_context
        } else {
            self.narrow_context
        }
    }

    /// Frames the receptive field needs so every convolution is defined.
    pub fn min_frames(&self) -> usize {
        let half = (self.kernel - 1) / 2;
        let tdnn = self.tdnn_context;
        let layers = (0..self.total_dtdnn_layers()).map(|i| {
            if self.variant.dynamic_kernels() && i < self.dynamic_layers {
                2 * half
            } else {
                self.layer_context(i)
            }
        });
        2 * layers.chain([tdnn]).max().unwrap_or(0) + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("tdnn_channels", self.tdnn_channels),
            ("bottleneck", self.bottleneck),
            ("growth", self.growth),
            ("embedding_dim", self.embedding_dim),
            ("scales", self.scales),
            ("reduction", self.reduction),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.block_sizes.is_empty() || self.block_sizes.contains(&0) {
            return Err(Error::Config(
                "block_sizes must be non-empty and positive".into(),
            ));
        }
        self.dilation_for(self.tdnn_context)?;
        self.dilation_for(self.wide_context)?;
        self.dilation_for(self.narrow_context)?;
        if self.variant.dynamic_kernels() {
            if self.dynamic_layers > self.total_dtdnn_layers() {
                return Err(Error::Config(format!(
                    "dynamic_layers {} exceeds the {} D-TDNN layers",
                    self.dynamic_layers,
                    self.total_dtdnn_layers()
                )));
            }
            if !self.growth.is_multiple_of(self.reduction) {
                return Err(Error::Config(format!(
                    "growth {} not divisible by reduction {}",
                    self.growth, self.reduction
                )));
            }
        }
        if self.variant.local_multiscale() {
            if !self.growth.is_multiple_of(self.scales) {
                return Err(Error::Config(format!(
                    "growth {} not divisible into {} scales",
                    self.growth, self.scales
                )));
            }
            let group = self.growth / self.scales;
            if !group.is_multiple_of(self.reduction) {
                return Err(Error::Config(format!(
                    "multi-scale group width {group} not divisible by reduction {}",
                    self.reduction
                )));
            }
        }
        if self.variant.global_pooling() {
            if self.pool_taps.is_empty() {
                return Err(Error::Config(
                    "global pooling needs at least one tap".into(),
                ));
            }
            for &t in &self.pool_taps {
                if t == 0 || t > self.block_sizes.len() {
                    return Err(Error::Config(format!(
                        "pool tap {t} does not name a transition (1..={})",
                        self.block_sizes.len()
                    )));
                }
            }
        }
        if !(self.aam_scale > 0.0) || !self.aam_margin.is_finite() {
            return Err(Error::Config(
                "aam_scale must be positive and aam_margin finite".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config always serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("resnet".parse::<Variant>().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ModelConfig::reference(Variant::LocalMs);
        let back = ModelConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn contexts_follow_the_plan() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.dilation_for(cfg.tdnn_context).unwrap(), 5);
        assert_eq!(cfg.layer_context(0), 3);
        assert_eq!(cfg.layer_context(11), 3);
        assert_eq!(cfg.layer_context(12), 5);
        assert_eq!(cfg.layer_context(17), 5);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = ModelConfig {
            kernel: 4,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());

        let cfg = ModelConfig {
            growth: 66,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());

        let cfg = ModelConfig {
            pool_taps: vec![3],
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());

        let cfg = ModelConfig {
            narrow_context: 0,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
