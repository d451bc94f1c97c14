use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architectural hyperparameters and ablation toggles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Encoder channels at scale 1; scale `i` uses `base_width·2^(i-1)` and
    /// the middle block `16·base_width`.
    pub base_width: usize,
    /// Working channels inside every fusion-stream module.
    pub fsp_width: usize,
    /// Edge feature maps produced per scale.
    pub em_channels: usize,
    /// Dilation rates of the atrous pyramid branches.
    pub aspp_rates: Vec<usize>,
    pub use_fsp: bool,
    pub use_aspp: bool,
    pub use_ec: bool,
    /// Feed the super-pixel rendering as a second input channel.
    pub use_superpixel: bool,
    /// Concatenate encoder features into the decoder (plain U-Net).
    pub backbone_skips: bool,
    /// Canonical side length of the square input.
    pub size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 64,
            fsp_width: 64,
            em_channels: 32,
            aspp_rates: vec![2, 4, 6],
            use_fsp: true,
            use_aspp: true,
            use_ec: true,
            use_superpixel: true,
            backbone_skips: false,
            size: 256,
        }
    }
}

impl ModelConfig {
    /// The full network scaled down for CPU work: `base_width` and
    /// `fsp_width` both set to `width`.
    pub fn desk(width: usize, size: usize) -> Self {
        ModelConfig {
            base_width: width,
            fsp_width: width,
            size,
            ..ModelConfig::default()
        }
    }

    pub fn input_channels(&self) -> usize {
        if self.use_superpixel {
            2
        } else {
            1
        }
    }

    /// Channels of encoder/decoder block at `scale` (1-based).
    pub fn scale_channels(&self, scale: usize) -> usize {
        self.base_width << (scale - 1)
    }

    pub fn middle_channels(&self) -> usize {
        16 * self.base_width
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.base_width == 0 {
            return fail("base_width must be ≥ 1".into());
        }
        if self.size == 0 || self.size % 16 != 0 {
            return fail(format!(
                "size must be a positive multiple of 16, got {}",
                self.size
            ));
        }
        if self.use_fsp && self.fsp_width == 0 {
            return fail("fsp_width must be ≥ 1".into());
        }
        if self.use_ec && self.em_channels == 0 {
            return fail("em_channels must be ≥ 1".into());
        }
        if self.use_aspp && (self.aspp_rates.is_empty() || self.aspp_rates.contains(&0)) {
            return fail(format!(
                "aspp_rates must be nonempty and positive, got {:?}",
                self.aspp_rates
            ));
        }
        if (self.use_aspp || self.use_ec) && !self.use_fsp {
            return fail("use_aspp and use_ec require use_fsp".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_widths() {
        let c = ModelConfig::default();
        let widths: Vec<_> = (1..=4).map(|i| c.scale_channels(i)).collect();
        assert_eq!(widths, vec![64, 128, 256, 512]);
        assert_eq!(c.middle_channels(), 1024);
        assert_eq!(c.em_channels, 32);
        assert_eq!(c.input_channels(), 2);
        c.validate().unwrap();
    }

    #[test]
    fn validation_names_the_violated_invariant() {
        let bad = ModelConfig {
            size: 255,
            ..ModelConfig::default()
        };
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("multiple of 16"));
        let bad = ModelConfig {
            use_fsp: false,
            ..ModelConfig::default()
        };
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("require use_fsp"));
        let bad = ModelConfig {
            aspp_rates: vec![],
            ..ModelConfig::default()
        };
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("aspp_rates"));
        let bad = ModelConfig {
            base_width: 0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
