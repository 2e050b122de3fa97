use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Naive,
    Wadenet,
}

/// Hyperparameters that fully determine either architecture.
///
/// JSON keys follow the usual symbols: `N` blocks, `c` channels out of the
/// first block, `k` kernel size, `g` DWT gate channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(rename = "N")]
    pub blocks: usize,
    #[serde(rename = "c")]
    pub base_channels: usize,
    #[serde(rename = "k")]
    pub kernel_size: usize,
    #[serde(rename = "g")]
    pub gate_channels: usize,
    pub inception_kernels: Vec<usize>,
    pub fc_widths: Vec<usize>,
    pub num_classes: usize,
    pub window_len: usize,
    pub dropout_p: f64,
}

impl ModelConfig {
    /// N=4, c=64, k=3 on 320 ms windows at 16 kHz.
    pub fn reference(kind: ModelKind, num_classes: usize) -> Self {
        Self {
            kind,
            blocks: 4,
            base_channels: 64,
            kernel_size: 3,
            gate_channels: 16,
            inception_kernels: vec![1, 3, 5, 7],
            fc_widths: vec![512, 128],
            num_classes,
            window_len: 5120,
            dropout_p: 0.5,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.blocks == 0 || self.blocks >= 31 {
            return fail(format!("N must be in 1..=30, got {}", self.blocks));
        }
        if self.base_channels == 0 {
            return fail("c must be positive".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return fail(format!("k must be odd, got {}", self.kernel_size));
        }
        let dyadic = 1usize << self.blocks;
        if self.window_len == 0 || !self.window_len.is_multiple_of(dyadic) {
            return fail(format!(
                "window_len {} is not divisible by 2^N = {dyadic}",
                self.window_len
            ));
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.fc_widths.contains(&0) {
            return fail("fc_widths entries must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.kind == ModelKind::Wadenet {
            if self.gate_channels == 0 {
                return fail("g must be positive for wadenet".into());
            }
            if self.inception_kernels.is_empty() {
                return fail("inception_kernels must not be empty".into());
            }
            if let Some(k) = self.inception_kernels.iter().find(|&&k| k % 2 == 0) {
                return fail(format!("inception kernel {k} is not odd"));
            }
            let branches = self.inception_kernels.len();
            // block n carries c·2^(n-1) channels, so divisibility at n=1 suffices
            if !self.base_channels.is_multiple_of(branches) {
                return fail(format!(
                    "c = {} is not divisible by the {branches} inception branches",
                    self.base_channels
                ));
            }
        }
        Ok(())
    }

    /// Channels emitted by block `n` (1-based): c·2ⁿ⁻¹.
    pub fn block_channels(&self, n: usize) -> usize {
        self.base_channels << (n - 1)
    }

    /// Channels entering block `n`.
    pub fn block_input_channels(&self, n: usize) -> usize {
        match (n, self.kind) {
            (1, _) => 1,
            (_, ModelKind::Naive) => self.block_channels(n - 1),
            (_, ModelKind::Wadenet) => self.block_channels(n - 1) + self.gate_channels,
        }
    }

    /// Feature-map length after block `n`: l/2ⁿ.
    pub fn block_len(&self, n: usize) -> usize {
        self.window_len >> n
    }

    /// Channels of the map that gets flattened.
    pub fn final_channels(&self) -> usize {
        let c = self.block_channels(self.blocks);
        match self.kind {
            ModelKind::Naive => c,
            ModelKind::Wadenet => c + self.gate_channels,
        }
    }

    pub fn flatten_len(&self) -> usize {
        self.final_channels() * self.block_len(self.blocks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_shapes() {
        let naive = ModelConfig::reference(ModelKind::Naive, 7);
        naive.validate().unwrap();
        assert_eq!(naive.flatten_len(), 163_840);
        let wade = ModelConfig::reference(ModelKind::Wadenet, 7);
        wade.validate().unwrap();
        let trace: Vec<_> = (1..=4).map(|n| wade.block_input_channels(n)).collect();
        assert_eq!(trace, vec![1, 80, 144, 272]);
        assert_eq!(wade.flatten_len(), 168_960);
    }

    #[test]
    fn json_rejects_unknown_keys() {
        let cfg = ModelConfig::reference(ModelKind::Wadenet, 3);
        let mut v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(ModelConfig::from_json(&v.to_string()).unwrap(), cfg);
        v["extra"] = serde_json::json!(1);
        assert!(matches!(
            ModelConfig::from_json(&v.to_string()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn validation_errors() {
        let base = ModelConfig::reference(ModelKind::Wadenet, 3);
        let mut c = base.clone();
        c.window_len = 5000;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.kernel_size = 4;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.base_channels = 6;
        assert!(c.validate().is_err());
        let mut c = base;
        c.inception_kernels = vec![1, 2];
        assert!(c.validate().is_err());
    }
}
