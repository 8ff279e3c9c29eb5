//! Model architecture configuration, presets, and the analytic parameter
//! count.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Temporal context used by the squeeze step of each SE layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeContext {
    /// Mean over the whole (masked) utterance.
    Global,
    /// Mean over a trailing window of this many frames; makes exact
    /// streaming possible.
    Window(usize),
}

/// Final classification layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `logits = W e + b`.
    Linear { bias: bool },
    /// `logits = scale * cos(angle(e, w_j))` on L2-normalized vectors;
    /// trained with the angular-margin loss, which owns the backward pass.
    Cosine { scale: f64 },
}

/// One encoder mega block: `repeats` depthwise-separable sub-blocks, a 1x1
/// residual projection, and an SE gate at the end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MegaBlock {
    pub repeats: usize,
    pub kernel: usize,
    pub channels: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub prologue_kernel: usize,
    pub prologue_channels: usize,
    pub mega_blocks: Vec<MegaBlock>,
    pub epilogue_kernel: usize,
    /// Encoder output width C_e; the pooled vector has size 2*C_e.
    pub epilogue_channels: usize,
    pub se_reduction: usize,
    pub se_context: SeContext,
    pub attention_hidden: usize,
    pub embed_dim: usize,
    /// BatchNorm + ReLU between the embedding linear and the head.
    pub embed_bn: bool,
    pub n_classes: usize,
    pub head: HeadKind,
}

impl ModelConfig {
    /// Full-size preset; lands at ~22.1 M stored parameters.
    pub fn large() -> Self {
        ModelConfig {
            n_mels: 80,
            prologue_kernel: 5,
            prologue_channels: 1024,
            mega_blocks: [7usize, 11, 15, 19]
                .iter()
                .map(|&kernel| MegaBlock {
                    repeats: 3,
                    kernel,
                    channels: 1024,
                    dropout: 0.1,
                })
                .collect(),
            epilogue_kernel: 1,
            epilogue_channels: 1536,
            se_reduction: 4,
            se_context: SeContext::Global,
            attention_hidden: 256,
            embed_dim: 192,
            embed_bn: false,
            n_classes: 2,
            head: HeadKind::Linear { bias: true },
        }
    }

    /// Desk-scale preset (~100 K parameters) for tests and CPU training.
    pub fn tiny() -> Self {
        ModelConfig {
            n_mels: 80,
            prologue_kernel: 3,
            prologue_channels: 64,
            mega_blocks: [3usize, 5, 7]
                .iter()
                .map(|&kernel| MegaBlock {
                    repeats: 2,
                    kernel,
                    channels: 64,
                    dropout: 0.1,
                })
                .collect(),
            epilogue_kernel: 1,
            epilogue_channels: 64,
            se_reduction: 4,
            se_context: SeContext::Global,
            attention_hidden: 32,
            embed_dim: 192,
            embed_bn: false,
            n_classes: 2,
            head: HeadKind::Linear { bias: true },
        }
    }

    pub fn with_se_window(mut self, frames: usize) -> Self {
        self.se_context = SeContext::Window(frames);
        self
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.n_classes = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut kernels = vec![self.prologue_kernel, self.epilogue_kernel];
        kernels.extend(self.mega_blocks.iter().map(|b| b.kernel));
        for k in kernels {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!(
                    "conv kernels must be odd and positive, got {k}"
                )));
            }
        }
        if self.mega_blocks.is_empty() {
            return Err(Error::Config("need at least one mega block".into()));
        }
        for b in &self.mega_blocks {
            if b.repeats == 0 || b.channels == 0 {
                return Err(Error::Config("mega block repeats/channels must be positive".into()));
            }
            if !(0.0..1.0).contains(&b.dropout) {
                return Err(Error::Config(format!("dropout {} outside [0,1)", b.dropout)));
            }
        }
        if self.n_mels == 0
            || self.prologue_channels == 0
            || self.epilogue_channels == 0
            || self.attention_hidden == 0
            || self.embed_dim == 0
            || self.n_classes == 0
            || self.se_reduction == 0
        {
            return Err(Error::Config("zero-sized dimension in model config".into()));
        }
        if let SeContext::Window(w) = self.se_context {
            if w == 0 {
                return Err(Error::Config("SE window must be positive".into()));
            }
        }
        Ok(())
    }

    /// Pooled feature size produced by the attentive pooling (2*C_e).
    pub fn pooled_dim(&self) -> usize {
        2 * self.epilogue_channels
    }

    pub fn se_hidden(&self, channels: usize) -> usize {
        (channels / self.se_reduction).max(1)
    }

    /// Half receptive field of the conv stack: how far ahead of frame `t`
    /// an input frame may sit and still influence the output at `t`.
    pub fn lookahead_frames(&self) -> usize {
        let mut half = (self.prologue_kernel - 1) / 2;
        for b in &self.mega_blocks {
            half += b.repeats * ((b.kernel - 1) / 2);
        }
        half + (self.epilogue_kernel - 1) / 2
    }

    /// Analytic count of every element in an instantiated parameter store,
    /// including batch-norm running statistics. Must agree exactly with
    /// `init_params(cfg, seed).total_elements()`.
    pub fn count_params(&self) -> usize {
        let bn = |c: usize| 4 * c; // gamma, beta, running mean, running var
        let mut total = 0usize;
        // prologue: plain conv + bn
        total += self.prologue_channels * self.n_mels * self.prologue_kernel
            + self.prologue_channels
            + bn(self.prologue_channels);
        let mut c_in = self.prologue_channels;
        for b in &self.mega_blocks {
            for j in 0..b.repeats {
                let cj = if j == 0 { c_in } else { b.channels };
                total += cj * b.kernel; // depthwise
                total += b.channels * cj + b.channels; // pointwise + bias
                total += bn(b.channels);
            }
            total += b.channels * c_in + b.channels + bn(b.channels); // residual
            let h = self.se_hidden(b.channels);
            total += h * b.channels + h + b.channels * h + b.channels; // se gate
            c_in = b.channels;
        }
        total += self.epilogue_channels * c_in * self.epilogue_kernel
            + self.epilogue_channels
            + bn(self.epilogue_channels);
        total += linear_params(self.epilogue_channels, self.attention_hidden, true)
            + self.attention_hidden; // attention score vector v
        total += linear_params(self.pooled_dim(), self.embed_dim, true);
        if self.embed_bn {
            total += bn(self.embed_dim);
        }
        total += match self.head {
            HeadKind::Linear { bias } => linear_params(self.embed_dim, self.n_classes, bias),
            HeadKind::Cosine { .. } => linear_params(self.embed_dim, self.n_classes, false),
        };
        total
    }

    /// SHA-256 over the canonical JSON serialization; embedded in
    /// checkpoints to reject config mismatches.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        let out = Sha256::digest(json.as_bytes());
        let mut d = [0u8; 32];
        d.copy_from_slice(&out);
        d
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<ModelConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_file(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Resolve a preset name or a JSON config path.
    pub fn resolve(spec: &str) -> Result<ModelConfig> {
        match spec {
            "tiny" => Ok(ModelConfig::tiny()),
            "large" => Ok(ModelConfig::large()),
            path => ModelConfig::from_json_file(path),
        }
    }
}

pub(crate) fn linear_params(input: usize, output: usize, bias: bool) -> usize {
    output * input + if bias { output } else { 0 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_example() {
        assert_eq!(linear_params(3072, 192, true), 590_016);
    }

    #[test]
    fn large_preset_lands_near_paper_size() {
        let n = ModelConfig::large().count_params();
        assert!(
            (21_000_000..=23_500_000).contains(&n),
            "large preset has {n} params"
        );
    }

    #[test]
    fn large_pooled_dim_is_3072() {
        assert_eq!(ModelConfig::large().pooled_dim(), 3072);
    }

    #[test]
    fn digest_changes_with_config() {
        let a = ModelConfig::tiny();
        let b = ModelConfig::tiny().with_classes(8);
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), ModelConfig::tiny().digest());
    }

    #[test]
    fn validate_rejects_even_kernel() {
        let mut cfg = ModelConfig::tiny();
        cfg.mega_blocks[0].kernel = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let cfg = ModelConfig::tiny().with_se_window(16);
        cfg.to_json_file(&path).unwrap();
        assert_eq!(ModelConfig::from_json_file(&path).unwrap(), cfg);
    }
}
