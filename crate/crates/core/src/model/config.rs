use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotary frequency rescaling as used by Llama 3.1 checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeScaling {
    #[serde(alias = "type")]
    pub rope_type: String,
    pub factor: f64,
    #[serde(default = "default_low_freq")]
    pub low_freq_factor: f64,
    #[serde(default = "default_high_freq")]
    pub high_freq_factor: f64,
    #[serde(default = "default_original_max")]
    pub original_max_position_embeddings: usize,
}

fn default_low_freq() -> f64 {
    1.0
}
fn default_high_freq() -> f64 {
    4.0
}
fn default_original_max() -> usize {
    8192
}

/// Shape and hyper-parameters of a pre-norm decoder (RMSNorm, rotary positions,
/// gated SiLU feed-forward, grouped-query attention).
///
/// Field names follow the usual `config.json` of Llama/Qwen2/Mistral checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_model_type")]
    pub model_type: String,
    #[serde(rename = "num_hidden_layers", alias = "n_layers")]
    pub n_layers: usize,
    #[serde(rename = "num_attention_heads", alias = "n_heads")]
    pub n_heads: usize,
    #[serde(rename = "num_key_value_heads", alias = "n_kv_heads", default)]
    pub n_kv_heads: Option<usize>,
    #[serde(rename = "hidden_size", alias = "d_model")]
    pub d_model: usize,
    #[serde(rename = "intermediate_size", alias = "d_ff")]
    pub d_ff: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(rename = "rms_norm_eps", alias = "norm_eps", default = "default_eps")]
    pub norm_eps: f64,
    #[serde(
        rename = "max_position_embeddings",
        alias = "max_seq_len",
        default = "default_max_seq"
    )]
    pub max_seq_len: usize,
    #[serde(default)]
    pub tie_word_embeddings: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rope_scaling: Option<RopeScaling>,
    #[serde(default = "default_act", skip_serializing_if = "is_silu")]
    pub hidden_act: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_sliding_window: Option<bool>,
}

fn default_model_type() -> String {
    "llama".into()
}
fn default_rope_theta() -> f64 {
    10_000.0
}
fn default_eps() -> f64 {
    1e-5
}
fn default_max_seq() -> usize {
    2048
}
fn default_act() -> String {
    "silu".into()
}
fn is_silu(s: &String) -> bool {
    s == "silu"
}

const SUPPORTED_TYPES: &[&str] = &["llama", "qwen2", "mistral"];

impl ModelConfig {
    /// Minimal config with defaults for everything but the shape.
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        n_kv_heads: usize,
        d_model: usize,
        d_ff: usize,
        vocab_size: usize,
    ) -> Self {
        Self {
            model_type: default_model_type(),
            n_layers,
            n_heads,
            n_kv_heads: Some(n_kv_heads),
            d_model,
            d_ff,
            vocab_size,
            rope_theta: default_rope_theta(),
            norm_eps: default_eps(),
            max_seq_len: default_max_seq(),
            tie_word_embeddings: false,
            rope_scaling: None,
            hidden_act: default_act(),
            head_dim: None,
            use_sliding_window: None,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kv_heads(&self) -> usize {
        self.n_kv_heads.unwrap_or(self.n_heads)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of query heads sharing one key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.kv_heads()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_hidden_layers", self.n_layers),
            ("num_attention_heads", self.n_heads),
            ("num_key_value_heads", self.kv_heads()),
            ("hidden_size", self.d_model),
            ("intermediate_size", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_position_embeddings", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("rms_norm_eps must be positive".into()));
        }
        if !(self.rope_theta > 0.0) {
            return Err(Error::Config("rope_theta must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by num_attention_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_heads % self.kv_heads() != 0 {
            return Err(Error::Config(format!(
                "num_attention_heads {} not divisible by num_key_value_heads {}",
                self.n_heads,
                self.kv_heads()
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config("head dimension must be even for rotary embeddings".into()));
        }
        if !SUPPORTED_TYPES.contains(&self.model_type.as_str()) {
            return Err(Error::Config(format!(
                "unsupported architecture field model_type={:?}",
                self.model_type
            )));
        }
        if self.hidden_act != "silu" {
            return Err(Error::Config(format!(
                "unsupported architecture field hidden_act={:?}",
                self.hidden_act
            )));
        }
        if let Some(hd) = self.head_dim {
            if hd != self.head_dim() {
                return Err(Error::Config(format!(
                    "unsupported architecture field head_dim={hd} (expected hidden_size/num_attention_heads = {})",
                    self.head_dim()
                )));
            }
        }
        if self.use_sliding_window == Some(true) {
            return Err(Error::Config(
                "unsupported architecture field use_sliding_window=true".into(),
            ));
        }
        if let Some(rs) = &self.rope_scaling {
            if rs.rope_type != "llama3" {
                return Err(Error::Config(format!(
                    "unsupported architecture field rope_scaling.rope_type={:?}",
                    rs.rope_type
                )));
            }
        }
        Ok(())
    }

    /// Per-pair inverse rotary frequencies, `head_dim / 2` entries.
    pub fn inv_freqs(&self) -> Vec<f64> {
        let hd = self.head_dim();
        let base: Vec<f64> = (0..hd / 2)
            .map(|i| self.rope_theta.powf(-(2.0 * i as f64) / hd as f64))
            .collect();
        match &self.rope_scaling {
            None => base,
            Some(rs) => {
                let old = rs.original_max_position_embeddings as f64;
                let low_wavelen = old / rs.low_freq_factor;
                let high_wavelen = old / rs.high_freq_factor;
                base.into_iter()
                    .map(|f| {
                        let wavelen = 2.0 * std::f64::consts::PI / f;
                        if wavelen < high_wavelen {
                            f
                        } else if wavelen > low_wavelen {
                            f / rs.factor
                        } else {
                            let smooth = (old / wavelen - rs.low_freq_factor)
                                / (rs.high_freq_factor - rs.low_freq_factor);
                            (1.0 - smooth) * f / rs.factor + smooth * f
                        }
                    })
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_hf_llama_config() {
        let json = r#"{
            "architectures": ["LlamaForCausalLM"],
            "model_type": "llama",
            "num_hidden_layers": 32, "num_attention_heads": 32, "num_key_value_heads": 8,
            "hidden_size": 4096, "intermediate_size": 14336, "vocab_size": 128256,
            "rope_theta": 500000.0, "rms_norm_eps": 1e-5, "max_position_embeddings": 131072,
            "rope_scaling": {"factor": 8.0, "low_freq_factor": 1.0, "high_freq_factor": 4.0,
                             "original_max_position_embeddings": 8192, "rope_type": "llama3"},
            "tie_word_embeddings": false, "hidden_act": "silu"
        }"#;
        let cfg: ModelConfig = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_layers, 32);
        assert_eq!(cfg.n_heads, 32);
        assert_eq!(cfg.group_size(), 4);
        assert_eq!(cfg.head_dim(), 128);
        let f = cfg.inv_freqs();
        assert_eq!(f.len(), 64);
        assert_eq!(f[0], 1.0);
        // the lowest frequencies are divided by the scaling factor
        let unscaled = 500000f64.powf(-126.0 / 128.0);
        assert!((f[63] - unscaled / 8.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut cfg = ModelConfig::new(2, 4, 3, 64, 128, 512);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.n_kv_heads = Some(2);
        cfg.validate().unwrap();
        cfg.d_model = 66;
        assert!(cfg.validate().is_err());
        cfg.d_model = 64;
        cfg.norm_eps = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_unsupported_architecture() {
        let mut cfg = ModelConfig::new(2, 4, 4, 64, 128, 512);
        cfg.hidden_act = "gelu".into();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("hidden_act"), "{err}");
    }
}
