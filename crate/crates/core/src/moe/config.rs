use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseTransformerConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
}

impl DenseTransformerConfig {
    /// Small enough to pretrain in well under a minute on one core.
    pub fn desk(vocab_size: usize) -> Self {
        DenseTransformerConfig {
            vocab_size,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_hidden: 256,
            max_seq_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    /// Parameters of one FFN block (two weight matrices plus biases).
    pub fn ffn_params(&self) -> usize {
        2 * self.embed_dim * self.ffn_hidden + self.ffn_hidden + self.embed_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoEConfig {
    pub num_experts: usize,
    pub top_k: usize,
    #[serde(default = "default_balance")]
    pub balance_coefficient: f64,
    #[serde(default = "default_true")]
    pub renormalize_topk: bool,
}

fn default_balance() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

impl MoEConfig {
    pub fn new(num_experts: usize, top_k: usize) -> Result<Self> {
        let cfg = MoEConfig {
            num_experts,
            top_k,
            balance_coefficient: default_balance(),
            renormalize_topk: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 4 experts, top 2 active.
    pub fn e4_top2() -> Self {
        MoEConfig::new(4, 2).expect("valid preset")
    }

    /// 2 experts, both active.
    pub fn e2_top2() -> Self {
        MoEConfig::new(2, 2).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "need 1 <= top_k <= num_experts, got top_k={} num_experts={}",
                self.top_k, self.num_experts
            )));
        }
        if !(self.balance_coefficient >= 0.0 && self.balance_coefficient.is_finite()) {
            return Err(Error::Config(format!(
                "balance_coefficient must be finite and >= 0, got {}",
                self.balance_coefficient
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Attention,
    Ffn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoRAConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoRAConfig {
    fn default() -> Self {
        LoRAConfig {
            rank: 4,
            alpha: 8.0,
            targets: vec![LoraTarget::Attention, LoraTarget::Ffn],
        }
    }
}

impl LoRAConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA target set is empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        assert_eq!(
            (MoEConfig::e4_top2().num_experts, MoEConfig::e4_top2().top_k),
            (4, 2)
        );
        assert_eq!(
            (MoEConfig::e2_top2().num_experts, MoEConfig::e2_top2().top_k),
            (2, 2)
        );
        assert!(MoEConfig::new(2, 3).is_err());
        assert!(MoEConfig::new(2, 0).is_err());
    }

    #[test]
    fn lora_default_scaling() {
        assert_eq!(LoRAConfig::default().scaling(), 2.0);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = DenseTransformerConfig::desk(30);
        c.n_heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let r: std::result::Result<MoEConfig, _> =
            serde_json::from_str(r#"{"num_experts":4,"top_k":2,"capacity":1.0}"#);
        assert!(r.is_err());
    }
}
