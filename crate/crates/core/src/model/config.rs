use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Number of reserved ids before the language tags.
pub const N_SPECIAL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnVariant {
    Dense,
    Lora,
    Clsr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Languages known to the vocabulary, in tag order.
    pub language_ids: Vec<String>,
    pub ffn_variant: FfnVariant,
    #[serde(default = "default_lora_rank")]
    pub lora_rank: usize,
    #[serde(default = "default_lora_alpha")]
    pub lora_alpha: f64,
}

fn default_lora_rank() -> usize {
    16
}

fn default_lora_alpha() -> f64 {
    32.0
}

impl ModelConfig {
    /// Bottleneck width of every gate network.
    pub fn d_gate(&self) -> usize {
        (self.d_model / 4).max(1)
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn tag_id(&self, language: &str) -> Option<usize> {
        self.language_ids
            .iter()
            .position(|l| l == language)
            .map(|i| N_SPECIAL + i)
    }

    /// First id of the content alphabet.
    pub fn content_offset(&self) -> usize {
        N_SPECIAL + self.language_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail("d_model, n_heads and d_ff must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size <= self.content_offset() {
            return fail(format!(
                "vocab_size {} leaves no content ids after {} reserved ids",
                self.vocab_size,
                self.content_offset()
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.language_ids.iter().find(|l| !seen.insert(l.as_str())) {
            return fail(format!("language {dup} listed twice"));
        }
        if self.max_seq_len < 3 {
            return fail("max_seq_len must be at least 3".into());
        }
        if self.lora_rank == 0 {
            return fail("lora_rank must be at least 1".into());
        }
        Ok(())
    }
}
