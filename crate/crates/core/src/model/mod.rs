//! Encoder-decoder transformer, routed feed-forward slots and checkpoints.

pub mod checkpoint;
pub mod clsr;
pub mod config;
pub mod layers;
pub mod params;
pub mod regime;
pub mod transformer;

pub use checkpoint::{assemble_inference_model, Checkpoint};
pub use clsr::{gate_activation, lora_forward, mix, ClsrLayer, FfnSlot, GateMode, GateNet, GateSchedule, LoraAdapter};
pub use config::{FfnVariant, ModelConfig, BOS, EOS, N_SPECIAL, PAD};
pub use params::{Owner, ParamId, ParamKind, ParamStore};
pub use regime::{apply_mask, trainable_mask, Regime};
pub use transformer::{Batch, ForwardOutput, GateEntry, GateTrace, Routing, Seq2SeqModel, Side};

use crate::error::{contract, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Parameter accounting for a CLSR model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub total: usize,
    pub shared: usize,
    pub per_language: BTreeMap<String, usize>,
    /// Σ requested languages' LS + gate parameters / shared parameters.
    pub ratio: f64,
}

/// Counts shared parameters and the language-specific parameters of each
/// requested language.
pub fn param_overhead(model: &Seq2SeqModel, languages: &[String]) -> Result<Overhead> {
    if model.config().ffn_variant != FfnVariant::Clsr {
        return contract("parameter overhead is defined for CLSR models");
    }
    let mut shared = 0;
    let mut per_language: BTreeMap<String, usize> = languages.iter().map(|l| (l.clone(), 0)).collect();
    for (_, p) in model.store().iter() {
        match &p.owner {
            Owner::Shared => shared += p.tensor.len(),
            Owner::Language(l) => {
                if let Some(c) = per_language.get_mut(l) {
                    *c += p.tensor.len();
                }
            }
        }
    }
    let ls: usize = per_language.values().sum();
    Ok(Overhead {
        total: shared + ls,
        shared,
        per_language,
        ratio: ls as f64 / shared as f64,
    })
}
