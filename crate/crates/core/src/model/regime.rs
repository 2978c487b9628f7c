//! Fine-tuning regimes and the trainable-parameter masks they imply.

use super::clsr::FfnSlot;
use super::config::FfnVariant;
use super::params::{Owner, ParamKind};
use super::transformer::Seq2SeqModel;
use crate::error::{contract, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "ft")]
    Ft,
    #[serde(rename = "lora-ft")]
    LoraFt,
    #[serde(rename = "clsr-ft")]
    ClsrFt,
    #[serde(rename = "distilwhisper")]
    DistilWhisper,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Ft, Regime::LoraFt, Regime::ClsrFt, Regime::DistilWhisper];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Ft => "ft",
            Regime::LoraFt => "lora-ft",
            Regime::ClsrFt => "clsr-ft",
            Regime::DistilWhisper => "distilwhisper",
        }
    }

    /// Feed-forward variant the student must carry under this regime.
    pub fn variant(self) -> FfnVariant {
        match self {
            Regime::Ft => FfnVariant::Dense,
            Regime::LoraFt => FfnVariant::Lora,
            Regime::ClsrFt | Regime::DistilWhisper => FfnVariant::Clsr,
        }
    }

    pub fn uses_gates(self) -> bool {
        self.variant() == FfnVariant::Clsr
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown regime {s}")))
    }
}

/// Which named parameters a regime updates.
///
/// FT: everything. LoRA-FT: adapter weights only. CLSR-FT and
/// DistilWhisper: the language-specific feed-forward copies and gates of
/// `language`, nothing else.
pub fn trainable_mask(model: &Seq2SeqModel, regime: Regime, language: &str) -> Result<BTreeMap<String, bool>> {
    if model.config().ffn_variant != regime.variant() {
        return contract(format!(
            "regime {regime} needs a {:?} model, got {:?}",
            regime.variant(),
            model.config().ffn_variant
        ));
    }
    if regime.uses_gates() && !model.registered_languages().iter().any(|l| l == language) {
        return Err(Error::Routing(format!(
            "language {language} is not registered (registered: {:?})",
            model.registered_languages()
        )));
    }
    let active: HashSet<_> = match regime {
        Regime::Ft => model.store().iter().map(|(id, _)| id).collect(),
        Regime::LoraFt => model
            .slot_list()
            .into_iter()
            .filter_map(|s| match s {
                FfnSlot::Lora { adapter, .. } => Some(adapter.ids()),
                _ => None,
            })
            .flatten()
            .collect(),
        Regime::ClsrFt | Regime::DistilWhisper => model
            .store()
            .iter()
            .filter(|(_, p)| {
                p.owner == Owner::Language(language.to_string())
                    && matches!(p.kind, ParamKind::LanguageFfn | ParamKind::Gate)
            })
            .map(|(id, _)| id)
            .collect(),
    };
    Ok(model
        .store()
        .iter()
        .map(|(id, p)| (p.name.clone(), active.contains(&id)))
        .collect())
}

/// Sets every parameter's gradient flag from `mask`.
pub fn apply_mask(model: &mut Seq2SeqModel, mask: &BTreeMap<String, bool>) -> Result<()> {
    let store = model.store_mut();
    for p in store.iter_mut() {
        let on = *mask
            .get(&p.name)
            .ok_or_else(|| Error::Contract(format!("mask has no entry for {}", p.name)))?;
        p.tensor.set_requires_grad(on);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.name().parse::<Regime>().unwrap(), r);
            assert_eq!(r.to_string(), r.name());
        }
        assert_eq!("DistilWhisper".parse::<Regime>().unwrap(), Regime::DistilWhisper);
        assert!(matches!("full".parse::<Regime>(), Err(Error::Config(_))));
        assert!(Regime::ClsrFt.uses_gates() && !Regime::LoraFt.uses_gates());
    }
}
