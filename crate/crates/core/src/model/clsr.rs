//! Conditional language-specific routing for feed-forward slots.
//!
//! A [`ClsrLayer`] keeps the pretrained feed-forward block as a frozen
//! shared path and, per registered language, a language-specific copy plus a
//! gate network. Each token is mixed as
//! `g · ls(z) + (1 − g) · shared(z)` with `g` produced by the language's gate.
//! Training gates are `sigmoid(logit + ε)` with `ε ~ N(0, σ(step)²)` and
//! `σ` ramping linearly from 0 to `noise_sigma_max`; inference gates are hard
//! (`logit > 0` selects the language path, ties go shared).

use super::layers::{Ffn, Linear};
use super::params::{Owner, ParamId, ParamKind, ParamStore};
use crate::error::{contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum GateMode {
    Train,
    Infer,
    /// Every gate pinned to the given value, with no gradient to the gate.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSchedule {
    pub budget: f64,
    pub skip_prob: f64,
    pub noise_sigma_max: f64,
    pub total_steps: usize,
    pub mode: GateMode,
}

impl Default for GateSchedule {
    fn default() -> Self {
        Self {
            budget: 0.5,
            skip_prob: 0.2,
            noise_sigma_max: 1.0,
            total_steps: 1,
            mode: GateMode::Infer,
        }
    }
}

impl GateSchedule {
    pub fn infer() -> Self {
        Self {
            mode: GateMode::Infer,
            ..Self::default()
        }
    }

    pub fn fixed(g: f64) -> Self {
        Self {
            mode: GateMode::Fixed(g),
            ..Self::default()
        }
    }

    /// Noise standard deviation at `step`: `noise_sigma_max · step / total_steps`.
    pub fn noise_std(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        self.noise_sigma_max * step.min(self.total_steps) as f64 / self.total_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.budget) || !(0.0..=1.0).contains(&self.skip_prob) {
            return Err(Error::Parameter(format!(
                "budget {} and skip probability {} must lie in [0, 1]",
                self.budget, self.skip_prob
            )));
        }
        if !(self.noise_sigma_max >= 0.0) {
            return Err(Error::Parameter("noise_sigma_max must be non-negative".into()));
        }
        Ok(())
    }
}

/// Gate values for one routed sublayer.
#[derive(Debug, Clone)]
pub struct GateOutput {
    /// `[B, T]` gate values in `[0, 1]`.
    pub g: Var,
    /// Tokens that enter the budget accounting: not padding, not skipped.
    pub counted: Vec<bool>,
}

/// Turns per-token gate logits into gate values.
///
/// `pad` marks padding positions (never counted). In training mode each
/// token independently draws Gaussian noise and, with probability
/// `skip_prob`, is skipped: its gate is forced to 0 and it is left out of
/// the budget accounting.
pub fn gate_activation(
    g: &mut Graph,
    logit: Var,
    schedule: &GateSchedule,
    step: usize,
    pad: &[bool],
    rng: Option<&mut dyn RngCore>,
) -> Result<GateOutput> {
    let shape = g.shape(logit).to_vec();
    let n = g.value(logit).len();
    if pad.len() != n {
        return Err(Error::Dimension(format!("pad mask of length {} for gate shape {shape:?}", pad.len())));
    }
    match schedule.mode {
        GateMode::Infer => {
            let hard = g.value(logit).iter().map(|&l| if l > 0.0 { 1.0 } else { 0.0 }).collect();
            let gv = g.constant(&shape, hard)?;
            Ok(GateOutput {
                g: gv,
                counted: pad.iter().map(|p| !p).collect(),
            })
        }
        GateMode::Fixed(value) => {
            let gv = g.constant(&shape, vec![value; n])?;
            Ok(GateOutput {
                g: gv,
                counted: pad.iter().map(|p| !p).collect(),
            })
        }
        GateMode::Train => {
            if step > schedule.total_steps {
                return contract(format!(
                    "gate step {step} beyond schedule length {}",
                    schedule.total_steps
                ));
            }
            let Some(rng) = rng else {
                return contract("training-mode gates need a random source");
            };
            let sigma = schedule.noise_std(step);
            let mut noise = Vec::with_capacity(n);
            let mut keep = Vec::with_capacity(n);
            for _ in 0..n {
                let eps: f64 = StandardNormal.sample(rng);
                noise.push(sigma * eps);
                let skipped = schedule.skip_prob > 0.0 && rng.gen::<f64>() < schedule.skip_prob;
                keep.push(!skipped);
            }
            let noise = g.constant(&shape, noise)?;
            let noisy = g.add(logit, noise)?;
            let soft = g.sigmoid(noisy);
            let counted: Vec<bool> = keep.iter().zip(pad).map(|(&k, &p)| k && !p).collect();
            let gv = if keep.iter().all(|&k| k) {
                soft
            } else {
                let keep_v = g.constant(&shape, keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect())?;
                g.mul(soft, keep_v)?
            };
            Ok(GateOutput { g: gv, counted })
        }
    }
}

/// Two-layer bottleneck producing one logit per token.
#[derive(Debug, Clone)]
pub struct GateNet {
    pub down: Linear,
    pub up: Linear,
}

impl GateNet {
    /// Down map ~ N(0, 1/d_model); up map and biases zero, so the initial logit
    /// is exactly 0.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, language: &str, d_model: usize, d_gate: usize, rng: &mut R) -> Result<Self> {
        let owner = Owner::Language(language.to_string());
        Ok(Self {
            down: Linear::with_init(
                store,
                &format!("{name}.down"),
                owner.clone(),
                ParamKind::Gate,
                d_model,
                d_gate,
                true,
                Tensor::randn(&[d_model, d_gate], (1.0 / d_model as f64).sqrt(), rng),
            )?,
            up: Linear::with_init(store, &format!("{name}.up"), owner, ParamKind::Gate, d_gate, 1, true, Tensor::zeros(&[d_gate, 1]))?,
        })
    }

    /// `[B, T, d] → [B, T]` logits.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        let h = self.down.forward(g, store, z)?;
        let h = g.relu(h);
        let l = self.up.forward(g, store, h)?;
        g.reshape(l, &s[..s.len() - 1])
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.down.ids();
        v.extend(self.up.ids());
        v
    }
}

#[derive(Debug, Clone)]
pub struct LanguageExpert {
    pub ffn: Ffn,
    pub gate: GateNet,
}

#[derive(Debug, Clone)]
pub struct ClsrLayer {
    pub prefix: String,
    pub shared: Ffn,
    pub experts: BTreeMap<String, LanguageExpert>,
    pub d_model: usize,
    pub d_gate: usize,
}

impl ClsrLayer {
    pub fn from_shared(store: &mut ParamStore, prefix: &str, shared: Ffn, d_model: usize, d_gate: usize) -> Self {
        for id in shared.ids() {
            store.set_trainable(id, false);
        }
        Self {
            prefix: prefix.to_string(),
            shared,
            experts: BTreeMap::new(),
            d_model,
            d_gate,
        }
    }

    /// Adds a language: its feed-forward copies the shared weights bit for
    /// bit, its gate is freshly initialised, and the shared path is frozen.
    pub fn init_ls_from_shared<R: Rng + ?Sized>(&mut self, store: &mut ParamStore, language: &str, rng: &mut R) -> Result<()> {
        if self.experts.contains_key(language) {
            return contract(format!("language {language} already registered in {}", self.prefix));
        }
        let owner = Owner::Language(language.to_string());
        let ffn = Ffn::copy_of(store, &self.shared, &format!("{}.ls.{language}", self.prefix), owner, ParamKind::LanguageFfn)?;
        let gate = GateNet::new(store, &format!("{}.gate.{language}", self.prefix), language, self.d_model, self.d_gate, rng)?;
        for id in self.shared.ids() {
            store.set_trainable(id, false);
        }
        self.experts.insert(language.to_string(), LanguageExpert { ffn, gate });
        Ok(())
    }

    pub fn expert(&self, language: &str) -> Result<&LanguageExpert> {
        self.experts.get(language).ok_or_else(|| {
            Error::Routing(format!(
                "language {language} is not registered in {} (registered: {:?})",
                self.prefix,
                self.experts.keys().collect::<Vec<_>>()
            ))
        })
    }

    pub fn gate_logit(&self, g: &mut Graph, store: &ParamStore, z: Var, language: &str) -> Result<Var> {
        self.expert(language)?.gate.logits(g, store, z)
    }

    /// Returns the mixed output and the gate values used.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        language: &str,
        schedule: &GateSchedule,
        step: usize,
        pad: &[bool],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(Var, GateOutput)> {
        let expert = self.expert(language)?;
        let logit = expert.gate.logits(g, store, z)?;
        let gate = gate_activation(g, logit, schedule, step, pad, rng)?;
        let shared = self.shared.forward(g, store, z)?;
        let ls = expert.ffn.forward(g, store, z)?;
        let out = mix(g, gate.g, ls, shared)?;
        Ok((out, gate))
    }
}

/// `g · ls + (1 − g) · shared` with `g: [B, T]`, paths `[B, T, d]`.
pub fn mix(g: &mut Graph, gate: Var, ls: Var, shared: Var) -> Result<Var> {
    let mut s = g.shape(gate).to_vec();
    s.push(1);
    let g3 = g.reshape(gate, &s)?;
    let neg = g.scale(g3, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let a = g.mul(g3, ls)?;
    let b = g.mul(one_minus, shared)?;
    g.add(a, b)
}

/// Low-rank branch added in parallel to a feed-forward block:
/// `ffn(z) + (α / r) · (z · down) · up`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub scaling: f64,
}

impl LoraAdapter {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_model: usize, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Parameter("LoRA rank must be at least 1".into()));
        }
        let std = 1.0 / (d_model as f64).sqrt();
        let down = store.add(format!("{name}.down"), Owner::Shared, ParamKind::Lora, Tensor::randn(&[d_model, rank], std, rng))?;
        let up = store.add(format!("{name}.up"), Owner::Shared, ParamKind::Lora, Tensor::zeros(&[rank, d_model]))?;
        Ok(Self {
            down,
            up,
            rank,
            scaling: alpha / rank as f64,
        })
    }

    pub fn branch(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let d = store.bind(g, self.down);
        let u = store.bind(g, self.up);
        let h = g.matmul(z, d)?;
        let h = g.matmul(h, u)?;
        Ok(g.scale(h, self.scaling))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.down, self.up]
    }
}

pub fn lora_forward(g: &mut Graph, store: &ParamStore, z: Var, base: &Ffn, adapter: &LoraAdapter) -> Result<Var> {
    let b = base.forward(g, store, z)?;
    let a = adapter.branch(g, store, z)?;
    g.add(b, a)
}

/// What sits in a transformer block's feed-forward position.
#[derive(Debug, Clone)]
pub enum FfnSlot {
    Dense(Ffn),
    Lora { base: Ffn, adapter: LoraAdapter },
    Clsr(ClsrLayer),
}

impl FfnSlot {
    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            FfnSlot::Dense(f) => f.ids(),
            FfnSlot::Lora { base, adapter } => {
                let mut v = base.ids();
                v.extend(adapter.ids());
                v
            }
            FfnSlot::Clsr(c) => {
                let mut v = c.shared.ids();
                for e in c.experts.values() {
                    v.extend(e.ffn.ids());
                    v.extend(e.gate.ids());
                }
                v
            }
        }
    }
}
