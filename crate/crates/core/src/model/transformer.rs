//! Pre-norm encoder-decoder transformer with pluggable feed-forward slots.

use super::clsr::{ClsrLayer, FfnSlot, GateMode, GateNet, GateSchedule, LoraAdapter};
use super::config::{FfnVariant, ModelConfig, BOS, EOS, PAD};
use super::layers::{positional_encoding, Ffn, LayerNorm, Linear, MultiHeadAttention};
use super::params::{Owner, ParamId, ParamKind, ParamStore};
use crate::error::{contract, dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Encoder,
    Decoder,
}

/// Gate values of one routed sublayer for one forward pass.
#[derive(Debug, Clone)]
pub struct GateEntry {
    pub side: Side,
    pub layer: usize,
    /// `[B, T]`.
    pub g: Var,
    /// Not padding and not skipped.
    pub counted: Vec<bool>,
    pub pad: Vec<bool>,
}

pub type GateTrace = Vec<GateEntry>;

/// How routed feed-forward slots behave during a forward pass.
pub struct Routing<'a> {
    pub language: Option<&'a str>,
    pub schedule: GateSchedule,
    pub step: usize,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Routing<'a> {
    /// Hard gates, no randomness.
    pub fn infer(language: Option<&'a str>) -> Self {
        Self {
            language,
            schedule: GateSchedule::infer(),
            step: 0,
            rng: None,
        }
    }

    pub fn fixed(language: Option<&'a str>, g: f64) -> Self {
        Self {
            language,
            schedule: GateSchedule::fixed(g),
            step: 0,
            rng: None,
        }
    }

    pub fn train(language: Option<&'a str>, schedule: GateSchedule, step: usize, rng: &'a mut dyn RngCore) -> Self {
        Self {
            language,
            schedule: GateSchedule {
                mode: GateMode::Train,
                ..schedule
            },
            step,
            rng: Some(rng),
        }
    }
}

/// A padded teacher-forced batch.
///
/// Decoder input rows are `[BOS, tag, y1 … yn]`; output rows are
/// `[PAD, y1 … yn, EOS]` so position 0 carries no loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub src: Vec<usize>,
    pub src_len: usize,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_len: usize,
    pub rows: usize,
}

impl Batch {
    /// `pairs` are `(source ids, target content ids, language tag id)`.
    pub fn new(pairs: &[(&[usize], &[usize], usize)]) -> Result<Self> {
        if pairs.is_empty() {
            return contract("empty batch");
        }
        if pairs.iter().any(|(s, _, _)| s.is_empty()) {
            return contract("source sequences must be non-empty");
        }
        let src_len = pairs.iter().map(|p| p.0.len()).max().unwrap();
        let tgt_len = pairs.iter().map(|p| p.1.len()).max().unwrap() + 2;
        let rows = pairs.len();
        let mut src = vec![PAD; rows * src_len];
        let mut tgt_in = vec![PAD; rows * tgt_len];
        let mut tgt_out = vec![PAD; rows * tgt_len];
        for (r, (s, t, tag)) in pairs.iter().enumerate() {
            src[r * src_len..r * src_len + s.len()].copy_from_slice(s);
            let row_in = &mut tgt_in[r * tgt_len..(r + 1) * tgt_len];
            row_in[0] = BOS;
            row_in[1] = *tag;
            row_in[2..2 + t.len()].copy_from_slice(t);
            let row_out = &mut tgt_out[r * tgt_len..(r + 1) * tgt_len];
            row_out[1..1 + t.len()].copy_from_slice(t);
            row_out[1 + t.len()] = EOS;
        }
        Ok(Self {
            src,
            src_len,
            tgt_in,
            tgt_out,
            tgt_len,
            rows,
        })
    }

    pub fn src_pad(&self) -> Vec<bool> {
        self.src.iter().map(|&t| t == PAD).collect()
    }

    pub fn tgt_pad(&self) -> Vec<bool> {
        self.tgt_in.iter().map(|&t| t == PAD).collect()
    }

    /// Positions that carry a prediction target.
    pub fn loss_mask(&self) -> Vec<bool> {
        self.tgt_out.iter().map(|&t| t != PAD).collect()
    }
}

pub struct ForwardOutput {
    /// `[B, T, V]`.
    pub logits: Var,
    pub gates: GateTrace,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FfnSlot,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ffn: FfnSlot,
}

#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    store: ParamStore,
    embed: ParamId,
    enc: Vec<EncoderLayer>,
    dec: Vec<DecoderLayer>,
    enc_norm: Option<LayerNorm>,
    dec_norm: Option<LayerNorm>,
    out: Linear,
}

fn layer_prefix(side: Side, i: usize) -> String {
    match side {
        Side::Encoder => format!("enc.{i}"),
        Side::Decoder => format!("dec.{i}"),
    }
}

impl Seq2SeqModel {
    /// Builds a freshly initialised model. A `clsr` config starts with no
    /// languages registered; a `lora` config starts with zero adapters.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut store = ParamStore::new();
        let embed = store.add(
            "embed",
            Owner::Shared,
            ParamKind::Base,
            Tensor::randn(&[config.vocab_size, d], 1.0, rng),
        )?;
        let mut enc = Vec::new();
        for i in 0..config.n_enc_layers {
            let p = layer_prefix(Side::Encoder, i);
            enc.push(EncoderLayer {
                ln1: LayerNorm::new(&mut store, &format!("{p}.ln1"), d)?,
                attn: MultiHeadAttention::new(&mut store, &format!("{p}.attn"), d, config.n_heads, rng)?,
                ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), d)?,
                ffn: FfnSlot::Dense(Ffn::new(&mut store, &format!("{p}.ffn"), Owner::Shared, ParamKind::Base, d, config.d_ff, rng)?),
            });
        }
        let mut dec = Vec::new();
        for i in 0..config.n_dec_layers {
            let p = layer_prefix(Side::Decoder, i);
            dec.push(DecoderLayer {
                ln1: LayerNorm::new(&mut store, &format!("{p}.ln1"), d)?,
                self_attn: MultiHeadAttention::new(&mut store, &format!("{p}.self_attn"), d, config.n_heads, rng)?,
                ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), d)?,
                cross_attn: MultiHeadAttention::new(&mut store, &format!("{p}.cross_attn"), d, config.n_heads, rng)?,
                ln3: LayerNorm::new(&mut store, &format!("{p}.ln3"), d)?,
                ffn: FfnSlot::Dense(Ffn::new(&mut store, &format!("{p}.ffn"), Owner::Shared, ParamKind::Base, d, config.d_ff, rng)?),
            });
        }
        let enc_norm = if config.n_enc_layers > 0 {
            Some(LayerNorm::new(&mut store, "enc.norm", d)?)
        } else {
            None
        };
        let dec_norm = if config.n_dec_layers > 0 {
            Some(LayerNorm::new(&mut store, "dec.norm", d)?)
        } else {
            None
        };
        let out = Linear::new(&mut store, "out", Owner::Shared, ParamKind::Base, d, config.vocab_size, true, rng)?;
        for p in store.iter_mut() {
            p.tensor.set_requires_grad(true);
        }
        let variant = config.ffn_variant;
        let mut model = Self {
            config: ModelConfig {
                ffn_variant: FfnVariant::Dense,
                ..config
            },
            store,
            embed,
            enc,
            dec,
            enc_norm,
            dec_norm,
            out,
        };
        match variant {
            FfnVariant::Dense => {}
            FfnVariant::Lora => model.convert_to_lora(rng)?,
            FfnVariant::Clsr => model.convert_to_clsr(),
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn slots_mut(&mut self) -> impl Iterator<Item = &mut FfnSlot> {
        self.enc
            .iter_mut()
            .map(|l| &mut l.ffn)
            .chain(self.dec.iter_mut().map(|l| &mut l.ffn))
    }

    fn slots(&self) -> impl Iterator<Item = (Side, usize, &FfnSlot)> {
        self.enc
            .iter()
            .enumerate()
            .map(|(i, l)| (Side::Encoder, i, &l.ffn))
            .chain(self.dec.iter().enumerate().map(|(i, l)| (Side::Decoder, i, &l.ffn)))
    }

    /// Every CLSR layer in encoder-then-decoder order.
    pub fn clsr_layers(&self) -> Vec<(Side, usize, &ClsrLayer)> {
        self.slots()
            .filter_map(|(s, i, slot)| match slot {
                FfnSlot::Clsr(c) => Some((s, i, c)),
                _ => None,
            })
            .collect()
    }

    fn convert_to_lora<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if self.config.ffn_variant != FfnVariant::Dense {
            return contract("only a dense model can be wrapped with LoRA adapters");
        }
        let (d, r, a) = (self.config.d_model, self.config.lora_rank, self.config.lora_alpha);
        let names: Vec<String> = self
            .enc
            .iter()
            .enumerate()
            .map(|(i, _)| layer_prefix(Side::Encoder, i))
            .chain(self.dec.iter().enumerate().map(|(i, _)| layer_prefix(Side::Decoder, i)))
            .collect();
        let mut store = std::mem::take(&mut self.store);
        for (slot, prefix) in self.slots_mut().zip(names) {
            let FfnSlot::Dense(base) = slot.clone() else { unreachable!() };
            let adapter = LoraAdapter::new(&mut store, &format!("{prefix}.ffn.lora"), d, r, a, rng)?;
            *slot = FfnSlot::Lora { base, adapter };
        }
        self.store = store;
        self.config.ffn_variant = FfnVariant::Lora;
        Ok(())
    }

    fn convert_to_clsr(&mut self) {
        let (d, dg) = (self.config.d_model, self.config.d_gate());
        let names: Vec<String> = self
            .enc
            .iter()
            .enumerate()
            .map(|(i, _)| layer_prefix(Side::Encoder, i))
            .chain(self.dec.iter().enumerate().map(|(i, _)| layer_prefix(Side::Decoder, i)))
            .collect();
        let mut store = std::mem::take(&mut self.store);
        for (slot, prefix) in self.slots_mut().zip(names) {
            let FfnSlot::Dense(shared) = slot.clone() else { unreachable!() };
            *slot = FfnSlot::Clsr(ClsrLayer::from_shared(&mut store, &format!("{prefix}.ffn"), shared, d, dg));
        }
        self.store = store;
        self.config.ffn_variant = FfnVariant::Clsr;
    }

    /// Copy of a dense model with zero-initialised LoRA adapters on every
    /// feed-forward slot.
    pub fn to_lora<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self> {
        let mut m = self.clone();
        m.convert_to_lora(rng)?;
        Ok(m)
    }

    /// Copy of a dense model whose feed-forward slots become CLSR layers
    /// with the given languages registered.
    pub fn to_clsr<R: Rng + ?Sized>(&self, languages: &[&str], rng: &mut R) -> Result<Self> {
        if self.config.ffn_variant != FfnVariant::Dense {
            return contract("only a dense model can be converted to CLSR");
        }
        let mut m = self.clone();
        m.convert_to_clsr();
        for l in languages {
            m.register_language(l, rng)?;
        }
        Ok(m)
    }

    /// Registers `language` in every CLSR layer (initialised from shared).
    pub fn register_language<R: Rng + ?Sized>(&mut self, language: &str, rng: &mut R) -> Result<()> {
        if self.config.ffn_variant != FfnVariant::Clsr {
            return contract("languages can only be registered on a CLSR model");
        }
        if self.config.tag_id(language).is_none() {
            return Err(Error::Routing(format!("language {language} has no tag in the vocabulary")));
        }
        let mut store = std::mem::take(&mut self.store);
        let res = self.slots_mut().try_for_each(|slot| match slot {
            FfnSlot::Clsr(c) => c.init_ls_from_shared(&mut store, language, rng),
            _ => Ok(()),
        });
        self.store = store;
        res
    }

    pub fn registered_languages(&self) -> Vec<String> {
        self.clsr_layers()
            .first()
            .map(|(_, _, c)| c.experts.keys().cloned().collect())
            .unwrap_or_default()
    }

    fn check_routing(&self, language: Option<&str>) -> Result<()> {
        if self.config.ffn_variant != FfnVariant::Clsr {
            return Ok(());
        }
        let Some(l) = language else {
            return Err(Error::Routing("a CLSR model needs a language to route".into()));
        };
        if self.clsr_layers().iter().any(|(_, _, c)| !c.experts.contains_key(l)) {
            return Err(Error::Routing(format!(
                "language {l} is not registered (registered: {:?})",
                self.registered_languages()
            )));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, ids: &[usize], rows: usize, len: usize) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return dim_err(format!("token id {bad} ≥ vocab size {}", self.config.vocab_size));
        }
        let table = self.store.bind(g, self.embed);
        let x = g.gather(table, ids, &[rows, len])?;
        let pe = g.constant(&[len, self.config.d_model], positional_encoding(len, self.config.d_model))?;
        g.add(x, pe)
    }

    fn run_slot(
        &self,
        g: &mut Graph,
        slot: &FfnSlot,
        side: Side,
        layer: usize,
        x: Var,
        pad: &[bool],
        routing: &mut Routing<'_>,
        trace: &mut GateTrace,
    ) -> Result<Var> {
        match slot {
            FfnSlot::Dense(f) => f.forward(g, &self.store, x),
            FfnSlot::Lora { base, adapter } => super::clsr::lora_forward(g, &self.store, x, base, adapter),
            FfnSlot::Clsr(c) => {
                let lang = routing
                    .language
                    .ok_or_else(|| Error::Routing("a CLSR model needs a language to route".into()))?;
                let (out, gate) = c.forward(
                    g,
                    &self.store,
                    x,
                    lang,
                    &routing.schedule,
                    routing.step,
                    pad,
                    match routing.rng {
                        Some(ref mut r) => Some(&mut **r as &mut dyn RngCore),
                        None => None,
                    },
                )?;
                trace.push(GateEntry {
                    side,
                    layer,
                    g: gate.g,
                    counted: gate.counted,
                    pad: pad.to_vec(),
                });
                Ok(out)
            }
        }
    }

    /// Encoder hidden states `[B, S, d]` for padded source ids `[B, S]`.
    pub fn encode(&self, g: &mut Graph, src: &[usize], rows: usize, len: usize, routing: &mut Routing<'_>) -> Result<(Var, GateTrace)> {
        self.check_routing(routing.language)?;
        if src.len() != rows * len {
            return dim_err(format!("{} source ids for a {rows}×{len} batch", src.len()));
        }
        let pad: Vec<bool> = src.iter().map(|&t| t == PAD).collect();
        let mut mask = Vec::with_capacity(rows * len * len);
        for r in 0..rows {
            for _ in 0..len {
                mask.extend_from_slice(&pad[r * len..(r + 1) * len]);
            }
        }
        let mut trace = Vec::new();
        let mut x = self.embed(g, src, rows, len)?;
        for (i, layer) in self.enc.iter().enumerate() {
            let h = layer.ln1.forward(g, &self.store, x)?;
            let a = layer.attn.forward(g, &self.store, h, h, &mask)?;
            x = g.add(x, a)?;
            let h = layer.ln2.forward(g, &self.store, x)?;
            let f = self.run_slot(g, &layer.ffn, Side::Encoder, i, h, &pad, routing, &mut trace)?;
            x = g.add(x, f)?;
        }
        if let Some(n) = &self.enc_norm {
            x = n.forward(g, &self.store, x)?;
        }
        Ok((x, trace))
    }

    /// Next-token logits `[B, T, V]` for decoder inputs `[B, T]`.
    pub fn decode(
        &self,
        g: &mut Graph,
        tgt_in: &[usize],
        rows: usize,
        len: usize,
        enc: Var,
        src_pad: &[bool],
        routing: &mut Routing<'_>,
    ) -> Result<(Var, GateTrace)> {
        self.check_routing(routing.language)?;
        if tgt_in.len() != rows * len {
            return dim_err(format!("{} decoder ids for a {rows}×{len} batch", tgt_in.len()));
        }
        if let Some(lang) = routing.language {
            let tag = self
                .config
                .tag_id(lang)
                .ok_or_else(|| Error::Routing(format!("language {lang} has no tag in the vocabulary")))?;
            if len >= 2 && (0..rows).any(|r| tgt_in[r * len + 1] != tag) {
                return Err(Error::Routing(format!("decoder tag disagrees with routing language {lang}")));
            }
        }
        let es = g.shape(enc).to_vec();
        let src_len = es[1];
        if es[0] != rows || src_pad.len() != rows * src_len {
            return dim_err(format!("encoder states {es:?} do not match a batch of {rows}"));
        }
        let pad: Vec<bool> = tgt_in.iter().map(|&t| t == PAD).collect();
        let mut self_mask = Vec::with_capacity(rows * len * len);
        let mut cross_mask = Vec::with_capacity(rows * len * src_len);
        for r in 0..rows {
            for i in 0..len {
                for j in 0..len {
                    self_mask.push(j > i || pad[r * len + j]);
                }
                cross_mask.extend_from_slice(&src_pad[r * src_len..(r + 1) * src_len]);
            }
        }
        let mut trace = Vec::new();
        let mut y = self.embed(g, tgt_in, rows, len)?;
        for (i, layer) in self.dec.iter().enumerate() {
            let h = layer.ln1.forward(g, &self.store, y)?;
            let a = layer.self_attn.forward(g, &self.store, h, h, &self_mask)?;
            y = g.add(y, a)?;
            let h = layer.ln2.forward(g, &self.store, y)?;
            let c = layer.cross_attn.forward(g, &self.store, h, enc, &cross_mask)?;
            y = g.add(y, c)?;
            let h = layer.ln3.forward(g, &self.store, y)?;
            let f = self.run_slot(g, &layer.ffn, Side::Decoder, i, h, &pad, routing, &mut trace)?;
            y = g.add(y, f)?;
        }
        if let Some(n) = &self.dec_norm {
            y = n.forward(g, &self.store, y)?;
        }
        let logits = self.out.forward(g, &self.store, y)?;
        Ok((logits, trace))
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch, routing: &mut Routing<'_>) -> Result<ForwardOutput> {
        let (enc, mut gates) = self.encode(g, &batch.src, batch.rows, batch.src_len, routing)?;
        let (logits, dec_gates) = self.decode(
            g,
            &batch.tgt_in,
            batch.rows,
            batch.tgt_len,
            enc,
            &batch.src_pad(),
            routing,
        )?;
        gates.extend(dec_gates);
        Ok(ForwardOutput { logits, gates })
    }

    /// Greedy decoding of one source sequence; returns content ids only.
    pub fn greedy_decode(&self, source: &[usize], language: &str, max_len: usize) -> Result<Vec<usize>> {
        Ok(self.greedy_decode_batch(&[source], language, max_len)?.remove(0))
    }

    /// Greedy decoding of several sources in lockstep with hard gates.
    pub fn greedy_decode_batch(&self, sources: &[&[usize]], language: &str, max_len: usize) -> Result<Vec<Vec<usize>>> {
        if max_len > self.config.max_seq_len {
            return contract(format!("max_len {max_len} exceeds max_seq_len {}", self.config.max_seq_len));
        }
        let tag = self
            .config
            .tag_id(language)
            .ok_or_else(|| Error::Routing(format!("language {language} has no tag in the vocabulary")))?;
        let rows = sources.len();
        let mut out = vec![Vec::new(); rows];
        if rows == 0 || max_len == 0 {
            return Ok(out);
        }
        if sources.iter().any(|s| s.is_empty()) {
            return contract("source sequences must be non-empty");
        }
        let src_len = sources.iter().map(|s| s.len()).max().unwrap();
        let mut src = vec![PAD; rows * src_len];
        for (r, s) in sources.iter().enumerate() {
            src[r * src_len..r * src_len + s.len()].copy_from_slice(s);
        }
        let src_pad: Vec<bool> = src.iter().map(|&t| t == PAD).collect();
        let mut g = Graph::new();
        let (enc, _) = self.encode(&mut g, &src, rows, src_len, &mut Routing::infer(Some(language)))?;
        let enc_shape = g.shape(enc).to_vec();
        let enc_val = g.value(enc).to_vec();

        let mut prefix: Vec<Vec<usize>> = vec![vec![BOS, tag]; rows];
        let mut done = vec![false; rows];
        let v = self.config.vocab_size;
        while !done.iter().all(|&d| d) {
            let len = prefix[0].len();
            let flat: Vec<usize> = prefix.iter().flatten().copied().collect();
            let mut g = Graph::new();
            let enc = g.constant(&enc_shape, enc_val.clone())?;
            let (logits, _) = self.decode(&mut g, &flat, rows, len, enc, &src_pad, &mut Routing::infer(Some(language)))?;
            let lv = g.value(logits);
            for r in 0..rows {
                let row = &lv[(r * len + len - 1) * v..(r * len + len) * v];
                let next = argmax(row);
                prefix[r].push(next);
                if done[r] {
                    continue;
                }
                if next == EOS {
                    done[r] = true;
                } else {
                    out[r].push(next);
                    if out[r].len() >= max_len {
                        done[r] = true;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gate network of one routed sublayer.
    pub fn gate_net(&self, side: Side, layer: usize, language: &str) -> Result<&GateNet> {
        self.clsr_layers()
            .into_iter()
            .find(|(s, i, _)| *s == side && *i == layer)
            .ok_or_else(|| Error::Routing(format!("no CLSR layer at {side:?} {layer}")))?
            .2
            .expert(language)
            .map(|e| &e.gate)
    }

    /// Parameter ids grouped by slot, for regime masks.
    pub(crate) fn slot_list(&self) -> Vec<&FfnSlot> {
        self.slots().map(|(_, _, s)| s).collect()
    }

    /// Skeleton with the same structure for `languages`, values arbitrary.
    pub(crate) fn skeleton(config: &ModelConfig, languages: &[String]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let variant = config.ffn_variant;
        let dense = Self::new(
            ModelConfig {
                ffn_variant: FfnVariant::Dense,
                ..config.clone()
            },
            &mut rng,
        )?;
        match variant {
            FfnVariant::Dense => Ok(dense),
            FfnVariant::Lora => dense.to_lora(&mut rng),
            FfnVariant::Clsr => {
                let langs: Vec<&str> = languages.iter().map(String::as_str).collect();
                dense.to_clsr(&langs, &mut rng)
            }
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
