//! Pretraining and fine-tuning loops, WER evaluation, gate statistics and
//! multi-seed aggregation.

use crate::error::{contract, Error, Result};
use crate::graph::Graph;
use crate::model::{
    apply_mask, param_overhead, trainable_mask, Batch, Checkpoint, FfnVariant, GateMode, GateSchedule, ModelConfig,
    Overhead, ParamId, Regime, Routing, Seq2SeqModel, Side, PAD,
};
use crate::objectives::{combine, cross_entropy_label_smoothing, gate_budget_loss, kd_loss, KdKind, LossBreakdown};
use crate::rng::stream;
use crate::synth::{Corpus, Example, Role, Vocab};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

/// Linear warm-up from 0 to `lr_peak`, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, lr_peak: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        lr_peak * (step as f64 / warmup_steps as f64)
    } else if total_steps == warmup_steps {
        lr_peak
    } else {
        lr_peak * ((total_steps - step) as f64 / (total_steps - warmup_steps) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub kd_kind: KdKind,
    pub regime: Regime,
    pub gate_budget: f64,
    pub skip_prob: f64,
    pub noise_sigma_max: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr_peak: 3e-3,
            warmup_epochs: 1,
            batch_size: 16,
            label_smoothing: 0.1,
            alpha: 2.0,
            temperature: 1.0,
            kd_kind: KdKind::Js,
            regime: Regime::DistilWhisper,
            gate_budget: 0.5,
            skip_prob: 0.2,
            noise_sigma_max: 1.0,
            optimizer: OptimizerKind::Adam,
            grad_clip: 1.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters as published for the full-scale setting: 10 epochs,
    /// peak lr 1e-4, one warm-up epoch, batch 16, smoothing 0.1, α = 2.
    pub fn published() -> Self {
        Self {
            lr_peak: 1e-4,
            optimizer: OptimizerKind::Sgd,
            grad_clip: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return fail(format!(
                "need warmup_epochs < epochs, got {} and {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return fail(format!("lr_peak must be positive, got {}", self.lr_peak));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.alpha >= 0.0) {
            return fail(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.grad_clip >= 0.0) {
            return fail(format!("grad_clip must be non-negative, got {}", self.grad_clip));
        }
        self.gate_schedule(1).validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn gate_schedule(&self, total_steps: usize) -> GateSchedule {
        GateSchedule {
            budget: self.gate_budget,
            skip_prob: self.skip_prob,
            noise_sigma_max: self.noise_sigma_max,
            total_steps,
            mode: GateMode::Train,
        }
    }
}

/// Adam or plain gradient descent over the trainable parameters of a store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    state: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: HashMap::new(),
        }
    }

    /// Applies the accumulated gradients and clears them. A positive `clip`
    /// rescales the gradient to at most that global norm. Returns the norm
    /// before clipping.
    pub fn step(&mut self, model: &mut Seq2SeqModel, lr: f64, clip: f64) -> f64 {
        let store = model.store_mut();
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.tensor.grad().is_some()).map(|(id, _)| id).collect();
        let norm = ids
            .iter()
            .map(|&id| store.tensor(id).grad().unwrap().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let factor = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for id in ids {
            let t = store.tensor_mut(id);
            let grad: Vec<f64> = t.grad().unwrap().iter().map(|g| g * factor).collect();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in t.data_mut().iter_mut().zip(&grad) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = self
                        .state
                        .entry(id)
                        .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
                    for (((w, g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
            t.zero_grad();
        }
        norm
    }
}

/// Shuffled mini-batches for one epoch, keyed by `(seed, epoch)`.
///
/// The shuffled order is cut into windows of 32 batches; each window is
/// sorted by length before batching so rows of a batch pad little, and the
/// batch order is shuffled again.
fn epoch_batches(lengths: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = stream(&[seed, 0xba7c, epoch as u64]);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for window in order.chunks_mut(batch_size * 32) {
        window.sort_by_key(|&i| lengths[i]);
        batches.extend(window.chunks(batch_size).map(|c| c.to_vec()));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Pads a list of examples into one teacher-forced batch.
pub fn make_batch(examples: &[&Example], vocab: &Vocab) -> Result<Batch> {
    let ids: Vec<(Vec<usize>, Vec<usize>, usize)> = examples
        .iter()
        .map(|e| {
            let tag = vocab
                .tag_id(&e.language)
                .ok_or_else(|| Error::Routing(format!("language {} has no tag", e.language)))?;
            Ok((vocab.encode_symbols(&e.source), vocab.encode_symbols(&e.target), tag))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<(&[usize], &[usize], usize)> = ids.iter().map(|(s, t, g)| (s.as_slice(), t.as_slice(), *g)).collect();
    Batch::new(&refs)
}

fn check_vocab(model: &ModelConfig, vocab: &Vocab) -> Result<()> {
    if model.vocab_size != vocab.size() || model.language_ids != vocab.languages {
        return contract(format!(
            "model vocabulary ({} ids, languages {:?}) does not match the corpus vocabulary ({} ids, languages {:?})",
            model.vocab_size,
            model.language_ids,
            vocab.size(),
            vocab.languages
        ));
    }
    Ok(())
}

fn finite(b: &LossBreakdown, what: &str, step: usize) -> Result<()> {
    if b.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{what}: non-finite loss at step {step} ({b:?})")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Multilingual cross-entropy training of a dense model from scratch.
pub fn pretrain(model_config: &ModelConfig, examples: &[Example], vocab: &Vocab, cfg: &TrainConfig) -> Result<(Checkpoint, PretrainReport)> {
    cfg.validate()?;
    model_config.validate()?;
    if model_config.ffn_variant != FfnVariant::Dense {
        return contract("pretraining needs a dense model");
    }
    check_vocab(model_config, vocab)?;
    if examples.is_empty() {
        return contract("empty pretraining corpus");
    }
    let mut model = Seq2SeqModel::new(model_config.clone(), &mut stream(&[cfg.seed, 0x1417]))?;
    let lengths: Vec<usize> = examples.iter().map(|e| e.source.len().max(e.target.len())).collect();
    let mut opt = Optimizer::new(cfg.optimizer);
    let spe = epoch_batches(&lengths, cfg.batch_size, cfg.seed, 0).len();
    let total = cfg.epochs * spe;
    let warmup = cfg.warmup_epochs * spe;
    let mut step = 0;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for idx in epoch_batches(&lengths, cfg.batch_size, cfg.seed, epoch) {
            let rows: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
            let batch = make_batch(&rows, vocab)?;
            let mut g = Graph::new();
            let out = model.forward(&mut g, &batch, &mut Routing::infer(None))?;
            let ce = cross_entropy_label_smoothing(&mut g, out.logits, &batch.tgt_out, cfg.label_smoothing, PAD)?;
            let (loss, b) = combine(&mut g, ce, None, None, 0.0)?;
            finite(&b, "pretraining", step)?;
            let grads = g.backward(loss)?;
            model.store_mut().accumulate(&g, &grads)?;
            step += 1;
            opt.step(&mut model, lr_schedule(step, total, warmup, cfg.lr_peak), cfg.grad_clip);
            sum += b.ce;
        }
        let mean = sum / spe as f64;
        log::info!("pretrain epoch {} ce {:.4}", epoch + 1, mean);
        epoch_loss.push(mean);
    }
    Ok((Checkpoint::from_model(&model), PretrainReport { epoch_loss }))
}

/// The examples one fine-tuning run sees.
#[derive(Debug, Clone)]
pub struct FinetuneData<'a> {
    pub train: Vec<&'a Example>,
    pub validation: Vec<&'a Example>,
    pub test_in: Vec<&'a Example>,
    pub test_out: Vec<&'a Example>,
}

impl<'a> FinetuneData<'a> {
    /// First `size` fine-tuning pairs of `language` plus its evaluation splits.
    pub fn from_corpus(corpus: &'a Corpus, language: &str, size: usize) -> Result<Self> {
        let train: Vec<&Example> = corpus.split(Role::Finetune).for_language(language);
        if train.len() < size {
            return contract(format!(
                "requested {size} fine-tuning pairs but the corpus holds {} for {language}",
                train.len()
            ));
        }
        Ok(Self {
            train: train[..size].to_vec(),
            validation: corpus.split(Role::Validation).for_language(language),
            test_in: corpus.split(Role::TestIn).for_language(language),
            test_out: corpus.split(Role::TestOut).for_language(language),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Step-averaged loss components.
    pub loss: LossBreakdown,
    pub validation_wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub overhead: Option<Overhead>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateUsage {
    /// Open hard gates over all gate decisions.
    pub ratio: f64,
    pub decisions: usize,
    /// `(side, layer) → ratio`, keyed `enc.0`, `dec.1`, ….
    pub per_layer: BTreeMap<String, f64>,
}

/// Everything measured in one fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub language: String,
    pub finetune_size: usize,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Split name → WER.
    pub wer: BTreeMap<String, f64>,
    /// Split name → hard-gate usage; empty for models without gates.
    pub gate_usage: BTreeMap<String, GateUsage>,
    pub params: ParamCounts,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub struct FinetuneOutcome {
    pub model: Seq2SeqModel,
    pub record: RunRecord,
}

/// Teacher logits of each training example at its own (unpadded) length.
fn teacher_logits(teacher: &Seq2SeqModel, examples: &[&Example], vocab: &Vocab) -> Result<Vec<Vec<f64>>> {
    let v = teacher.config().vocab_size;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        let batch = make_batch(chunk, vocab)?;
        let mut g = Graph::new();
        let fo = teacher.forward(&mut g, &batch, &mut Routing::infer(None))?;
        let lv = g.value(fo.logits);
        for (r, e) in chunk.iter().enumerate() {
            let len = e.target.len() + 2;
            let start = r * batch.tgt_len * v;
            out.push(lv[start..start + len * v].to_vec());
        }
    }
    Ok(out)
}

fn student_for(base: &Seq2SeqModel, regime: Regime, language: &str, seed: u64) -> Result<Seq2SeqModel> {
    let mut rng = stream(&[seed, 0x5eed]);
    match regime {
        Regime::Ft => Ok(base.clone()),
        Regime::LoraFt => base.to_lora(&mut rng),
        Regime::ClsrFt | Regime::DistilWhisper => base.to_clsr(&[language], &mut rng),
    }
}

fn snapshot(model: &Seq2SeqModel) -> Vec<Tensor> {
    model.store().iter().map(|(_, p)| p.tensor.clone()).collect()
}

fn restore(model: &mut Seq2SeqModel, snap: &[Tensor]) -> Result<()> {
    let ids: Vec<ParamId> = model.store().iter().map(|(id, _)| id).collect();
    for (id, t) in ids.into_iter().zip(snap) {
        model.store_mut().assign(id, t)?;
    }
    Ok(())
}

/// Fine-tunes a pretrained dense student on one language under `cfg.regime`.
pub fn finetune(
    student: &Checkpoint,
    teacher: Option<&Checkpoint>,
    language: &str,
    data: &FinetuneData<'_>,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    check_vocab(&student.config, vocab)?;
    if student.config.ffn_variant != FfnVariant::Dense {
        return contract("the student checkpoint must be dense");
    }
    if teacher.is_some() != (cfg.kd_kind != KdKind::None) {
        return contract("a teacher is needed exactly when kd_kind is not none");
    }
    if cfg.regime == Regime::DistilWhisper && teacher.is_none() {
        return contract("distilwhisper needs a teacher");
    }
    if data.train.is_empty() || data.validation.is_empty() {
        return contract("fine-tuning needs training and validation pairs");
    }
    let teacher_model = match teacher {
        Some(t) => {
            if t.config.vocab_size != student.config.vocab_size || t.config.language_ids != student.config.language_ids {
                return contract("teacher and student vocabularies differ");
            }
            Some(t.to_model()?)
        }
        None => None,
    };
    let base = student.to_model()?;
    let mut model = student_for(&base, cfg.regime, language, cfg.seed)?;
    let mask = trainable_mask(&model, cfg.regime, language)?;
    apply_mask(&mut model, &mask)?;

    let cached = match &teacher_model {
        Some(t) => teacher_logits(t, &data.train, vocab)?,
        None => Vec::new(),
    };
    let v = model.config().vocab_size;
    let n = data.train.len();
    let lengths: Vec<usize> = data.train.iter().map(|e| e.source.len().max(e.target.len())).collect();
    let spe = epoch_batches(&lengths, cfg.batch_size, cfg.seed, 0).len();
    let total = cfg.epochs * spe;
    let warmup = cfg.warmup_epochs * spe;
    let schedule = cfg.gate_schedule(total);
    let mut gate_rng = stream(&[cfg.seed, 0x9a7e]);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut step = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;

    for epoch in 0..cfg.epochs {
        let mut acc = [0.0; 4];
        for idx in epoch_batches(&lengths, cfg.batch_size, cfg.seed, epoch) {
            let rows: Vec<&Example> = idx.iter().map(|&i| data.train[i]).collect();
            let batch = make_batch(&rows, vocab)?;
            step += 1;
            let mut g = Graph::new();
            let out = {
                let mut routing = Routing::train(Some(language), schedule.clone(), step, &mut gate_rng);
                model.forward(&mut g, &batch, &mut routing)?
            };
            let ce = cross_entropy_label_smoothing(&mut g, out.logits, &batch.tgt_out, cfg.label_smoothing, PAD)?;
            let gb = if out.gates.is_empty() {
                None
            } else {
                Some(gate_budget_loss(&mut g, &out.gates, cfg.gate_budget)?)
            };
            let kd = if cached.is_empty() {
                None
            } else {
                let t = batch.tgt_len;
                let mut tl = vec![0.0; batch.rows * t * v];
                for (r, &i) in idx.iter().enumerate() {
                    let src = &cached[i];
                    tl[r * t * v..r * t * v + src.len()].copy_from_slice(src);
                }
                kd_loss(&mut g, cfg.kd_kind, &tl, out.logits, cfg.temperature, &batch.loss_mask())?
            };
            let (loss, b) = combine(&mut g, ce, gb, kd, cfg.alpha)?;
            finite(&b, "fine-tuning", step)?;
            let grads = g.backward(loss)?;
            model.store_mut().accumulate(&g, &grads)?;
            opt.step(&mut model, lr_schedule(step, total, warmup, cfg.lr_peak), cfg.grad_clip);
            acc[0] += b.ce;
            acc[1] += b.gate_budget;
            acc[2] += b.kd;
            acc[3] += b.total;
        }
        let k = spe as f64;
        let loss = LossBreakdown {
            ce: acc[0] / k,
            gate_budget: acc[1] / k,
            kd: acc[2] / k,
            total: acc[3] / k,
            alpha: cfg.alpha,
        };
        let val = evaluate_wer(&model, &data.validation, language, vocab)?.wer;
        log::info!(
            "{} {} epoch {} loss {:.4} val wer {:.4}",
            cfg.regime,
            language,
            epoch + 1,
            loss.total,
            val
        );
        epochs.push(EpochLog {
            epoch: epoch + 1,
            loss,
            validation_wer: val,
        });
        if best.as_ref().map_or(true, |(w, _, _)| val < *w) {
            best = Some((val, epoch + 1, snapshot(&model)));
        }
    }
    let (_, best_epoch, snap) = best.expect("at least one epoch");
    restore(&mut model, &snap)?;

    let mut wer = BTreeMap::new();
    let mut gate_usage = BTreeMap::new();
    for (name, split) in [("test_in", &data.test_in), ("test_out", &data.test_out)] {
        if split.is_empty() {
            continue;
        }
        wer.insert(name.to_string(), evaluate_wer(&model, split, language, vocab)?.wer);
        if model.config().ffn_variant == FfnVariant::Clsr {
            gate_usage.insert(name.to_string(), gate_usage_stats(&model, split, language, vocab)?);
        }
    }
    let overhead = if model.config().ffn_variant == FfnVariant::Clsr {
        Some(param_overhead(&model, &[language.to_string()])?)
    } else {
        None
    };
    let params = ParamCounts {
        total: model.store().numel(),
        trainable: mask
            .iter()
            .filter(|(_, &on)| on)
            .map(|(name, _)| model.store().by_name(name).map_or(0, |p| p.tensor.len()))
            .sum(),
        overhead,
    };
    for p in model.store_mut().iter_mut() {
        p.tensor.set_requires_grad(false);
    }
    Ok(FinetuneOutcome {
        model,
        record: RunRecord {
            config: cfg.clone(),
            language: language.to_string(),
            finetune_size: n,
            seed: cfg.seed,
            epochs,
            best_epoch,
            wer,
            gate_usage,
            params,
        },
    })
}

/// Lowercases and splits on any whitespace run.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Word-level Levenshtein distance.
pub fn edit_distance<S: PartialEq>(reference: &[S], hypothesis: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub wer: f64,
    pub errors: usize,
    pub reference_words: usize,
    pub pairs: usize,
    /// Pairs left out because their normalized reference is empty.
    pub empty_references: usize,
}

/// Corpus WER over `(reference, hypothesis)` texts.
pub fn word_error_rate<R: AsRef<str>, H: AsRef<str>>(pairs: &[(R, H)]) -> Result<WerReport> {
    let mut errors = 0;
    let mut words = 0;
    let mut empty = 0;
    for (r, h) in pairs {
        let r = normalize(r.as_ref());
        if r.is_empty() {
            empty += 1;
            continue;
        }
        errors += edit_distance(&r, &normalize(h.as_ref()));
        words += r.len();
    }
    if words == 0 {
        return contract("every reference is empty");
    }
    Ok(WerReport {
        wer: errors as f64 / words as f64,
        errors,
        reference_words: words,
        pairs: pairs.len(),
        empty_references: empty,
    })
}

/// Greedy-decodes every example and scores it against its target.
pub fn evaluate_wer(model: &Seq2SeqModel, split: &[&Example], language: &str, vocab: &Vocab) -> Result<WerReport> {
    if split.is_empty() {
        return contract("cannot evaluate an empty split");
    }
    let cap = model.config().max_seq_len.saturating_sub(2);
    let mut pairs = Vec::with_capacity(split.len());
    for chunk in split.chunks(64) {
        let sources: Vec<Vec<usize>> = chunk.iter().map(|e| vocab.encode_symbols(&e.source)).collect();
        let refs: Vec<&[usize]> = sources.iter().map(Vec::as_slice).collect();
        let longest = sources.iter().map(Vec::len).max().unwrap_or(0);
        let hyps = model.greedy_decode_batch(&refs, language, (longest + 4).min(cap))?;
        for (e, h) in chunk.iter().zip(hyps) {
            pairs.push((vocab.text(&vocab.encode_symbols(&e.target)), vocab.text(&h)));
        }
    }
    word_error_rate(&pairs)
}

/// Hard-gate LS usage over a split, teacher-forced on the references.
///
/// Every non-pad encoder and decoder token contributes one decision per
/// routed layer.
pub fn gate_usage_stats(model: &Seq2SeqModel, split: &[&Example], language: &str, vocab: &Vocab) -> Result<GateUsage> {
    if model.config().ffn_variant != FfnVariant::Clsr {
        return contract("gate usage is defined for CLSR models");
    }
    if split.is_empty() {
        return contract("cannot measure gate usage on an empty split");
    }
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for chunk in split.chunks(64) {
        let batch = make_batch(chunk, vocab)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch, &mut Routing::infer(Some(language)))?;
        for e in &out.gates {
            let side = match e.side {
                Side::Encoder => "enc",
                Side::Decoder => "dec",
            };
            let slot = per.entry(format!("{side}.{}", e.layer)).or_default();
            for (&v, &pad) in g.value(e.g).iter().zip(&e.pad) {
                if !pad {
                    slot.0 += usize::from(v == 1.0);
                    slot.1 += 1;
                }
            }
        }
    }
    let open: usize = per.values().map(|p| p.0).sum();
    let decisions: usize = per.values().map(|p| p.1).sum();
    Ok(GateUsage {
        ratio: open as f64 / decisions as f64,
        decisions,
        per_layer: per.into_iter().map(|(k, (o, d))| (k, o as f64 / d as f64)).collect(),
    })
}

/// Mean, sample standard deviation and a normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn summarize(values: &[f64]) -> Result<MetricSummary> {
    let n = values.len();
    if n < 2 {
        return contract(format!("need at least two values to aggregate, got {n}"));
    }
    let pivot = values[0];
    let mean = pivot + values.iter().map(|v| v - pivot).sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let half = 1.96 * std / (n as f64).sqrt();
    Ok(MetricSummary {
        n,
        mean,
        std,
        ci_low: mean - half,
        ci_high: mean + half,
    })
}

/// Per-metric summaries over runs that differ only in their seed.
///
/// Metric names: `wer.<split>` and `gate.<split>`.
pub fn multi_seed_aggregate(records: &[RunRecord]) -> Result<BTreeMap<String, MetricSummary>> {
    if records.len() < 2 {
        return contract(format!("need at least two runs to aggregate, got {}", records.len()));
    }
    let strip = |r: &RunRecord| {
        let mut c = r.config.clone();
        c.seed = 0;
        (c, r.language.clone(), r.finetune_size)
    };
    let first = strip(&records[0]);
    if records.iter().any(|r| strip(r) != first) {
        return contract("runs differ in more than their seed");
    }
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        for (k, w) in &r.wer {
            values.entry(format!("wer.{k}")).or_default().push(*w);
        }
        for (k, u) in &r.gate_usage {
            values.entry(format!("gate.{k}")).or_default().push(u.ratio);
        }
    }
    values
        .into_iter()
        .filter(|(_, v)| v.len() == records.len())
        .map(|(k, v)| Ok((k, summarize(&v)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0, 100, 10, 1e-4), 0.0);
        assert_eq!(lr_schedule(10, 100, 10, 1e-4), 1e-4);
        assert!((lr_schedule(55, 100, 10, 1e-4) - 0.5e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(100, 100, 10, 1e-4), 0.0);
        assert!((lr_schedule(5, 100, 10, 2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn wer_examples() {
        assert_eq!(word_error_rate(&[("a b c", "a b c")]).unwrap().wer, 0.0);
        assert!((word_error_rate(&[("a b c", "a x c")]).unwrap().wer - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(word_error_rate(&[("a b", "")]).unwrap().wer, 1.0);
        assert_eq!(word_error_rate(&[("A  b", " a B ")]).unwrap().wer, 0.0);
        let r = word_error_rate(&[("", "x"), ("a", "a")]).unwrap();
        assert_eq!((r.empty_references, r.reference_words), (1, 1));
        assert!(matches!(word_error_rate(&[("  ", "a")]), Err(Error::Contract(_))));
    }

    #[test]
    fn edit_distance_counts_insertions() {
        assert_eq!(edit_distance(&["a"], &["a", "b", "c"]), 2);
        assert_eq!(edit_distance::<&str>(&[], &[]), 0);
    }

    #[test]
    fn summary_hand_values() {
        let s = summarize(&[15.4, 15.5, 15.6]).unwrap();
        assert!((s.mean - 15.5).abs() < 1e-12);
        assert!((s.std - 0.1).abs() < 1e-12);
        assert!((s.ci_high - s.mean - 1.96 * 0.1 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(summarize(&[2.0, 2.0, 2.0]).unwrap().std, 0.0);
        assert!(summarize(&[1.0]).is_err());
    }

    #[test]
    fn config_rejects_bad_warmup() {
        let c = TrainConfig {
            warmup_epochs: 10,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(TrainConfig::published().validate().is_ok());
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let cfg = ModelConfig {
            d_model: 4,
            n_heads: 1,
            d_ff: 4,
            n_enc_layers: 0,
            n_dec_layers: 0,
            vocab_size: 6,
            max_seq_len: 8,
            language_ids: vec!["a".into()],
            ffn_variant: FfnVariant::Dense,
            lora_rank: 2,
            lora_alpha: 4.0,
        };
        let mut m = Seq2SeqModel::new(cfg, &mut stream(&[1])).unwrap();
        let id = m.store().id("out.w").unwrap();
        let before = m.store().tensor(id).data().to_vec();
        m.store_mut().tensor_mut(id).accumulate_grad(&vec![1.0; before.len()]).unwrap();
        Optimizer::new(OptimizerKind::Sgd).step(&mut m, 0.5, 0.0);
        let after = m.store().tensor(id).data();
        assert!(before.iter().zip(after).all(|(b, a)| (b - 0.5 - a).abs() < 1e-15));
        assert!(m.store().tensor(id).grad().unwrap().iter().all(|&g| g == 0.0));
    }
}
