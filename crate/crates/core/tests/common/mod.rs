#![allow(dead_code)]

use clsr_core::gradcheck::{finite_difference_check, GradCheckReport};
use clsr_core::harness::{make_batch, pretrain, TrainConfig};
use clsr_core::model::{Batch, Checkpoint, GateSchedule, ModelConfig, Regime, Routing, Seq2SeqModel, PAD};
use clsr_core::objectives::{combine, cross_entropy_label_smoothing, gate_budget_loss, kd_loss, KdKind};
use clsr_core::synth::{build_corpus, language_ids, make_language_set, Corpus, CorpusPlan, DomainParams, Example, Role, RoleSizes, Vocab};
use clsr_core::{Graph, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn vocab(n: usize) -> Vocab {
    Vocab::new(&language_ids(n))
}

/// One encoder and one decoder layer, d_model 8.
pub fn toy_config(vocab: &Vocab) -> ModelConfig {
    vocab.model_config(8, 2, 16, 1, 1, 32)
}

pub fn small_corpus(n_languages: usize, finetune: usize, eval: usize) -> (Vocab, Corpus) {
    let langs = language_ids(n_languages);
    let specs = make_language_set(&langs, 11, &DomainParams::default());
    let sizes: BTreeMap<String, RoleSizes> = langs
        .iter()
        .map(|l| {
            (
                l.clone(),
                RoleSizes {
                    pretrain: 60,
                    finetune,
                    validation: eval,
                    test_in: eval,
                    test_out: eval,
                },
            )
        })
        .collect();
    let corpus = build_corpus(&specs, &CorpusPlan::new(sizes, 0.5)).unwrap();
    (Vocab::new(&langs), corpus)
}

pub fn batch_of(examples: &[&Example], vocab: &Vocab) -> Batch {
    make_batch(examples, vocab).unwrap()
}

/// Fills every parameter with fresh N(0, std²) values.
pub fn randomize(model: &mut Seq2SeqModel, std: f64, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = model.store().iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = model.store().tensor(id).shape().to_vec();
        let t = Tensor::randn(&shape, std, &mut r);
        model.store_mut().assign(id, &t).unwrap();
    }
}

/// Full distillation objective `CE + budget + α·KD` with noiseless,
/// skip-free gates.
pub fn objective(
    g: &mut Graph,
    model: &Seq2SeqModel,
    teacher_logits: &[f64],
    batch: &Batch,
    language: &str,
    alpha: f64,
) -> Result<Var> {
    let schedule = GateSchedule {
        budget: 0.5,
        skip_prob: 0.0,
        noise_sigma_max: 0.0,
        total_steps: 10,
        ..GateSchedule::default()
    };
    let mut r = rng(0);
    let mut routing = Routing::train(Some(language), schedule, 5, &mut r);
    let out = model.forward(g, batch, &mut routing)?;
    let ce = cross_entropy_label_smoothing(g, out.logits, &batch.tgt_out, 0.1, PAD)?;
    let gb = gate_budget_loss(g, &out.gates, 0.5)?;
    let kd = kd_loss(g, KdKind::Js, teacher_logits, out.logits, 1.0, &batch.loss_mask())?;
    Ok(combine(g, ce, Some(gb), kd, alpha)?.0)
}

/// Distance of the objective from its nearest relu kink at the current
/// parameters.
pub fn objective_relu_margin(model: &Seq2SeqModel, teacher_logits: &[f64], batch: &Batch, language: &str, alpha: f64) -> f64 {
    let mut g = Graph::new();
    objective(&mut g, model, teacher_logits, batch, language, alpha).unwrap();
    g.relu_margin().unwrap_or(f64::INFINITY)
}

/// [`objective`] checked against central differences over every parameter
/// of `model`.
pub fn objective_gradcheck(
    model: &Seq2SeqModel,
    teacher_logits: &[f64],
    batch: &Batch,
    language: &str,
    alpha: f64,
    eps: f64,
) -> Result<GradCheckReport> {
    let ids: Vec<_> = model.store().iter().map(|(id, _)| id).collect();
    let params: Vec<Tensor> = ids.iter().map(|&id| model.store().tensor(id).clone()).collect();
    finite_difference_check(
        |g: &mut Graph, vars| {
            for (&id, &v) in ids.iter().zip(vars) {
                model.store().preset(g, id, v);
            }
            objective(g, model, teacher_logits, batch, language, alpha)
        },
        &params,
        eps,
    )
}

pub fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        warmup_epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

pub struct Fixture {
    pub vocab: Vocab,
    pub corpus: Corpus,
    pub student: Checkpoint,
    pub teacher: Checkpoint,
}

/// Toy student and a slightly wider teacher pretrained on three languages.
pub fn fixture() -> Fixture {
    let (vocab, corpus) = small_corpus(3, 12, 4);
    let pre: Vec<_> = corpus.split(Role::Pretrain).examples.clone();
    let cfg = TrainConfig {
        regime: Regime::Ft,
        kd_kind: KdKind::None,
        ..tiny_train(2)
    };
    let (student, _) = pretrain(&toy_config(&vocab), &pre, &vocab, &cfg).unwrap();
    let (teacher, _) = pretrain(&vocab.model_config(12, 2, 24, 1, 1, 32), &pre, &vocab, &TrainConfig { seed: 9, ..cfg }).unwrap();
    Fixture {
        vocab,
        corpus,
        student,
        teacher,
    }
}

/// Bit patterns of every parameter, keyed by name.
pub fn tensors(model: &Seq2SeqModel) -> BTreeMap<String, Vec<u64>> {
    model
        .store()
        .iter()
        .map(|(_, p)| (p.name.clone(), p.tensor.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

