mod common;

use clsr_core::harness::*;
use clsr_core::model::{Checkpoint, Regime, Seq2SeqModel};
use clsr_core::objectives::{KdKind, LossBreakdown};
use clsr_core::synth::{Corpus, Role};
use clsr_core::Error;
use common::*;
use proptest::prelude::*;
use std::collections::BTreeMap;

fn data<'a>(corpus: &'a Corpus, size: usize) -> FinetuneData<'a> {
    FinetuneData::from_corpus(corpus, "l1", size).unwrap()
}

fn run(fx: &Fixture, cfg: &TrainConfig, teacher: bool) -> clsr_core::Result<FinetuneOutcome> {
    let t = teacher.then_some(&fx.teacher);
    finetune(&fx.student, t, "l1", &data(&fx.corpus, 12), &fx.vocab, cfg)
}

fn dw(epochs: usize) -> TrainConfig {
    TrainConfig {
        regime: Regime::DistilWhisper,
        kd_kind: KdKind::Js,
        ..tiny_train(epochs)
    }
}

#[test]
fn finetuning_is_deterministic() {
    let fx = fixture();
    let a = run(&fx, &dw(3), true).unwrap();
    let b = run(&fx, &dw(3), true).unwrap();
    assert_eq!(a.record.to_json().unwrap(), b.record.to_json().unwrap());
    assert_eq!(tensors(&a.model), tensors(&b.model));
    let ca = Checkpoint::from_model(&a.model).to_bytes().unwrap();
    let cb = Checkpoint::from_model(&b.model).to_bytes().unwrap();
    assert_eq!(ca, cb);
    let c = run(&fx, &TrainConfig { seed: 2, ..dw(3) }, true).unwrap();
    assert_ne!(tensors(&a.model), tensors(&c.model));
}

#[test]
fn pretraining_is_deterministic() {
    let (vocab, corpus) = small_corpus(2, 4, 2);
    let pre = corpus.split(Role::Pretrain).examples.clone();
    let cfg = TrainConfig {
        regime: Regime::Ft,
        kd_kind: KdKind::None,
        ..tiny_train(2)
    };
    let (a, ra) = pretrain(&toy_config(&vocab), &pre, &vocab, &cfg).unwrap();
    let (b, rb) = pretrain(&toy_config(&vocab), &pre, &vocab, &cfg).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(ra, rb);
    assert_eq!(ra.epoch_loss.len(), 2);
    assert!(ra.epoch_loss[1] < ra.epoch_loss[0]);
}

#[test]
fn zero_alpha_distillation_equals_routed_finetuning() {
    let fx = fixture();
    let with_teacher = run(&fx, &TrainConfig { alpha: 0.0, ..dw(3) }, true).unwrap();
    let plain = run(
        &fx,
        &TrainConfig {
            alpha: 0.0,
            regime: Regime::ClsrFt,
            kd_kind: KdKind::None,
            ..tiny_train(3)
        },
        false,
    )
    .unwrap();
    let (a, b) = (&with_teacher.record, &plain.record);
    assert_eq!(a.wer, b.wer);
    assert_eq!(a.gate_usage, b.gate_usage);
    assert_eq!(a.best_epoch, b.best_epoch);
    let va: Vec<f64> = a.epochs.iter().map(|e| e.validation_wer).collect();
    let vb: Vec<f64> = b.epochs.iter().map(|e| e.validation_wer).collect();
    assert_eq!(va, vb);
    for (x, y) in a.epochs.iter().zip(&b.epochs) {
        assert_eq!(x.loss.ce, y.loss.ce);
        assert_eq!(x.loss.gate_budget, y.loss.gate_budget);
    }
    assert_eq!(tensors(&with_teacher.model), tensors(&plain.model));
}

#[test]
fn best_epoch_is_the_first_minimum() {
    let fx = fixture();
    let out = run(&fx, &dw(4), true).unwrap();
    let r = &out.record;
    let vals: Vec<f64> = r.epochs.iter().map(|e| e.validation_wer).collect();
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let first = vals.iter().position(|&v| v == min).unwrap() + 1;
    assert_eq!(r.best_epoch, first);
    assert_eq!(r.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    // The returned model is the best epoch's, so its validation WER repeats.
    let data = data(&fx.corpus, 12);
    let again = evaluate_wer(&out.model, &data.validation, "l1", &fx.vocab).unwrap().wer;
    assert_eq!(again, min);
    assert!(r.wer.contains_key("test_in") && r.wer.contains_key("test_out"));
    assert_eq!(r.gate_usage.len(), 2);
}

#[test]
fn dense_records_carry_no_gates() {
    let fx = fixture();
    let cfg = TrainConfig {
        regime: Regime::Ft,
        kd_kind: KdKind::None,
        ..tiny_train(2)
    };
    let r = run(&fx, &cfg, false).unwrap().record;
    assert!(r.gate_usage.is_empty());
    assert!(r.params.overhead.is_none());
    assert_eq!(r.params.trainable, r.params.total);
}

#[test]
fn contract_errors() {
    let fx = fixture();
    assert!(matches!(run(&fx, &dw(2), false), Err(Error::Contract(_))));
    let no_kd = TrainConfig {
        kd_kind: KdKind::None,
        ..dw(2)
    };
    assert!(matches!(run(&fx, &no_kd, true), Err(Error::Contract(_))));
    let ft_with_teacher = TrainConfig {
        regime: Regime::Ft,
        ..dw(2)
    };
    assert!(matches!(run(&fx, &ft_with_teacher, false), Err(Error::Contract(_))));
    assert!(matches!(FinetuneData::from_corpus(&fx.corpus, "l1", 13), Err(Error::Contract(_))));

    let (other_vocab, _) = small_corpus(2, 4, 2);
    let d = data(&fx.corpus, 4);
    let r = finetune(&fx.student, Some(&fx.teacher), "l1", &d, &other_vocab, &dw(2));
    assert!(matches!(r, Err(Error::Contract(_))));

    let small_teacher = {
        let (v2, c2) = small_corpus(2, 4, 2);
        let pre = c2.split(Role::Pretrain).examples.clone();
        let cfg = TrainConfig {
            regime: Regime::Ft,
            kd_kind: KdKind::None,
            ..tiny_train(2)
        };
        pretrain(&toy_config(&v2), &pre, &v2, &cfg).unwrap().0
    };
    let r = finetune(&fx.student, Some(&small_teacher), "l1", &d, &fx.vocab, &dw(2));
    assert!(matches!(r, Err(Error::Contract(_))));

    let bad = TrainConfig { epochs: 0, ..dw(2) };
    assert!(matches!(run(&fx, &bad, true), Err(Error::Config(_))));
}

#[test]
fn pretraining_rejects_non_dense_and_empty_input() {
    let (vocab, corpus) = small_corpus(2, 4, 2);
    let cfg = TrainConfig {
        regime: Regime::Ft,
        kd_kind: KdKind::None,
        ..tiny_train(2)
    };
    assert!(matches!(pretrain(&toy_config(&vocab), &[], &vocab, &cfg), Err(Error::Contract(_))));
    let mut lora = toy_config(&vocab);
    lora.ffn_variant = clsr_core::model::FfnVariant::Lora;
    let pre = corpus.split(Role::Pretrain).examples.clone();
    assert!(matches!(pretrain(&lora, &pre, &vocab, &cfg), Err(Error::Contract(_))));
}

fn record(seed: u64, test_in: f64) -> RunRecord {
    RunRecord {
        config: TrainConfig { seed, ..TrainConfig::default() },
        language: "l1".into(),
        finetune_size: 100,
        seed,
        epochs: vec![EpochLog {
            epoch: 1,
            loss: LossBreakdown {
                ce: 1.0,
                gate_budget: 0.1,
                kd: 0.2,
                total: 1.5,
                alpha: 2.0,
            },
            validation_wer: 0.3,
        }],
        best_epoch: 1,
        wer: BTreeMap::from([("test_in".to_string(), test_in), ("test_out".to_string(), 0.4)]),
        gate_usage: BTreeMap::from([(
            "test_in".to_string(),
            GateUsage {
                ratio: 0.5,
                decisions: 10,
                per_layer: BTreeMap::from([("enc.0".to_string(), 0.5)]),
            },
        )]),
        params: ParamCounts {
            total: 10,
            trainable: 4,
            overhead: None,
        },
    }
}

#[test]
fn aggregate_planted_values() {
    let recs = [record(1, 15.4), record(2, 15.5), record(3, 15.6)];
    let agg = multi_seed_aggregate(&recs).unwrap();
    let s = agg["wer.test_in"];
    assert_eq!(s.n, 3);
    assert!((s.mean - 15.5).abs() < 1e-12);
    assert!((s.std - 0.1).abs() < 1e-12);
    assert_eq!(agg["wer.test_out"].std, 0.0);
    assert_eq!(agg["gate.test_in"].mean, 0.5);
    assert_eq!(agg.len(), 3);
}

#[test]
fn aggregate_rejections() {
    assert!(matches!(multi_seed_aggregate(&[record(1, 0.1)]), Err(Error::Contract(_))));
    let mut other = record(2, 0.2);
    other.config.alpha = 0.0;
    assert!(matches!(multi_seed_aggregate(&[record(1, 0.1), other]), Err(Error::Contract(_))));
    let mut lang = record(2, 0.2);
    lang.language = "l2".into();
    assert!(matches!(multi_seed_aggregate(&[record(1, 0.1), lang]), Err(Error::Contract(_))));
}

#[test]
fn record_json_round_trip() {
    let r = record(4, 0.123456789012345);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    r.save(&path).unwrap();
    assert_eq!(RunRecord::load(&path).unwrap(), r);
    assert_eq!(RunRecord::from_json(&r.to_json().unwrap()).unwrap(), r);
    assert!(RunRecord::from_json("{").is_err());
}

fn model_with_grad(value: f64) -> (Seq2SeqModel, clsr_core::model::ParamId, Vec<f64>) {
    let vocab = vocab(1);
    let mut m = Seq2SeqModel::new(toy_config(&vocab), &mut rng(3)).unwrap();
    let id = m.store().id("out.w").unwrap();
    let before = m.store().tensor(id).data().to_vec();
    let n = before.len();
    m.store_mut().tensor_mut(id).accumulate_grad(&vec![value; n]).unwrap();
    (m, id, before)
}

#[test]
fn gradient_clipping_scales_to_the_ceiling() {
    let (mut m, id, before) = model_with_grad(2.0);
    let n = before.len() as f64;
    let norm = 2.0 * n.sqrt();
    let reported = Optimizer::new(OptimizerKind::Sgd).step(&mut m, 0.1, 1.0);
    assert!((reported - norm).abs() < 1e-12);
    let step = 0.1 * 2.0 / norm;
    for (b, a) in before.iter().zip(m.store().tensor(id).data()) {
        assert!((b - step - a).abs() < 1e-15);
    }

    let (mut m, id, before) = model_with_grad(2.0);
    Optimizer::new(OptimizerKind::Sgd).step(&mut m, 0.1, 0.0);
    for (b, a) in before.iter().zip(m.store().tensor(id).data()) {
        assert!((b - 0.2 - a).abs() < 1e-15);
    }
}

#[test]
fn adam_first_step_moves_by_lr() {
    let (mut m, id, before) = model_with_grad(-3.0);
    Optimizer::new(OptimizerKind::Adam).step(&mut m, 0.01, 0.0);
    for (b, a) in before.iter().zip(m.store().tensor(id).data()) {
        assert!((a - b - 0.01).abs() < 1e-9);
    }
}

#[test]
fn gate_usage_needs_a_routed_model() {
    let fx = fixture();
    let dense = fx.student.to_model().unwrap();
    let d = data(&fx.corpus, 4);
    assert!(matches!(gate_usage_stats(&dense, &d.test_in, "l1", &fx.vocab), Err(Error::Contract(_))));
    assert!(matches!(evaluate_wer(&dense, &[], "l1", &fx.vocab), Err(Error::Contract(_))));
}

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,4}"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wer_ignores_case_and_spacing(
        words in prop::collection::vec(word(), 1..8),
        hyp in prop::collection::vec(word(), 0..8),
        gaps in prop::collection::vec(1usize..4, 8),
    ) {
        let spaced: String = words
            .iter()
            .zip(&gaps)
            .map(|(w, &g)| format!("{}{}", w.to_uppercase(), " \t".repeat(g)))
            .collect();
        let plain = words.join(" ");
        let h = hyp.join(" ");
        let a = word_error_rate(&[(plain.as_str(), h.as_str())]).unwrap();
        let b = word_error_rate(&[(format!("  {spaced}"), h.to_uppercase())]).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(word_error_rate(&[(plain.as_str(), plain.as_str())]).unwrap().wer, 0.0);
        let d = edit_distance(&words, &hyp);
        prop_assert!(d <= words.len().max(hyp.len()));
        prop_assert!(d >= words.len().abs_diff(hyp.len()));
    }

    #[test]
    fn schedule_is_bounded_and_peaks_after_warmup(total in 2usize..500, frac in 0.0f64..1.0, peak in 1e-6f64..1.0, step in 0usize..600) {
        let warmup = ((total as f64 * frac) as usize).min(total - 1);
        let lr = lr_schedule(step, total, warmup, peak);
        prop_assert!((0.0..=peak).contains(&lr));
        prop_assert!((lr_schedule(warmup, total, warmup, peak) - peak).abs() < 1e-15);
        prop_assert_eq!(lr_schedule(total, total, warmup, peak), 0.0);
        if step < warmup {
            prop_assert!(lr <= lr_schedule(step + 1, total, warmup, peak));
        } else if step < total {
            prop_assert!(lr >= lr_schedule(step + 1, total, warmup, peak));
        }
    }
}
