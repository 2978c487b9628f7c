//! Training objectives: label-smoothed cross-entropy, the gate budget loss,
//! token-level JS / KL distillation and their weighted sum.
//!
//! Distillation divergences are evaluated exactly over the full vocabulary
//! at every non-pad position of a teacher-forced target, instead of being
//! estimated from sampled sequences. The teacher is always detached. No τ²
//! rescaling is applied to temperature losses.

use crate::error::{contract, dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{GateTrace, Side};
use serde::{Deserialize, Serialize};

/// `−Σ_v q_v log p_v` averaged over non-pad targets, with
/// `q = (1 − ε)·onehot + ε/V`.
pub fn cross_entropy_label_smoothing(g: &mut Graph, logits: Var, targets: &[usize], epsilon: f64, pad_id: usize) -> Result<Var> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Parameter(format!("label smoothing must lie in [0, 1), got {epsilon}")));
    }
    let shape = g.shape(logits).to_vec();
    let v = *shape.last().unwrap();
    let rows = g.value(logits).len() / v;
    if targets.len() != rows {
        return dim_err(format!("{} targets for logits of shape {shape:?}", targets.len()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t != pad_id && t >= v) {
        return dim_err(format!("target {bad} outside a vocabulary of {v}"));
    }
    let n = targets.iter().filter(|&&t| t != pad_id).count();
    if n == 0 {
        return contract("every target position is padding");
    }
    let mut q = vec![0.0; rows * v];
    for (r, &t) in targets.iter().enumerate() {
        if t == pad_id {
            continue;
        }
        let row = &mut q[r * v..(r + 1) * v];
        row.iter_mut().for_each(|x| *x = epsilon / v as f64);
        row[t] += 1.0 - epsilon;
    }
    let q = g.constant(&shape, q)?;
    let logp = g.log_softmax(logits);
    let prod = g.mul(logp, q)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// Gate values of one (source, target) pair, laid out `[layer][token]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub encoder: Vec<Vec<f64>>,
    pub decoder: Vec<Vec<f64>>,
    /// Same layout; skipped tokens are left out of both sums.
    pub encoder_skipped: Vec<Vec<bool>>,
    pub decoder_skipped: Vec<Vec<bool>>,
}

impl GateRecord {
    /// Pair without skipped tokens.
    pub fn new(encoder: Vec<Vec<f64>>, decoder: Vec<Vec<f64>>) -> Self {
        let encoder_skipped = encoder.iter().map(|l| vec![false; l.len()]).collect();
        let decoder_skipped = decoder.iter().map(|l| vec![false; l.len()]).collect();
        Self {
            encoder,
            decoder,
            encoder_skipped,
            decoder_skipped,
        }
    }

    /// `(G_(X,Y), |X||M_enc| + |Y||M_dec|)` over counted tokens.
    pub fn usage(&self) -> (f64, usize) {
        let mut sum = 0.0;
        let mut slots = 0;
        for (vals, skip) in self
            .encoder
            .iter()
            .zip(&self.encoder_skipped)
            .chain(self.decoder.iter().zip(&self.decoder_skipped))
        {
            for (&v, &s) in vals.iter().zip(skip) {
                if !s {
                    sum += v;
                    slots += 1;
                }
            }
        }
        (sum, slots)
    }

    /// Splits a forward pass's gate trace into one record per batch row.
    pub fn from_trace(g: &Graph, trace: &GateTrace) -> Vec<GateRecord> {
        let rows = trace.first().map_or(0, |e| g.shape(e.g)[0]);
        let mut out = vec![GateRecord::default(); rows];
        for entry in trace {
            let vals = g.value(entry.g);
            let len = vals.len() / rows;
            for (r, rec) in out.iter_mut().enumerate() {
                let mut v = Vec::new();
                let mut s = Vec::new();
                for i in r * len..(r + 1) * len {
                    if entry.pad[i] {
                        continue;
                    }
                    v.push(vals[i]);
                    s.push(!entry.counted[i]);
                }
                match entry.side {
                    Side::Encoder => {
                        rec.encoder.push(v);
                        rec.encoder_skipped.push(s);
                    }
                    Side::Decoder => {
                        rec.decoder.push(v);
                        rec.decoder_skipped.push(s);
                    }
                }
            }
        }
        out
    }
}

/// `| Σ G_(X,Y) / Σ (|X||M_enc| + |Y||M_dec|) − b |` over a batch of records.
pub fn gate_budget_value(records: &[GateRecord], budget: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&budget) {
        return Err(Error::Parameter(format!("gate budget must lie in [0, 1], got {budget}")));
    }
    let (sum, slots) = records
        .iter()
        .map(GateRecord::usage)
        .fold((0.0, 0), |(a, b), (c, d)| (a + c, b + d));
    if slots == 0 {
        return contract("no counted gates in batch");
    }
    Ok((sum / slots as f64 - budget).abs())
}

/// Differentiable gate budget loss over every routed sublayer of a forward
/// pass. Uncounted tokens (padding, skipped) enter neither sum.
pub fn gate_budget_loss(g: &mut Graph, trace: &GateTrace, budget: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&budget) {
        return Err(Error::Parameter(format!("gate budget must lie in [0, 1], got {budget}")));
    }
    let slots: usize = trace.iter().map(|e| e.counted.iter().filter(|&&c| c).count()).sum();
    if slots == 0 {
        return contract("no counted gates in batch");
    }
    let mut total: Option<Var> = None;
    for e in trace {
        let shape = g.shape(e.g).to_vec();
        let m = g.constant(&shape, e.counted.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect())?;
        let masked = g.mul(e.g, m)?;
        let s = g.sum(masked);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let mean = g.scale(total.unwrap(), 1.0 / slots as f64);
    let dev = g.add_scalar(mean, -budget);
    g.abs(dev)
}

fn softmax_values(logits: &[f64], v: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, o) in logits.chunks(v).zip(out.chunks_mut(v)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (ov, &x) in o.iter_mut().zip(row) {
            *ov = ((x - max) / temperature).exp();
            z += *ov;
        }
        o.iter_mut().for_each(|x| *x /= z);
    }
    out
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// `KL(p ‖ q)` for probability vectors, with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| if a > 0.0 { a * (a.ln() - b.ln()) } else { 0.0 })
        .sum()
}

/// `½ KL(p ‖ m) + ½ KL(q ‖ m)` with `m = ½p + ½q`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
    0.5 * kl_divergence(p, &m) + 0.5 * kl_divergence(q, &m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KdKind {
    Js,
    Kl,
    None,
}

struct KdPrep {
    p: Var,
    p_logp: f64,
    n: usize,
    mask3: Var,
}

fn kd_prep(g: &mut Graph, teacher: &[f64], student: Var, temperature: f64, mask: &[bool]) -> Result<KdPrep> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    let shape = g.shape(student).to_vec();
    if teacher.len() != g.value(student).len() {
        return dim_err(format!(
            "teacher logits ({} values) and student logits {shape:?} differ",
            teacher.len()
        ));
    }
    let v = *shape.last().unwrap();
    let rows = teacher.len() / v;
    if mask.len() != rows {
        return dim_err(format!("mask of length {} for {rows} positions", mask.len()));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return contract("every distillation position is padding");
    }
    let mut p = softmax_values(teacher, v, temperature);
    let mut p_logp = 0.0;
    for (r, &keep) in mask.iter().enumerate() {
        let row = &mut p[r * v..(r + 1) * v];
        if keep {
            p_logp += row.iter().map(|&x| xlogx(x)).sum::<f64>();
        } else {
            row.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let p = g.constant(&shape, p)?;
    let mut s3 = shape.clone();
    *s3.last_mut().unwrap() = 1;
    let mask3 = g.constant(&s3, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    Ok(KdPrep { p, p_logp, n, mask3 })
}

/// Mean per-token `JS(p_teacher, q_student)` at temperature `τ`.
///
/// `teacher` holds raw teacher logits (detached by construction); `mask`
/// marks positions that count.
pub fn js_divergence_loss(g: &mut Graph, teacher: &[f64], student: Var, temperature: f64, mask: &[bool]) -> Result<Var> {
    let KdPrep { p, p_logp, n, mask3 } = kd_prep(g, teacher, student, temperature, mask)?;
    let q = g.softmax_with_temperature(student, temperature)?;
    let log_q = g.log_softmax_with_temperature(student, temperature)?;
    let half_q = g.scale(q, 0.5);
    let half_p = g.scale(p, 0.5);
    let m = g.add(half_q, half_p)?;
    let log_m = g.log(m);
    // KL(p‖m) = Σ p log p − Σ p log m
    let p_log_m = g.mul(p, log_m)?;
    let p_log_m = g.sum(p_log_m);
    let kl_pm = g.scale(p_log_m, -1.0);
    let kl_pm = g.add_scalar(kl_pm, p_logp);
    // KL(q‖m) = Σ q (log q − log m)
    let diff = g.sub(log_q, log_m)?;
    let qd = g.mul(q, diff)?;
    let qd = g.mul(qd, mask3)?;
    let kl_qm = g.sum(qd);
    let js = g.add(kl_pm, kl_qm)?;
    Ok(g.scale(js, 0.5 / n as f64))
}

/// Mean per-token `KL(p_teacher ‖ q_student)` at temperature `τ`.
pub fn kl_divergence_loss(g: &mut Graph, teacher: &[f64], student: Var, temperature: f64, mask: &[bool]) -> Result<Var> {
    let KdPrep { p, p_logp, n, .. } = kd_prep(g, teacher, student, temperature, mask)?;
    let log_q = g.log_softmax_with_temperature(student, temperature)?;
    let cross = g.mul(p, log_q)?;
    let cross = g.sum(cross);
    let kl = g.scale(cross, -1.0);
    let kl = g.add_scalar(kl, p_logp);
    Ok(g.scale(kl, 1.0 / n as f64))
}

pub fn kd_loss(g: &mut Graph, kind: KdKind, teacher: &[f64], student: Var, temperature: f64, mask: &[bool]) -> Result<Option<Var>> {
    match kind {
        KdKind::Js => js_divergence_loss(g, teacher, student, temperature, mask).map(Some),
        KdKind::Kl => kl_divergence_loss(g, teacher, student, temperature, mask).map(Some),
        KdKind::None => Ok(None),
    }
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub gate_budget: f64,
    pub kd: f64,
    pub total: f64,
    pub alpha: f64,
}

/// `total = ce + gate_budget + α·kd`.
pub fn combined_loss(ce: f64, gate_budget: f64, kd: f64, alpha: f64) -> Result<LossBreakdown> {
    if ![ce, gate_budget, kd, alpha].iter().all(|v| v.is_finite()) {
        return contract(format!(
            "non-finite loss component (ce {ce}, gate {gate_budget}, kd {kd}, α {alpha})"
        ));
    }
    Ok(LossBreakdown {
        ce,
        gate_budget,
        kd,
        total: ce + gate_budget + alpha * kd,
        alpha,
    })
}

/// Graph-side counterpart of [`combined_loss`]; absent terms count as 0.
pub fn combine(g: &mut Graph, ce: Var, gate_budget: Option<Var>, kd: Option<Var>, alpha: f64) -> Result<(Var, LossBreakdown)> {
    let mut total = ce;
    if let Some(gb) = gate_budget {
        total = g.add(total, gb)?;
    }
    if let Some(k) = kd {
        let w = g.scale(k, alpha);
        total = g.add(total, w)?;
    }
    let val = |v: Option<Var>, g: &Graph| v.map_or(0.0, |v| g.value(v)[0]);
    let breakdown = combined_loss(g.value(ce)[0], val(gate_budget, g), val(kd, g), alpha)?;
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn logits(g: &mut Graph, rows: &[Vec<f64>]) -> Var {
        let v = rows[0].len();
        g.input(&[1, rows.len(), v], rows.concat(), true).unwrap()
    }

    #[test]
    fn ce_uniform_is_ln_v() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[vec![0.3; 7], vec![0.3; 7]]);
        for eps in [0.0, 0.1, 0.5] {
            let loss = cross_entropy_label_smoothing(&mut g, l, &[3, 5], eps, 0).unwrap();
            assert!((g.value(loss)[0] - 7f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_peaked_correct_goes_to_zero() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[vec![0.0, 60.0, 0.0]]);
        let loss = cross_entropy_label_smoothing(&mut g, l, &[1], 0.0, 0).unwrap();
        assert!(g.value(loss)[0] < 1e-20);
    }

    #[test]
    fn ce_hand_value() {
        // p = softmax(2,0,0,0); q = (0.925, 0.025, 0.025, 0.025)
        let z = 2f64.exp() + 3.0;
        let lp0 = 2.0 - z.ln();
        let lp1 = -z.ln();
        let expected = -(0.925 * lp0 + 3.0 * 0.025 * lp1);
        let mut g = Graph::new();
        let l = logits(&mut g, &[vec![2.0, 0.0, 0.0, 0.0]]);
        let loss = cross_entropy_label_smoothing(&mut g, l, &[0], 0.1, usize::MAX).unwrap();
        assert!((g.value(loss)[0] - expected).abs() < 1e-14);
        assert!((expected - 0.4908).abs() < 1e-3);
    }

    #[test]
    fn ce_skips_padding_and_rejects_all_pad() {
        let mut g = Graph::new();
        let l = logits(&mut g, &[vec![1.0, 2.0, 3.0], vec![9.0, -9.0, 0.0]]);
        let a = cross_entropy_label_smoothing(&mut g, l, &[2, 0], 0.1, 0).unwrap();
        let l1 = logits(&mut g, &[vec![1.0, 2.0, 3.0]]);
        let b = cross_entropy_label_smoothing(&mut g, l1, &[2], 0.1, 0).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert!(matches!(
            cross_entropy_label_smoothing(&mut g, l, &[0, 0], 0.1, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn budget_examples() {
        let ones = GateRecord::new(vec![vec![1.0; 3]; 2], vec![vec![1.0; 2]; 2]);
        assert_eq!(gate_budget_value(&[ones], 0.5).unwrap(), 0.5);
        let zeros = GateRecord::new(vec![vec![0.0; 3]; 2], vec![vec![0.0; 2]; 2]);
        assert_eq!(gate_budget_value(&[zeros], 0.5).unwrap(), 0.5);
        // |X|=2, |M_enc|=2, |Y|=1, |M_dec|=2
        let half = GateRecord::new(vec![vec![1.0, 0.0], vec![1.0, 1.0]], vec![vec![0.0], vec![0.0]]);
        assert_eq!(gate_budget_value(&[half], 0.5).unwrap(), 0.0);
        assert!(gate_budget_value(&[], 0.5).is_err());
    }

    #[test]
    fn budget_excludes_skipped() {
        let mut r = GateRecord::new(vec![vec![1.0, 0.0, 0.0]], vec![]);
        r.encoder_skipped[0][2] = true;
        assert_eq!(r.usage(), (1.0, 2));
        assert_eq!(gate_budget_value(&[r], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn js_examples() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]) - 2f64.ln()).abs() < 1e-15);
        // m = (0.75, 0.25)
        let hand = 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln()) + 0.5 * (1.0f64 / 0.75).ln();
        let js = js_divergence(&[0.5, 0.5], &[1.0, 0.0]);
        assert!((js - hand).abs() < 1e-15);
        assert!((js - 0.21576).abs() < 1e-5);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.2, 0.8], &[0.2, 0.8]), 0.0);
        let kl = kl_divergence(&[0.75, 0.25], &[0.5, 0.5]);
        assert!((kl - (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln())).abs() < 1e-15);
        assert!((kl - 0.13081).abs() < 1e-5);
    }

    #[test]
    fn graph_losses_match_probability_forms() {
        let teacher = [0.3, -1.2, 2.0, 0.5, 0.1, -0.4];
        let student = [1.1, 0.2, -0.7, -0.3, 0.9, 0.0];
        for tau in [1.0, 3.0] {
            let p = softmax_values(&teacher, 3, tau);
            let q = softmax_values(&student, 3, tau);
            let js_ref = (js_divergence(&p[..3], &q[..3]) + js_divergence(&p[3..], &q[3..])) / 2.0;
            let kl_ref = (kl_divergence(&p[..3], &q[..3]) + kl_divergence(&p[3..], &q[3..])) / 2.0;
            let mut g = Graph::new();
            let s = g.input(&[1, 2, 3], student.to_vec(), true).unwrap();
            let js = js_divergence_loss(&mut g, &teacher, s, tau, &[true, true]).unwrap();
            let kl = kl_divergence_loss(&mut g, &teacher, s, tau, &[true, true]).unwrap();
            assert!((g.value(js)[0] - js_ref).abs() < 1e-14);
            assert!((g.value(kl)[0] - kl_ref).abs() < 1e-14);
        }
    }

    #[test]
    fn kd_identical_is_zero_and_masked_rows_ignored() {
        let t = [0.3, -1.2, 2.0, 50.0, -50.0, 0.0];
        let mut g = Graph::new();
        let s = g.input(&[2, 1, 3], vec![0.3, -1.2, 2.0, 0.0, 0.0, 0.0], true).unwrap();
        let js = js_divergence_loss(&mut g, &t, s, 1.0, &[true, false]).unwrap();
        let kl = kl_divergence_loss(&mut g, &t, s, 1.0, &[true, false]).unwrap();
        assert!(g.value(js)[0].abs() < 1e-15);
        assert!(g.value(kl)[0].abs() < 1e-15);
        assert!(js_divergence_loss(&mut g, &t[..3], s, 1.0, &[true, true]).is_err());
    }

    #[test]
    fn combined_examples() {
        let b = combined_loss(1.0, 0.2, 0.3, 2.0).unwrap();
        assert!((b.total - 1.8).abs() < 1e-12);
        let b = combined_loss(1.0, 0.2, 0.3, 0.0).unwrap();
        assert_eq!(b.total, 1.2);
        let b = combined_loss(0.7, 0.0, 0.0, 2.0).unwrap();
        assert_eq!(b.total, 0.7);
        assert!(combined_loss(f64::NAN, 0.0, 0.0, 2.0).is_err());
    }

    #[test]
    fn teacher_has_no_gradient_slot() {
        let mut g = Graph::new();
        let teacher = g.leaf(&Tensor::new(&[1, 1, 3], vec![0.1, 0.2, 0.3]).unwrap().with_requires_grad());
        let s = g.input(&[1, 1, 3], vec![0.5, 0.0, -0.5], true).unwrap();
        let tv = g.value(teacher).to_vec();
        let js = js_divergence_loss(&mut g, &tv, s, 1.0, &[true]).unwrap();
        let grads = g.backward(js).unwrap();
        assert!(grads.get(teacher).is_none());
        assert!(grads.get(s).is_some());
    }
}
