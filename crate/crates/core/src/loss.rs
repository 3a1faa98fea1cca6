//! Training losses built on the autodiff graph.
//!
//! All losses are batch means. Teacher-side inputs are detached, so no
//! gradient reaches teacher parameters.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::{Error, Result, Tensor, LOG_EPS};

/// Row sums of probability inputs must be within this of one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub kd: f64,
    pub clc: f64,
    pub total: f64,
    pub per_tap: Vec<(String, f64)>,
}

fn check_probability_rows(t: &Tensor, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let s: f64 = t.row(r).iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Contract(format!("{what} row {r} sums to {s}")));
        }
    }
    Ok(())
}

/// Distillation cross-entropy `mean_b −Σ_m p_T log(p_Q + ε)`.
pub fn kd_loss(g: &mut Graph, teacher_probs: Var, student_probs: Var) -> Result<Var> {
    check_probability_rows(g.value(teacher_probs), "teacher probabilities")?;
    check_probability_rows(g.value(student_probs), "student probabilities")?;
    if g.value(teacher_probs).shape() != g.value(student_probs).shape() {
        return Err(Error::Shape("teacher and student probabilities differ in shape".into()));
    }
    let batch = g.value(student_probs).rows() as f64;
    let target = g.detach(teacher_probs);
    let log_q = g.log_eps(student_probs, LOG_EPS)?;
    let prod = g.mul(target, log_q)?;
    let total = g.sum(prod)?;
    g.mul_const(total, -1.0 / batch)
}

/// Per-sample softmax of a tap followed by `mean_b Σ_i q log((q+ε)/(f+ε))`.
pub fn tap_kl(g: &mut Graph, teacher_tap: Var, student_tap: Var) -> Result<Var> {
    if g.value(teacher_tap).shape() != g.value(student_tap).shape() {
        return Err(Error::Shape(format!(
            "tap shapes differ: {:?} vs {:?}",
            g.value(teacher_tap).shape(),
            g.value(student_tap).shape()
        )));
    }
    let batch = g.value(student_tap).rows() as f64;
    let t = g.detach(teacher_tap);
    let f = g.softmax(t)?;
    let q = g.softmax(student_tap)?;
    let log_q = g.log_eps(q, LOG_EPS)?;
    let log_f = g.log_eps(f, LOG_EPS)?;
    let diff = g.sub(log_q, log_f)?;
    let prod = g.mul(q, diff)?;
    let total = g.sum(prod)?;
    g.mul_const(total, 1.0 / batch)
}

pub struct ClcTerms {
    pub total: Var,
    pub per_tap: Vec<(String, Var)>,
}

/// Layer-correction loss: sum over taps of [`tap_kl`]. Tap lists must name the
/// same layers in the same order.
pub fn clc_loss(g: &mut Graph, teacher_taps: &[(String, Var)], student_taps: &[(String, Var)]) -> Result<ClcTerms> {
    let same =
        teacher_taps.len() == student_taps.len() && teacher_taps.iter().zip(student_taps).all(|(a, b)| a.0 == b.0);
    if !same || student_taps.is_empty() {
        return Err(Error::Contract("teacher and student tap sets do not match".into()));
    }
    let mut per_tap = Vec::with_capacity(student_taps.len());
    let mut total: Option<Var> = None;
    for ((name, t), (_, s)) in teacher_taps.iter().zip(student_taps) {
        let term = tap_kl(g, *t, *s)?;
        per_tap.push((name.clone(), term));
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(ClcTerms {
        total: total.expect("non-empty taps"),
        per_tap,
    })
}

/// `kd + β·clc`.
pub fn total_loss(g: &mut Graph, kd: Var, clc: Var, beta: f64) -> Result<Var> {
    if !(beta >= 0.0) {
        return Err(Error::Config(format!("β must be non-negative, got {beta}")));
    }
    let weighted = g.mul_const(clc, beta)?;
    g.add(kd, weighted)
}

/// Cross-entropy against integer labels, for full-precision pretraining.
pub fn ce_loss(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let p = g.value(probs);
    let (rows, classes) = (p.rows(), p.last_dim());
    if labels.len() != rows {
        return Err(Error::Contract(format!("{} labels for {rows} rows", labels.len())));
    }
    let mut onehot = Tensor::zeros(p.shape());
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Contract(format!("label {y} outside 0..{classes}")));
        }
        onehot.data_mut()[r * classes + y] = 1.0;
    }
    let target = g.constant(onehot);
    let log_p = g.log_eps(probs, LOG_EPS)?;
    let prod = g.mul(target, log_p)?;
    let total = g.sum(prod)?;
    g.mul_const(total, -1.0 / rows as f64)
}
