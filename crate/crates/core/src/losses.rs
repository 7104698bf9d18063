//! Distillation and supervision losses.
//!
//! * `sup`: cross-entropy on response tokens.
//! * `rld`: reverse KL between student and teacher response distributions.
//! * `vsd`: reverse KL between matched vision-logit distributions.
//! * `vlad`: smooth-L1 between vision-to-text cosine affinity matrices.
//!
//! The weighted total is `α·sup + (1−α)·rld + β·vsd + γ·vlad`.

use serde::{Deserialize, Serialize};

use crate::assignment::MatchedTeacher;
use crate::data::IGNORE_INDEX;
use crate::error::{Error, Result};
use crate::model::ModelOutputs;
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    /// Transition point of the smooth-L1 losses.
    pub smooth_l1_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.25,
            gamma: 25.0,
            temperature: 1.0,
            smooth_l1_delta: 1.0,
        }
    }
}

impl LossWeights {
    /// Supervised-only weights: α = 1, β = γ = 0.
    pub fn sft_only() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.alpha)
            && self.beta >= 0.0
            && self.gamma >= 0.0
            && self.temperature > 0.0
            && self.smooth_l1_delta > 0.0
            && [self.alpha, self.beta, self.gamma, self.temperature, self.smooth_l1_delta]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss weights need alpha in [0,1], beta, gamma >= 0, temperature, delta > 0: {self:?}"
            )))
        }
    }
}

/// Which representation vision semantic distillation compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VsdObject {
    /// Reverse KL over matched vision logits.
    #[default]
    Logits,
    /// Smooth-L1 over matched hidden states (equal widths only).
    Hidden,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub rld: f64,
    pub vsd: f64,
    pub vlad: f64,
    pub total: f64,
}

/// Row-mean of `Σ_v p_v (log p_v − log q_v)` with `p = softmax(student/T)`
/// and `q = softmax(teacher/T)`. The teacher side is a plain tensor, so no
/// gradient can reach it.
pub fn reverse_kl(tape: &Tape, student: &Var, teacher: &Tensor, temperature: f64) -> Result<Var> {
    if student.shape() != teacher.shape() || student.value().rank() != 2 {
        return Err(Error::shape("reverse_kl", student.shape(), teacher.shape()));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("reverse_kl", "temperature must be positive"));
    }
    if student.value().rows() == 0 {
        return Err(Error::invalid("reverse_kl", "no rows"));
    }
    let inv_t = 1.0 / temperature;
    let log_q = tape.no_grad(|| -> Result<Tensor> {
        let t = tape.constant(teacher.map(|v| v * inv_t));
        Ok(tape.log_softmax(&t)?.to_tensor())
    })?;
    let s = tape.scale(student, inv_t)?;
    let log_p = tape.log_softmax(&s)?;
    let diff = tape.sub(&log_p, &tape.constant(log_q))?;
    let p = tape.exp(&log_p)?;
    let terms = tape.mul(&p, &diff)?;
    let per_row = tape.sum(&terms, Some(1))?;
    tape.mean(&per_row, None)
}

fn check_rows(op: &'static str, rows: &[usize], len: usize) -> Result<()> {
    if let Some(&bad) = rows.iter().find(|&&r| r >= len) {
        return Err(Error::IndexOutOfRange { op, index: bad, len });
    }
    Ok(())
}

/// Vision semantic distillation over matched vision tokens.
///
/// Averages over the matched student tokens; gradient reaches only the
/// student rows selected by the match.
pub fn vsd_loss(
    tape: &Tape,
    student: &ModelOutputs,
    matched: &MatchedTeacher,
    object: VsdObject,
    weights: &LossWeights,
) -> Result<Var> {
    let nv = student.vision_hidden.shape()[0];
    check_rows("vsd_loss", &matched.student_rows, nv)?;
    match object {
        VsdObject::Logits => {
            let s = tape.gather_rows(&student.vision_logits, &matched.student_rows)?;
            reverse_kl(tape, &s, &matched.logits, weights.temperature)
        }
        VsdObject::Hidden => {
            let s = tape.gather_rows(&student.vision_hidden, &matched.student_rows)?;
            if s.shape() != matched.hidden.shape() {
                return Err(Error::invalid(
                    "vsd_loss",
                    format!(
                        "hidden-state distillation needs equal widths, student {:?} vs teacher {:?}",
                        s.shape(),
                        matched.hidden.shape()
                    ),
                ));
            }
            tape.smooth_l1(&s, &matched.hidden, weights.smooth_l1_delta)
        }
    }
}

/// Vision-language affinity distillation.
///
/// `R = cosine(matched vision hidden, language hidden)` of shape
/// `[N_matched, N_text]` for both models; the loss is smooth-L1 between the
/// student's `R` and the detached teacher `R`.
pub fn vlad_loss(
    tape: &Tape,
    teacher: &ModelOutputs,
    student: &ModelOutputs,
    matched: &MatchedTeacher,
    delta: f64,
) -> Result<Var> {
    let (tt, st) = (
        teacher.language_hidden.shape()[0],
        student.language_hidden.shape()[0],
    );
    if tt != st {
        return Err(Error::invalid(
            "vlad_loss",
            format!("teacher has {tt} text tokens, student has {st}"),
        ));
    }
    let nv = student.vision_hidden.shape()[0];
    check_rows("vlad_loss", &matched.student_rows, nv)?;
    let r_t = affinity_teacher(&matched.hidden, teacher.language_hidden.value())?;
    let sv = tape.gather_rows(&student.vision_hidden, &matched.student_rows)?;
    let r_s = tape.cosine_rows(&sv, &student.language_hidden)?;
    tape.smooth_l1(&r_s, &r_t, delta)
}

/// Teacher affinity matrix, computed off-tape.
pub fn affinity_teacher(vision: &Tensor, language: &Tensor) -> Result<Tensor> {
    let tape = Tape::inference();
    let v = tape.constant(vision.clone());
    let l = tape.constant(language.clone());
    Ok(tape.cosine_rows(&v, &l)?.to_tensor())
}

fn supervised_rows(op: &'static str, labels: &[i64], rows: usize, vocab: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.len() != rows {
        return Err(Error::invalid(
            op,
            format!("{} labels for {rows} logit rows", labels.len()),
        ));
    }
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE_INDEX {
            continue;
        }
        if l < 0 || l as usize >= vocab {
            return Err(Error::invalid(
                op,
                format!("label {l} outside vocabulary of {vocab}"),
            ));
        }
        positions.push(i);
        targets.push(l as usize);
    }
    if positions.is_empty() {
        return Err(Error::invalid(op, "every position is ignored"));
    }
    Ok((positions, targets))
}

/// Mean negative log-likelihood over positions whose label is not ignored.
pub fn cross_entropy(tape: &Tape, logits: &Var, labels: &[i64]) -> Result<Var> {
    let v = logits.value();
    if v.rank() != 2 {
        return Err(Error::invalid("cross_entropy", "expected [L, V] logits"));
    }
    let (positions, targets) = supervised_rows("cross_entropy", labels, v.rows(), v.last_dim())?;
    let rows = tape.gather_rows(logits, &positions)?;
    let logp = tape.log_softmax(&rows)?;
    let picked = tape.pick(&logp, &targets)?;
    let mean = tape.mean(&picked, None)?;
    tape.scale(&mean, -1.0)
}

/// Reverse KL restricted to supervised (response) positions.
pub fn response_rld(
    tape: &Tape,
    student_logits: &Var,
    teacher_logits: &Tensor,
    labels: &[i64],
    temperature: f64,
) -> Result<Var> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::shape(
            "response_rld",
            student_logits.shape(),
            teacher_logits.shape(),
        ));
    }
    let v = student_logits.value();
    if v.rank() != 2 {
        return Err(Error::invalid("response_rld", "expected [L, V] logits"));
    }
    let (positions, _) = supervised_rows("response_rld", labels, v.rows(), v.last_dim())?;
    let s = tape.gather_rows(student_logits, &positions)?;
    let t = teacher_logits.select_rows(&positions)?;
    reverse_kl(tape, &s, &t, temperature)
}

/// Weighted total of already batch-averaged components.
pub fn combine(weights: &LossWeights, sup: f64, rld: f64, vsd: f64, vlad: f64) -> LossBreakdown {
    let total = weights.alpha * sup
        + (1.0 - weights.alpha) * rld
        + weights.beta * vsd
        + weights.gamma * vlad;
    LossBreakdown {
        sup,
        rld,
        vsd,
        vlad,
        total,
    }
}

/// On-tape counterpart of [`combine`], evaluated in the same order.
pub fn combine_on_tape(
    tape: &Tape,
    weights: &LossWeights,
    sup: &Var,
    rld: &Var,
    vsd: &Var,
    vlad: &Var,
) -> Result<Var> {
    let a = tape.scale(sup, weights.alpha)?;
    let b = tape.scale(rld, 1.0 - weights.alpha)?;
    let c = tape.scale(vsd, weights.beta)?;
    let d = tape.scale(vlad, weights.gamma)?;
    let ab = tape.add(&a, &b)?;
    let abc = tape.add(&ab, &c)?;
    tape.add(&abc, &d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(tape: &Tape, rows: &[&[f64]]) -> Var {
        tape.param(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn reverse_kl_identical_is_zero() {
        let tape = Tape::new();
        let s = var(&tape, &[&[0.3, -1.0, 2.0], &[1.0, 1.0, 0.0]]);
        let kl = reverse_kl(&tape, &s, &s.to_tensor(), 1.0).unwrap();
        assert!(kl.value().item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn reverse_kl_known_value() {
        let tape = Tape::new();
        let s = var(&tape, &[&[0.0, 0.0]]);
        let t = Tensor::from_rows(&[[0.0, 3f64.ln()]]).unwrap();
        let kl = reverse_kl(&tape, &s, &t, 1.0).unwrap().value().item().unwrap();
        // oracle: 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75)
        let want = 0.5 * (2.0f64).ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - want).abs() < 1e-15);
        assert!((kl - 0.143841).abs() < 1e-6);
    }

    #[test]
    fn reverse_kl_rejects_mismatch() {
        let tape = Tape::new();
        let s = var(&tape, &[&[0.0, 0.0]]);
        let t = Tensor::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        assert!(reverse_kl(&tape, &s, &t, 1.0).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let tape = Tape::new();
        let l = var(&tape, &[&[0.0, 0.0]]);
        let ce = cross_entropy(&tape, &l, &[0]).unwrap().value().item().unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);

        let l = var(&tape, &[&[10.0, -10.0]]);
        let ce = cross_entropy(&tape, &l, &[0]).unwrap().value().item().unwrap();
        assert!(ce > 0.0 && ce < 3e-9, "{ce}");

        let l = var(&tape, &[&[0.0, 0.0]]);
        assert!(cross_entropy(&tape, &l, &[IGNORE_INDEX]).is_err());
        assert!(cross_entropy(&tape, &l, &[2]).is_err());
    }

    #[test]
    fn ignored_positions_do_not_count() {
        let tape = Tape::new();
        let rows: [&[f64]; 4] = [&[1.0, 0.0], &[0.0, 2.0], &[5.0, 5.0], &[-3.0, 1.0]];
        let l = var(&tape, &rows);
        let all = cross_entropy(&tape, &l, &[0, 1, 0, 1]).unwrap().value().item().unwrap();
        let half = cross_entropy(&tape, &l, &[0, 1, IGNORE_INDEX, IGNORE_INDEX])
            .unwrap()
            .value()
            .item()
            .unwrap();
        let sum_first_two = cross_entropy(&tape, &l, &[0, IGNORE_INDEX, IGNORE_INDEX, IGNORE_INDEX])
            .unwrap()
            .value()
            .item()
            .unwrap()
            + cross_entropy(&tape, &l, &[IGNORE_INDEX, 1, IGNORE_INDEX, IGNORE_INDEX])
                .unwrap()
                .value()
                .item()
                .unwrap();
        assert!((half - sum_first_two / 2.0).abs() < 1e-15);
        assert!(all != half);
    }

    #[test]
    fn response_rld_single_position_matches_row_kl() {
        let tape = Tape::new();
        let s = var(&tape, &[&[0.2, 0.1, -0.4], &[1.0, -2.0, 0.5]]);
        let t = Tensor::from_rows(&[[0.0, 0.0, 0.0], [0.3, 0.3, -1.0]]).unwrap();
        let masked = response_rld(&tape, &s, &t, &[IGNORE_INDEX, 2], 1.0)
            .unwrap()
            .value()
            .item()
            .unwrap();
        let row = var(&tape, &[&[1.0, -2.0, 0.5]]);
        let single = reverse_kl(&tape, &row, &t.select_rows(&[1]).unwrap(), 1.0)
            .unwrap()
            .value()
            .item()
            .unwrap();
        assert_eq!(masked, single);
        let same = response_rld(&tape, &s, &s.to_tensor(), &[0, 1], 1.0).unwrap();
        assert!(same.value().item().unwrap().abs() < 1e-12);
        assert!(response_rld(&tape, &s, &t, &[IGNORE_INDEX, IGNORE_INDEX], 1.0).is_err());
    }

    #[test]
    fn combine_cases() {
        let w = LossWeights::default();
        assert_eq!(combine(&w, 1.0, 0.4, 0.2, 0.01).total, 1.0);
        let sft = LossWeights::sft_only();
        assert_eq!(combine(&sft, 0.7, 0.4, 0.2, 0.01).total, 0.7);
        assert_eq!(combine(&w, 0.0, 0.0, 0.0, 0.0).total, 0.0);
    }

    #[test]
    fn combine_on_tape_matches_scalar_form() {
        let tape = Tape::new();
        let w = LossWeights::default();
        let c = |v: f64| tape.param(Tensor::scalar(v));
        let (a, b, d, e) = (c(1.3), c(0.21), c(0.07), c(0.003));
        let total = combine_on_tape(&tape, &w, &a, &b, &d, &e).unwrap();
        let scalar = combine(&w, 1.3, 0.21, 0.07, 0.003).total;
        assert!((total.value().item().unwrap() - scalar).abs() <= 1e-12);
    }

    #[test]
    fn weights_validation() {
        LossWeights::default().validate().unwrap();
        LossWeights::sft_only().validate().unwrap();
        let bad = LossWeights {
            alpha: 1.5,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }
}
