//! Teacher training, the distillation step and its training loop, and
//! evaluation.

mod adam;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use adam::{adam_update, AdamState};

use crate::assignment::{match_vision_tokens, MatchStrategy, VisionMatch};
use crate::data::{Dataset, Split, SyntheticExample, EOS, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::losses::{
    combine, combine_on_tape, cross_entropy, response_rld, vlad_loss, vsd_loss, LossBreakdown,
    LossWeights, VsdObject,
};
use crate::model::{argmax, ModelOutputs, ModelParameters};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            steps: 400,
            batch_size: 8,
            seed: 0,
            eval_interval: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub weights: LossWeights,
    pub matcher: MatchStrategy,
    pub vsd_object: VsdObject,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Student initialization seed.
    pub seed: u64,
    pub eval_interval: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            matcher: MatchStrategy::HungarianLogits,
            vsd_object: VsdObject::Logits,
            learning_rate: 3e-3,
            steps: 600,
            batch_size: 8,
            seed: 1,
            eval_interval: 100,
        }
    }
}

fn check_schedule(steps: usize, batch_size: usize, eval_interval: usize, lr: f64) -> Result<()> {
    if batch_size == 0 || eval_interval == 0 {
        return Err(Error::Config(
            "batch_size and eval_interval must be positive".into(),
        ));
    }
    if steps % eval_interval != 0 {
        return Err(Error::Config(format!(
            "steps {steps} must be a multiple of eval_interval {eval_interval}"
        )));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {lr} must be positive")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_schedule(self.steps, self.batch_size, self.eval_interval, self.learning_rate)
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        check_schedule(self.steps, self.batch_size, self.eval_interval, self.learning_rate)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub sup: f64,
    pub rld: f64,
    pub vsd: f64,
    pub vlad: f64,
    pub total: f64,
    pub eval_ce: f64,
    pub agreement: f64,
    pub exact_match: f64,
    pub ms: u64,
}

impl MetricsRecord {
    fn new(step: usize, losses: &LossBreakdown, eval: &EvalMetrics, ms: u64) -> Self {
        Self {
            step,
            sup: losses.sup,
            rld: losses.rld,
            vsd: losses.vsd,
            vlad: losses.vlad,
            total: losses.total,
            eval_ce: eval.eval_ce,
            agreement: eval.agreement,
            exact_match: eval.exact_match,
            ms,
        }
    }

    /// Equal in every field except the wall-clock timing.
    pub fn same_except_timing(&self, other: &Self) -> bool {
        Self { ms: 0, ..self.clone() } == Self { ms: 0, ..other.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub eval_ce: f64,
    pub agreement: f64,
    pub exact_match: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainState {
    pub step: usize,
    pub optimizer: AdamState,
    pub history: Vec<MetricsRecord>,
}

/// Loss values and student gradients of one distillation step.
pub struct StepOutcome {
    pub losses: LossBreakdown,
    pub student_grads: BTreeMap<String, Tensor>,
    /// Gradients reaching the teacher's parameters; all zero by construction.
    pub teacher_grads: BTreeMap<String, Tensor>,
    pub matches: Vec<VisionMatch>,
}

struct BatchLosses {
    total: Var,
    breakdown: LossBreakdown,
    matches: Vec<VisionMatch>,
}

fn mean_of(tape: &Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = tape.add(&acc, t)?;
    }
    tape.scale(&acc, 1.0 / terms.len() as f64)
}

/// Teacher forward, matching, and all four losses over a batch.
///
/// Everything teacher-side runs with recording disabled. Per-sample terms are
/// summed in batch order and divided by the batch size.
fn batch_losses(
    tape: &Tape,
    teacher: &ModelParameters,
    student: &crate::model::BoundModel<'_>,
    batch: &[SyntheticExample],
    cfg: &DistillConfig,
) -> Result<BatchLosses> {
    if batch.is_empty() {
        return Err(Error::invalid("distill_step", "empty batch"));
    }
    if teacher.config.vocab_size != student.config().vocab_size {
        return Err(Error::invalid(
            "distill_step",
            format!(
                "teacher vocabulary {} differs from student vocabulary {}",
                teacher.config.vocab_size,
                student.config().vocab_size
            ),
        ));
    }
    let teacher_model = tape.no_grad(|| teacher.bind(tape));
    let w = &cfg.weights;
    let mut sups = Vec::with_capacity(batch.len());
    let mut rlds = Vec::with_capacity(batch.len());
    let mut vsds = Vec::with_capacity(batch.len());
    let mut vlads = Vec::with_capacity(batch.len());
    let mut matches = Vec::with_capacity(batch.len());
    for ex in batch {
        let t_out = tape.no_grad(|| teacher_model.forward(tape, ex))?;
        let s_out = student.forward(tape, ex)?;
        let m = tape.no_grad(|| match_vision_tokens(&t_out, &s_out, cfg.matcher))?;
        let matched = m.matched_teacher(&t_out)?;
        vsds.push(vsd_loss(tape, &s_out, &matched, cfg.vsd_object, w)?);
        vlads.push(vlad_loss(tape, &t_out, &s_out, &matched, w.smooth_l1_delta)?);
        sups.push(cross_entropy(tape, &s_out.response_logits, &ex.labels)?);
        rlds.push(response_rld(
            tape,
            &s_out.response_logits,
            t_out.response_logits.value(),
            &ex.labels,
            w.temperature,
        )?);
        matches.push(m);
    }
    let sup = mean_of(tape, &sups)?;
    let rld = mean_of(tape, &rlds)?;
    let vsd = mean_of(tape, &vsds)?;
    let vlad = mean_of(tape, &vlads)?;
    let total = combine_on_tape(tape, w, &sup, &rld, &vsd, &vlad)?;
    let breakdown = combine(
        w,
        sup.value().item()?,
        rld.value().item()?,
        vsd.value().item()?,
        vlad.value().item()?,
    );
    Ok(BatchLosses {
        total,
        breakdown,
        matches,
    })
}

/// One distillation step: losses plus student gradients.
pub fn distill_step(
    teacher: &ModelParameters,
    student: &ModelParameters,
    batch: &[SyntheticExample],
    cfg: &DistillConfig,
) -> Result<StepOutcome> {
    let tape = Tape::new();
    let teacher_model = tape.no_grad(|| teacher.bind(&tape));
    let student_model = student.bind(&tape);
    let out = batch_losses(&tape, teacher, &student_model, batch, cfg)?;
    let grads = tape.backward(&out.total)?;
    Ok(StepOutcome {
        losses: out.breakdown,
        student_grads: student_model.gradients(&grads),
        teacher_grads: teacher_model.gradients(&grads),
        matches: out.matches,
    })
}

/// Loss values of a batch without gradients.
pub fn distill_losses(
    teacher: &ModelParameters,
    student: &ModelParameters,
    batch: &[SyntheticExample],
    cfg: &DistillConfig,
) -> Result<LossBreakdown> {
    let tape = Tape::inference();
    let student_model = student.bind(&tape);
    Ok(batch_losses(&tape, teacher, &student_model, batch, cfg)?.breakdown)
}

fn supervised_losses(params: &ModelParameters, batch: &[SyntheticExample]) -> Result<(Tape, Var, BTreeMap<String, Var>)> {
    let tape = Tape::new();
    let model = params.bind(&tape);
    let mut terms = Vec::with_capacity(batch.len());
    for ex in batch {
        let out = model.forward(&tape, ex)?;
        terms.push(cross_entropy(&tape, &out.response_logits, &ex.labels)?);
    }
    let loss = mean_of(&tape, &terms)?;
    let vars = model.vars().clone();
    Ok((tape, loss, vars))
}

fn probe_batch(dataset: &Dataset, batch_size: usize) -> Result<Vec<SyntheticExample>> {
    let n = batch_size.min(dataset.split_len(Split::Eval));
    (0..n)
        .map(|i| dataset.generate_example(Split::Eval, i))
        .collect()
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

/// Supervised-only metrics for a model with no teacher.
pub fn sft_record(
    params: &ModelParameters,
    dataset: &Dataset,
    batch_size: usize,
    step: usize,
    ms: u64,
) -> Result<MetricsRecord> {
    let probe = probe_batch(dataset, batch_size)?;
    let (_, loss, _) = supervised_losses(params, &probe)?;
    let sup = loss.value().item()?;
    let losses = combine(&LossWeights::sft_only(), sup, 0.0, 0.0, 0.0);
    let eval = evaluate(params, None, dataset, Split::Eval)?;
    Ok(MetricsRecord::new(step, &losses, &eval, ms))
}

/// Metrics for a student against its teacher: losses on the fixed probe
/// batch (the first `batch_size` eval examples) plus held-out evaluation.
pub fn distill_record(
    teacher: &ModelParameters,
    student: &ModelParameters,
    dataset: &Dataset,
    cfg: &DistillConfig,
    step: usize,
    ms: u64,
) -> Result<MetricsRecord> {
    let probe = probe_batch(dataset, cfg.batch_size)?;
    let losses = distill_losses(teacher, student, &probe, cfg)?;
    let eval = evaluate(student, Some(teacher), dataset, Split::Eval)?;
    Ok(MetricsRecord::new(step, &losses, &eval, ms))
}

/// Trains a model with cross-entropy only.
pub fn train_teacher(
    init: ModelParameters,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelParameters, Vec<MetricsRecord>)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut params = init;
    let mut state = TrainState::default();
    state
        .history
        .push(sft_record(&params, dataset, cfg.batch_size, 0, elapsed_ms(start))?);
    while state.step < cfg.steps {
        let batch = dataset.train_batch(state.step, cfg.batch_size)?;
        let step = state.step;
        let diverged = |e: Error| Error::Divergence {
            step,
            reason: e.to_string(),
        };
        let (tape, loss, vars) = supervised_losses(&params, &batch).map_err(diverged)?;
        let grads = tape.backward(&loss)?;
        let grads: BTreeMap<String, Tensor> = vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(v)))
            .collect();
        adam_update(&mut state.optimizer, &mut params, &grads, cfg.learning_rate)
            .map_err(diverged)?;
        state.step += 1;
        if state.step % cfg.eval_interval == 0 {
            state.history.push(sft_record(
                &params,
                dataset,
                cfg.batch_size,
                state.step,
                elapsed_ms(start),
            )?);
        }
    }
    Ok((params, state.history))
}

/// Distills `teacher` into a student starting from `student_init`.
///
/// With `α = 1, β = γ = 0` this is the supervised-only control run through
/// the same code path.
pub fn train_distill(
    teacher: &ModelParameters,
    student_init: ModelParameters,
    dataset: &Dataset,
    cfg: &DistillConfig,
) -> Result<(ModelParameters, Vec<MetricsRecord>)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut student = student_init;
    let mut state = TrainState::default();
    state.history.push(distill_record(
        teacher,
        &student,
        dataset,
        cfg,
        0,
        elapsed_ms(start),
    )?);
    while state.step < cfg.steps {
        let batch = dataset.train_batch(state.step, cfg.batch_size)?;
        let step = state.step;
        let last = state.history.last().cloned();
        let diverged = move |e: Error| Error::Divergence {
            step,
            reason: match &last {
                Some(r) => format!("{e}; last metrics {}", serde_json::to_string(r).unwrap_or_default()),
                None => e.to_string(),
            },
        };
        let outcome = distill_step(teacher, &student, &batch, cfg).map_err(diverged.clone())?;
        if !outcome.losses.total.is_finite() {
            return Err(diverged(Error::NonFinite { op: "distill_step" }));
        }
        adam_update(
            &mut state.optimizer,
            &mut student,
            &outcome.student_grads,
            cfg.learning_rate,
        )
        .map_err(diverged)?;
        state.step += 1;
        if state.step % cfg.eval_interval == 0 {
            state.history.push(distill_record(
                teacher,
                &student,
                dataset,
                cfg,
                state.step,
                elapsed_ms(start),
            )?);
        }
    }
    Ok((student, state.history))
}

/// Held-out metrics over a whole split.
///
/// * `eval_ce`: teacher-forced cross-entropy, averaged per example.
/// * `agreement`: fraction of response positions whose argmax equals the
///   teacher's argmax (or the label when no teacher is given).
/// * `exact_match`: fraction of examples whose greedy decode reproduces the
///   full response.
pub fn evaluate(
    params: &ModelParameters,
    teacher: Option<&ModelParameters>,
    dataset: &Dataset,
    split: Split,
) -> Result<EvalMetrics> {
    let n = dataset.split_len(split);
    let mut ce_sum = 0.0;
    let mut agree = 0usize;
    let mut positions = 0usize;
    let mut exact = 0usize;
    for i in 0..n {
        let ex = dataset.generate_example(split, i)?;
        let tape = Tape::inference();
        let out: ModelOutputs = params.bind(&tape).forward(&tape, &ex)?;
        ce_sum += cross_entropy(&tape, &out.response_logits, &ex.labels)?
            .value()
            .item()?;
        let reference = match teacher {
            Some(t) => Some(t.forward(&ex)?.response_logits.to_tensor()),
            None => None,
        };
        let logits = out.response_logits.value();
        for (r, &label) in ex.labels.iter().enumerate() {
            if label == IGNORE_INDEX {
                continue;
            }
            let target = match &reference {
                Some(t) => argmax(t.row(r)),
                None => label as usize,
            };
            agree += usize::from(argmax(logits.row(r)) == target);
            positions += 1;
        }
        let decoded =
            params.greedy_decode(&ex.patch_grid, &ex.prompt_ids, ex.response_ids.len(), EOS)?;
        exact += usize::from(decoded == ex.response_ids);
    }
    Ok(EvalMetrics {
        eval_ce: ce_sum / n as f64,
        agreement: agree as f64 / positions as f64,
        exact_match: exact as f64 / n as f64,
    })
}
