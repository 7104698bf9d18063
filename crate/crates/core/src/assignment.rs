//! Vision token matching between a teacher and a student with different
//! numbers of vision tokens.
//!
//! Costs are Manhattan distances between the two token sets (normally the
//! final-layer vision logits). The rectangular assignment is solved with a
//! shortest-augmenting-path Hungarian method over the smaller side, so every
//! student token receives exactly one distinct teacher token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelOutputs;
use crate::numerics::{Tape, Tensor};

/// Largest smaller-side size accepted by [`brute_force_lap`].
pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Dense row-major cost matrix, rows = teacher tokens, cols = student tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, costs: Vec<f64>) -> Result<Self> {
        if rows * cols != costs.len() {
            return Err(Error::invalid(
                "cost_matrix",
                format!("{rows}x{cols} needs {} entries, got {}", rows * cols, costs.len()),
            ));
        }
        if let Some(c) = costs.iter().find(|c| **c < 0.0) {
            return Err(Error::invalid(
                "cost_matrix",
                format!("negative cost {c}"),
            ));
        }
        Ok(Self { rows, cols, costs })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let t = Tensor::from_rows(rows)?;
        let (r, c) = (t.shape()[0], t.shape()[1]);
        Self::new(r, c, t.into_data())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.costs[row * self.cols + col]
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn transpose(&self) -> Self {
        let mut costs = Vec::with_capacity(self.costs.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                costs.push(self.get(i, j));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            costs,
        }
    }

    /// Sum of the selected entries, accumulated in the given pair order.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().fold(0.0, |acc, &(i, j)| acc + self.get(i, j))
    }
}

/// A matching of teacher rows to student columns.
///
/// Pairs are `(teacher_index, student_index)`, ordered by the index on the
/// smaller side of the cost matrix (the student side when teacher tokens
/// outnumber student tokens).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn teacher_indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn student_indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    /// Identity pairing `(i, i)` for `n` tokens.
    pub fn identity(n: usize) -> Self {
        Self {
            pairs: (0..n).map(|i| (i, i)).collect(),
            total_cost: 0.0,
        }
    }
}

/// Pairwise L1 distances between the rows of two token sets.
///
/// Works on plain tensors, so it can never add nodes to a tape.
pub fn manhattan_cost(teacher: &Tensor, student: &Tensor) -> Result<CostMatrix> {
    if teacher.rank() != 2 || student.rank() != 2 || teacher.last_dim() != student.last_dim() {
        return Err(Error::shape("manhattan_cost", teacher.shape(), student.shape()));
    }
    let (nt, ns) = (teacher.rows(), student.rows());
    let mut costs = Vec::with_capacity(nt * ns);
    for i in 0..nt {
        let a = teacher.row(i);
        for j in 0..ns {
            let b = student.row(j);
            costs.push(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum());
        }
    }
    CostMatrix::new(nt, ns, costs)
}

fn check_solvable(op: &'static str, cost: &CostMatrix) -> Result<()> {
    if cost.rows == 0 || cost.cols == 0 {
        return Err(Error::invalid(op, "cost matrix must be at least 1x1"));
    }
    if cost.costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid(op, "cost matrix contains NaN or infinite entries"));
    }
    Ok(())
}

/// Minimum-cost assignment of the smaller side into the larger.
///
/// Shortest augmenting paths with row/column potentials, one row at a time;
/// O(small² · large). Among equal reduced costs the lowest column wins.
pub fn solve_lap(cost: &CostMatrix) -> Result<Assignment> {
    check_solvable("solve_lap", cost)?;
    let pairs = if cost.rows <= cost.cols {
        augment_rows(cost)
            .into_iter()
            .enumerate()
            .collect::<Vec<_>>()
    } else {
        augment_rows(&cost.transpose())
            .into_iter()
            .enumerate()
            .map(|(j, i)| (i, j))
            .collect()
    };
    let total_cost = cost.total(&pairs);
    Ok(Assignment { pairs, total_cost })
}

/// Returns, for each row, its assigned column. Requires `rows <= cols`.
fn augment_rows(cost: &CostMatrix) -> Vec<usize> {
    let (n, m) = (cost.rows, cost.cols);
    debug_assert!(n <= m);
    // 1-based with a virtual column 0 holding the row being inserted.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0; m + 1];
    let mut used = vec![false; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assigned = vec![0usize; n];
    for j in 1..=m {
        if owner[j] > 0 {
            assigned[owner[j] - 1] = j - 1;
        }
    }
    assigned
}

/// Exhaustive minimum over all injections of the smaller side.
///
/// Ties resolve to the lexicographically smallest partner sequence.
pub fn brute_force_lap(cost: &CostMatrix) -> Result<Assignment> {
    check_solvable("brute_force_lap", cost)?;
    let transposed = cost.rows > cost.cols;
    let view = if transposed {
        cost.transpose()
    } else {
        cost.clone()
    };
    if view.rows > BRUTE_FORCE_LIMIT {
        return Err(Error::invalid(
            "brute_force_lap",
            format!(
                "smaller side {} exceeds enumeration bound {BRUTE_FORCE_LIMIT}",
                view.rows
            ),
        ));
    }

    struct Search<'a> {
        cost: &'a CostMatrix,
        taken: Vec<bool>,
        current: Vec<usize>,
        best: Vec<usize>,
        best_cost: f64,
    }

    impl Search<'_> {
        fn run(&mut self, row: usize, partial: f64) {
            if partial >= self.best_cost {
                return;
            }
            if row == self.cost.rows {
                self.best_cost = partial;
                self.best.clone_from(&self.current);
                return;
            }
            for col in 0..self.cost.cols {
                if self.taken[col] {
                    continue;
                }
                self.taken[col] = true;
                self.current.push(col);
                self.run(row + 1, partial + self.cost.get(row, col));
                self.current.pop();
                self.taken[col] = false;
            }
        }
    }

    let mut search = Search {
        cost: &view,
        taken: vec![false; view.cols],
        current: Vec::with_capacity(view.rows),
        best: Vec::new(),
        best_cost: f64::INFINITY,
    };
    search.run(0, 0.0);

    let pairs: Vec<(usize, usize)> = search
        .best
        .iter()
        .enumerate()
        .map(|(r, &c)| if transposed { (c, r) } else { (r, c) })
        .collect();
    Ok(Assignment {
        total_cost: cost.total(&pairs),
        pairs,
    })
}

/// 1-D adaptive average pooling of `[N_t, D]` teacher tokens down to
/// `target_len` tokens; pooled token `i` pairs with student token `i`.
pub fn pool_match(teacher_tokens: &Tensor, target_len: usize) -> Result<Tensor> {
    if teacher_tokens.rank() != 2 {
        return Err(Error::invalid("pool_match", "expected [N, D] tokens"));
    }
    if target_len == 0 || target_len > teacher_tokens.rows() {
        return Err(Error::invalid(
            "pool_match",
            format!(
                "cannot pool {} teacher tokens to {target_len}",
                teacher_tokens.rows()
            ),
        ));
    }
    let tape = Tape::inference();
    let x = tape.constant(teacher_tokens.clone());
    Ok(tape.adaptive_avg_pool_1d(&x, target_len)?.to_tensor())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStrategy {
    /// Manhattan cost on final-layer vision logits, then assignment.
    #[default]
    HungarianLogits,
    /// Manhattan cost on final-layer vision hidden states (equal widths only).
    HungarianHidden,
    /// 1-D average pooling of teacher tokens to the student length.
    Pooling,
}

/// Result of matching one teacher/student sample pair.
#[derive(Clone, Debug)]
pub enum VisionMatch {
    Assigned(Assignment),
    Pooled { hidden: Tensor, logits: Tensor },
}

/// Teacher rows aligned one-to-one with selected student rows.
#[derive(Clone, Debug)]
pub struct MatchedTeacher {
    pub student_rows: Vec<usize>,
    pub hidden: Tensor,
    pub logits: Tensor,
}

impl VisionMatch {
    pub fn matched_teacher(&self, teacher: &ModelOutputs) -> Result<MatchedTeacher> {
        match self {
            VisionMatch::Assigned(a) => {
                let t_idx = a.teacher_indices();
                Ok(MatchedTeacher {
                    student_rows: a.student_indices(),
                    hidden: teacher.vision_hidden.value().select_rows(&t_idx)?,
                    logits: teacher.vision_logits.value().select_rows(&t_idx)?,
                })
            }
            VisionMatch::Pooled { hidden, logits } => Ok(MatchedTeacher {
                student_rows: (0..hidden.rows()).collect(),
                hidden: hidden.clone(),
                logits: logits.clone(),
            }),
        }
    }

    pub fn assignment(&self) -> Option<&Assignment> {
        match self {
            VisionMatch::Assigned(a) => Some(a),
            VisionMatch::Pooled { .. } => None,
        }
    }
}

/// Pairs teacher and student vision tokens for one sample.
///
/// Reads only tensor values; nothing is recorded on any tape.
pub fn match_vision_tokens(
    teacher: &ModelOutputs,
    student: &ModelOutputs,
    strategy: MatchStrategy,
) -> Result<VisionMatch> {
    match strategy {
        MatchStrategy::HungarianLogits => {
            let cost = manhattan_cost(teacher.vision_logits.value(), student.vision_logits.value())?;
            Ok(VisionMatch::Assigned(solve_lap(&cost)?))
        }
        MatchStrategy::HungarianHidden => {
            let (dt, ds) = (
                teacher.vision_hidden.value().last_dim(),
                student.vision_hidden.value().last_dim(),
            );
            if dt != ds {
                return Err(Error::invalid(
                    "match_vision_tokens",
                    format!("hidden-state matching needs equal widths, teacher {dt} vs student {ds}"),
                ));
            }
            let cost = manhattan_cost(teacher.vision_hidden.value(), student.vision_hidden.value())?;
            Ok(VisionMatch::Assigned(solve_lap(&cost)?))
        }
        MatchStrategy::Pooling => {
            let n = student.vision_hidden.value().rows();
            Ok(VisionMatch::Pooled {
                hidden: pool_match(teacher.vision_hidden.value(), n)?,
                logits: pool_match(teacher.vision_logits.value(), n)?,
            })
        }
    }
}
