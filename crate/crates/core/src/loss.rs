//! Profit-aware pairwise BCE and the pointwise/listwise baselines.
//!
//! Within a group sorted by profit descending, every pair `i < j` is a
//! positive pairwise example ("i should outrank j") weighted by
//! `ln(1 + p_i - p_j)`. Tied profits get weight zero, so the order among
//! tied members never matters.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, Tensor};

/// Members sorted by profit descending, ties by position.
pub fn profit_order(profits: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..profits.len()).collect();
    idx.sort_by(|&a, &b| profits[b].total_cmp(&profits[a]).then(a.cmp(&b)));
    idx
}

/// P&L gap matrix in profit-sorted order. `order[r]` is the input position
/// of the member at sorted rank `r`, so scores can be aligned with it.
#[derive(Debug, Clone, PartialEq)]
pub struct PnlGap {
    pub n: usize,
    pub order: Vec<usize>,
    /// Row-major `n×n`, symmetric, zero diagonal.
    pub matrix: Vec<f64>,
}

impl PnlGap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n + j]
    }
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("{name}[{i}] is not finite"))),
        None => Ok(()),
    }
}

pub fn build_pnl_gap(profits: &[f64]) -> Result<PnlGap> {
    check_finite("profits", profits)?;
    let order = profit_order(profits);
    let n = profits.len();
    let mut matrix = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let g = (profits[order[i]] - profits[order[j]]).ln_1p();
            matrix[i * n + j] = g;
            matrix[j * n + i] = g;
        }
    }
    Ok(PnlGap { n, order, matrix })
}

/// `σ(s_i − s_j)` off the diagonal, zero on it.
pub fn build_score_gap(scores: &[f64]) -> Result<Vec<f64>> {
    check_finite("scores", scores)?;
    let n = scores.len();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                m[i * n + j] = sigmoid(scores[i] - scores[j]);
            }
        }
    }
    Ok(m)
}

/// The triple behind the loss, all in profit-sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct GapMatrices {
    pub n: usize,
    pub g_pnl: Vec<f64>,
    pub g_score: Vec<f64>,
    pub target: Vec<f64>,
}

pub fn gap_matrices(scores: &[f64], profits: &[f64]) -> Result<GapMatrices> {
    check_len(scores.len(), profits.len())?;
    let gap = build_pnl_gap(profits)?;
    let sorted: Vec<f64> = gap.order.iter().map(|&i| scores[i]).collect();
    let n = gap.n;
    let target = (0..n * n).map(|k| if k / n < k % n { 1.0 } else { 0.0 }).collect();
    Ok(GapMatrices {
        n,
        g_score: build_score_gap(&sorted)?,
        g_pnl: gap.matrix,
        target,
    })
}

fn check_len(scores: usize, other: usize) -> Result<()> {
    if scores != other {
        return Err(Error::Shape(format!("{scores} scores for {other} members")));
    }
    Ok(())
}

/// Pair weights in input order for [`Tape::pairwise_softplus`]:
/// `w[a][b] = ln(1 + p_a − p_b)` when `p_a > p_b`, else 0.
pub fn pa_bce_weights(profits: &[f64]) -> Result<Vec<f64>> {
    check_finite("profits", profits)?;
    let n = profits.len();
    let mut w = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            if profits[a] > profits[b] {
                w[a * n + b] = (profits[a] - profits[b]).ln_1p();
            }
        }
    }
    Ok(w)
}

/// Upper-triangular PA-BCE of one group on a tape; `scores` is `n×1`.
pub fn pa_bce_tape(tape: &mut Tape, scores: Var, profits: &[f64]) -> Result<Var> {
    check_len(tape.value(scores).len(), profits.len())?;
    let w = pa_bce_weights(profits)?;
    Ok(tape.pairwise_softplus(scores, w))
}

/// Upper-triangular PA-BCE of one group, `Σ_{i<j} g_ij · softplus(s_j − s_i)`.
pub fn pa_bce_value(scores: &[f64], profits: &[f64]) -> Result<f64> {
    check_len(scores.len(), profits.len())?;
    check_finite("scores", scores)?;
    let gap = build_pnl_gap(profits)?;
    let n = gap.n;
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let g = gap.get(i, j);
            if g != 0.0 {
                total += g * softplus(scores[gap.order[j]] - scores[gap.order[i]]);
            }
        }
    }
    Ok(total)
}

/// Summed PA-BCE over groups of `(scores, profits)`.
pub fn pa_bce_loss(groups: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    groups.iter().map(|(s, p)| pa_bce_value(s, p)).sum()
}

/// Loss over the full matrices: `Σ_{i≠j} G_pnl · BCE(G_score, T)`.
pub fn pa_bce_full_matrix(scores: &[f64], profits: &[f64]) -> Result<f64> {
    let m = gap_matrices(scores, profits)?;
    let n = m.n;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let k = i * n + j;
            let p = m.g_score[k];
            let bce = -(m.target[k] * p.ln() + (1.0 - m.target[k]) * (1.0 - p).ln());
            total += m.g_pnl[k] * bce;
        }
    }
    Ok(total)
}

/// Counts ordered-pair labels `y_ij = [p_i > p_j]` over all `i ≠ j`.
pub fn pairwise_label_balance(profits: &[f64]) -> Result<(usize, usize)> {
    let order = profit_order(profits);
    if let Some(w) = order.windows(2).find(|w| profits[w[0]] == profits[w[1]]) {
        return Err(Error::Data(format!(
            "members {} and {} share profit {}",
            w[0].min(w[1]),
            w[0].max(w[1]),
            profits[w[0]]
        )));
    }
    let (mut pos, mut neg) = (0, 0);
    for (i, pi) in profits.iter().enumerate() {
        for (j, pj) in profits.iter().enumerate() {
            if i != j {
                if pi > pj {
                    pos += 1;
                } else {
                    neg += 1;
                }
            }
        }
    }
    Ok((pos, neg))
}

/// Positions of the `k` most profitable members in profit-descending order,
/// ties broken by `ids` ascending.
pub fn topk_sample(profits: &[f64], ids: &[u64], k: usize) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config(format!("top-k needs k >= 2, got {k}")));
    }
    check_len(profits.len(), ids.len())?;
    let mut idx: Vec<usize> = (0..profits.len()).collect();
    idx.sort_by(|&a, &b| profits[b].total_cmp(&profits[a]).then(ids[a].cmp(&ids[b])));
    idx.truncate(k);
    Ok(idx)
}

/// `Σ w_t · [t·softplus(−s) + (1−t)·softplus(s)]`, where `w_t` is `weight`
/// for positives and 1 otherwise.
pub fn weighted_bce_tape(tape: &mut Tape, scores: Var, labels: &[u8], weight: f64) -> Result<Var> {
    let shape = tape.value(scores).shape().to_vec();
    check_len(tape.value(scores).len(), labels.len())?;
    let pos = Tensor::new(shape.clone(), labels.iter().map(|&t| weight * t as f64).collect())?;
    let neg = Tensor::new(shape, labels.iter().map(|&t| 1.0 - t as f64).collect())?;
    let ns = tape.neg(scores);
    let sp_neg = tape.softplus(ns);
    let sp_pos = tape.softplus(scores);
    let wp = tape.input(pos);
    let wn = tape.input(neg);
    let a = tape.mul(sp_neg, wp);
    let b = tape.mul(sp_pos, wn);
    let c = tape.add(a, b);
    Ok(tape.sum(c))
}

pub fn bce_tape(tape: &mut Tape, scores: Var, labels: &[u8]) -> Result<Var> {
    weighted_bce_tape(tape, scores, labels, 1.0)
}

/// `−Σ_{positives} ln softmax(s)`; zero for a group without positives.
pub fn logsoftmax_tape(tape: &mut Tape, scores: Var, labels: &[u8]) -> Result<Var> {
    let n = tape.value(scores).len();
    check_len(n, labels.len())?;
    let row = tape.reshape(scores, vec![1, n]);
    let ls = tape.log_softmax_rows(row);
    let t = tape.input(Tensor::new(vec![1, n], labels.iter().map(|&t| -(t as f64)).collect())?);
    let m = tape.mul(ls, t);
    Ok(tape.sum(m))
}

pub fn weighted_bce_value(scores: &[f64], labels: &[u8], weight: f64) -> Result<f64> {
    check_len(scores.len(), labels.len())?;
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(&s, &t)| if t == 1 { weight * softplus(-s) } else { softplus(s) })
        .sum())
}

pub fn bce_value(scores: &[f64], labels: &[u8]) -> Result<f64> {
    weighted_bce_value(scores, labels, 1.0)
}

pub fn logsoftmax_value(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_len(scores.len(), labels.len())?;
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    Ok(scores.iter().zip(labels).filter(|(_, &t)| t == 1).map(|(s, _)| lse - s).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    PaBce,
    Bce,
    WBce,
    #[serde(rename = "logsoftmax")]
    LogSoftmax,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::PaBce => "pa-bce",
            LossKind::Bce => "bce",
            LossKind::WBce => "w-bce",
            LossKind::LogSoftmax => "logsoftmax",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pa-bce" => Ok(LossKind::PaBce),
            "bce" => Ok(LossKind::Bce),
            "w-bce" => Ok(LossKind::WBce),
            "logsoftmax" => Ok(LossKind::LogSoftmax),
            _ => Err(Error::Config(format!(
                "unknown loss {s:?} (expected pa-bce, bce, w-bce or logsoftmax)"
            ))),
        }
    }
}

/// Loss of one group on a tape.
pub fn group_loss(
    tape: &mut Tape,
    kind: LossKind,
    scores: Var,
    profits: &[f64],
    labels: &[u8],
    positive_weight: f64,
) -> Result<Var> {
    match kind {
        LossKind::PaBce => pa_bce_tape(tape, scores, profits),
        LossKind::Bce => bce_tape(tape, scores, labels),
        LossKind::WBce => weighted_bce_tape(tape, scores, labels, positive_weight),
        LossKind::LogSoftmax => logsoftmax_tape(tape, scores, labels),
    }
}
