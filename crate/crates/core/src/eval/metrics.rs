//! Ranking, classification and P&L metrics.

use serde::{Deserialize, Serialize};

use crate::data::labels::{rank_desc, top_alpha_count};
use crate::data::record::RecordKey;
use crate::error::{Error, Result};
use crate::tensor::sigmoid;

/// NDCG@k of binary labels listed in ranked order; `None` when the list has
/// no positive (IDCG is zero).
pub fn ndcg_at_k(ranked: &[u8], k: usize) -> Result<Option<f64>> {
    if k < 1 {
        return Err(Error::Config("ndcg cutoff must be at least 1".into()));
    }
    let gain = |rel: u8| 2f64.powi(rel as i32) - 1.0;
    let disc = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranked.iter().take(k).enumerate().map(|(i, &r)| gain(r) * disc(i)).sum();
    let mut ideal = ranked.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &r)| gain(r) * disc(i)).sum();
    Ok((idcg > 0.0).then(|| dcg / idcg))
}

/// `1/rank` of the first positive, `None` if there is none.
pub fn reciprocal_rank(ranked: &[u8]) -> Option<f64> {
    ranked.iter().position(|&r| r > 0).map(|i| 1.0 / (i + 1) as f64)
}

/// Mean reciprocal rank over the groups that contain a positive.
pub fn mrr(groups: &[Vec<u8>]) -> Result<f64> {
    let rr: Vec<f64> = groups.iter().filter_map(|g| reciprocal_rank(g)).collect();
    if rr.is_empty() {
        return Err(Error::Data("no group contains a positive".into()));
    }
    Ok(rr.iter().sum::<f64>() / rr.len() as f64)
}

/// Mean NDCG@k over the groups that contain a positive.
pub fn mean_ndcg(groups: &[Vec<u8>], k: usize) -> Result<f64> {
    let mut vals = Vec::new();
    for g in groups {
        if let Some(v) = ndcg_at_k(g, k)? {
            vals.push(v);
        }
    }
    if vals.is_empty() {
        return Err(Error::Data("no group contains a positive".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Labels reordered by score descending, ties by key ascending.
pub fn ranked_labels(scores: &[f64], labels: &[u8], keys: &[RecordKey]) -> Vec<u8> {
    rank_desc(scores, keys).into_iter().map(|i| labels[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub ndcg3: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub mrr: f64,
    /// Groups with at least one positive.
    pub groups: usize,
}

pub fn ranking_metrics(ranked: &[Vec<u8>]) -> Result<RankingMetrics> {
    Ok(RankingMetrics {
        ndcg3: mean_ndcg(ranked, 3)?,
        ndcg5: mean_ndcg(ranked, 5)?,
        ndcg10: mean_ndcg(ranked, 10)?,
        mrr: mrr(ranked)?,
        groups: ranked.iter().filter(|g| g.contains(&1)).count(),
    })
}

/// Market maker's P&L: unhedged traders (y = 0) hand over their gains.
pub fn pnl_metric(predictions: &[u8], next_profit_20: &[f64]) -> Result<f64> {
    if predictions.len() != next_profit_20.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} profits",
            predictions.len(),
            next_profit_20.len()
        )));
    }
    Ok(predictions
        .iter()
        .zip(next_profit_20)
        .map(|(&y, &p)| if y == 1 { 0.0 } else { -p })
        .sum())
}

/// Flags exactly `ceil(prior·N)` top scorers, ties by key.
pub fn classify_with_prior(scores: &[f64], keys: &[RecordKey], prior: f64) -> Result<Vec<u8>> {
    if scores.is_empty() {
        return Err(Error::Data("no scores to classify".into()));
    }
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::Config(format!("prior {prior} outside (0, 1)")));
    }
    let k = top_alpha_count(scores.len(), prior * 100.0);
    let mut out = vec![0u8; scores.len()];
    for i in rank_desc(scores, keys).into_iter().take(k) {
        out[i] = 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Mean of the positive- and negative-class F1.
    pub macro_f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

pub fn confusion_metrics(predictions: &[u8], labels: &[u8]) -> Result<Confusion> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p == 1, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(Confusion {
        tp,
        fp,
        tn,
        fn_,
        precision: ratio(tp, tp + fp),
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
        macro_f1: 0.5 * (f1(tp, fp, fn_) + f1(tn, fn_, fp)),
    })
}

/// Threshold grid for the without-prior regime.
pub fn threshold_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

pub fn apply_threshold(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| (sigmoid(s) >= threshold) as u8).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub valid_f1: f64,
    pub predictions: Vec<u8>,
}

/// Picks the grid threshold with the best validation macro F1 on
/// `sigmoid(score)` (smallest wins ties) and applies it to `test_scores`.
pub fn classify_without_prior(valid_scores: &[f64], valid_labels: &[u8], test_scores: &[f64]) -> Result<ThresholdChoice> {
    if valid_scores.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    let mut best: Option<(f64, f64)> = None;
    for t in threshold_grid() {
        let f = confusion_metrics(&apply_threshold(valid_scores, t), valid_labels)?.macro_f1;
        if best.is_none_or(|(_, bf)| f > bf) {
            best = Some((t, f));
        }
    }
    let (threshold, valid_f1) = best.expect("grid is non-empty");
    Ok(ThresholdChoice {
        threshold,
        valid_f1,
        predictions: apply_threshold(test_scores, threshold),
    })
}

/// Probability that a random positive outscores a random negative, ties
/// counted half (Mann-Whitney statistic from average ranks).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("auc needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}
