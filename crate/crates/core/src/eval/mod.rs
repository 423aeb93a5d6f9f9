//! Scoring groups with a trained model and turning scores into reports.

mod metrics;
pub mod twostep;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::groups::RankingGroup;
use crate::data::ledger::csv_err;
use crate::data::record::{Dataset, RecordKey, TraderRecord};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par::Exec;

pub use metrics::*;

/// Scores of each group's members, aligned with `group.members`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupScores {
    pub groups: Vec<RankingGroup>,
    pub scores: Vec<Vec<f64>>,
}

pub fn score_groups(model: &Model, split: &[TraderRecord], groups: &[RankingGroup], exec: Exec) -> Result<GroupScores> {
    let scores: Vec<Result<Vec<f64>>> = exec.map(groups, |g| {
        if let Some(&bad) = g.members.iter().find(|&&i| i >= split.len()) {
            return Err(Error::Data(format!("group {} references row {bad} outside the split", g.group_id)));
        }
        model.score_group(&g.records(split))
    });
    Ok(GroupScores {
        groups: groups.to_vec(),
        scores: scores.into_iter().collect::<Result<_>>()?,
    })
}

/// Candidate rows and their scores, concatenated over groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub rows: Vec<usize>,
    pub scores: Vec<f64>,
    pub keys: Vec<RecordKey>,
    pub labels: Vec<u8>,
    pub next_profit_20: Vec<f64>,
}

impl GroupScores {
    pub fn ranked_labels(&self, split: &[TraderRecord]) -> Vec<Vec<u8>> {
        self.groups
            .iter()
            .zip(&self.scores)
            .map(|(g, s)| {
                let recs = g.records(split);
                let labels: Vec<u8> = recs.iter().map(|r| r.label).collect();
                let keys: Vec<RecordKey> = recs.iter().map(|r| r.key()).collect();
                ranked_labels(s, &labels, &keys)
            })
            .collect()
    }

    pub fn ranking_metrics(&self, split: &[TraderRecord]) -> Result<RankingMetrics> {
        ranking_metrics(&self.ranked_labels(split))
    }

    pub fn candidates(&self, split: &[TraderRecord]) -> Candidates {
        let mut c = Candidates {
            rows: vec![],
            scores: vec![],
            keys: vec![],
            labels: vec![],
            next_profit_20: vec![],
        };
        for (g, s) in self.groups.iter().zip(&self.scores) {
            for (&i, &v) in g.members.iter().zip(s) {
                let r = &split[i];
                c.rows.push(i);
                c.scores.push(v);
                c.keys.push(r.key());
                c.labels.push(r.label);
                c.next_profit_20.push(r.next_profit_20);
            }
        }
        c
    }

    /// Per-group `group_id,ndcg3,ndcg5,ndcg10,rr`; empty fields where a
    /// group has no positive.
    pub fn write_group_csv(&self, split: &[TraderRecord], path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["group_id", "ndcg3", "ndcg5", "ndcg10", "rr"])
            .map_err(|e| csv_err(path, e))?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for (g, ranked) in self.groups.iter().zip(self.ranked_labels(split)) {
            w.write_record([
                g.group_id.to_string(),
                opt(ndcg_at_k(&ranked, 3)?),
                opt(ndcg_at_k(&ranked, 5)?),
                opt(ndcg_at_k(&ranked, 10)?),
                opt(reciprocal_rank(&ranked)),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    WithPrior,
    WithoutPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regime: Regime,
    pub ndcg3: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub mrr: f64,
    pub pnl: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub threshold: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n: usize,
    pub groups_with_positive: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned two-column text table.
    pub fn to_table(&self) -> String {
        let f = |v: f64| format!("{v:.6}");
        let mut rows: Vec<(&str, String)> = vec![
            (
                "regime",
                match self.regime {
                    Regime::WithPrior => "with-prior".into(),
                    Regime::WithoutPrior => "without-prior".into(),
                },
            ),
            ("ndcg@3", f(self.ndcg3)),
            ("ndcg@5", f(self.ndcg5)),
            ("ndcg@10", f(self.ndcg10)),
            ("mrr", f(self.mrr)),
            ("pnl", format!("{:.3}", self.pnl)),
            ("f1 (macro)", f(self.f1)),
            ("auc", self.auc.map(f).unwrap_or_else(|| "n/a".into())),
            ("precision", f(self.precision)),
            ("sensitivity", f(self.sensitivity)),
            ("specificity", f(self.specificity)),
        ];
        if let Some(t) = self.threshold {
            rows.push(("threshold", format!("{t:.1}")));
        }
        rows.push(("tp/fp/tn/fn", format!("{}/{}/{}/{}", self.tp, self.fp, self.tn, self.fn_)));
        rows.push(("n", self.n.to_string()));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        out
    }
}

/// Full report for test groups. The without-prior regime needs validation
/// scores to pick its threshold.
pub fn evaluate(
    test: &GroupScores,
    test_split: &[TraderRecord],
    regime: Regime,
    valid: Option<(&GroupScores, &[TraderRecord])>,
    prior: f64,
) -> Result<EvalReport> {
    let ranking = test.ranking_metrics(test_split)?;
    let c = test.candidates(test_split);
    let (pred, threshold) = match regime {
        Regime::WithPrior => (classify_with_prior(&c.scores, &c.keys, prior)?, None),
        Regime::WithoutPrior => {
            let (vs, vsplit) =
                valid.ok_or_else(|| Error::Config("without-prior evaluation needs validation groups".into()))?;
            let vc = vs.candidates(vsplit);
            let choice = classify_without_prior(&vc.scores, &vc.labels, &c.scores)?;
            (choice.predictions, Some(choice.threshold))
        }
    };
    let conf = confusion_metrics(&pred, &c.labels)?;
    Ok(EvalReport {
        regime,
        ndcg3: ranking.ndcg3,
        ndcg5: ranking.ndcg5,
        ndcg10: ranking.ndcg10,
        mrr: ranking.mrr,
        pnl: pnl_metric(&pred, &c.next_profit_20)?,
        f1: conf.macro_f1,
        auc: auc(&c.scores, &c.labels).ok(),
        precision: conf.precision,
        sensitivity: conf.sensitivity,
        specificity: conf.specificity,
        threshold,
        tp: conf.tp,
        fp: conf.fp,
        tn: conf.tn,
        fn_: conf.fn_,
        n: c.scores.len(),
        groups_with_positive: ranking.groups,
        seed: None,
        config_hash: None,
    })
}

/// One score per record of `dataset`, scoring it in exhaustive groups.
pub fn score_dataset(model: &Model, dataset: &Dataset, group_size: usize, seed: u64, exec: Exec) -> Result<Vec<f64>> {
    use crate::data::groups::{allocate_groups_with, GroupMode};
    let groups = allocate_groups_with(&dataset.records, group_size, GroupMode::TestExhaustive, seed, exec)?;
    let gs = score_groups(model, &dataset.records, &groups, exec)?;
    let mut out = vec![f64::NAN; dataset.records.len()];
    for (g, s) in gs.groups.iter().zip(&gs.scores) {
        for (&i, &v) in g.members.iter().zip(s) {
            out[i] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, label: u8, p20: f64) -> TraderRecord {
        TraderRecord {
            account_id: id,
            period: 0,
            market: 0,
            continuous: vec![],
            categorical: vec![],
            next_total_pl: 0.0,
            next_profit_20: p20,
            future_return: 0.0,
            label,
        }
    }

    fn fixture() -> (Vec<TraderRecord>, GroupScores) {
        let split: Vec<TraderRecord> = (0..200).map(|i| rec(i, (i % 100 == 7) as u8, i as f64)).collect();
        let groups = vec![
            RankingGroup {
                group_id: 0,
                market: 0,
                period: 0,
                members: (0..100).collect(),
            },
            RankingGroup {
                group_id: 1,
                market: 1,
                period: 0,
                members: (100..200).collect(),
            },
        ];
        // Oracle scorer in group 0, positive ranked second in group 1.
        let scores = vec![
            (0..100).map(|i| if i == 7 { 5.0 } else { -5.0 }).collect(),
            (100..200).map(|i| if i == 107 { 4.0 } else if i == 150 { 6.0 } else { -5.0 }).collect(),
        ];
        (split, GroupScores { groups, scores })
    }

    #[test]
    fn report_with_prior() {
        let (split, gs) = fixture();
        let r = evaluate(&gs, &split, Regime::WithPrior, None, 0.01).unwrap();
        assert_eq!(r.mrr, 0.75);
        assert_eq!(r.n, 200);
        assert_eq!(r.tp + r.fp, 2);
        assert_eq!(r.tp + r.fp + r.tn + r.fn_, 200);
        assert_eq!((r.tp, r.fp), (1, 1));
        // Flagged: row 150 (score 6) and row 7 (score 5); unflagged gains are paid out.
        let total: f64 = (0..200).map(|i| i as f64).sum();
        assert_eq!(r.pnl, -(total - 150.0 - 7.0));
        assert!(r.to_table().contains("ndcg@10"));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn without_prior_needs_validation() {
        let (split, gs) = fixture();
        assert!(evaluate(&gs, &split, Regime::WithoutPrior, None, 0.01).is_err());
        let r = evaluate(&gs, &split, Regime::WithoutPrior, Some((&gs, &split)), 0.01).unwrap();
        assert!(r.threshold.is_some());
    }

    #[test]
    fn group_csv_has_one_row_per_group() {
        let (split, gs) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        gs.write_group_csv(&split, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "group_id,ndcg3,ndcg5,ndcg10,rr");
        assert_eq!(lines[1], "0,1.0,1.0,1.0,1.0");
        assert!(lines[2].starts_with("1,") && lines[2].ends_with(",0.5"));
    }
}
