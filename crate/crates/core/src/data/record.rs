use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordering key used for every deterministic tie-break: account, then period.
pub type RecordKey = (u64, u32);

/// One trader-period row.
#[derive(Debug, Clone, PartialEq)]
pub struct TraderRecord {
    pub account_id: u64,
    /// Bucket index of 20 trades.
    pub period: u32,
    /// Favourite market cluster over the history window; the grouping cell.
    pub market: u32,
    pub continuous: Vec<f64>,
    pub categorical: Vec<u32>,
    /// P&L of the next 100 trades, the ranking weight.
    pub next_total_pl: f64,
    /// P&L of the next 20 trades, used by the hedging P&L metric.
    pub next_profit_20: f64,
    /// Future return the label was derived from.
    pub future_return: f64,
    pub label: u8,
}

impl TraderRecord {
    pub fn key(&self) -> RecordKey {
        (self.account_id, self.period)
    }

    pub fn is_risky(&self) -> bool {
        self.label == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    pub vocab: u32,
}

/// Min-max scaling parameters of one continuous feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            min = min.min(v);
            max = max.max(v);
        }
        if !min.is_finite() {
            return MinMax { min: 0.0, max: 0.0 };
        }
        MinMax { min, max }
    }

    /// Maps into `[0, 1]`, clamping values outside the fitted range.
    /// Zero-range features map to 0.
    pub fn apply(&self, v: f64) -> f64 {
        let range = self.max - self.min;
        if range <= 0.0 {
            0.0
        } else {
            ((v - self.min) / range).clamp(0.0, 1.0)
        }
    }
}

/// Column layout of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub continuous: Vec<String>,
    pub categorical: Vec<CategoricalFeature>,
    /// Min-max parameters, present once fitted on a train split.
    #[serde(default)]
    pub normalization: Option<Vec<MinMax>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

impl FeatureSchema {
    pub fn new(continuous: Vec<String>, categorical: Vec<CategoricalFeature>) -> Self {
        FeatureSchema {
            continuous,
            categorical,
            normalization: None,
            seed: None,
            config_hash: None,
        }
    }

    pub fn n_continuous(&self) -> usize {
        self.continuous.len()
    }

    pub fn n_categorical(&self) -> usize {
        self.categorical.len()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.categorical.iter().map(|c| c.vocab as usize).collect()
    }

    pub fn validate_record(&self, r: &TraderRecord) -> Result<()> {
        if r.continuous.len() != self.continuous.len() || r.categorical.len() != self.categorical.len() {
            return Err(Error::Data(format!(
                "record {:?} has {}+{} features, schema expects {}+{}",
                r.key(),
                r.continuous.len(),
                r.categorical.len(),
                self.continuous.len(),
                self.categorical.len()
            )));
        }
        for (v, c) in r.categorical.iter().zip(&self.categorical) {
            if *v >= c.vocab {
                return Err(Error::Data(format!(
                    "record {:?}: {} = {v} outside vocabulary of size {}",
                    r.key(),
                    c.name,
                    c.vocab
                )));
            }
        }
        if r.label > 1 {
            return Err(Error::Data(format!("record {:?}: label {} not binary", r.key(), r.label)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub records: Vec<TraderRecord>,
}

impl Dataset {
    pub fn positives(&self) -> usize {
        self.records.iter().filter(|r| r.is_risky()).count()
    }

    pub fn validate(&self) -> Result<()> {
        self.records.iter().try_for_each(|r| self.schema.validate_record(r))
    }

    /// Fits min-max parameters on this dataset's continuous features.
    pub fn fit_normalization(&self) -> Vec<MinMax> {
        (0..self.schema.n_continuous())
            .map(|j| MinMax::fit(self.records.iter().map(|r| r.continuous[j])))
            .collect()
    }

    pub fn apply_normalization(&mut self, params: &[MinMax]) {
        for r in &mut self.records {
            for (v, p) in r.continuous.iter_mut().zip(params) {
                *v = p.apply(*v);
            }
        }
    }
}
