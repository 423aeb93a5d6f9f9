//! Stratified train/validation/test split with a fixed minority ratio.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::record::{Dataset, TraderRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    /// Positive share enforced inside every split.
    pub minority_ratio: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.70,
            valid: 0.10,
            test: 0.20,
            minority_ratio: 0.01,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|&f| !(f > 0.0)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must be positive and sum to 1")));
        }
        if !(self.minority_ratio > 0.0 && self.minority_ratio < 1.0) {
            return Err(Error::Config(format!(
                "minority ratio {} outside (0, 1)",
                self.minority_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<TraderRecord>,
    pub valid: Vec<TraderRecord>,
    pub test: Vec<TraderRecord>,
    /// Records dropped to reach the minority ratio.
    pub dropped: usize,
}

/// Splits `records` so each part holds its fraction of the data and the
/// positive share equals `minority_ratio` up to one record. The
/// over-represented class is downsampled first. Records keep their input
/// order inside each split.
pub fn split_dataset(records: &[TraderRecord], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut pos: Vec<usize> = (0..records.len()).filter(|&i| records[i].is_risky()).collect();
    let mut neg: Vec<usize> = (0..records.len()).filter(|&i| !records[i].is_risky()).collect();
    if pos.is_empty() {
        return Err(Error::Data("split needs at least one positive record".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let r = spec.minority_ratio;
    let (p, n) = (pos.len() as f64, neg.len() as f64);
    if p * (1.0 - r) > r * n + 1e-9 {
        let keep = ((r * n / (1.0 - r)).round() as usize).max(1);
        pos.truncate(keep);
    } else {
        let keep = ((p * (1.0 - r) / r).round() as usize).min(neg.len());
        neg.truncate(keep);
    }
    let dropped = records.len() - pos.len() - neg.len();

    let total = pos.len() + neg.len();
    let sizes = part_sizes(total, spec);
    let pos_sizes = part_sizes(pos.len(), spec);
    let names = ["train", "validation", "test"];
    for (k, &ps) in pos_sizes.iter().enumerate() {
        if ps == 0 {
            return Err(Error::Data(format!(
                "only {} positives after balancing; the {} split would get none",
                pos.len(),
                names[k]
            )));
        }
        if ps > sizes[k] {
            return Err(Error::Data("split too small for its positives".into()));
        }
    }

    let mut parts: [Vec<usize>; 3] = Default::default();
    let (mut pi, mut ni) = (0, 0);
    for k in 0..3 {
        let np = pos_sizes[k];
        let nn = sizes[k] - np;
        parts[k].extend_from_slice(&pos[pi..pi + np]);
        parts[k].extend_from_slice(&neg[ni..ni + nn]);
        pi += np;
        ni += nn;
        parts[k].sort_unstable();
    }
    let take = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        train: take(&parts[0]),
        valid: take(&parts[1]),
        test: take(&parts[2]),
        dropped,
    })
}

fn part_sizes(total: usize, spec: &SplitSpec) -> [usize; 3] {
    let t = (spec.train * total as f64).round() as usize;
    let v = ((spec.valid * total as f64).round() as usize).min(total - t);
    [t, v, total - t - v]
}

/// The three splits as datasets, continuous features min-max scaled with
/// parameters fitted on the train split only.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSplits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

pub fn prepare_splits(dataset: &Dataset, spec: &SplitSpec) -> Result<PreparedSplits> {
    let s = split_dataset(&dataset.records, spec)?;
    let mut schema = dataset.schema.clone();
    let mut train = Dataset {
        schema: schema.clone(),
        records: s.train,
    };
    let norm = train.fit_normalization();
    schema.normalization = Some(norm.clone());
    schema.seed = Some(spec.seed);
    train.schema = schema.clone();
    train.apply_normalization(&norm);
    let mut valid = Dataset {
        schema: schema.clone(),
        records: s.valid,
    };
    valid.apply_normalization(&norm);
    let mut test = Dataset {
        schema,
        records: s.test,
    };
    test.apply_normalization(&norm);
    Ok(PreparedSplits { train, valid, test })
}
