//! Two-step evaluation: first-step ranking scores become a feature of an
//! interpretable second-step classifier.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::metrics::{classify_without_prior, confusion_metrics, pnl_metric, Confusion};
use crate::data::record::{Dataset, MinMax};
use crate::error::{Error, Result};
use crate::tensor::sigmoid;

pub const SCORE_COLUMN: &str = "fst_step_scores";

/// Appends `fst_step_scores` to each split, min-max scaled with the train
/// split's range.
pub fn export_two_step(splits: [&Dataset; 3], scores: [&[f64]; 3]) -> Result<[Dataset; 3]> {
    for (d, s) in splits.iter().zip(&scores) {
        if d.records.len() != s.len() {
            return Err(Error::Shape(format!("{} scores for {} records", s.len(), d.records.len())));
        }
        if let Some(i) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("first-step score {i} is not finite")));
        }
    }
    if splits[0].schema.continuous.iter().any(|c| c == SCORE_COLUMN) {
        return Err(Error::Data(format!("dataset already has a {SCORE_COLUMN} column")));
    }
    let mm = MinMax::fit(scores[0].iter().copied());
    Ok([0, 1, 2].map(|k| {
        let mut d = splits[k].clone();
        d.schema.continuous.push(SCORE_COLUMN.to_string());
        if let Some(n) = d.schema.normalization.as_mut() {
            n.push(mm);
        }
        for (r, &s) in d.records.iter_mut().zip(scores[k]) {
            r.continuous.push(mm.apply(s));
        }
        d
    }))
}

/// Input column of the second-step model: a continuous feature or a whole
/// one-hot-encoded categorical feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Column {
    Continuous(usize),
    Categorical(usize),
}

fn design(d: &Dataset) -> Vec<Vec<f64>> {
    let vocab = d.schema.vocab_sizes();
    d.records
        .iter()
        .map(|r| {
            let mut x = r.continuous.clone();
            for (&v, &s) in r.categorical.iter().zip(&vocab) {
                let base = x.len();
                x.resize(base + s, 0.0);
                x[base + v as usize] = 1.0;
            }
            x
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub l2: f64,
    /// Cap on Newton steps.
    pub iterations: usize,
    /// Weight the classes to equal total mass. Off by default: the
    /// threshold grid then sits on probabilities calibrated to the real
    /// class balance.
    pub balanced: bool,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            l2: 1e-4,
            iterations: 100,
            balanced: false,
        }
    }
}

/// L2-regularised logistic regression (bias unpenalised), fitted by damped
/// Newton steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl LogisticModel {
    pub fn fit(x: &[Vec<f64>], y: &[u8], cfg: &LogisticConfig) -> Result<Self> {
        let n = x.len();
        let pos = y.iter().filter(|&&v| v == 1).count();
        if pos == 0 || pos == n {
            return Err(Error::Data("second-step training data has a single class".into()));
        }
        if !(cfg.l2 >= 0.0) || cfg.iterations == 0 {
            return Err(Error::Config("logistic regression needs l2 >= 0 and at least one iteration".into()));
        }
        let dim = x[0].len();
        let (wp, wn) = if cfg.balanced {
            (n as f64 / (2.0 * pos as f64), n as f64 / (2.0 * (n - pos) as f64))
        } else {
            (1.0, 1.0)
        };
        let cw: Vec<f64> = y.iter().map(|&v| if v == 1 { wp } else { wn }).collect();
        // Column 0 is the bias.
        let design = DMatrix::from_fn(n, dim + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
        let mut penalty = DVector::from_element(dim + 1, cfg.l2);
        // A whisker of curvature on the bias keeps the Hessian invertible
        // for separable data without shifting the optimum measurably.
        penalty[0] = 1e-12;
        let objective = |beta: &DVector<f64>| {
            let z = &design * beta;
            let data: f64 = (0..n).map(|i| cw[i] * (log1p_exp(z[i]) - y[i] as f64 * z[i])).sum();
            data / n as f64 + 0.5 * beta.iter().zip(penalty.iter()).map(|(b, l)| l * b * b).sum::<f64>()
        };
        let mut beta = DVector::zeros(dim + 1);
        let mut f = objective(&beta);
        for _ in 0..cfg.iterations {
            let z = &design * &beta;
            let p = z.map(sigmoid);
            let resid = DVector::from_fn(n, |i, _| cw[i] * (p[i] - y[i] as f64) / n as f64);
            let grad = design.tr_mul(&resid) + penalty.component_mul(&beta);
            let curv = DVector::from_fn(n, |i, _| cw[i] * p[i] * (1.0 - p[i]) / n as f64);
            let mut hess = design.tr_mul(&DMatrix::from_fn(n, dim + 1, |i, j| curv[i] * design[(i, j)]));
            for j in 0..=dim {
                hess[(j, j)] += penalty[j];
            }
            let step = match hess.cholesky() {
                Some(c) => c.solve(&grad),
                None => return Err(Error::Numeric("logistic regression Hessian is not positive definite".into())),
            };
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-10 {
                let cand = &beta - &step * t;
                let fc = objective(&cand);
                if fc <= f {
                    beta = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted || step.amax() * t < 1e-10 {
                break;
            }
        }
        if !beta.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("logistic regression diverged".into()));
        }
        Ok(LogisticModel {
            weights: beta.iter().skip(1).copied().collect(),
            bias: beta[0],
        })
    }

    pub fn logits(&self, x: &[Vec<f64>]) -> Vec<f64> {
        x.iter()
            .map(|xi| self.bias + xi.iter().zip(&self.weights).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondStepResult {
    pub model: LogisticModel,
    pub threshold: f64,
    pub confusion: Confusion,
    pub pnl: f64,
    /// Mean macro-F1 drop when one input column is shuffled, per column.
    pub importance: Vec<(String, f64)>,
}

/// Fits on `train`, picks the threshold on `valid`, reports on `test`.
pub fn second_step_classifier(
    train: &Dataset,
    valid: &Dataset,
    test: &Dataset,
    cfg: &LogisticConfig,
    seed: u64,
) -> Result<SecondStepResult> {
    let labels = |d: &Dataset| d.records.iter().map(|r| r.label).collect::<Vec<u8>>();
    let model = LogisticModel::fit(&design(train), &labels(train), cfg)?;
    let choice = classify_without_prior(&model.logits(&design(valid)), &labels(valid), &model.logits(&design(test)))?;
    let test_labels = labels(test);
    let confusion = confusion_metrics(&choice.predictions, &test_labels)?;
    let p20: Vec<f64> = test.records.iter().map(|r| r.next_profit_20).collect();
    let pnl = pnl_metric(&choice.predictions, &p20)?;

    let columns: Vec<(String, Column)> = test
        .schema
        .continuous
        .iter()
        .enumerate()
        .map(|(j, n)| (n.clone(), Column::Continuous(j)))
        .chain(test.schema.categorical.iter().enumerate().map(|(j, c)| (c.name.clone(), Column::Categorical(j))))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut importance = Vec::with_capacity(columns.len());
    for (name, col) in columns {
        let mut drop = 0.0;
        for _ in 0..5 {
            let mut shuffled = test.clone();
            let mut order: Vec<usize> = (0..test.records.len()).collect();
            order.shuffle(&mut rng);
            for (r, &src) in shuffled.records.iter_mut().zip(&order) {
                match col {
                    Column::Continuous(j) => r.continuous[j] = test.records[src].continuous[j],
                    Column::Categorical(j) => r.categorical[j] = test.records[src].categorical[j],
                }
            }
            let pred: Vec<u8> = model
                .logits(&design(&shuffled))
                .iter()
                .map(|&z| (sigmoid(z) >= choice.threshold) as u8)
                .collect();
            drop += confusion.macro_f1 - confusion_metrics(&pred, &test_labels)?.macro_f1;
        }
        importance.push((name, drop / 5.0));
    }
    Ok(SecondStepResult {
        model,
        threshold: choice.threshold,
        confusion,
        pnl,
        importance,
    })
}
