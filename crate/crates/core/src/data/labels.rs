use crate::data::record::RecordKey;
use crate::error::{Error, Result};

/// Number of positives for a top-`alpha`% cut of `n` items.
pub fn top_alpha_count(n: usize, alpha: f64) -> usize {
    // Guard against 0.01 * 1000 landing a hair above 10 in floating point.
    let exact = alpha / 100.0 * n as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        exact.ceil() as usize
    }
}

/// Indices of `values` sorted by value descending, ties by key ascending.
pub fn rank_desc(values: &[f64], keys: &[RecordKey]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(keys[a].cmp(&keys[b])));
    idx
}

/// Labels the top `alpha`% of `returns` as 1: exactly `ceil(alpha/100 · N)`
/// entries, highest first, ties at the cutoff resolved by key ascending.
pub fn assign_labels(returns: &[(RecordKey, f64)], alpha: f64) -> Result<Vec<u8>> {
    if returns.is_empty() {
        return Err(Error::Data("cannot label an empty set of returns".into()));
    }
    if !(alpha > 0.0 && alpha < 100.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 100), got {alpha}")));
    }
    let values: Vec<f64> = returns.iter().map(|r| r.1).collect();
    let keys: Vec<RecordKey> = returns.iter().map(|r| r.0).collect();
    let k = top_alpha_count(returns.len(), alpha);
    let mut labels = vec![0u8; returns.len()];
    for &i in rank_desc(&values, &keys).iter().take(k) {
        labels[i] = 1;
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn keyed(values: &[f64]) -> Vec<(RecordKey, f64)> {
        values.iter().enumerate().map(|(i, &v)| ((i as u64, 0), v)).collect()
    }

    #[test]
    fn one_percent_of_thousand() {
        let vals: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64).collect();
        let labels = assign_labels(&keyed(&vals), 1.0).unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 10);
    }

    #[test]
    fn half_of_three() {
        let labels = assign_labels(&keyed(&[0.9, 0.1, 0.5]), 50.0).unwrap();
        assert_eq!(labels, vec![1, 0, 1]);
    }

    #[test]
    fn ties_broken_by_key() {
        let labels = assign_labels(&keyed(&[1.0; 10]), 20.0).unwrap();
        assert_eq!(labels, vec![1, 1, 0, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn rejects_empty_and_bad_alpha() {
        assert!(assign_labels(&[], 1.0).is_err());
        assert!(assign_labels(&keyed(&[1.0]), 0.0).is_err());
        assert!(assign_labels(&keyed(&[1.0]), 100.0).is_err());
    }

    proptest! {
        #[test]
        fn exact_positive_count(vals in prop::collection::vec(-1e3f64..1e3, 1..400), alpha in 0.1f64..99.9) {
            let labels = assign_labels(&keyed(&vals), alpha).unwrap();
            let pos = labels.iter().filter(|&&l| l == 1).count();
            prop_assert_eq!(pos, top_alpha_count(vals.len(), alpha));
            // every positive return >= every negative return
            let min_pos = vals.iter().zip(&labels).filter(|(_, &l)| l == 1).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
            let max_neg = vals.iter().zip(&labels).filter(|(_, &l)| l == 0).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(pos == 0 || min_pos >= max_neg);
        }
    }
}
