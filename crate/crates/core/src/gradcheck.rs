//! Central finite differences, the oracle for every analytic gradient.

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so entries whose true gradient is
/// (near) zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Central-difference estimate of the gradient of `f` at `x`.
pub fn finite_diff<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut out = vec![0.0; x.len()];
    let mut probe = x.clone();
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "function returned non-finite value near entry {i}"
            )));
        }
        *o = (plus - minus) / (2.0 * eps);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, REL_FLOOR)
}

pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Outcome of comparing tape gradients against finite differences over all
/// parameter entries.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Perturbs every scalar of every parameter in `store` and compares the
/// central difference of `loss` with `analytic`. The relative-error floor
/// grows with `|loss|`, since rounding in the difference does too.
pub fn check_params<F>(
    store: &ParamStore,
    analytic: &Gradients,
    loss: F,
    eps: f64,
    exec: Exec,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64> + Sync + Send,
{
    let floor = REL_FLOOR * loss(store)?.abs().max(1.0);
    let mut entries = Vec::new();
    for (pi, p) in store.iter().enumerate() {
        for k in 0..p.value.len() {
            entries.push((pi, k));
        }
    }
    let results: Vec<Result<(f64, usize, usize)>> = exec.map(&entries, |&(pi, k)| {
        let mut probe = store.clone();
        let param = probe.iter_mut().nth(pi).expect("index in range");
        let orig = param.value.data()[k];
        param.value.data_mut()[k] = orig + eps;
        let plus = loss(&probe)?;
        let param = probe.iter_mut().nth(pi).expect("index in range");
        param.value.data_mut()[k] = orig - eps;
        let minus = loss(&probe)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric("loss non-finite under perturbation".into()));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.0[pi].as_ref().map_or(0.0, |g| g.data()[k]);
        Ok((relative_error_with_floor(a, numeric, floor), pi, k))
    });
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: entries.len(),
    };
    for r in results {
        let (err, pi, k) = r?;
        if report.worst_param.is_empty() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_param = store.iter().nth(pi).unwrap().name.clone();
            report.worst_index = k;
        }
    }
    Ok(report)
}

/// Full-model check of the PA-BCE gradient: a random group of 5 records,
/// `d_k = 8`, one self and one cross layer, everything drawn from `seed`.
pub fn pa_bce_model_check(seed: u64, exec: Exec) -> Result<GradCheckReport> {
    use crate::autodiff::Tape;
    use crate::data::record::TraderRecord;
    use crate::loss::pa_bce_tape;
    use crate::model::{forward_scores, Model, ModelConfig};
    use rand::{Rng, SeedableRng};

    let config = ModelConfig {
        d_k: 8,
        n_heads: 2,
        ff_width: 16,
        n_self_layers: 1,
        n_cross_layers: 1,
        n_continuous: 3,
        vocab_sizes: vec![4, 2],
        dropout: 0.0,
    };
    let model = Model::new(config.clone(), seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let records: Vec<TraderRecord> = (0..5u64)
        .map(|i| TraderRecord {
            account_id: i,
            period: 1,
            market: 0,
            continuous: (0..3).map(|_| rng.gen::<f64>()).collect(),
            categorical: vec![rng.gen_range(0..4), rng.gen_range(0..2)],
            next_total_pl: 0.0,
            next_profit_20: 0.0,
            future_return: 0.0,
            label: 0,
        })
        .collect();
    let refs: Vec<&TraderRecord> = records.iter().collect();
    // Distinct profits: a shuffled ladder plus jitter.
    let mut profits: Vec<f64> = (0..5).map(|i| 10.0 * i as f64 + rng.gen_range(0.0..5.0)).collect();
    rand::seq::SliceRandom::shuffle(&mut profits[..], &mut rng);
    let ids = model.ids().clone();
    let loss = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let s = forward_scores(&mut tape, &config, &ids, &refs, None)?;
        let l = pa_bce_tape(&mut tape, s, &profits)?;
        Ok(tape.value(l).item())
    };
    let mut tape = Tape::new(&model.params);
    let s = forward_scores(&mut tape, &config, &ids, &refs, None)?;
    let l = pa_bce_tape(&mut tape, s, &profits)?;
    let grads = tape.backward(l)?;
    check_params(&model.params, &grads, loss, 1e-5, exec)
}
