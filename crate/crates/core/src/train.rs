//! Classification pretraining of the self-trader encoder, then listwise
//! fine-tuning of the whole model.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::groups::RankingGroup;
use crate::data::record::TraderRecord;
use crate::error::{Error, Result};
use crate::eval::{auc, score_groups};
use crate::loss::{group_loss, topk_sample, weighted_bce_tape, LossKind};
use crate::model::{encode_self, forward_scores, save_checkpoint, Model, ModelIds};
use crate::optim::{Adam, AdamConfig};
use crate::par::Exec;
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    /// Pretraining stops after this many epochs without a better
    /// validation AUC.
    pub pretrain_patience: usize,
    /// Records per pretraining step.
    pub pretrain_batch: usize,
    pub finetune_epochs: usize,
    pub learning_rate: f64,
    /// Groups per optimizer step.
    pub batch_groups: usize,
    pub loss: LossKind,
    /// Members kept per group (most profitable first); `None` keeps all.
    pub topk: Option<usize>,
    /// Positive-class weight of the w-bce loss.
    pub positive_weight: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Best-validation model is written here whenever it improves.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 50,
            pretrain_patience: 5,
            pretrain_batch: 256,
            finetune_epochs: 200,
            learning_rate: 1e-4,
            batch_groups: 32,
            loss: LossKind::PaBce,
            topk: Some(20),
            positive_weight: 99.0,
            clip_norm: 5.0,
            seed: 0,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pretrain_epochs < 1 || self.finetune_epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_groups < 1 || self.pretrain_batch < 1 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.topk.is_some_and(|k| k < 2) {
            return Err(Error::Config("top-k must be at least 2".into()));
        }
        if !(self.clip_norm > 0.0) || !(self.positive_weight > 0.0) {
            return Err(Error::Config("clip norm and positive weight must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// One line of the progress log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// NaN while pretraining.
    pub val_ndcg10: f64,
    pub val_mrr: f64,
    /// Over all validation candidates pooled.
    pub val_auc: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,loss,val_ndcg10,val_mrr,val_auc,seconds";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:.3}",
            self.epoch, self.loss, self.val_ndcg10, self.val_mrr, self.val_auc, self.seconds
        )
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sums per-item gradients in item order, clips and takes one Adam step.
fn apply_step(params: &mut ParamStore, adam: &mut Adam, grads: &[Gradients], clip: f64) -> Result<()> {
    params.zero_grad();
    params.accumulate(&Gradients::sum_in_order(grads));
    params.clip_grad_norm(clip);
    adam.step(params)?;
    if !params.all_finite() {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

const PRETRAIN_CHUNK: usize = 16;

struct PretrainHead {
    ids: ModelIds,
    norm: (crate::params::ParamId, crate::params::ParamId),
    head: (crate::params::ParamId, crate::params::ParamId),
}

fn pretrain_store(model: &Model) -> Result<(ParamStore, PretrainHead)> {
    let d = model.config.d_k;
    let mut store = model.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = 1.0 / (d as f64).sqrt();
    let w: Vec<f64> = (0..d).map(|_| rand::Rng::gen_range(&mut rng, -a..=a)).collect();
    let norm = (
        store.add("pretrain.norm.w", Tensor::full(&[d], 1.0))?,
        store.add("pretrain.norm.b", Tensor::zeros(&[d]))?,
    );
    let head = (
        store.add("pretrain.head.w", Tensor::new(vec![d, 1], w)?)?,
        store.add("pretrain.head.b", Tensor::zeros(&[1]))?,
    );
    let ids = ModelIds::resolve(&store, &model.config)?;
    Ok((store, PretrainHead { ids, norm, head }))
}

/// Logit of the temporary head for each record, as a tape variable.
fn pretrain_logits(
    tape: &mut Tape,
    model: &Model,
    h: &PretrainHead,
    records: &[&TraderRecord],
) -> Result<crate::autodiff::Var> {
    let x = encode_self(tape, &model.config, &h.ids, records, None)?;
    let (g, b) = (tape.param(h.norm.0), tape.param(h.norm.1));
    let x = tape.layer_norm(x, g, b);
    let (w, b) = (tape.param(h.head.0), tape.param(h.head.1));
    Ok(tape.linear(x, w, b))
}

fn pretrain_scores(store: &ParamStore, model: &Model, h: &PretrainHead, records: &[TraderRecord], exec: Exec) -> Result<Vec<f64>> {
    let chunks: Vec<&[TraderRecord]> = records.chunks(PRETRAIN_CHUNK).collect();
    let out: Vec<Result<Vec<f64>>> = exec.map(&chunks, |c| {
        let refs: Vec<&TraderRecord> = c.iter().collect();
        let mut tape = Tape::new(store);
        let s = pretrain_logits(&mut tape, model, h, &refs)?;
        tape.check()?;
        Ok(tape.value(s).data().to_vec())
    });
    Ok(out.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

/// Trains the embedding and self-trader layers on per-record classification
/// through a temporary head, which is dropped afterwards. Positives are
/// weighted so both classes contribute equally. The parameters with the best
/// validation AUC are kept.
pub fn pretrain(
    model: &mut Model,
    train: &[TraderRecord],
    valid: &[TraderRecord],
    cfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<PretrainReport> {
    cfg.validate()?;
    let pos = train.iter().filter(|r| r.label == 1).count();
    if pos == 0 {
        return Err(Error::Data("no positive labels in pretraining data".into()));
    }
    if pos == train.len() {
        return Err(Error::Data("no negative labels in pretraining data".into()));
    }
    let weight = (train.len() - pos) as f64 / pos as f64;
    let valid_labels: Vec<u8> = valid.iter().map(|r| r.label).collect();
    let (mut store, head) = pretrain_store(model)?;
    let mut adam = Adam::new(&store, cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1, 0));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut log = Vec::new();
    for epoch in 1..=cfg.pretrain_epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.pretrain_batch) {
            let chunks: Vec<&[usize]> = batch.chunks(PRETRAIN_CHUNK).collect();
            let scale = 1.0 / batch.len() as f64;
            let results: Vec<Result<(f64, Gradients)>> = exec.map(&chunks, |c| {
                let refs: Vec<&TraderRecord> = c.iter().map(|&i| &train[i]).collect();
                let labels: Vec<u8> = refs.iter().map(|r| r.label).collect();
                let mut tape = Tape::new(&store);
                let s = pretrain_logits(&mut tape, model, &head, &refs)?;
                let l = weighted_bce_tape(&mut tape, s, &labels, weight)?;
                let l = tape.scale(l, scale);
                Ok((tape.value(l).item(), tape.backward(l)?))
            });
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                let (l, g) = r?;
                total += l * batch.len() as f64;
                grads.push(g);
            }
            apply_step(&mut store, &mut adam, &grads, cfg.clip_norm)?;
        }
        let val_auc = if valid.is_empty() {
            f64::NAN
        } else {
            auc(&pretrain_scores(&store, model, &head, valid, exec)?, &valid_labels).unwrap_or(f64::NAN)
        };
        let entry = EpochLog {
            epoch,
            loss: total / train.len() as f64,
            val_ndcg10: f64::NAN,
            val_mrr: f64::NAN,
            val_auc,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
        // Without a usable validation AUC the latest parameters are kept.
        let better = match &best {
            None => true,
            Some((_, b, _)) => val_auc > *b || val_auc.is_nan(),
        };
        if better {
            best = Some((epoch, val_auc, store.clone()));
        } else if best.as_ref().is_some_and(|(e, _, _)| epoch - e >= cfg.pretrain_patience) {
            break;
        }
    }
    let (best_epoch, best_val_auc, best_store) = best.expect("at least one epoch");
    model.load_values(&best_store)?;
    Ok(PretrainReport {
        log,
        best_epoch,
        best_val_auc,
    })
}

/// CLS representation of each record after the self-trader layers.
pub fn cls_features(model: &Model, records: &[TraderRecord], exec: Exec) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<&[TraderRecord]> = records.chunks(PRETRAIN_CHUNK).collect();
    let out: Vec<Result<Vec<Vec<f64>>>> = exec.map(&chunks, |c| {
        let refs: Vec<&TraderRecord> = c.iter().collect();
        let mut tape = Tape::new(&model.params);
        let x = encode_self(&mut tape, &model.config, model.ids(), &refs, None)?;
        tape.check()?;
        Ok(tape.value(x).data().chunks(model.config.d_k).map(|r| r.to_vec()).collect())
    });
    Ok(out.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

/// Records of a group as seen by the loss: the `topk` most profitable
/// members when sampling is on.
fn group_records<'a>(g: &RankingGroup, split: &'a [TraderRecord], topk: Option<usize>) -> Result<Vec<&'a TraderRecord>> {
    if let Some(&bad) = g.members.iter().find(|&&i| i >= split.len()) {
        return Err(Error::Data(format!("group {} references row {bad} outside the split", g.group_id)));
    }
    let recs = g.records(split);
    match topk {
        Some(k) if recs.len() > k => {
            let profits: Vec<f64> = recs.iter().map(|r| r.next_total_pl).collect();
            let ids: Vec<u64> = recs.iter().map(|r| r.account_id).collect();
            Ok(topk_sample(&profits, &ids, k)?.into_iter().map(|i| recs[i]).collect())
        }
        _ => Ok(recs),
    }
}

fn one_group(
    model: &Model,
    records: &[&TraderRecord],
    cfg: &TrainConfig,
    dropout_seed: Option<u64>,
    with_grad: bool,
) -> Result<(f64, Option<Gradients>)> {
    let mut tape = Tape::new(&model.params);
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let drop = match (&mut rng, model.config.dropout > 0.0) {
        (Some(r), true) => Some((model.config.dropout, r)),
        _ => None,
    };
    let s = forward_scores(&mut tape, &model.config, model.ids(), records, drop)?;
    let profits: Vec<f64> = records.iter().map(|r| r.next_total_pl).collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let l = group_loss(&mut tape, cfg.loss, s, &profits, &labels, cfg.positive_weight)?;
    tape.check()?;
    let grads = if with_grad { Some(tape.backward(l)?) } else { None };
    Ok((tape.value(l).item(), grads))
}

/// Mean per-group training loss of the current model, without dropout.
pub fn train_loss(model: &Model, split: &[TraderRecord], groups: &[RankingGroup], cfg: &TrainConfig, exec: Exec) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Data("no training groups".into()));
    }
    let losses: Vec<Result<f64>> = exec.map(groups, |g| {
        let recs = group_records(g, split, cfg.topk)?;
        Ok(one_group(model, &recs, cfg, None, false)?.0)
    });
    Ok(losses.into_iter().sum::<Result<f64>>()? / groups.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_ndcg10: f64,
    /// Mean per-group loss before the first step.
    pub initial_loss: f64,
}

/// Trains every parameter on the ranking loss over train groups. After each
/// epoch the validation groups are scored; the model ends up holding the
/// parameters of the epoch with the best validation NDCG@10.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    model: &mut Model,
    train: &[TraderRecord],
    groups: &[RankingGroup],
    valid: &[TraderRecord],
    valid_groups: &[RankingGroup],
    cfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(Error::Data("no training groups".into()));
    }
    if valid_groups.is_empty() {
        return Err(Error::Data("no validation groups".into()));
    }
    let initial_loss = train_loss(model, train, groups, cfg, exec)?;
    let mut adam = Adam::new(&model.params, cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 2, 0));
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut best: Option<(usize, (f64, f64), ParamStore)> = None;
    let mut log = Vec::new();
    for epoch in 1..=cfg.finetune_epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_groups) {
            let results: Vec<Result<(f64, Option<Gradients>)>> = exec.map(batch, |&gi| {
                let recs = group_records(&groups[gi], train, cfg.topk)?;
                one_group(model, &recs, cfg, Some(mix(cfg.seed, epoch as u64, gi as u64)), true)
            });
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                let (l, g) = r?;
                total += l;
                grads.push(g.expect("gradients requested"));
            }
            apply_step(&mut model.params, &mut adam, &grads, cfg.clip_norm)?;
        }
        let vs = score_groups(model, valid, valid_groups, exec)?;
        let vm = vs.ranking_metrics(valid)?;
        let vc = vs.candidates(valid);
        let val_auc = auc(&vc.scores, &vc.labels).unwrap_or(f64::NAN);
        let entry = EpochLog {
            epoch,
            loss: total / groups.len() as f64,
            val_ndcg10: vm.ndcg10,
            val_mrr: vm.mrr,
            val_auc,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
        // A few validation positives saturate NDCG@10 early, so ties go to
        // the better pooled AUC.
        let key = (vm.ndcg10, if val_auc.is_nan() { f64::NEG_INFINITY } else { val_auc });
        if best.as_ref().is_none_or(|(_, b, _)| key > *b) {
            best = Some((epoch, key, model.params.clone()));
            if let Some(path) = &cfg.checkpoint {
                save_checkpoint(model, path)?;
            }
        }
    }
    let (best_epoch, (best_val_ndcg10, _), best_store) = best.expect("at least one epoch");
    model.load_values(&best_store)?;
    Ok(FinetuneReport {
        log,
        best_epoch,
        best_val_ndcg10,
        initial_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::groups::{allocate_groups_with, GroupMode};
    use crate::data::split::{prepare_splits, SplitSpec};
    use crate::data::synth::{generate_synthetic, SynthConfig};
    use crate::data::PreparedSplits;
    use crate::model::ModelConfig;

    fn small_config(schema: &crate::data::FeatureSchema) -> ModelConfig {
        ModelConfig {
            d_k: 8,
            n_heads: 2,
            ff_width: 16,
            n_self_layers: 1,
            n_cross_layers: 1,
            ..ModelConfig::for_schema(schema)
        }
    }

    fn data(n: usize, seed: u64) -> PreparedSplits {
        let s = generate_synthetic(&SynthConfig {
            n_traders: n,
            seed,
            ..Default::default()
        })
        .unwrap();
        prepare_splits(&s.dataset, &SplitSpec { seed, ..Default::default() }).unwrap()
    }

    fn quick(loss: LossKind) -> TrainConfig {
        TrainConfig {
            pretrain_epochs: 3,
            finetune_epochs: 2,
            learning_rate: 3e-3,
            batch_groups: 8,
            loss,
            topk: Some(10),
            ..Default::default()
        }
    }

    fn groups(p: &PreparedSplits) -> (Vec<RankingGroup>, Vec<RankingGroup>) {
        let tr = allocate_groups_with(&p.train.records, 20, GroupMode::Train, 0, Exec::default()).unwrap();
        let va = allocate_groups_with(&p.valid.records, 100, GroupMode::TestExhaustive, 0, Exec::default()).unwrap();
        (tr, va)
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { finetune_epochs: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { topk: Some(1), ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn first_epoch_lowers_loss() {
        let p = data(600, 1);
        let (tr, va) = groups(&p);
        let mut m = Model::new(small_config(&p.train.schema), 0).unwrap();
        let cfg = TrainConfig { finetune_epochs: 1, ..quick(LossKind::PaBce) };
        let r = finetune(&mut m, &p.train.records, &tr, &p.valid.records, &va, &cfg, Exec::default(), |_| {}).unwrap();
        // Undo best-checkpoint selection: one epoch, so the model is the trained one.
        let after = train_loss(&m, &p.train.records, &tr, &cfg, Exec::default()).unwrap();
        assert!(after < r.initial_loss, "{after} vs {}", r.initial_loss);
    }

    #[test]
    fn tied_profits_leave_parameters_unchanged() {
        let mut p = data(400, 2);
        for r in &mut p.train.records {
            r.next_total_pl = 5.0;
        }
        let (tr, va) = groups(&p);
        let mut m = Model::new(small_config(&p.train.schema), 0).unwrap();
        let before = m.params.clone();
        let cfg = quick(LossKind::PaBce);
        let recs = group_records(&tr[0], &p.train.records, cfg.topk).unwrap();
        let (l, g) = one_group(&m, &recs, &cfg, None, true).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.unwrap().0.iter().flatten().all(|t| t.data().iter().all(|&v| v == 0.0)));
        finetune(&mut m, &p.train.records, &tr, &p.valid.records, &va, &cfg, Exec::default(), |_| {}).unwrap();
        assert_eq!(m.params, before);
    }

    #[test]
    fn training_is_deterministic() {
        let p = data(400, 3);
        let (tr, va) = groups(&p);
        let run = |exec| {
            let mut m = Model::new(small_config(&p.train.schema), 5).unwrap();
            let cfg = quick(LossKind::PaBce);
            let pre = pretrain(&mut m, &p.train.records, &p.valid.records, &cfg, exec, |_| {}).unwrap();
            let fin = finetune(&mut m, &p.train.records, &tr, &p.valid.records, &va, &cfg, exec, |_| {}).unwrap();
            (pre.log, fin.log, m.params)
        };
        let (a, b) = (run(Exec::default()), run(Exec::Sequential));
        for (x, y) in a.0.iter().zip(&b.0).chain(a.1.iter().zip(&b.1)) {
            assert!((x.loss - y.loss).abs() <= 1e-12);
        }
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn best_epoch_is_kept() {
        let p = data(400, 4);
        let (tr, va) = groups(&p);
        let mut m = Model::new(small_config(&p.train.schema), 0).unwrap();
        let cfg = TrainConfig { finetune_epochs: 4, ..quick(LossKind::Bce) };
        let r = finetune(&mut m, &p.train.records, &tr, &p.valid.records, &va, &cfg, Exec::default(), |_| {}).unwrap();
        let best = r.log.iter().map(|e| e.val_ndcg10).fold(f64::MIN, f64::max);
        assert_eq!(r.best_val_ndcg10, best);
        let now = score_groups(&m, &p.valid.records, &va, Exec::default()).unwrap();
        assert_eq!(now.ranking_metrics(&p.valid.records).unwrap().ndcg10, best);
        assert!(r.log.last().unwrap().val_ndcg10 <= best);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let p = data(400, 5);
        let (_, va) = groups(&p);
        let mut m = Model::new(small_config(&p.train.schema), 0).unwrap();
        let cfg = quick(LossKind::PaBce);
        let err = finetune(&mut m, &p.train.records, &[], &p.valid.records, &va, &cfg, Exec::default(), |_| {});
        assert!(matches!(err, Err(Error::Data(_))));
        let mut neg = p.train.records.clone();
        neg.iter_mut().for_each(|r| r.label = 0);
        let err = pretrain(&mut m, &neg, &p.valid.records, &cfg, Exec::default(), |_| {});
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn pretraining_lowers_loss_and_keeps_only_model_parameters() {
        let p = data(600, 6);
        let mut m = Model::new(small_config(&p.train.schema), 0).unwrap();
        let before = m.params.clone();
        let cfg = TrainConfig { pretrain_epochs: 6, pretrain_patience: 100, ..quick(LossKind::PaBce) };
        let r = pretrain(&mut m, &p.train.records, &p.valid.records, &cfg, Exec::default(), |_| {}).unwrap();
        assert!(r.log.last().unwrap().loss < r.log[0].loss);
        assert_eq!(m.params.len(), before.len());
        for (a, b) in m.params.iter().zip(before.iter()) {
            let untouched = a.name.starts_with("cross") || a.name.starts_with("head") || a.name.starts_with("out_norm");
            assert_eq!(untouched, a.value == b.value, "{}", a.name);
        }
    }

    fn probe_auc(model: &Model, train: &[TraderRecord], test: &[TraderRecord]) -> f64 {
        use crate::eval::twostep::{LogisticConfig, LogisticModel};
        let xtr = cls_features(model, train, Exec::default()).unwrap();
        let xte = cls_features(model, test, Exec::default()).unwrap();
        let ytr: Vec<u8> = train.iter().map(|r| r.label).collect();
        let yte: Vec<u8> = test.iter().map(|r| r.label).collect();
        let probe = LogisticModel::fit(&xtr, &ytr, &LogisticConfig::default()).unwrap();
        auc(&probe.logits(&xte), &yte).unwrap()
    }

    #[test]
    fn pretrained_cls_features_separate_classes_better_than_random_init() {
        let s = generate_synthetic(&SynthConfig {
            n_traders: 2000,
            link_strength: 0.95,
            trade_noise: 0.02,
            seed: 11,
            ..Default::default()
        })
        .unwrap();
        let p = prepare_splits(&s.dataset, &SplitSpec { seed: 11, ..Default::default() }).unwrap();
        let config = ModelConfig {
            d_k: 16,
            ff_width: 32,
            ..small_config(&p.train.schema)
        };
        let fresh = Model::new(config, 3).unwrap();
        let mut trained = fresh.clone();
        let cfg = TrainConfig {
            pretrain_epochs: 30,
            pretrain_patience: 10,
            learning_rate: 1e-3,
            ..Default::default()
        };
        pretrain(&mut trained, &p.train.records, &p.valid.records, &cfg, Exec::default(), |_| {}).unwrap();
        let before = probe_auc(&fresh, &p.train.records, &p.test.records);
        let after = probe_auc(&trained, &p.train.records, &p.test.records);
        assert!(after - before >= 0.05, "random init {before}, pretrained {after}");
    }

    #[test]
    fn log_line_format() {
        let e = EpochLog {
            epoch: 3,
            loss: 0.5,
            val_ndcg10: 0.25,
            val_mrr: 0.125,
            val_auc: 0.75,
            seconds: 1.23456,
        };
        assert_eq!(e.csv_line(), "3,0.5,0.25,0.125,0.75,1.235");
        assert_eq!(EpochLog::HEADER.split(',').count(), e.csv_line().split(',').count());
    }
}
