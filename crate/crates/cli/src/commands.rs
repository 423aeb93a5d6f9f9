use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use riskrank::data::io::{read_records_csv, write_groups, write_records_csv, write_schema};
use riskrank::data::synth::SynthConfig;
use riskrank::data::{
    allocate_groups, generate_synthetic, ingest_csv, prepare_splits, Dataset, DatasetDir, FeatureSchema, GroupMode,
    IngestSchema, RankingGroup, SplitName, SplitSpec,
};
use riskrank::error::{Error, Result};
use riskrank::eval::twostep::{export_two_step, second_step_classifier, LogisticConfig, SecondStepResult};
use riskrank::eval::{evaluate, score_dataset, score_groups, GroupScores, Regime};
use riskrank::gradcheck::pa_bce_model_check;
use riskrank::loss::LossKind;
use riskrank::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use riskrank::par::Exec;
use riskrank::train::{finetune, pretrain, EpochLog, TrainConfig};
use serde_json::{json, Value};

use crate::settings::Settings;
use crate::{Command, Common};

fn verbose() -> bool {
    std::env::var("RISKRANK_VERBOSE").is_ok_and(|v| !v.is_empty() && v != "0")
}

fn settings(common: &Common) -> Result<Settings> {
    let mut s = Settings::load(common.config.as_deref())?;
    s.apply_overrides(&common.set)?;
    s.set_opt("seed", common.seed)?;
    Ok(s)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("json value serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Data(format!("{} is not a directory", path.display())))
    }
}

fn stamped(mut schema: FeatureSchema, seed: u64, hash: &str) -> FeatureSchema {
    schema.seed = Some(seed);
    schema.config_hash = Some(hash.to_string());
    schema
}

fn model_config(s: &Settings, schema: &FeatureSchema) -> Result<ModelConfig> {
    let d = ModelConfig::for_schema(schema);
    let c = ModelConfig {
        d_k: s.get("d_k", d.d_k)?,
        n_heads: s.get("n_heads", d.n_heads)?,
        ff_width: s.get("ff_width", d.ff_width)?,
        n_self_layers: s.get("n_self_layers", d.n_self_layers)?,
        n_cross_layers: s.get("n_cross_layers", d.n_cross_layers)?,
        dropout: s.get("dropout", d.dropout)?,
        ..d
    };
    c.validate()?;
    Ok(c)
}

fn train_config(s: &Settings) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let topk: usize = s.get("topk", d.topk.unwrap_or(0))?;
    let c = TrainConfig {
        pretrain_epochs: s.get("pretrain_epochs", d.pretrain_epochs)?,
        pretrain_patience: s.get("pretrain_patience", d.pretrain_patience)?,
        pretrain_batch: s.get("pretrain_batch", d.pretrain_batch)?,
        finetune_epochs: s.get("epochs", d.finetune_epochs)?,
        learning_rate: s.get("learning_rate", d.learning_rate)?,
        batch_groups: s.get("batch_groups", d.batch_groups)?,
        loss: s.get::<String>("loss", d.loss.as_str().into())?.parse::<LossKind>()?,
        topk: (topk > 0).then_some(topk),
        positive_weight: s.get("positive_weight", d.positive_weight)?,
        clip_norm: s.get("clip_norm", d.clip_norm)?,
        seed: s.seed()?,
        checkpoint: None,
    };
    c.validate()?;
    Ok(c)
}

fn split_name(s: &str) -> Result<SplitName> {
    match s {
        "train" => Ok(SplitName::Train),
        "valid" => Ok(SplitName::Valid),
        "test" => Ok(SplitName::Test),
        _ => Err(Error::Config(format!("unknown split {s:?} (expected train, valid or test)"))),
    }
}

/// Writes the epoch log as CSV, echoing lines to stderr when verbose.
struct LogSink {
    lines: Vec<String>,
}

impl LogSink {
    fn new() -> Self {
        if verbose() {
            eprintln!("{}", EpochLog::HEADER);
        }
        LogSink { lines: vec![] }
    }

    fn push(&mut self, e: &EpochLog) {
        let l = e.csv_line();
        if verbose() {
            eprintln!("{l}");
        }
        self.lines.push(l);
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", EpochLog::HEADER).map_err(|e| Error::io(path, e))?;
        for l in &self.lines {
            writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

const MODEL_JSON: &str = "model.json";
const MODEL_CKPT: &str = "model.ckpt";
const PRETRAINED_CKPT: &str = "pretrained.ckpt";

fn load_model(dir: &Path) -> Result<Model> {
    let meta = read_json(&dir.join(MODEL_JSON))?;
    let config: ModelConfig = serde_json::from_value(meta["model"].clone())
        .map_err(|e| Error::Data(format!("{}: bad model config: {e}", dir.join(MODEL_JSON).display())))?;
    let ckpt = [MODEL_CKPT, PRETRAINED_CKPT]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Data(format!("no checkpoint in {}", dir.display())))?;
    load_checkpoint(&ckpt, &config)
}

fn read_scores(path: &Path, groups: &[RankingGroup]) -> Result<GroupScores> {
    let bad = |m: String| Error::Data(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let head: Vec<String> = r.headers().map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect();
    let col = |n: &str| head.iter().position(|h| h == n).ok_or_else(|| bad(format!("missing column {n}")));
    let (gc, rc, sc) = (col("group_id")?, col("row")?, col("score")?);
    let mut map: HashMap<(usize, usize), f64> = HashMap::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let parse = |c: usize| bad(format!("row {}: cannot parse {}", i + 2, head[c]));
        let g: usize = row[gc].parse().map_err(|_| parse(gc))?;
        let k: usize = row[rc].parse().map_err(|_| parse(rc))?;
        let v: f64 = row[sc].parse().map_err(|_| parse(sc))?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{}: row {}: non-finite score", path.display(), i + 2)));
        }
        map.insert((g, k), v);
    }
    let scores = groups
        .iter()
        .map(|g| {
            g.members
                .iter()
                .map(|&m| {
                    map.get(&(g.group_id, m))
                        .copied()
                        .ok_or_else(|| bad(format!("no score for row {m} of group {}", g.group_id)))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(GroupScores {
        groups: groups.to_vec(),
        scores,
    })
}

fn write_scores(path: &Path, split: &Dataset, gs: &GroupScores) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["group_id", "row", "account_id", "period", "score"]).map_err(err)?;
    for (g, s) in gs.groups.iter().zip(&gs.scores) {
        for (&m, &v) in g.members.iter().zip(s) {
            let r = &split.records[m];
            w.write_record([
                g.group_id.to_string(),
                m.to_string(),
                r.account_id.to_string(),
                r.period.to_string(),
                format!("{v:?}"),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn step_summary(r: &SecondStepResult) -> Value {
    json!({
        "threshold": r.threshold,
        "f1": r.confusion.macro_f1,
        "pnl": r.pnl,
        "precision": r.confusion.precision,
        "sensitivity": r.confusion.sensitivity,
        "specificity": r.confusion.specificity,
        "tp": r.confusion.tp,
        "fp": r.confusion.fp,
        "tn": r.confusion.tn,
        "fn": r.confusion.fn_,
    })
}

pub fn run(cmd: Command) -> Result<()> {
    let exec = Exec::default();
    match cmd {
        Command::Synth { common, n, trades, out } => {
            let mut s = settings(&common)?;
            s.set_opt("n_traders", n)?;
            s.set_opt("trades_per_trader", trades)?;
            let d = SynthConfig::default();
            let cfg = SynthConfig {
                n_traders: s.get("n_traders", d.n_traders)?,
                trades_per_trader: s.get("trades_per_trader", d.trades_per_trader)?,
                seed: s.seed()?,
                risky_profile_rate: s.get("risky_profile_rate", d.risky_profile_rate)?,
                link_strength: s.get("link_strength", d.link_strength)?,
                edge_per_skill: s.get("edge_per_skill", d.edge_per_skill)?,
                risky_skill_bonus: s.get("risky_skill_bonus", d.risky_skill_bonus)?,
                trade_noise: s.get("trade_noise", d.trade_noise)?,
                alpha: s.get("alpha", d.alpha)?,
            };
            let data = generate_synthetic(&cfg)?;
            let hash = s.hash();
            let dir = DatasetDir::create(&out)?;
            write_schema(&dir.schema_path(), &stamped(data.dataset.schema.clone(), cfg.seed, &hash))?;
            write_records_csv(&dir.records_path(), &data.dataset)?;
            data.ledger.write_csv(&dir.ledger_path())?;
            for w in &data.warnings {
                eprintln!("warning: {w}");
            }
            write_json(
                &out.join("synth.json"),
                &json!({
                    "seed": cfg.seed,
                    "config_hash": hash,
                    "traders": cfg.n_traders,
                    "records": data.dataset.records.len(),
                    "positives": data.dataset.positives(),
                    "warnings": data.warnings,
                }),
            )?;
            println!(
                "synth: {} records, {} positive -> {}",
                data.dataset.records.len(),
                data.dataset.positives(),
                out.display()
            );
        }
        Command::Ingest {
            common,
            input,
            schema,
            out,
        } => {
            let s = settings(&common)?;
            let seed = s.seed()?;
            let ing = IngestSchema::read(&schema)?;
            let data = ingest_csv(&input, &ing)?;
            let hash = s.hash();
            let dir = DatasetDir::create(&out)?;
            write_schema(&dir.schema_path(), &stamped(data.schema.clone(), seed, &hash))?;
            write_records_csv(&dir.records_path(), &data)?;
            write_json(
                &out.join("ingest.json"),
                &json!({
                    "seed": seed,
                    "config_hash": hash,
                    "input": input.display().to_string(),
                    "records": data.records.len(),
                    "positives": data.positives(),
                }),
            )?;
            println!("ingest: {} records, {} positive -> {}", data.records.len(), data.positives(), out.display());
        }
        Command::Split { common, data } => {
            require_dir(&data)?;
            let s = settings(&common)?;
            let d = SplitSpec::default();
            let spec = SplitSpec {
                train: s.get("train_frac", d.train)?,
                valid: s.get("valid_frac", d.valid)?,
                test: s.get("test_frac", d.test)?,
                minority_ratio: s.get("minority_ratio", d.minority_ratio)?,
                seed: s.seed()?,
            };
            spec.validate()?;
            let hash = s.hash();
            let dir = DatasetDir::new(&data);
            let dataset = read_records_csv(&dir.records_path(), &dir.schema()?)?;
            let p = prepare_splits(&dataset, &spec)?;
            let schema = stamped(p.train.schema.clone(), spec.seed, &hash);
            let mut sizes = serde_json::Map::new();
            for (name, mut ds) in [(SplitName::Train, p.train), (SplitName::Valid, p.valid), (SplitName::Test, p.test)] {
                ds.schema = schema.clone();
                write_records_csv(&dir.split_path(name), &ds)?;
                sizes.insert(
                    name.as_str().into(),
                    json!({"records": ds.records.len(), "positives": ds.positives()}),
                );
            }
            write_schema(&dir.schema_path(), &schema)?;
            write_json(
                &data.join("split.json"),
                &json!({"seed": spec.seed, "config_hash": hash, "splits": sizes}),
            )?;
            println!("split: {}", Value::Object(sizes));
        }
        Command::Group {
            common,
            data,
            group_size,
            test_group_size,
            exhaustive_test_groups,
        } => {
            require_dir(&data)?;
            let mut s = settings(&common)?;
            s.set_opt("group_size", group_size)?;
            s.set_opt("test_group_size", test_group_size)?;
            if exhaustive_test_groups {
                s.set("exhaustive_test_groups", "true")?;
            }
            let seed = s.seed()?;
            let size = s.get("group_size", 50usize)?;
            let test_size = s.get("test_group_size", 100usize)?;
            let test_mode = if s.get("exhaustive_test_groups", false)? {
                GroupMode::TestExhaustive
            } else {
                GroupMode::Test
            };
            let hash = s.hash();
            let dir = DatasetDir::new(&data);
            let mut counts = serde_json::Map::new();
            for (name, mode, n) in [
                (SplitName::Train, GroupMode::Train, size),
                (SplitName::Valid, test_mode, test_size),
                (SplitName::Test, test_mode, test_size),
            ] {
                let split = dir.load_split(name)?;
                let groups = allocate_groups(&split.records, n, mode, seed)?;
                write_groups(&dir.groups_path(name), &groups)?;
                let covered: usize = groups.iter().map(|g| g.len()).sum();
                counts.insert(
                    name.as_str().into(),
                    json!({"groups": groups.len(), "records": covered, "unused": split.records.len() - covered}),
                );
            }
            write_json(
                &data.join("groups.json"),
                &json!({
                    "seed": seed,
                    "config_hash": hash,
                    "group_size": size,
                    "test_group_size": test_size,
                    "exhaustive_test_groups": test_mode == GroupMode::TestExhaustive,
                    "splits": counts,
                }),
            )?;
            println!("group: {}", Value::Object(counts));
        }
        Command::Pretrain { common, data, out } => {
            require_dir(&data)?;
            let s = settings(&common)?;
            let dir = DatasetDir::new(&data);
            let schema = dir.schema()?;
            let mc = model_config(&s, &schema)?;
            let tc = train_config(&s)?;
            let hash = s.hash();
            let train = dir.load_split(SplitName::Train)?;
            let valid = dir.load_split(SplitName::Valid)?;
            let mut model = Model::new(mc.clone(), tc.seed)?;
            let mut log = LogSink::new();
            let report = pretrain(&mut model, &train.records, &valid.records, &tc, exec, |e| log.push(e))?;
            create_dir(&out)?;
            save_checkpoint(&model, &out.join(PRETRAINED_CKPT))?;
            log.write(&out.join("pretrain_log.csv"))?;
            write_json(
                &out.join(MODEL_JSON),
                &json!({"seed": tc.seed, "config_hash": hash, "stage": "pretrain", "model": mc}),
            )?;
            write_json(
                &out.join("pretrain.json"),
                &json!({
                    "seed": tc.seed,
                    "config_hash": hash,
                    "best_epoch": report.best_epoch,
                    "best_val_auc": report.best_val_auc,
                    "epochs_run": report.log.len(),
                }),
            )?;
            println!(
                "pretrain: best epoch {} val auc {:.6} -> {}",
                report.best_epoch,
                report.best_val_auc,
                out.join(PRETRAINED_CKPT).display()
            );
        }
        Command::Train {
            common,
            data,
            out,
            init,
            loss,
            topk,
        } => {
            require_dir(&data)?;
            let mut s = settings(&common)?;
            s.set_opt("loss", loss)?;
            s.set_opt("topk", topk)?;
            let dir = DatasetDir::new(&data);
            let schema = dir.schema()?;
            let mc = model_config(&s, &schema)?;
            let mut tc = train_config(&s)?;
            let hash = s.hash();
            let train = dir.load_split(SplitName::Train)?;
            let valid = dir.load_split(SplitName::Valid)?;
            let groups = dir.load_groups(SplitName::Train)?;
            let valid_groups = dir.load_groups(SplitName::Valid)?;
            let mut model = match &init {
                Some(p) => load_checkpoint(p, &mc)?,
                None => Model::new(mc.clone(), tc.seed)?,
            };
            create_dir(&out)?;
            tc.checkpoint = Some(out.join(MODEL_CKPT));
            let mut log = LogSink::new();
            let report = finetune(
                &mut model,
                &train.records,
                &groups,
                &valid.records,
                &valid_groups,
                &tc,
                exec,
                |e| log.push(e),
            )?;
            save_checkpoint(&model, &out.join(MODEL_CKPT))?;
            log.write(&out.join("train_log.csv"))?;
            write_json(
                &out.join(MODEL_JSON),
                &json!({"seed": tc.seed, "config_hash": hash, "stage": "train", "model": mc}),
            )?;
            write_json(
                &out.join("train.json"),
                &json!({
                    "seed": tc.seed,
                    "config_hash": hash,
                    "loss": tc.loss.as_str(),
                    "topk": tc.topk,
                    "init": init.as_ref().map(|p| p.display().to_string()),
                    "initial_loss": report.initial_loss,
                    "best_epoch": report.best_epoch,
                    "best_val_ndcg10": report.best_val_ndcg10,
                }),
            )?;
            println!(
                "train: best epoch {} val ndcg@10 {:.6} -> {}",
                report.best_epoch,
                report.best_val_ndcg10,
                out.join(MODEL_CKPT).display()
            );
        }
        Command::Rank {
            common,
            data,
            model,
            split,
            out,
        } => {
            require_dir(&data)?;
            let _ = settings(&common)?;
            let name = split_name(&split)?;
            let dir = DatasetDir::new(&data);
            let m = load_model(&model)?;
            let ds = dir.load_split(name)?;
            let gs = score_groups(&m, &ds.records, &dir.load_groups(name)?, exec)?;
            write_scores(&out, &ds, &gs)?;
            println!("rank: {} groups of {} scored -> {}", gs.groups.len(), name.as_str(), out.display());
        }
        Command::Eval {
            common,
            data,
            model,
            scores,
            valid_scores,
            with_prior,
            without_prior,
            prior,
            out,
        } => {
            require_dir(&data)?;
            let mut s = settings(&common)?;
            if with_prior {
                s.set("regime", "with-prior")?;
            }
            if without_prior {
                s.set("regime", "without-prior")?;
            }
            s.set_opt("prior", prior)?;
            let regime = match s.get::<String>("regime", "with-prior".into())?.as_str() {
                "with-prior" => Regime::WithPrior,
                "without-prior" => Regime::WithoutPrior,
                other => {
                    return Err(Error::Config(format!(
                        "unknown regime {other:?} (expected with-prior or without-prior)"
                    )))
                }
            };
            let prior = s.get("prior", 0.01f64)?;
            let seed = s.seed()?;
            let hash = s.hash();
            let dir = DatasetDir::new(&data);
            let test = dir.load_split(SplitName::Test)?;
            let test_groups = dir.load_groups(SplitName::Test)?;
            let loaded = model.as_deref().map(load_model).transpose()?;
            let test_scores = match (&loaded, &scores) {
                (Some(m), _) => score_groups(m, &test.records, &test_groups, exec)?,
                (None, Some(p)) => read_scores(p, &test_groups)?,
                (None, None) => return Err(Error::Config("eval needs --model or --scores".into())),
            };
            let valid = if regime == Regime::WithoutPrior {
                let v = dir.load_split(SplitName::Valid)?;
                let vg = dir.load_groups(SplitName::Valid)?;
                let vs = match (&loaded, &valid_scores) {
                    (Some(m), _) => score_groups(m, &v.records, &vg, exec)?,
                    (None, Some(p)) => read_scores(p, &vg)?,
                    (None, None) => {
                        return Err(Error::Config(
                            "without-prior evaluation needs --model or --valid-scores".into(),
                        ))
                    }
                };
                Some((vs, v))
            } else {
                None
            };
            let mut report = evaluate(
                &test_scores,
                &test.records,
                regime,
                valid.as_ref().map(|(vs, v)| (vs, v.records.as_slice())),
                prior,
            )?;
            report.seed = Some(seed);
            report.config_hash = Some(hash);
            if let Some(out) = &out {
                create_dir(out)?;
                let json_path = out.join("report.json");
                fs::write(&json_path, report.to_json() + "\n").map_err(|e| Error::io(&json_path, e))?;
                let txt = out.join("report.txt");
                fs::write(&txt, report.to_table()).map_err(|e| Error::io(&txt, e))?;
                test_scores.write_group_csv(&test.records, &out.join("groups.csv"))?;
            }
            print!("{}", report.to_table());
        }
        Command::Twostep {
            common,
            data,
            model,
            out,
        } => {
            require_dir(&data)?;
            let s = settings(&common)?;
            let seed = s.seed()?;
            let size = s.get("test_group_size", 100usize)?;
            let d = LogisticConfig::default();
            let lc = LogisticConfig {
                l2: s.get("l2", d.l2)?,
                iterations: s.get("lr_iterations", d.iterations)?,
                balanced: s.get("lr_balanced", d.balanced)?,
            };
            let hash = s.hash();
            let dir = DatasetDir::new(&data);
            let m = load_model(&model)?;
            let splits = [SplitName::Train, SplitName::Valid, SplitName::Test]
                .map(|n| dir.load_split(n))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let scores = splits
                .iter()
                .map(|ds| score_dataset(&m, ds, size, seed, exec))
                .collect::<Result<Vec<_>>>()?;
            let aug = export_two_step(
                [&splits[0], &splits[1], &splits[2]],
                [&scores[0], &scores[1], &scores[2]],
            )?;
            let base = second_step_classifier(&splits[0], &splits[1], &splits[2], &lc, seed)?;
            let with = second_step_classifier(&aug[0], &aug[1], &aug[2], &lc, seed)?;
            let out_dir = DatasetDir::create(&out)?;
            write_schema(&out_dir.schema_path(), &stamped(aug[0].schema.clone(), seed, &hash))?;
            for (name, ds) in [SplitName::Train, SplitName::Valid, SplitName::Test].into_iter().zip(&aug) {
                write_records_csv(&out_dir.split_path(name), ds)?;
            }
            let mut importance = with.importance.clone();
            importance.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            write_json(
                &out.join("twostep.json"),
                &json!({
                    "seed": seed,
                    "config_hash": hash,
                    "baseline": step_summary(&base),
                    "with_scores": step_summary(&with),
                    "importance_ascending": importance,
                    "coefficients": with.model.weights,
                    "bias": with.model.bias,
                }),
            )?;
            println!(
                "twostep: f1 {:.6} -> {:.6}, pnl {:.3} -> {:.3}",
                base.confusion.macro_f1, with.confusion.macro_f1, base.pnl, with.pnl
            );
        }
        Command::Gradcheck { common, trials } => {
            let mut s = settings(&common)?;
            s.set_opt("trials", trials)?;
            let seed = s.seed()?;
            let trials = s.get("trials", 1usize)?;
            if trials == 0 {
                return Err(Error::Config("trials must be at least 1".into()));
            }
            let mut worst = (0.0f64, String::new(), seed);
            for t in 0..trials as u64 {
                let r = pa_bce_model_check(seed + t, exec)?;
                if worst.1.is_empty() || r.max_relative_error > worst.0 {
                    worst = (r.max_relative_error, r.worst_param, seed + t);
                }
            }
            println!(
                "max_relative_error={:.3e} trials={trials} worst_param={} worst_seed={}",
                worst.0, worst.1, worst.2
            );
            if worst.0 >= 1e-4 {
                return Err(Error::Numeric(format!(
                    "gradient check failed: max relative error {:.3e} >= 1e-4",
                    worst.0
                )));
            }
        }
    }
    Ok(())
}

