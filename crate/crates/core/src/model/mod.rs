//! The ranking transformer.
//!
//! Each record becomes a token sequence `[CLS, f_1, ..., f_k]`. Self-trader
//! layers attend within each record's sequence, the CLS rows are gathered,
//! cross-trader layers attend across the members of a group, and a final
//! layer norm plus linear head produce one score per member.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::record::{FeatureSchema, TraderRecord};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, load_params, save_checkpoint, save_params, CHECKPOINT_VERSION};

/// Total layer count of the reference architecture.
pub const REFERENCE_DEPTH: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_k: usize,
    pub n_heads: usize,
    pub ff_width: usize,
    pub n_self_layers: usize,
    pub n_cross_layers: usize,
    pub n_continuous: usize,
    pub vocab_sizes: Vec<usize>,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn for_schema(schema: &FeatureSchema) -> Self {
        ModelConfig {
            d_k: 64,
            n_heads: 2,
            ff_width: 128,
            n_self_layers: 2,
            n_cross_layers: 4,
            n_continuous: schema.n_continuous(),
            vocab_sizes: schema.vocab_sizes(),
            dropout: 0.0,
        }
    }

    /// Tokens per record, CLS included.
    pub fn tokens_per_record(&self) -> usize {
        1 + self.n_continuous + self.vocab_sizes.len()
    }

    /// Structural checks. Depth other than [`REFERENCE_DEPTH`] is allowed
    /// here (small models are used for gradient checks); see
    /// [`ModelConfig::validate_reference_depth`].
    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 || self.n_heads == 0 || !self.d_k.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_k {} must be a positive multiple of n_heads {}",
                self.d_k, self.n_heads
            )));
        }
        if self.ff_width == 0 {
            return Err(Error::Config("feedforward width must be positive".into()));
        }
        if self.n_continuous + self.vocab_sizes.len() == 0 {
            return Err(Error::Config("model needs at least one feature".into()));
        }
        if let Some(j) = self.vocab_sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!("categorical feature {j} has empty vocabulary")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn validate_reference_depth(&self) -> Result<()> {
        self.validate()?;
        if self.n_self_layers + self.n_cross_layers != REFERENCE_DEPTH {
            return Err(Error::Config(format!(
                "self + cross layers must total {REFERENCE_DEPTH}, got {} + {}",
                self.n_self_layers, self.n_cross_layers
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_k;
        let embed = d + 2 * self.n_continuous.max(1) * d + self.vocab_sizes.iter().map(|s| s * d + d).sum::<usize>();
        let block = 4 * (d * d + d) + 4 * d + (d * self.ff_width + self.ff_width) + (self.ff_width * d + d);
        embed + (self.n_self_layers + self.n_cross_layers) * block + 2 * d + d + 1
    }
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

/// Parameter handles of a model inside some store, looked up by name so the
/// same forward code runs on stores that carry extra parameters.
#[derive(Debug, Clone)]
pub struct ModelIds {
    cls: ParamId,
    num_w: ParamId,
    num_b: ParamId,
    cat: Vec<(ParamId, ParamId)>,
    self_blocks: Vec<BlockIds>,
    cross_blocks: Vec<BlockIds>,
    out_norm: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
}

impl ModelIds {
    pub fn resolve(store: &ParamStore, config: &ModelConfig) -> Result<Self> {
        let pair = |a: &str, b: &str| -> Result<(ParamId, ParamId)> { Ok((lookup(store, a)?, lookup(store, b)?)) };
        let block = |p: &str| -> Result<BlockIds> {
            let w = |n: &str| pair(&format!("{p}.{n}.w"), &format!("{p}.{n}.b"));
            Ok(BlockIds {
                ln1: w("ln1")?,
                q: w("q")?,
                k: w("k")?,
                v: w("v")?,
                o: w("o")?,
                ln2: w("ln2")?,
                ff1: w("ff1")?,
                ff2: w("ff2")?,
            })
        };
        Ok(ModelIds {
            cls: lookup(store, "embed.cls")?,
            num_w: lookup(store, "embed.num.w")?,
            num_b: lookup(store, "embed.num.b")?,
            cat: (0..config.vocab_sizes.len())
                .map(|j| pair(&format!("embed.cat{j}.w"), &format!("embed.cat{j}.b")))
                .collect::<Result<_>>()?,
            self_blocks: (0..config.n_self_layers)
                .map(|l| block(&format!("self{l}")))
                .collect::<Result<_>>()?,
            cross_blocks: (0..config.n_cross_layers)
                .map(|l| block(&format!("cross{l}")))
                .collect::<Result<_>>()?,
            out_norm: pair("out_norm.w", "out_norm.b")?,
            head: pair("head.w", "head.b")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Zero,
    One,
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform(usize),
    Cls,
}

/// Parameter names, shapes and initialisers in registration order.
fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_k;
    let ff = config.ff_width;
    let nc = config.n_continuous.max(1);
    let mut out = vec![
        ("embed.cls".to_string(), vec![1, d], Init::Cls),
        ("embed.num.w".to_string(), vec![nc, d], Init::Uniform(1)),
        ("embed.num.b".to_string(), vec![nc, d], Init::Zero),
    ];
    for (j, &s) in config.vocab_sizes.iter().enumerate() {
        out.push((format!("embed.cat{j}.w"), vec![s, d], Init::Uniform(s)));
        out.push((format!("embed.cat{j}.b"), vec![1, d], Init::Zero));
    }
    let blocks = (0..config.n_self_layers)
        .map(|l| format!("self{l}"))
        .chain((0..config.n_cross_layers).map(|l| format!("cross{l}")));
    for p in blocks {
        out.push((format!("{p}.ln1.w"), vec![1, d], Init::One));
        out.push((format!("{p}.ln1.b"), vec![1, d], Init::Zero));
        for m in ["q", "k", "v", "o"] {
            out.push((format!("{p}.{m}.w"), vec![d, d], Init::Uniform(d)));
            out.push((format!("{p}.{m}.b"), vec![1, d], Init::Zero));
        }
        out.push((format!("{p}.ln2.w"), vec![1, d], Init::One));
        out.push((format!("{p}.ln2.b"), vec![1, d], Init::Zero));
        out.push((format!("{p}.ff1.w"), vec![d, ff], Init::Uniform(d)));
        out.push((format!("{p}.ff1.b"), vec![1, ff], Init::Zero));
        out.push((format!("{p}.ff2.w"), vec![ff, d], Init::Uniform(ff)));
        out.push((format!("{p}.ff2.b"), vec![1, d], Init::Zero));
    }
    out.push(("out_norm.w".to_string(), vec![1, d], Init::One));
    out.push(("out_norm.b".to_string(), vec![1, d], Init::Zero));
    out.push(("head.w".to_string(), vec![d, 1], Init::Uniform(d)));
    out.push(("head.b".to_string(), vec![1, 1], Init::Zero));
    out
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: ModelIds,
}

impl Model {
    /// Fresh model with the standard initialisation drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, |shape, init| {
            let n: usize = shape.iter().product();
            match init {
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
                Init::Uniform(fan_in) => {
                    let a = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..=a)).collect()
                }
                Init::Cls => {
                    let normal = Normal::new(0.0, 0.02).expect("valid normal");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
            }
        })
    }

    /// Every parameter set to `value`.
    pub fn constant(config: ModelConfig, value: f64) -> Result<Self> {
        Self::build(config, |shape, _| vec![value; shape.iter().product()])
    }

    fn build(config: ModelConfig, mut fill: impl FnMut(&[usize], Init) -> Vec<f64>) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, init) in layout(&config) {
            let data = fill(&shape, init);
            params.add(name, Tensor::from_parts(shape, data))?;
        }
        let ids = ModelIds::resolve(&params, &config)?;
        Ok(Model { config, params, ids })
    }

    pub fn ids(&self) -> &ModelIds {
        &self.ids
    }

    /// Replaces the parameters with values from `other`, which must cover
    /// every parameter with the same shape.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for p in self.params.iter_mut() {
            let id = other
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            let q = other.get(id);
            if q.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: expected {:?}, found {:?}",
                    p.name,
                    p.value.shape(),
                    q.value.shape()
                )));
            }
            p.value = q.value.clone();
        }
        Ok(())
    }

    /// Scores for one group in inference mode.
    pub fn score_group(&self, records: &[&TraderRecord]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let s = forward_scores(&mut tape, &self.config, &self.ids, records, None)?;
        tape.check()?;
        Ok(tape.value(s).data().to_vec())
    }

    /// Token matrix of one record, `(k+1) × d_k`.
    pub fn embed_features(&self, record: &TraderRecord) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let t = embed(&mut tape, &self.config, &self.ids, &[record])?;
        Ok(tape.value(t).clone())
    }

    /// CLS output of the self-trader layers for one record's tokens.
    pub fn self_trader_encode(&self, tokens: &Tensor) -> Result<Vec<f64>> {
        let per = self.config.tokens_per_record();
        if tokens.shape() != [per, self.config.d_k] {
            return Err(Error::Shape(format!(
                "expected tokens {per}x{}, got {:?}",
                self.config.d_k,
                tokens.shape()
            )));
        }
        let mut tape = Tape::new(&self.params);
        let mut x = tape.input(tokens.clone());
        for b in &self.ids.self_blocks {
            x = block(&mut tape, b, x, per, self.config.n_heads, None);
        }
        tape.check()?;
        Ok(tape.value(x).row(0).to_vec())
    }

    /// Cross-trader layers over `n` CLS vectors (`n × d_k`).
    pub fn cross_trader_encode(&self, cls: &Tensor) -> Result<Tensor> {
        if cls.shape().len() != 2 || cls.cols() != self.config.d_k {
            return Err(Error::Shape(format!("expected n x {}, got {:?}", self.config.d_k, cls.shape())));
        }
        let mut tape = Tape::new(&self.params);
        let mut x = tape.input(cls.clone());
        let n = cls.rows();
        for b in &self.ids.cross_blocks {
            x = block(&mut tape, b, x, n, self.config.n_heads, None);
        }
        tape.check()?;
        Ok(tape.value(x).clone())
    }
}

/// Optional dropout: rate and RNG.
pub type DropoutRng<'a> = Option<(f64, &'a mut ChaCha8Rng)>;

fn check_record(config: &ModelConfig, r: &TraderRecord) -> Result<()> {
    if r.continuous.len() != config.n_continuous || r.categorical.len() != config.vocab_sizes.len() {
        return Err(Error::Data(format!(
            "record {:?} has {}+{} features, model expects {}+{}",
            r.key(),
            r.continuous.len(),
            r.categorical.len(),
            config.n_continuous,
            config.vocab_sizes.len()
        )));
    }
    for (j, (&v, &s)) in r.categorical.iter().zip(&config.vocab_sizes).enumerate() {
        if v as usize >= s {
            return Err(Error::Data(format!(
                "record {:?}: categorical feature {j} value {v} >= vocabulary {s}",
                r.key()
            )));
        }
    }
    Ok(())
}

/// Token rows of a batch of records, `n·(k+1) × d_k`.
pub fn embed(tape: &mut Tape, config: &ModelConfig, ids: &ModelIds, records: &[&TraderRecord]) -> Result<Var> {
    if records.is_empty() {
        return Err(Error::Data("cannot embed an empty batch".into()));
    }
    let mut cont = Vec::with_capacity(records.len() * config.n_continuous);
    let mut cat = Vec::with_capacity(records.len() * config.vocab_sizes.len());
    for r in records {
        check_record(config, r)?;
        cont.extend_from_slice(&r.continuous);
        cat.extend(r.categorical.iter().map(|&v| v as usize));
    }
    let mut inputs = vec![tape.param(ids.cls), tape.param(ids.num_w), tape.param(ids.num_b)];
    for &(w, b) in &ids.cat {
        inputs.push(tape.param(w));
        inputs.push(tape.param(b));
    }
    Ok(tape.tokenize(inputs, config.n_continuous, cont, cat))
}

fn dense(tape: &mut Tape, x: Var, (w, b): (ParamId, ParamId)) -> Var {
    let w = tape.param(w);
    let b = tape.param(b);
    tape.linear(x, w, b)
}

fn norm(tape: &mut Tape, x: Var, (g, b): (ParamId, ParamId)) -> Var {
    let g = tape.param(g);
    let b = tape.param(b);
    tape.layer_norm(x, g, b)
}

fn maybe_dropout(tape: &mut Tape, x: Var, drop: &mut DropoutRng) -> Var {
    match drop {
        Some((rate, rng)) => tape.dropout(x, *rate, *rng),
        None => x,
    }
}

/// One pre-norm block: `x + Attn(LN(x))`, then `x + FF(LN(x))`.
fn block(tape: &mut Tape, ids: &BlockIds, x: Var, size: usize, heads: usize, mut drop: DropoutRng) -> Var {
    let h = norm(tape, x, ids.ln1);
    let q = dense(tape, h, ids.q);
    let k = dense(tape, h, ids.k);
    let v = dense(tape, h, ids.v);
    let a = tape.block_attention(q, k, v, size, heads);
    let o = dense(tape, a, ids.o);
    let o = maybe_dropout(tape, o, &mut drop);
    let x = tape.add(x, o);
    let h = norm(tape, x, ids.ln2);
    let f = dense(tape, h, ids.ff1);
    let f = tape.gelu(f);
    let f = dense(tape, f, ids.ff2);
    let f = maybe_dropout(tape, f, &mut drop);
    tape.add(x, f)
}

/// CLS rows after the self-trader layers, `n × d_k`.
pub fn encode_self(
    tape: &mut Tape,
    config: &ModelConfig,
    ids: &ModelIds,
    records: &[&TraderRecord],
    mut drop: DropoutRng,
) -> Result<Var> {
    let per = config.tokens_per_record();
    let mut x = embed(tape, config, ids, records)?;
    for b in &ids.self_blocks {
        let d = drop.as_mut().map(|(r, g)| (*r, &mut **g));
        x = block(tape, b, x, per, config.n_heads, d);
    }
    Ok(tape.gather_rows(x, (0..records.len()).map(|i| i * per).collect()))
}

/// Final normalisation of a representation, shared by the head.
pub fn output_norm(tape: &mut Tape, ids: &ModelIds, x: Var) -> Var {
    norm(tape, x, ids.out_norm)
}

/// Scores (`n × 1`) for the members of one group.
pub fn forward_scores(
    tape: &mut Tape,
    config: &ModelConfig,
    ids: &ModelIds,
    records: &[&TraderRecord],
    mut drop: DropoutRng,
) -> Result<Var> {
    let d = drop.as_mut().map(|(r, g)| (*r, &mut **g));
    let mut x = encode_self(tape, config, ids, records, d)?;
    let n = records.len();
    for b in &ids.cross_blocks {
        let d = drop.as_mut().map(|(r, g)| (*r, &mut **g));
        x = block(tape, b, x, n, config.n_heads, d);
    }
    let h = output_norm(tape, ids, x);
    Ok(dense(tape, h, ids.head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softmax_rows;
    use crate::gradcheck::check_params;
    use crate::par::Exec;

    fn config(d: usize, s: usize, c: usize) -> ModelConfig {
        ModelConfig {
            d_k: d,
            n_heads: 2,
            ff_width: 6,
            n_self_layers: s,
            n_cross_layers: c,
            n_continuous: 3,
            vocab_sizes: vec![4, 2],
            dropout: 0.0,
        }
    }

    fn record(seed: u64) -> TraderRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TraderRecord {
            account_id: seed,
            period: 1,
            market: 0,
            continuous: (0..3).map(|_| rng.gen::<f64>()).collect(),
            categorical: vec![rng.gen_range(0..4), rng.gen_range(0..2)],
            next_total_pl: rng.gen_range(-10.0..10.0),
            next_profit_20: 0.0,
            future_return: 0.0,
            label: 0,
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [config(4, 1, 1), config(8, 2, 4), ModelConfig { d_k: 64, ff_width: 128, ..config(64, 2, 4) }] {
            let m = Model::new(cfg.clone(), 0).unwrap();
            assert_eq!(m.params.num_scalars(), cfg.param_count());
        }
        // d=4, ff=6, 3 continuous, vocab [4,2], one block each side:
        // embed 4 + 24 + (16+4) + (8+4) = 60; block 80+16+30+28 = 154.
        assert_eq!(config(4, 1, 1).param_count(), 60 + 2 * 154 + 8 + 5);
    }

    #[test]
    fn config_validation() {
        assert!(config(5, 1, 1).validate().is_err());
        assert!(config(4, 1, 1).validate_reference_depth().is_err());
        assert!(config(4, 2, 4).validate_reference_depth().is_ok());
        let mut c = config(4, 1, 1);
        c.vocab_sizes = vec![0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn embedding_rows() {
        let m = Model::new(config(4, 1, 1), 1).unwrap();
        let mut r = record(3);
        r.continuous[1] = 0.0;
        let t = m.embed_features(&r).unwrap();
        assert_eq!(t.shape(), &[6, 4]);
        let p = |n: &str| m.params.value(m.params.id(n).unwrap()).clone();
        assert_eq!(t.row(0), p("embed.cls").data());
        assert_eq!(t.row(2), p("embed.num.b").row(1));
        let v = r.categorical[0] as usize;
        let expect: Vec<f64> = p("embed.cat0.b").data().iter().zip(p("embed.cat0.w").row(v)).map(|(a, b)| a + b).collect();
        assert_eq!(t.row(4), &expect[..]);

        let mut r2 = r.clone();
        r2.continuous[2] += 0.25;
        let t2 = m.embed_features(&r2).unwrap();
        let w = p("embed.num.w");
        for i in 0..6 {
            for c in 0..4 {
                let diff = t2.get(i, c) - t.get(i, c);
                let expect = if i == 3 { 0.25 * w.get(2, c) } else { 0.0 };
                assert!((diff - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bad_category_is_rejected() {
        let m = Model::new(config(4, 1, 1), 1).unwrap();
        let mut r = record(1);
        r.categorical[0] = 4;
        assert!(matches!(m.score_group(&[&r]), Err(Error::Data(_))));
    }

    #[test]
    fn cls_output_ignores_token_order() {
        let m = Model::new(config(8, 2, 1), 2).unwrap();
        let t = m.embed_features(&record(5)).unwrap();
        let base = m.self_trader_encode(&t).unwrap();
        let perm = [0, 4, 2, 5, 1, 3];
        let permuted = Tensor::from_fn(6, 8, |i, j| t.get(perm[i], j));
        let out = m.self_trader_encode(&permuted).unwrap();
        for (a, b) in base.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Zeroes every parameter whose name starts with `prefix`.
    fn isolate(m: &mut Model, prefix: &str) {
        for p in m.params.iter_mut() {
            if p.name.starts_with(prefix) {
                p.value.fill(0.0);
            }
        }
    }

    fn set(m: &mut Model, name: &str, t: Tensor) {
        let id = m.params.id(name).unwrap();
        *m.params.value_mut(id) = t;
    }

    fn layer_norm_rows(x: &Tensor) -> Tensor {
        let c = x.cols();
        Tensor::from_fn(x.rows(), c, |i, j| {
            let row = x.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c as f64;
            (row[j] - mu) / (var + 1e-5).sqrt()
        })
    }

    /// Single-head attention with identity projections and no feedforward,
    /// against `x + softmax(h hᵀ/√d) h` with `h = LN(x)`.
    fn reference_attention(x: &Tensor) -> Tensor {
        let d = x.cols();
        let h = layer_norm_rows(x);
        let scores = Tensor::from_fn(x.rows(), x.rows(), |i, j| {
            h.row(i).iter().zip(h.row(j)).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
        });
        let p = softmax_rows(&scores);
        Tensor::from_fn(x.rows(), d, |i, c| {
            x.get(i, c) + (0..x.rows()).map(|j| p.get(i, j) * h.get(j, c)).sum::<f64>()
        })
    }

    fn identity_block(m: &mut Model, prefix: &str, d: usize) {
        isolate(m, prefix);
        let eye = Tensor::from_fn(d, d, |i, j| (i == j) as u8 as f64);
        for w in ["q", "k", "v", "o"] {
            set(m, &format!("{prefix}.{w}.w"), eye.clone());
        }
        set(m, &format!("{prefix}.ln1.w"), Tensor::full(&[1, d], 1.0));
    }

    #[test]
    fn self_attention_matches_reference() {
        let mut cfg = config(4, 1, 1);
        cfg.n_heads = 1;
        cfg.n_continuous = 2;
        cfg.vocab_sizes = vec![];
        let mut m = Model::new(cfg, 3).unwrap();
        identity_block(&mut m, "self0", 4);
        let x = Tensor::new(vec![3, 4], vec![0.5, -1.0, 2.0, 0.1, 1.5, 0.3, -0.7, 0.9, -0.2, 0.4, 1.1, -1.3]).unwrap();
        let out = m.self_trader_encode(&x).unwrap();
        let expect = reference_attention(&x);
        for (a, b) in out.iter().zip(expect.row(0)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn cross_attention_matches_reference_and_singleton() {
        let mut cfg = config(4, 1, 1);
        cfg.n_heads = 1;
        let mut m = Model::new(cfg, 4).unwrap();
        identity_block(&mut m, "cross0", 4);
        let x = Tensor::new(vec![3, 4], vec![0.2, -0.4, 1.0, 0.6, -1.1, 0.8, 0.3, 0.0, 0.7, 0.7, -0.5, 1.9]).unwrap();
        let out = m.cross_trader_encode(&x).unwrap();
        let expect = reference_attention(&x);
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // One token: attention weight 1, so the output is x + LN(x).
        let one = Tensor::new(vec![1, 4], x.row(1).to_vec()).unwrap();
        let out = m.cross_trader_encode(&one).unwrap();
        let h = layer_norm_rows(&one);
        for c in 0..4 {
            assert!((out.get(0, c) - one.get(0, c) - h.get(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_parameters_give_zero_cls() {
        let m = Model::constant(config(4, 2, 1), 0.0).unwrap();
        let t = m.embed_features(&record(1)).unwrap();
        assert!(m.self_trader_encode(&t).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_head_gives_zero_scores() {
        let mut m = Model::new(config(4, 1, 2), 5).unwrap();
        isolate(&mut m, "head");
        let recs: Vec<TraderRecord> = (0..5).map(record).collect();
        let refs: Vec<&TraderRecord> = recs.iter().collect();
        assert!(m.score_group(&refs).unwrap().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn scores_are_permutation_equivariant() {
        let m = Model::new(config(8, 2, 2), 6).unwrap();
        let recs: Vec<TraderRecord> = (0..6).map(|i| record(i + 10)).collect();
        let refs: Vec<&TraderRecord> = recs.iter().collect();
        let base = m.score_group(&refs).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let permuted: Vec<&TraderRecord> = perm.iter().map(|&i| &recs[i]).collect();
        let out = m.score_group(&permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((out[k] - base[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_members_score_identically() {
        let m = Model::new(config(8, 1, 2), 7).unwrap();
        let a = record(1);
        let b = record(2);
        let s = m.score_group(&[&a, &b, &a]).unwrap();
        assert_eq!(s[0], s[2]);
        assert_eq!(m.score_group(&[&a, &b, &a]).unwrap(), s);
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        let m = Model::new(config(4, 1, 1), 8).unwrap();
        let recs: Vec<TraderRecord> = (0..5).map(|i| record(i + 20)).collect();
        let refs: Vec<&TraderRecord> = recs.iter().collect();
        let cfg = m.config.clone();
        let ids = m.ids().clone();
        // A fixed random projection of the scores turns them into a scalar.
        let proj = [0.3, -1.2, 0.7, 0.05, 1.1];
        let loss = |store: &ParamStore| -> Result<f64> {
            let mut tape = Tape::new(store);
            let s = forward_scores(&mut tape, &cfg, &ids, &refs, None)?;
            Ok(tape.value(s).data().iter().zip(proj).map(|(a, b)| a * b).sum())
        };
        let mut tape = Tape::new(&m.params);
        let s = forward_scores(&mut tape, &cfg, &ids, &refs, None).unwrap();
        let p = tape.input(Tensor::column(proj.to_vec()).unwrap());
        let l = tape.mul(s, p);
        let l = tape.sum(l);
        let grads = tape.backward(l).unwrap();
        let report = check_params(&m.params, &grads, loss, 1e-5, Exec::default()).unwrap();
        assert_eq!(report.entries_checked, m.params.num_scalars());
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
