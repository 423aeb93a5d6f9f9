//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Tape`] borrows a [`ParamStore`], records every operation of one
//! forward pass, and on [`Tape::backward`] returns the gradient of a scalar
//! with respect to every parameter the computation touched. Gradients are
//! returned detached; the caller decides whether to accumulate them into the
//! store, which keeps per-group passes independent and lets them run on
//! separate threads.
//!
//! Shape mismatches between operands are programming errors and panic.
//! Non-finite intermediates are data errors: in checked mode (the default)
//! the first one poisons the tape and `backward` reports it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Gelu(Var),
    Sum(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Tokenize {
        inputs: Vec<Var>,
        n_cont: usize,
        cont: Vec<f64>,
        cat: Vec<usize>,
    },
    PairwiseSoftplus {
        scores: Var,
        weights: Vec<f64>,
    },
    Mask {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node {
    // `None` for parameter leaves, whose values live in the store.
    value: Option<Tensor>,
    op: Op,
}

/// Gradients of a scalar with respect to every recorded node.
pub struct NodeGrads(Vec<Option<Tensor>>);

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    checked: bool,
    poison: Option<String>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            checked: true,
            poison: None,
        }
    }

    /// Disables the per-operation finiteness scan.
    pub fn unchecked(mut self) -> Self {
        self.checked = false;
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    /// Fails if any recorded value was non-finite (checked mode only).
    pub fn check(&self) -> Result<()> {
        match &self.poison {
            Some(msg) => Err(Error::Numeric(msg.clone())),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.checked && self.poison.is_none() && !value.is_finite() {
            self.poison = Some(format!(
                "non-finite value produced by {} (node {})",
                op_name(&op),
                self.nodes.len()
            ));
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a))
    }

    /// `x (r×c) + b (1×c)` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.cols();
        assert_eq!(tb.len(), c, "bias width mismatch");
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(t, Op::AddRowBias(x, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    /// `x · W + b` for a row-major batch `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row_bias(y, b)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(tensor::sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(tensor::softplus);
        self.push(t, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Ln(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        self.push(t, Op::Gelu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape preserves element count");
        self.push(t, Op::Reshape(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = softmax_rows(self.value(a));
        self.push(t, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), out);
        self.push(t, Op::LogSoftmaxRows(a))
    }

    /// Per-row layer normalization with learnable gain and bias (`1×c`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        assert_eq!(tg.len(), c);
        assert_eq!(tb.len(), c);
        let r = tx.rows();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention applied independently to
    /// consecutive row blocks of size `block`. Scores are scaled by
    /// `1/sqrt(d/heads)`. No masking and no positional signal.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, block: usize, heads: usize) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(tq.shape(), tk.shape());
        assert_eq!(tq.shape(), tv.shape());
        let (r, d) = (tq.rows(), tq.cols());
        assert!(block > 0 && r % block == 0, "rows {r} not divisible by block {block}");
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let nb = r / block;
        let mut probs = vec![0.0; nb * heads * block * block];
        let mut out = vec![0.0; r * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for b in 0..nb {
            let base = b * block;
            for h in 0..heads {
                let off = h * dh;
                let p = &mut probs[(b * heads + h) * block * block..][..block * block];
                for i in 0..block {
                    let qi = &qd[(base + i) * d + off..][..dh];
                    let prow = &mut p[i * block..(i + 1) * block];
                    let mut m = f64::NEG_INFINITY;
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kd[(base + j) * d + off..][..dh];
                        let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        *pj = s;
                        m = m.max(s);
                    }
                    let mut z = 0.0;
                    for pj in prow.iter_mut() {
                        *pj = (*pj - m).exp();
                        z += *pj;
                    }
                    for pj in prow.iter_mut() {
                        *pj /= z;
                    }
                    let oi = &mut out[(base + i) * d + off..][..dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vd[(base + j) * d + off..][..dh];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![r, d], out);
        self.push(
            t,
            Op::BlockAttention {
                q,
                k,
                v,
                block,
                heads,
                probs,
            },
        )
    }

    /// Selects rows `index` of `x` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            out.extend_from_slice(tx.row(i));
        }
        let t = Tensor::from_parts(vec![index.len(), c], out);
        self.push(t, Op::GatherRows { x, index })
    }

    /// Feature tokenizer for a batch of `n` records.
    ///
    /// `inputs` is `[cls (1×d), num_w (nc×d), num_b (nc×d), table_0, bias_0,
    /// table_1, bias_1, ...]`; `cont` is `n×nc` row-major and `cat` is
    /// `n×ncat` row-major category indices. Output has `n·(1+nc+ncat)` rows:
    /// for each record its CLS row followed by one row per feature.
    pub fn tokenize(&mut self, inputs: Vec<Var>, n_cont: usize, cont: Vec<f64>, cat: Vec<usize>) -> Var {
        assert!(inputs.len() >= 3 && (inputs.len() - 3).is_multiple_of(2));
        let n_cat = (inputs.len() - 3) / 2;
        let cls = self.value(inputs[0]);
        let d = cls.cols();
        let n = if n_cont > 0 {
            cont.len() / n_cont
        } else {
            cat.len() / n_cat.max(1)
        };
        assert_eq!(cont.len(), n * n_cont);
        assert_eq!(cat.len(), n * n_cat);
        let per = 1 + n_cont + n_cat;
        let mut out = vec![0.0; n * per * d];
        let nw = self.value(inputs[1]).data();
        let nb = self.value(inputs[2]).data();
        for t in 0..n {
            let base = t * per * d;
            out[base..base + d].copy_from_slice(cls.data());
            for j in 0..n_cont {
                let x = cont[t * n_cont + j];
                let row = &mut out[base + (1 + j) * d..][..d];
                for c in 0..d {
                    row[c] = nb[j * d + c] + x * nw[j * d + c];
                }
            }
            for f in 0..n_cat {
                let table = self.value(inputs[3 + 2 * f]);
                let bias = self.value(inputs[4 + 2 * f]).data();
                let v = cat[t * n_cat + f];
                assert!(v < table.rows(), "category {v} out of range for feature {f}");
                let trow = table.row(v);
                let row = &mut out[base + (1 + n_cont + f) * d..][..d];
                for c in 0..d {
                    row[c] = bias[c] + trow[c];
                }
            }
        }
        let t = Tensor::from_parts(vec![n * per, d], out);
        self.push(
            t,
            Op::Tokenize {
                inputs,
                n_cont,
                cont,
                cat,
            },
        )
    }

    /// `Σ_{i,j} w_ij · softplus(s_j − s_i)` for a score column `s` (n×1) and
    /// a constant `n×n` weight matrix.
    pub fn pairwise_softplus(&mut self, scores: Var, weights: Vec<f64>) -> Var {
        let s = self.value(scores).data();
        let n = s.len();
        assert_eq!(weights.len(), n * n);
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let w = weights[i * n + j];
                if w != 0.0 {
                    total += w * tensor::softplus(s[j] - s[i]);
                }
            }
        }
        self.push(Tensor::scalar(total), Op::PairwiseSoftplus { scores, weights })
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// the survivors by `1/(1-rate)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let tx = self.value(x);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..tx.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(t, Op::Mask { x, mask })
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward_nodes(&self, loss: Var) -> Result<NodeGrads> {
        self.check()?;
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        if self.checked {
            if let Some((i, _)) = grads
                .iter()
                .enumerate()
                .find(|(_, g)| g.as_ref().is_some_and(|g| !g.is_finite()))
            {
                return Err(Error::Numeric(format!("non-finite gradient at node {i}")));
            }
        }
        Ok(NodeGrads(grads))
    }

    /// Gradients of `loss` with respect to the parameters it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node_grads = self.backward_nodes(loss)?;
        let mut out: Vec<Option<Tensor>> = vec![None; self.params.len()];
        for (pid, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                out[pid] = node_grads.0[v.0].clone();
            }
        }
        Ok(Gradients(out))
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let val = |v: Var| self.value(v);
        match &self.nodes[idx].op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(grads, *a, zip(g, tb, |x, y| x * y));
                acc(grads, *b, zip(g, ta, |x, y| x * y));
            }
            Op::Scale(a, c) => acc(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::AddRowBias(x, b) => {
                acc(grads, *x, g.clone());
                let c = g.cols();
                let mut gb = vec![0.0; c];
                for row in gd.chunks(c) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                let shape = val(*b).shape().to_vec();
                acc(grads, *b, Tensor::from_parts(shape, gb));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut ga = vec![0.0; m * k];
                matmul_nt_acc(gd, tb.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                matmul_tn_acc(ta.data(), gd, &mut gb, m, k, n);
                acc(grads, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
                acc(grads, *b, Tensor::from_parts(tb.shape().to_vec(), gb));
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[idx].value.as_ref().unwrap();
                acc(grads, *a, zip(g, y, |x, s| x * s * (1.0 - s)));
            }
            Op::Softplus(a) => {
                acc(grads, *a, zip(g, val(*a), |x, z| x * tensor::sigmoid(z)));
            }
            Op::Exp(a) => {
                let y = self.nodes[idx].value.as_ref().unwrap();
                acc(grads, *a, zip(g, y, |x, e| x * e));
            }
            Op::Ln(a) => acc(grads, *a, zip(g, val(*a), |x, z| x / z)),
            Op::Tanh(a) => {
                let y = self.nodes[idx].value.as_ref().unwrap();
                acc(grads, *a, zip(g, y, |x, t| x * (1.0 - t * t)));
            }
            Op::Gelu(a) => acc(grads, *a, zip(g, val(*a), |x, z| x * gelu_grad(z))),
            Op::Sum(a) => {
                let shape = val(*a).shape().to_vec();
                acc(grads, *a, Tensor::full(&shape, gd[0]));
            }
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                acc(grads, *a, Tensor::from_parts(shape, gd.to_vec()));
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[idx].value.as_ref().unwrap();
                let c = y.cols();
                let mut out = vec![0.0; y.len()];
                for ((o, yr), gr) in out.chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::LogSoftmaxRows(a) => {
                let y = self.nodes[idx].value.as_ref().unwrap();
                let c = y.cols();
                let mut out = vec![0.0; y.len()];
                for ((o, yr), gr) in out.chunks_mut(c).zip(y.data().chunks(c)).zip(gd.chunks(c)) {
                    let gs: f64 = gr.iter().sum();
                    for j in 0..c {
                        o[j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                acc(grads, *a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = val(*gain).data();
                let c = g.cols();
                let r = g.rows();
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for i in 0..r {
                    let grow = &gd[i * c..(i + 1) * c];
                    let hrow = &xhat[i * c..(i + 1) * c];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        gg[j] += grow[j] * hrow[j];
                        gbias[j] += grow[j];
                        dxhat[j] = grow[j] * tg[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * hrow[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        gx[i * c + j] = inv_std[i] * (dxhat[j] - m1 - hrow[j] * m2);
                    }
                }
                acc(grads, *x, Tensor::from_parts(g.shape().to_vec(), gx));
                acc(grads, *gain, Tensor::from_parts(val(*gain).shape().to_vec(), gg));
                acc(grads, *bias, Tensor::from_parts(val(*bias).shape().to_vec(), gbias));
            }
            Op::BlockAttention {
                q,
                k,
                v,
                block,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let (r, d) = (tq.rows(), tq.cols());
                let (block, heads) = (*block, *heads);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                let mut gq = vec![0.0; r * d];
                let mut gk = vec![0.0; r * d];
                let mut gv = vec![0.0; r * d];
                let mut dp = vec![0.0; block];
                for b in 0..r / block {
                    let base = b * block;
                    for h in 0..heads {
                        let off = h * dh;
                        let p = &probs[(b * heads + h) * block * block..][..block * block];
                        for i in 0..block {
                            let gi = &gd[(base + i) * d + off..][..dh];
                            let prow = &p[i * block..(i + 1) * block];
                            let mut dot = 0.0;
                            for j in 0..block {
                                let vj = &vd[(base + j) * d + off..][..dh];
                                let s: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dp[j] = s;
                                dot += prow[j] * s;
                                let gvj = &mut gv[(base + j) * d + off..][..dh];
                                for (o, &x) in gvj.iter_mut().zip(gi) {
                                    *o += prow[j] * x;
                                }
                            }
                            let qi = &qd[(base + i) * d + off..][..dh];
                            for j in 0..block {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kd[(base + j) * d + off..][..dh];
                                let gqi = &mut gq[(base + i) * d + off..][..dh];
                                for (o, &x) in gqi.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let gkj = &mut gk[(base + j) * d + off..][..dh];
                                for (o, &x) in gkj.iter_mut().zip(qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                acc(grads, *q, Tensor::from_parts(vec![r, d], gq));
                acc(grads, *k, Tensor::from_parts(vec![r, d], gk));
                acc(grads, *v, Tensor::from_parts(vec![r, d], gv));
            }
            Op::GatherRows { x, index } => {
                let tx = val(*x);
                let c = tx.cols();
                let mut gx = vec![0.0; tx.len()];
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += gd[r * c + j];
                    }
                }
                acc(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
            }
            Op::Tokenize {
                inputs,
                n_cont,
                cont,
                cat,
            } => {
                let n_cont = *n_cont;
                let n_cat = (inputs.len() - 3) / 2;
                let d = g.cols();
                let per = 1 + n_cont + n_cat;
                let n = g.rows() / per;
                let mut gcls = vec![0.0; d];
                let mut gnw = vec![0.0; n_cont * d];
                let mut gnb = vec![0.0; n_cont * d];
                let mut gtab: Vec<Vec<f64>> = (0..n_cat)
                    .map(|f| vec![0.0; val(inputs[3 + 2 * f]).len()])
                    .collect();
                let mut gbias: Vec<Vec<f64>> = (0..n_cat).map(|_| vec![0.0; d]).collect();
                for t in 0..n {
                    let base = t * per * d;
                    for c in 0..d {
                        gcls[c] += gd[base + c];
                    }
                    for j in 0..n_cont {
                        let x = cont[t * n_cont + j];
                        let row = &gd[base + (1 + j) * d..][..d];
                        for c in 0..d {
                            gnb[j * d + c] += row[c];
                            gnw[j * d + c] += x * row[c];
                        }
                    }
                    for f in 0..n_cat {
                        let v = cat[t * n_cat + f];
                        let row = &gd[base + (1 + n_cont + f) * d..][..d];
                        for c in 0..d {
                            gbias[f][c] += row[c];
                            gtab[f][v * d + c] += row[c];
                        }
                    }
                }
                let shape_of = |v: Var| val(v).shape().to_vec();
                acc(grads, inputs[0], Tensor::from_parts(shape_of(inputs[0]), gcls));
                acc(grads, inputs[1], Tensor::from_parts(shape_of(inputs[1]), gnw));
                acc(grads, inputs[2], Tensor::from_parts(shape_of(inputs[2]), gnb));
                for (f, (gt, gb)) in gtab.into_iter().zip(gbias).enumerate() {
                    let (tv, bv) = (inputs[3 + 2 * f], inputs[4 + 2 * f]);
                    acc(grads, tv, Tensor::from_parts(shape_of(tv), gt));
                    acc(grads, bv, Tensor::from_parts(shape_of(bv), gb));
                }
            }
            Op::PairwiseSoftplus { scores, weights } => {
                let ts = val(*scores);
                let s = ts.data();
                let n = s.len();
                let mut gs = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        let w = weights[i * n + j];
                        if w != 0.0 {
                            // d/ds_j softplus(s_j - s_i) = σ(s_j - s_i)
                            let sg = w * tensor::sigmoid(s[j] - s[i]);
                            gs[j] += sg;
                            gs[i] -= sg;
                        }
                    }
                }
                gs.iter_mut().for_each(|x| *x *= gd[0]);
                acc(grads, *scores, Tensor::from_parts(ts.shape().to_vec(), gs));
            }
            Op::Mask { x, mask } => {
                let data = gd.iter().zip(mask).map(|(a, m)| a * m).collect();
                acc(grads, *x, Tensor::from_parts(g.shape().to_vec(), data));
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::AddRowBias(..) => "add_row_bias",
        Op::MatMul(..) => "matmul",
        Op::Sigmoid(..) => "sigmoid",
        Op::Softplus(..) => "softplus",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Tanh(..) => "tanh",
        Op::Gelu(..) => "gelu",
        Op::Sum(..) => "sum",
        Op::Reshape(..) => "reshape",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LogSoftmaxRows(..) => "log_softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::BlockAttention { .. } => "block_attention",
        Op::GatherRows { .. } => "gather_rows",
        Op::Tokenize { .. } => "tokenize",
        Op::PairwiseSoftplus { .. } => "pairwise_softplus",
        Op::Mask { .. } => "dropout",
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax of a 2-D tensor, max-shifted.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            z += *x;
        }
        row.iter_mut().for_each(|x| *x /= z);
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}
