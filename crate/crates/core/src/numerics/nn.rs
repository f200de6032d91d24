//! Neural building blocks over the autodiff graph.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Additive value for hidden attention positions. Large but finite so
/// 32-bit storage never produces `inf - inf`.
pub const MASK_FILL: f64 = -1e9;

/// Forward-pass context: the graph being recorded plus the parameter values.
pub struct Ctx<'a> {
    pub graph: &'a Graph,
    pub params: &'a ParamStore,
    dropout: f64,
    rng: RefCell<Option<ChaCha8Rng>>,
}

impl<'a> Ctx<'a> {
    pub fn new(graph: &'a Graph, params: &'a ParamStore) -> Self {
        Ctx {
            graph,
            params,
            dropout: 0.0,
            rng: RefCell::new(None),
        }
    }

    /// Enables inverted dropout with probability `p` driven by `seed`.
    pub fn with_dropout(mut self, p: f64, seed: u64) -> Self {
        if p > 0.0 {
            self.dropout = p;
            self.rng = RefCell::new(Some(ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    pub fn p(&self, id: ParamId) -> Var<'a> {
        self.graph.param(self.params, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'a> {
        self.graph.constant(t)
    }

    pub fn dropout(&self, x: Var<'a>) -> Result<Var<'a>> {
        let mut rng = self.rng.borrow_mut();
        let Some(rng) = rng.as_mut() else { return Ok(x) };
        let keep = 1.0 - self.dropout;
        let mask = (0..x.value().numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        x.apply_mask(mask)
    }
}

/// Parameter initializer with its own random stream.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("valid bounds");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("shape")
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }
}

/// `y = x W + b` with `W: [in_dim, out_dim]`.
pub fn linear_forward<'a>(x: Var<'a>, w: Var<'a>, b: Option<Var<'a>>) -> Result<Var<'a>> {
    let (xs, ws) = (x.shape(), w.shape());
    if ws.len() != 2 || x.cols() != ws[0] {
        return Err(Error::dim(format!(
            "linear: input shape {xs:?} does not match weight shape {ws:?}"
        )));
    }
    let y = x.matmul(w)?;
    match b {
        Some(b) => {
            if b.value().numel() != ws[1] {
                return Err(Error::dim(format!(
                    "linear: bias shape {:?} does not match weight shape {ws:?}",
                    b.shape()
                )));
            }
            y.add_row(b)
        }
        None => Ok(y),
    }
}

/// Softmax along `axis`. Only the trailing axis, or axis 0 of a matrix, is supported.
pub fn softmax<'a>(x: Var<'a>, axis: usize) -> Result<Var<'a>> {
    let shape = x.shape();
    let last = shape.len().saturating_sub(1);
    if shape.get(axis).copied().unwrap_or(if shape.is_empty() { 1 } else { 0 }) == 0 {
        return Err(Error::dim(format!("softmax over empty axis {axis} of {shape:?}")));
    }
    if axis == last || shape.is_empty() {
        x.softmax()
    } else if shape.len() == 2 && axis == 0 {
        x.transpose().softmax().map(Var::transpose)
    } else {
        Err(Error::dim(format!("softmax axis {axis} unsupported for {shape:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.xavier(in_dim, out_dim))?;
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?);
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward<'a>(&self, cx: &Ctx<'a>, x: Var<'a>) -> Result<Var<'a>> {
        linear_forward(x, cx.p(self.weight), self.bias.map(|b| cx.p(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            eps: 1e-5,
        })
    }

    pub fn forward<'a>(&self, cx: &Ctx<'a>, x: Var<'a>) -> Result<Var<'a>> {
        x.layer_norm(self.eps)
            .mul_row(cx.p(self.gamma))?
            .add_row(cx.p(self.beta))
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        count: usize,
        dim: usize,
    ) -> Result<Self> {
        let std = 1.0 / (dim as f64).sqrt();
        let table = store.add(format!("{name}.table"), init.normal(&[count, dim], std))?;
        Ok(Embedding { table, count, dim })
    }

    pub fn lookup<'a>(&self, cx: &Ctx<'a>, ids: &[usize]) -> Result<Var<'a>> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.count) {
            return Err(Error::data(format!(
                "embedding index {bad} outside table of {} rows",
                self.count
            )));
        }
        cx.p(self.table).gather_rows(ids)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, init, &format!("{name}.up"), dim, hidden)?,
            down: Linear::new(store, init, &format!("{name}.down"), hidden, dim)?,
        })
    }

    pub fn forward<'a>(&self, cx: &Ctx<'a>, x: Var<'a>) -> Result<Var<'a>> {
        let h = self.up.forward(cx, x)?.gelu();
        self.down.forward(cx, h)
    }
}

/// Boolean visibility matrix: `visible(i, j)` means query `i` may see key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    visible: Vec<bool>,
}

impl AttentionMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        AttentionMask { rows, cols, visible: vec![true; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let visible = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        AttentionMask { rows, cols, visible }
    }

    /// Lower-triangular mask for autoregressive self-attention.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    /// Every query sees exactly the keys flagged in `keys`.
    pub fn keys(rows: usize, keys: &[bool]) -> Self {
        Self::from_fn(rows, keys.len(), |_, j| keys[j])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.cols + j]
    }

    pub fn row_has_key(&self, i: usize) -> bool {
        self.visible[i * self.cols..(i + 1) * self.cols].iter().any(|&v| v)
    }

    fn additive(&self) -> Tensor {
        let data = self.visible.iter().map(|&v| if v { 0.0 } else { MASK_FILL }).collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("mask shape")
    }

    fn check(&self, lq: usize, lk: usize) -> Result<()> {
        if self.rows != lq || self.cols != lk {
            return Err(Error::dim(format!(
                "mask is {}x{} but attention is {lq}x{lk}",
                self.rows, self.cols
            )));
        }
        if let Some(i) = (0..self.rows).find(|&i| !self.row_has_key(i)) {
            return Err(Error::contract(format!("query row {i} has no visible key")));
        }
        Ok(())
    }
}

/// `softmax(q k^T / sqrt(d) + mask) v` for a single head. Returns output and weights.
pub fn scaled_dot_product_attention<'a>(
    cx: &Ctx<'a>,
    q: Var<'a>,
    k: Var<'a>,
    v: Var<'a>,
    mask: Option<&AttentionMask>,
) -> Result<(Var<'a>, Var<'a>)> {
    let (lq, lk, d) = (q.rows(), k.rows(), q.cols());
    if k.cols() != d || v.rows() != lk {
        return Err(Error::dim(format!(
            "attention: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut scores = q.matmul(k.transpose())?.scale(1.0 / (d as f64).sqrt());
    if let Some(m) = mask {
        m.check(lq, lk)?;
        scores = scores.add(cx.constant(m.additive()))?;
    }
    let weights = scores.softmax()?;
    Ok((weights.matmul(v)?, weights))
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionOutput<'a> {
    pub output: Var<'a>,
    /// Per-head `[Lq, Lk]` attention weights.
    pub weights: Vec<Var<'a>>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "{name}: model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, init, &format!("{name}.q"), dim, dim)?,
            key: Linear::new(store, init, &format!("{name}.k"), dim, dim)?,
            value: Linear::new(store, init, &format!("{name}.v"), dim, dim)?,
            output: Linear::new(store, init, &format!("{name}.o"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward<'a>(
        &self,
        cx: &Ctx<'a>,
        q: Var<'a>,
        k: Var<'a>,
        v: Var<'a>,
        mask: Option<&AttentionMask>,
    ) -> Result<Var<'a>> {
        Ok(self.forward_detailed(cx, q, k, v, mask)?.output)
    }

    pub fn forward_detailed<'a>(
        &self,
        cx: &Ctx<'a>,
        q: Var<'a>,
        k: Var<'a>,
        v: Var<'a>,
        mask: Option<&AttentionMask>,
    ) -> Result<AttentionOutput<'a>> {
        let qp = self.query.forward(cx, q)?;
        let kp = self.key.forward(cx, k)?;
        let vp = self.value.forward(cx, v)?;
        let hd = self.head_dim();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * hd, (h + 1) * hd);
            let (o, w) = scaled_dot_product_attention(
                cx,
                qp.slice_cols(s, e)?,
                kp.slice_cols(s, e)?,
                vp.slice_cols(s, e)?,
                mask,
            )?;
            outs.push(o);
            weights.push(w);
        }
        let merged = if outs.len() == 1 { outs[0] } else { Var::concat_cols(&outs)? };
        Ok(AttentionOutput {
            output: self.output.forward(cx, merged)?,
            weights,
        })
    }
}

/// `out = g * a + (1 - g) * b` with `g = sigmoid([a; b] W + bias)`.
#[derive(Clone, Debug)]
pub struct GatedFusion {
    pub proj: Linear,
}

impl GatedFusion {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        Ok(GatedFusion {
            proj: Linear::new(store, init, name, 2 * dim, dim)?,
        })
    }

    /// Returns the fused tensor and the gate values.
    pub fn fuse<'a>(&self, cx: &Ctx<'a>, a: Var<'a>, b: Var<'a>) -> Result<(Var<'a>, Var<'a>)> {
        if a.shape() != b.shape() {
            return Err(Error::dim(format!(
                "gate inputs differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let gate = self.proj.forward(cx, Var::concat_cols(&[a, b])?)?.sigmoid();
        let out = gate.mul(a)?.add(gate.one_minus().mul(b)?)?;
        Ok((out, gate))
    }
}
