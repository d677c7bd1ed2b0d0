//! Scaled dot-product attention, sparse query selection, multi-head wrapping
//! and the distilling operator between encoder blocks.
//!
//! Query selection is a discrete choice made on the forward values; gradients
//! flow through the attention rows of the chosen queries and through the
//! lazy-row averages, never through the choice itself.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use crate::error::{bail, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Form of the per-query sparsity measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MeasureVariant {
    /// `logsumexp(s) − mean(s)`.
    #[default]
    LseMinusMean,
    /// `logsumexp(s) − mean(exp(s))`.
    PaperLiteral,
}

impl fmt::Display for MeasureVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MeasureVariant::LseMinusMean => "lse_minus_mean",
            MeasureVariant::PaperLiteral => "paper_literal",
        })
    }
}

impl FromStr for MeasureVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lse_minus_mean" => Ok(MeasureVariant::LseMinusMean),
            "paper_literal" => Ok(MeasureVariant::PaperLiteral),
            _ => bail!(Validation, "unknown measure variant {s:?}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionKind {
    Full,
    #[default]
    ProbSparse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Sampling constant in `u = ⌈c·ln L_Q⌉`.
    pub c: f64,
    pub causal: bool,
    pub measure: MeasureVariant,
    pub kind: AttentionKind,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            c: 5.0,
            causal: false,
            measure: MeasureVariant::LseMinusMean,
            kind: AttentionKind::ProbSparse,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            bail!(Parameter, "d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads);
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            bail!(Parameter, "sampling constant c must be positive, got {}", self.c);
        }
        Ok(())
    }

    /// Per-head width.
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn kind(mut self, kind: AttentionKind) -> Self {
        self.kind = kind;
        self
    }
}

/// Number of active queries: `min(L_Q, max(1, ⌈c·ln L_Q⌉))`.
pub fn active_count(l_q: usize, c: f64) -> usize {
    if l_q == 0 {
        return 0;
    }
    let u = (c * (l_q as f64).ln()).ceil();
    (u.max(1.0) as usize).min(l_q)
}

/// Query–key dot products performed on the current thread since the last reset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DotCounts {
    /// Products spent scoring queries for selection.
    pub measure: u64,
    /// Products spent computing attention rows.
    pub attention: u64,
}

thread_local! {
    static DOTS: Cell<DotCounts> = const { Cell::new(DotCounts { measure: 0, attention: 0 }) };
}

pub fn dot_counts() -> DotCounts {
    DOTS.with(Cell::get)
}

pub fn reset_dot_counts() {
    DOTS.with(|c| c.set(DotCounts::default()));
}

fn count(measure: usize, attention: usize) {
    DOTS.with(|c| {
        let mut v = c.get();
        v.measure += measure as u64;
        v.attention += attention as u64;
        c.set(v);
    });
}

/// A query/key/value triple with `L_K == L_V` and a shared head width.
#[derive(Clone, Debug, PartialEq)]
pub struct Qkv<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> Qkv<T> {
    pub fn new(q: Tensor<T>, k: Tensor<T>, v: Tensor<T>) -> Result<Self> {
        for (name, t) in [("Q", &q), ("K", &k), ("V", &v)] {
            if t.ndim() != 2 {
                bail!(Dimension, "{name} must be a matrix, got {:?}", t.shape());
            }
        }
        if k.rows() != v.rows() {
            bail!(Dimension, "L_K = {} differs from L_V = {}", k.rows(), v.rows());
        }
        if q.cols() != k.cols() {
            bail!(Dimension, "query width {} differs from key width {}", q.cols(), k.cols());
        }
        Ok(Self { q, k, v })
    }

    pub fn full_attention(&self, causal: bool) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(self.q.clone()), g.constant(self.k.clone()), g.constant(self.v.clone()));
        let out = full_attention(&mut g, q, k, v, causal)?;
        Ok(g.value(out).clone())
    }

    pub fn probsparse_attention(&self, cfg: &AttentionConfig) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(self.q.clone()), g.constant(self.k.clone()), g.constant(self.v.clone()));
        let out = probsparse_attention(&mut g, q, k, v, cfg)?;
        Ok(g.value(out).clone())
    }
}

fn check_qkv<T: Scalar>(g: &Graph<T>, q: Var, k: Var, v: Var, causal: bool) -> Result<(usize, usize, usize)> {
    let dims = |x: Var| match g.shape(x) {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension(format!("attention operand must be a matrix, got {s:?}"))),
    };
    let ((l_q, d), (l_k, dk), (l_v, _)) = (dims(q)?, dims(k)?, dims(v)?);
    if l_k == 0 {
        bail!(Dimension, "attention needs at least one key");
    }
    if l_k != l_v {
        bail!(Dimension, "L_K = {l_k} differs from L_V = {l_v}");
    }
    if d != dk {
        bail!(Dimension, "query width {d} differs from key width {dk}");
    }
    if causal && l_q > l_k {
        bail!(Dimension, "causal attention needs L_Q ≤ L_K, got {l_q} > {l_k}");
    }
    Ok((l_q, l_k, d))
}

fn scaled_scores<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, d: usize) -> Result<Var> {
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    Ok(g.scale(s, T::lit(1.0 / (d as f64).sqrt())))
}

/// `softmax(QKᵀ/√d)·V`; under `causal`, query `i` sees keys `0..=i` only.
pub fn full_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
    let (l_q, l_k, d) = check_qkv(g, q, k, v, causal)?;
    count(0, l_q * l_k);
    let s = scaled_scores(g, q, k, d)?;
    let a = if causal { g.prefix_softmax(s, (0..l_q).collect())? } else { g.softmax(s, 1)? };
    g.matmul(a, v)
}

/// Sparsity measure of one query from its scaled scores `s_j`.
pub fn measure_from_scores<T: Scalar>(scores: &[T], variant: MeasureVariant) -> T {
    let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + scores.iter().map(|&s| (s - m).exp()).sum::<T>().ln();
    let n = T::lit(scores.len() as f64);
    match variant {
        MeasureVariant::LseMinusMean => lse - scores.iter().copied().sum::<T>() / n,
        MeasureVariant::PaperLiteral => lse - scores.iter().map(|&s| s.exp()).sum::<T>() / n,
    }
}

/// Sparsity measure of query `q_i` against every row of `k`.
pub fn sparsity_measure<T: Scalar>(q_i: &[T], k: &Tensor<T>, variant: MeasureVariant) -> Result<T> {
    if k.ndim() != 2 || k.rows() == 0 || k.cols() != q_i.len() {
        bail!(Dimension, "keys {:?} incompatible with query of width {}", k.shape(), q_i.len());
    }
    let inv = T::lit(1.0 / (q_i.len() as f64).sqrt());
    let scores: Vec<T> = (0..k.rows())
        .map(|j| k.row(j).iter().zip(q_i).map(|(&a, &b)| a * b).sum::<T>() * inv)
        .collect();
    count(k.rows(), 0);
    Ok(measure_from_scores(&scores, variant))
}

/// Measure of every query; under `causal`, query `i` is scored on keys `0..=i`.
pub fn query_measures<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, variant: MeasureVariant, causal: bool) -> Result<Vec<T>> {
    let kt = k.transpose()?;
    let s = q.matmul(&kt)?;
    count(q.rows() * k.rows(), 0);
    let inv = T::lit(1.0 / (q.cols() as f64).sqrt());
    Ok((0..q.rows())
        .map(|i| {
            let row = s.row(i);
            let row = if causal { &row[..=i.min(row.len() - 1)] } else { row };
            let scaled: Vec<T> = row.iter().map(|&x| x * inv).collect();
            measure_from_scores(&scaled, variant)
        })
        .collect())
}

/// Indices ordered by descending measure, ties to the lower index.
pub fn rank_queries<T: Scalar>(measures: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..measures.len()).collect();
    idx.sort_by(|&a, &b| measures[b].partial_cmp(&measures[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// The `u` queries with the largest measure, returned in ascending index order.
pub fn select_top_queries<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, cfg: &AttentionConfig) -> Result<Vec<usize>> {
    if q.rows() == 0 {
        bail!(Dimension, "query selection needs at least one query");
    }
    let m = query_measures(q, k, cfg.measure, false)?;
    Ok(top_u(&m, active_count(q.rows(), cfg.c)))
}

fn top_u<T: Scalar>(measures: &[T], u: usize) -> Vec<usize> {
    let mut sel = rank_queries(measures);
    sel.truncate(u);
    sel.sort_unstable();
    sel
}

/// Active queries under a causal mask: query `i` is active when fewer than
/// `u` earlier queries have a measure at least as large. The choice for `i`
/// depends on positions `0..=i` only.
pub fn select_causal_queries<T: Scalar>(measures: &[T], u: usize) -> Vec<usize> {
    (0..measures.len())
        .filter(|&i| measures[..i].iter().filter(|&&m| m >= measures[i]).count() < u)
        .collect()
}

/// Attention where only the active queries attend; lazy queries output the
/// mean of `V` (the running mean of `V[0..=i]` under a causal mask).
pub fn probsparse_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, cfg: &AttentionConfig) -> Result<Var> {
    let (l_q, l_k, d) = check_qkv(g, q, k, v, cfg.causal)?;
    let u = active_count(l_q, cfg.c);
    let measures = query_measures(g.value(q), g.value(k), cfg.measure, cfg.causal)?;
    let active = if cfg.causal { select_causal_queries(&measures, u) } else { top_u(&measures, u) };
    if active.len() == l_q {
        return full_attention(g, q, k, v, cfg.causal);
    }

    let mut avg = Tensor::zeros(&[l_q, l_k]);
    for i in 0..l_q {
        let n = if cfg.causal { i + 1 } else { l_k };
        let w = T::lit(1.0 / n as f64);
        avg.row_mut(i)[..n].iter_mut().for_each(|a| *a = w);
    }
    let avg = g.constant(avg);
    let lazy = g.matmul(avg, v)?;

    let qa = g.gather_rows(q, &active)?;
    count(0, active.len() * l_k);
    let s = scaled_scores(g, qa, k, d)?;
    let a = if cfg.causal { g.prefix_softmax(s, active.clone())? } else { g.softmax(s, 1)? };
    let rows = g.matmul(a, v)?;
    g.scatter_rows(lazy, rows, &active)
}

/// Dispatches on `cfg.kind` and `cfg.causal`.
pub fn attend<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, cfg: &AttentionConfig) -> Result<Var> {
    match cfg.kind {
        AttentionKind::Full => full_attention(g, q, k, v, cfg.causal),
        AttentionKind::ProbSparse => probsparse_attention(g, q, k, v, cfg),
    }
}

/// Multi-head attention with packed projections: head `h` owns columns
/// `h·d..(h+1)·d` of `wq`, `wk` and `wv`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

/// Intermediate values of one multi-head pass.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// Head outputs side by side, before the output projection.
    pub concat: Var,
    pub out: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: AttentionConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let dm = cfg.d_model;
        let mut lin = |name: &str| {
            let w = store.add_weight(format!("{prefix}{name}.w"), &[dm, dm], dm, rng);
            let b = store.add_zeros(format!("{prefix}{name}.b"), &[dm]);
            (w, b)
        };
        let (wq, bq) = lin("q");
        let (wk, bk) = lin("k");
        let (wv, bv) = lin("v");
        let (wo, bo) = lin("o");
        Ok(Self { cfg, wq, bq, wk, bk, wv, bv, wo, bo })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x_q: Var, x_kv: Var) -> Result<Var> {
        Ok(self.forward_heads(g, store, x_q, x_kv)?.out)
    }

    pub fn forward_heads<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_q: Var,
        x_kv: Var,
    ) -> Result<HeadOutputs> {
        let dm = self.cfg.d_model;
        for x in [x_q, x_kv] {
            if g.shape(x).len() != 2 || g.shape(x)[1] != dm {
                bail!(Contract, "multi-head input {:?} must have {dm} columns", g.shape(x));
            }
        }
        let proj = |g: &mut Graph<T>, x: Var, w: ParamId, b: ParamId| -> Result<Var> {
            let (w, b) = (g.param(store, w), g.param(store, b));
            let y = g.matmul(x, w)?;
            g.add_row(y, b)
        };
        let q = proj(g, x_q, self.wq, self.bq)?;
        let k = proj(g, x_kv, self.wk, self.bk)?;
        let v = proj(g, x_kv, self.wv, self.bv)?;
        let d = self.cfg.head_dim();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = g.slice_cols(q, h * d, d)?;
            let kh = g.slice_cols(k, h * d, d)?;
            let vh = g.slice_cols(v, h * d, d)?;
            heads.push(attend(g, qh, kh, vh, &self.cfg)?);
        }
        let concat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let out = proj(g, concat, self.wo, self.bo)?;
        Ok(HeadOutputs { concat, out })
    }
}

/// Distilling step between encoder blocks: width-3 same-padded convolution
/// over time, ELU, then max-pool (window 3, stride 2, pad 1). Halves `L`,
/// rounding up.
#[derive(Clone, Debug)]
pub struct Distill {
    /// `[d_model × d_model × 3]`.
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Distill {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d_model: usize, rng: &mut Rng) -> Self {
        Self {
            kernel: store.add_weight(format!("{prefix}conv.w"), &[d_model, d_model, 3], 3 * d_model, rng),
            bias: store.add_zeros(format!("{prefix}conv.b"), &[d_model]),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let len = g.shape(x).first().copied().unwrap_or(0);
        if g.shape(x).len() != 2 || len < 2 {
            bail!(Dimension, "distill needs at least 2 positions, got shape {:?}", g.shape(x));
        }
        let (kernel, bias) = (g.param(store, self.kernel), g.param(store, self.bias));
        let xt = g.transpose(x)?;
        let c = g.conv1d(xt, kernel, 1)?;
        let c = g.transpose(c)?;
        let c = g.add_row(c, bias)?;
        let e = g.elu(c);
        let et = g.transpose(e)?;
        let p = g.max_pool1d(et, 3, 2, 1)?;
        g.transpose(p)
    }
}
