//! Encoder-decoder forecasters with a diagonal Gaussian head: the sparse
//! attention model with distilling encoder stacks, and a full-attention
//! transformer baseline. Both emit every horizon step in one decoder pass.

use std::cell::Cell;
use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use chrono::{DateTime, Datelike};
use rand::RngCore;

use crate::attention::{AttentionConfig, AttentionKind, Distill, MeasureVariant, MultiHeadAttention};
use crate::checkpoint::Checkpoint;
use crate::error::{bail, Error, Result};
use crate::eval::ForecastEnsemble;
use crate::graph::{Graph, ParamGrads, Var};
use crate::optim::AdamW;
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::timegrad::{EpochRecord, EpochStats, Holdout, WindowStats};

/// Bounds applied to the head's log-variance.
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 20.0;

thread_local! {
    static DECODER_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Decoder forward passes run on the current thread since the last reset.
pub fn decoder_passes() -> u64 {
    DECODER_PASSES.with(Cell::get)
}

pub fn reset_decoder_passes() {
    DECODER_PASSES.with(|c| c.set(0));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqKind {
    Informer,
    Vanilla,
}

impl fmt::Display for SeqKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeqKind::Informer => "informer",
            SeqKind::Vanilla => "vanilla",
        })
    }
}

impl FromStr for SeqKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "informer" => Ok(SeqKind::Informer),
            "vanilla" => Ok(SeqKind::Vanilla),
            _ => bail!(Validation, "unknown sequence model {s:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqConfig {
    pub kind: SeqKind,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Sampling constant of the sparse attention.
    pub c: f64,
    pub measure: MeasureVariant,
    pub ctx_len: usize,
    pub token_len: usize,
    pub pred_len: usize,
    pub windows_per_epoch: usize,
    pub batch_size: usize,
}

impl SeqConfig {
    pub fn informer() -> Self {
        Self {
            kind: SeqKind::Informer,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            dropout: 0.1,
            c: 5.0,
            measure: MeasureVariant::LseMinusMean,
            ctx_len: 96,
            token_len: 48,
            pred_len: 45,
            windows_per_epoch: 400,
            batch_size: 1,
        }
    }

    pub fn vanilla() -> Self {
        Self { kind: SeqKind::Vanilla, dropout: 0.2, windows_per_epoch: 64, ..Self::informer() }
    }

    pub fn for_kind(kind: SeqKind) -> Self {
        match kind {
            SeqKind::Informer => Self::informer(),
            SeqKind::Vanilla => Self::vanilla(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention(false).validate()?;
        if self.d_ff == 0 {
            bail!(Parameter, "feed-forward width must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Parameter, "dropout {} outside [0, 1)", self.dropout);
        }
        if self.ctx_len < 2 || self.pred_len == 0 || self.token_len == 0 {
            bail!(Parameter, "context needs at least 2 rows; token and target lengths must be positive");
        }
        if self.token_len > self.ctx_len {
            bail!(Parameter, "start token of {} rows exceeds the {}-row context", self.token_len, self.ctx_len);
        }
        if self.batch_size == 0 {
            bail!(Parameter, "batch size must be at least 1");
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.ctx_len + self.pred_len
    }

    fn attention(&self, causal: bool) -> AttentionConfig {
        let kind = match self.kind {
            SeqKind::Informer => AttentionKind::ProbSparse,
            SeqKind::Vanilla => AttentionKind::Full,
        };
        AttentionConfig { d_model: self.d_model, n_heads: self.n_heads, c: self.c, causal, measure: self.measure, kind }
    }
}

/// Affine map `x·W + b` with `W [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            w: store.add_weight(format!("{name}.w"), &[input, output], input, rng),
            b: store.add_zeros(format!("{name}.b"), &[output]),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self { gain: store.add_ones(format!("{name}.g"), &[width]), bias: store.add_zeros(format!("{name}.b"), &[width]) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(store, self.gain), g.param(store, self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Forward-pass switches shared by every layer.
pub struct Pass<'a> {
    pub training: bool,
    pub dropout: f64,
    pub rng: &'a mut Rng,
}

impl Pass<'_> {
    fn drop<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.dropout(x, self.dropout, self.training, self.rng)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_model: usize, d_ff: usize, rng: &mut Rng) -> Self {
        Self { up: Linear::new(store, &format!("{name}.up"), d_model, d_ff, rng), down: Linear::new(store, &format!("{name}.down"), d_ff, d_model, rng) }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, pass: &mut Pass) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.elu(h);
        let h = pass.drop(g, h)?;
        self.down.forward(g, store, h)
    }
}

/// Post-norm residual block: self-attention then feed-forward.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    ff: FeedForward,
    ln1: LayerNorm,
    ln2: LayerNorm,
}

impl EncoderLayer {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &SeqConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn."), cfg.attention(false), rng)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg.d_model, cfg.d_ff, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.d_model),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.d_model),
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, pass: &mut Pass) -> Result<Var> {
        let a = self.attn.forward(g, store, x, x)?;
        let a = pass.drop(g, a)?;
        let x = g.add(x, a)?;
        let x = self.ln1.forward(g, store, x)?;
        let f = self.ff.forward(g, store, x, pass)?;
        let f = pass.drop(g, f)?;
        let x = g.add(x, f)?;
        self.ln2.forward(g, store, x)
    }
}

/// Attention blocks separated by distilling steps, fed the last `input_len`
/// embedded positions.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub input_len: usize,
    layers: Vec<EncoderLayer>,
    distills: Vec<Distill>,
    norm: LayerNorm,
}

impl EncoderStack {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &SeqConfig,
        blocks: usize,
        distill: bool,
        input_len: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let layers = (0..blocks).map(|i| EncoderLayer::new(store, &format!("{name}.l{i}"), cfg, rng)).collect::<Result<_>>()?;
        let n_distill = if distill { blocks - 1 } else { 0 };
        let distills = (0..n_distill).map(|i| Distill::new(store, &format!("{name}.d{i}."), cfg.d_model, rng)).collect();
        Ok(Self { input_len, layers, distills, norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.d_model) })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, pass: &mut Pass) -> Result<Var> {
        let len = g.shape(x)[0];
        let mut h = g.slice_rows(x, len - self.input_len, self.input_len)?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h, pass)?;
            if let Some(d) = self.distills.get(i) {
                h = d.forward(g, store, h)?;
            }
        }
        self.norm.forward(g, store, h)
    }

    /// Rows this stack contributes to the encoder output.
    pub fn output_len(&self) -> usize {
        self.distills.iter().fold(self.input_len, |l, _| l.div_ceil(2))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ff: FeedForward,
    ln1: LayerNorm,
    ln2: LayerNorm,
    ln3: LayerNorm,
}

impl DecoderLayer {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &SeqConfig, rng: &mut Rng) -> Result<Self> {
        let cross = cfg.attention(false).kind(AttentionKind::Full);
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self."), cfg.attention(true), rng)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross."), cross, rng)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), cfg.d_model, cfg.d_ff, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.d_model),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.d_model),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), cfg.d_model),
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, memory: Var, pass: &mut Pass) -> Result<Var> {
        let a = self.self_attn.forward(g, store, x, x)?;
        let a = pass.drop(g, a)?;
        let x = g.add(x, a)?;
        let x = self.ln1.forward(g, store, x)?;
        let c = self.cross_attn.forward(g, store, x, memory)?;
        let c = pass.drop(g, c)?;
        let x = g.add(x, c)?;
        let x = self.ln2.forward(g, store, x)?;
        let f = self.ff.forward(g, store, x, pass)?;
        let f = pass.drop(g, f)?;
        let x = g.add(x, f)?;
        self.ln3.forward(g, store, x)
    }
}

/// Value projection plus additive position and calendar encodings.
#[derive(Clone, Debug)]
pub struct Embedding {
    value: Linear,
    /// `[2 × d_model]` map of the day-of-year phase `(sin, cos)`.
    calendar: ParamId,
    d_model: usize,
}

/// Day of year (1-based) of an epoch-day timestamp.
pub fn day_of_year(day: i64) -> u32 {
    DateTime::from_timestamp(day * 86_400, 0).map_or(1, |d| d.ordinal())
}

/// Sinusoidal encoding of position `pos` over `width` channels.
pub fn positional_encoding(pos: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|j| {
            let angle = pos as f64 / 10000f64.powf((j - j % 2) as f64 / width as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

impl Embedding {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, d_model: usize, rng: &mut Rng) -> Self {
        Self {
            value: Linear::new(store, &format!("{name}.value"), dim, d_model, rng),
            calendar: store.add_weight(format!("{name}.calendar"), &[2, d_model], 2, rng),
            d_model,
        }
    }

    /// Embeds `values [L×D]` whose rows sit at window positions `first..first+L`.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, values: Var, timestamps: &[i64], first: usize) -> Result<Var> {
        let l = g.shape(values)[0];
        if timestamps.len() != l {
            bail!(Dimension, "{} timestamps for {l} rows", timestamps.len());
        }
        let mut pe = Vec::with_capacity(l * self.d_model);
        let mut cal = Vec::with_capacity(l * 2);
        for (i, &ts) in timestamps.iter().enumerate() {
            pe.extend(positional_encoding(first + i, self.d_model).into_iter().map(T::lit));
            let phase = 2.0 * PI * f64::from(day_of_year(ts) - 1) / 365.0;
            cal.push(T::lit(phase.sin()));
            cal.push(T::lit(phase.cos()));
        }
        let v = self.value.forward(g, store, values)?;
        let pe = g.constant(Tensor::new(vec![l, self.d_model], pe)?);
        let cal = g.constant(Tensor::new(vec![l, 2], cal)?);
        let cw = g.param(store, self.calendar);
        let c = g.matmul(cal, cw)?;
        let x = g.add(v, pe)?;
        g.add(x, c)
    }
}

/// Per-step diagonal Gaussian: mean and clamped log-variance.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub mean: Linear,
    pub log_var: Linear,
}

impl GaussianHead {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_model: usize, dim: usize, rng: &mut Rng) -> Self {
        Self {
            mean: Linear::new(store, &format!("{name}.mean"), d_model, dim, rng),
            log_var: Linear::new(store, &format!("{name}.log_var"), d_model, dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let mean = self.mean.forward(g, store, x)?;
        let lv = self.log_var.forward(g, store, x)?;
        Ok((mean, g.clamp(lv, T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX))))
    }
}

/// `Σ 0.5·(ln 2π + log_var + (target − mean)²·e^{−log_var})`.
pub fn gaussian_nll<T: Scalar>(g: &mut Graph<T>, mean: Var, log_var: Var, target: Var) -> Result<Var> {
    if g.shape(mean) != g.shape(log_var) || g.shape(mean) != g.shape(target) {
        bail!(Dimension, "nll shapes {:?}, {:?}, {:?} differ", g.shape(mean), g.shape(log_var), g.shape(target));
    }
    let r = g.sub(target, mean)?;
    let r2 = g.square(r)?;
    let nlv = g.neg(log_var);
    let prec = g.exp(nlv);
    let w = g.mul(r2, prec)?;
    let t = g.add(w, log_var)?;
    let t = g.add_scalar(t, T::lit((2.0 * PI).ln()));
    let s = g.sum(t);
    Ok(g.scale(s, T::lit(0.5)))
}

/// Draws `mean + exp(log_var/2)·z` paths, one RNG stream per path.
pub fn sample_paths<T: Scalar>(mean: &Tensor<T>, log_var: &Tensor<T>, n_samples: usize, rng: &mut Rng) -> Result<ForecastEnsemble<T>> {
    if n_samples == 0 {
        bail!(Parameter, "sample_paths needs at least one sample");
    }
    if mean.shape() != log_var.shape() || mean.ndim() != 2 {
        bail!(Dimension, "mean {:?} and log-variance {:?} must be equal [H×D]", mean.shape(), log_var.shape());
    }
    let sd: Vec<T> = log_var.data().iter().map(|&lv| (lv.max(T::lit(LOG_VAR_MIN)).min(T::lit(LOG_VAR_MAX)) * T::lit(0.5)).exp()).collect();
    let base = rng.next_u64();
    let mut data = Vec::with_capacity(n_samples * mean.numel());
    for s in 0..n_samples as u64 {
        let mut r = rng::stream(base, s);
        for (&m, &sd) in mean.data().iter().zip(&sd) {
            data.push(m + sd * rng::normal::<T>(&mut r));
        }
    }
    ForecastEnsemble::new(Tensor::new(vec![n_samples, mean.rows(), mean.cols()], data)?)
}

#[derive(Clone, Debug)]
pub struct SeqModel<T> {
    pub config: SeqConfig,
    pub dim: usize,
    pub store: ParamStore<T>,
    pub enc_embed: Embedding,
    pub dec_embed: Embedding,
    pub stacks: Vec<EncoderStack>,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: LayerNorm,
    pub head: GaussianHead,
}

/// Normalized inputs of one forecast window.
struct Prepared<T> {
    x_enc: Tensor<T>,
    stats: WindowStats<T>,
}

impl<T: Scalar> SeqModel<T> {
    pub fn new(config: SeqConfig, dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            bail!(Parameter, "data dimension must be positive");
        }
        let mut rng = rng::seeded(seed);
        let mut store = ParamStore::new();
        let dm = config.d_model;
        let enc_embed = Embedding::new(&mut store, "enc.embed", dim, dm, &mut rng);
        let dec_embed = Embedding::new(&mut store, "dec.embed", dim, dm, &mut rng);
        let stacks = match config.kind {
            SeqKind::Informer => vec![
                EncoderStack::new(&mut store, "enc.s0", &config, 2, true, config.ctx_len, &mut rng)?,
                EncoderStack::new(&mut store, "enc.s1", &config, 1, true, config.ctx_len.div_ceil(2), &mut rng)?,
            ],
            SeqKind::Vanilla => vec![EncoderStack::new(&mut store, "enc.s0", &config, 3, false, config.ctx_len, &mut rng)?],
        };
        let depth = match config.kind {
            SeqKind::Informer => 2,
            SeqKind::Vanilla => 3,
        };
        let decoder = (0..depth).map(|i| DecoderLayer::new(&mut store, &format!("dec.l{i}"), &config, &mut rng)).collect::<Result<_>>()?;
        let dec_norm = LayerNorm::new(&mut store, "dec.norm", dm);
        let head = GaussianHead::new(&mut store, "head", dm, dim, &mut rng);
        Ok(Self { config, dim, store, enc_embed, dec_embed, stacks, decoder, dec_norm, head })
    }

    /// Encoder output rows: the concatenated outputs of every stack.
    pub fn memory_len(&self) -> usize {
        self.stacks.iter().map(EncoderStack::output_len).sum()
    }

    /// One encoder pass and one decoder pass over a normalized context
    /// `[L_x×D]`, returning `(mean, log_var)` for the `L_y` target rows.
    /// `timestamps` covers the context followed by the targets.
    pub fn forward(&self, g: &mut Graph<T>, x_enc: &Tensor<T>, timestamps: &[i64], pass: &mut Pass) -> Result<(Var, Var)> {
        let c = &self.config;
        if x_enc.rows() != c.ctx_len || x_enc.cols() != self.dim {
            bail!(Dimension, "context {:?} is not [{}×{}]", x_enc.shape(), c.ctx_len, self.dim);
        }
        if timestamps.len() != c.ctx_len + c.pred_len {
            bail!(Dimension, "{} timestamps for {} context and {} target rows", timestamps.len(), c.ctx_len, c.pred_len);
        }
        let xe = g.constant(x_enc.clone());
        let emb = self.enc_embed.forward(g, &self.store, xe, &timestamps[..c.ctx_len], 0)?;
        let emb = pass.drop(g, emb)?;
        let outs = self.stacks.iter().map(|s| s.forward(g, &self.store, emb, pass)).collect::<Result<Vec<_>>>()?;
        let memory = if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs)? };

        let token_start = c.ctx_len - c.token_len;
        let mut dec_in = x_enc.slice_rows(token_start, c.ctx_len)?.into_data();
        dec_in.resize((c.token_len + c.pred_len) * self.dim, T::zero());
        let xd = g.constant(Tensor::new(vec![c.token_len + c.pred_len, self.dim], dec_in)?);
        let mut h = self.dec_embed.forward(g, &self.store, xd, &timestamps[token_start..], token_start)?;
        h = pass.drop(g, h)?;
        for layer in &self.decoder {
            h = layer.forward(g, &self.store, h, memory, pass)?;
        }
        let h = self.dec_norm.forward(g, &self.store, h)?;
        let h = g.slice_rows(h, c.token_len, c.pred_len)?;
        DECODER_PASSES.with(|n| n.set(n.get() + 1));
        self.head.forward(g, &self.store, h)
    }

    fn prepare(&self, raw_ctx: &Tensor<T>) -> Result<Prepared<T>> {
        let stats = WindowStats::fit(raw_ctx, false)?;
        Ok(Prepared { x_enc: stats.normalize(raw_ctx)?, stats })
    }

    /// Mean per-element NLL of the window starting at row `start`.
    pub fn window_loss(&self, g: &mut Graph<T>, series: &Tensor<T>, timestamps: &[i64], start: usize, pass: &mut Pass) -> Result<Var> {
        let c = &self.config;
        let len = c.window_len();
        if start + len > series.rows() || timestamps.len() != series.rows() {
            bail!(Dimension, "window {start}..{} outside {} rows", start + len, series.rows());
        }
        let raw = series.slice_rows(start, start + len)?;
        let p = self.prepare(&raw.slice_rows(0, c.ctx_len)?)?;
        let target = p.stats.normalize(&raw.slice_rows(c.ctx_len, len)?)?;
        let (mean, lv) = self.forward(g, &p.x_enc, &timestamps[start..start + len], pass)?;
        let tv = g.constant(target);
        let nll = gaussian_nll(g, mean, lv, tv)?;
        Ok(g.scale(nll, T::lit(1.0 / (c.pred_len * self.dim) as f64)))
    }

    /// `windows` random windows from rows `0..train_end`, one AdamW step per
    /// `batch_size` windows.
    pub fn train_epoch(
        &mut self,
        opt: &mut AdamW<T>,
        series: &Tensor<T>,
        timestamps: &[i64],
        train_end: usize,
        windows: usize,
        rng: &mut Rng,
    ) -> Result<EpochStats> {
        let len = self.config.window_len();
        if train_end > series.rows() {
            bail!(Parameter, "train boundary {train_end} beyond {} rows", series.rows());
        }
        if train_end < len {
            bail!(Parameter, "train span of {train_end} rows is shorter than the {len}-row window");
        }
        let batch = self.config.batch_size;
        let mut total = 0.0;
        let mut max_index = None;
        let mut acc = ParamGrads::new();
        let mut in_batch = 0;
        for w in 0..windows {
            let start = rng::index(rng, 0, train_end - len);
            max_index = max_index.max(Some(start + len - 1));
            let mut g = Graph::new();
            let mut pass = Pass { training: true, dropout: self.config.dropout, rng };
            let loss = self.window_loss(&mut g, series, timestamps, start, &mut pass)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                bail!(NonFinite, "loss is {value} at window {w} (rows {start}..{})", start + len);
            }
            let grads = g.backward(loss)?.into_param_grads();
            if !grads.all_finite() {
                bail!(NonFinite, "non-finite gradient at window {w} (rows {start}..{})", start + len);
            }
            acc.accumulate(grads);
            in_batch += 1;
            total += value;
            if in_batch == batch || w + 1 == windows {
                acc.scale(T::lit(1.0 / in_batch as f64));
                opt.step(&mut self.store, &acc)?;
                acc = ParamGrads::new();
                in_batch = 0;
            }
        }
        let mean_loss = if windows == 0 { 0.0 } else { total / windows as f64 };
        Ok(EpochStats { mean_loss, max_index })
    }

    /// Trains epochs `epochs` on rows `0..train_end`, holding out the tail
    /// for validation. Epoch `e` draws from `rng::stream(seed, e)`.
    pub fn fit(
        &mut self,
        opt: &mut AdamW<T>,
        series: &Tensor<T>,
        timestamps: &[i64],
        train_end: usize,
        epochs: Range<usize>,
        seed: u64,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>> {
        let hold = Holdout::new(train_end, self.config.window_len())?;
        let windows = self.config.windows_per_epoch;
        let mut history = Vec::with_capacity(epochs.len());
        for epoch in epochs {
            let mut rng = rng::stream(seed, epoch as u64);
            let stats = self.train_epoch(opt, series, timestamps, hold.val_start, windows, &mut rng).map_err(|e| e.context(format!("epoch {epoch}")))?;
            let val_loss =
                self.eval_loss(series, timestamps, hold.val_start, hold.train_end, Holdout::val_windows(windows), &mut rng)?;
            let record = EpochRecord { epoch, train_loss: stats.mean_loss, val_loss, max_index: stats.max_index };
            on_epoch(&record);
            history.push(record);
        }
        Ok(history)
    }

    /// Mean loss over `windows` random windows inside rows `lo..hi`, no dropout.
    pub fn eval_loss(&self, series: &Tensor<T>, timestamps: &[i64], lo: usize, hi: usize, windows: usize, rng: &mut Rng) -> Result<f64> {
        let len = self.config.window_len();
        if hi > series.rows() || hi < lo + len {
            bail!(Parameter, "span {lo}..{hi} cannot hold a {len}-row window");
        }
        let mut total = 0.0;
        for _ in 0..windows {
            let start = rng::index(rng, lo, hi - len);
            let mut g = Graph::new();
            let mut pass = Pass { training: false, dropout: 0.0, rng };
            let loss = self.window_loss(&mut g, series, timestamps, start, &mut pass)?;
            total += g.value(loss).data()[0].as_f64();
        }
        Ok(if windows == 0 { 0.0 } else { total / windows as f64 })
    }

    /// Gaussian parameters of the `L_y` steps after `context`, in the
    /// normalized space of the context window.
    pub fn predict(&self, context: &Tensor<T>, timestamps: &[i64]) -> Result<(Tensor<T>, Tensor<T>, WindowStats<T>)> {
        let p = self.prepare(context)?;
        let mut g = Graph::new();
        let mut dummy = rng::seeded(0);
        let mut pass = Pass { training: false, dropout: 0.0, rng: &mut dummy };
        let (mean, lv) = self.forward(&mut g, &p.x_enc, timestamps, &mut pass)?;
        Ok((g.value(mean).clone(), g.value(lv).clone(), p.stats))
    }

    /// Samples `n_samples` denormalized paths after `context`. `timestamps`
    /// covers the context followed by the `L_y` targets.
    pub fn forecast(&self, context: &Tensor<T>, timestamps: &[i64], n_samples: usize, rng: &mut Rng) -> Result<ForecastEnsemble<T>> {
        let (mean, lv, stats) = self.predict(context, timestamps)?;
        let ens = sample_paths(&mean, &lv, n_samples, rng)?;
        let ens = ens.map_dims(|d, v| v * stats.scale[d] + stats.mean[d]);
        let mut ens = ens.with_timestamps(timestamps[self.config.ctx_len..].to_vec())?;
        ens.denormalized = true;
        Ok(ens)
    }

    pub fn save(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        let c = &self.config;
        for (k, v) in [
            ("kind", (c.kind == SeqKind::Vanilla) as u8 as f64),
            ("dim", self.dim as f64),
            ("d_model", c.d_model as f64),
            ("n_heads", c.n_heads as f64),
            ("d_ff", c.d_ff as f64),
            ("dropout", c.dropout),
            ("c", c.c),
            ("measure", (c.measure == MeasureVariant::PaperLiteral) as u8 as f64),
            ("ctx_len", c.ctx_len as f64),
            ("token_len", c.token_len as f64),
            ("pred_len", c.pred_len as f64),
            ("windows_per_epoch", c.windows_per_epoch as f64),
            ("batch_size", c.batch_size as f64),
        ] {
            ckpt.put_scalar(format!("{prefix}cfg.{k}"), v)?;
        }
        ckpt.put_store(&format!("{prefix}p."), &self.store)
    }

    pub fn load(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let u = |k: &str| ckpt.usize(&format!("{prefix}cfg.{k}"));
        let f = |k: &str| ckpt.scalar(&format!("{prefix}cfg.{k}"));
        let config = SeqConfig {
            kind: if u("kind")? == 1 { SeqKind::Vanilla } else { SeqKind::Informer },
            d_model: u("d_model")?,
            n_heads: u("n_heads")?,
            d_ff: u("d_ff")?,
            dropout: f("dropout")?,
            c: f("c")?,
            measure: if u("measure")? == 1 { MeasureVariant::PaperLiteral } else { MeasureVariant::LseMinusMean },
            ctx_len: u("ctx_len")?,
            token_len: u("token_len")?,
            pred_len: u("pred_len")?,
            windows_per_epoch: u("windows_per_epoch")?,
            batch_size: u("batch_size")?,
        };
        let mut model = Self::new(config, u("dim")?, 0)?;
        ckpt.load_store(&format!("{prefix}p."), &mut model.store)?;
        Ok(model)
    }
}
