//! Autoregressive diffusion forecaster: a GRU summarizes the past and a
//! conditional DDPM samples each next step.

use std::ops::Range;

use rand::RngCore;

use crate::checkpoint::Checkpoint;
use crate::diffusion::{ddpm_loss, DiffusionConfig, EpsilonNet, LossNorm, NoiseSchedule, Sampler};
use crate::error::{bail, Result};
use crate::eval::ForecastEnsemble;
use crate::graph::{Graph, Var};
use crate::optim::AdamW;
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guard added to the window scale so constant windows normalize to zero.
pub const SCALE_EPS: f64 = 1e-6;

/// Per-dimension location and scale of a context window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowStats<T> {
    pub mean: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Scalar> WindowStats<T> {
    /// Column means and `std + ε` (or `var + ε` when `by_variance`), population moments.
    pub fn fit(window: &Tensor<T>, by_variance: bool) -> Result<Self> {
        if window.ndim() != 2 {
            bail!(Dimension, "window must be [L×D], got {:?}", window.shape());
        }
        let (l, d) = (window.rows(), window.cols());
        let n = T::lit(l as f64);
        let mut mean = vec![T::zero(); d];
        for r in 0..l {
            for (m, &v) in mean.iter_mut().zip(window.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); d];
        for r in 0..l {
            for ((s, &v), &m) in var.iter_mut().zip(window.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let v = s / n;
                (if by_variance { v } else { v.sqrt() }) + T::lit(SCALE_EPS)
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn normalize(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x, |v, m, s| v * s + m)
    }

    fn apply(&self, x: &Tensor<T>, f: impl Fn(T, T, T) -> T) -> Result<Tensor<T>> {
        let d = self.mean.len();
        if x.cols() != d {
            bail!(Dimension, "values have {} columns, stats cover {d}", x.cols());
        }
        let data = x.data().iter().enumerate().map(|(i, &v)| f(v, self.mean[i % d], self.scale[i % d])).collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

/// Normalizes a `[L×D]` window by its own statistics.
pub fn normalize_window<T: Scalar>(window: &Tensor<T>, by_variance: bool) -> Result<(Tensor<T>, WindowStats<T>)> {
    let stats = WindowStats::fit(window, by_variance)?;
    Ok((stats.normalize(window)?, stats))
}

/// One GRU layer. Input weights are packed `[z | r | h̃]` along columns.
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub in_dim: usize,
    pub hidden: usize,
    wx: ParamId,
    uzr: ParamId,
    uh: ParamId,
    bias: ParamId,
}

impl GruLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, in_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            in_dim,
            hidden,
            wx: store.add_weight(format!("{prefix}wx"), &[in_dim, 3 * hidden], in_dim, rng),
            uzr: store.add_weight(format!("{prefix}uzr"), &[hidden, 2 * hidden], hidden, rng),
            uh: store.add_weight(format!("{prefix}uh"), &[hidden, hidden], hidden, rng),
            bias: store.add_zeros(format!("{prefix}b"), &[3 * hidden]),
        }
    }

    /// `x: [B×D_in]`, `h: [B×H]` → `[B×H]`.
    pub fn step<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, h: Var) -> Result<Var> {
        let rows = g.shape(x)[0];
        if g.shape(x) != [rows, self.in_dim] || g.shape(h) != [rows, self.hidden] {
            bail!(
                Contract,
                "GRU step expects [{rows}×{}] input and [{rows}×{}] state, got {:?} and {:?}",
                self.in_dim,
                self.hidden,
                g.shape(x),
                g.shape(h)
            );
        }
        let hd = self.hidden;
        let (wx, uzr, uh, b) = (g.param(store, self.wx), g.param(store, self.uzr), g.param(store, self.uh), g.param(store, self.bias));
        let xw = g.matmul(x, wx)?;
        let xw = g.add_row(xw, b)?;
        let hu = g.matmul(h, uzr)?;
        let (xz, xr, xh) = (g.slice_cols(xw, 0, hd)?, g.slice_cols(xw, hd, hd)?, g.slice_cols(xw, 2 * hd, hd)?);
        let (hz, hr) = (g.slice_cols(hu, 0, hd)?, g.slice_cols(hu, hd, hd)?);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let cand = g.matmul(rh, uh)?;
        let cand = g.add(xh, cand)?;
        let cand = g.tanh(cand);
        // h + z⊙(h̃ − h) = (1 − z)⊙h + z⊙h̃
        let delta = g.sub(cand, h)?;
        let delta = g.mul(z, delta)?;
        g.add(h, delta)
    }
}

/// Stacked GRU; layer `l > 0` consumes the hidden state of layer `l − 1`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub layers: Vec<GruLayer>,
}

impl Gru {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, in_dim: usize, hidden: usize, layers: usize, rng: &mut Rng) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || layers == 0 {
            bail!(Parameter, "GRU needs positive input width, hidden width and depth");
        }
        let layers = (0..layers)
            .map(|l| GruLayer::new(store, &format!("{prefix}l{l}."), if l == 0 { in_dim } else { hidden }, hidden, rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    /// Zero initial state for `rows` sequences, one `[rows×H]` tensor per layer.
    pub fn zero_state<T: Scalar>(&self, g: &mut Graph<T>, rows: usize) -> Vec<Var> {
        self.layers.iter().map(|l| g.constant(Tensor::zeros(&[rows, l.hidden]))).collect()
    }

    /// Advances every layer by one step; returns the new per-layer states.
    pub fn step<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, state: &[Var]) -> Result<Vec<Var>> {
        let mut input = x;
        let mut next = Vec::with_capacity(self.layers.len());
        for (layer, &h) in self.layers.iter().zip(state) {
            input = layer.step(g, store, input, h)?;
            next.push(input);
        }
        Ok(next)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeGradConfig {
    pub hidden: usize,
    pub layers: usize,
    pub ctx_len: usize,
    pub pred_len: usize,
    pub windows_per_epoch: usize,
    /// Divide by the context variance instead of the standard deviation.
    pub scale_by_variance: bool,
    pub diffusion: DiffusionConfig,
}

impl Default for TimeGradConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 1,
            ctx_len: 90,
            pred_len: 45,
            windows_per_epoch: 100,
            scale_by_variance: false,
            diffusion: DiffusionConfig::default(),
        }
    }
}

impl TimeGradConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ctx_len == 0 || self.pred_len == 0 {
            bail!(Parameter, "context and prediction lengths must be positive");
        }
        if self.hidden == 0 || self.layers == 0 {
            bail!(Parameter, "GRU needs positive hidden width and depth");
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.ctx_len + self.pred_len
    }
}

/// Per-epoch losses of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Largest row read by the training windows.
    pub max_index: Option<usize>,
}

impl EpochRecord {
    /// Validation minus training loss; grows as the model overfits.
    pub fn gap(&self) -> f64 {
        self.val_loss - self.train_loss
    }
}

/// Validation tail carved from the end of the training span. Training
/// windows stay in `0..val_start`; validation windows in `val_start..train_end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Holdout {
    pub val_start: usize,
    pub train_end: usize,
}

impl Holdout {
    /// Reserves `max(window_len, ⌊train_end/10⌋)` rows for validation.
    pub fn new(train_end: usize, window_len: usize) -> Result<Self> {
        let val_rows = window_len.max(train_end / 10);
        if train_end < val_rows + window_len {
            bail!(
                Parameter,
                "train span of {train_end} rows cannot hold a {window_len}-row window plus a {val_rows}-row validation tail"
            );
        }
        Ok(Self { val_start: train_end - val_rows, train_end })
    }

    /// Validation draws per epoch for `windows` training draws.
    pub fn val_windows(windows: usize) -> usize {
        (windows / 8).max(8)
    }
}

#[derive(Clone, Debug)]
pub struct TimeGradModel<T> {
    pub config: TimeGradConfig,
    pub dim: usize,
    pub store: ParamStore<T>,
    pub gru: Gru,
    pub eps: EpsilonNet,
    pub sched: NoiseSchedule<T>,
}

/// Outcome of one training epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    /// Largest series row read while training; always below the train boundary.
    pub max_index: Option<usize>,
}

impl<T: Scalar> TimeGradModel<T> {
    pub fn new(config: TimeGradConfig, dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            bail!(Parameter, "data dimension must be positive");
        }
        let sched = config.diffusion.schedule()?;
        let mut rng = rng::seeded(seed);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru.", dim, config.hidden, config.layers, &mut rng)?;
        let eps = EpsilonNet::new(&mut store, "eps.", dim, config.hidden, config.diffusion.hidden, &mut rng)?;
        Ok(Self { config, dim, store, gru, eps, sched })
    }

    /// Loss of one already-normalized `[L_ctx+L_pred × D]` window under
    /// teacher forcing.
    pub fn window_loss(&self, g: &mut Graph<T>, window: &Tensor<T>, rng: &mut Rng) -> Result<Var> {
        let (ctx, pred) = (self.config.ctx_len, self.config.pred_len);
        if window.rows() != ctx + pred || window.cols() != self.dim {
            bail!(Dimension, "window {:?} is not [{}×{}]", window.shape(), ctx + pred, self.dim);
        }
        let mut state = self.gru.zero_state(g, 1);
        let mut conds = Vec::with_capacity(pred);
        for t in 0..ctx + pred - 1 {
            let x = g.constant(window.slice_rows(t, t + 1)?);
            state = self.gru.step(g, &self.store, x, &state)?;
            if t + 1 >= ctx {
                conds.push(*state.last().expect("at least one layer"));
            }
        }
        let h = g.concat_rows(&conds)?;
        let x0 = window.slice_rows(ctx, ctx + pred)?;
        ddpm_loss(g, &self.store, &self.eps, &self.sched, &x0, h, rng, self.config.diffusion.loss_norm)
    }

    /// Runs `windows` teacher-forced updates on windows drawn from rows
    /// `0..train_end` of `series`.
    pub fn train_epoch(
        &mut self,
        opt: &mut AdamW<T>,
        series: &Tensor<T>,
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
        let mut total = 0.0;
        let mut max_index = None;
        for w in 0..windows {
            let start = rng::index(rng, 0, train_end - len);
            let raw = series.slice_rows(start, start + len)?;
            max_index = max_index.max(Some(start + len - 1));
            let stats = WindowStats::fit(&raw.slice_rows(0, self.config.ctx_len)?, self.config.scale_by_variance)?;
            let window = stats.normalize(&raw)?;
            let mut g = Graph::new();
            let loss = self.window_loss(&mut g, &window, rng)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                bail!(NonFinite, "loss is {value} at window {w} (rows {start}..{})", start + len);
            }
            let grads = g.backward(loss)?.into_param_grads();
            if !grads.all_finite() {
                bail!(NonFinite, "non-finite gradient at window {w} (rows {start}..{})", start + len);
            }
            opt.step(&mut self.store, &grads)?;
            total += value;
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
            let stats = self.train_epoch(opt, series, hold.val_start, windows, &mut rng).map_err(|e| e.context(format!("epoch {epoch}")))?;
            let val_loss = self.eval_loss(series, hold.val_start, hold.train_end, Holdout::val_windows(windows), &mut rng)?;
            let record = EpochRecord { epoch, train_loss: stats.mean_loss, val_loss, max_index: stats.max_index };
            on_epoch(&record);
            history.push(record);
        }
        Ok(history)
    }

    /// Mean window loss over `windows` draws without updating parameters.
    pub fn eval_loss(&self, series: &Tensor<T>, lo: usize, hi: usize, windows: usize, rng: &mut Rng) -> Result<f64> {
        let len = self.config.window_len();
        if hi > series.rows() || hi < lo + len {
            bail!(Parameter, "span {lo}..{hi} cannot hold a {len}-row window");
        }
        let mut total = 0.0;
        for _ in 0..windows {
            let start = rng::index(rng, lo, hi - len);
            let raw = series.slice_rows(start, start + len)?;
            let stats = WindowStats::fit(&raw.slice_rows(0, self.config.ctx_len)?, self.config.scale_by_variance)?;
            let mut g = Graph::new();
            let loss = self.window_loss(&mut g, &stats.normalize(&raw)?, rng)?;
            total += g.value(loss).data()[0].as_f64();
        }
        Ok(if windows == 0 { 0.0 } else { total / windows as f64 })
    }

    /// Samples `n_samples` paths of `horizon` steps after `context`, one RNG
    /// stream per path derived from `rng`.
    pub fn forecast(&self, context: &Tensor<T>, horizon: usize, n_samples: usize, rng: &mut Rng) -> Result<ForecastEnsemble<T>> {
        let base = rng.next_u64();
        let streams = (0..n_samples as u64).map(|s| rng::stream(base, s)).collect();
        self.forecast_streams(context, horizon, streams)
    }

    /// As [`TimeGradModel::forecast`], with caller-supplied per-path streams.
    pub fn forecast_streams(&self, context: &Tensor<T>, horizon: usize, mut streams: Vec<Rng>) -> Result<ForecastEnsemble<T>> {
        if horizon == 0 {
            bail!(Parameter, "forecast horizon must be at least 1");
        }
        if streams.is_empty() {
            bail!(Parameter, "forecast needs at least one sample path");
        }
        if context.rows() != self.config.ctx_len || context.cols() != self.dim {
            bail!(Dimension, "context {:?} is not [{}×{}]", context.shape(), self.config.ctx_len, self.dim);
        }
        let (ctx_norm, stats) = normalize_window(context, self.config.scale_by_variance)?;
        let mut g = Graph::new();
        let mut state = self.gru.zero_state(&mut g, 1);
        for t in 0..ctx_norm.rows() {
            let x = g.constant(ctx_norm.slice_rows(t, t + 1)?);
            state = self.gru.step(&mut g, &self.store, x, &state)?;
        }
        let s = streams.len();
        let mut state: Vec<Tensor<T>> = state.iter().map(|&v| repeat_row(g.value(v), s)).collect();
        let sampler = Sampler::new(&self.eps, &self.store, &self.sched).paper_literal(self.config.diffusion.paper_literal_sampler);
        let mut steps = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let x_init: Vec<T> = streams.iter_mut().flat_map(|r| (0..self.dim).map(|_| rng::normal::<T>(r)).collect::<Vec<_>>()).collect();
            let x_init = Tensor::new(vec![s, self.dim], x_init)?;
            let h_top = state.last().expect("at least one layer");
            let x = sampler.sample_streams(x_init, h_top, &mut streams)?;
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let hv: Vec<Var> = state.iter().map(|t| g.constant(t.clone())).collect();
            let next = self.gru.step(&mut g, &self.store, xv, &hv)?;
            state = next.iter().map(|&v| g.value(v).clone()).collect();
            steps.push(x);
        }
        let mut data = Vec::with_capacity(s * horizon * self.dim);
        for path in 0..s {
            for step in &steps {
                let row = Tensor::new(vec![1, self.dim], step.row(path).to_vec())?;
                data.extend_from_slice(stats.denormalize(&row)?.data());
            }
        }
        let mut ens = ForecastEnsemble::new(Tensor::new(vec![s, horizon, self.dim], data)?)?;
        ens.denormalized = true;
        Ok(ens)
    }

    pub fn save(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        let c = &self.config;
        let d = &c.diffusion;
        for (k, v) in [
            ("dim", self.dim as f64),
            ("hidden", c.hidden as f64),
            ("layers", c.layers as f64),
            ("ctx_len", c.ctx_len as f64),
            ("pred_len", c.pred_len as f64),
            ("windows_per_epoch", c.windows_per_epoch as f64),
            ("scale_by_variance", c.scale_by_variance as u8 as f64),
            ("diffusion.steps", d.steps as f64),
            ("diffusion.beta_start", d.beta_start),
            ("diffusion.beta_end", d.beta_end),
            ("diffusion.l2", (d.loss_norm == LossNorm::L2) as u8 as f64),
            ("diffusion.paper_literal", d.paper_literal_sampler as u8 as f64),
            ("diffusion.hidden", d.hidden as f64),
        ] {
            ckpt.put_scalar(format!("{prefix}cfg.{k}"), v)?;
        }
        ckpt.put_store(&format!("{prefix}p."), &self.store)
    }

    pub fn load(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let u = |k: &str| ckpt.usize(&format!("{prefix}cfg.{k}"));
        let f = |k: &str| ckpt.scalar(&format!("{prefix}cfg.{k}"));
        let config = TimeGradConfig {
            hidden: u("hidden")?,
            layers: u("layers")?,
            ctx_len: u("ctx_len")?,
            pred_len: u("pred_len")?,
            windows_per_epoch: u("windows_per_epoch")?,
            scale_by_variance: u("scale_by_variance")? == 1,
            diffusion: DiffusionConfig {
                steps: u("diffusion.steps")?,
                beta_start: f("diffusion.beta_start")?,
                beta_end: f("diffusion.beta_end")?,
                loss_norm: if u("diffusion.l2")? == 1 { LossNorm::L2 } else { LossNorm::L1 },
                paper_literal_sampler: u("diffusion.paper_literal")? == 1,
                hidden: u("diffusion.hidden")?,
            },
        };
        let mut model = Self::new(config, u("dim")?, 0)?;
        ckpt.load_store(&format!("{prefix}p."), &mut model.store)?;
        Ok(model)
    }
}

fn repeat_row<T: Scalar>(row: &Tensor<T>, n: usize) -> Tensor<T> {
    let data = (0..n).flat_map(|_| row.data().iter().copied()).collect();
    Tensor::new(vec![n, row.cols()], data).expect("repeated shape")
}
