//! Forecast ensembles, nearest-rank quantiles, MSE/MASE, moment summaries,
//! and report/plot emission.

use std::fmt::Write as _;

use crate::error::{bail, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The scanned quantile grid 0.05, 0.10, …, 0.95.
pub fn quantile_grid() -> Vec<f64> {
    (1..20).map(|k| k as f64 / 20.0).collect()
}

/// `S` sample paths over a horizon of `H` steps in `D` dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastEnsemble<T> {
    samples: Tensor<T>,
    pub denormalized: bool,
    /// Epoch days of each horizon step; empty when unknown.
    pub timestamps: Vec<i64>,
}

impl<T: Scalar> ForecastEnsemble<T> {
    /// Wraps a `[S×H×D]` tensor.
    pub fn new(samples: Tensor<T>) -> Result<Self> {
        if samples.ndim() != 3 {
            bail!(Dimension, "ensemble needs [S×H×D] samples, got {:?}", samples.shape());
        }
        Ok(Self { samples, denormalized: false, timestamps: Vec::new() })
    }

    /// Stacks equally shaped `[H×D]` paths.
    pub fn from_paths(paths: &[Tensor<T>]) -> Result<Self> {
        let Some(first) = paths.first() else {
            bail!(Dimension, "ensemble needs at least one path");
        };
        let (h, d) = (first.rows(), first.cols());
        let mut data = Vec::with_capacity(paths.len() * h * d);
        for p in paths {
            if p.numel() != h * d || p.rows() != h {
                bail!(Dimension, "path {:?} differs from [{h}×{d}]", p.shape());
            }
            data.extend_from_slice(p.data());
        }
        Self::new(Tensor::new(vec![paths.len(), h, d], data)?)
    }

    pub fn with_timestamps(mut self, timestamps: Vec<i64>) -> Result<Self> {
        if !timestamps.is_empty() && timestamps.len() != self.horizon() {
            bail!(Dimension, "{} timestamps for horizon {}", timestamps.len(), self.horizon());
        }
        self.timestamps = timestamps;
        Ok(self)
    }

    pub fn samples(&self) -> &Tensor<T> {
        &self.samples
    }

    pub fn n_samples(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.samples.shape()[2]
    }

    pub fn value(&self, s: usize, h: usize, d: usize) -> T {
        self.samples.data()[(s * self.horizon() + h) * self.dim() + d]
    }

    pub fn path(&self, s: usize) -> Tensor<T> {
        let n = self.horizon() * self.dim();
        Tensor::new(vec![self.horizon(), self.dim()], self.samples.data()[s * n..(s + 1) * n].to_vec())
            .expect("path shape")
    }

    /// All samples at `(step, dim)`.
    pub fn column(&self, h: usize, d: usize) -> Vec<T> {
        (0..self.n_samples()).map(|s| self.value(s, h, d)).collect()
    }

    /// The single-dimension ensemble for dimension `d`.
    pub fn select_dim(&self, d: usize) -> Result<Self> {
        if d >= self.dim() {
            bail!(Dimension, "dimension {d} out of range for {}", self.dim());
        }
        let data = self.samples.data().iter().skip(d).step_by(self.dim()).copied().collect();
        Ok(Self {
            samples: Tensor::new(vec![self.n_samples(), self.horizon(), 1], data)?,
            denormalized: self.denormalized,
            timestamps: self.timestamps.clone(),
        })
    }

    /// Applies `f(dim, value)` to every sample.
    pub fn map_dims(&self, f: impl Fn(usize, T) -> T) -> Self {
        let d = self.dim();
        let data = self.samples.data().iter().enumerate().map(|(i, &v)| f(i % d, v)).collect();
        Self {
            samples: Tensor::new(self.samples.shape().to_vec(), data).expect("same shape"),
            denormalized: self.denormalized,
            timestamps: self.timestamps.clone(),
        }
    }
}

/// Nearest-rank index `max(0, ⌈q·S⌉ − 1)`. Products within 1e-9 of an
/// integer are snapped first so that e.g. 0.05·100 selects index 4.
pub fn nearest_rank_index(q: f64, s: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&q) {
        bail!(Parameter, "quantile {q} outside [0, 1]");
    }
    if s == 0 {
        bail!(Parameter, "nearest rank of an empty sample");
    }
    let x = q * s as f64;
    let snapped = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    Ok((snapped as usize).saturating_sub(1).min(s - 1))
}

/// Per (step, dim): the nearest-rank sample after sorting ascending.
pub fn quantile_path<T: Scalar>(ens: &ForecastEnsemble<T>, q: f64) -> Result<Tensor<T>> {
    let idx = nearest_rank_index(q, ens.n_samples())?;
    let (h, d) = (ens.horizon(), ens.dim());
    let mut out = Vec::with_capacity(h * d);
    for step in 0..h {
        for dim in 0..d {
            let mut col = ens.column(step, dim);
            col.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
            out.push(col[idx]);
        }
    }
    Tensor::new(vec![h, d], out)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        bail!(Contract, "prediction has {a} values, truth has {b}");
    }
    if a == 0 {
        bail!(Contract, "metrics need at least one value");
    }
    Ok(())
}

pub fn mse<T: Scalar>(pred: &[T], truth: &[T]) -> Result<T> {
    check_lengths(pred.len(), truth.len())?;
    let s: T = pred.iter().zip(truth).map(|(&p, &t)| (p - t) * (p - t)).sum();
    Ok(s / T::lit(pred.len() as f64))
}

pub fn mae<T: Scalar>(pred: &[T], truth: &[T]) -> Result<T> {
    check_lengths(pred.len(), truth.len())?;
    let s: T = pred.iter().zip(truth).map(|(&p, &t)| (p - t).abs()).sum();
    Ok(s / T::lit(pred.len() as f64))
}

/// Mean absolute one-step change of the training series.
pub fn naive_scale<T: Scalar>(train: &[T]) -> Result<T> {
    if train.len() < 2 {
        bail!(UndefinedMetric, "MASE needs at least two training values");
    }
    let s: T = train.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    let scale = s / T::lit((train.len() - 1) as f64);
    if scale <= T::zero() {
        bail!(UndefinedMetric, "training series is constant; MASE is undefined");
    }
    Ok(scale)
}

pub fn mase<T: Scalar>(pred: &[T], truth: &[T], train: &[T]) -> Result<T> {
    let scale = naive_scale(train)?;
    Ok(mae(pred, truth)? / scale)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Mse,
    Mase,
}

impl Metric {
    pub fn eval<T: Scalar>(self, pred: &[T], truth: &[T], train: &[T]) -> Result<T> {
        match self {
            Metric::Mse => mse(pred, truth),
            Metric::Mase => mase(pred, truth, train),
        }
    }
}

/// Scans [`quantile_grid`] and returns the quantile minimizing `metric`
/// (first one wins ties).
pub fn best_quantile<T: Scalar>(
    ens: &ForecastEnsemble<T>,
    truth: &Tensor<T>,
    train: &[T],
    metric: Metric,
) -> Result<(f64, T)> {
    if truth.numel() != ens.horizon() * ens.dim() {
        bail!(Contract, "truth {:?} does not cover the [{}×{}] horizon", truth.shape(), ens.horizon(), ens.dim());
    }
    let mut best: Option<(f64, T)> = None;
    for q in quantile_grid() {
        let path = quantile_path(ens, q)?;
        let v = metric.eval(path.data(), truth.data(), train)?;
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((q, v));
        }
    }
    Ok(best.expect("non-empty grid"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    /// Per-step sample mean, `[H×D]`.
    pub mean: Tensor<T>,
    /// Per-step population std, `[H×D]`.
    pub std: Tensor<T>,
    /// Mean over all samples and steps, per dimension.
    pub pooled_mean: Vec<T>,
    /// Population std over all samples and steps, per dimension.
    pub pooled_std: Vec<T>,
}

/// Mean and population standard deviation of `values`, summed in sorted
/// order so the result does not depend on sample order.
pub fn mean_std<T: Scalar>(values: &[T]) -> (T, T) {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let n = T::lit(v.len() as f64);
    let mean = v.iter().copied().sum::<T>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, var.sqrt())
}

pub fn ensemble_moments<T: Scalar>(ens: &ForecastEnsemble<T>) -> Result<Moments<T>> {
    if ens.n_samples() < 2 {
        bail!(UndefinedMetric, "ensemble std needs at least two samples");
    }
    let (h, d) = (ens.horizon(), ens.dim());
    let mut mean = Vec::with_capacity(h * d);
    let mut std = Vec::with_capacity(h * d);
    for step in 0..h {
        for dim in 0..d {
            let (m, s) = mean_std(&ens.column(step, dim));
            mean.push(m);
            std.push(s);
        }
    }
    let mut pooled_mean = Vec::with_capacity(d);
    let mut pooled_std = Vec::with_capacity(d);
    for dim in 0..d {
        let all: Vec<T> = ens.samples().data().iter().skip(dim).step_by(d).copied().collect();
        let (m, s) = mean_std(&all);
        pooled_mean.push(m);
        pooled_std.push(s);
    }
    Ok(Moments { mean: Tensor::new(vec![h, d], mean)?, std: Tensor::new(vec![h, d], std)?, pooled_mean, pooled_std })
}

/// How a report row's quantile was picked.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// The configured quantile.
    Fixed,
    /// Chosen on the test span itself by [`best_quantile`].
    Oracle,
}

impl Selection {
    fn as_str(self) -> &'static str {
        match self {
            Selection::Fixed => "fixed",
            Selection::Oracle => "oracle",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Selection::Fixed),
            "oracle" => Ok(Selection::Oracle),
            _ => bail!(Validation, "unknown selection {s:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub site: String,
    pub channel: String,
    pub selection: Selection,
    pub quantile: f64,
    pub mse: f64,
    pub mase: f64,
    pub ens_mean: f64,
    pub ens_std: f64,
    pub truth_mean: f64,
    pub truth_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

const REPORT_HEADER: &str = "model,site,channel,selection,quantile,mse,mase,ens_mean,ens_std,truth_mean,truth_std";

impl MetricsReport {
    /// CSV with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.model,
                r.site,
                r.channel,
                r.selection.as_str(),
                r.quantile,
                r.mse,
                r.mase,
                r.ens_mean,
                r.ens_std,
                r.truth_mean,
                r.truth_std
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == REPORT_HEADER => {}
            _ => return Err(Error::Format { line: 1, msg: "unexpected report header".into() }),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').collect();
            let err = |msg: &str| Error::Format { line: i + 1, msg: msg.into() };
            if f.len() != 11 {
                return Err(err("expected 11 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
            rows.push(MetricsRow {
                model: f[0].into(),
                site: f[1].into(),
                channel: f[2].into(),
                selection: Selection::parse(f[3])?,
                quantile: num(f[4])?,
                mse: num(f[5])?,
                mase: num(f[6])?,
                ens_mean: num(f[7])?,
                ens_std: num(f[8])?,
                truth_mean: num(f[9])?,
                truth_std: num(f[10])?,
            });
        }
        Ok(Self { rows })
    }

    /// Human-readable table with right-aligned numeric columns.
    pub fn to_text(&self) -> String {
        let header = ["model", "site", "channel", "selection", "q", "MSE", "MASE", "ens_mean", "ens_std", "true_mean", "true_std"];
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.model.clone(),
                    r.site.clone(),
                    r.channel.clone(),
                    r.selection.as_str().into(),
                    format!("{:.2}", r.quantile),
                    format!("{:.4}", r.mse),
                    format!("{:.4}", r.mase),
                    format!("{:.4}", r.ens_mean),
                    format!("{:.4}", r.ens_std),
                    format!("{:.4}", r.truth_mean),
                    format!("{:.4}", r.truth_std),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|row| row[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let fmt_row = |out: &mut String, row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| if c < 4 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        fmt_row(&mut out, &header.map(String::from));
        fmt_row(&mut out, &widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>());
        for row in &cells {
            fmt_row(&mut out, row);
        }
        out
    }
}

/// One plotted series point.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotPoint {
    pub date: String,
    pub truth: f64,
    pub prediction: f64,
    pub q_low: f64,
    pub q_high: f64,
}

pub fn plot_csv(points: &[PlotPoint]) -> String {
    let mut out = String::from("timestamp,truth,prediction,q_low,q_high\n");
    for p in points {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6},{:.6}", p.date, p.truth, p.prediction, p.q_low, p.q_high);
    }
    out
}

/// Self-contained SVG line chart: a shaded quantile band, the prediction
/// and the truth.
pub fn plot_svg(title: &str, points: &[PlotPoint]) -> String {
    let (w, h, pad) = (720.0, 360.0, 40.0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in points {
        for v in [p.truth, p.prediction, p.q_low, p.q_high] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || hi - lo < 1e-12 {
        lo = if lo.is_finite() { lo - 1.0 } else { 0.0 };
        hi = lo + 2.0;
    }
    let n = points.len().max(2) - 1;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let line = |f: &dyn Fn(&PlotPoint) -> f64| {
        points.iter().enumerate().map(|(i, p)| format!("{:.2},{:.2}", x(i), y(f(p)))).collect::<Vec<_>>().join(" ")
    };
    let mut band: Vec<String> = points.iter().enumerate().map(|(i, p)| format!("{:.2},{:.2}", x(i), y(p.q_high))).collect();
    band.extend(points.iter().enumerate().rev().map(|(i, p)| format!("{:.2},{:.2}", x(i), y(p.q_low))));
    let title = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{pad}" y="24" font-family="sans-serif" font-size="14">{title}</text>"#);
    let _ = writeln!(
        out,
        r##"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="#888"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="#888"/>"##,
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(out, r##"<text x="4" y="{:.2}" font-family="sans-serif" font-size="10">{hi:.3}</text>"##, pad + 4.0);
    let _ = writeln!(out, r##"<text x="4" y="{:.2}" font-family="sans-serif" font-size="10">{lo:.3}</text>"##, h - pad);
    if !points.is_empty() {
        let _ = writeln!(out, r##"<polygon points="{}" fill="#f4c430" fill-opacity="0.3" stroke="none"/>"##, band.join(" "));
        let _ = writeln!(out, r##"<polyline points="{}" fill="none" stroke="#e07b00" stroke-width="1.5"/>"##, line(&|p| p.truth));
        let _ = writeln!(out, r##"<polyline points="{}" fill="none" stroke="#1f5fbf" stroke-width="1.5"/>"##, line(&|p| p.prediction));
    }
    out.push_str("</svg>\n");
    out
}
