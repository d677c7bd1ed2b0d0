//! Production panels: CSV ingestion, water-breakthrough truncation, temporal
//! splits, channel groupings and a synthetic multi-well field generator.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate};

use crate::error::{bail, Error, Result};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
pub const OIL: &str = "oil";
pub const WATER: &str = "water";

/// One panel column: a channel of a site.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ColumnKey {
    pub site: String,
    pub channel: String,
}

impl ColumnKey {
    pub fn new(site: impl Into<String>, channel: impl Into<String>) -> Self {
        Self { site: site.into(), channel: channel.into() }
    }
}

impl fmt::Display for ColumnKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.site, self.channel)
    }
}

/// Epoch-day timestamp of a calendar date.
pub fn epoch_day(date: NaiveDate) -> i64 {
    date.signed_duration_since(NaiveDate::default()).num_days()
}

/// Calendar date of an epoch-day timestamp.
pub fn date_of(day: i64) -> NaiveDate {
    DateTime::from_timestamp(day * 86_400, 0).expect("epoch day in calendar range").date_naive()
}

/// Multichannel series on a fixed-stride daily grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesPanel<T> {
    columns: Vec<ColumnKey>,
    timestamps: Vec<i64>,
    values: Tensor<T>,
    split_index: usize,
}

impl<T: Scalar> SeriesPanel<T> {
    /// Validates shape, stride and sign; the split defaults to `⌊0.8·T⌋`.
    pub fn new(columns: Vec<ColumnKey>, timestamps: Vec<i64>, values: Tensor<T>) -> Result<Self> {
        if columns.is_empty() || timestamps.is_empty() {
            bail!(EmptyResult, "panel needs at least one column and one timestep");
        }
        if values.shape() != [timestamps.len(), columns.len()] {
            bail!(Dimension, "values {:?} do not match {} steps × {} columns", values.shape(), timestamps.len(), columns.len());
        }
        if let Some(stride) = timestamps.get(1).map(|t| t - timestamps[0]) {
            if stride <= 0 || timestamps.windows(2).any(|w| w[1] - w[0] != stride) {
                bail!(Validation, "timestamps must increase with a constant stride");
            }
        }
        if let Some(v) = values.data().iter().find(|v| !(**v >= T::zero()) || !v.is_finite()) {
            bail!(Validation, "production values must be finite and nonnegative, found {v}");
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(c) = columns.iter().find(|c| !seen.insert(*c)) {
            bail!(Validation, "duplicate column {c}");
        }
        let split_index = default_split(timestamps.len());
        Ok(Self { columns, timestamps, values, split_index })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[ColumnKey] {
        &self.columns
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    /// First test row.
    pub fn split_index(&self) -> usize {
        self.split_index
    }

    /// Days between rows; `None` for a single-row panel.
    pub fn stride(&self) -> Option<i64> {
        self.timestamps.get(1).map(|t| t - self.timestamps[0])
    }

    /// Site names in column order, deduplicated.
    pub fn sites(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.columns {
            if !out.contains(&c.site) {
                out.push(c.site.clone());
            }
        }
        out
    }

    pub fn column_index(&self, site: &str, channel: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.site == site && c.channel == channel)
    }

    pub fn column(&self, d: usize) -> Vec<T> {
        (0..self.len()).map(|t| self.values.get(t, d)).collect()
    }

    /// Panel restricted to `cols`, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if cols.is_empty() || cols.iter().any(|&c| c >= self.dim()) {
            bail!(Dimension, "column selection {cols:?} invalid for {} columns", self.dim());
        }
        let columns = cols.iter().map(|&c| self.columns[c].clone()).collect();
        Self::new(columns, self.timestamps.clone(), self.values.select_cols(cols)?)
    }

    /// Rows `start..end` as a new panel with its split recomputed.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            bail!(Dimension, "slice {start}..{end} invalid for {} rows", self.len());
        }
        Self::new(self.columns.clone(), self.timestamps[start..end].to_vec(), self.values.slice_rows(start, end)?)
    }

    /// Sets the split at `⌊fraction·T⌋`.
    pub fn with_split(mut self, fraction: f64) -> Result<Self> {
        self.split_index = split_point(self.len(), fraction)?;
        Ok(self)
    }

    /// Contiguous train/test views at `⌊fraction·T⌋`, sharing this panel's storage.
    pub fn split(&self, fraction: f64) -> Result<(PanelView<'_, T>, PanelView<'_, T>)> {
        let at = split_point(self.len(), fraction)?;
        Ok((self.view(0, at), self.view(at, self.len())))
    }

    /// Views on either side of the stored split index.
    pub fn train_test(&self) -> (PanelView<'_, T>, PanelView<'_, T>) {
        (self.view(0, self.split_index), self.view(self.split_index, self.len()))
    }

    pub fn view(&self, start: usize, end: usize) -> PanelView<'_, T> {
        assert!(start <= end && end <= self.len(), "view {start}..{end} outside {} rows", self.len());
        PanelView { panel: self, start, end }
    }
}

fn default_split(len: usize) -> usize {
    (len as f64 * DEFAULT_TRAIN_FRACTION).floor() as usize
}

fn split_point(len: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        bail!(Parameter, "train fraction {fraction} outside (0, 1)");
    }
    let at = (len as f64 * fraction).floor() as usize;
    if at == 0 || at == len {
        bail!(Parameter, "fraction {fraction} of {len} rows leaves an empty side");
    }
    Ok(at)
}

/// Read-only window of panel rows `start..end`.
#[derive(Clone, Copy, Debug)]
pub struct PanelView<'a, T> {
    panel: &'a SeriesPanel<T>,
    start: usize,
    end: usize,
}

impl<'a, T: Scalar> PanelView<'a, T> {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// Row range within the parent panel.
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    pub fn panel(&self) -> &'a SeriesPanel<T> {
        self.panel
    }

    pub fn timestamps(&self) -> &'a [i64] {
        &self.panel.timestamps[self.start..self.end]
    }

    pub fn row(&self, i: usize) -> &'a [T] {
        self.panel.values.row(self.start + i)
    }

    pub fn column(&self, d: usize) -> Vec<T> {
        (self.start..self.end).map(|t| self.panel.values.get(t, d)).collect()
    }

    /// Copies the rows out into a `[len × D]` tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        self.panel.values.slice_rows(self.start, self.end).expect("view within panel")
    }
}

/// Drops every row before the first positive value in column `water`.
pub fn truncate_at_breakthrough<T: Scalar>(panel: &SeriesPanel<T>, water: usize) -> Result<SeriesPanel<T>> {
    truncate_at_all_breakthroughs(panel, &[water])
}

/// Truncates at the latest breakthrough among `waters`, so every listed
/// channel is positive in the first row.
pub fn truncate_at_all_breakthroughs<T: Scalar>(panel: &SeriesPanel<T>, waters: &[usize]) -> Result<SeriesPanel<T>> {
    let mut start = 0;
    for &w in waters {
        if w >= panel.dim() {
            bail!(Dimension, "water column {w} out of range for {} columns", panel.dim());
        }
        let Some(first) = (0..panel.len()).find(|&t| panel.values.get(t, w) > T::zero()) else {
            bail!(EmptyResult, "channel {} never produces water", panel.columns[w]);
        };
        start = start.max(first);
    }
    if start == 0 {
        return Ok(panel.clone());
    }
    panel.slice(start, panel.len())
}

/// Reads a long-format `date,site,channel,value` CSV into a panel. Columns
/// keep their order of first appearance; dates are sorted.
pub fn load_csv<T: Scalar>(path: &Path) -> Result<SeriesPanel<T>> {
    parse_csv(&fs::read_to_string(path)?)
}

pub fn parse_csv<T: Scalar>(text: &str) -> Result<SeriesPanel<T>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Format { line: 1, msg: e.to_string() })?;
    if header.iter().map(str::trim).collect::<Vec<_>>() != ["date", "site", "channel", "value"] {
        return Err(Error::Format { line: 1, msg: format!("expected header date,site,channel,value, got {header:?}") });
    }
    let mut columns: Vec<ColumnKey> = Vec::new();
    let mut col_of: HashMap<ColumnKey, usize> = HashMap::new();
    let mut cells: BTreeMap<i64, HashMap<usize, (T, usize)>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Format { line: e.position().map_or(0, |p| p.line() as usize), msg: e.to_string() })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let fmt_err = |msg: String| Error::Format { line, msg };
        if rec.len() != 4 {
            return Err(fmt_err(format!("expected 4 fields, got {}", rec.len())));
        }
        let date = NaiveDate::parse_from_str(rec[0].trim(), "%Y-%m-%d").map_err(|e| fmt_err(format!("bad date {:?}: {e}", &rec[0])))?;
        let value: f64 = rec[3].trim().parse().map_err(|_| fmt_err(format!("bad value {:?}", &rec[3])))?;
        if !value.is_finite() {
            return Err(fmt_err(format!("non-finite value {value}")));
        }
        if value < 0.0 {
            bail!(Validation, "negative value {value} at line {line}");
        }
        let key = ColumnKey::new(rec[1].trim(), rec[2].trim());
        let col = *col_of.entry(key.clone()).or_insert_with(|| {
            columns.push(key);
            columns.len() - 1
        });
        if cells.entry(epoch_day(date)).or_default().insert(col, (T::lit(value), line)).is_some() {
            return Err(fmt_err(format!("duplicate entry for {date} {}", columns[col])));
        }
    }
    if cells.is_empty() {
        bail!(EmptyResult, "CSV has no data rows");
    }
    let days: Vec<i64> = cells.keys().copied().collect();
    if days.len() > 2 {
        let stride = days[1] - days[0];
        if let Some(w) = days.windows(2).find(|w| w[1] - w[0] != stride) {
            let line = cells[&w[1]].values().map(|c| c.1).min().unwrap_or(0);
            return Err(Error::Format { line, msg: format!("date {} breaks the {stride}-day stride", date_of(w[1])) });
        }
    }
    let d = columns.len();
    let mut values = Vec::with_capacity(days.len() * d);
    for (day, row) in &cells {
        for (c, key) in columns.iter().enumerate() {
            let Some(&(v, _)) = row.get(&c) else {
                bail!(Validation, "missing value for {} {key}", date_of(*day));
            };
            values.push(v);
        }
    }
    SeriesPanel::new(columns, days.clone(), Tensor::new(vec![days.len(), d], values)?)
}

/// Long-format CSV text: one line per (date, column), values as `%.6f`.
pub fn format_csv<T: Scalar>(panel: &SeriesPanel<T>) -> String {
    let mut out = String::from("date,site,channel,value\n");
    for (t, &day) in panel.timestamps.iter().enumerate() {
        let date = date_of(day);
        for (d, c) in panel.columns.iter().enumerate() {
            out.push_str(&format!("{date},{},{},{:.6}\n", c.site, c.channel, panel.values.get(t, d).as_f64()));
        }
    }
    out
}

pub fn save_csv<T: Scalar>(panel: &SeriesPanel<T>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(format_csv(panel).as_bytes())?;
    Ok(())
}

/// Parameters of one synthetic well. Times are in panel steps.
#[derive(Clone, Debug, PartialEq)]
pub struct WellSpec {
    /// Initial liquid rate.
    pub qi: f64,
    /// Initial decline per step.
    pub di: f64,
    /// Hyperbolic exponent; 0 is exponential decline.
    pub b: f64,
    pub start: usize,
    pub breakthrough: usize,
}

impl WellSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.qi > 0.0 && self.qi.is_finite()) {
            bail!(Validation, "initial rate q_i must be positive, got {}", self.qi);
        }
        if !(self.di >= 0.0 && self.di.is_finite()) {
            bail!(Validation, "decline D_i must be nonnegative, got {}", self.di);
        }
        if !(0.0..=1.0).contains(&self.b) {
            bail!(Validation, "Arps exponent b must lie in [0, 1], got {}", self.b);
        }
        if self.breakthrough < self.start {
            bail!(Validation, "breakthrough {} precedes well start {}", self.breakthrough, self.start);
        }
        Ok(())
    }

    /// Arps rate `Δt` steps after start.
    pub fn arps(&self, dt: f64) -> f64 {
        if self.b == 0.0 {
            self.qi * (-self.di * dt).exp()
        } else {
            self.qi / (1.0 + self.b * self.di * dt).powf(1.0 / self.b)
        }
    }
}

/// Generator settings; per-well parameters are drawn from the ranges below.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFieldConfig {
    pub n_sites: usize,
    pub wells_per_site: usize,
    pub steps: usize,
    pub stride_days: i64,
    pub start_date: NaiveDate,
    pub qi_min: f64,
    pub qi_max: f64,
    pub di_min: f64,
    pub di_max: f64,
    pub b_min: f64,
    pub b_max: f64,
    /// Wells start uniformly in `0..=start_max`.
    pub start_max: usize,
    /// Breakthrough lag after start, uniform in `[lag_min, lag_max]`.
    pub breakthrough_lag_min: usize,
    pub breakthrough_lag_max: usize,
    /// Plateau water cut and the time scale of its rise.
    pub water_cut_max: f64,
    pub water_cut_tau: f64,
    /// Per-well, per-step probability that a shut-in begins.
    pub shutin_rate: f64,
    pub shutin_min: usize,
    pub shutin_max: usize,
    pub surge_amp: f64,
    pub surge_tau: f64,
    /// Log-scale standard deviation of the multiplicative noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticFieldConfig {
    fn default() -> Self {
        Self {
            n_sites: 4,
            wells_per_site: 15,
            steps: 2000,
            stride_days: 2,
            start_date: NaiveDate::from_ymd_opt(1990, 1, 1).expect("valid date"),
            qi_min: 50.0,
            qi_max: 150.0,
            di_min: 1e-3,
            di_max: 3e-3,
            b_min: 0.0,
            b_max: 0.5,
            start_max: 100,
            breakthrough_lag_min: 20,
            breakthrough_lag_max: 300,
            water_cut_max: 0.6,
            water_cut_tau: 150.0,
            shutin_rate: 2e-4,
            shutin_min: 3,
            shutin_max: 15,
            surge_amp: 0.5,
            surge_tau: 5.0,
            noise: 0.05,
            seed: 42,
        }
    }
}

impl SyntheticFieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sites == 0 || self.wells_per_site == 0 {
            bail!(Validation, "n_sites and wells_per_site must be positive");
        }
        if self.steps < 2 || self.stride_days <= 0 {
            bail!(Validation, "need at least 2 steps and a positive stride");
        }
        let ranges = [
            ("qi", self.qi_min, self.qi_max),
            ("di", self.di_min, self.di_max),
            ("b", self.b_min, self.b_max),
        ];
        for (name, lo, hi) in ranges {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                bail!(Validation, "{name}_min {lo} must not exceed {name}_max {hi}");
            }
        }
        if self.qi_min <= 0.0 || self.di_min < 0.0 || self.b_min < 0.0 || self.b_max > 1.0 {
            bail!(Validation, "need qi > 0, di ≥ 0 and b in [0, 1]");
        }
        if self.breakthrough_lag_min > self.breakthrough_lag_max || self.shutin_min == 0 || self.shutin_min > self.shutin_max {
            bail!(Validation, "breakthrough lag and shut-in duration ranges must be ordered and positive");
        }
        if !(0.0..1.0).contains(&self.water_cut_max) || self.water_cut_tau <= 0.0 {
            bail!(Validation, "water_cut_max must lie in [0, 1) with a positive tau");
        }
        if !(0.0..=1.0).contains(&self.shutin_rate) || self.surge_amp < 0.0 || self.surge_tau <= 0.0 || self.noise < 0.0 {
            bail!(Validation, "shut-in, surge and noise settings out of range");
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unlisted keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Format { line: i + 1, msg: format!("expected key=value, got {line:?}") });
            };
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Format { line: i + 1, msg: e.to_string() })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::Validation(format!("bad value {v:?} for {key}")))
        }
        match key {
            "n_sites" => self.n_sites = num(key, value)?,
            "wells_per_site" => self.wells_per_site = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "stride_days" => self.stride_days = num(key, value)?,
            "start_date" => {
                self.start_date = NaiveDate::parse_from_str(value, "%Y-%m-%d")
                    .map_err(|_| Error::Validation(format!("bad date {value:?} for start_date")))?
            }
            "qi_min" => self.qi_min = num(key, value)?,
            "qi_max" => self.qi_max = num(key, value)?,
            "di_min" => self.di_min = num(key, value)?,
            "di_max" => self.di_max = num(key, value)?,
            "b_min" => self.b_min = num(key, value)?,
            "b_max" => self.b_max = num(key, value)?,
            "start_max" => self.start_max = num(key, value)?,
            "breakthrough_lag_min" => self.breakthrough_lag_min = num(key, value)?,
            "breakthrough_lag_max" => self.breakthrough_lag_max = num(key, value)?,
            "water_cut_max" => self.water_cut_max = num(key, value)?,
            "water_cut_tau" => self.water_cut_tau = num(key, value)?,
            "shutin_rate" => self.shutin_rate = num(key, value)?,
            "shutin_min" => self.shutin_min = num(key, value)?,
            "shutin_max" => self.shutin_max = num(key, value)?,
            "surge_amp" => self.surge_amp = num(key, value)?,
            "surge_tau" => self.surge_tau = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => bail!(Validation, "unknown synthetic config key {key:?}"),
        }
        Ok(())
    }

    /// Every setting as `key = value` lines, readable by [`Self::parse`].
    pub fn to_text(&self) -> String {
        let pairs: [(&str, String); 23] = [
            ("n_sites", self.n_sites.to_string()),
            ("wells_per_site", self.wells_per_site.to_string()),
            ("steps", self.steps.to_string()),
            ("stride_days", self.stride_days.to_string()),
            ("start_date", self.start_date.to_string()),
            ("qi_min", format!("{:?}", self.qi_min)),
            ("qi_max", format!("{:?}", self.qi_max)),
            ("di_min", format!("{:?}", self.di_min)),
            ("di_max", format!("{:?}", self.di_max)),
            ("b_min", format!("{:?}", self.b_min)),
            ("b_max", format!("{:?}", self.b_max)),
            ("start_max", self.start_max.to_string()),
            ("breakthrough_lag_min", self.breakthrough_lag_min.to_string()),
            ("breakthrough_lag_max", self.breakthrough_lag_max.to_string()),
            ("water_cut_max", format!("{:?}", self.water_cut_max)),
            ("water_cut_tau", format!("{:?}", self.water_cut_tau)),
            ("shutin_rate", format!("{:?}", self.shutin_rate)),
            ("shutin_min", self.shutin_min.to_string()),
            ("shutin_max", self.shutin_max.to_string()),
            ("surge_amp", format!("{:?}", self.surge_amp)),
            ("surge_tau", format!("{:?}", self.surge_tau)),
            ("noise", format!("{:?}", self.noise)),
            ("seed", self.seed.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn site_name(i: usize) -> String {
        format!("site{}", i + 1)
    }

    /// Draws every well's parameters; `[site][well]`.
    pub fn sample_wells(&self) -> Result<Vec<Vec<WellSpec>>> {
        self.validate()?;
        let mut r = rng::seeded(self.seed);
        let mut u = |lo: f64, hi: f64| -> f64 { rng::uniform(&mut r, lo, hi.max(lo)) };
        let mut sites = Vec::with_capacity(self.n_sites);
        for _ in 0..self.n_sites {
            let mut wells = Vec::with_capacity(self.wells_per_site);
            for _ in 0..self.wells_per_site {
                let qi = u(self.qi_min, self.qi_max);
                let di = u(self.di_min, self.di_max);
                let b = u(self.b_min, self.b_max);
                let start = u(0.0, self.start_max as f64 + 1.0).floor() as usize;
                let lag = u(self.breakthrough_lag_min as f64, self.breakthrough_lag_max as f64 + 1.0).floor() as usize;
                wells.push(WellSpec { qi, di, b, start, breakthrough: start + lag.min(self.breakthrough_lag_max) });
            }
            sites.push(wells);
        }
        Ok(sites)
    }
}

/// Oil and water of one simulated well.
#[derive(Clone, Debug, PartialEq)]
pub struct WellSeries {
    pub site: usize,
    pub well: usize,
    pub oil: Vec<f64>,
    pub water: Vec<f64>,
}

/// A generated panel together with the per-well series it sums.
#[derive(Clone, Debug)]
pub struct SyntheticField<T> {
    pub panel: SeriesPanel<T>,
    pub wells: Vec<WellSeries>,
}

/// Generates the default-sampled field for `cfg`.
pub fn generate_synthetic<T: Scalar>(cfg: &SyntheticFieldConfig) -> Result<SyntheticField<T>> {
    let wells = cfg.sample_wells()?;
    generate_from_wells(cfg, &wells)
}

/// Simulates the given wells (`[site][well]`) under the shut-in, surge and
/// noise settings of `cfg`; site columns are `oil`, `water` per site.
pub fn generate_from_wells<T: Scalar>(cfg: &SyntheticFieldConfig, sites: &[Vec<WellSpec>]) -> Result<SyntheticField<T>> {
    cfg.validate()?;
    if sites.is_empty() || sites.iter().any(Vec::is_empty) {
        bail!(Validation, "every site needs at least one well");
    }
    let n = cfg.steps;
    let mut wells = Vec::new();
    let mut columns = Vec::new();
    let mut site_cols: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut stream = 0u64;
    for (s, specs) in sites.iter().enumerate() {
        columns.push(ColumnKey::new(SyntheticFieldConfig::site_name(s), OIL));
        columns.push(ColumnKey::new(SyntheticFieldConfig::site_name(s), WATER));
        let (mut oil_sum, mut water_sum) = (vec![0.0; n], vec![0.0; n]);
        for (w, spec) in specs.iter().enumerate() {
            spec.validate()?;
            let mut r = rng::stream(cfg.seed, stream);
            stream += 1;
            let (oil, water) = simulate_well(cfg, spec, &mut r);
            for t in 0..n {
                oil_sum[t] += oil[t];
                water_sum[t] += water[t];
            }
            wells.push(WellSeries { site: s, well: w, oil, water });
        }
        site_cols.push((oil_sum, water_sum));
    }
    let d = columns.len();
    let mut values = Vec::with_capacity(n * d);
    for t in 0..n {
        for (oil, water) in &site_cols {
            values.push(T::lit(oil[t]));
            values.push(T::lit(water[t]));
        }
    }
    let day0 = epoch_day(cfg.start_date);
    let timestamps = (0..n as i64).map(|i| day0 + i * cfg.stride_days).collect();
    let panel = SeriesPanel::new(columns, timestamps, Tensor::new(vec![n, d], values)?)?;
    Ok(SyntheticField { panel, wells })
}

fn simulate_well(cfg: &SyntheticFieldConfig, spec: &WellSpec, r: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let n = cfg.steps;
    let (mut oil, mut water) = (vec![0.0; n], vec![0.0; n]);
    let mut shut_until = 0usize;
    let mut reopened: Option<usize> = None;
    for t in spec.start.min(n)..n {
        let starts_shutin = rng::unit(r) < cfg.shutin_rate;
        let duration = rng::index(r, cfg.shutin_min, cfg.shutin_max + 1);
        let z_oil: f64 = rng::normal(r);
        let z_water: f64 = rng::normal(r);
        if t < shut_until {
            continue;
        }
        if starts_shutin {
            shut_until = t + duration;
            reopened = Some(shut_until);
            continue;
        }
        let liquid = spec.arps((t - spec.start) as f64);
        let cut = if t >= spec.breakthrough {
            let x = (t - spec.breakthrough) as f64 / cfg.water_cut_tau;
            cfg.water_cut_max * (2.0 / (1.0 + (-x).exp()) - 1.0)
        } else {
            0.0
        };
        let surge = reopened.map_or(1.0, |t0| 1.0 + cfg.surge_amp * (-((t - t0) as f64) / cfg.surge_tau).exp());
        oil[t] = liquid * (1.0 - cut) * surge * (cfg.noise * z_oil).exp();
        water[t] = liquid * cut * (cfg.noise * z_water).exp();
    }
    (oil, water)
}

/// Channel groupings, each producing one model per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    /// Oil of consecutive site pairs.
    OilOnlyPairs,
    /// Oil and water of each site.
    OilWaterPerSite,
    /// Oil of every site in one multivariate model.
    AllSitesOil,
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grouping::OilOnlyPairs => "oil_only_pairs",
            Grouping::OilWaterPerSite => "oil_water_per_site",
            Grouping::AllSitesOil => "all_sites_oil",
        })
    }
}

impl FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oil_only_pairs" => Ok(Grouping::OilOnlyPairs),
            "oil_water_per_site" => Ok(Grouping::OilWaterPerSite),
            "all_sites_oil" => Ok(Grouping::AllSitesOil),
            _ => bail!(Validation, "unknown grouping {s:?}"),
        }
    }
}

/// Columns modeled jointly, plus the water columns that set their start.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelGroup {
    pub name: String,
    pub columns: Vec<usize>,
    pub waters: Vec<usize>,
}

impl Grouping {
    pub fn groups<T: Scalar>(self, panel: &SeriesPanel<T>) -> Result<Vec<ChannelGroup>> {
        let sites = panel.sites();
        let col = |site: &str, ch: &str| {
            panel.column_index(site, ch).ok_or_else(|| Error::Validation(format!("panel has no {site}/{ch} column")))
        };
        let mut out = Vec::new();
        match self {
            Grouping::OilOnlyPairs => {
                if sites.len() < 2 {
                    bail!(Validation, "oil_only_pairs needs at least two sites");
                }
                for i in (0..sites.len()).step_by(2) {
                    let (a, b) = (&sites[i], &sites[if i + 1 < sites.len() { i + 1 } else { 0 }]);
                    out.push(ChannelGroup {
                        name: format!("{a}+{b}"),
                        columns: vec![col(a, OIL)?, col(b, OIL)?],
                        waters: vec![col(a, WATER)?, col(b, WATER)?],
                    });
                }
            }
            Grouping::OilWaterPerSite => {
                for s in &sites {
                    out.push(ChannelGroup { name: s.clone(), columns: vec![col(s, OIL)?, col(s, WATER)?], waters: vec![col(s, WATER)?] });
                }
            }
            Grouping::AllSitesOil => out.push(ChannelGroup {
                name: "all".into(),
                columns: sites.iter().map(|s| col(s, OIL)).collect::<Result<_>>()?,
                waters: sites.iter().map(|s| col(s, WATER)).collect::<Result<_>>()?,
            }),
        }
        Ok(out)
    }
}

impl ChannelGroup {
    /// Truncates at the group's breakthrough and keeps its columns.
    pub fn extract<T: Scalar>(&self, panel: &SeriesPanel<T>, truncate: bool) -> Result<SeriesPanel<T>> {
        let base = if truncate { truncate_at_all_breakthroughs(panel, &self.waters)? } else { panel.clone() };
        base.select_columns(&self.columns)
    }
}
