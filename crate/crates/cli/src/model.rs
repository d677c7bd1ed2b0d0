//! One trainable forecaster per channel group, whatever its family.

use std::ops::Range;

use oilcast::checkpoint::Checkpoint;
use oilcast::data::SeriesPanel;
use oilcast::eval::ForecastEnsemble;
use oilcast::rng::Rng;
use oilcast::seq_models::{SeqConfig, SeqKind, SeqModel};
use oilcast::timegrad::{EpochRecord, TimeGradConfig, TimeGradModel};
use oilcast::{AdamW, AdamWConfig, Error, ParamStore, Result, Tensor};

use crate::config::ModelKind;

#[derive(Clone, Debug)]
pub enum Model {
    TimeGrad(TimeGradModel<f64>),
    Seq(SeqModel<f64>),
}

impl Model {
    /// A fresh model predicting `horizon` steps of `dim` channels.
    pub fn new(kind: ModelKind, dim: usize, horizon: usize, windows_per_epoch: Option<usize>, seed: u64) -> Result<Self> {
        Ok(match kind {
            ModelKind::TimeGrad => {
                let base = TimeGradConfig::default();
                let cfg = TimeGradConfig {
                    pred_len: horizon,
                    windows_per_epoch: windows_per_epoch.unwrap_or(base.windows_per_epoch),
                    ..base
                };
                Model::TimeGrad(TimeGradModel::new(cfg, dim, seed)?)
            }
            ModelKind::Informer | ModelKind::Vanilla => {
                let base = SeqConfig::for_kind(if kind == ModelKind::Informer { SeqKind::Informer } else { SeqKind::Vanilla });
                let cfg = SeqConfig { pred_len: horizon, windows_per_epoch: windows_per_epoch.unwrap_or(base.windows_per_epoch), ..base };
                Model::Seq(SeqModel::new(cfg, dim, seed)?)
            }
        })
    }

    pub fn store(&self) -> &ParamStore<f64> {
        match self {
            Model::TimeGrad(m) => &m.store,
            Model::Seq(m) => &m.store,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::TimeGrad(m) => m.dim,
            Model::Seq(m) => m.dim,
        }
    }

    pub fn ctx_len(&self) -> usize {
        match self {
            Model::TimeGrad(m) => m.config.ctx_len,
            Model::Seq(m) => m.config.ctx_len,
        }
    }

    pub fn optimizer(&self, lr: f64) -> Result<AdamW<f64>> {
        AdamW::new(AdamWConfig::default().with_learning_rate(lr), self.store())
    }

    /// Trains on the panel's train span, epoch `e` drawing from
    /// `rng::stream(seed, e)`.
    pub fn fit(
        &mut self,
        opt: &mut AdamW<f64>,
        panel: &SeriesPanel<f64>,
        epochs: Range<usize>,
        seed: u64,
        on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>> {
        let split = panel.split_index();
        match self {
            Model::TimeGrad(m) => m.fit(opt, panel.values(), split, epochs, seed, on_epoch),
            Model::Seq(m) => m.fit(opt, panel.values(), panel.timestamps(), split, epochs, seed, on_epoch),
        }
    }

    /// `n_samples` denormalized paths for rows `origin..origin+horizon`,
    /// conditioned on the rows before `origin`.
    pub fn forecast(&self, panel: &SeriesPanel<f64>, origin: usize, horizon: usize, n_samples: usize, rng: &mut Rng) -> Result<ForecastEnsemble<f64>> {
        let ctx_len = self.ctx_len();
        if origin < ctx_len || origin > panel.len() {
            return Err(Error::Parameter(format!(
                "forecast origin {origin} leaves no {ctx_len}-row context inside {} rows",
                panel.len()
            )));
        }
        let context = panel.values().slice_rows(origin - ctx_len, origin)?;
        let stride = panel.stride().unwrap_or(1);
        let ts = panel.timestamps();
        let step_ts = |k: usize| ts[origin - 1] + stride * (k as i64 + 1);
        match self {
            Model::TimeGrad(m) => {
                let ens = m.forecast(&context, horizon, n_samples, rng)?;
                ens.with_timestamps((0..horizon).map(step_ts).collect())
            }
            Model::Seq(m) => {
                let pred = m.config.pred_len;
                if horizon > pred {
                    return Err(Error::Parameter(format!("horizon {horizon} exceeds the model's {pred}-step decoder")));
                }
                let mut stamps = ts[origin - ctx_len..origin].to_vec();
                stamps.extend((0..pred).map(step_ts));
                let ens = m.forecast(&context, &stamps, n_samples, rng)?;
                truncate_horizon(&ens, horizon)
            }
        }
    }

    pub fn save(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        match self {
            Model::TimeGrad(m) => m.save(ckpt, prefix),
            Model::Seq(m) => m.save(ckpt, prefix),
        }
    }

    pub fn load(kind: ModelKind, ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        Ok(match kind {
            ModelKind::TimeGrad => Model::TimeGrad(TimeGradModel::load(ckpt, prefix)?),
            ModelKind::Informer | ModelKind::Vanilla => Model::Seq(SeqModel::load(ckpt, prefix)?),
        })
    }
}

/// The first `horizon` steps of every path.
fn truncate_horizon(ens: &ForecastEnsemble<f64>, horizon: usize) -> Result<ForecastEnsemble<f64>> {
    let (s, h, d) = (ens.n_samples(), ens.horizon(), ens.dim());
    let data: Vec<f64> = (0..s).flat_map(|p| ens.samples().data()[p * h * d..(p * h + horizon) * d].iter().copied()).collect();
    let mut out = ForecastEnsemble::new(Tensor::new(vec![s, horizon, d], data)?)?;
    out.denormalized = ens.denormalized;
    out.with_timestamps(ens.timestamps[..horizon].to_vec())
}
