//! The five subcommands. Every output lands under `cfg.out`.

use std::fs;

use oilcast::checkpoint::Checkpoint;
use oilcast::data::{generate_synthetic, load_csv, save_csv, ChannelGroup, Grouping, SeriesPanel, SyntheticFieldConfig};
use oilcast::eval::{best_quantile, mase, mean_std, mse, plot_csv, plot_svg, quantile_path, Metric, MetricsReport, MetricsRow, PlotPoint, Selection};
use oilcast::rng;
use oilcast::timegrad::EpochRecord;
use oilcast::{Error, Result, Tensor};

use crate::config::{ModelKind, RunConfig};
use crate::files::{self, GroupEnsemble};
use crate::log;
use crate::model::Model;

/// Quantiles bounding the plotted band.
const BAND: (f64, f64) = (0.05, 0.95);

pub fn synthetic_config(cfg: &RunConfig) -> Result<SyntheticFieldConfig> {
    let mut sc = match &cfg.synthetic_config {
        Some(path) => SyntheticFieldConfig::parse(&fs::read_to_string(path)?)?,
        None => SyntheticFieldConfig::default(),
    };
    if let Some(seed) = cfg.seed {
        sc.seed = seed;
    }
    sc.validate()?;
    Ok(sc)
}

/// The run's panel: the CSV if given, else the synthetic field.
pub fn load_panel(cfg: &RunConfig) -> Result<SeriesPanel<f64>> {
    match &cfg.data {
        Some(path) => load_csv(path),
        None => Ok(generate_synthetic::<f64>(&synthetic_config(cfg)?)?.panel),
    }
}

/// Writes `data.csv` and a `data.provenance` sidecar that regenerates it.
pub fn generate(cfg: &RunConfig) -> Result<()> {
    if cfg.data.is_some() {
        return Err(Error::Validation("generate writes synthetic data and takes no --data".into()));
    }
    let sc = synthetic_config(cfg)?;
    let field = generate_synthetic::<f64>(&sc)?;
    let csv = cfg.out_path("data.csv");
    fs::create_dir_all(&cfg.out)?;
    save_csv(&field.panel, &csv)?;
    let sidecar = format!(
        "# synthetic field provenance\n# regenerate: oilcast generate --synthetic-config <this file>\n{}",
        sc.to_text()
    );
    files::write(&cfg.out_path("data.provenance"), &sidecar)?;
    log::event(
        "generate.done",
        &[("path", csv.display().to_string()), ("rows", field.panel.len().to_string()), ("seed", sc.seed.to_string())],
    );
    Ok(())
}

fn grouping_code(g: Grouping) -> f64 {
    match g {
        Grouping::OilOnlyPairs => 0.0,
        Grouping::OilWaterPerSite => 1.0,
        Grouping::AllSitesOil => 2.0,
    }
}

/// Rejects a checkpoint written for another model, grouping or group count.
fn check_meta(ckpt: &Checkpoint, kind: ModelKind, grouping: Grouping, n_groups: usize) -> Result<()> {
    if ckpt.scalar("meta.model")? != kind.code() {
        return Err(Error::Validation(format!("checkpoint was not written by a {kind} run")));
    }
    if ckpt.scalar("meta.grouping")? != grouping_code(grouping) || ckpt.usize("meta.groups")? != n_groups {
        return Err(Error::Validation(format!("checkpoint groups do not match grouping {grouping}")));
    }
    Ok(())
}

fn groups(cfg: &RunConfig, panel: &SeriesPanel<f64>) -> Result<Vec<(ChannelGroup, SeriesPanel<f64>)>> {
    cfg.grouping_for(cfg.model)
        .groups(panel)?
        .into_iter()
        .map(|g| {
            let p = g.extract(panel, cfg.truncate).map_err(|e| e.context(format!("group {}", g.name)))?;
            Ok((g, p))
        })
        .collect()
}

fn put_history(ckpt: &mut Checkpoint, name: &str, history: &[EpochRecord]) -> Result<()> {
    let data = history.iter().flat_map(|r| [r.epoch as f64, r.train_loss, r.val_loss]).collect();
    ckpt.push(name, vec![history.len(), 3], data)
}

fn load_history(ckpt: &Checkpoint, name: &str) -> Result<Vec<EpochRecord>> {
    let rec = ckpt.get(name).ok_or_else(|| Error::Validation(format!("checkpoint lacks record {name}")))?;
    if rec.shape.len() != 2 || rec.shape[1] != 3 {
        return Err(Error::Validation(format!("record {name} is not an [n×3] loss history")));
    }
    Ok(rec
        .data
        .chunks(3)
        .map(|c| EpochRecord { epoch: c[0] as usize, train_loss: c[1], val_loss: c[2], max_index: None })
        .collect())
}

/// Trains one model per group, resuming from `--checkpoint` when given,
/// and writes `{model}.ckpt` and `{model}_loss.csv`.
pub fn train(cfg: &RunConfig) -> Result<Vec<(String, Vec<EpochRecord>)>> {
    let kind = cfg.model;
    let grouping = cfg.grouping_for(kind);
    let panel = load_panel(cfg)?;
    let groups = groups(cfg, &panel)?;
    let resume = cfg.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(prev) = &resume {
        check_meta(prev, kind, grouping, groups.len())?;
    }
    let epochs = cfg.epochs_for(kind);
    let seed = cfg.seed();
    let mut ckpt = Checkpoint::new();
    ckpt.put_scalar("meta.model", kind.code())?;
    ckpt.put_scalar("meta.grouping", grouping_code(grouping))?;
    ckpt.put_scalar("meta.groups", groups.len() as f64)?;
    let mut histories = Vec::with_capacity(groups.len());
    for (i, (group, gp)) in groups.iter().enumerate() {
        let (m_prefix, opt_prefix, hist_name) = (format!("g{i}.m."), format!("g{i}.opt."), format!("g{i}.history"));
        let (mut model, mut opt, mut history) = match &resume {
            Some(prev) => {
                let model = Model::load(kind, prev, &m_prefix)?;
                let mut opt = model.optimizer(cfg.lr)?;
                prev.load_optimizer(&opt_prefix, &mut opt, model.store())?;
                let history = load_history(prev, &hist_name)?;
                (model, opt, history)
            }
            None => {
                let model = Model::new(kind, gp.dim(), cfg.horizon, cfg.windows_per_epoch, rng::derive(seed, 2 * i as u64))?;
                let opt = model.optimizer(cfg.lr)?;
                (model, opt, Vec::new())
            }
        };
        let done = history.len();
        log::event(
            "train.group",
            &[
                ("model", kind.to_string()),
                ("group", group.name.clone()),
                ("rows", gp.len().to_string()),
                ("epochs", format!("{done}..{}", done + epochs)),
            ],
        );
        let records = model
            .fit(&mut opt, gp, done..done + epochs, rng::derive(seed, 2 * i as u64 + 1), |r| {
                log::event(
                    "train.epoch",
                    &[
                        ("model", kind.to_string()),
                        ("group", group.name.clone()),
                        ("epoch", r.epoch.to_string()),
                        ("train_loss", format!("{:.6}", r.train_loss)),
                        ("val_loss", format!("{:.6}", r.val_loss)),
                        ("gap", format!("{:.6}", r.gap())),
                    ],
                )
            })
            .map_err(|e| e.context(format!("{kind} group {}", group.name)))?;
        history.extend(records);
        model.save(&mut ckpt, &m_prefix)?;
        ckpt.put_optimizer(&opt_prefix, &opt, model.store())?;
        put_history(&mut ckpt, &hist_name, &history)?;
        histories.push((group.name.clone(), history));
    }
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out_path(format!("{kind}.ckpt"));
    ckpt.save(&path)?;
    files::write(&cfg.out_path(format!("{kind}_loss.csv")), &files::format_losses(&histories))?;
    log::event("train.done", &[("model", kind.to_string()), ("checkpoint", path.display().to_string())]);
    Ok(histories)
}

/// First forecast row: the last `horizon` rows are held out.
fn origin(gp: &SeriesPanel<f64>, horizon: usize, group: &str) -> Result<usize> {
    gp.len()
        .checked_sub(horizon)
        .filter(|&o| o > 0)
        .ok_or_else(|| Error::Parameter(format!("horizon {horizon} leaves no context in group {group} ({} rows)", gp.len())))
}

/// Samples every group's ensemble over the last `horizon` rows and writes
/// the ensemble, quantile and plot files.
pub fn forecast(cfg: &RunConfig) -> Result<Vec<GroupEnsemble>> {
    let kind = cfg.model;
    let panel = load_panel(cfg)?;
    let groups = groups(cfg, &panel)?;
    let ckpt = Checkpoint::load(&cfg.checkpoint_path())?;
    check_meta(&ckpt, kind, cfg.grouping_for(kind), groups.len())?;
    let seed = cfg.seed();
    let mut out = Vec::with_capacity(groups.len());
    for (i, (group, gp)) in groups.iter().enumerate() {
        let model = Model::load(kind, &ckpt, &format!("g{i}.m."))?;
        let origin = origin(gp, cfg.horizon, &group.name)?;
        let mut r = rng::seeded(rng::derive(seed, 1000 + i as u64));
        let ensemble = model
            .forecast(gp, origin, cfg.horizon, cfg.samples, &mut r)
            .map_err(|e| e.context(format!("{kind} group {}", group.name)))?;
        write_plots(cfg, &group.name, gp, origin, &ensemble)?;
        out.push(GroupEnsemble { group: group.name.clone(), columns: gp.columns().to_vec(), ensemble });
    }
    files::write(&cfg.out_path(format!("{kind}_ensemble.csv")), &files::format_ensembles(&out))?;
    files::write(&cfg.out_path(format!("{kind}_quantiles.csv")), &files::format_quantiles(&out)?)?;
    log::event(
        "forecast.done",
        &[("model", kind.to_string()), ("groups", out.len().to_string()), ("samples", cfg.samples.to_string())],
    );
    Ok(out)
}

fn write_plots(
    cfg: &RunConfig,
    group: &str,
    gp: &SeriesPanel<f64>,
    origin: usize,
    ens: &oilcast::eval::ForecastEnsemble<f64>,
) -> Result<()> {
    let pred = quantile_path(ens, cfg.quantile)?;
    let lo = quantile_path(ens, BAND.0)?;
    let hi = quantile_path(ens, BAND.1)?;
    for (d, col) in gp.columns().iter().enumerate() {
        let points: Vec<PlotPoint> = (0..ens.horizon())
            .map(|h| PlotPoint {
                date: oilcast::data::date_of(gp.timestamps()[origin + h]).to_string(),
                truth: gp.values().get(origin + h, d),
                prediction: pred.get(h, d),
                q_low: lo.get(h, d),
                q_high: hi.get(h, d),
            })
            .collect();
        let stem = format!("{}_{group}_{}_{}", cfg.model, col.site, col.channel);
        let title = format!("{} {} {} (q={:.2})", cfg.model, col.site, col.channel, cfg.quantile);
        files::write(&cfg.out_path("plots").join(format!("{stem}.csv")), &plot_csv(&points))?;
        files::write(&cfg.out_path("plots").join(format!("{stem}.svg")), &plot_svg(&title, &points))?;
    }
    Ok(())
}

/// Scores one group's ensemble: a fixed-quantile and a best-quantile row
/// per column. Moments are normalized by the column's train-span mean and
/// std.
pub fn score_group(model: &str, gp: &SeriesPanel<f64>, ge: &GroupEnsemble, quantile: f64) -> Result<Vec<MetricsRow>> {
    let ens = &ge.ensemble;
    if ge.columns != gp.columns() {
        return Err(Error::Contract(format!("ensemble columns of group {} do not match the panel", ge.group)));
    }
    let h = ens.horizon();
    let origin = gp.len().checked_sub(h).ok_or_else(|| {
        Error::Contract(format!("ensemble horizon {h} exceeds the {} rows of group {}", gp.len(), ge.group))
    })?;
    if !ens.timestamps.is_empty() && ens.timestamps[..] != gp.timestamps()[origin..] {
        return Err(Error::Contract(format!("ensemble dates of group {} are not the last {h} panel rows", ge.group)));
    }
    let split = gp.split_index();
    let mut rows = Vec::with_capacity(2 * gp.dim());
    for (d, col) in gp.columns().iter().enumerate() {
        let ens_d = ens.select_dim(d)?;
        let truth: Vec<f64> = (origin..gp.len()).map(|t| gp.values().get(t, d)).collect();
        let train = &gp.column(d)[..split];
        let (mu, sd) = mean_std(train);
        if sd <= 0.0 {
            return Err(Error::UndefinedMetric(format!("{}/{} is constant over the train span", col.site, col.channel)));
        }
        let norm: Vec<f64> = ens_d.samples().data().iter().map(|v| (v - mu) / sd).collect();
        let (ens_mean, ens_std) = mean_std(&norm);
        let (truth_mean, truth_std) = mean_std(&truth.iter().map(|v| (v - mu) / sd).collect::<Vec<_>>());
        let truth_t = Tensor::new(vec![h, 1], truth.clone())?;
        let (best_q, _) = best_quantile(&ens_d, &truth_t, train, Metric::Mase)?;
        for (selection, q) in [(Selection::Fixed, quantile), (Selection::Oracle, best_q)] {
            let path = quantile_path(&ens_d, q)?;
            rows.push(MetricsRow {
                model: model.to_string(),
                site: col.site.clone(),
                channel: col.channel.clone(),
                selection,
                quantile: q,
                mse: mse(path.data(), &truth)?,
                mase: mase(path.data(), &truth, train)?,
                ens_mean,
                ens_std,
                truth_mean,
                truth_std,
            });
        }
    }
    Ok(rows)
}

/// Scores `{model}_ensemble.csv` against the panel's held-out rows and
/// writes `{model}_metrics.csv` and `{model}_metrics.txt`.
pub fn evaluate(cfg: &RunConfig) -> Result<MetricsReport> {
    let kind = cfg.model;
    let panel = load_panel(cfg)?;
    let groups = groups(cfg, &panel)?;
    let ensembles = files::parse_ensembles(&fs::read_to_string(cfg.out_path(format!("{kind}_ensemble.csv")))?)?;
    let names: Vec<&str> = groups.iter().map(|(g, _)| g.name.as_str()).collect();
    let found: Vec<&str> = ensembles.iter().map(|g| g.group.as_str()).collect();
    if names != found {
        return Err(Error::Contract(format!("ensemble groups {found:?} do not match grouping groups {names:?}")));
    }
    let mut report = MetricsReport::default();
    for ((_, gp), ge) in groups.iter().zip(&ensembles) {
        report.rows.extend(score_group(&kind.to_string(), gp, ge, cfg.quantile)?);
    }
    files::write(&cfg.out_path(format!("{kind}_metrics.csv")), &report.to_csv())?;
    files::write(&cfg.out_path(format!("{kind}_metrics.txt")), &report.to_text())?;
    for r in &report.rows {
        log::event(
            "evaluate.row",
            &[
                ("model", r.model.clone()),
                ("site", r.site.clone()),
                ("channel", r.channel.clone()),
                ("selection", format!("{:?}", r.selection).to_lowercase()),
                ("quantile", format!("{:.2}", r.quantile)),
                ("mse", format!("{:.6}", r.mse)),
                ("mase", format!("{:.6}", r.mase)),
            ],
        );
    }
    Ok(report)
}

/// Generates data unless `--data` is given, then trains, forecasts and
/// evaluates every model; writes `metrics.csv` and `report.txt`.
pub fn pipeline(cfg: &RunConfig) -> Result<MetricsReport> {
    let mut cfg = cfg.clone();
    cfg.checkpoint = None;
    if cfg.data.is_none() {
        generate(&cfg)?;
        cfg.data = Some(cfg.out_path("data.csv"));
        cfg.synthetic_config = None;
    }
    let mut report = MetricsReport::default();
    for kind in ModelKind::ALL {
        let c = cfg.for_model(kind);
        train(&c)?;
        forecast(&c)?;
        report.rows.extend(evaluate(&c)?.rows);
    }
    files::write(&cfg.out_path("metrics.csv"), &report.to_csv())?;
    files::write(&cfg.out_path("report.txt"), &report.to_text())?;
    log::event("pipeline.done", &[("rows", report.rows.len().to_string())]);
    Ok(report)
}
