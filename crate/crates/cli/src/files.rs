//! Text formats written under the output directory.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use oilcast::data::{date_of, epoch_day, ColumnKey};
use oilcast::eval::{quantile_grid, quantile_path, ForecastEnsemble};
use oilcast::timegrad::EpochRecord;
use oilcast::{Error, Result, Tensor};

/// A group's ensemble with the panel columns of its dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupEnsemble {
    pub group: String,
    pub columns: Vec<ColumnKey>,
    pub ensemble: ForecastEnsemble<f64>,
}

const ENSEMBLE_HEADER: &str = "group,sample,step,date,site,channel,value";

/// Every sample value, one line each, with round-trip float formatting.
pub fn format_ensembles(groups: &[GroupEnsemble]) -> String {
    let mut out = String::from(ENSEMBLE_HEADER);
    out.push('\n');
    for g in groups {
        let ens = &g.ensemble;
        for s in 0..ens.n_samples() {
            for h in 0..ens.horizon() {
                let date = ens.timestamps.get(h).map(|&t| date_of(t).to_string()).unwrap_or_default();
                for (d, c) in g.columns.iter().enumerate() {
                    let _ = writeln!(out, "{},{s},{h},{date},{},{},{:?}", g.group, c.site, c.channel, ens.value(s, h, d));
                }
            }
        }
    }
    out
}

pub fn parse_ensembles(text: &str) -> Result<Vec<GroupEnsemble>> {
    struct Acc {
        columns: Vec<ColumnKey>,
        cells: Vec<(usize, usize, usize, f64)>,
        dates: HashMap<usize, i64>,
    }
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, h)| h) != Some(ENSEMBLE_HEADER) {
        return Err(Error::Format { line: 1, msg: format!("expected header {ENSEMBLE_HEADER}") });
    }
    let mut order: Vec<String> = Vec::new();
    let mut accs: HashMap<String, Acc> = HashMap::new();
    for (i, line) in lines {
        let err = |msg: &str| Error::Format { line: i + 1, msg: msg.to_string() };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(err("expected 7 fields"));
        }
        let s: usize = f[1].parse().map_err(|_| err("bad sample index"))?;
        let h: usize = f[2].parse().map_err(|_| err("bad step index"))?;
        let v: f64 = f[6].parse().map_err(|_| err("bad value"))?;
        let acc = accs.entry(f[0].to_string()).or_insert_with(|| {
            order.push(f[0].to_string());
            Acc { columns: Vec::new(), cells: Vec::new(), dates: HashMap::new() }
        });
        let key = ColumnKey::new(f[4], f[5]);
        let d = match acc.columns.iter().position(|c| *c == key) {
            Some(d) => d,
            None => {
                acc.columns.push(key);
                acc.columns.len() - 1
            }
        };
        if !f[3].is_empty() {
            let date = chrono::NaiveDate::parse_from_str(f[3], "%Y-%m-%d").map_err(|_| err("bad date"))?;
            acc.dates.insert(h, epoch_day(date));
        }
        acc.cells.push((s, h, d, v));
    }
    let mut out = Vec::with_capacity(order.len());
    for name in order {
        let acc = accs.remove(&name).expect("group recorded");
        let n_s = acc.cells.iter().map(|c| c.0).max().map_or(0, |m| m + 1);
        let n_h = acc.cells.iter().map(|c| c.1).max().map_or(0, |m| m + 1);
        let n_d = acc.columns.len();
        if acc.cells.len() != n_s * n_h * n_d {
            return Err(Error::Contract(format!("ensemble for group {name} is not a full {n_s}×{n_h}×{n_d} grid")));
        }
        let mut data = vec![f64::NAN; n_s * n_h * n_d];
        for (s, h, d, v) in acc.cells {
            data[(s * n_h + h) * n_d + d] = v;
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::Contract(format!("ensemble for group {name} has missing cells")));
        }
        let timestamps = if acc.dates.len() == n_h { (0..n_h).map(|h| acc.dates[&h]).collect() } else { Vec::new() };
        let mut ensemble = ForecastEnsemble::new(Tensor::new(vec![n_s, n_h, n_d], data)?)?.with_timestamps(timestamps)?;
        ensemble.denormalized = true;
        out.push(GroupEnsemble { group: name, columns: acc.columns, ensemble });
    }
    Ok(out)
}

/// Per-step nearest-rank quantiles over the scanned grid.
pub fn format_quantiles(groups: &[GroupEnsemble]) -> Result<String> {
    let grid = quantile_grid();
    let mut out = String::from("group,date,site,channel");
    for q in &grid {
        let _ = write!(out, ",q{q:.2}");
    }
    out.push('\n');
    for g in groups {
        let paths = grid.iter().map(|&q| quantile_path(&g.ensemble, q)).collect::<Result<Vec<_>>>()?;
        for h in 0..g.ensemble.horizon() {
            let date = g.ensemble.timestamps.get(h).map(|&t| date_of(t).to_string()).unwrap_or_default();
            for (d, c) in g.columns.iter().enumerate() {
                let _ = write!(out, "{},{date},{},{}", g.group, c.site, c.channel);
                for p in &paths {
                    let _ = write!(out, ",{:.6}", p.get(h, d));
                }
                out.push('\n');
            }
        }
    }
    Ok(out)
}

const LOSS_HEADER: &str = "group,epoch,train_loss,val_loss,gap";

pub fn format_losses(histories: &[(String, Vec<EpochRecord>)]) -> String {
    let mut out = String::from(LOSS_HEADER);
    out.push('\n');
    for (group, history) in histories {
        for r in history {
            let _ = writeln!(out, "{group},{},{:?},{:?},{:?}", r.epoch, r.train_loss, r.val_loss, r.gap());
        }
    }
    out
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}
