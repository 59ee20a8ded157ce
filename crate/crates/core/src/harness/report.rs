use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::protocol::SUMMARY_MIN_CYCLE;
use crate::error::{Error, Result};

/// One row of the records CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub experiment: String,
    pub alpha: f64,
    pub sigma_noise: f64,
    pub location_mode: String,
    pub cycle: Option<usize>,
    pub time_index: usize,
    pub variable: String,
    pub rmse_background: f64,
    pub rmse_analysis: f64,
    pub rmse_freerun: Option<f64>,
    pub wall_ms: f64,
}

pub const RECORD_HEADER: &str =
    "experiment,alpha,sigma_noise,location_mode,cycle,time_index,variable,rmse_background,rmse_analysis,rmse_freerun,wall_ms";

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_records(records: &[Record], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(RECORD_HEADER.split(',')).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != RECORD_HEADER {
        return Err(Error::Format(format!(
            "{}: unexpected header `{}`",
            path.display(),
            header.join(",")
        )));
    }
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Means over one `(experiment, alpha, sigma_noise, location_mode, variable)`
/// group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryGroup {
    pub experiment: String,
    pub alpha: f64,
    pub sigma_noise: f64,
    pub location_mode: String,
    pub variable: String,
    pub count: usize,
    pub mean_rmse_background: f64,
    pub mean_rmse_analysis: f64,
    pub mean_rmse_freerun: Option<f64>,
    pub mean_wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub empty: bool,
    /// Cycling records before this cycle index are excluded.
    pub min_cycle: usize,
    pub groups: Vec<SummaryGroup>,
    /// Cycling runs that stopped before their last cycle.
    #[serde(default)]
    pub aborted: Vec<AbortNote>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortNote {
    pub seed: u64,
    pub location_mode: String,
    pub cycle: usize,
    pub message: String,
}

pub fn summarize(records: &[Record]) -> Summary {
    type Key = (String, u64, u64, String, String);
    #[derive(Default)]
    struct Acc {
        n: usize,
        b: f64,
        a: f64,
        f: f64,
        nf: usize,
        ms: f64,
    }
    let mut groups: BTreeMap<Key, (Acc, f64, f64)> = BTreeMap::new();
    for r in records {
        if r.cycle.is_some_and(|c| c < SUMMARY_MIN_CYCLE) {
            continue;
        }
        let key = (
            r.experiment.clone(),
            r.alpha.to_bits(),
            r.sigma_noise.to_bits(),
            r.location_mode.clone(),
            r.variable.clone(),
        );
        let (acc, _, _) = groups
            .entry(key)
            .or_insert_with(|| (Acc::default(), r.alpha, r.sigma_noise));
        acc.n += 1;
        acc.b += r.rmse_background;
        acc.a += r.rmse_analysis;
        acc.ms += r.wall_ms;
        if let Some(f) = r.rmse_freerun {
            acc.f += f;
            acc.nf += 1;
        }
    }
    let groups: Vec<SummaryGroup> = groups
        .into_iter()
        .map(
            |((experiment, _, _, location_mode, variable), (acc, alpha, sigma_noise))| {
                let n = acc.n as f64;
                SummaryGroup {
                    experiment,
                    alpha,
                    sigma_noise,
                    location_mode,
                    variable,
                    count: acc.n,
                    mean_rmse_background: acc.b / n,
                    mean_rmse_analysis: acc.a / n,
                    mean_rmse_freerun: (acc.nf > 0).then(|| acc.f / acc.nf as f64),
                    mean_wall_ms: acc.ms / n,
                }
            },
        )
        .collect();
    Summary {
        empty: groups.is_empty(),
        min_cycle: SUMMARY_MIN_CYCLE,
        groups,
        aborted: Vec::new(),
    }
}

pub fn summary_json(summary: &Summary) -> Result<String> {
    serde_json::to_string_pretty(summary).map_err(|e| Error::Format(e.to_string()))
}

/// Writes `<stem>.csv` and `<stem>.summary.json` next to each other.
pub fn write_report(records: &[Record], csv_path: &Path, aborted: &[AbortNote]) -> Result<Summary> {
    write_records(records, csv_path)?;
    let mut summary = summarize(records);
    summary.aborted = aborted.to_vec();
    let json_path = csv_path.with_extension("summary.json");
    let text = summary_json(&summary)?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(summary)
}
