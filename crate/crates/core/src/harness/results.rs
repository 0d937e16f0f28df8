//! Result tables, aggregation and report files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stats::confidence_interval;
use super::ExperimentKind;
use crate::error::{Error, Result};

/// Version of the result-table columns.
pub const CSV_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 13] = [
    "version",
    "experiment",
    "model_seed",
    "layer",
    "scope",
    "probe_role",
    "alpha",
    "k",
    "condition",
    "trial",
    "metric",
    "value",
    "status",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

/// One measurement. Failed cells keep their row with `value = NaN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub version: u32,
    pub experiment: ExperimentKind,
    pub model_seed: u64,
    pub layer: usize,
    pub scope: String,
    pub probe_role: String,
    pub alpha: f64,
    pub k: usize,
    pub condition: String,
    pub trial: usize,
    pub metric: String,
    pub value: f64,
    pub status: Status,
}

impl ResultRow {
    fn cell_key(&self) -> CellKey {
        CellKey {
            experiment: self.experiment.as_str().to_string(),
            model_seed: self.model_seed,
            layer: self.layer,
            scope: self.scope.clone(),
            probe_role: self.probe_role.clone(),
            alpha_bits: self.alpha.to_bits(),
            k: self.k,
            condition: self.condition.clone(),
            metric: self.metric.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct CellKey {
    experiment: String,
    model_seed: u64,
    layer: usize,
    scope: String,
    probe_role: String,
    alpha_bits: u64,
    k: usize,
    condition: String,
    metric: String,
}

/// Per-cell summary over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub experiment: ExperimentKind,
    pub model_seed: u64,
    pub layer: usize,
    pub scope: String,
    pub probe_role: String,
    pub alpha: f64,
    pub k: usize,
    pub condition: String,
    pub metric: String,
    pub trials: usize,
    pub failed: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
}

impl ExperimentResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        for row in &self.rows {
            writer.serialize(row)?;
        }
        if self.rows.is_empty() {
            writer.write_record(CSV_COLUMNS)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers()?.clone();
        if headers.iter().ne(CSV_COLUMNS.iter().copied()) {
            return Err(Error::Format(format!("unexpected result columns: {headers:?}")));
        }
        let mut rows = Vec::new();
        for row in reader.deserialize() {
            let row: ResultRow = row?;
            if row.version != CSV_VERSION {
                return Err(Error::Format(format!("unsupported result version {}", row.version)));
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    /// Rows matching every given filter.
    pub fn select<'a>(&'a self, filter: &'a RowFilter) -> impl Iterator<Item = &'a ResultRow> + 'a {
        self.rows.iter().filter(move |r| filter.matches(r))
    }

    /// Mean over successful trials of the matching rows.
    pub fn mean(&self, filter: &RowFilter) -> Option<f64> {
        let values: Vec<f64> = self
            .select(filter)
            .filter(|r| r.status == Status::Ok)
            .map(|r| r.value)
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }

    /// Groups rows by cell (everything but the trial). Cells with fewer than
    /// two successful trials get a degenerate interval at the mean.
    pub fn aggregate(&self) -> Vec<Aggregate> {
        let mut groups: BTreeMap<CellKey, Vec<&ResultRow>> = BTreeMap::new();
        for row in &self.rows {
            groups.entry(row.cell_key()).or_default().push(row);
        }
        groups
            .into_values()
            .map(|rows| {
                let first = rows[0];
                let ok: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.status == Status::Ok)
                    .map(|r| r.value)
                    .collect();
                let (mean, ci_low, ci_high) = match confidence_interval(&ok) {
                    Ok(ci) => (ci.mean, ci.lo, ci.hi),
                    Err(_) if ok.len() == 1 => (ok[0], ok[0], ok[0]),
                    Err(_) => (f64::NAN, f64::NAN, f64::NAN),
                };
                Aggregate {
                    experiment: first.experiment,
                    model_seed: first.model_seed,
                    layer: first.layer,
                    scope: first.scope.clone(),
                    probe_role: first.probe_role.clone(),
                    alpha: first.alpha,
                    k: first.k,
                    condition: first.condition.clone(),
                    metric: first.metric.clone(),
                    trials: rows.len(),
                    failed: rows.len() - ok.len(),
                    mean,
                    ci_low,
                    ci_high,
                }
            })
            .collect()
    }

    /// Writes `summary.json` and one `figure-<experiment>.csv` per experiment
    /// present in the table.
    pub fn write_report(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let aggregates = self.aggregate();
        let mut written = Vec::new();
        let summary = dir.join("summary.json");
        std::fs::write(&summary, serde_json::to_string_pretty(&aggregates)?)?;
        written.push(summary);
        let mut by_kind: BTreeMap<&'static str, Vec<&Aggregate>> = BTreeMap::new();
        for a in &aggregates {
            by_kind.entry(a.experiment.as_str()).or_default().push(a);
        }
        for (kind, rows) in by_kind {
            let path = dir.join(format!("figure-{kind}.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            for row in rows {
                w.serialize(row)?;
            }
            w.flush()?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Optional equality filters over result rows.
#[derive(Debug, Clone, Default)]
pub struct RowFilter {
    pub experiment: Option<ExperimentKind>,
    pub model_seed: Option<u64>,
    pub layer: Option<usize>,
    pub scope: Option<String>,
    pub probe_role: Option<String>,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub condition: Option<String>,
    pub metric: Option<String>,
}

impl RowFilter {
    pub fn metric(metric: &str) -> Self {
        Self {
            metric: Some(metric.to_string()),
            ..Default::default()
        }
    }

    pub fn layer(mut self, layer: usize) -> Self {
        self.layer = Some(layer);
        self
    }

    pub fn scope(mut self, scope: &str) -> Self {
        self.scope = Some(scope.to_string());
        self
    }

    pub fn probe_role(mut self, role: &str) -> Self {
        self.probe_role = Some(role.to_string());
        self
    }

    pub fn alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn condition(mut self, condition: &str) -> Self {
        self.condition = Some(condition.to_string());
        self
    }

    pub fn model_seed(mut self, seed: u64) -> Self {
        self.model_seed = Some(seed);
        self
    }

    pub fn experiment(mut self, kind: ExperimentKind) -> Self {
        self.experiment = Some(kind);
        self
    }

    pub fn matches(&self, r: &ResultRow) -> bool {
        self.experiment.is_none_or(|e| r.experiment == e)
            && self.model_seed.is_none_or(|s| r.model_seed == s)
            && self.layer.is_none_or(|l| r.layer == l)
            && self.scope.as_ref().is_none_or(|s| &r.scope == s)
            && self.probe_role.as_ref().is_none_or(|p| &r.probe_role == p)
            && self.alpha.is_none_or(|a| r.alpha == a)
            && self.k.is_none_or(|k| r.k == k)
            && self.condition.as_ref().is_none_or(|c| &r.condition == c)
            && self.metric.as_ref().is_none_or(|m| &r.metric == m)
    }
}
