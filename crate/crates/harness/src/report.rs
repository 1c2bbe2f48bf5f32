//! Metrics report: per-seed records plus mean/std and suite-average rows,
//! written as CSV and JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 12] = [
    "method",
    "setting",
    "corruption",
    "severity",
    "seed",
    "n",
    "accuracy",
    "accuracy_std",
    "aux_before",
    "aux_after",
    "aux_descent_frac",
    "wall_time_s",
];

/// Corruption label of the suite-average rows.
pub const AVERAGE: &str = "average";
/// Seed label of rows aggregated over seeds.
pub const MEAN: &str = "mean";

/// One evaluation of one method on one corruption with one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub method: String,
    /// Sweep setting such as `T=20` or `bs=8`; `default` for plain eval.
    pub setting: String,
    pub corruption: String,
    pub severity: u8,
    pub seed: u64,
    pub n: usize,
    /// Percent in [0, 100].
    pub accuracy: f64,
    pub aux_before: Option<f64>,
    pub aux_after: Option<f64>,
    pub aux_descent_frac: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub method: String,
    pub setting: String,
    pub corruption: String,
    pub severity: u8,
    pub seed: String,
    pub n: usize,
    pub accuracy: f64,
    /// Sample standard deviation over seeds; only on `mean` rows with more
    /// than one seed.
    pub accuracy_std: Option<f64>,
    pub aux_before: Option<f64>,
    pub aux_after: Option<f64>,
    pub aux_descent_frac: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub config_hash: String,
    pub records: Vec<Record>,
    pub rows: Vec<Row>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; `None` below two values.
pub fn sample_std(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

fn opt_mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = v.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

/// First-seen order of distinct keys.
fn distinct<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

fn aggregate(group: &[&Record], corruption: &str, seed: String) -> Row {
    let first = group[0];
    Row {
        method: first.method.clone(),
        setting: first.setting.clone(),
        corruption: corruption.to_string(),
        severity: first.severity,
        seed,
        n: group.iter().map(|r| r.n).sum(),
        accuracy: mean(&group.iter().map(|r| r.accuracy).collect::<Vec<_>>()),
        accuracy_std: None,
        aux_before: opt_mean(group.iter().map(|r| r.aux_before)),
        aux_after: opt_mean(group.iter().map(|r| r.aux_after)),
        aux_descent_frac: opt_mean(group.iter().map(|r| r.aux_descent_frac)),
        wall_time_s: group.iter().map(|r| r.wall_time_s).sum(),
    }
}

impl Report {
    pub fn new(config_hash: &str, records: Vec<Record>) -> Self {
        let rows = Self::build_rows(&records);
        Self {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
            records,
            rows,
        }
    }

    /// For each (method, setting): per-seed rows and a mean row per
    /// corruption, then the same for the average over corruptions.
    fn build_rows(records: &[Record]) -> Vec<Row> {
        let mut rows = Vec::new();
        let groups = distinct(
            records
                .iter()
                .map(|r| (r.method.clone(), r.setting.clone())),
        );
        for (method, setting) in groups {
            let recs: Vec<&Record> = records
                .iter()
                .filter(|r| r.method == method && r.setting == setting)
                .collect();
            let seeds = distinct(recs.iter().map(|r| r.seed));
            let corruptions = distinct(recs.iter().map(|r| r.corruption.clone()));
            let mut per_seed_avg: Vec<Row> = Vec::new();
            for c in &corruptions {
                let of_c: Vec<&Record> = recs
                    .iter()
                    .copied()
                    .filter(|r| &r.corruption == c)
                    .collect();
                for r in &of_c {
                    rows.push(aggregate(&[r], c, r.seed.to_string()));
                }
                rows.push(mean_row(&of_c, c));
            }
            for &s in &seeds {
                let of_s: Vec<&Record> = recs.iter().copied().filter(|r| r.seed == s).collect();
                per_seed_avg.push(aggregate(&of_s, AVERAGE, s.to_string()));
            }
            rows.extend(per_seed_avg.iter().cloned());
            let accs: Vec<f64> = per_seed_avg.iter().map(|r| r.accuracy).collect();
            let mut m = aggregate(&recs, AVERAGE, MEAN.into());
            m.accuracy = mean(&accs);
            m.accuracy_std = sample_std(&accs);
            rows.push(m);
        }
        rows
    }

    /// Seed-mean accuracy of a (method, setting, corruption) cell.
    pub fn mean_accuracy(&self, method: &str, setting: &str, corruption: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.method == method
                    && r.setting == setting
                    && r.corruption == corruption
                    && r.seed == MEAN
            })
            .map(|r| r.accuracy)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| HarnessError::Config(format!("csv: {e}"));
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.setting.clone(),
                r.corruption.clone(),
                r.severity.to_string(),
                r.seed.clone(),
                r.n.to_string(),
                format!("{:.4}", r.accuracy),
                f(r.accuracy_std),
                f(r.aux_before),
                f(r.aux_after),
                f(r.aux_descent_frac),
                format!("{:.3}", r.wall_time_s),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `{stem}.csv` and `{stem}.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| HarnessError::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, self.to_json()).map_err(|e| HarnessError::io(&json_path, e))?;
        Ok(())
    }
}

fn mean_row(group: &[&Record], corruption: &str) -> Row {
    let accs: Vec<f64> = group.iter().map(|r| r.accuracy).collect();
    let mut m = aggregate(group, corruption, MEAN.into());
    m.accuracy_std = sample_std(&accs);
    m
}

/// JSON value with every `wall_time_s` field removed.
pub fn strip_timing(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.remove("wall_time_s");
            m.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_timing),
        _ => {}
    }
}
