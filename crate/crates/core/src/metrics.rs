//! Confusion matrices, multiclass MCC, accuracy, rank aggregation and
//! experiment reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// `K×K` counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::dim(format!(
                "{} counts for a {classes}×{classes} matrix",
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::dim(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut m = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    /// Binary matrix with class 1 as positive.
    pub fn binary(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self {
            classes: 2,
            counts: vec![tn, fp, fn_, tp],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let k = self.classes;
        if truth >= k || predicted >= k {
            return Err(Error::Index(format!("pair ({truth}, {predicted}) outside {k} classes")));
        }
        self.counts[truth * k + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    /// Per-class true counts `t_k`.
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts
            .chunks(self.classes.max(1))
            .map(|r| r.iter().sum())
            .collect()
    }

    /// Per-class predicted counts `p_k`.
    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|p| (0..self.classes).map(|t| self.get(t, p)).sum())
            .collect()
    }
}

/// Multiclass Matthews correlation (the `R_K` statistic). A zero
/// denominator gives 0.
pub fn mcc(conf: &ConfusionMatrix) -> Result<f64> {
    if conf.classes() < 2 {
        return Err(Error::contract("MCC needs at least two classes"));
    }
    let s = conf.total() as f64;
    if s == 0.0 {
        return Err(Error::contract("MCC of an empty confusion matrix"));
    }
    let c = conf.trace() as f64;
    let t: Vec<f64> = conf.row_sums().iter().map(|&v| v as f64).collect();
    let p: Vec<f64> = conf.col_sums().iter().map(|&v| v as f64).collect();
    let pt: f64 = p.iter().zip(&t).map(|(p, t)| p * t).sum();
    let pp: f64 = p.iter().map(|v| v * v).sum();
    let tt: f64 = t.iter().map(|v| v * v).sum();
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(((c * s - pt) / denom).clamp(-1.0, 1.0))
}

pub fn accuracy(conf: &ConfusionMatrix) -> Result<f64> {
    let s = conf.total();
    if s == 0 {
        return Err(Error::contract("accuracy of an empty confusion matrix"));
    }
    Ok(conf.trace() as f64 / s as f64)
}

/// Datasets × methods grid of scores with optional spreads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub datasets: Vec<String>,
    pub methods: Vec<String>,
    scores: Vec<Option<f64>>,
    stds: Vec<Option<f64>>,
}

impl ScoreTable {
    pub fn new(datasets: Vec<String>, methods: Vec<String>) -> Self {
        let n = datasets.len() * methods.len();
        Self {
            datasets,
            methods,
            scores: vec![None; n],
            stds: vec![None; n],
        }
    }

    fn cell(&self, dataset: &str, method: &str) -> Result<usize> {
        let d = self.datasets.iter().position(|x| x == dataset);
        let m = self.methods.iter().position(|x| x == method);
        match (d, m) {
            (Some(d), Some(m)) => Ok(d * self.methods.len() + m),
            _ => Err(Error::Index(format!("no cell ({dataset}, {method})"))),
        }
    }

    pub fn set(&mut self, dataset: &str, method: &str, score: f64, std: Option<f64>) -> Result<()> {
        let i = self.cell(dataset, method)?;
        self.scores[i] = Some(score);
        self.stds[i] = std;
        Ok(())
    }

    pub fn get(&self, dataset: &str, method: &str) -> Option<f64> {
        self.cell(dataset, method).ok().and_then(|i| self.scores[i])
    }

    pub fn std(&self, dataset: &str, method: &str) -> Option<f64> {
        self.cell(dataset, method).ok().and_then(|i| self.stds[i])
    }

    /// Scores of one dataset, or an error naming the first empty cell.
    pub fn row(&self, d: usize) -> Result<Vec<f64>> {
        let m = self.methods.len();
        (0..m)
            .map(|j| {
                self.scores[d * m + j].ok_or_else(|| {
                    Error::Index(format!("missing score for ({}, {})", self.datasets[d], self.methods[j]))
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_rank: f64,
    pub mean_score: f64,
}

/// Descending ranks starting at 1; tied scores share the mean of their
/// positions.
pub fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // positions i+1..=j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = avg;
        }
        i = j;
    }
    ranks
}

/// Mean rank and mean score per method, in column order.
pub fn rank_methods(table: &ScoreTable) -> Result<Vec<MethodSummary>> {
    let (n, m) = (table.datasets.len(), table.methods.len());
    if n == 0 {
        return Err(Error::contract("rank aggregation over zero datasets"));
    }
    let mut rank_sum = vec![0.0; m];
    let mut score_sum = vec![0.0; m];
    for d in 0..n {
        let row = table.row(d)?;
        for (j, r) in average_ranks(&row).into_iter().enumerate() {
            rank_sum[j] += r;
            score_sum[j] += row[j];
        }
    }
    Ok(table
        .methods
        .iter()
        .enumerate()
        .map(|(j, method)| MethodSummary {
            method: method.clone(),
            mean_rank: rank_sum[j] / n as f64,
            mean_score: score_sum[j] / n as f64,
        })
        .collect())
}

/// Hex SHA-256 of the compact JSON form of `config`, first 16 digits.
pub fn config_hash<T: Serialize + ?Sized>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))[..16].to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    pub split_id: u64,
    pub mcc: f64,
    pub accuracy: f64,
    pub wall_seconds: f64,
    pub config_hash: String,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "dataset",
    "method",
    "seed",
    "split_id",
    "mcc",
    "accuracy",
    "wall_seconds",
    "config_hash",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    pub fn emit(&self, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
        match format {
            ReportFormat::Csv => self.write_csv(path),
            ReportFormat::Json => self.write_json(path),
        }
    }

    /// One header row plus one row per entry; floats in shortest
    /// round-trip form.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(REPORT_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.dataset.clone(),
                r.method.clone(),
                r.seed.to_string(),
                r.split_id.to_string(),
                r.mcc.to_string(),
                r.accuracy.to_string(),
                r.wall_seconds.to_string(),
                r.config_hash.clone(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Mean and population std of MCC (in percent) per (dataset, method).
    pub fn score_table(&self) -> ScoreTable {
        let mut datasets: Vec<String> = Vec::new();
        let mut methods: Vec<String> = Vec::new();
        let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            if !datasets.contains(&r.dataset) {
                datasets.push(r.dataset.clone());
            }
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
            cells
                .entry((r.dataset.clone(), r.method.clone()))
                .or_default()
                .push(100.0 * r.mcc);
        }
        let mut table = ScoreTable::new(datasets, methods);
        for ((d, m), v) in cells {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            table.set(&d, &m, mean, Some(var.sqrt())).expect("cell exists");
        }
        table
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_worked_example() {
        let m = ConfusionMatrix::binary(3, 1, 2, 4);
        assert!((mcc(&m).unwrap() - 10.0 / 600f64.sqrt()).abs() < 1e-12);
        assert!((accuracy(&m).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_degenerate() {
        let m = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 2, 0, 0, 0, 5]).unwrap();
        assert_eq!(mcc(&m).unwrap(), 1.0);
        assert_eq!(accuracy(&m).unwrap(), 1.0);
        let constant = ConfusionMatrix::from_predictions(2, &[0, 1, 1], &[1, 1, 1]).unwrap();
        assert_eq!(mcc(&constant).unwrap(), 0.0);
        let wrong = ConfusionMatrix::binary(0, 3, 2, 0);
        assert_eq!(accuracy(&wrong).unwrap(), 0.0);
    }

    #[test]
    fn empty_matrix_is_contract_error() {
        assert!(matches!(mcc(&ConfusionMatrix::new(2)), Err(Error::Contract(_))));
        assert!(matches!(mcc(&ConfusionMatrix::new(1)), Err(Error::Contract(_))));
    }

    #[test]
    fn tie_ranks_average() {
        assert_eq!(average_ranks(&[0.9, 0.8, 0.8]), vec![1.0, 2.5, 2.5]);
        assert_eq!(average_ranks(&[0.1, 0.3, 0.2]), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn missing_cell_named() {
        let mut t = ScoreTable::new(vec!["d".into()], vec!["a".into(), "b".into()]);
        t.set("d", "a", 1.0, None).unwrap();
        let err = rank_methods(&t).unwrap_err().to_string();
        assert!(err.contains("(d, b)"), "{err}");
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&serde_json::json!({"lr": 0.001}));
        assert_eq!(a, config_hash(&serde_json::json!({"lr": 0.001})));
        assert_ne!(a, config_hash(&serde_json::json!({"lr": 0.002})));
        assert_eq!(a.len(), 16);
    }
}
