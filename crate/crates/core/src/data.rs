//! Tabular ingestion, preprocessing, train/valid/test splitting,
//! oversampling and few-shot subsampling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Token standing in for a missing categorical cell.
pub const MISSING_TOKEN: &str = "<missing>";

/// Standard-deviation floor for numeric columns.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Cat(String),
    Missing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    /// Present in the file but dropped on load.
    Ignore,
}

/// Feature grid, labels and column kinds.
///
/// Reads of features or labels through [`TabularDataset::rows`] and
/// [`TabularDataset::labels`] bump a counter shared by every clone, which
/// lets a pipeline prove a partition was never consulted.
#[derive(Clone, Debug)]
pub struct TabularDataset {
    pub name: String,
    pub columns: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    pub class_names: Vec<String>,
    rows: Vec<Vec<Cell>>,
    labels: Vec<usize>,
    reads: Arc<AtomicUsize>,
}

impl TabularDataset {
    pub fn new(
        name: impl Into<String>,
        columns: Vec<String>,
        kinds: Vec<ColumnKind>,
        rows: Vec<Vec<Cell>>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let name = name.into();
        if columns.len() != kinds.len() {
            return Err(Error::dim(format!(
                "{} column names for {} kinds",
                columns.len(),
                kinds.len()
            )));
        }
        if rows.len() != labels.len() {
            return Err(Error::dim(format!("{} rows but {} labels", rows.len(), labels.len())));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != columns.len()) {
            return Err(Error::dim(format!(
                "row {i} has {} cells, expected {}",
                rows[i].len(),
                columns.len()
            )));
        }
        let k = class_names.len();
        if let Some(i) = labels.iter().position(|&l| l >= k) {
            return Err(Error::Index(format!("label {} at row {i} outside [0, {k})", labels[i])));
        }
        Ok(Self {
            name,
            columns,
            kinds,
            class_names,
            rows,
            labels,
            reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// All-numeric dataset with classes named `"0"`, `"1"`, ….
    pub fn numeric(
        name: impl Into<String>,
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let m = features.first().map_or(0, Vec::len);
        let rows = features
            .into_iter()
            .map(|r| r.into_iter().map(Cell::Num).collect())
            .collect();
        Self::new(
            name,
            (0..m).map(|j| format!("x{j}")).collect(),
            vec![ColumnKind::Numeric; m],
            rows,
            labels,
            (0..classes).map(|c| c.to_string()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn raw_width(&self) -> usize {
        self.columns.len()
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.rows
    }

    pub fn labels(&self) -> &[usize] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.labels
    }

    /// Number of feature or label reads so far, across all clones.
    pub fn access_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count()];
        for &l in self.labels() {
            counts[l] += 1;
        }
        counts
    }

    /// New dataset (with its own access counter) holding `indices` in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            columns: self.columns.clone(),
            kinds: self.kinds.clone(),
            class_names: self.class_names.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            reads: Arc::new(AtomicUsize::new(0)),
        }
    }

    fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.class_count()];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    fn same_schema(&self, other: &Self) -> bool {
        self.columns == other.columns && self.kinds == other.kinds && self.class_names == other.class_names
    }
}

/// Concatenates two parts of one dataset (e.g. train and valid into the
/// final training set).
pub fn merge(a: &TabularDataset, b: &TabularDataset) -> Result<TabularDataset> {
    if !a.same_schema(b) {
        return Err(Error::contract("merge of datasets with different schemas"));
    }
    let mut out = a.subset(&(0..a.len()).collect::<Vec<_>>());
    out.rows.extend(b.rows.iter().cloned());
    out.labels.extend_from_slice(&b.labels);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

/// CSV sidecar: column kinds and the label column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(default)]
    pub name: Option<String>,
    pub label: String,
    #[serde(default = "default_true")]
    pub header: bool,
    /// Feature columns. With a header they are matched by name; without
    /// one, by position, the label sitting last unless it is listed here.
    pub columns: Vec<ColumnSpec>,
}

fn default_true() -> bool {
    true
}

impl Schema {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn parse_cell(raw: &str, kind: ColumnKind) -> std::result::Result<Cell, String> {
    let t = raw.trim();
    if t.is_empty() || t == "?" {
        return Ok(Cell::Missing);
    }
    match kind {
        ColumnKind::Numeric => t
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Cell::Num)
            .ok_or_else(|| format!("cannot parse {t:?} as a number")),
        _ => Ok(Cell::Cat(t.to_string())),
    }
}

/// Reads a comma-separated file (RFC 4180 quoting) according to `schema`.
/// `"?"` and empty cells are missing values.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<TabularDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = schema.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
    });
    parse_csv(&text, schema, &name, &path.display().to_string())
}

/// [`load_csv`] over in-memory text; `origin` labels error messages.
pub fn parse_csv(text: &str, schema: &Schema, name: &str, origin: &str) -> Result<TabularDataset> {
    let data_err = |message: String| Error::Data {
        path: origin.to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| data_err(format!("record {}: {e}", i + 1)))?;
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(data_err("file is empty".into()));
    }

    // Resolve file positions of label and feature columns.
    let (header, body) = if schema.header {
        let h: Vec<String> = records[0].iter().map(|s| s.trim().to_string()).collect();
        (Some(h), &records[1..])
    } else {
        (None, &records[..])
    };
    let width = header.as_ref().map_or(records[0].len(), Vec::len);
    let position = |col: &str, fallback: usize| -> Result<usize> {
        match &header {
            Some(h) => h
                .iter()
                .position(|c| c == col)
                .ok_or_else(|| data_err(format!("line 1: missing column `{col}`"))),
            None => Ok(fallback),
        }
    };
    // Without a header the label sits at the end unless it is also listed
    // among the columns.
    let label_pos = match &header {
        Some(_) => position(&schema.label, 0)?,
        None => schema
            .columns
            .iter()
            .position(|c| c.name == schema.label)
            .unwrap_or(width - 1),
    };
    let mut features = Vec::new();
    let mut next_free = 0;
    for spec in &schema.columns {
        if spec.name == schema.label {
            continue;
        }
        if header.is_none() && next_free == label_pos {
            next_free += 1;
        }
        let pos = position(&spec.name, next_free)?;
        next_free += 1;
        if pos >= width {
            return Err(data_err(format!(
                "column `{}` at position {pos} but rows have {width} fields",
                spec.name
            )));
        }
        if spec.kind != ColumnKind::Ignore {
            features.push((pos, spec.clone()));
        }
    }

    let first_line = usize::from(schema.header) + 1;
    let mut rows = Vec::with_capacity(body.len());
    let mut label_tokens = Vec::with_capacity(body.len());
    for (i, rec) in body.iter().enumerate() {
        let line = first_line + i;
        if rec.len() != width {
            return Err(data_err(format!(
                "line {line}: ragged row with {} fields, expected {width}",
                rec.len()
            )));
        }
        let label = rec[label_pos].trim();
        if label.is_empty() || label == "?" {
            return Err(data_err(format!("line {line}: missing label")));
        }
        label_tokens.push(label.to_string());
        let row = features
            .iter()
            .map(|(pos, spec)| {
                parse_cell(&rec[*pos], spec.kind)
                    .map_err(|m| data_err(format!("line {line}, column `{}`: {m}", spec.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(data_err("no data rows".into()));
    }

    let mut classes: Vec<String> = label_tokens
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.iter().all(|c| c.parse::<f64>().is_ok()) {
        classes.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    let class_index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let labels = label_tokens.iter().map(|t| class_index[t.as_str()]).collect();
    TabularDataset::new(
        name,
        features.iter().map(|(_, s)| s.name.clone()).collect(),
        features.iter().map(|(_, s)| s.kind).collect(),
        rows,
        labels,
        classes,
    )
}

#[derive(Clone, Debug, PartialEq)]
enum ColumnTransform {
    Numeric { median: f64, mean: f64, std: f64 },
    Categorical { vocab: Vec<String> },
}

/// Standardizes numeric columns and one-hot encodes categorical ones using
/// statistics of the data it was fitted on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Preprocessor {
    columns: Option<Vec<ColumnTransform>>,
}

/// Model-ready features and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn width(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let m = self.width();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            data.extend_from_slice(self.x.row(i));
        }
        Self {
            x: Tensor::matrix(indices.len(), m, data).expect("shape"),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        }
    }
}

impl Preprocessor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_fitted(&self) -> bool {
        self.columns.is_some()
    }

    pub fn fit(&mut self, train: &TabularDataset) -> Result<()> {
        let rows = train.rows();
        if rows.is_empty() {
            return Err(Error::contract("cannot fit a preprocessor on zero rows"));
        }
        let columns = train
            .kinds
            .iter()
            .enumerate()
            .map(|(j, kind)| match kind {
                ColumnKind::Numeric => {
                    let mut observed: Vec<f64> = rows
                        .iter()
                        .filter_map(|r| match r[j] {
                            Cell::Num(v) => Some(v),
                            _ => None,
                        })
                        .collect();
                    let median = median(&mut observed);
                    let filled: Vec<f64> = rows
                        .iter()
                        .map(|r| match r[j] {
                            Cell::Num(v) => v,
                            _ => median,
                        })
                        .collect();
                    let n = filled.len() as f64;
                    let mean = filled.iter().sum::<f64>() / n;
                    let var = filled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    ColumnTransform::Numeric {
                        median,
                        mean,
                        std: var.sqrt().max(STD_FLOOR),
                    }
                }
                _ => {
                    let vocab: BTreeSet<String> = rows.iter().map(|r| category_token(&r[j])).collect();
                    ColumnTransform::Categorical {
                        vocab: vocab.into_iter().collect(),
                    }
                }
            })
            .collect();
        self.columns = Some(columns);
        Ok(())
    }

    /// Encoded width `M`.
    pub fn output_dim(&self) -> Result<usize> {
        let cols = self.fitted()?;
        Ok(cols
            .iter()
            .map(|c| match c {
                ColumnTransform::Numeric { .. } => 1,
                ColumnTransform::Categorical { vocab } => vocab.len(),
            })
            .sum())
    }

    fn fitted(&self) -> Result<&[ColumnTransform]> {
        self.columns
            .as_deref()
            .ok_or_else(|| Error::State("transform called before fit".into()))
    }

    /// Unseen categories map to an all-zero block.
    pub fn transform(&self, part: &TabularDataset) -> Result<Tensor> {
        let cols = self.fitted()?;
        if cols.len() != part.kinds.len() {
            return Err(Error::dim(format!(
                "preprocessor fitted on {} columns, given {}",
                cols.len(),
                part.kinds.len()
            )));
        }
        let m = self.output_dim()?;
        let rows = part.rows();
        let mut data = vec![0.0; rows.len() * m];
        for (r, row) in rows.iter().enumerate() {
            let out = &mut data[r * m..(r + 1) * m];
            let mut at = 0;
            for (cell, col) in row.iter().zip(cols) {
                match col {
                    ColumnTransform::Numeric { median, mean, std } => {
                        let v = match cell {
                            Cell::Num(v) => *v,
                            _ => *median,
                        };
                        out[at] = (v - mean) / std;
                        at += 1;
                    }
                    ColumnTransform::Categorical { vocab } => {
                        let token = category_token(cell);
                        if let Ok(k) = vocab.binary_search(&token) {
                            out[at + k] = 1.0;
                        }
                        at += vocab.len();
                    }
                }
            }
        }
        Tensor::matrix(rows.len(), m, data)
    }

    pub fn fit_transform(&mut self, train: &TabularDataset) -> Result<Tensor> {
        self.fit(train)?;
        self.transform(train)
    }

    /// Features plus labels of `part`.
    pub fn encode(&self, part: &TabularDataset) -> Result<Encoded> {
        Ok(Encoded {
            x: self.transform(part)?,
            y: part.labels().to_vec(),
            classes: part.class_count(),
        })
    }
}

fn category_token(cell: &Cell) -> String {
    match cell {
        Cell::Cat(s) => s.clone(),
        Cell::Num(v) => v.to_string(),
        Cell::Missing => MISSING_TOKEN.to_string(),
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Split configuration. Proportions are fixed: test 5/20 of the data, then
/// valid 1/5 of the remainder (3/20 overall), train the rest (12/20).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub stratified: bool,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self { seed, stratified: true }
    }

    /// `(train, valid, test)` sizes for `n` rows.
    pub fn sizes(n: usize) -> (usize, usize, usize) {
        let test = round_half_up(n as f64 * 5.0 / 20.0).min(n);
        let valid = round_half_up((n - test) as f64 / 5.0).min(n - test);
        (n - test - valid, valid, test)
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Largest-remainder apportionment of `target` items across classes in
/// proportion to `counts`; ties favour the lower class index.
fn apportion(counts: &[usize], target: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    let mut quota: Vec<usize> = counts.iter().map(|&c| c * target / total).collect();
    let mut remainders: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| ((c * target) % total, i))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = target - quota.iter().sum::<usize>();
    for &(_, i) in &remainders {
        if left == 0 {
            break;
        }
        if quota[i] < counts[i] {
            quota[i] += 1;
            left -= 1;
        }
    }
    quota
}

pub fn split_indices(dataset: &TabularDataset, spec: &SplitSpec) -> Result<SplitIndices> {
    let n = dataset.len();
    let (_, n_valid, n_test) = SplitSpec::sizes(n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if !spec.stratified {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let test = idx[..n_test].to_vec();
        let valid = idx[n_test..n_test + n_valid].to_vec();
        let train = idx[n_test + n_valid..].to_vec();
        return Ok(SplitIndices { train, valid, test });
    }
    let k = dataset.class_count();
    if n < k {
        return Err(Error::Stratification(format!("{n} rows cannot cover {k} classes")));
    }
    let mut by_class = dataset.indices_by_class();
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let test_q = apportion(&counts, n_test);
    let rest: Vec<usize> = counts.iter().zip(&test_q).map(|(c, t)| c - t).collect();
    let valid_q = apportion(&rest, n_valid);
    let mut out = SplitIndices {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for (c, idx) in by_class.iter().enumerate() {
        let (t, v) = (test_q[c], valid_q[c]);
        if counts[c] > 0 && counts[c] == t + v {
            return Err(Error::Stratification(format!(
                "class `{}` ({} rows) leaves no training samples",
                dataset.class_names[c], counts[c]
            )));
        }
        out.test.extend_from_slice(&idx[..t]);
        out.valid.extend_from_slice(&idx[t..t + v]);
        out.train.extend_from_slice(&idx[t + v..]);
    }
    for part in [&mut out.train, &mut out.valid, &mut out.test] {
        part.shuffle(&mut rng);
    }
    Ok(out)
}

/// `(train, valid, test)` parts of `dataset`.
pub fn split(dataset: &TabularDataset, spec: &SplitSpec) -> Result<(TabularDataset, TabularDataset, TabularDataset)> {
    let idx = split_indices(dataset, spec)?;
    Ok((
        dataset.subset(&idx.train),
        dataset.subset(&idx.valid),
        dataset.subset(&idx.test),
    ))
}

/// Random oversampling: every class is topped up to the majority count
/// with copies drawn (with replacement) from its own rows.
pub fn oversample(train: &TabularDataset, seed: u64) -> Result<TabularDataset> {
    let by_class = train.indices_by_class();
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::contract(format!(
            "class `{}` has no rows to oversample",
            train.class_names[c]
        )));
    }
    let majority = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..train.len()).collect();
    for idx in &by_class {
        for _ in idx.len()..majority {
            indices.push(idx[rng.random_range(0..idx.len())]);
        }
    }
    indices.shuffle(&mut rng);
    Ok(train.subset(&indices))
}

/// Exactly `shots` rows per class, drawn without replacement.
pub fn nshot_subsample(train: &TabularDataset, shots: usize, seed: u64) -> Result<TabularDataset> {
    let mut by_class = train.indices_by_class();
    if let Some(c) = by_class.iter().position(|idx| idx.len() < shots) {
        return Err(Error::contract(format!(
            "class `{}` has {} rows, fewer than {shots} shots",
            train.class_names[c],
            by_class[c].len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(shots * by_class.len());
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..shots]);
    }
    chosen.shuffle(&mut rng);
    Ok(train.subset(&chosen))
}
