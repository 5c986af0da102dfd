//! Config-driven experiments: benchmark runs with optional search, few-shot
//! sweeps, layer-range ablation, backbone/freeze studies, tiny
//! pre-training, and plot-data emission.
//!
//! Every run follows the same protocol per (dataset, seed): split into
//! train/valid/test, oversample train, optionally search hyperparameters on
//! train→valid, merge train and valid, oversample again, fit the final
//! model, and only then encode and score the test part.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{
    load_csv, merge, nshot_subsample, oversample, split, Preprocessor, Schema, SplitSpec, TabularDataset,
};
use crate::encoder::{load_weights_auto, save_weights, EncoderBundle, EncoderConfig, LayerRange};
use crate::error::{Error, Result};
use crate::metrics::{config_hash, rank_methods, MethodSummary, Report, ReportRow};
use crate::model::{FreezeMode, ModelSpec, VisTabNetModel};
use crate::pretrain::{pretrain_tiny, PretrainSpec};
use crate::search::{run_search, ParamSet, SearchOptions, SearchSpace, Trial};
use crate::synth::{blobs, gaussian_mixture, MixtureSpec};
use crate::tensor::Tensor;
use crate::train::{evaluate, fit, TrainConfig, TrainHistory};

/// Forward repetitions behind each wall-time measurement.
pub const TIMING_REPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Benchmark,
    Fewshot,
    AblateLayers,
    BackboneStudy,
    PretrainTiny,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Csv {
        path: PathBuf,
        schema: PathBuf,
    },
    Mixture {
        #[serde(default, flatten)]
        spec: MixtureSpec,
        #[serde(default)]
        seed: u64,
    },
    Blobs {
        samples: usize,
        features: usize,
        classes: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<TabularDataset> {
        match self {
            DatasetSource::Csv { path, schema } => load_csv(path, &Schema::read(schema)?),
            DatasetSource::Mixture { spec, seed } => gaussian_mixture(spec, *seed),
            DatasetSource::Blobs {
                samples,
                features,
                classes,
                separation,
                seed,
            } => blobs(*samples, *features, *classes, *separation, *seed),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSource {
    /// Weight file whose metadata carries the encoder configuration.
    File { path: PathBuf },
    PretrainTiny {
        #[serde(default)]
        spec: PretrainSpec,
        #[serde(default)]
        seed: u64,
    },
    Random {
        config: EncoderConfig,
        #[serde(default)]
        seed: u64,
    },
    /// Adapter straight into the head.
    #[default]
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    #[serde(default = "SearchSpace::vistabnet")]
    pub space: SearchSpace,
    #[serde(default, flatten)]
    pub options: SearchOptions,
}

/// Parameter names a search space may use.
pub const SEARCHABLE: [&str; 5] = ["lr", "proj_lr", "epochs", "projections", "proj_depth"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Checked against the requested mode when present.
    pub mode: Option<Mode>,
    pub datasets: Vec<DatasetSource>,
    pub seeds: Vec<u64>,
    pub encoder: EncoderSource,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub search: Option<SearchConfig>,
    pub shots: Vec<usize>,
    /// Empty means every `start < end` pair.
    pub grid: Vec<LayerRange>,
    pub oversample: bool,
    pub stratified: bool,
    /// Train the final model on train + valid. When off, the final model
    /// sees train only and records validation MCC per epoch.
    pub merge_valid: bool,
    /// Token width when no encoder is used.
    pub token_dim: usize,
    pub pretrain: PretrainSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: None,
            datasets: Vec::new(),
            seeds: vec![0, 1, 2],
            encoder: EncoderSource::None,
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            search: None,
            shots: vec![1, 2, 5, 10],
            grid: Vec::new(),
            oversample: true,
            stratified: true,
            merge_valid: true,
            token_dim: 32,
            pretrain: PretrainSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a JSON config; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for d in &mut self.datasets {
            if let DatasetSource::Csv { path, schema } = d {
                fix(path);
                fix(schema);
            }
        }
        if let EncoderSource::File { path } = &mut self.encoder {
            fix(path);
        }
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        if let Some(m) = self.mode {
            if m != mode {
                return Err(Error::Config(format!("config declares mode {m:?}, run as {mode:?}")));
            }
        }
        let missing = |p: &Path| !p.exists();
        for d in &self.datasets {
            if let DatasetSource::Csv { path, schema } = d {
                for p in [path, schema] {
                    if missing(p) {
                        return Err(Error::Config(format!("file not found: {}", p.display())));
                    }
                }
            }
        }
        if let EncoderSource::File { path } = &self.encoder {
            if missing(path) {
                return Err(Error::Config(format!("file not found: {}", path.display())));
            }
        }
        self.train.validate()?;
        if mode == Mode::PretrainTiny {
            return self.pretrain_spec().validate();
        }
        if self.datasets.is_empty() {
            return Err(Error::Config("`datasets` is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` is empty".into()));
        }
        if let Some(s) = &self.search {
            s.space.validate()?;
            if let Some(p) = s.space.names().into_iter().find(|n| !SEARCHABLE.contains(n)) {
                return Err(Error::Config(format!(
                    "unknown search parameter `{p}` (expected one of {SEARCHABLE:?})"
                )));
            }
            if s.options.budget == 0 || !(0.0..=1.0).contains(&s.options.seeding_ratio) {
                return Err(Error::Config(
                    "search needs budget ≥ 1 and seeding_ratio in [0, 1]".into(),
                ));
            }
        }
        match mode {
            Mode::Fewshot if self.shots.is_empty() => Err(Error::Config("`shots` is empty".into())),
            Mode::AblateLayers | Mode::BackboneStudy if self.encoder == EncoderSource::None => {
                Err(Error::Config(format!("{mode:?} needs an encoder")))
            }
            _ => Ok(()),
        }
    }

    /// Spec used by pre-training mode: the encoder source's spec when it
    /// names one, `pretrain` otherwise.
    pub fn pretrain_spec(&self) -> &PretrainSpec {
        match &self.encoder {
            EncoderSource::PretrainTiny { spec, .. } => spec,
            _ => &self.pretrain,
        }
    }
}

/// Execution knobs supplied by the caller rather than the config file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Concurrent (dataset, seed) runs; 0 or 1 is sequential.
    pub parallel: usize,
    /// Sequential execution with timings recorded as zero, so repeated runs
    /// give identical reports.
    pub deterministic: bool,
    pub checkpoint_dir: Option<PathBuf>,
}

impl RunOptions {
    fn workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.parallel.max(1)
        }
    }

    fn seconds(&self, since: Instant) -> f64 {
        if self.deterministic {
            0.0
        } else {
            since.elapsed().as_secs_f64()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledHistory {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    pub history: TrainHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    pub dataset: String,
    pub seed: u64,
    pub trial: Trial,
}

/// Reads of the test partition recorded just before it was first encoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakAudit {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    pub test_reads_before_eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dataset: String,
    pub method: String,
    pub mean_mcc: f64,
    pub std_mcc: f64,
    pub mean_accuracy: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotPoint {
    pub dataset: String,
    pub shots: usize,
    pub mean_mcc: f64,
    pub std_mcc: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub range: LayerRange,
    pub mean_mcc: Option<f64>,
    /// Mean over runs of the median forward time.
    pub mean_seconds: Option<f64>,
    pub runs: usize,
    /// Why the cell is unavailable.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    pub fn starts(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.cells.iter().map(|c| c.range.start).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn ends(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.cells.iter().map(|c| c.range.end).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn cell(&self, start: usize, end: usize) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.range.start == start && c.range.end == end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub train_accuracy: f64,
    pub epochs: usize,
    pub checksums: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
    pub ranks: Vec<MethodSummary>,
    pub failures: Vec<RunFailure>,
    pub warnings: Vec<String>,
    pub histories: Vec<LabeledHistory>,
    /// Parameter names of the search space, in column order.
    pub trial_params: Vec<String>,
    pub trials: Vec<TrialRecord>,
    pub fewshot: Vec<FewshotPoint>,
    pub ablation: Option<AblationGrid>,
    pub leak_audit: Vec<LeakAudit>,
    pub pretrain: Option<PretrainSummary>,
}

impl ExperimentReport {
    fn new(mode: Mode, config: &ExperimentConfig) -> Self {
        Self {
            mode,
            config: serde_json::to_value(config).expect("config serializes"),
            rows: Vec::new(),
            aggregates: Vec::new(),
            ranks: Vec::new(),
            failures: Vec::new(),
            warnings: Vec::new(),
            histories: Vec::new(),
            trial_params: Vec::new(),
            trials: Vec::new(),
            fewshot: Vec::new(),
            ablation: None,
            leak_audit: Vec::new(),
            pretrain: None,
        }
    }

    pub fn report(&self) -> Report {
        Report {
            rows: self.rows.clone(),
        }
    }

    fn absorb(&mut self, out: JobOutput) {
        self.rows.extend(out.rows);
        self.failures.extend(out.failures);
        self.warnings.extend(out.warnings);
        self.histories.extend(out.histories);
        self.trials.extend(out.trials);
        self.leak_audit.extend(out.audits);
    }

    /// Fills `aggregates` and, when every (dataset, method) cell is present
    /// and there are several methods, `ranks`.
    fn summarize(&mut self) {
        let mut groups: Vec<((String, String), Vec<&ReportRow>)> = Vec::new();
        for r in &self.rows {
            let key = (r.dataset.clone(), r.method.clone());
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(r),
                None => groups.push((key, vec![r])),
            }
        }
        self.aggregates = groups
            .into_iter()
            .map(|((dataset, method), rows)| {
                let mccs: Vec<f64> = rows.iter().map(|r| r.mcc).collect();
                let (mean_mcc, std_mcc) = mean_std(&mccs);
                Aggregate {
                    dataset,
                    method,
                    mean_mcc,
                    std_mcc,
                    mean_accuracy: rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64,
                    runs: rows.len(),
                }
            })
            .collect();
        let table = self.report().score_table();
        self.ranks = if table.methods.len() > 1 {
            rank_methods(&table).unwrap_or_default()
        } else {
            Vec::new()
        };
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median wall time of `reps` forward passes of `x`.
pub fn time_forward(model: &VisTabNetModel, x: &Tensor, reps: usize) -> Result<f64> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        model.forward_batch(x)?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&mut times))
}

/// Median forward time per range for a frozen model around `encoder`
/// with `n_views` random views of a `batch×input_dim` random input.
pub fn layer_range_timing(
    encoder: EncoderBundle,
    ranges: &[LayerRange],
    n_views: usize,
    input_dim: usize,
    batch: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ModelSpec {
        n_views,
        ..ModelSpec::default()
    };
    let d = encoder.dim();
    let adapter = crate::model::AdapterConfig::new(input_dim, spec.n_views, spec.adapter_depth, d);
    let head = crate::model::HeadConfig::new(d, d, spec.head_depth, 2);
    let full = LayerRange::full(encoder.depth());
    let mut model = VisTabNetModel::new(adapter, Some(encoder), full, head, &mut rng)?;
    let x = Tensor::randn(&[batch, input_dim], 1.0, &mut rng);
    ranges
        .iter()
        .map(|&r| {
            model.range = r;
            time_forward(&model, &x, reps)
        })
        .collect()
}

/// Loads or builds the encoder named by `source`; pre-trained encoders are
/// also written to `checkpoint_dir/encoder.weights`.
pub fn resolve_encoder(source: &EncoderSource, opts: &RunOptions) -> Result<Option<EncoderBundle>> {
    match source {
        EncoderSource::None => Ok(None),
        EncoderSource::File { path } => load_weights_auto(path).map(Some),
        EncoderSource::Random { config, seed } => {
            config.validate().map_err(|e| Error::Config(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            EncoderBundle::random(config.clone(), false, &mut rng).map(Some)
        }
        EncoderSource::PretrainTiny { spec, seed } => {
            let out = pretrain_tiny(spec, *seed)?;
            if let Some(dir) = &opts.checkpoint_dir {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                save_weights(&out.encoder, dir.join("encoder.weights"))?;
            }
            Ok(Some(out.encoder))
        }
    }
}

#[derive(Default)]
struct JobOutput {
    rows: Vec<ReportRow>,
    failures: Vec<RunFailure>,
    warnings: Vec<String>,
    histories: Vec<LabeledHistory>,
    trials: Vec<TrialRecord>,
    audits: Vec<LeakAudit>,
    /// (range, mcc, seconds) for ablation jobs.
    timing: Option<(LayerRange, f64, f64)>,
}

/// Runs `jobs` closures on up to `workers` threads, returning results in
/// job order.
fn run_jobs<T: Send>(count: usize, workers: usize, job: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..count).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, count.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let out = job(i);
                *slots[i].lock().expect("job slot") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("job slot").expect("job ran"))
        .collect()
}

/// Applies searched values onto the base recipe.
pub fn apply_params(model: &ModelSpec, train: &TrainConfig, params: &ParamSet) -> Result<(ModelSpec, TrainConfig)> {
    let (mut m, mut t) = (model.clone(), train.clone());
    for (name, value) in params {
        let bad = || Error::Config(format!("bad value {value} for `{name}`"));
        match name.as_str() {
            "lr" => t.lr_head = value.as_f64().ok_or_else(bad)?,
            "proj_lr" => t.lr_proj = value.as_f64().ok_or_else(bad)?,
            "epochs" => t.epochs = value.as_usize().ok_or_else(bad)?,
            "projections" => m.n_views = value.as_usize().ok_or_else(bad)?,
            "proj_depth" => m.adapter_depth = value.as_usize().ok_or_else(bad)?,
            _ => return Err(Error::Config(format!("unknown search parameter `{name}`"))),
        }
    }
    Ok((m, t))
}

struct Fitted {
    model: VisTabNetModel,
    history: TrainHistory,
    prep: Preprocessor,
}

/// Fits preprocessing on `train`, builds and trains a model; `valid` (when
/// given) is scored every epoch.
fn fit_model(
    encoder: Option<&EncoderBundle>,
    spec: &ModelSpec,
    train_cfg: &TrainConfig,
    train: &TabularDataset,
    valid: Option<&TabularDataset>,
    token_dim: usize,
    seed: u64,
) -> Result<Fitted> {
    let mut prep = Preprocessor::new();
    prep.fit(train)?;
    let train_enc = prep.encode(train)?;
    let valid_enc = valid.map(|v| prep.encode(v)).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = spec.build(train_enc.width(), train.class_count(), encoder, token_dim, &mut rng)?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let history = fit(&mut model, &train_enc, valid_enc.as_ref(), &cfg)?;
    Ok(Fitted { model, history, prep })
}

fn run_config_json(
    dataset: &str,
    method: &str,
    seed: u64,
    spec: &ModelSpec,
    train: &TrainConfig,
    encoder: &EncoderSource,
    extra: serde_json::Value,
) -> serde_json::Value {
    json!({
        "dataset": dataset,
        "method": method,
        "seed": seed,
        "model": spec,
        "train": train,
        "encoder": encoder,
        "extra": extra,
    })
}

/// Everything one (dataset, seed, method) run needs.
struct RunSpec<'a> {
    dataset: &'a TabularDataset,
    split_id: u64,
    seed: u64,
    method: String,
    encoder: Option<&'a EncoderBundle>,
    model: ModelSpec,
    train: TrainConfig,
    search: Option<&'a SearchConfig>,
    time_forward: bool,
}

/// The full protocol for one run. Errors abort only this run.
fn run_protocol(cfg: &ExperimentConfig, opts: &RunOptions, run: RunSpec<'_>) -> JobOutput {
    let mut out = JobOutput::default();
    let name = run.dataset.name.clone();
    let result = (|| -> Result<()> {
        let start = Instant::now();
        let spec = SplitSpec {
            seed: run.seed,
            stratified: cfg.stratified,
        };
        let (train, valid, test) = split(run.dataset, &spec)?;
        let train_os = if cfg.oversample {
            oversample(&train, run.seed)?
        } else {
            train.clone()
        };

        let (model_spec, train_cfg, params) = match run.search {
            Some(search) => {
                let objective = |params: &ParamSet, trial_seed: u64| -> Result<f64> {
                    let (m, t) = apply_params(&run.model, &run.train, params)?;
                    let f = fit_model(run.encoder, &m, &t, &train_os, None, cfg.token_dim, trial_seed)?;
                    Ok(evaluate(&f.model, &f.prep.encode(&valid)?)?.mcc)
                };
                let options = SearchOptions {
                    seed: run.seed,
                    parallel: if opts.deterministic { 1 } else { search.options.parallel },
                    ..search.options
                };
                let result = run_search(&search.space, objective, &options)?;
                for t in &result.trials {
                    let mut trial = t.clone();
                    if opts.deterministic {
                        trial.seconds = 0.0;
                    }
                    out.trials.push(TrialRecord {
                        trial_id: format!("{name}/{}/{}", run.seed, t.id),
                        dataset: name.clone(),
                        seed: run.seed,
                        trial,
                    });
                }
                let best = result
                    .best
                    .ok_or_else(|| Error::State("every search trial failed".into()))?;
                let (m, t) = apply_params(&run.model, &run.train, &best.params)?;
                (m, t, serde_json::to_value(&best.params)?)
            }
            None => (run.model.clone(), run.train.clone(), serde_json::Value::Null),
        };

        let (final_train, monitor) = if cfg.merge_valid {
            let merged = merge(&train, &valid)?;
            let merged = if cfg.oversample {
                oversample(&merged, run.seed)?
            } else {
                merged
            };
            (merged, None)
        } else {
            (train_os, Some(&valid))
        };
        let fitted = fit_model(
            run.encoder,
            &model_spec,
            &train_cfg,
            &final_train,
            monitor,
            cfg.token_dim,
            run.seed,
        )?;

        out.audits.push(LeakAudit {
            dataset: name.clone(),
            method: run.method.clone(),
            seed: run.seed,
            test_reads_before_eval: test.access_count(),
        });
        let eval = evaluate(&fitted.model, &fitted.prep.encode(&test)?)?;
        let wall_seconds = opts.seconds(start);

        if run.time_forward {
            let x = fitted.prep.transform(&final_train)?;
            let rows = x.rows().min(64);
            let x = Tensor::matrix(rows, x.cols(), x.data()[..rows * x.cols()].to_vec())?;
            let secs = time_forward(&fitted.model, &x, TIMING_REPS)?;
            let secs = if opts.deterministic { 0.0 } else { secs };
            out.timing = Some((model_spec.range.unwrap_or(fitted.model.range), eval.mcc, secs));
        }

        if let Some(dir) = &opts.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let file = format!("{}_{}_seed{}.weights", sanitize(&name), sanitize(&run.method), run.seed);
            fitted.model.save_checkpoint(dir.join(file))?;
        }

        let config = run_config_json(
            &name,
            &run.method,
            run.seed,
            &model_spec,
            &TrainConfig {
                seed: run.seed,
                ..train_cfg
            },
            &cfg.encoder,
            params,
        );
        out.rows.push(ReportRow {
            dataset: name.clone(),
            method: run.method.clone(),
            seed: run.seed,
            split_id: run.split_id,
            mcc: eval.mcc,
            accuracy: eval.accuracy,
            wall_seconds,
            config_hash: config_hash(&config),
            config,
        });
        out.histories.push(LabeledHistory {
            dataset: name.clone(),
            method: run.method.clone(),
            seed: run.seed,
            history: fitted.history,
        });
        Ok(())
    })();
    if let Err(e) = result {
        out.failures.push(RunFailure {
            dataset: name,
            method: run.method,
            seed: run.seed,
            error: e.to_string(),
        });
    }
    out
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn load_datasets(cfg: &ExperimentConfig) -> Result<Vec<TabularDataset>> {
    cfg.datasets.iter().map(DatasetSource::load).collect()
}

/// Split → oversample → optional search → merge → final fit → test score,
/// per dataset and seed.
pub fn run_benchmark(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    cfg.validate(Mode::Benchmark)?;
    let datasets = load_datasets(cfg)?;
    let encoder = resolve_encoder(&cfg.encoder, opts)?;
    let mut report = ExperimentReport::new(Mode::Benchmark, cfg);
    if let Some(s) = &cfg.search {
        report.trial_params = s.space.names().into_iter().map(String::from).collect();
    }
    let seeds = &cfg.seeds;
    let outputs = run_jobs(datasets.len() * seeds.len(), opts.workers(), |j| {
        let (d, s) = (j / seeds.len(), j % seeds.len());
        run_protocol(
            cfg,
            opts,
            RunSpec {
                dataset: &datasets[d],
                split_id: s as u64,
                seed: seeds[s],
                method: "vistabnet".into(),
                encoder: encoder.as_ref(),
                model: cfg.model.clone(),
                train: cfg.train.clone(),
                search: cfg.search.as_ref(),
                time_forward: false,
            },
        )
    });
    for o in outputs {
        report.absorb(o);
    }
    report.summarize();
    Ok(report)
}

/// Trains on `N` rows per class of each seed's training part and scores on
/// the full test part. Infeasible `N` are skipped with a warning.
pub fn run_fewshot(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    cfg.validate(Mode::Fewshot)?;
    let datasets = load_datasets(cfg)?;
    let encoder = resolve_encoder(&cfg.encoder, opts)?;
    let mut report = ExperimentReport::new(Mode::Fewshot, cfg);
    let seeds = &cfg.seeds;
    let outputs = run_jobs(datasets.len() * seeds.len(), opts.workers(), |j| {
        let (d, s) = (j / seeds.len(), j % seeds.len());
        let (dataset, seed) = (&datasets[d], seeds[s]);
        let mut out = JobOutput::default();
        let spec = SplitSpec {
            seed,
            stratified: cfg.stratified,
        };
        let (train, _valid, test) = match split(dataset, &spec) {
            Ok(parts) => parts,
            Err(e) => {
                out.failures.push(RunFailure {
                    dataset: dataset.name.clone(),
                    method: "fewshot".into(),
                    seed,
                    error: e.to_string(),
                });
                return out;
            }
        };
        for &shots in &cfg.shots {
            let method = format!("{shots}-shot");
            let subset = match nshot_subsample(&train, shots, seed) {
                Ok(s) => s,
                Err(e) => {
                    out.warnings
                        .push(format!("{} seed {seed}: skipped N={shots}: {e}", dataset.name));
                    continue;
                }
            };
            let start = Instant::now();
            let result = (|| -> Result<()> {
                let fitted = fit_model(
                    encoder.as_ref(),
                    &cfg.model,
                    &cfg.train,
                    &subset,
                    None,
                    cfg.token_dim,
                    seed,
                )?;
                out.audits.push(LeakAudit {
                    dataset: dataset.name.clone(),
                    method: method.clone(),
                    seed,
                    test_reads_before_eval: test.access_count(),
                });
                let eval = evaluate(&fitted.model, &fitted.prep.encode(&test)?)?;
                let config = run_config_json(
                    &dataset.name,
                    &method,
                    seed,
                    &cfg.model,
                    &TrainConfig {
                        seed,
                        ..cfg.train.clone()
                    },
                    &cfg.encoder,
                    json!({ "shots": shots }),
                );
                out.rows.push(ReportRow {
                    dataset: dataset.name.clone(),
                    method: method.clone(),
                    seed,
                    split_id: s as u64,
                    mcc: eval.mcc,
                    accuracy: eval.accuracy,
                    wall_seconds: opts.seconds(start),
                    config_hash: config_hash(&config),
                    config,
                });
                Ok(())
            })();
            if let Err(e) = result {
                out.failures.push(RunFailure {
                    dataset: dataset.name.clone(),
                    method,
                    seed,
                    error: e.to_string(),
                });
            }
        }
        out
    });
    for o in outputs {
        report.absorb(o);
    }
    report.summarize();
    for d in &datasets {
        for &shots in &cfg.shots {
            let mccs: Vec<f64> = report
                .rows
                .iter()
                .filter(|r| r.dataset == d.name && r.method == format!("{shots}-shot"))
                .map(|r| r.mcc)
                .collect();
            if mccs.is_empty() {
                continue;
            }
            let (mean_mcc, std_mcc) = mean_std(&mccs);
            report.fewshot.push(FewshotPoint {
                dataset: d.name.clone(),
                shots,
                mean_mcc,
                std_mcc,
                runs: mccs.len(),
            });
        }
    }
    Ok(report)
}

/// All `start < end` ranges of a `depth`-layer encoder.
pub fn full_grid(depth: usize) -> Vec<LayerRange> {
    (0..depth)
        .flat_map(|s| (s + 1..=depth).map(move |e| LayerRange::new(s, e)))
        .collect()
}

/// One model per (range, dataset, seed); cells hold mean test MCC and mean
/// forward time.
pub fn run_layer_ablation(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    cfg.validate(Mode::AblateLayers)?;
    let datasets = load_datasets(cfg)?;
    let encoder =
        resolve_encoder(&cfg.encoder, opts)?.ok_or_else(|| Error::Config("layer ablation needs an encoder".into()))?;
    let depth = encoder.depth();
    let grid = if cfg.grid.is_empty() {
        full_grid(depth)
    } else {
        cfg.grid.clone()
    };
    let valid: Vec<LayerRange> = grid.iter().copied().filter(|r| r.validate(depth).is_ok()).collect();
    let mut report = ExperimentReport::new(Mode::AblateLayers, cfg);
    let seeds = &cfg.seeds;
    let per_range = datasets.len() * seeds.len();
    let outputs = run_jobs(valid.len() * per_range, opts.workers(), |j| {
        let r = valid[j / per_range];
        let rest = j % per_range;
        let (d, s) = (rest / seeds.len(), rest % seeds.len());
        run_protocol(
            cfg,
            opts,
            RunSpec {
                dataset: &datasets[d],
                split_id: s as u64,
                seed: seeds[s],
                method: format!("layers {}-{}", r.start, r.end),
                encoder: Some(&encoder),
                model: ModelSpec {
                    range: Some(r),
                    ..cfg.model.clone()
                },
                train: cfg.train.clone(),
                search: None,
                time_forward: true,
            },
        )
    });
    let mut samples: BTreeMap<(usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for mut o in outputs {
        if let Some((r, mcc, secs)) = o.timing.take() {
            samples.entry((r.start, r.end)).or_default().push((mcc, secs));
        }
        report.absorb(o);
    }
    let cells = grid
        .iter()
        .map(|&r| match r.validate(depth) {
            Err(e) => AblationCell {
                range: r,
                mean_mcc: None,
                mean_seconds: None,
                runs: 0,
                error: Some(e.to_string()),
            },
            Ok(()) => {
                let v = samples.get(&(r.start, r.end)).cloned().unwrap_or_default();
                let n = v.len();
                AblationCell {
                    range: r,
                    mean_mcc: (n > 0).then(|| v.iter().map(|x| x.0).sum::<f64>() / n as f64),
                    mean_seconds: (n > 0).then(|| v.iter().map(|x| x.1).sum::<f64>() / n as f64),
                    runs: n,
                    error: (n == 0).then(|| "every run failed".to_string()),
                }
            }
        })
        .collect();
    report.ablation = Some(AblationGrid { cells });
    report.summarize();
    Ok(report)
}

pub const BACKBONE_MODES: [&str; 4] = ["frozen", "frozen+finetune", "fully_trained", "no_encoder"];

/// The same splits and seeds under each of [`BACKBONE_MODES`].
pub fn run_backbone_study(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    cfg.validate(Mode::BackboneStudy)?;
    let datasets = load_datasets(cfg)?;
    let encoder = resolve_encoder(&cfg.encoder, opts)?;
    let mut report = ExperimentReport::new(Mode::BackboneStudy, cfg);
    let seeds = &cfg.seeds;
    let per_mode = datasets.len() * seeds.len();
    let outputs = run_jobs(BACKBONE_MODES.len() * per_mode, opts.workers(), |j| {
        let mode = BACKBONE_MODES[j / per_mode];
        let rest = j % per_mode;
        let (d, s) = (rest / seeds.len(), rest % seeds.len());
        let mut model = cfg.model.clone();
        let mut train = TrainConfig {
            finetune_epochs: 0,
            ..cfg.train.clone()
        };
        let mut enc = encoder.as_ref();
        match mode {
            "frozen" => model.freeze = FreezeMode::Frozen,
            "frozen+finetune" => {
                model.freeze = FreezeMode::Frozen;
                train.finetune_epochs = if cfg.train.finetune_epochs > 0 {
                    cfg.train.finetune_epochs
                } else {
                    (cfg.train.epochs / 2).max(1)
                };
            }
            "fully_trained" => model.freeze = FreezeMode::FullyTrained,
            _ => enc = None,
        }
        run_protocol(
            cfg,
            opts,
            RunSpec {
                dataset: &datasets[d],
                split_id: s as u64,
                seed: seeds[s],
                method: mode.into(),
                encoder: enc,
                model,
                train,
                search: None,
                time_forward: false,
            },
        )
    });
    for o in outputs {
        report.absorb(o);
    }
    report.summarize();
    Ok(report)
}

/// Pre-trains the tiny encoder; the weights go to the checkpoint directory.
pub fn run_pretrain(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    cfg.validate(Mode::PretrainTiny)?;
    let seed = match &cfg.encoder {
        EncoderSource::PretrainTiny { seed, .. } => *seed,
        _ => cfg.seeds.first().copied().unwrap_or(0),
    };
    let out = pretrain_tiny(cfg.pretrain_spec(), seed)?;
    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_weights(&out.encoder, dir.join("encoder.weights"))?;
    }
    let mut report = ExperimentReport::new(Mode::PretrainTiny, cfg);
    report.pretrain = Some(PretrainSummary {
        train_accuracy: out.train_accuracy,
        epochs: out.epochs,
        checksums: out.encoder.checksums(),
    });
    Ok(report)
}

pub fn run_experiment(mode: Mode, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport> {
    match mode {
        Mode::Benchmark => run_benchmark(cfg, opts),
        Mode::Fewshot => run_fewshot(cfg, opts),
        Mode::AblateLayers => run_layer_ablation(cfg, opts),
        Mode::BackboneStudy => run_backbone_study(cfg, opts),
        Mode::PretrainTiny => run_pretrain(cfg, opts),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    FewshotCurve,
    AblationHeatmap,
    LearningCurve,
}

impl PlotKind {
    pub const ALL: [PlotKind; 3] = [
        PlotKind::FewshotCurve,
        PlotKind::AblationHeatmap,
        PlotKind::LearningCurve,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PlotKind::FewshotCurve => "fewshot_curve.tsv",
            PlotKind::AblationHeatmap => "ablation_heatmap.tsv",
            PlotKind::LearningCurve => "learning_curve.tsv",
        }
    }

    fn series(self) -> &'static str {
        match self {
            PlotKind::FewshotCurve => "fewshot_curve",
            PlotKind::AblationHeatmap => "ablation_heatmap",
            PlotKind::LearningCurve => "learning_curve",
        }
    }
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

/// Tab-separated plot data. Few-shot: `shots` then `mean`/`std` per
/// dataset. Heatmap: mean MCC with starts as rows and ends as columns.
/// Learning curve: the first recorded history, `boundary` set on the first
/// fine-tuning epoch.
pub fn plot_data(report: &ExperimentReport, kind: PlotKind) -> Result<String> {
    let missing = || Error::State(format!("report has no `{}` series", kind.series()));
    let mut out = String::new();
    match kind {
        PlotKind::FewshotCurve => {
            if report.fewshot.is_empty() {
                return Err(missing());
            }
            let mut names: Vec<&str> = Vec::new();
            let mut shots: Vec<usize> = Vec::new();
            for p in &report.fewshot {
                if !names.contains(&p.dataset.as_str()) {
                    names.push(&p.dataset);
                }
                if !shots.contains(&p.shots) {
                    shots.push(p.shots);
                }
            }
            shots.sort_unstable();
            let single = names.len() == 1;
            out.push_str("shots");
            for n in &names {
                if single {
                    out.push_str("\tmean_mcc\tstd_mcc");
                } else {
                    out.push_str(&format!("\t{n}_mean_mcc\t{n}_std_mcc"));
                }
            }
            out.push('\n');
            for s in shots {
                out.push_str(&s.to_string());
                for n in &names {
                    let p = report.fewshot.iter().find(|p| p.dataset == *n && p.shots == s);
                    out.push_str(&format!(
                        "\t{}\t{}",
                        num(p.map(|p| p.mean_mcc)),
                        num(p.map(|p| p.std_mcc))
                    ));
                }
                out.push('\n');
            }
        }
        PlotKind::AblationHeatmap => {
            let grid = report.ablation.as_ref().ok_or_else(missing)?;
            let ends = grid.ends();
            out.push_str("start\\end");
            for e in &ends {
                out.push_str(&format!("\t{e}"));
            }
            out.push('\n');
            for s in grid.starts() {
                out.push_str(&s.to_string());
                for &e in &ends {
                    out.push('\t');
                    out.push_str(&num(grid.cell(s, e).and_then(|c| c.mean_mcc)));
                }
                out.push('\n');
            }
        }
        PlotKind::LearningCurve => {
            let h = &report.histories.first().ok_or_else(missing)?.history;
            let boundary = h.finetune_start();
            out.push_str("epoch\tphase\tboundary\ttrain_loss\tvalid_mcc\n");
            for (i, r) in h.records.iter().enumerate() {
                let phase = usize::from(r.phase == crate::train::Phase::Finetune);
                let mark = usize::from(boundary == Some(i));
                out.push_str(&format!(
                    "{}\t{phase}\t{mark}\t{}\t{}\n",
                    r.epoch,
                    r.train_loss,
                    num(r.valid_mcc)
                ));
            }
        }
    }
    Ok(out)
}

pub fn emit_plot_data(report: &ExperimentReport, kind: PlotKind, path: impl AsRef<Path>) -> Result<()> {
    let text = plot_data(report, kind)?;
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `trial_id, <params>, score, seconds`.
pub fn write_trials_csv(report: &ExperimentReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["trial_id".to_string()];
    header.extend(report.trial_params.iter().cloned());
    header.extend(["score".into(), "seconds".into()]);
    w.write_record(&header)?;
    for t in &report.trials {
        let mut row = vec![t.trial_id.clone()];
        for p in &report.trial_params {
            row.push(t.trial.params.get(p).map_or_else(String::new, ToString::to_string));
        }
        row.push(t.trial.score.to_string());
        row.push(t.trial.seconds.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `report.csv`, `report.json`, `trials.csv` and every plot series
/// the report holds under `plotdata/`.
pub fn write_outputs(report: &ExperimentReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report.report().write_csv(out.join("report.csv"))?;
    let json = serde_json::to_string_pretty(report)?;
    let json_path = out.join("report.json");
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    write_trials_csv(report, out.join("trials.csv"))?;
    let plots = out.join("plotdata");
    for kind in PlotKind::ALL {
        if let Ok(text) = plot_data(report, kind) {
            fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
            let p = plots.join(kind.file_name());
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<ExperimentReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
