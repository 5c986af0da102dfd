//! Random hyperparameter search with incumbent-seeded proposals.
//!
//! A proposal is a fresh uniform draw with probability `1 − seeding_ratio`
//! (always, before any trial has succeeded) and otherwise a local
//! perturbation of the best trial so far: log floats are scaled by
//! `exp(N(0, 0.5²))`, integers step one multiple with probability 0.5 and
//! choices move to a neighbouring option with probability 0.5. Every
//! proposal is re-quantized and clamped to the space.

use std::collections::BTreeMap;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PERTURB_LOG_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Text(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(v) => Some(*v as f64),
            ParamValue::Float(v) => Some(*v),
            ParamValue::Text(_) => None,
        }
    }

    pub fn as_usize(&self) -> Option<usize> {
        match self {
            ParamValue::Int(v) => usize::try_from(*v).ok(),
            ParamValue::Float(v) if v.fract() == 0.0 && *v >= 0.0 => Some(*v as usize),
            _ => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Float(v) => write!(f, "{v}"),
            ParamValue::Text(v) => f.write_str(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ParamSpec {
    /// Log-uniform on `[low, high]`, rounded to `digits` significant digits.
    LogFloat {
        low: f64,
        high: f64,
        digits: u32,
    },
    /// Multiples of `multiple_of` within `[low, high]`.
    Int {
        low: i64,
        high: i64,
        multiple_of: i64,
    },
    Choice {
        options: Vec<ParamValue>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    #[serde(flatten)]
    pub spec: ParamSpec,
}

pub type ParamSet = BTreeMap<String, ParamValue>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchSpace {
    pub params: Vec<NamedParam>,
}

/// Rounds `x` to `digits` significant digits; `mode` picks nearest,
/// floor or ceiling on the last digit.
fn quantize(x: f64, digits: u32, mode: fn(f64) -> f64) -> f64 {
    if x <= 0.0 || !x.is_finite() {
        return x;
    }
    let exp = x.log10().floor() as i32 - (digits as i32 - 1);
    let mantissa = mode(x / 10f64.powi(exp));
    // parse the decimal form so the result is the f64 nearest to it
    format!("{mantissa}e{exp}").parse().expect("decimal literal")
}

/// True if `x` has at most `digits` significant decimal digits.
pub fn has_significant_digits(x: f64, digits: u32) -> bool {
    let s = format!("{x:e}");
    let mantissa = s.split('e').next().unwrap_or("");
    let count = mantissa.chars().filter(char::is_ascii_digit).count();
    count as u32 <= digits
}

impl ParamSpec {
    fn validate(&self, name: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("parameter `{name}`: {msg}")));
        match self {
            ParamSpec::LogFloat { low, high, digits } => {
                if !(*low > 0.0 && low <= high && high.is_finite()) {
                    return bad(format!("log range [{low}, {high}] must be positive and ordered"));
                }
                if *digits == 0 {
                    return bad("digits must be at least 1".into());
                }
            }
            ParamSpec::Int { low, high, multiple_of } => {
                if *multiple_of <= 0 {
                    return bad("multiple_of must be positive".into());
                }
                if self.int_candidates().0 > self.int_candidates().1 {
                    return bad(format!("no multiple of {multiple_of} in [{low}, {high}]"));
                }
            }
            ParamSpec::Choice { options } => {
                if options.is_empty() {
                    return Err(Error::contract(format!("parameter `{name}` has an empty choice list")));
                }
            }
        }
        Ok(())
    }

    /// Smallest and largest multiple index for an `Int` spec.
    fn int_candidates(&self) -> (i64, i64) {
        match self {
            ParamSpec::Int { low, high, multiple_of } => {
                let k = *multiple_of;
                ((low + k - 1).div_euclid(k), high.div_euclid(k))
            }
            _ => (0, -1),
        }
    }

    fn clamp_float(&self, x: f64) -> f64 {
        let ParamSpec::LogFloat { low, high, digits } = *self else {
            return x;
        };
        let q = quantize(x.clamp(low, high), digits, f64::round);
        if q > high {
            quantize(high, digits, f64::floor)
        } else if q < low {
            quantize(low, digits, f64::ceil)
        } else {
            q
        }
    }

    fn uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamValue {
        match self {
            ParamSpec::LogFloat { low, high, .. } => {
                let u: f64 = rng.random();
                let x = (low.ln() + u * (high.ln() - low.ln())).exp();
                ParamValue::Float(self.clamp_float(x))
            }
            ParamSpec::Int { multiple_of, .. } => {
                let (a, b) = self.int_candidates();
                ParamValue::Int(rng.random_range(a..=b) * multiple_of)
            }
            ParamSpec::Choice { options } => options[rng.random_range(0..options.len())].clone(),
        }
    }

    fn perturb<R: Rng + ?Sized>(&self, current: &ParamValue, rng: &mut R) -> ParamValue {
        match self {
            ParamSpec::LogFloat { .. } => {
                let x = current.as_f64().unwrap_or(f64::NAN);
                let noise = Normal::new(0.0, PERTURB_LOG_STD).expect("valid std");
                let scaled = x * noise.sample(rng).exp();
                if scaled.is_finite() {
                    ParamValue::Float(self.clamp_float(scaled))
                } else {
                    self.uniform(rng)
                }
            }
            ParamSpec::Int { multiple_of, .. } => {
                let (a, b) = self.int_candidates();
                let Some(v) = current.as_f64() else {
                    return self.uniform(rng);
                };
                let mut idx = ((v / *multiple_of as f64).round() as i64).clamp(a, b);
                if rng.random_bool(0.5) {
                    idx += if rng.random_bool(0.5) { 1 } else { -1 };
                }
                ParamValue::Int(idx.clamp(a, b) * multiple_of)
            }
            ParamSpec::Choice { options } => {
                let Some(i) = options.iter().position(|o| o == current) else {
                    return self.uniform(rng);
                };
                if options.len() == 1 || !rng.random_bool(0.5) {
                    return options[i].clone();
                }
                let j = if i == 0 {
                    1
                } else if i == options.len() - 1 || rng.random_bool(0.5) {
                    i - 1
                } else {
                    i + 1
                };
                options[j].clone()
            }
        }
    }

    /// Whether `value` satisfies range, multiple, quantization or
    /// membership.
    pub fn contains(&self, value: &ParamValue) -> bool {
        match self {
            ParamSpec::LogFloat { low, high, digits } => value
                .as_f64()
                .is_some_and(|x| x >= *low && x <= *high && has_significant_digits(x, *digits)),
            ParamSpec::Int { low, high, multiple_of } => match value {
                ParamValue::Int(v) => v >= low && v <= high && v % multiple_of == 0,
                _ => false,
            },
            ParamSpec::Choice { options } => options.contains(value),
        }
    }
}

impl SearchSpace {
    /// Learning rates, epochs, number of views and adapter depth.
    pub fn vistabnet() -> Self {
        let lr = ParamSpec::LogFloat {
            low: 1e-5,
            high: 1e-3,
            digits: 1,
        };
        let ints = |v: &[i64]| ParamSpec::Choice {
            options: v.iter().map(|&x| ParamValue::Int(x)).collect(),
        };
        let named = |name: &str, spec| NamedParam {
            name: name.into(),
            spec,
        };
        Self {
            params: vec![
                named("lr", lr.clone()),
                named("proj_lr", lr),
                named(
                    "epochs",
                    ParamSpec::Int {
                        low: 10,
                        high: 100,
                        multiple_of: 10,
                    },
                ),
                named("projections", ints(&[8, 16, 32, 64, 128])),
                named("proj_depth", ints(&[1, 2, 3, 4])),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.params {
            p.spec.validate(&p.name)?;
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    /// Name of the first parameter `config` violates, if any.
    pub fn violation(&self, config: &ParamSet) -> Option<String> {
        self.params
            .iter()
            .find(|p| !config.get(&p.name).is_some_and(|v| p.spec.contains(v)))
            .map(|p| p.name.clone())
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        best: Option<&ParamSet>,
        seeding_ratio: f64,
    ) -> Result<ParamSet> {
        if !(0.0..=1.0).contains(&seeding_ratio) {
            return Err(Error::contract(format!("seeding ratio {seeding_ratio} outside [0, 1]")));
        }
        self.validate()?;
        // drawn unconditionally so the stream does not depend on `best`
        let seeded = rng.random::<f64>() < seeding_ratio;
        Ok(self
            .params
            .iter()
            .map(|p| {
                let v = match best.and_then(|b| b.get(&p.name)) {
                    Some(current) if seeded => p.spec.perturb(current, rng),
                    _ => p.spec.uniform(rng),
                };
                (p.name.clone(), v)
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: usize,
    pub params: ParamSet,
    /// Negative infinity for failed trials.
    pub score: f64,
    pub seconds: f64,
    pub seed: u64,
    pub error: Option<String>,
}

impl Trial {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchOptions {
    pub budget: usize,
    pub parallel: usize,
    pub seeding_ratio: f64,
    pub seed: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            budget: 50,
            parallel: 4,
            seeding_ratio: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    /// Highest-scoring successful trial, earliest on ties.
    pub best: Option<Trial>,
    /// Ordered by trial id.
    pub trials: Vec<Trial>,
}

struct SearchState {
    rng: ChaCha8Rng,
    next: usize,
    best: Option<Trial>,
    trials: Vec<Trial>,
}

/// Evaluates exactly `budget` proposals with up to `parallel` in flight.
/// `objective` receives the config and a per-trial seed; errors, panics and
/// non-finite scores mark the trial failed.
pub fn run_search<F>(space: &SearchSpace, objective: F, options: &SearchOptions) -> Result<SearchResult>
where
    F: Fn(&ParamSet, u64) -> Result<f64> + Sync,
{
    space.validate()?;
    if options.budget == 0 {
        return Err(Error::contract("search budget must be at least 1"));
    }
    if !(0.0..=1.0).contains(&options.seeding_ratio) {
        return Err(Error::contract(format!(
            "seeding ratio {} outside [0, 1]",
            options.seeding_ratio
        )));
    }
    let state = Mutex::new(SearchState {
        rng: ChaCha8Rng::seed_from_u64(options.seed),
        next: 0,
        best: None,
        trials: Vec::with_capacity(options.budget),
    });
    let workers = options.parallel.clamp(1, options.budget);
    let worker = || -> Result<()> {
        loop {
            let (id, params) = {
                let mut s = state.lock().expect("search state");
                if s.next >= options.budget {
                    return Ok(());
                }
                let id = s.next;
                s.next += 1;
                let best = s.best.as_ref().map(|t| t.params.clone());
                let params = space.sample(&mut s.rng, best.as_ref(), options.seeding_ratio)?;
                (id, params)
            };
            let seed = options.seed.wrapping_add(id as u64);
            let start = Instant::now();
            let outcome = catch_unwind(AssertUnwindSafe(|| objective(&params, seed)));
            let seconds = start.elapsed().as_secs_f64();
            let (score, error) = match outcome {
                Ok(Ok(s)) if s.is_finite() => (s, None),
                Ok(Ok(s)) => (f64::NEG_INFINITY, Some(format!("non-finite score {s}"))),
                Ok(Err(e)) => (f64::NEG_INFINITY, Some(e.to_string())),
                Err(_) => (f64::NEG_INFINITY, Some("objective panicked".into())),
            };
            let trial = Trial {
                id,
                params,
                score,
                seconds,
                seed,
                error,
            };
            let mut s = state.lock().expect("search state");
            if !trial.failed() {
                let better = match &s.best {
                    None => true,
                    Some(b) => trial.score > b.score || (trial.score == b.score && trial.id < b.id),
                };
                if better {
                    s.best = Some(trial.clone());
                }
            }
            s.trials.push(trial);
        }
    };
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers).map(|_| scope.spawn(worker)).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("search worker"))
            .collect::<Result<Vec<()>>>()
    })?;
    let mut s = state.into_inner().expect("search state");
    s.trials.sort_by_key(|t| t.id);
    Ok(SearchResult {
        best: s.best,
        trials: s.trials,
    })
}

/// `trial_id, <params in space order>, score, seconds`.
pub fn write_trials_csv(path: impl AsRef<Path>, space: &SearchSpace, trials: &[Trial]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["trial_id".to_string()];
    header.extend(space.names().into_iter().map(String::from));
    header.extend(["score".to_string(), "seconds".to_string()]);
    w.write_record(&header)?;
    for t in trials {
        let mut row = vec![t.id.to_string()];
        for name in space.names() {
            row.push(t.params.get(name).map_or_else(String::new, ToString::to_string));
        }
        row.push(t.score.to_string());
        row.push(t.seconds.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
