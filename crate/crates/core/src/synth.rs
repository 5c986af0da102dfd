//! Seeded synthetic tasks: oriented-grating images for encoder
//! pre-training and Gaussian-mixture tables for transfer.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GratingSpec {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Cycles per pixel.
    pub frequency: f64,
    pub noise: f64,
}

impl Default for GratingSpec {
    fn default() -> Self {
        Self {
            samples: 600,
            height: 8,
            width: 8,
            classes: 3,
            frequency: 0.25,
            noise: 0.5,
        }
    }
}

/// Sinusoidal gratings with class-specific orientation (`c·π/K`), uniform
/// random phase and additive Gaussian noise. Images are `H×W×1`.
pub fn gratings(spec: &GratingSpec, seed: u64) -> Result<(Vec<Tensor>, Vec<usize>)> {
    if spec.classes < 2 || spec.samples == 0 {
        return Err(Error::Config("grating task needs ≥ 2 classes and ≥ 1 sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let (h, w) = (spec.height, spec.width);
    let mut images = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let class = i % spec.classes;
        let angle = class as f64 * PI / spec.classes as f64;
        let phase = rng.random_range(0.0..2.0 * PI);
        let (ux, uy) = (angle.cos(), angle.sin());
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let t = 2.0 * PI * spec.frequency * (ux * x as f64 + uy * y as f64) + phase;
                data.push(t.sin() + noise.sample(&mut rng));
            }
        }
        images.push(Tensor::new(vec![h, w, 1], data)?);
        labels.push(class);
    }
    Ok((images, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureSpec {
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    pub radius: f64,
    pub noise: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            samples: 300,
            features: 12,
            classes: 3,
            radius: 3.0,
            noise: 0.7,
        }
    }
}

/// `2K` Gaussian components on a circle in the first two features, the
/// component at angle `j·π/K` belonging to class `j mod K`. Each class thus
/// owns two antipodal components and has zero mean, so no linear model
/// beats chance. Remaining features are pure `N(0, 1)` noise.
pub fn gaussian_mixture(spec: &MixtureSpec, seed: u64) -> Result<TabularDataset> {
    if spec.features < 2 || spec.classes < 2 || spec.samples < spec.classes {
        return Err(Error::Config(
            "mixture needs ≥ 2 features, ≥ 2 classes and a sample per class".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let k = spec.classes;
    let mut rows = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let class = i % k;
        let component = class + if rng.random_bool(0.5) { k } else { 0 };
        let angle = component as f64 * PI / k as f64;
        let mut row = Vec::with_capacity(spec.features);
        row.push(spec.radius * angle.cos() + noise.sample(&mut rng));
        row.push(spec.radius * angle.sin() + noise.sample(&mut rng));
        row.extend((2..spec.features).map(|_| unit.sample(&mut rng)));
        rows.push(row);
        labels.push(class);
    }
    let mut ds = TabularDataset::numeric("mixture", rows, labels, k)?;
    ds.name = format!("mixture{}x{}", spec.samples, spec.features);
    Ok(ds)
}

/// Linearly separable blobs: class `c` centred at `separation` along axis
/// `c mod M` with unit noise.
pub fn blobs(samples: usize, features: usize, classes: usize, separation: f64, seed: u64) -> Result<TabularDataset> {
    if features == 0 || classes < 2 {
        return Err(Error::Config("blobs need ≥ 1 feature and ≥ 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let class = i % classes;
        let mut row: Vec<f64> = (0..features).map(|_| unit.sample(&mut rng)).collect();
        let sign = if (class / features).is_multiple_of(2) {
            1.0
        } else {
            -1.0
        };
        row[class % features] += sign * separation;
        rows.push(row);
        labels.push(class);
    }
    let mut ds = TabularDataset::numeric("blobs", rows, labels, classes)?;
    ds.name = format!("blobs{samples}x{features}");
    Ok(ds)
}
