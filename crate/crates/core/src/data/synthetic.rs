//! Class-conditional synthetic survival data with log-normal event times.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, SurvivalRecord};
use crate::error::{Error, Result};

/// Radius of the sphere the class centers are placed on.
pub const CENTER_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_means: Vec<f64>,
    pub class_stds: Vec<f64>,
    pub censor_rate: f64,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Ten classes with means 1, 5, ..., 37, censoring rate 0.15 and 16 features.
    pub fn ten_class(samples_per_class: usize, seed: u64) -> Self {
        SyntheticSpec {
            class_means: (0..10).map(|k| 1.0 + 4.0 * k as f64).collect(),
            class_stds: vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 1.0, 1.0, 1.0],
            censor_rate: 0.15,
            samples_per_class,
            feature_dim: 16,
            seed,
        }
    }

    pub fn classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_means.is_empty() || self.class_means.len() != self.class_stds.len() {
            return Err(Error::InvalidParameter(format!(
                "need matching non-empty class means/stds, got {} and {}",
                self.class_means.len(),
                self.class_stds.len()
            )));
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return Err(Error::InvalidParameter(format!(
                "censor rate must be in [0, 1), got {}",
                self.censor_rate
            )));
        }
        if self.samples_per_class == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidParameter(
                "samples per class and feature dimension must be positive".into(),
            ));
        }
        for (m, s) in self.class_means.iter().zip(&self.class_stds) {
            lognormal_params(*m, *s)?;
        }
        Ok(())
    }
}

/// `(mu, sigma)` of the log-normal with mean `m` and standard deviation `s`.
pub fn lognormal_params(m: f64, s: f64) -> Result<(f64, f64)> {
    if !(m > 0.0 && s > 0.0) || !m.is_finite() || !s.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "log-normal mean and std must be positive, got ({m}, {s})"
        )));
    }
    let mu = (m * m / (s * s + m * m).sqrt()).ln();
    let sigma = (s * s / (m * m)).ln_1p().sqrt();
    Ok((mu, sigma))
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    Ok(generate_with_raw_times(spec)?.0)
}

/// Also returns the uncensored draw `T*` behind every record.
pub(crate) fn generate_with_raw_times(spec: &SyntheticSpec) -> Result<(Dataset, Vec<f64>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    let centers: Vec<Vec<f64>> = (0..spec.classes())
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| CENTER_RADIUS * x / norm).collect()
        })
        .collect();

    let mut records = Vec::with_capacity(spec.classes() * spec.samples_per_class);
    let mut raw = Vec::with_capacity(records.capacity());
    for (k, center) in centers.iter().enumerate() {
        let (mu, sigma) = lognormal_params(spec.class_means[k], spec.class_stds[k])?;
        let dist = LogNormal::new(mu, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        for _ in 0..spec.samples_per_class {
            let continuous = center
                .iter()
                .map(|c| c + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let t: f64 = dist.sample(&mut rng);
            raw.push(t);
            records.push(SurvivalRecord {
                continuous,
                categorical: vec![],
                time: t,
                event: true,
                label: Some(k),
            });
        }
    }

    let n = records.len();
    // guard against p_c * N landing just below an integer (0.7 * 90 = 62.999...)
    let n_censor = ((spec.censor_rate * n as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for &i in &order[..n_censor] {
        let t_star = records[i].time;
        let c = loop {
            let c = rng.random_range(0.0..t_star);
            if c > 0.0 {
                break c;
            }
        };
        records[i].time = c;
        records[i].event = false;
    }

    // mix classes so downstream splits see no ordering
    order.shuffle(&mut rng);
    let records_out = order.iter().map(|&i| records[i].clone()).collect();
    let raw_out = order.iter().map(|&i| raw[i]).collect();
    let names = (0..d).map(|j| format!("f{j}")).collect();
    Ok((Dataset::new(names, vec![], records_out)?, raw_out))
}
