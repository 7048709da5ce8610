//! Survival records, preprocessing and time discretization.

mod csv_io;
mod standardize;
mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use csv_io::{load_csv, ColumnRoles, MISSING_LEVEL};
pub use standardize::{apply_standardizer, embedding_dim, fit_standardizer, FeatureSchema};
pub use synthetic::{generate_synthetic, lognormal_params, SyntheticSpec};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    /// May hold `NaN` for missing values before standardization.
    pub continuous: Vec<f64>,
    pub categorical: Vec<usize>,
    pub time: f64,
    pub event: bool,
    /// Ground-truth group, when known (synthetic data).
    pub label: Option<usize>,
}

/// A categorical column and its level vocabulary; level 0 is the missing level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalColumn {
    pub name: String,
    pub levels: Vec<String>,
}

impl CategoricalColumn {
    pub fn cardinality(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub continuous_names: Vec<String>,
    pub categorical: Vec<CategoricalColumn>,
    pub records: Vec<SurvivalRecord>,
    /// Categorical values that were not in a supplied vocabulary and were mapped to missing.
    #[serde(default)]
    pub unknown_levels: usize,
}

impl Dataset {
    pub fn new(
        continuous_names: Vec<String>,
        categorical: Vec<CategoricalColumn>,
        records: Vec<SurvivalRecord>,
    ) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.continuous.len() != continuous_names.len() {
                return Err(Error::DimensionMismatch {
                    context: "record continuous features",
                    expected: continuous_names.len(),
                    actual: r.continuous.len(),
                });
            }
            if r.categorical.len() != categorical.len() {
                return Err(Error::DimensionMismatch {
                    context: "record categorical features",
                    expected: categorical.len(),
                    actual: r.categorical.len(),
                });
            }
            if !(r.time > 0.0) || !r.time.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "record {i}: time must be positive and finite, got {}",
                    r.time
                )));
            }
            for (c, &level) in categorical.iter().zip(&r.categorical) {
                if level >= c.cardinality() {
                    return Err(Error::InvalidParameter(format!(
                        "record {i}: level {level} out of range for column '{}' (cardinality {})",
                        c.name,
                        c.cardinality()
                    )));
                }
            }
        }
        Ok(Dataset {
            continuous_names,
            categorical,
            records,
            unknown_levels: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.event).collect()
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn censored_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| !r.event).count() as f64 / self.len() as f64
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            continuous_names: self.continuous_names.clone(),
            categorical: self.categorical.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            unknown_levels: 0,
        }
    }

    /// SHA-256 over column names and the exact bit patterns of every record.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for name in &self.continuous_names {
            h.update(name.as_bytes());
            h.update([0u8]);
        }
        for c in &self.categorical {
            h.update(c.name.as_bytes());
            h.update((c.cardinality() as u64).to_le_bytes());
        }
        for r in &self.records {
            for x in &r.continuous {
                h.update(x.to_bits().to_le_bytes());
            }
            for &c in &r.categorical {
                h.update((c as u64).to_le_bytes());
            }
            h.update(r.time.to_bits().to_le_bytes());
            h.update([r.event as u8]);
        }
        hex::encode(h.finalize())
    }
}

/// Equal-width bins on `[0, t_max]`; the last bin absorbs later times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub edges: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(m: usize, t_max: f64) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 time bins, got {m}")));
        }
        if !(t_max > 0.0) || !t_max.is_finite() {
            return Err(Error::InvalidParameter(format!("grid horizon must be positive, got {t_max}")));
        }
        let edges = (0..=m).map(|j| t_max * j as f64 / m as f64).collect();
        Ok(TimeGrid { edges })
    }

    /// Grid over `[0, max observed time]` of the training split.
    pub fn from_dataset(train: &Dataset, m: usize) -> Result<Self> {
        let t_max = train
            .records
            .iter()
            .map(|r| r.time)
            .fold(f64::NEG_INFINITY, f64::max);
        if train.is_empty() {
            return Err(Error::Empty("training split for time grid".into()));
        }
        TimeGrid::uniform(m, t_max)
    }

    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn canonical_points(&self) -> Vec<f64> {
        let m = self.bins();
        (0..m).map(|j| crate::heads::warp::canonical_point(j, m)).collect()
    }

    /// Largest `j` with `edges[j] <= t`, clamped to `[0, m-1]`.
    pub fn bin_index(&self, t: f64) -> usize {
        let k = self.edges.partition_point(|&e| e <= t);
        k.saturating_sub(1).min(self.bins() - 1)
    }

    pub fn encode(&self, time: f64, event: bool) -> EncodedTarget {
        EncodedTarget::new(self.bin_index(time), event, self.bins())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedTarget {
    pub bin_index: usize,
    /// Zeros before `bin_index`, ones from it on.
    pub monotone_labels: Vec<u8>,
    pub event: bool,
}

impl EncodedTarget {
    pub fn new(bin_index: usize, event: bool, m: usize) -> Self {
        let monotone_labels = (0..m).map(|j| (j >= bin_index) as u8).collect();
        EncodedTarget {
            bin_index,
            monotone_labels,
            event,
        }
    }
}

pub fn discretize(dataset: &Dataset, grid: &TimeGrid) -> Vec<EncodedTarget> {
    dataset
        .records
        .iter()
        .map(|r| grid.encode(r.time, r.event))
        .collect()
}

/// Seeded random partition into train/validation/test.
///
/// Sizes are `round(f * N)` for the first two parts; the test part takes the rest.
pub fn split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "split fractions must be in [0, 1] and sum to 1, got {fractions:?}"
        )));
    }
    let n = dataset.len();
    let n_train = (a * n as f64).round() as usize;
    let n_val = ((b * n as f64).round() as usize).min(n - n_train.min(n));
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Empty(format!(
            "split of {n} records with fractions {fractions:?} leaves a part empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        dataset.subset(&idx[..n_train]),
        dataset.subset(&idx[n_train..n_train + n_val]),
        dataset.subset(&idx[n_train + n_val..]),
    ))
}
