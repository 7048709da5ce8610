//! Training-split standardization of continuous columns.

use serde::{Deserialize, Serialize};

use super::{CategoricalColumn, Dataset};
use crate::error::{Error, Result};

/// Column statistics fitted on the training split, plus embedding sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub continuous_names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub categorical: Vec<CategoricalColumn>,
    pub embedding_dims: Vec<usize>,
}

impl FeatureSchema {
    /// Width of the concatenated embedding + continuous input.
    pub fn input_dim(&self) -> usize {
        self.embedding_dims.iter().sum::<usize>() + self.continuous_names.len()
    }
}

pub fn embedding_dim(cardinality: usize) -> usize {
    cardinality.div_ceil(2).clamp(1, 16)
}

/// Population mean/std per column, ignoring missing (`NaN`) entries.
/// Columns with zero or undefined spread get std 1.
pub fn fit_standardizer(train: &Dataset) -> Result<FeatureSchema> {
    if train.is_empty() {
        return Err(Error::Empty("training split for standardizer".into()));
    }
    let k = train.continuous_names.len();
    let mut means = vec![0.0; k];
    let mut stds = vec![1.0; k];
    for c in 0..k {
        let vals: Vec<f64> = train
            .records
            .iter()
            .map(|r| r.continuous[c])
            .filter(|v| !v.is_nan())
            .collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        means[c] = mean;
        let sd = var.sqrt();
        stds[c] = if sd > 0.0 && sd.is_finite() { sd } else { 1.0 };
    }
    Ok(FeatureSchema {
        continuous_names: train.continuous_names.clone(),
        means,
        stds,
        embedding_dims: train
            .categorical
            .iter()
            .map(|c| embedding_dim(c.cardinality()))
            .collect(),
        categorical: train.categorical.clone(),
    })
}

/// `(x - mean) / std`; missing values become 0 (the training mean).
pub fn apply_standardizer(schema: &FeatureSchema, data: &Dataset) -> Result<Dataset> {
    if data.continuous_names != schema.continuous_names {
        return Err(Error::Config(format!(
            "continuous columns {:?} do not match the fitted schema {:?}",
            data.continuous_names, schema.continuous_names
        )));
    }
    let mut out = data.clone();
    for r in &mut out.records {
        for ((x, m), s) in r.continuous.iter_mut().zip(&schema.means).zip(&schema.stds) {
            *x = if x.is_nan() { 0.0 } else { (*x - m) / s };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SurvivalRecord;
    use approx::assert_abs_diff_eq;

    fn column(vals: &[f64]) -> Dataset {
        let records = vals
            .iter()
            .map(|&v| SurvivalRecord {
                continuous: vec![v],
                categorical: vec![],
                time: 1.0,
                event: true,
                label: None,
            })
            .collect();
        Dataset::new(vec!["x".into()], vec![], records).unwrap()
    }

    fn values(d: &Dataset) -> Vec<f64> {
        d.records.iter().map(|r| r.continuous[0]).collect()
    }

    #[test]
    fn two_point_column() {
        let d = column(&[2.0, 4.0]);
        let s = fit_standardizer(&d).unwrap();
        assert_eq!(values(&apply_standardizer(&s, &d).unwrap()), vec![-1.0, 1.0]);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let d = column(&[5.0, 5.0, 5.0]);
        let s = fit_standardizer(&d).unwrap();
        assert_eq!(s.stds[0], 1.0);
        assert_eq!(values(&apply_standardizer(&s, &d).unwrap()), vec![0.0; 3]);
    }

    #[test]
    fn missing_values_are_imputed() {
        let d = column(&[1.0, f64::NAN, 3.0]);
        let s = fit_standardizer(&d).unwrap();
        assert_eq!(s.means[0], 2.0);
        assert_eq!(values(&apply_standardizer(&s, &d).unwrap()), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn refit_is_idempotent() {
        let d = column(&[0.3, -2.0, 7.5, 1.25, 3.0, -0.4]);
        let once = apply_standardizer(&fit_standardizer(&d).unwrap(), &d).unwrap();
        let twice = apply_standardizer(&fit_standardizer(&once).unwrap(), &once).unwrap();
        for (a, b) in values(&once).iter().zip(values(&twice)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        let s = fit_standardizer(&once).unwrap();
        assert_abs_diff_eq!(s.means[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.stds[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn embedding_sizes() {
        assert_eq!(embedding_dim(2), 1);
        assert_eq!(embedding_dim(7), 4);
        assert_eq!(embedding_dim(100), 16);
    }
}
