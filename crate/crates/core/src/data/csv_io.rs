//! CSV ingestion driven by a column-role declaration.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CategoricalColumn, Dataset, SurvivalRecord};
use crate::error::{Error, Result};

/// Name of the level every categorical column reserves at index 0.
pub const MISSING_LEVEL: &str = "<missing>";

const MISSING_TOKENS: [&str; 6] = ["", "NA", "NaN", "nan", "null", "?"];

/// Which CSV columns play which role. Columns not listed are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub time: String,
    pub event: String,
    #[serde(default)]
    pub continuous: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
}

impl ColumnRoles {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

fn is_missing(s: &str) -> bool {
    MISSING_TOKENS.contains(&s.trim())
}

/// Reads a CSV with a header row.
///
/// Without `vocab`, categorical levels are collected from the file (sorted,
/// after the missing level). With `vocab` (inference), levels not in it are
/// mapped to the missing level and counted in [`Dataset::unknown_levels`].
pub fn load_csv(path: &Path, roles: &ColumnRoles, vocab: Option<&[CategoricalColumn]>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let headers = reader.headers().map_err(|e| Error::format(path, e))?.clone();
    let position: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let find = |name: &str| {
        position
            .get(name)
            .copied()
            .ok_or_else(|| Error::format(path, format!("column '{name}' not found in header")))
    };
    let time_col = find(&roles.time)?;
    let event_col = find(&roles.event)?;
    let cont_cols = roles.continuous.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let cat_cols = roles.categorical.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    if let Some(v) = vocab {
        if v.len() != cat_cols.len() {
            return Err(Error::Config(format!(
                "vocabulary has {} categorical columns, roles declare {}",
                v.len(),
                cat_cols.len()
            )));
        }
    }

    struct Raw {
        continuous: Vec<f64>,
        categorical: Vec<Option<String>>,
        time: f64,
        event: bool,
    }
    let mut rows = Vec::new();
    for (i, result) in reader.records().enumerate() {
        // header is line 1
        let row = i + 2;
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            row,
            message,
        };
        let rec = result.map_err(|e| err(e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let time: f64 = field(time_col)
            .parse()
            .map_err(|_| err(format!("time '{}' is not a number", field(time_col))))?;
        if !(time > 0.0) || !time.is_finite() {
            return Err(err(format!("time must be positive, got {time}")));
        }
        let event = match field(event_col).parse::<f64>() {
            Ok(v) if v == 0.0 => false,
            Ok(v) if v == 1.0 => true,
            _ => return Err(err(format!("event must be 0 or 1, got '{}'", field(event_col)))),
        };
        let mut continuous = Vec::with_capacity(cont_cols.len());
        for (&c, name) in cont_cols.iter().zip(&roles.continuous) {
            let s = field(c);
            continuous.push(if is_missing(s) {
                f64::NAN
            } else {
                s.parse()
                    .map_err(|_| err(format!("column '{name}': '{s}' is not a number")))?
            });
        }
        let categorical = cat_cols
            .iter()
            .map(|&c| {
                let s = field(c);
                (!is_missing(s)).then(|| s.to_string())
            })
            .collect();
        rows.push(Raw {
            continuous,
            categorical,
            time,
            event,
        });
    }

    let columns: Vec<CategoricalColumn> = match vocab {
        Some(v) => v.to_vec(),
        None => roles
            .categorical
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let seen: BTreeSet<&str> = rows
                    .iter()
                    .filter_map(|r| r.categorical[k].as_deref())
                    .collect();
                let mut levels = vec![MISSING_LEVEL.to_string()];
                levels.extend(seen.into_iter().map(str::to_string));
                CategoricalColumn {
                    name: name.clone(),
                    levels,
                }
            })
            .collect(),
    };
    let lookup: Vec<HashMap<&str, usize>> = columns
        .iter()
        .map(|c| c.levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect())
        .collect();

    let mut unknown = 0;
    let records = rows
        .into_iter()
        .map(|r| {
            let categorical = r
                .categorical
                .iter()
                .zip(&lookup)
                .map(|(v, map)| match v {
                    None => 0,
                    Some(s) => map.get(s.as_str()).copied().unwrap_or_else(|| {
                        unknown += 1;
                        0
                    }),
                })
                .collect();
            SurvivalRecord {
                continuous: r.continuous,
                categorical,
                time: r.time,
                event: r.event,
                label: None,
            }
        })
        .collect();
    if unknown > 0 {
        log::warn!("{}: {unknown} unknown categorical values mapped to {MISSING_LEVEL}", path.display());
    }
    let mut ds = Dataset::new(roles.continuous.clone(), columns, records)?;
    ds.unknown_levels = unknown;
    Ok(ds)
}
