//! Dataset files used by the commands: records CSV, truth labels and column roles.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_csv, split, CategoricalColumn, ColumnRoles, Dataset};
use crate::error::{Error, Result};

/// A records CSV plus optional role declaration and truth labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub data: PathBuf,
    /// JSON column-role file; when absent, `time`/`event` are the outcome
    /// columns and every other column except `id` is continuous.
    #[serde(default)]
    pub schema: Option<PathBuf>,
    /// CSV with `id,class` rows, `id` being the 0-based record row.
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

impl DataSource {
    pub fn new(data: impl Into<PathBuf>) -> Self {
        DataSource {
            data: data.into(),
            schema: None,
            labels: None,
        }
    }

    pub fn roles(&self) -> Result<ColumnRoles> {
        match &self.schema {
            Some(p) => ColumnRoles::from_json_file(p),
            None => infer_roles(&self.data),
        }
    }

    pub fn load(&self, roles: &ColumnRoles, vocab: Option<&[CategoricalColumn]>) -> Result<Dataset> {
        let mut data = load_csv(&self.data, roles, vocab)?;
        if let Some(path) = &self.labels {
            let labels = read_labels(path, data.len())?;
            for (r, l) in data.records.iter_mut().zip(labels) {
                r.label = Some(l);
            }
        }
        Ok(data)
    }
}

fn infer_roles(path: &Path) -> Result<ColumnRoles> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let headers = reader.headers().map_err(|e| Error::format(path, e))?;
    let names: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
    for required in ["time", "event"] {
        if !names.iter().any(|n| n == required) {
            return Err(Error::format(
                path,
                format!("no '{required}' column; pass --schema to declare column roles"),
            ));
        }
    }
    Ok(ColumnRoles {
        time: "time".into(),
        event: "event".into(),
        continuous: names
            .into_iter()
            .filter(|n| !matches!(n.as_str(), "time" | "event" | "id"))
            .collect(),
        categorical: vec![],
    })
}

pub fn read_labels(path: &Path, n: usize) -> Result<Vec<usize>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let mut labels = vec![None; n];
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            row,
            message,
        };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let parse = |k: usize| -> Result<usize> {
            let s = rec.get(k).unwrap_or("").trim();
            s.parse().map_err(|_| err(format!("'{s}' is not a non-negative integer")))
        };
        let (id, class) = (parse(0)?, parse(1)?);
        if id >= n {
            return Err(err(format!("record id {id} out of range for {n} records")));
        }
        labels[id] = Some(class);
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| Error::format(path, format!("no label for record {i}"))))
        .collect()
}

/// Continuous columns, then `time,event`. Floats use the shortest exact representation.
pub fn write_records_csv(path: &Path, data: &Dataset) -> Result<()> {
    if !data.categorical.is_empty() {
        return Err(Error::Contract("records writer handles continuous features only".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = data.continuous_names.clone();
    header.extend(["time".to_string(), "event".to_string()]);
    w.write_record(&header).map_err(|e| Error::format(path, e))?;
    for r in &data.records {
        let mut row: Vec<String> = r.continuous.iter().map(|x| x.to_string()).collect();
        row.push(r.time.to_string());
        row.push((r.event as u8).to_string());
        w.write_record(&row).map_err(|e| Error::format(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e))?;
    super::manifest::write_atomic(path, &bytes)
}

pub fn write_labels_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = String::from("id,class\n");
    for (i, r) in data.records.iter().enumerate() {
        let label = r
            .label
            .ok_or_else(|| Error::Contract(format!("record {i} has no label")))?;
        out.push_str(&format!("{i},{label}\n"));
    }
    super::manifest::write_atomic(path, out.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            fractions: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn apply(&self, data: &Dataset) -> Result<(Dataset, Dataset, Dataset)> {
        let [a, b, c] = self.fractions;
        split(data, (a, b, c), self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            "all" => Ok(SplitName::All),
            _ => Err(Error::Config(format!("unknown split '{s}' (expected train, val, test or all)"))),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
            SplitName::All => "all",
        })
    }
}

/// Selects one part of a dataset that must be the one a checkpoint was trained on.
pub fn select_split(data: Dataset, spec: &SplitSpec, which: SplitName, trained_on: &str) -> Result<Dataset> {
    if which == SplitName::All {
        return Ok(data);
    }
    if data.fingerprint() != trained_on {
        return Err(Error::Contract(format!(
            "dataset differs from the one the checkpoint was trained on, so split '{which}' is undefined; use --split all"
        )));
    }
    let (tr, va, te) = spec.apply(&data)?;
    Ok(match which {
        SplitName::Train => tr,
        SplitName::Val => va,
        SplitName::Test => te,
        SplitName::All => unreachable!(),
    })
}
