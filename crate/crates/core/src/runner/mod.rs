//! Batch commands behind the `survmoe` binary.
//!
//! Each command takes a fully resolved argument struct, writes its artifacts
//! under its output directory and returns the [`RunManifest`] it also saved
//! there. A manifest's `command` field is enough to run it again ([`replay`]).

pub mod config;
mod io;
mod manifest;
pub mod presets;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use io::{read_labels, select_split, write_labels_csv, write_records_csv, DataSource, SplitName, SplitSpec};
pub use manifest::{
    artifact_version, config_hash, read_json, read_manifest, write_atomic, write_json, DatasetInfo, RunManifest,
    MANIFEST_FILE,
};

use crate::cluster::{
    haberman_z, km_by_cluster, pairwise_ari, quantile_table, routing_matrix, top1_assign, ContingencyTable,
    HabermanCell, PairwiseAri, QuantileRow, RoutingMatrix,
};
use crate::data::{discretize, generate_synthetic, ColumnRoles, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::metrics::{evaluate_predictions, evaluation_times, MetricsReport, DEFAULT_PERCENTILES};
use crate::model::{BackboneConfig, HeadSpec, Model};
use crate::parallel::Execution;
use crate::params::Params;
use crate::train::{grad_check, mean_nll, train_observed, GradCheckReport, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    GenData(GenDataArgs),
    Train(TrainArgs),
    Eval(EvalArgs),
    SweepExperts(SweepArgs),
    ClusterReport(ClusterArgs),
    GradCheck(GradCheckArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::SweepExperts(_) => "sweep-experts",
            Command::ClusterReport(_) => "cluster-report",
            Command::GradCheck(_) => "grad-check",
        }
    }

    fn output(&mut self) -> (&mut PathBuf, &mut bool) {
        match self {
            Command::GenData(a) => (&mut a.out, &mut a.force),
            Command::Train(a) => (&mut a.out, &mut a.force),
            Command::Eval(a) => (&mut a.out, &mut a.force),
            Command::SweepExperts(a) => (&mut a.out, &mut a.force),
            Command::ClusterReport(a) => (&mut a.out, &mut a.force),
            Command::GradCheck(a) => (&mut a.out, &mut a.force),
        }
    }

    pub fn out(&self) -> PathBuf {
        self.clone().output().0.clone()
    }

    /// Points the command at another output directory (and clears `force` when `out` is empty).
    pub fn relocate(&mut self, out: &Path) {
        let (o, f) = self.output();
        *o = out.to_path_buf();
        if out.as_os_str().is_empty() {
            *f = false;
        }
    }

    pub fn set_force(&mut self, force: bool) {
        *self.output().1 = force;
    }
}

/// Runs a command and writes its manifest.
pub fn run(command: &Command) -> Result<RunManifest> {
    let start = Instant::now();
    let out = match command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::SweepExperts(a) => sweep_experts(a)?,
        Command::ClusterReport(a) => cluster_report(a)?,
        Command::GradCheck(a) => grad_check_cmd(a)?,
    };
    let manifest = RunManifest {
        artifact_version: artifact_version(),
        config_hash: config_hash(command),
        command: command.clone(),
        seeds: out.seeds,
        datasets: out.datasets,
        outputs: out.outputs,
        runtime_secs: start.elapsed().as_secs_f64(),
        metrics: out.metrics,
    };
    write_json(&command.out().join(MANIFEST_FILE), &manifest)?;
    if let Some(e) = out.failure {
        return Err(e);
    }
    Ok(manifest)
}

struct Outcome {
    seeds: Vec<u64>,
    datasets: Vec<DatasetInfo>,
    outputs: Vec<PathBuf>,
    metrics: serde_json::Value,
    /// Reported after the manifest is written.
    failure: Option<Error>,
}

/// Fails if any target exists and `force` is off; creates the directory.
fn claim_outputs(out: &Path, files: &[&str], force: bool) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = files.iter().map(|f| out.join(f)).collect();
    paths.push(out.join(MANIFEST_FILE));
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::Exists(p.clone()));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    paths.pop();
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataArgs {
    pub samples_per_class: usize,
    pub censor_rate: f64,
    pub feature_dim: usize,
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default)]
    pub force: bool,
}

impl Default for GenDataArgs {
    fn default() -> Self {
        let s = SyntheticSpec::ten_class(1600, 0);
        GenDataArgs {
            samples_per_class: s.samples_per_class,
            censor_rate: s.censor_rate,
            feature_dim: s.feature_dim,
            seed: s.seed,
            out: PathBuf::from("synthetic"),
            force: false,
        }
    }
}

impl GenDataArgs {
    pub fn spec(&self) -> SyntheticSpec {
        let mut s = SyntheticSpec::ten_class(self.samples_per_class, self.seed);
        s.censor_rate = self.censor_rate;
        s.feature_dim = self.feature_dim;
        s
    }
}

pub const RECORDS_FILE: &str = "records.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const SCHEMA_FILE: &str = "schema.json";

fn gen_data(a: &GenDataArgs) -> Result<Outcome> {
    let outputs = claim_outputs(&a.out, &[RECORDS_FILE, LABELS_FILE, SCHEMA_FILE], a.force)?;
    let spec = a.spec();
    let data = generate_synthetic(&spec)?;
    write_records_csv(&outputs[0], &data)?;
    write_labels_csv(&outputs[1], &data)?;
    let roles = ColumnRoles {
        time: "time".into(),
        event: "event".into(),
        continuous: data.continuous_names.clone(),
        categorical: vec![],
    };
    write_json(&outputs[2], &roles)?;
    let mut class_counts = vec![0usize; spec.classes()];
    for r in &data.records {
        class_counts[r.label.expect("synthetic records are labelled")] += 1;
    }
    let censored = data.records.iter().filter(|r| !r.event).count();
    Ok(Outcome {
        seeds: vec![a.seed],
        datasets: vec![DatasetInfo::of(&outputs[0], &data)],
        metrics: json!({
            "rows": data.len(),
            "censored": censored,
            "censored_fraction": data.censored_fraction(),
            "class_counts": class_counts,
            "fingerprint": data.fingerprint(),
        }),
        outputs,
        failure: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub head: HeadKind,
    pub experts: usize,
    pub hidden_dim: usize,
    pub layers: usize,
}

impl ModelSpec {
    fn head_spec(&self, kappa_init: f64) -> HeadSpec {
        HeadSpec {
            kind: self.head,
            experts: if self.head.is_moe() { self.experts } else { 1 },
            kappa_init,
        }
    }

    fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            hidden_dim: self.hidden_dim,
            num_layers: self.layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArgs {
    pub data: DataSource,
    pub split: SplitSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub out: PathBuf,
    #[serde(default)]
    pub force: bool,
}

/// A trained model plus what is needed to reload its data consistently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: Model,
    pub model_spec: ModelSpec,
    pub roles: ColumnRoles,
    pub split: SplitSpec,
    pub data_fingerprint: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
        read_json(&file)
    }
}

/// Trains one model on the train part of `data`; used by `train` and `sweep-experts`.
fn fit(data: &Dataset, split: &SplitSpec, spec: &ModelSpec, cfg: &TrainConfig) -> Result<(crate::train::TrainedModel, Dataset)> {
    let (tr, va, te) = split.apply(data)?;
    let label = format!("{} n={} seed={}", spec.head, spec.experts, cfg.seed);
    let tm = train_observed(&tr, &va, spec.backbone(), spec.head_spec(cfg.kappa_init), cfg, |e| {
        log::info!(
            "{label} epoch {} train {:.5} val {:.5}",
            e.epoch,
            e.train_loss,
            e.val_loss
        )
    })?;
    Ok((tm, te))
}

fn train(a: &TrainArgs) -> Result<Outcome> {
    let outputs = claim_outputs(&a.out, &[CHECKPOINT_FILE, "history.csv"], a.force)?;
    let roles = a.data.roles()?;
    let data = a.data.load(&roles, None)?;
    let (tm, _) = fit(&data, &a.split, &a.model, &a.train)?;
    let epochs_run = tm.history.len();
    let ckpt = Checkpoint {
        model: tm.model.clone(),
        model_spec: a.model,
        roles,
        split: a.split,
        data_fingerprint: data.fingerprint(),
        best_epoch: tm.best_epoch,
        best_val_loss: tm.best_val_loss,
    };
    write_json(&outputs[0], &ckpt)?;
    write_atomic(&outputs[1], tm.history_csv().as_bytes())?;
    Ok(Outcome {
        seeds: vec![a.train.seed],
        datasets: vec![DatasetInfo::of(&a.data.data, &data)],
        metrics: json!({
            "best_epoch": tm.best_epoch,
            "best_val_loss": tm.best_val_loss,
            "epochs_run": epochs_run,
            "num_params": tm.model.num_params(),
            "history": tm.history,
        }),
        outputs,
        failure: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: DataSource,
    pub split: SplitName,
    /// Expected number of time bins; must match the checkpoint when given.
    #[serde(default)]
    pub bins: Option<usize>,
    pub ece_bins: usize,
    pub percentiles: Vec<f64>,
    #[serde(default)]
    pub execution: Execution,
    pub out: PathBuf,
    #[serde(default)]
    pub force: bool,
}

impl EvalArgs {
    pub fn new(checkpoint: impl Into<PathBuf>, data: DataSource, split: SplitName, out: impl Into<PathBuf>) -> Self {
        EvalArgs {
            checkpoint: checkpoint.into(),
            data,
            split,
            bins: None,
            ece_bins: 10,
            percentiles: DEFAULT_PERCENTILES.to_vec(),
            execution: Execution::default(),
            out: out.into(),
            force: false,
        }
    }
}

/// `metrics.json` contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub split: SplitName,
    pub nll: f64,
    #[serde(flatten)]
    pub report: MetricsReport,
}

/// Loads the checkpoint's data with its vocabulary, checks the grid and selects a split.
fn checkpoint_data(ckpt: &Checkpoint, src: &DataSource, split: SplitName, bins: Option<usize>) -> Result<Dataset> {
    if let Some(b) = bins {
        if b != ckpt.model.bins() {
            return Err(Error::Contract(format!(
                "grid mismatch: checkpoint has {} time bins, {b} requested",
                ckpt.model.bins()
            )));
        }
    }
    let roles = match &src.schema {
        Some(p) => ColumnRoles::from_json_file(p)?,
        None => ckpt.roles.clone(),
    };
    let data = src.load(&roles, Some(&ckpt.model.schema.categorical))?;
    if data.continuous_names != ckpt.model.schema.continuous_names {
        return Err(Error::Contract(format!(
            "data columns {:?} do not match the checkpoint's {:?}",
            data.continuous_names, ckpt.model.schema.continuous_names
        )));
    }
    select_split(data, &ckpt.split, split, &ckpt.data_fingerprint)
}

pub fn evaluate_model(model: &Model, data: &Dataset, q: usize, percentiles: &[f64], exec: Execution) -> Result<(f64, MetricsReport)> {
    let std = model.prepare(data)?;
    let targets = discretize(&std, &model.grid);
    let nll = mean_nll(model, &std.records, &targets, exec)?;
    let pmfs = model.predict(data, exec)?;
    let report = evaluate_predictions(&pmfs, &data.times(), &data.events(), &model.grid, q, percentiles, exec)?;
    Ok((nll, report))
}

fn eval(a: &EvalArgs) -> Result<Outcome> {
    let outputs = claim_outputs(&a.out, &["metrics.json", "per_time.csv"], a.force)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = checkpoint_data(&ckpt, &a.data, a.split, a.bins)?;
    let (nll, report) = evaluate_model(&ckpt.model, &data, a.ece_bins, &a.percentiles, a.execution)?;
    let m = EvalMetrics {
        split: a.split,
        nll,
        report,
    };
    write_json(&outputs[0], &m)?;
    let mut csv = String::from("bin,time,ece,brier\n");
    for (j, t) in evaluation_times(&ckpt.model.grid).iter().enumerate() {
        csv.push_str(&format!(
            "{j},{t},{},{}\n",
            m.report.ece_per_time[j], m.report.brier_per_time[j]
        ));
    }
    write_atomic(&outputs[1], csv.as_bytes())?;
    Ok(Outcome {
        seeds: vec![],
        datasets: vec![DatasetInfo::of(&a.data.data, &data)],
        metrics: serde_json::to_value(&m).map_err(|e| Error::format(&outputs[0], e))?,
        outputs,
        failure: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepArgs {
    pub data: DataSource,
    pub split: SplitSpec,
    pub heads: Vec<HeadKind>,
    pub min_experts: usize,
    pub max_experts: usize,
    pub step: usize,
    pub seeds: Vec<u64>,
    pub hidden_dim: usize,
    pub layers: usize,
    /// Per-cell seeds replace `train.seed`.
    pub train: TrainConfig,
    pub out: PathBuf,
    #[serde(default)]
    pub force: bool,
}

impl SweepArgs {
    pub fn expert_counts(&self) -> Result<Vec<usize>> {
        if self.min_experts == 0 || self.min_experts > self.max_experts || self.step == 0 {
            return Err(Error::Config(format!(
                "invalid expert range {}..={} step {}",
                self.min_experts, self.max_experts, self.step
            )));
        }
        Ok((self.min_experts..=self.max_experts).step_by(self.step).collect())
    }
}

/// One `(head, n, seed)` cell; failed cells keep the error message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub head: HeadKind,
    pub experts: usize,
    pub seed: u64,
    pub ok: bool,
    pub best_epoch: Option<usize>,
    pub val_loss: Option<f64>,
    pub test_nll: Option<f64>,
    pub ece: Option<f64>,
    pub brier: Option<f64>,
    pub harrell_c: Option<f64>,
    pub ipcw_c: Option<f64>,
    pub error: Option<String>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    fn f<T: ToString>(v: &Option<T>) -> String {
        v.as_ref().map_or(String::new(), T::to_string)
    }
    let mut s = String::from("head,experts,seed,status,best_epoch,val_loss,test_nll,ece,brier,harrell_c,ipcw_c,error\n");
    for r in rows {
        let err = r.error.as_deref().unwrap_or("").replace(['"', '\n'], " ");
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},\"{err}\"\n",
            r.head,
            r.experts,
            r.seed,
            if r.ok { "ok" } else { "failed" },
            f(&r.best_epoch),
            f(&r.val_loss),
            f(&r.test_nll),
            f(&r.ece),
            f(&r.brier),
            f(&r.harrell_c),
            f(&r.ipcw_c),
        ));
    }
    s
}

/// Seed-mean test NLL per `(head, n)` and its range over `n` per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub head: HeadKind,
    pub experts: Vec<usize>,
    pub mean_test_nll: Vec<f64>,
    pub range: f64,
}

pub fn summarize_sweep(rows: &[SweepRow], heads: &[HeadKind], experts: &[usize]) -> Vec<SweepSummary> {
    heads
        .iter()
        .map(|&head| {
            let mut ns = Vec::new();
            let mut means = Vec::new();
            for &n in experts {
                let v: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.head == head && r.experts == n)
                    .filter_map(|r| r.test_nll)
                    .collect();
                if !v.is_empty() {
                    ns.push(n);
                    means.push(v.iter().sum::<f64>() / v.len() as f64);
                }
            }
            let range = if means.is_empty() {
                f64::NAN
            } else {
                means.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    - means.iter().cloned().fold(f64::INFINITY, f64::min)
            };
            SweepSummary {
                head,
                experts: ns,
                mean_test_nll: means,
                range,
            }
        })
        .collect()
}

fn sweep_cell(data: &Dataset, a: &SweepArgs, head: HeadKind, experts: usize, seed: u64) -> Result<SweepRow> {
    let spec = ModelSpec {
        head,
        experts,
        hidden_dim: a.hidden_dim,
        layers: a.layers,
    };
    let cfg = TrainConfig { seed, ..a.train.clone() };
    let (tm, test) = fit(data, &a.split, &spec, &cfg)?;
    let (nll, r) = evaluate_model(&tm.model, &test, 10, &DEFAULT_PERCENTILES, cfg.execution)?;
    Ok(SweepRow {
        head,
        experts,
        seed,
        ok: true,
        best_epoch: Some(tm.best_epoch),
        val_loss: Some(tm.best_val_loss),
        test_nll: Some(nll),
        ece: Some(r.ece),
        brier: Some(r.brier),
        harrell_c: Some(r.harrell_c),
        ipcw_c: Some(r.ipcw_c),
        error: None,
    })
}

fn sweep_experts(a: &SweepArgs) -> Result<Outcome> {
    let outputs = claim_outputs(&a.out, &["sweep.csv"], a.force)?;
    let experts = a.expert_counts()?;
    if a.heads.is_empty() || a.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one head and one seed".into()));
    }
    let roles = a.data.roles()?;
    let data = a.data.load(&roles, None)?;
    let mut rows = Vec::new();
    for &head in &a.heads {
        for &n in &experts {
            for &seed in &a.seeds {
                let row = sweep_cell(&data, a, head, n, seed).unwrap_or_else(|e| {
                    log::warn!("sweep cell {head} n={n} seed={seed} failed: {e}");
                    SweepRow {
                        head,
                        experts: n,
                        seed,
                        ok: false,
                        best_epoch: None,
                        val_loss: None,
                        test_nll: None,
                        ece: None,
                        brier: None,
                        harrell_c: None,
                        ipcw_c: None,
                        error: Some(e.to_string()),
                    }
                });
                rows.push(row);
            }
        }
    }
    write_atomic(&outputs[0], sweep_csv(&rows).as_bytes())?;
    let summary = summarize_sweep(&rows, &a.heads, &experts);
    Ok(Outcome {
        seeds: a.seeds.clone(),
        datasets: vec![DatasetInfo::of(&a.data.data, &data)],
        metrics: json!({ "rows": rows, "summary": summary }),
        outputs,
        failure: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterArgs {
    /// The first checkpoint is reported in full; all of them enter the ARI.
    pub checkpoints: Vec<PathBuf>,
    pub data: DataSource,
    pub split: SplitName,
    /// Require cross-checkpoint ARI.
    #[serde(default)]
    pub ari: bool,
    #[serde(default)]
    pub execution: Execution,
    pub out: PathBuf,
    #[serde(default)]
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmSummary {
    pub cluster: usize,
    pub size: usize,
    pub event_times: Vec<f64>,
    pub survival: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalZ {
    pub column: String,
    pub levels: Vec<String>,
    pub cells: Vec<HabermanCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZFlag {
    pub cluster: usize,
    pub column: String,
    pub level: String,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub experts: usize,
    pub records: usize,
    pub sizes: Vec<usize>,
    pub assignments: Vec<usize>,
    pub routing: Option<RoutingMatrix>,
    pub km: Vec<KmSummary>,
    pub notes: Vec<String>,
    pub z_flags: Vec<ZFlag>,
    pub categorical_z: Vec<CategoricalZ>,
    pub quantiles: Vec<QuantileRow>,
    pub ari: Option<PairwiseAri>,
}

fn routing_of(ckpt: &Checkpoint, data: &Dataset, exec: Execution) -> Result<Vec<Vec<f64>>> {
    ckpt.model
        .predict_routing(data, exec)?
        .ok_or_else(|| Error::Config("the mtlr head has no router; cluster reports need an MoE checkpoint".into()))
}

pub fn build_cluster_report(ckpts: &[Checkpoint], data: &Dataset, exec: Execution) -> Result<ClusterReport> {
    let primary = &ckpts[0];
    let assignment = top1_assign(&routing_of(primary, data, exec)?);
    let experts = primary.model.head.experts();
    let idx = &assignment.index;
    let routing = match data.labels() {
        Some(labels) => {
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            Some(routing_matrix(idx, &labels, experts, classes)?)
        }
        None => None,
    };
    let surv = km_by_cluster(idx, experts, &data.times(), &data.events())?;
    let km = surv
        .curves
        .iter()
        .map(|c| KmSummary {
            cluster: c.cluster,
            size: c.size,
            event_times: c.km.event_times.clone(),
            survival: c.km.survival.clone(),
        })
        .collect();
    let mut categorical_z = Vec::new();
    let mut z_flags = Vec::new();
    for (k, col) in data.categorical.iter().enumerate() {
        let levels: Vec<usize> = data.records.iter().map(|r| r.categorical[k]).collect();
        let table = ContingencyTable::from_pairs(idx, &levels, experts, col.cardinality())?;
        let cells = haberman_z(&table)?;
        for c in cells.iter().filter(|c| c.flagged) {
            z_flags.push(ZFlag {
                cluster: c.cluster,
                column: col.name.clone(),
                level: col.levels[c.level].clone(),
                z: c.z.expect("flagged cells have a z"),
            });
        }
        categorical_z.push(CategoricalZ {
            column: col.name.clone(),
            levels: col.levels.clone(),
            cells,
        });
    }
    let features: Vec<Vec<f64>> = data.records.iter().map(|r| r.continuous.clone()).collect();
    let quantiles = quantile_table(idx, experts, &data.continuous_names, &features);
    let ari = if ckpts.len() > 1 {
        let mut partitions = vec![idx.clone()];
        for c in &ckpts[1..] {
            partitions.push(top1_assign(&routing_of(c, data, exec)?).index);
        }
        Some(pairwise_ari(&partitions)?)
    } else {
        None
    };
    Ok(ClusterReport {
        experts,
        records: data.len(),
        sizes: assignment.sizes(),
        assignments: assignment.index,
        routing,
        km,
        notes: surv.notes,
        z_flags,
        categorical_z,
        quantiles,
        ari,
    })
}

fn cluster_csvs(r: &ClusterReport) -> [String; 5] {
    let mut sizes = String::from("cluster,size\n");
    for (c, s) in r.sizes.iter().enumerate() {
        sizes.push_str(&format!("{c},{s}\n"));
    }
    let mut routing = String::from("expert,class,fraction\n");
    if let Some(m) = &r.routing {
        for (e, row) in m.rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                routing.push_str(&format!("{e},{c},{v}\n"));
            }
        }
    }
    let mut km = String::from("cluster,time,survival\n");
    for c in &r.km {
        km.push_str(&format!("{},0,1\n", c.cluster));
        for (t, s) in c.event_times.iter().zip(&c.survival) {
            km.push_str(&format!("{},{t},{s}\n", c.cluster));
        }
    }
    let mut z = String::from("column,cluster,level,observed,expected,z,flagged\n");
    for col in &r.categorical_z {
        for c in &col.cells {
            z.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                col.column,
                c.cluster,
                col.levels[c.level],
                c.observed,
                c.expected,
                c.z.map_or("skipped".to_string(), |z| z.to_string()),
                c.flagged
            ));
        }
    }
    let mut q = String::from("cluster,feature,count,min,q25,median,q75,max\n");
    for row in &r.quantiles {
        q.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.cluster, row.feature, row.count, row.min, row.q25, row.median, row.q75, row.max
        ));
    }
    [sizes, routing, km, z, q]
}

fn cluster_report(a: &ClusterArgs) -> Result<Outcome> {
    if a.checkpoints.is_empty() {
        return Err(Error::Config("cluster-report needs at least one --checkpoint".into()));
    }
    if a.ari && a.checkpoints.len() < 2 {
        return Err(Error::Config("--ari needs at least two checkpoints".into()));
    }
    let files = [
        "cluster_report.json",
        "sizes.csv",
        "routing_matrix.csv",
        "km.csv",
        "zscores.csv",
        "quantiles.csv",
    ];
    let outputs = claim_outputs(&a.out, &files, a.force)?;
    let ckpts = a
        .checkpoints
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let data = checkpoint_data(&ckpts[0], &a.data, a.split, None)?;
    let report = build_cluster_report(&ckpts, &data, a.execution)?;
    write_json(&outputs[0], &report)?;
    for (path, text) in outputs[1..].iter().zip(cluster_csvs(&report)) {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(Outcome {
        seeds: vec![],
        datasets: vec![DatasetInfo::of(&a.data.data, &data)],
        metrics: json!({
            "sizes": report.sizes,
            "purity": report.routing.as_ref().map(|r| r.purity),
            "z_flags": report.z_flags,
            "ari": report.ari,
            "notes": report.notes,
        }),
        outputs,
        failure: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckArgs {
    pub heads: Vec<HeadKind>,
    pub experts: Vec<usize>,
    pub epsilon: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Negates the analytic gradient to prove the check can fail.
    #[serde(default)]
    pub inject_sign_flip: bool,
    pub out: PathBuf,
    #[serde(default)]
    pub force: bool,
}

impl Default for GradCheckArgs {
    fn default() -> Self {
        GradCheckArgs {
            heads: vec![HeadKind::Fixed, HeadKind::Adjustable, HeadKind::Personalized],
            experts: vec![2, 4],
            epsilon: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            inject_sign_flip: false,
            out: PathBuf::from("grad-check"),
            force: false,
        }
    }
}

fn grad_check_cmd(a: &GradCheckArgs) -> Result<Outcome> {
    let outputs = claim_outputs(&a.out, &["grad_check.json"], a.force)?;
    let mut reports: Vec<GradCheckReport> = Vec::new();
    for &head in &a.heads {
        let counts: &[usize] = if head.is_moe() { &a.experts } else { &[1] };
        for &n in counts {
            let r = grad_check(head, n, a.seed, a.epsilon, a.tolerance, a.inject_sign_flip)?;
            log::info!(
                "grad-check {head} n={n}: max rel err {:.3e} ({})",
                r.max_rel_err,
                if r.passed { "pass" } else { "FAIL" }
            );
            reports.push(r);
        }
    }
    write_json(&outputs[0], &reports)?;
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} n={} ({:.3e})", r.head, r.experts, r.max_rel_err))
        .collect();
    let failure = (!failed.is_empty()).then(|| {
        Error::Numerical(format!(
            "gradient check above tolerance {:e}: {}",
            a.tolerance,
            failed.join(", ")
        ))
    });
    Ok(Outcome {
        seeds: vec![a.seed],
        datasets: vec![],
        metrics: json!({ "passed": failed.is_empty(), "reports": reports }),
        outputs,
        failure,
    })
}

/// Outcome of re-running a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub command: String,
    pub identical: bool,
    /// JSON paths whose values differ.
    pub differences: Vec<String>,
}

fn diff_json(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, v) in x {
                match y.get(k) {
                    Some(w) => diff_json(&format!("{path}.{k}"), v, w, out),
                    None => out.push(format!("{path}.{k}")),
                }
            }
            out.extend(y.keys().filter(|k| !x.contains_key(*k)).map(|k| format!("{path}.{k}")));
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (v, w)) in x.iter().zip(y).enumerate() {
                diff_json(&format!("{path}[{i}]"), v, w, out);
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}

/// Re-runs the manifest's command into `out` and compares metrics and dataset fingerprints.
pub fn replay(manifest: &Path, out: &Path) -> Result<ReplayReport> {
    let old = read_manifest(manifest)?;
    let mut cmd = old.command.clone();
    cmd.relocate(out);
    cmd.set_force(true);
    let new = run(&cmd)?;
    let mut differences = Vec::new();
    diff_json("metrics", &old.metrics, &new.metrics, &mut differences);
    for (a, b) in old.datasets.iter().zip(&new.datasets) {
        if a.fingerprint != b.fingerprint {
            differences.push(format!("dataset {}", a.path.display()));
        }
    }
    let report = ReplayReport {
        command: old.command.name().to_string(),
        identical: differences.is_empty(),
        differences,
    };
    write_json(&out.join("replay.json"), &report)?;
    Ok(report)
}
