//! Training settings: defaults, then a preset, then a TOML file, then CLI flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::SplitSpec;
use super::presets::{preset, SHARED_BATCH_SIZE, SHARED_BINS, SHARED_KAPPA_INIT, SHARED_LAMBDA_LB};
use super::ModelSpec;
use crate::error::{Error, Result};
use crate::heads::{Head, HeadKind};
use crate::parallel::Execution;
use crate::train::TrainConfig;

/// Every field optional so layers can be stacked; see [`Settings::resolve`].
///
/// A TOML config uses the same keys, e.g. `head = "fixed"` or `split = [0.8, 0.1, 0.1]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub preset: Option<String>,
    pub head: Option<HeadKind>,
    pub experts: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub layers: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub lambda_lb: Option<f64>,
    pub kappa_init: Option<f64>,
    pub bins: Option<usize>,
    pub patience: Option<usize>,
    pub max_epochs: Option<usize>,
    pub seed: Option<u64>,
    pub split: Option<[f64; 3]>,
    pub split_seed: Option<u64>,
    pub sequential: Option<bool>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($f:ident),*) => {
        Settings { $($f: $top.$f.or($base.$f)),* }
    };
}

impl Settings {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fields set in `top` win.
    pub fn overlay(self, top: Settings) -> Settings {
        let base = self;
        overlay!(
            base, top, preset, head, experts, hidden_dim, layers, learning_rate, batch_size, lambda_lb,
            kappa_init, bins, patience, max_epochs, seed, split, split_seed, sequential
        )
    }

    /// Applies the preset under the explicit fields and fills the rest with defaults.
    pub fn resolve(&self) -> Result<(ModelSpec, TrainConfig, SplitSpec)> {
        let (spec, cfg, split) = self.resolve_unchecked()?;
        // surfaces head-specific constraints (e.g. h divisible by n) before any data is read
        Head::new(spec.head, spec.hidden_dim, cfg.bins, spec.experts, cfg.kappa_init)?;
        Ok((spec, cfg, split))
    }

    /// [`Settings::resolve`] without the head construction check (sweeps vary head and experts per cell).
    pub fn resolve_unchecked(&self) -> Result<(ModelSpec, TrainConfig, SplitSpec)> {
        let p = self.preset.as_deref().map(preset).transpose()?;
        let d = TrainConfig::default();
        let head = self.head.or(p.map(|p| p.head)).unwrap_or(HeadKind::Fixed);
        // a preset's architecture only applies to its own head
        let p = p.filter(|p| p.head == head);
        let spec = ModelSpec {
            head,
            experts: self.experts.or(p.map(|p| p.experts)).unwrap_or(if head.is_moe() { 10 } else { 1 }),
            hidden_dim: self.hidden_dim.or(p.map(|p| p.hidden_dim)).unwrap_or(128),
            layers: self.layers.or(p.map(|p| p.layers)).unwrap_or(2),
        };
        let cfg = TrainConfig {
            learning_rate: self
                .learning_rate
                .or(p.map(|p| p.learning_rate))
                .unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(SHARED_BATCH_SIZE),
            lambda_lb: self.lambda_lb.unwrap_or(SHARED_LAMBDA_LB),
            kappa_init: self.kappa_init.unwrap_or(SHARED_KAPPA_INIT),
            bins: self.bins.unwrap_or(SHARED_BINS),
            patience: self.patience.unwrap_or(d.patience),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            seed: self.seed.unwrap_or(0),
            execution: if self.sequential.unwrap_or(false) {
                Execution::Sequential
            } else {
                Execution::Parallel
            },
            solver: d.solver,
        };
        cfg.validate()?;
        if spec.hidden_dim == 0 || spec.experts == 0 {
            return Err(Error::Config("hidden dim and experts must be positive".into()));
        }
        let split = SplitSpec {
            fractions: self.split.unwrap_or(SplitSpec::default().fractions),
            seed: self.split_seed.unwrap_or(0),
        };
        Ok((spec, cfg, split))
    }
}
