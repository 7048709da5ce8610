//! Per-dataset model hyperparameters, one preset per `<dataset>-<head>` pair.
//!
//! Every preset shares batch size 64, `lambda_lb = 0.01`, `kappa = 2.0` and 100 time bins.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::heads::HeadKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Preset {
    pub dataset: &'static str,
    pub head: HeadKind,
    pub hidden_dim: usize,
    pub layers: usize,
    pub experts: usize,
    pub learning_rate: f64,
}

impl Preset {
    pub fn name(&self) -> String {
        format!("{}-{}", self.dataset, self.head.name())
    }
}

pub const SHARED_BATCH_SIZE: usize = 64;
pub const SHARED_LAMBDA_LB: f64 = 0.01;
pub const SHARED_KAPPA_INIT: f64 = 2.0;
pub const SHARED_BINS: usize = 100;

const fn p(dataset: &'static str, head: HeadKind, hidden_dim: usize, layers: usize, experts: usize, learning_rate: f64) -> Preset {
    Preset {
        dataset,
        head,
        hidden_dim,
        layers,
        experts,
        learning_rate,
    }
}

use HeadKind::{Adjustable, Fixed, Mtlr, Personalized};

pub const PRESETS: [Preset; 12] = [
    p("mnist", Fixed, 208, 2, 10, 5e-4),
    p("mnist", Adjustable, 186, 2, 10, 5e-4),
    p("mnist", Personalized, 160, 1, 10, 5e-4),
    p("mnist", Mtlr, 176, 2, 1, 5e-4),
    p("support2", Fixed, 176, 2, 10, 5e-3),
    p("support2", Adjustable, 186, 2, 10, 5e-3),
    p("support2", Personalized, 128, 1, 8, 5e-4),
    p("support2", Mtlr, 176, 2, 1, 5e-4),
    p("sepsis", Fixed, 176, 2, 10, 5e-4),
    p("sepsis", Adjustable, 186, 2, 10, 5e-4),
    p("sepsis", Personalized, 128, 1, 8, 5e-4),
    p("sepsis", Mtlr, 176, 2, 1, 5e-4),
];

pub fn preset(name: &str) -> Result<Preset> {
    PRESETS.iter().find(|p| p.name() == name).copied().ok_or_else(|| {
        let names: Vec<String> = PRESETS.iter().map(Preset::name).collect();
        Error::Config(format!("unknown preset '{name}'; available: {}", names.join(", ")))
    })
}
