//! Feed-forward backbone and the full model (backbone + head).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{apply_standardizer, Dataset, FeatureSchema, SurvivalRecord, TimeGrid};
use crate::error::{Error, Result};
use crate::heads::{fan_in_bound, uniform_fill, Head, HeadKind, HeadOutput};
use crate::math::{matvec, matvec_t_acc, outer_acc};
use crate::parallel::Execution;
use crate::params::Params;

/// Half-width of the uniform embedding initialization.
pub const EMBEDDING_INIT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_layers == 0 {
            return Err(Error::Config(format!(
                "hidden dim and layer count must be at least 1, got {} and {}",
                self.hidden_dim, self.num_layers
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn new(inputs: usize, outputs: usize) -> Self {
        Linear {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = matvec(&self.weight, self.outputs, self.inputs, x);
        y.iter_mut().zip(&self.bias).for_each(|(a, b)| *a += b);
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub cardinality: usize,
    pub dim: usize,
    /// Row-major `cardinality x dim`.
    pub table: Vec<f64>,
}

/// Embeddings concatenated with continuous features, then `Linear + ReLU` layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub continuous: usize,
    pub embeddings: Vec<Embedding>,
    pub layers: Vec<Linear>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    /// Input to each layer; `inputs[0]` is the concatenated feature vector.
    pub inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Backbone {
    pub fn new(schema: &FeatureSchema, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let embeddings: Vec<Embedding> = schema
            .categorical
            .iter()
            .zip(&schema.embedding_dims)
            .map(|(c, &dim)| Embedding {
                cardinality: c.cardinality(),
                dim,
                table: vec![0.0; c.cardinality() * dim],
            })
            .collect();
        let mut layers = Vec::with_capacity(cfg.num_layers);
        let mut width = schema.input_dim();
        for _ in 0..cfg.num_layers {
            layers.push(Linear::new(width, cfg.hidden_dim));
            width = cfg.hidden_dim;
        }
        Ok(Backbone {
            continuous: schema.continuous_names.len(),
            embeddings,
            layers,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    fn init<R: Rng>(&mut self, rng: &mut R) {
        for e in &mut self.embeddings {
            uniform_fill(rng, &mut e.table, EMBEDDING_INIT);
        }
        for l in &mut self.layers {
            let bound = fan_in_bound(l.inputs);
            uniform_fill(rng, &mut l.weight, bound);
            uniform_fill(rng, &mut l.bias, bound);
        }
    }

    fn check(&self, record: &SurvivalRecord) -> Result<()> {
        if record.continuous.len() != self.continuous {
            return Err(Error::DimensionMismatch {
                context: "backbone continuous features",
                expected: self.continuous,
                actual: record.continuous.len(),
            });
        }
        if record.categorical.len() != self.embeddings.len() {
            return Err(Error::DimensionMismatch {
                context: "backbone categorical features",
                expected: self.embeddings.len(),
                actual: record.categorical.len(),
            });
        }
        for (e, &level) in self.embeddings.iter().zip(&record.categorical) {
            if level >= e.cardinality {
                return Err(Error::InvalidParameter(format!(
                    "categorical level {level} exceeds cardinality {}",
                    e.cardinality
                )));
            }
        }
        Ok(())
    }

    fn features(&self, record: &SurvivalRecord) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.layers[0].inputs);
        for (e, &level) in self.embeddings.iter().zip(&record.categorical) {
            v.extend_from_slice(&e.table[level * e.dim..(level + 1) * e.dim]);
        }
        v.extend_from_slice(&record.continuous);
        v
    }

    pub(crate) fn forward_cached(&self, record: &SurvivalRecord) -> BackboneCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = self.features(record);
        for l in &self.layers {
            let mut y = l.forward(&x);
            y.iter_mut().for_each(|v| *v = v.max(0.0));
            inputs.push(std::mem::replace(&mut x, y));
        }
        BackboneCache { inputs, output: x }
    }

    pub(crate) fn backward(
        &self,
        record: &SurvivalRecord,
        cache: &BackboneCache,
        d_out: &[f64],
        grads: &mut Backbone,
    ) {
        let mut dy = d_out.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let out = if li + 1 == self.layers.len() {
                &cache.output
            } else {
                &cache.inputs[li + 1]
            };
            for (d, &o) in dy.iter_mut().zip(out) {
                if o <= 0.0 {
                    *d = 0.0;
                }
            }
            let g = &mut grads.layers[li];
            outer_acc(&mut g.weight, l.inputs, &dy, &cache.inputs[li]);
            g.bias.iter_mut().zip(&dy).for_each(|(a, b)| *a += b);
            let mut dx = vec![0.0; l.inputs];
            matvec_t_acc(&l.weight, l.inputs, &dy, &mut dx);
            dy = dx;
        }
        let mut offset = 0;
        for ((e, g), &level) in self.embeddings.iter().zip(&mut grads.embeddings).zip(&record.categorical) {
            let row = &mut g.table[level * e.dim..(level + 1) * e.dim];
            row.iter_mut()
                .zip(&dy[offset..offset + e.dim])
                .for_each(|(a, b)| *a += b);
            offset += e.dim;
        }
    }

    fn visit_blocks(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, e) in self.embeddings.iter().enumerate() {
            f(&format!("backbone.embedding{i}"), &e.table);
        }
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("backbone.layer{i}.weight"), &l.weight);
            f(&format!("backbone.layer{i}.bias"), &l.bias);
        }
    }

    fn visit_blocks_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, e) in self.embeddings.iter_mut().enumerate() {
            f(&format!("backbone.embedding{i}"), &mut e.table);
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("backbone.layer{i}.weight"), &mut l.weight);
            f(&format!("backbone.layer{i}.bias"), &mut l.bias);
        }
    }
}

impl Params for Backbone {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.visit_blocks(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.visit_blocks_mut(f)
    }
}

/// Hidden representation for one (standardized) record.
pub fn backbone_forward(record: &SurvivalRecord, backbone: &Backbone) -> Result<Vec<f64>> {
    backbone.check(record)?;
    Ok(backbone.forward_cached(record).output)
}

/// Everything needed to predict: preprocessing state, backbone and head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub schema: FeatureSchema,
    pub grid: TimeGrid,
    pub backbone: Backbone,
    pub head: Head,
}

/// Per-record forward state.
#[derive(Debug, Clone)]
pub struct RecordPass {
    pub backbone: BackboneCache,
    pub head: HeadOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub experts: usize,
    pub kappa_init: f64,
}

impl Model {
    /// Builds and randomly initializes a model.
    pub fn new(
        schema: FeatureSchema,
        grid: TimeGrid,
        backbone: BackboneConfig,
        head: HeadSpec,
        seed: u64,
    ) -> Result<Self> {
        let mut bb = Backbone::new(&schema, backbone)?;
        let mut head = Head::new(head.kind, backbone.hidden_dim, grid.bins(), head.experts, head.kappa_init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        bb.init(&mut rng);
        head.init(&mut rng);
        Ok(Model {
            schema,
            grid,
            backbone: bb,
            head,
        })
    }

    pub fn bins(&self) -> usize {
        self.grid.bins()
    }

    pub fn forward(&self, record: &SurvivalRecord, prepared: Option<&[f64]>) -> RecordPass {
        let backbone = self.backbone.forward_cached(record);
        let head = self.head.forward(&backbone.output, prepared);
        RecordPass { backbone, head }
    }

    /// Standardizes `data` with the fitted schema and checks every record's shape.
    pub fn prepare(&self, data: &Dataset) -> Result<Dataset> {
        let std = apply_standardizer(&self.schema, data)?;
        for r in &std.records {
            self.backbone.check(r)?;
        }
        Ok(std)
    }

    /// Event PMFs for raw (unstandardized) records.
    pub fn predict(&self, data: &Dataset, exec: Execution) -> Result<Vec<Vec<f64>>> {
        let std = self.prepare(data)?;
        let prepared = self.head.prepare();
        Ok(exec.map(&std.records, |r| self.forward(r, prepared.as_deref()).head.pmf))
    }

    /// Routing weights for raw records (`None` for the MTLR head).
    pub fn predict_routing(&self, data: &Dataset, exec: Execution) -> Result<Option<Vec<Vec<f64>>>> {
        if self.head.router().is_none() {
            return Ok(None);
        }
        let std = self.prepare(data)?;
        let prepared = self.head.prepare();
        Ok(Some(exec.map(&std.records, |r| {
            self.forward(r, prepared.as_deref())
                .head
                .alpha
                .expect("MoE heads route")
        })))
    }

    pub fn zeros_like(&self) -> Model {
        let mut g = self.clone();
        g.fill(0.0);
        g
    }
}

impl Params for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.backbone.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.backbone.visit_mut(f);
        self.head.visit_mut(f);
    }
}
