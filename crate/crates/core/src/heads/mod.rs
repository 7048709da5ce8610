//! Mixture-of-experts prediction heads.
//!
//! Each head maps a backbone hidden state `x` (length `h`) to an event PMF
//! over `m` bins. The MoE heads share a softmax router
//! `alpha = softmax(W x / kappa)` and mix per-expert PMFs `p = sum_k alpha_k M'_k`;
//! they differ in how the expert rows `M'_k` are produced:
//!
//! * [`FixedHead`]: learned prototypes, identical for every record;
//! * [`AdjustableHead`]: prototypes re-read along a per-record monotone time warp;
//! * [`PersonalizedHead`]: rows generated from chunks of a projected hidden state.
//!
//! [`MtlrHead`] is the single linear increment-logit baseline.

mod adjustable;
mod personalized;
pub mod warp;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adjustable::{adjustable_forward, AdjustableCache, AdjustableHead, WARP_RAW_DIM};
pub use personalized::{personalized_forward, PersonalizedCache, PersonalizedHead};
pub use warp::{
    constrain_warp_params, resample_prototype, warp_forward, warp_inverse,
    warp_inverse_gradients, InverseGradient, InverseSolver, Warp, WarpParams,
};

use crate::error::{Error, Result};
use crate::math::{
    matvec, matvec_t_acc, outer_acc, sigmoid, softmax, softmax_backward, softmax_in_place,
    softplus, softplus_inverse,
};
use crate::mtlr::{logits_to_pmf, EventPmf, IncrementLogits};
use crate::params::Params;

pub fn uniform_fill<R: Rng>(rng: &mut R, v: &mut [f64], bound: f64) {
    for x in v.iter_mut() {
        *x = rng.random_range(-bound..=bound);
    }
}

pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Softmax router with a softplus-parameterized temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Router {
    pub experts: usize,
    pub hidden: usize,
    /// Row-major `experts x hidden`.
    pub weights: Vec<f64>,
    pub kappa_raw: f64,
}

impl Router {
    pub fn new(experts: usize, hidden: usize, kappa: f64) -> Self {
        Router {
            experts,
            hidden,
            weights: vec![0.0; experts * hidden],
            kappa_raw: softplus_inverse(kappa),
        }
    }

    pub fn with_weights(experts: usize, hidden: usize, weights: Vec<f64>, kappa: f64) -> Result<Self> {
        if weights.len() != experts * hidden {
            return Err(Error::DimensionMismatch {
                context: "router weights",
                expected: experts * hidden,
                actual: weights.len(),
            });
        }
        if !(kappa > 0.0) {
            return Err(Error::InvalidParameter(format!("kappa must be positive, got {kappa}")));
        }
        Ok(Router {
            weights,
            ..Router::new(experts, hidden, kappa)
        })
    }

    pub fn kappa(&self) -> f64 {
        softplus(self.kappa_raw)
    }

    pub(crate) fn init<R: Rng>(&mut self, rng: &mut R) {
        uniform_fill(rng, &mut self.weights, fan_in_bound(self.hidden));
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let kappa = self.kappa();
        let mut s = matvec(&self.weights, self.experts, self.hidden, x);
        s.iter_mut().for_each(|v| *v /= kappa);
        softmax_in_place(&mut s);
        s
    }

    pub fn backward(
        &self,
        x: &[f64],
        alpha: &[f64],
        d_alpha: &[f64],
        grads: &mut Router,
        dx: &mut [f64],
    ) {
        let kappa = self.kappa();
        let ds = softmax_backward(alpha, d_alpha);
        let scaled: Vec<f64> = ds.iter().map(|g| g / kappa).collect();
        outer_acc(&mut grads.weights, self.hidden, &scaled, x);
        matvec_t_acc(&self.weights, self.hidden, &scaled, dx);
        // s_i = raw_i / kappa, so ds_i/dkappa = -s_i / kappa
        let raw = matvec(&self.weights, self.experts, self.hidden, x);
        let d_kappa: f64 = -ds.iter().zip(&raw).map(|(g, r)| g * r).sum::<f64>() / (kappa * kappa);
        grads.kappa_raw += d_kappa * sigmoid(self.kappa_raw);
    }

    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}router.weights"), &self.weights);
        f(&format!("{prefix}router.kappa_raw"), std::slice::from_ref(&self.kappa_raw));
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}router.weights"), &mut self.weights);
        f(&format!("{prefix}router.kappa_raw"), std::slice::from_mut(&mut self.kappa_raw));
    }
}

/// `alpha = softmax(x W^T / kappa)`.
pub fn route(x: &[f64], router: &Router) -> Result<Vec<f64>> {
    if x.len() != router.hidden {
        return Err(Error::DimensionMismatch {
            context: "route input",
            expected: router.hidden,
            actual: x.len(),
        });
    }
    Ok(router.forward(x))
}

/// Unnormalized expert scores; each row maps to a PMF by softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPrototypes {
    pub experts: usize,
    pub bins: usize,
    /// Row-major `experts x bins`.
    pub scores: Vec<f64>,
}

impl ExpertPrototypes {
    pub fn new(experts: usize, bins: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != experts * bins {
            return Err(Error::DimensionMismatch {
                context: "expert prototypes",
                expected: experts * bins,
                actual: scores.len(),
            });
        }
        Ok(ExpertPrototypes {
            experts,
            bins,
            scores,
        })
    }

    pub fn zeros(experts: usize, bins: usize) -> Self {
        ExpertPrototypes {
            experts,
            bins,
            scores: vec![0.0; experts * bins],
        }
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.scores[k * self.bins..(k + 1) * self.bins]
    }

    /// Row-wise softmax, row-major.
    pub fn normalized(&self) -> Vec<f64> {
        let mut out = self.scores.clone();
        for row in out.chunks_exact_mut(self.bins) {
            softmax_in_place(row);
        }
        out
    }
}

/// `p = sum_k alpha_k rows_k` for row-major `rows`.
pub fn mixture(alpha: &[f64], rows: &[f64], bins: usize) -> Vec<f64> {
    let mut p = vec![0.0; bins];
    for (a, row) in alpha.iter().zip(rows.chunks_exact(bins)) {
        for (pj, rj) in p.iter_mut().zip(row) {
            *pj += a * rj;
        }
    }
    p
}

/// Returns `(dL/dalpha, dL/drows)` for [`mixture`].
pub fn mixture_backward(alpha: &[f64], rows: &[f64], bins: usize, dp: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d_alpha = rows
        .chunks_exact(bins)
        .map(|row| row.iter().zip(dp).map(|(r, g)| r * g).sum())
        .collect();
    let mut d_rows = vec![0.0; rows.len()];
    for (a, drow) in alpha.iter().zip(d_rows.chunks_exact_mut(bins)) {
        for (d, g) in drow.iter_mut().zip(dp) {
            *d = a * g;
        }
    }
    (d_alpha, d_rows)
}

/// `lambda * n * sum_i abar_i^2` where `abar` is the batch-mean routing distribution.
pub fn load_balance_loss(alphas: &[Vec<f64>], lambda_lb: f64) -> Result<f64> {
    let mean = mean_routing(alphas)?;
    let n = mean.len() as f64;
    Ok(lambda_lb * n * mean.iter().map(|a| a * a).sum::<f64>())
}

/// Gradient of [`load_balance_loss`] with respect to each record's `alpha`
/// (identical for every record in the batch).
pub fn load_balance_grad(alphas: &[Vec<f64>], lambda_lb: f64) -> Result<Vec<f64>> {
    let mean = mean_routing(alphas)?;
    let n = mean.len() as f64;
    let b = alphas.len() as f64;
    Ok(mean.iter().map(|a| 2.0 * lambda_lb * n * a / b).collect())
}

pub fn mean_routing(alphas: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = alphas
        .first()
        .ok_or_else(|| Error::Empty("load-balance batch".into()))?;
    let mut mean = vec![0.0; first.len()];
    for a in alphas {
        if a.len() != mean.len() {
            return Err(Error::DimensionMismatch {
                context: "routing weights",
                expected: mean.len(),
                actual: a.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(a) {
            *m += v;
        }
    }
    let b = alphas.len() as f64;
    mean.iter_mut().for_each(|m| *m /= b);
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedHead {
    pub router: Router,
    pub prototypes: ExpertPrototypes,
}

/// Half-width of the uniform init of fixed-head prototype scores. Wide enough
/// that experts start with visibly different event distributions.
pub const PROTOTYPE_INIT: f64 = 1.0;

impl FixedHead {
    pub fn new(experts: usize, hidden: usize, bins: usize, kappa: f64) -> Self {
        FixedHead {
            router: Router::new(experts, hidden, kappa),
            prototypes: ExpertPrototypes::zeros(experts, bins),
        }
    }

    pub(crate) fn init<R: Rng>(&mut self, rng: &mut R) {
        self.router.init(rng);
        uniform_fill(rng, &mut self.prototypes.scores, PROTOTYPE_INIT);
    }
}

/// `p = alpha M'`.
pub fn fixed_forward(x: &[f64], router: &Router, experts: &ExpertPrototypes) -> Result<EventPmf> {
    if router.experts != experts.experts {
        return Err(Error::DimensionMismatch {
            context: "fixed head experts",
            expected: router.experts,
            actual: experts.experts,
        });
    }
    let alpha = route(x, router)?;
    Ok(EventPmf(mixture(&alpha, &experts.normalized(), experts.bins)))
}

/// Direct linear map from `x` to increment logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtlrHead {
    pub hidden: usize,
    pub bins: usize,
    /// Row-major `bins x hidden`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl MtlrHead {
    pub fn new(hidden: usize, bins: usize) -> Self {
        MtlrHead {
            hidden,
            bins,
            weights: vec![0.0; hidden * bins],
            bias: vec![0.0; bins],
        }
    }

    pub(crate) fn init<R: Rng>(&mut self, rng: &mut R) {
        uniform_fill(rng, &mut self.weights, fan_in_bound(self.hidden));
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut z = matvec(&self.weights, self.bins, self.hidden, x);
        z.iter_mut().zip(&self.bias).for_each(|(a, b)| *a += b);
        logits_to_pmf(&IncrementLogits(z)).0
    }

    fn backward(&self, x: &[f64], p: &[f64], dp: &[f64], grads: &mut MtlrHead, dx: &mut [f64]) {
        let du = softmax_backward(p, dp);
        // u is the suffix sum of z: dz_t = sum_{k <= t} du_k
        let mut dz = vec![0.0; self.bins];
        let mut acc = 0.0;
        for (t, d) in du.iter().enumerate() {
            acc += d;
            dz[t] = acc;
        }
        outer_acc(&mut grads.weights, self.hidden, &dz, x);
        grads.bias.iter_mut().zip(&dz).for_each(|(g, d)| *g += d);
        matvec_t_acc(&self.weights, self.hidden, &dz, dx);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Mtlr,
    Fixed,
    Adjustable,
    Personalized,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [
        HeadKind::Mtlr,
        HeadKind::Fixed,
        HeadKind::Adjustable,
        HeadKind::Personalized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Mtlr => "mtlr",
            HeadKind::Fixed => "fixed",
            HeadKind::Adjustable => "adjustable",
            HeadKind::Personalized => "personalized",
        }
    }

    pub fn is_moe(self) -> bool {
        self != HeadKind::Mtlr
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown head '{s}' (expected one of mtlr, fixed, adjustable, personalized)"
                ))
            })
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Head {
    Mtlr(MtlrHead),
    Fixed(FixedHead),
    Adjustable(AdjustableHead),
    Personalized(PersonalizedHead),
}

#[derive(Debug, Clone)]
pub enum HeadCache {
    Mtlr,
    Fixed { normalized: Vec<f64> },
    Adjustable(AdjustableCache),
    Personalized(PersonalizedCache),
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub pmf: Vec<f64>,
    /// Routing weights (absent for the MTLR head).
    pub alpha: Option<Vec<f64>>,
    pub cache: HeadCache,
}

impl Head {
    /// Builds a zero-initialized head; fails if `personalized` has `hidden % experts != 0`.
    pub fn new(kind: HeadKind, hidden: usize, bins: usize, experts: usize, kappa: f64) -> Result<Self> {
        if kind.is_moe() && experts == 0 {
            return Err(Error::Config("number of experts must be at least 1".into()));
        }
        Ok(match kind {
            HeadKind::Mtlr => Head::Mtlr(MtlrHead::new(hidden, bins)),
            HeadKind::Fixed => Head::Fixed(FixedHead::new(experts, hidden, bins, kappa)),
            HeadKind::Adjustable => {
                if bins < 2 {
                    return Err(Error::Config("adjustable head needs at least 2 time bins".into()));
                }
                Head::Adjustable(AdjustableHead::new(experts, hidden, bins, kappa))
            }
            HeadKind::Personalized => {
                Head::Personalized(PersonalizedHead::new(experts, hidden, bins, kappa)?)
            }
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Mtlr(_) => HeadKind::Mtlr,
            Head::Fixed(_) => HeadKind::Fixed,
            Head::Adjustable(_) => HeadKind::Adjustable,
            Head::Personalized(_) => HeadKind::Personalized,
        }
    }

    pub fn experts(&self) -> usize {
        match self {
            Head::Mtlr(_) => 1,
            Head::Fixed(h) => h.router.experts,
            Head::Adjustable(h) => h.router.experts,
            Head::Personalized(h) => h.router.experts,
        }
    }

    pub fn router(&self) -> Option<&Router> {
        match self {
            Head::Mtlr(_) => None,
            Head::Fixed(h) => Some(&h.router),
            Head::Adjustable(h) => Some(&h.router),
            Head::Personalized(h) => Some(&h.router),
        }
    }

    pub(crate) fn init<R: Rng>(&mut self, rng: &mut R) {
        match self {
            Head::Mtlr(h) => h.init(rng),
            Head::Fixed(h) => h.init(rng),
            Head::Adjustable(h) => h.init(rng),
            Head::Personalized(h) => h.init(rng),
        }
    }

    /// Per-batch precomputation shared by every record (normalized prototypes).
    pub fn prepare(&self) -> Option<Vec<f64>> {
        match self {
            Head::Fixed(h) => Some(h.prototypes.normalized()),
            _ => None,
        }
    }

    pub fn forward(&self, x: &[f64], prepared: Option<&[f64]>) -> HeadOutput {
        match self {
            Head::Mtlr(h) => HeadOutput {
                pmf: h.forward(x),
                alpha: None,
                cache: HeadCache::Mtlr,
            },
            Head::Fixed(h) => {
                let normalized = match prepared {
                    Some(n) => n.to_vec(),
                    None => h.prototypes.normalized(),
                };
                let alpha = h.router.forward(x);
                let pmf = mixture(&alpha, &normalized, h.prototypes.bins);
                HeadOutput {
                    pmf,
                    alpha: Some(alpha),
                    cache: HeadCache::Fixed { normalized },
                }
            }
            Head::Adjustable(h) => {
                let (pmf, alpha, cache) = h.forward(x);
                HeadOutput {
                    pmf,
                    alpha: Some(alpha),
                    cache: HeadCache::Adjustable(cache),
                }
            }
            Head::Personalized(h) => {
                let (pmf, alpha, cache) = h.forward(x);
                HeadOutput {
                    pmf,
                    alpha: Some(alpha),
                    cache: HeadCache::Personalized(cache),
                }
            }
        }
    }

    /// Accumulates parameter gradients into `grads` and returns `dL/dx`.
    ///
    /// `d_alpha_extra` is an additional upstream gradient on the routing
    /// weights (the load-balancing term).
    pub fn backward(
        &self,
        x: &[f64],
        out: &HeadOutput,
        dp: &[f64],
        d_alpha_extra: Option<&[f64]>,
        grads: &mut Head,
    ) -> Vec<f64> {
        let mut dx = vec![0.0; x.len()];
        match (self, grads, &out.cache) {
            (Head::Mtlr(h), Head::Mtlr(g), HeadCache::Mtlr) => h.backward(x, &out.pmf, dp, g, &mut dx),
            (Head::Fixed(h), Head::Fixed(g), HeadCache::Fixed { normalized }) => {
                let alpha = out.alpha.as_deref().expect("fixed head routes");
                let bins = h.prototypes.bins;
                let (mut d_alpha, d_rows) = mixture_backward(alpha, normalized, bins, dp);
                if let Some(extra) = d_alpha_extra {
                    d_alpha.iter_mut().zip(extra).for_each(|(a, e)| *a += e);
                }
                for k in 0..h.prototypes.experts {
                    let range = k * bins..(k + 1) * bins;
                    let d_scores = softmax_backward(&normalized[range.clone()], &d_rows[range.clone()]);
                    g.prototypes.scores[range]
                        .iter_mut()
                        .zip(&d_scores)
                        .for_each(|(a, b)| *a += b);
                }
                h.router.backward(x, alpha, &d_alpha, &mut g.router, &mut dx);
            }
            (Head::Adjustable(h), Head::Adjustable(g), HeadCache::Adjustable(c)) => {
                h.backward(x, c, dp, d_alpha_extra, g, &mut dx)
            }
            (Head::Personalized(h), Head::Personalized(g), HeadCache::Personalized(c)) => {
                h.backward(x, c, dp, d_alpha_extra, g, &mut dx)
            }
            _ => panic!("head/gradient/cache variants do not match"),
        }
        dx
    }
}

impl Params for Head {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        match self {
            Head::Mtlr(h) => {
                f("head.weights", &h.weights);
                f("head.bias", &h.bias);
            }
            Head::Fixed(h) => {
                h.router.visit_named("head.", f);
                f("head.prototypes", &h.prototypes.scores);
            }
            Head::Adjustable(h) => {
                h.router.visit_named("head.", f);
                f("head.prototypes", &h.prototypes.scores);
                f("head.warp.weights", &h.warp_weights);
                f("head.warp.bias", &h.warp_bias);
            }
            Head::Personalized(h) => {
                h.router.visit_named("head.", f);
                f("head.router_proj", &h.router_proj);
                f("head.expert_proj", &h.expert_proj);
                f("head.chunk_weights", &h.chunk_weights);
                f("head.chunk_bias", &h.chunk_bias);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            Head::Mtlr(h) => {
                f("head.weights", &mut h.weights);
                f("head.bias", &mut h.bias);
            }
            Head::Fixed(h) => {
                h.router.visit_named_mut("head.", f);
                f("head.prototypes", &mut h.prototypes.scores);
            }
            Head::Adjustable(h) => {
                h.router.visit_named_mut("head.", f);
                f("head.prototypes", &mut h.prototypes.scores);
                f("head.warp.weights", &mut h.warp_weights);
                f("head.warp.bias", &mut h.warp_bias);
            }
            Head::Personalized(h) => {
                h.router.visit_named_mut("head.", f);
                f("head.router_proj", &mut h.router_proj);
                f("head.expert_proj", &mut h.expert_proj);
                f("head.chunk_weights", &mut h.chunk_weights);
                f("head.chunk_bias", &mut h.chunk_bias);
            }
        }
    }
}

/// Row-wise softmax of a row-major matrix, returned as a new buffer.
pub(crate) fn softmax_rows(scores: &[f64], bins: usize) -> Vec<f64> {
    scores.chunks_exact(bins).flat_map(softmax).collect()
}
