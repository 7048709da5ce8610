//! Experts whose prototypes are re-read along a per-record time warp.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::warp::{
    canonical_point, constrain_backward, constrain_warp_params, interpolate_at,
    interpolation_indices, neutral_raw, InverseSolver, Warp,
};
use super::{mixture, mixture_backward, uniform_fill, ExpertPrototypes, Router};
use crate::error::{Error, Result};
use crate::math::{matvec, matvec_t_acc, outer_acc, softmax_backward, softmax_in_place};
use crate::mtlr::EventPmf;

/// Unconstrained warp values generated per expert.
pub const WARP_RAW_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustableHead {
    pub router: Router,
    pub prototypes: ExpertPrototypes,
    /// Row-major `(experts * 6) x hidden`.
    pub warp_weights: Vec<f64>,
    pub warp_bias: Vec<f64>,
    #[serde(default)]
    pub solver: InverseSolver,
}

#[derive(Debug, Clone)]
pub struct AdjustableCache {
    pub alpha: Vec<f64>,
    /// `experts * 6` raw warp values.
    pub raw: Vec<f64>,
    /// Internal times `tau_j` per expert, row-major `experts x bins`.
    pub taus: Vec<f64>,
    /// Per-expert warped PMFs, row-major.
    pub probs: Vec<f64>,
}

impl AdjustableHead {
    /// Generator weights start at zero with a bias giving a near-linear warp.
    pub fn new(experts: usize, hidden: usize, bins: usize, kappa: f64) -> Self {
        let bias = (0..experts).flat_map(|_| neutral_raw()).collect();
        AdjustableHead {
            router: Router::new(experts, hidden, kappa),
            prototypes: ExpertPrototypes::zeros(experts, bins),
            warp_weights: vec![0.0; experts * WARP_RAW_DIM * hidden],
            warp_bias: bias,
            solver: InverseSolver::Bisection,
        }
    }

    pub(crate) fn init<R: Rng>(&mut self, rng: &mut R) {
        self.router.init(rng);
        uniform_fill(rng, &mut self.prototypes.scores, 0.1);
        uniform_fill(rng, &mut self.warp_weights, 1e-3);
    }

    fn experts(&self) -> usize {
        self.router.experts
    }

    fn bins(&self) -> usize {
        self.prototypes.bins
    }

    fn raw_for(raw: &[f64], k: usize) -> [f64; WARP_RAW_DIM] {
        raw[k * WARP_RAW_DIM..(k + 1) * WARP_RAW_DIM]
            .try_into()
            .expect("six raw warp values")
    }

    /// Constrained warp for each expert at hidden state `x`.
    pub fn warps(&self, x: &[f64]) -> Vec<Warp> {
        let raw = self.raw_warp(x);
        (0..self.experts())
            .map(|k| Warp::new(constrain_warp_params(&Self::raw_for(&raw, k))))
            .collect()
    }

    fn raw_warp(&self, x: &[f64]) -> Vec<f64> {
        let mut raw = matvec(&self.warp_weights, self.experts() * WARP_RAW_DIM, self.router.hidden, x);
        raw.iter_mut().zip(&self.warp_bias).for_each(|(r, b)| *r += b);
        raw
    }

    pub(crate) fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, AdjustableCache) {
        let (n, m) = (self.experts(), self.bins());
        let alpha = self.router.forward(x);
        let raw = self.raw_warp(x);
        let mut taus = Vec::with_capacity(n * m);
        let mut probs = Vec::with_capacity(n * m);
        for k in 0..n {
            let warp = Warp::new(constrain_warp_params(&Self::raw_for(&raw, k)));
            let row_taus: Vec<f64> = (0..m)
                .map(|j| warp.inverse_with(canonical_point(j, m), self.solver))
                .collect();
            let mut scores = interpolate_at(self.prototypes.row(k), &row_taus);
            softmax_in_place(&mut scores);
            taus.extend(row_taus);
            probs.extend(scores);
        }
        let pmf = mixture(&alpha, &probs, m);
        let cache = AdjustableCache {
            alpha: alpha.clone(),
            raw,
            taus,
            probs,
        };
        (pmf, alpha, cache)
    }

    pub(crate) fn backward(
        &self,
        x: &[f64],
        cache: &AdjustableCache,
        dp: &[f64],
        d_alpha_extra: Option<&[f64]>,
        grads: &mut AdjustableHead,
        dx: &mut [f64],
    ) {
        let (n, m) = (self.experts(), self.bins());
        let (mut d_alpha, d_probs) = mixture_backward(&cache.alpha, &cache.probs, m, dp);
        if let Some(extra) = d_alpha_extra {
            d_alpha.iter_mut().zip(extra).for_each(|(a, e)| *a += e);
        }
        let mut d_raw = vec![0.0; n * WARP_RAW_DIM];
        let scale = (m - 1) as f64;
        for k in 0..n {
            let range = k * m..(k + 1) * m;
            let d_scores = softmax_backward(&cache.probs[range.clone()], &d_probs[range.clone()]);
            let row = self.prototypes.row(k);
            let raw_k = Self::raw_for(&cache.raw, k);
            let warp = Warp::new(constrain_warp_params(&raw_k));
            let g_row = &mut grads.prototypes.scores[range.clone()];
            let mut d_theta = [0.0; WARP_RAW_DIM];
            for (j, &ds) in d_scores.iter().enumerate() {
                let tau = cache.taus[k * m + j];
                let (i0, i1, w) = interpolation_indices(tau, m);
                g_row[i0] += (1.0 - w) * ds;
                g_row[i1] += w * ds;
                // The endpoints t = 0 and t = 1 are fixed by construction.
                if j == 0 || j + 1 == m || i0 == i1 {
                    continue;
                }
                let d_tau = ds * (row[i1] - row[i0]) * scale;
                if d_tau == 0.0 {
                    continue;
                }
                let grad = warp.inverse_gradient(tau);
                for (t, g) in d_theta.iter_mut().zip(grad.d_theta) {
                    *t += d_tau * g;
                }
            }
            let back = constrain_backward(&raw_k, &d_theta);
            d_raw[k * WARP_RAW_DIM..(k + 1) * WARP_RAW_DIM].copy_from_slice(&back);
        }
        outer_acc(&mut grads.warp_weights, self.router.hidden, &d_raw, x);
        grads.warp_bias.iter_mut().zip(&d_raw).for_each(|(g, d)| *g += d);
        matvec_t_acc(&self.warp_weights, self.router.hidden, &d_raw, dx);
        self.router.backward(x, &cache.alpha, &d_alpha, &mut grads.router, dx);
    }
}

/// Routed mixture of warped prototypes for a single hidden state.
pub fn adjustable_forward(x: &[f64], head: &AdjustableHead) -> Result<EventPmf> {
    if x.len() != head.router.hidden {
        return Err(Error::DimensionMismatch {
            context: "adjustable head input",
            expected: head.router.hidden,
            actual: x.len(),
        });
    }
    Ok(EventPmf(head.forward(x).0))
}
