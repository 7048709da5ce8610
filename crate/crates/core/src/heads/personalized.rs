//! Experts generated per record from chunks of a projected hidden state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{fan_in_bound, mixture, mixture_backward, softmax_rows, uniform_fill, Router};
use crate::error::{Error, Result};
use crate::math::{matvec, matvec_t_acc, outer_acc, softmax_backward};
use crate::mtlr::EventPmf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizedHead {
    /// Routes on the projected state `x_r = W_r x`.
    pub router: Router,
    pub bins: usize,
    /// `W_r`, row-major `hidden x hidden`.
    pub router_proj: Vec<f64>,
    /// `W_e`, row-major `hidden x hidden`.
    pub expert_proj: Vec<f64>,
    /// `L_k` stacked over experts, each row-major `bins x chunk`.
    pub chunk_weights: Vec<f64>,
    /// `b_k` stacked over experts.
    pub chunk_bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PersonalizedCache {
    pub alpha: Vec<f64>,
    pub x_r: Vec<f64>,
    pub x_e: Vec<f64>,
    pub probs: Vec<f64>,
}

fn divisors(h: usize) -> Vec<usize> {
    (1..=h).filter(|d| h % d == 0).collect()
}

impl PersonalizedHead {
    pub fn new(experts: usize, hidden: usize, bins: usize, kappa: f64) -> Result<Self> {
        if experts == 0 || hidden % experts != 0 {
            return Err(Error::Config(format!(
                "personalized head needs hidden width {hidden} divisible by the number of experts {experts}; valid expert counts: {:?}",
                divisors(hidden)
            )));
        }
        let chunk = hidden / experts;
        Ok(PersonalizedHead {
            router: Router::new(experts, hidden, kappa),
            bins,
            router_proj: vec![0.0; hidden * hidden],
            expert_proj: vec![0.0; hidden * hidden],
            chunk_weights: vec![0.0; experts * bins * chunk],
            chunk_bias: vec![0.0; experts * bins],
        })
    }

    pub(crate) fn init<R: Rng>(&mut self, rng: &mut R) {
        let h = self.hidden();
        self.router.init(rng);
        uniform_fill(rng, &mut self.router_proj, fan_in_bound(h));
        uniform_fill(rng, &mut self.expert_proj, fan_in_bound(h));
        let bound = fan_in_bound(self.chunk());
        uniform_fill(rng, &mut self.chunk_weights, bound);
    }

    pub fn hidden(&self) -> usize {
        self.router.hidden
    }

    pub fn chunk(&self) -> usize {
        self.hidden() / self.router.experts
    }

    /// Unnormalized expert scores `M_k = L_k x_e^(k) + b_k`, row-major.
    fn expert_scores(&self, x_e: &[f64]) -> Vec<f64> {
        let (m, c) = (self.bins, self.chunk());
        let mut out = Vec::with_capacity(self.router.experts * m);
        for (k, xk) in x_e.chunks_exact(c).enumerate() {
            let lk = &self.chunk_weights[k * m * c..(k + 1) * m * c];
            let mut s = matvec(lk, m, c, xk);
            s.iter_mut()
                .zip(&self.chunk_bias[k * m..(k + 1) * m])
                .for_each(|(a, b)| *a += b);
            out.extend(s);
        }
        out
    }

    pub(crate) fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, PersonalizedCache) {
        let h = self.hidden();
        let x_r = matvec(&self.router_proj, h, h, x);
        let x_e = matvec(&self.expert_proj, h, h, x);
        let alpha = self.router.forward(&x_r);
        let probs = softmax_rows(&self.expert_scores(&x_e), self.bins);
        let pmf = mixture(&alpha, &probs, self.bins);
        let cache = PersonalizedCache {
            alpha: alpha.clone(),
            x_r,
            x_e,
            probs,
        };
        (pmf, alpha, cache)
    }

    pub(crate) fn backward(
        &self,
        x: &[f64],
        cache: &PersonalizedCache,
        dp: &[f64],
        d_alpha_extra: Option<&[f64]>,
        grads: &mut PersonalizedHead,
        dx: &mut [f64],
    ) {
        let (h, m, c) = (self.hidden(), self.bins, self.chunk());
        let (mut d_alpha, d_probs) = mixture_backward(&cache.alpha, &cache.probs, m, dp);
        if let Some(extra) = d_alpha_extra {
            d_alpha.iter_mut().zip(extra).for_each(|(a, e)| *a += e);
        }
        let mut d_xr = vec![0.0; h];
        self.router
            .backward(&cache.x_r, &cache.alpha, &d_alpha, &mut grads.router, &mut d_xr);
        outer_acc(&mut grads.router_proj, h, &d_xr, x);
        matvec_t_acc(&self.router_proj, h, &d_xr, dx);

        let mut d_xe = vec![0.0; h];
        for k in 0..self.router.experts {
            let rows = k * m..(k + 1) * m;
            let ds = softmax_backward(&cache.probs[rows.clone()], &d_probs[rows.clone()]);
            let xk = &cache.x_e[k * c..(k + 1) * c];
            let wk = k * m * c..(k + 1) * m * c;
            outer_acc(&mut grads.chunk_weights[wk.clone()], c, &ds, xk);
            grads.chunk_bias[rows].iter_mut().zip(&ds).for_each(|(g, d)| *g += d);
            matvec_t_acc(&self.chunk_weights[wk], c, &ds, &mut d_xe[k * c..(k + 1) * c]);
        }
        outer_acc(&mut grads.expert_proj, h, &d_xe, x);
        matvec_t_acc(&self.expert_proj, h, &d_xe, dx);
    }
}

/// Routed mixture of per-record generated experts for a single hidden state.
pub fn personalized_forward(x: &[f64], head: &PersonalizedHead) -> Result<EventPmf> {
    if x.len() != head.hidden() {
        return Err(Error::DimensionMismatch {
            context: "personalized head input",
            expected: head.hidden(),
            actual: x.len(),
        });
    }
    Ok(EventPmf(head.forward(x).0))
}
