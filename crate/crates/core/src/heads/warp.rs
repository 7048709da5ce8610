//! Two-logistic monotone time warp.
//!
//! `F(u) = w_1 s(a_1 (u - c_1)) + w_2 s(a_2 (u - c_2))` with `s` the logistic
//! function, normalized to a bijection of `[0, 1]` by
//! `phi(u) = (F(u) - F(0)) / (F(1) - F(0))`. The inverse `psi = phi^{-1}` is
//! evaluated by bisection; its parameter gradients come from the implicit
//! function theorem applied at the root, never from the bisection iterates.
//!
//! Parameter vectors are ordered `[w_1, w_2, a_1, a_2, c_1, c_2]`.

use crate::error::{Error, Result};
use crate::math::{sigmoid, softmax};

pub const SLOPE_MIN: f64 = 0.1;
pub const SLOPE_MAX: f64 = 35.0;
pub const CENTER_LO: f64 = 0.02;
pub const CENTER_HI: f64 = 0.98;
pub const CENTER_GAP: f64 = 0.02;
/// Floor for the endpoint-normalization denominator `F(1) - F(0)`.
pub const DENOM_FLOOR: f64 = 1e-6;
/// Floor for `dphi/dtau` in the implicit-function gradient.
pub const SLOPE_FLOOR: f64 = 1e-8;
pub const BISECTION_STEPS: usize = 20;

/// How the inverse warp is solved.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InverseSolver {
    /// Fixed [`BISECTION_STEPS`] halvings, returning the bracket midpoint.
    #[default]
    Bisection,
    /// Halve until the bracket stops shrinking in double precision. The result
    /// is a smooth function of the parameters to ~1e-16, which finite-difference
    /// checks of the implicit gradient need.
    Converged,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpParams {
    pub weights: [f64; 2],
    pub slopes: [f64; 2],
    pub centers: [f64; 2],
}

impl WarpParams {
    pub fn new(weights: [f64; 2], slopes: [f64; 2], centers: [f64; 2]) -> Result<Self> {
        let wp = WarpParams {
            weights,
            slopes,
            centers,
        };
        wp.validate()?;
        Ok(wp)
    }

    pub fn validate(&self) -> Result<()> {
        let [w1, w2] = self.weights;
        if !(w1 > 0.0 && w2 > 0.0) || ((w1 + w2) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "warp weights must be positive and sum to 1, got {:?}",
                self.weights
            )));
        }
        if self
            .slopes
            .iter()
            .any(|&a| !(SLOPE_MIN..=SLOPE_MAX).contains(&a))
        {
            return Err(Error::InvalidParameter(format!(
                "warp slopes must lie in [{SLOPE_MIN}, {SLOPE_MAX}], got {:?}",
                self.slopes
            )));
        }
        let [c1, c2] = self.centers;
        if !(0.0 < c1 && c1 < c2 && c2 < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "warp centers must satisfy 0 < c1 < c2 < 1, got {:?}",
                self.centers
            )));
        }
        Ok(())
    }

    /// The warp produced by [`neutral_raw`]: symmetric centers and near-minimal slopes.
    pub fn neutral() -> Self {
        constrain_warp_params(&neutral_raw())
    }

    /// `F(u) - F(0)` without cancellation, via
    /// `s(x) - s(y) = s(x) s(-y) (1 - e^(y-x))`.
    fn increment(&self, u: f64) -> f64 {
        (0..2)
            .map(|r| {
                let x = self.slopes[r] * (u - self.centers[r]);
                let y = -self.slopes[r] * self.centers[r];
                self.weights[r] * sigmoid(x) * sigmoid(-y) * -(-self.slopes[r] * u).exp_m1()
            })
            .sum()
    }

    fn density(&self, u: f64) -> f64 {
        (0..2)
            .map(|r| {
                let s = sigmoid(self.slopes[r] * (u - self.centers[r]));
                self.weights[r] * self.slopes[r] * s * (1.0 - s)
            })
            .sum()
    }

    /// `dF(u)/dtheta`.
    fn cdf_partials(&self, u: f64) -> [f64; 6] {
        let mut g = [0.0; 6];
        for r in 0..2 {
            let d = u - self.centers[r];
            let s = sigmoid(self.slopes[r] * d);
            let ds = s * (1.0 - s);
            g[r] = s;
            g[2 + r] = self.weights[r] * d * ds;
            g[4 + r] = -self.weights[r] * self.slopes[r] * ds;
        }
        g
    }
}

/// A warp with its endpoint normalization precomputed.
#[derive(Debug, Clone, Copy)]
pub struct Warp {
    pub params: WarpParams,
    denom: f64,
    clipped: bool,
}

/// `dtau*/dtheta` at a root of `phi(tau) = t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGradient {
    pub d_theta: [f64; 6],
    /// True when `dphi/dtau` fell below [`SLOPE_FLOOR`] and was clamped.
    pub clamped: bool,
}

impl Warp {
    pub fn new(params: WarpParams) -> Self {
        let raw = params.increment(1.0);
        Warp {
            params,
            denom: raw.max(DENOM_FLOOR),
            clipped: raw < DENOM_FLOOR,
        }
    }

    pub fn forward(&self, u: f64) -> f64 {
        self.params.increment(u) / self.denom
    }

    pub fn derivative(&self, u: f64) -> f64 {
        self.params.density(u) / self.denom
    }

    /// `dphi(u)/dtheta` at fixed `u`, including the endpoint-normalization terms.
    pub fn param_partials(&self, u: f64) -> [f64; 6] {
        let gu = self.params.cdf_partials(u);
        let g0 = self.params.cdf_partials(0.0);
        let g1 = self.params.cdf_partials(1.0);
        let phi = self.forward(u);
        let mut out = [0.0; 6];
        for i in 0..6 {
            let mut num = gu[i] - g0[i];
            if !self.clipped {
                num -= phi * (g1[i] - g0[i]);
            }
            out[i] = num / self.denom;
        }
        out
    }

    pub fn inverse(&self, t: f64) -> f64 {
        self.inverse_with(t, InverseSolver::Bisection)
    }

    pub fn inverse_with(&self, t: f64, solver: InverseSolver) -> f64 {
        // phi fixes both endpoints; bisecting there only picks up rounding in the flat tails
        if t <= 0.0 {
            return 0.0;
        }
        if t >= 1.0 {
            return 1.0;
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let steps = match solver {
            InverseSolver::Bisection => BISECTION_STEPS,
            InverseSolver::Converged => 200,
        };
        for _ in 0..steps {
            let mid = 0.5 * (lo + hi);
            if solver == InverseSolver::Converged && (mid <= lo || mid >= hi) {
                break;
            }
            if self.forward(mid) - t < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn inverse_gradient(&self, tau: f64) -> InverseGradient {
        let slope = self.derivative(tau);
        let clamped = slope < SLOPE_FLOOR;
        if clamped {
            log::warn!("near-flat warp at tau={tau}: dphi/dtau={slope:e} clamped to {SLOPE_FLOOR:e}");
        }
        let slope = slope.max(SLOPE_FLOOR);
        let partials = self.param_partials(tau);
        let mut d_theta = [0.0; 6];
        for i in 0..6 {
            d_theta[i] = -partials[i] / slope;
        }
        InverseGradient { d_theta, clamped }
    }
}

pub fn warp_forward(u: f64, wp: &WarpParams) -> f64 {
    Warp::new(*wp).forward(u)
}

pub fn warp_inverse(t: f64, wp: &WarpParams) -> f64 {
    Warp::new(*wp).inverse(t)
}

pub fn warp_inverse_gradients(tau_star: f64, wp: &WarpParams) -> InverseGradient {
    Warp::new(*wp).inverse_gradient(tau_star)
}

const CENTER_SPAN: f64 = CENTER_HI - CENTER_GAP - CENTER_LO;

/// Maps six unconstrained reals `[w_1, w_2, a_1, a_2, c_1, c_2]` onto valid warp parameters.
///
/// Weights use a 2-way softmax, slopes a scaled sigmoid onto
/// `[SLOPE_MIN, SLOPE_MAX]`, and centers a stick-breaking map that keeps
/// `CENTER_LO < c_1`, `c_1 + CENTER_GAP < c_2 < CENTER_HI`.
pub fn constrain_warp_params(raw: &[f64; 6]) -> WarpParams {
    let w = softmax(&raw[0..2]);
    let slopes = [
        SLOPE_MIN + (SLOPE_MAX - SLOPE_MIN) * sigmoid(raw[2]),
        SLOPE_MIN + (SLOPE_MAX - SLOPE_MIN) * sigmoid(raw[3]),
    ];
    let c1 = CENTER_LO + CENTER_SPAN * sigmoid(raw[4]);
    let c2 = c1 + CENTER_GAP + sigmoid(raw[5]) * (CENTER_HI - CENTER_GAP - c1);
    WarpParams {
        weights: [w[0], w[1]],
        slopes,
        centers: [c1, c2],
    }
}

/// Pulls `dL/dtheta` back through [`constrain_warp_params`] to `dL/draw`.
pub fn constrain_backward(raw: &[f64; 6], d_theta: &[f64; 6]) -> [f64; 6] {
    let w = softmax(&raw[0..2]);
    let mut out = [0.0; 6];
    let dot = w[0] * d_theta[0] + w[1] * d_theta[1];
    out[0] = w[0] * (d_theta[0] - dot);
    out[1] = w[1] * (d_theta[1] - dot);
    for r in 0..2 {
        let s = sigmoid(raw[2 + r]);
        out[2 + r] = d_theta[2 + r] * (SLOPE_MAX - SLOPE_MIN) * s * (1.0 - s);
    }
    let s1 = sigmoid(raw[4]);
    let s2 = sigmoid(raw[5]);
    let c1 = CENTER_LO + CENTER_SPAN * s1;
    let dc1_total = d_theta[4] + d_theta[5] * (1.0 - s2);
    out[4] = dc1_total * CENTER_SPAN * s1 * (1.0 - s1);
    out[5] = d_theta[5] * s2 * (1.0 - s2) * (CENTER_HI - CENTER_GAP - c1);
    out
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Raw values giving an almost-linear warp: equal weights, slopes near
/// `SLOPE_MIN`, centers at 0.3 and 0.7.
pub fn neutral_raw() -> [f64; 6] {
    let (c1, c2) = (0.3, 0.7);
    [
        0.0,
        0.0,
        -6.0,
        -6.0,
        logit((c1 - CENTER_LO) / CENTER_SPAN),
        logit((c2 - c1 - CENTER_GAP) / (CENTER_HI - CENTER_GAP - c1)),
    ]
}

/// Canonical grid point `t_j = j / (m - 1)`.
pub fn canonical_point(j: usize, m: usize) -> f64 {
    if m <= 1 {
        0.0
    } else {
        j as f64 / (m - 1) as f64
    }
}

/// Linear interpolation position for an internal time `tau`: `(i0, i1, frac)`.
pub fn interpolation_indices(tau: f64, m: usize) -> (usize, usize, f64) {
    let u = (m - 1) as f64 * tau;
    let i0 = (u.floor().max(0.0) as usize).min(m - 1);
    let i1 = (i0 + 1).min(m - 1);
    (i0, i1, u - i0 as f64)
}

/// Prototype scores re-read along the warped axis: `M~_j = (1-w) M_{i0} + w M_{i1}`
/// with `u = (m-1) psi(t_j)`.
pub fn resample_prototype(row: &[f64], wp: &WarpParams) -> Vec<f64> {
    resample_with(row, &Warp::new(*wp), InverseSolver::Bisection).0
}

/// Resampled scores together with the internal times `tau_j`.
pub fn resample_with(row: &[f64], warp: &Warp, solver: InverseSolver) -> (Vec<f64>, Vec<f64>) {
    let m = row.len();
    let taus: Vec<f64> = (0..m)
        .map(|j| warp.inverse_with(canonical_point(j, m), solver))
        .collect();
    (interpolate_at(row, &taus), taus)
}

/// Reads `row` at fractional positions `(m-1) * tau_j` by linear interpolation.
pub fn interpolate_at(row: &[f64], taus: &[f64]) -> Vec<f64> {
    let m = row.len();
    taus.iter()
        .map(|&tau| {
            let (i0, i1, w) = interpolation_indices(tau, m);
            (1.0 - w) * row[i0] + w * row[i1]
        })
        .collect()
}
