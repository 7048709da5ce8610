//! Discrete-time MTLR likelihood.
//!
//! A model emits increment logits `z` (length `m`). Suffix sums
//! `u_j = z_j + ... + z_{m-1}` score the `m` valid monotone label sequences
//! (event in bin `j` means labels `0..j` are 0 and `j..m` are 1), and the
//! event-time PMF is `softmax(u)`. The last bin absorbs "event at or beyond
//! the horizon". The map back from a PMF sets `z_j = log p_j - log p_{j+1}`
//! and `z_{m-1} = 0`.

use serde::{Deserialize, Serialize};

use crate::data::EncodedTarget;
use crate::error::{Error, Result};
use crate::heads::load_balance_loss;
use crate::math::{log_sum_exp, softmax};

/// Floor applied to PMF entries before taking logs.
pub const PMF_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementLogits(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventPmf(pub Vec<f64>);

impl IncrementLogits {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Suffix sums `u_j = sum_{t >= j} z_t`.
    pub fn suffix_sums(&self) -> Vec<f64> {
        let mut u = vec![0.0; self.0.len()];
        let mut acc = 0.0;
        for j in (0..self.0.len()).rev() {
            acc += self.0[j];
            u[j] = acc;
        }
        u
    }
}

impl EventPmf {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Empty("event pmf".into()));
        }
        if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::InvalidParameter(
                "pmf entries must be finite and non-negative".into(),
            ));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("pmf sums to {s}, not 1")));
        }
        Ok(EventPmf(p))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Predicted CDF `F_j = P(event in bins 0..=j)`.
    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.0
            .iter()
            .map(|&p| {
                acc += p;
                acc.min(1.0)
            })
            .collect()
    }
}

pub fn logits_to_pmf(z: &IncrementLogits) -> EventPmf {
    EventPmf(softmax(&z.suffix_sums()))
}

/// Floors `p` at [`PMF_FLOOR`], renormalizes, and returns the clamped PMF.
fn clamp_pmf(p: &[f64]) -> (Vec<f64>, f64) {
    let q: Vec<f64> = p.iter().map(|&x| x.max(PMF_FLOOR)).collect();
    let s: f64 = q.iter().sum();
    (q.iter().map(|x| x / s).collect(), s)
}

pub fn pmf_to_logits(p: &EventPmf) -> IncrementLogits {
    let (q, _) = clamp_pmf(&p.0);
    let m = q.len();
    let mut z = vec![0.0; m];
    for j in 0..m.saturating_sub(1) {
        z[j] = q[j].ln() - q[j + 1].ln();
    }
    IncrementLogits(z)
}

/// `-log p_bin` for an observed event in `target.bin_index`.
pub fn uncensored_nll(z: &IncrementLogits, target: &EncodedTarget) -> Result<f64> {
    if !target.event {
        return Err(Error::Contract(
            "uncensored_nll called with a censored target".into(),
        ));
    }
    check_bin(z.len(), target.bin_index)?;
    let u = z.suffix_sums();
    Ok((log_sum_exp(&u) - u[target.bin_index]).max(0.0))
}

/// `-log sum_{k >= j} p_k`: the probability that the event happens in bin `j` or later.
pub fn censored_nll(z: &IncrementLogits, censor_bin: usize) -> Result<f64> {
    check_bin(z.len(), censor_bin)?;
    if censor_bin == 0 {
        return Ok(0.0);
    }
    let u = z.suffix_sums();
    Ok((log_sum_exp(&u) - log_sum_exp(&u[censor_bin..])).max(0.0))
}

fn check_bin(m: usize, bin: usize) -> Result<()> {
    if bin >= m {
        return Err(Error::InvalidParameter(format!(
            "bin {bin} out of range for {m} time bins"
        )));
    }
    Ok(())
}

pub fn nll(z: &IncrementLogits, target: &EncodedTarget) -> Result<f64> {
    if target.event {
        uncensored_nll(z, target)
    } else {
        censored_nll(z, target.bin_index)
    }
}

/// NLL of a target and its gradient with respect to the increment logits.
pub fn nll_with_grad(z: &IncrementLogits, target: &EncodedTarget) -> Result<(f64, Vec<f64>)> {
    check_bin(z.len(), target.bin_index)?;
    let u = z.suffix_sums();
    let p = softmax(&u);
    let m = u.len();
    let j = target.bin_index;
    // dL/du
    let mut du = p.clone();
    let loss = if target.event {
        du[j] -= 1.0;
        log_sum_exp(&u) - u[j]
    } else if j == 0 {
        du.iter_mut().for_each(|d| *d = 0.0);
        0.0
    } else {
        let lse_tail = log_sum_exp(&u[j..]);
        for k in j..m {
            du[k] -= (u[k] - lse_tail).exp();
        }
        log_sum_exp(&u) - lse_tail
    };
    // u_k depends on z_t for t >= k, so dL/dz_t is a prefix sum of dL/du.
    let mut dz = vec![0.0; m];
    let mut acc = 0.0;
    for t in 0..m {
        acc += du[t];
        dz[t] = acc;
    }
    Ok((loss.max(0.0), dz))
}

/// NLL evaluated on a PMF through [`pmf_to_logits`], and its gradient with respect to `p`.
///
/// Entries below [`PMF_FLOOR`] have zero gradient (the floor is active there).
pub fn pmf_nll_with_grad(p: &[f64], target: &EncodedTarget) -> Result<(f64, Vec<f64>)> {
    let (q, s) = clamp_pmf(p);
    let m = q.len();
    let mut z = vec![0.0; m];
    for j in 0..m.saturating_sub(1) {
        z[j] = q[j].ln() - q[j + 1].ln();
    }
    let (loss, dz) = nll_with_grad(&IncrementLogits(z), target)?;
    // z_j = log q_j - log q_{j+1} for j < m-1
    let mut dlogq = vec![0.0; m];
    for j in 0..m.saturating_sub(1) {
        dlogq[j] += dz[j];
        dlogq[j + 1] -= dz[j];
    }
    let dq: Vec<f64> = dlogq.iter().zip(&q).map(|(g, qi)| g / qi).collect();
    // q = c / s with c = max(p, floor)
    let inner: f64 = dq.iter().zip(&q).map(|(g, qi)| g * qi).sum();
    let dp = p
        .iter()
        .zip(&dq)
        .map(|(&pi, &g)| if pi > PMF_FLOOR { (g - inner) / s } else { 0.0 })
        .collect();
    Ok((loss, dp))
}

/// `S_j = 1 - sum_{k <= j} p_k`, clamped to `[0, 1]`.
pub fn survival_curve(p: &EventPmf) -> Vec<f64> {
    p.cdf().into_iter().map(|f| (1.0 - f).max(0.0)).collect()
}

/// Mean per-record NLL (PMFs mapped to logits first) plus the load-balancing term.
pub fn batch_loss(
    pmfs: &[EventPmf],
    targets: &[EncodedTarget],
    lambda_lb: f64,
    router_weights: Option<&[Vec<f64>]>,
) -> Result<f64> {
    if pmfs.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    if pmfs.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            context: "batch_loss targets",
            expected: pmfs.len(),
            actual: targets.len(),
        });
    }
    let mut total = 0.0;
    for (p, t) in pmfs.iter().zip(targets) {
        total += nll(&pmf_to_logits(p), t)?;
    }
    let mut loss = total / pmfs.len() as f64;
    if let Some(alphas) = router_weights {
        loss += load_balance_loss(alphas, lambda_lb)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn target(bin: usize, event: bool, m: usize) -> EncodedTarget {
        EncodedTarget::new(bin, event, m)
    }

    /// Probability of each explicit monotone label sequence, by enumeration.
    fn enumerate_sequences(z: &[f64]) -> Vec<f64> {
        let m = z.len();
        let scores: Vec<f64> = (0..m)
            .map(|k| {
                let labels: Vec<f64> = (0..m).map(|j| if j >= k { 1.0 } else { 0.0 }).collect();
                labels.iter().zip(z).map(|(y, zj)| y * zj).sum::<f64>()
            })
            .collect();
        let norm: f64 = scores.iter().map(|s| s.exp()).sum();
        scores.iter().map(|s| s.exp() / norm).collect()
    }

    #[test]
    fn zero_logits_give_uniform() {
        let p = logits_to_pmf(&IncrementLogits(vec![0.0; 4]));
        for x in p.0 {
            assert_abs_diff_eq!(x, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn hand_instance_log2() {
        let p = logits_to_pmf(&IncrementLogits(vec![2f64.ln(), 0.0, 0.0]));
        assert_abs_diff_eq!(p.0[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.0[1], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p.0[2], 0.25, epsilon = 1e-15);
        let z = pmf_to_logits(&EventPmf(vec![0.5, 0.25, 0.25]));
        assert_abs_diff_eq!(z.0[0], 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(z.0[1], 0.0, epsilon = 1e-12);
        assert_eq!(z.0[2], 0.0);
    }

    #[test]
    fn uniform_pmf_has_zero_logits() {
        let z = pmf_to_logits(&EventPmf(vec![0.2; 5]));
        assert!(z.0.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn nll_hand_values() {
        let z = IncrementLogits(vec![0.0, 0.0]);
        assert_abs_diff_eq!(
            uncensored_nll(&z, &target(0, true, 2)).unwrap(),
            2f64.ln(),
            epsilon = 1e-12
        );
        let z3 = IncrementLogits(vec![0.0; 3]);
        assert_eq!(censored_nll(&z3, 0).unwrap(), 0.0);
        assert_abs_diff_eq!(
            censored_nll(&z3, 1).unwrap(),
            -(2.0f64 / 3.0).ln(),
            epsilon = 1e-12
        );
        // concentrated prediction
        let sharp = IncrementLogits(vec![-60.0, 60.0, 0.0]);
        assert!(uncensored_nll(&sharp, &target(1, true, 3)).unwrap() < 1e-20);
    }

    #[test]
    fn contract_errors() {
        let z = IncrementLogits(vec![0.0; 3]);
        assert!(matches!(
            uncensored_nll(&z, &target(1, false, 3)),
            Err(Error::Contract(_))
        ));
        assert!(censored_nll(&z, 3).is_err());
        assert!(batch_loss(&[], &[], 0.0, None).is_err());
    }

    #[test]
    fn survival_curve_examples() {
        let s = survival_curve(&EventPmf(vec![0.25; 4]));
        for (a, b) in s.iter().zip([0.75, 0.5, 0.25, 0.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert!(survival_curve(&EventPmf(vec![1.0, 0.0, 0.0]))
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn enumeration_oracle_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let m = rng.random_range(1..=6);
            let z: Vec<f64> = (0..m).map(|_| rng.random_range(-4.0..4.0)).collect();
            let seq = enumerate_sequences(&z);
            let zl = IncrementLogits(z.clone());
            let p = logits_to_pmf(&zl);
            for k in 0..m {
                assert_abs_diff_eq!(p.0[k], seq[k], epsilon = 1e-12);
                let nll = uncensored_nll(&zl, &target(k, true, m)).unwrap();
                assert_abs_diff_eq!(nll, -seq[k].ln(), epsilon = 1e-10);
                let tail: f64 = seq[k..].iter().sum();
                assert_abs_diff_eq!(censored_nll(&zl, k).unwrap(), -tail.ln(), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = 1e-5;
        for _ in 0..50 {
            let m = rng.random_range(2..=7);
            let z: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t = target(rng.random_range(0..m), rng.random_bool(0.5), m);
            let (_, g) = nll_with_grad(&IncrementLogits(z.clone()), &t).unwrap();
            for i in 0..m {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i] += eps;
                zm[i] -= eps;
                let fd = (nll(&IncrementLogits(zp), &t).unwrap()
                    - nll(&IncrementLogits(zm), &t).unwrap())
                    / (2.0 * eps);
                // near-zero entries are compared absolutely: FD round-off is ~1e-11 there
                let scale = g[i].abs().max(fd.abs()).max(1e-4);
                assert!((g[i] - fd).abs() / scale < 1e-6, "i={i} g={} fd={fd}", g[i]);
            }
        }
    }

    #[test]
    fn pmf_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = 1e-7;
        for _ in 0..30 {
            let m = rng.random_range(2..=6);
            let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let t = target(rng.random_range(0..m), rng.random_bool(0.5), m);
            let (_, g) = pmf_nll_with_grad(&p, &t).unwrap();
            for i in 0..m {
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp[i] += eps;
                pm[i] -= eps;
                let fd = (pmf_nll_with_grad(&pp, &t).unwrap().0
                    - pmf_nll_with_grad(&pm, &t).unwrap().0)
                    / (2.0 * eps);
                let scale = g[i].abs().max(fd.abs()).max(1e-6);
                assert!((g[i] - fd).abs() / scale < 1e-5, "g={} fd={fd}", g[i]);
            }
        }
    }

    #[test]
    fn batch_loss_composition() {
        let p = EventPmf(vec![0.5, 0.25, 0.25]);
        let t = target(1, true, 3);
        let alone = uncensored_nll(&pmf_to_logits(&p), &t).unwrap();
        let alpha = vec![vec![0.3, 0.7]];
        let lb = load_balance_loss(&alpha, 0.01).unwrap();
        let b = batch_loss(&[p.clone()], &[t.clone()], 0.01, Some(&alpha)).unwrap();
        assert_abs_diff_eq!(b, alone + lb, epsilon = 1e-15);
        let pure = batch_loss(&[p], &[t], 0.0, Some(&alpha)).unwrap();
        assert_abs_diff_eq!(pure, alone, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn pmf_sums_to_one(z in proptest::collection::vec(-50.0f64..50.0, 1..120)) {
            let p = logits_to_pmf(&IncrementLogits(z));
            let s: f64 = p.0.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }

        #[test]
        fn logits_roundtrip(z in proptest::collection::vec(-5.0f64..5.0, 2..60)) {
            let m = z.len();
            let mut z = z;
            z[m - 1] = 0.0;
            let p = logits_to_pmf(&IncrementLogits(z.clone()));
            // the exact round trip holds while no entry hits the floor
            prop_assume!(p.0.iter().all(|&x| x > 1e3 * PMF_FLOOR));
            let back = pmf_to_logits(&p);
            let p2 = logits_to_pmf(&back);
            for (a, b) in p.0.iter().zip(&p2.0) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in z.iter().zip(&back.0) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn survival_non_increasing(raw in proptest::collection::vec(0.0f64..1.0, 1..50)) {
            let s: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p = EventPmf(raw.iter().map(|x| x / s).collect());
            let sc = survival_curve(&p);
            for w in sc.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }
}
