//! Brute-force reference implementations shared by the integration tests.
//!
//! Each one is written from the definitions, with no code shared with the
//! library: enumeration instead of closed forms, full pair loops instead of
//! contingency shortcuts, per-query scans instead of cumulative products.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Negative log-likelihood by enumerating the `m` monotone label sequences
/// `y^(k) = (0,..,0,1,..,1)` with the first one at position `k`.
///
/// A sequence scores `sum_j z_j y_j`; an event in bin `b` observes exactly
/// `y^(b)`, a censoring in bin `b` is consistent with every `k >= b`.
pub fn nll_enumerated(z: &[f64], bin: usize, event: bool) -> f64 {
    let m = z.len();
    let score = |k: usize| -> f64 {
        let mut s = 0.0;
        for (j, zj) in z.iter().enumerate() {
            let y = if j >= k { 1.0 } else { 0.0 };
            s += zj * y;
        }
        s
    };
    let scores: Vec<f64> = (0..m).map(score).collect();
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let partition: f64 = scores.iter().map(|s| (s - top).exp()).sum();
    let consistent: f64 = if event {
        (scores[bin] - top).exp()
    } else {
        scores[bin..].iter().map(|s| (s - top).exp()).sum()
    };
    partition.ln() - consistent.ln()
}

/// Product-limit survival at `t`, recounting risk sets from scratch for every
/// distinct event time at or before `min(t, max time)`.
pub fn km_at(times: &[f64], indicators: &[bool], t: f64) -> f64 {
    let horizon = times.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let t = t.min(horizon);
    let mut distinct: Vec<f64> = times
        .iter()
        .zip(indicators)
        .filter(|(s, d)| **d && **s <= t)
        .map(|(s, _)| *s)
        .collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut s = 1.0;
    for u in distinct {
        let at_risk = times.iter().filter(|&&x| x >= u).count() as f64;
        let deaths = times
            .iter()
            .zip(indicators)
            .filter(|(x, d)| **d && **x == u)
            .count() as f64;
        s *= 1.0 - deaths / at_risk;
    }
    s
}

pub fn censoring_at(times: &[f64], events: &[bool], t: f64) -> f64 {
    let censored: Vec<bool> = events.iter().map(|e| !e).collect();
    km_at(times, &censored, t)
}

const FLOOR: f64 = 1e-8;

fn weight(t: f64, ti: f64, ei: bool, times: &[f64], events: &[bool]) -> f64 {
    if ti <= t {
        if ei {
            1.0 / censoring_at(times, events, ti).max(FLOOR)
        } else {
            0.0
        }
    } else {
        1.0 / censoring_at(times, events, t).max(FLOOR)
    }
}

/// IPCW Brier score of CDF column `j` at time `t`.
pub fn brier(f: &[Vec<f64>], times: &[f64], events: &[bool], j: usize, t: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..f.len() {
        let y = if times[i] <= t { 1.0 } else { 0.0 };
        total += weight(t, times[i], events[i], times, events) * (f[i][j] - y) * (f[i][j] - y);
    }
    total / f.len() as f64
}

/// Equal-mass IPCW ECE averaged over all columns of `f`.
pub fn ece(f: &[Vec<f64>], times: &[f64], events: &[bool], eval_times: &[f64], q: usize) -> f64 {
    let n = f.len();
    let mut sum = 0.0;
    for (j, &t) in eval_times.iter().enumerate() {
        // sort by (prediction, index) so ties keep index order
        let mut order: Vec<(f64, usize)> = (0..n).map(|i| (f[i][j], i)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut bounds = vec![0usize];
        for k in 0..q {
            let size = n / q + usize::from(k < n % q);
            bounds.push(bounds[k] + size);
        }
        let mut gap = 0.0;
        for k in 0..q {
            let members: Vec<usize> = order[bounds[k]..bounds[k + 1]].iter().map(|p| p.1).collect();
            let mean = members.iter().map(|&i| f[i][j]).sum::<f64>() / members.len() as f64;
            let mut num = 0.0;
            let mut den = 0.0;
            for &i in &members {
                let w = weight(t, times[i], events[i], times, events);
                if times[i] <= t {
                    num += w;
                }
                den += w;
            }
            if den > 0.0 {
                gap += members.len() as f64 / n as f64 * (mean - num / den).abs();
            }
        }
        sum += gap;
    }
    sum / eval_times.len() as f64
}

/// Concordance over ordered pairs `(i, j)` with `i` an event strictly before `j`,
/// each anchored pair weighted by `w(i)`; `None` when nothing is comparable.
fn concordance(risks: &[f64], times: &[f64], events: &[bool], w: impl Fn(usize) -> f64) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..risks.len() {
        for j in 0..risks.len() {
            if !(events[i] && times[i] < times[j]) {
                continue;
            }
            let wi = w(i);
            den += wi;
            num += wi
                * match risks[i].partial_cmp(&risks[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
        }
    }
    (den > 0.0).then(|| num / den)
}

pub fn harrell(risks: &[f64], times: &[f64], events: &[bool]) -> Option<f64> {
    concordance(risks, times, events, |_| 1.0)
}

/// Uno's estimator truncated at the largest observed time.
pub fn uno(risks: &[f64], times: &[f64], events: &[bool]) -> Option<f64> {
    let horizon = times.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    concordance(risks, times, events, |i| {
        if times[i] < horizon {
            let g = censoring_at(times, events, times[i]).max(FLOOR);
            1.0 / (g * g)
        } else {
            0.0
        }
    })
}

/// Adjusted Pearson residual of every cell, row-major, from raw labels.
pub fn haberman(rows: &[usize], cols: &[usize], r: usize, c: usize) -> Vec<Option<f64>> {
    let n = rows.len() as f64;
    let mut out = Vec::new();
    for a in 0..r {
        for b in 0..c {
            let obs = rows.iter().zip(cols).filter(|(x, y)| **x == a && **y == b).count() as f64;
            let ra = rows.iter().filter(|&&x| x == a).count() as f64;
            let cb = cols.iter().filter(|&&y| y == b).count() as f64;
            let e = ra * cb / n;
            let v = e * (1.0 - ra / n) * (1.0 - cb / n);
            out.push((e > 0.0 && v > 0.0).then(|| (obs - e) / v.sqrt()));
        }
    }
    out
}

/// ARI from the four pair counts (both together, only in `a`, only in `b`, neither).
pub fn ari(a: &[usize], b: &[usize]) -> f64 {
    let (mut n11, mut n10, mut n01, mut n00) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => n11 += 1.0,
                (true, false) => n10 += 1.0,
                (false, true) => n01 += 1.0,
                (false, false) => n00 += 1.0,
            }
        }
    }
    let den = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11);
    if den == 0.0 {
        return 1.0;
    }
    2.0 * (n00 * n11 - n01 * n10) / den
}

/// A random survival instance: `n` records, CDF rows over `t` columns, times
/// drawn from a small lattice so ties are common.
pub struct Instance {
    pub f: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub eval_times: Vec<f64>,
}

pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, t: usize, censoring: bool) -> Instance {
    let times: Vec<f64> = (0..n).map(|_| rng.random_range(1..=12) as f64 * 0.5).collect();
    let events: Vec<bool> = (0..n).map(|_| !censoring || rng.random_bool(0.6)).collect();
    let f = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..t).map(|_| rng.random::<f64>()).collect();
            let total: f64 = raw.iter().sum::<f64>() + rng.random::<f64>();
            let mut acc = 0.0;
            raw.iter()
                .map(|x| {
                    acc += x / total;
                    acc
                })
                .collect()
        })
        .collect();
    let eval_times = (0..t).map(|j| 0.75 + 0.6 * j as f64).collect();
    Instance {
        f,
        times,
        events,
        eval_times,
    }
}
