//! IPCW-adjusted evaluation: Kaplan–Meier, equal-mass ECE, Brier score and concordance.
//!
//! Predictions are given as a CDF matrix `F[i][j] = P(T_i <= t_j)` over the
//! evaluation times of a [`TimeGrid`]: `t_j` is the right edge of bin `j`,
//! and the absorbing last bin is evaluated at `+inf`.

use serde::{Deserialize, Serialize};

use crate::data::TimeGrid;
use crate::error::{Error, Result};
use crate::mtlr::EventPmf;
use crate::parallel::Execution;

/// Floor for every IPCW denominator.
pub const IPCW_FLOOR: f64 = 1e-8;

/// Product-limit estimate of a survival function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KaplanMeier {
    /// Distinct times with at least one event, ascending.
    pub event_times: Vec<f64>,
    /// Survival just after each event time.
    pub survival: Vec<f64>,
    /// Largest observed time; evaluation clamps to it.
    pub horizon: f64,
}

impl KaplanMeier {
    /// Right-continuous evaluation at `min(t, horizon)`.
    pub fn eval(&self, t: f64) -> f64 {
        let t = t.min(self.horizon);
        let k = self.event_times.partition_point(|&e| e <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }
}

pub fn kaplan_meier(times: &[f64], indicators: &[bool]) -> Result<KaplanMeier> {
    if times.len() != indicators.len() {
        return Err(Error::DimensionMismatch {
            context: "kaplan_meier indicators",
            expected: times.len(),
            actual: indicators.len(),
        });
    }
    if times.is_empty() {
        return Err(Error::Empty("kaplan_meier input".into()));
    }
    if times.iter().any(|&t| !(t > 0.0) || t.is_nan()) {
        return Err(Error::InvalidParameter("kaplan_meier times must be positive".into()));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len();
    let mut s = 1.0;
    let mut event_times = Vec::new();
    let mut survival = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut deaths = 0;
        let mut total = 0;
        while k < order.len() && times[order[k]] == t {
            deaths += indicators[order[k]] as usize;
            total += 1;
            k += 1;
        }
        if deaths > 0 {
            s *= 1.0 - deaths as f64 / at_risk as f64;
            event_times.push(t);
            survival.push(s);
        }
        at_risk -= total;
    }
    Ok(KaplanMeier {
        event_times,
        survival,
        horizon: times[*order.last().expect("non-empty")],
    })
}

/// Kaplan–Meier of the censoring process (censoring is the "event").
pub fn censoring_survival(times: &[f64], events: &[bool]) -> Result<KaplanMeier> {
    let censored: Vec<bool> = events.iter().map(|e| !e).collect();
    kaplan_meier(times, &censored)
}

/// Evaluation time of each bin: its right edge, and `+inf` for the last bin.
pub fn evaluation_times(grid: &TimeGrid) -> Vec<f64> {
    let m = grid.bins();
    (0..m)
        .map(|j| if j + 1 == m { f64::INFINITY } else { grid.edges[j + 1] })
        .collect()
}

/// Predicted CDF rows from event PMFs.
pub fn cdf_matrix(pmfs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    pmfs.iter().map(|p| EventPmf(p.clone()).cdf()).collect()
}

/// `1{T <= t} delta / G(min(T, tau_G)) + 1{T > t} / G(t)`.
pub fn ipcw_weight(t: f64, time: f64, event: bool, g: &KaplanMeier) -> f64 {
    if time <= t {
        if event {
            1.0 / g.eval(time).max(IPCW_FLOOR)
        } else {
            0.0
        }
    } else {
        1.0 / g.eval(t).max(IPCW_FLOOR)
    }
}

fn check_inputs(f: &[Vec<f64>], times: &[f64], events: &[bool], eval_times: &[f64]) -> Result<()> {
    if f.is_empty() {
        return Err(Error::Empty("prediction matrix".into()));
    }
    if f.len() != times.len() || times.len() != events.len() {
        return Err(Error::DimensionMismatch {
            context: "predictions vs outcomes",
            expected: f.len(),
            actual: times.len().min(events.len()),
        });
    }
    for row in f {
        if row.len() != eval_times.len() {
            return Err(Error::DimensionMismatch {
                context: "prediction row vs evaluation times",
                expected: eval_times.len(),
                actual: row.len(),
            });
        }
    }
    Ok(())
}

/// IPCW Brier score at column `j` (evaluation time `t`).
pub fn brier_ipcw(f: &[Vec<f64>], times: &[f64], events: &[bool], g: &KaplanMeier, j: usize, t: f64) -> f64 {
    let total: f64 = f
        .iter()
        .zip(times.iter().zip(events))
        .map(|(row, (&ti, &ei))| {
            let y = if ti <= t { 1.0 } else { 0.0 };
            ipcw_weight(t, ti, ei, g) * (row[j] - y).powi(2)
        })
        .sum();
    total / f.len() as f64
}

pub fn brier_curve(
    f: &[Vec<f64>],
    times: &[f64],
    events: &[bool],
    g: &KaplanMeier,
    eval_times: &[f64],
) -> Result<Vec<f64>> {
    check_inputs(f, times, events, eval_times)?;
    Ok(eval_times
        .iter()
        .enumerate()
        .map(|(j, &t)| brier_ipcw(f, times, events, g, j, t))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceBin {
    pub count: usize,
    pub mean_prediction: f64,
    pub observed: f64,
    pub numerator: f64,
    pub denominator: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceReport {
    pub q: usize,
    pub per_time: Vec<f64>,
    pub ece: f64,
    /// `bins[j][q]` for evaluation time `j`.
    pub bins: Vec<Vec<EceBin>>,
}

/// Equal-mass IPCW calibration error at a single evaluation time.
pub fn ece_at(
    f: &[Vec<f64>],
    times: &[f64],
    events: &[bool],
    g: &KaplanMeier,
    j: usize,
    t: f64,
    q: usize,
) -> (f64, Vec<EceBin>) {
    let n = f.len();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal predictions keep index order
    order.sort_by(|&a, &b| f[a][j].total_cmp(&f[b][j]));
    let (b, r) = (n / q, n % q);
    let w_surv = 1.0 / g.eval(t).max(IPCW_FLOOR);
    let mut start = 0;
    let mut gap = 0.0;
    let mut bins = Vec::with_capacity(q);
    for k in 0..q {
        let size = if k < r { b + 1 } else { b };
        let members = &order[start..start + size];
        start += size;
        let mut pred = 0.0;
        let mut num = 0.0;
        let mut surv = 0.0;
        for &i in members {
            pred += f[i][j];
            if times[i] <= t {
                if events[i] {
                    num += 1.0 / g.eval(times[i]).max(IPCW_FLOOR);
                }
            } else {
                surv += w_surv;
            }
        }
        let den = num + surv;
        let mean_prediction = if size > 0 { pred / size as f64 } else { 0.0 };
        let observed = if den > 0.0 { num / den } else { 0.0 };
        if den > 0.0 {
            gap += size as f64 / n as f64 * (mean_prediction - observed).abs();
        }
        bins.push(EceBin {
            count: size,
            mean_prediction,
            observed,
            numerator: num,
            denominator: den,
        });
    }
    (gap, bins)
}

pub fn ece_equal_mass(
    f: &[Vec<f64>],
    times: &[f64],
    events: &[bool],
    g: &KaplanMeier,
    eval_times: &[f64],
    q: usize,
    exec: Execution,
) -> Result<EceReport> {
    check_inputs(f, times, events, eval_times)?;
    if q == 0 || f.len() < q {
        return Err(Error::InvalidParameter(format!(
            "equal-mass ECE needs at least Q = {q} records, got {}",
            f.len()
        )));
    }
    let per: Vec<(f64, Vec<EceBin>)> = exec.map_range(eval_times.len(), |j| {
        ece_at(f, times, events, g, j, eval_times[j], q)
    });
    let per_time: Vec<f64> = per.iter().map(|p| p.0).collect();
    let ece = per_time.iter().sum::<f64>() / per_time.len() as f64;
    Ok(EceReport {
        q,
        per_time,
        ece,
        bins: per.into_iter().map(|p| p.1).collect(),
    })
}

/// Time where the linearly interpolated survival curve reaches 0.5.
///
/// The curve passes through `(0, 1)` and `(edges[j+1], S_j)`; if it never
/// drops to 0.5 the last grid time is returned.
pub fn median_survival_time(p: &EventPmf, grid: &TimeGrid) -> f64 {
    let surv = crate::mtlr::survival_curve(p);
    let (mut t_prev, mut s_prev) = (0.0, 1.0);
    for (j, &s) in surv.iter().enumerate() {
        let t = grid.edges[j + 1];
        if s <= 0.5 {
            if s_prev == s {
                return t_prev;
            }
            return t_prev + (s_prev - 0.5) / (s_prev - s) * (t - t_prev);
        }
        t_prev = t;
        s_prev = s;
    }
    *grid.edges.last().expect("grid has edges")
}

/// Negated median survival time: larger means earlier predicted failure.
pub fn median_survival_risk(p: &EventPmf, grid: &TimeGrid) -> f64 {
    -median_survival_time(p, grid)
}

fn concordance_weighted(
    risks: &[f64],
    times: &[f64],
    events: &[bool],
    weight: impl Fn(usize) -> Option<f64>,
) -> Result<f64> {
    let n = risks.len();
    if times.len() != n || events.len() != n {
        return Err(Error::DimensionMismatch {
            context: "concordance inputs",
            expected: n,
            actual: times.len().min(events.len()),
        });
    }
    if n < 2 {
        return Err(Error::Empty("concordance needs at least 2 records".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        if !events[i] {
            continue;
        }
        let Some(w) = weight(i) else { continue };
        for j in 0..n {
            if times[i] < times[j] {
                den += w;
                if risks[i] > risks[j] {
                    num += w;
                } else if risks[i] == risks[j] {
                    num += 0.5 * w;
                }
            }
        }
    }
    if den == 0.0 {
        return Err(Error::Undefined("no comparable pairs for concordance".into()));
    }
    Ok(num / den)
}

/// Harrell's C: pairs with an observed event at the strictly earlier time; risk ties count 1/2.
pub fn concordance_harrell(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    concordance_weighted(risks, times, events, |_| Some(1.0))
}

/// Uno's truncated IPCW concordance: pairs anchored at event `i` with
/// `T_i < tau_G` are weighted by `G(T_i)^-2`.
pub fn concordance_ipcw(risks: &[f64], times: &[f64], events: &[bool], g: &KaplanMeier) -> Result<f64> {
    concordance_weighted(risks, times, events, |i| {
        (times[i] < g.horizon).then(|| {
            let gi = g.eval(times[i]).max(IPCW_FLOOR);
            1.0 / (gi * gi)
        })
    })
}

/// Brier score at one percentile of the time-bin index grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileBrier {
    pub percentile: f64,
    pub bin: usize,
    pub time: f64,
    pub brier: f64,
}

/// Headline metrics for one evaluation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_records: usize,
    pub censored_fraction: f64,
    pub ece: f64,
    pub ece_per_time: Vec<f64>,
    pub brier: f64,
    pub brier_per_time: Vec<f64>,
    pub brier_percentiles: Vec<PercentileBrier>,
    pub harrell_c: f64,
    pub ipcw_c: f64,
}

pub const DEFAULT_PERCENTILES: [f64; 3] = [0.25, 0.5, 0.75];

/// Bin index `floor(q * m)` for a percentile `q` of the bin-index grid.
pub fn percentile_bin(q: f64, m: usize) -> usize {
    ((q * m as f64).floor() as usize).min(m - 1)
}

/// All headline metrics, with `G` fitted on this split's censoring.
pub fn evaluate_predictions(
    pmfs: &[Vec<f64>],
    times: &[f64],
    events: &[bool],
    grid: &TimeGrid,
    q: usize,
    percentiles: &[f64],
    exec: Execution,
) -> Result<MetricsReport> {
    let g = censoring_survival(times, events)?;
    let eval_times = evaluation_times(grid);
    let f = cdf_matrix(pmfs);
    let ece = ece_equal_mass(&f, times, events, &g, &eval_times, q, exec)?;
    check_inputs(&f, times, events, &eval_times)?;
    let brier_per_time: Vec<f64> = exec.map_range(eval_times.len(), |j| {
        brier_ipcw(&f, times, events, &g, j, eval_times[j])
    });
    let brier = brier_per_time.iter().sum::<f64>() / brier_per_time.len() as f64;
    let m = grid.bins();
    let brier_percentiles = percentiles
        .iter()
        .map(|&p| {
            let bin = percentile_bin(p, m);
            PercentileBrier {
                percentile: p,
                bin,
                time: eval_times[bin],
                brier: brier_per_time[bin],
            }
        })
        .collect();
    let risks: Vec<f64> = pmfs
        .iter()
        .map(|p| median_survival_risk(&EventPmf(p.clone()), grid))
        .collect();
    Ok(MetricsReport {
        n_records: pmfs.len(),
        censored_fraction: events.iter().filter(|e| !**e).count() as f64 / events.len() as f64,
        ece: ece.ece,
        ece_per_time: ece.per_time,
        brier,
        brier_per_time,
        brier_percentiles,
        harrell_c: concordance_harrell(&risks, times, events)?,
        ipcw_c: concordance_ipcw(&risks, times, events, &g)?,
    })
}
