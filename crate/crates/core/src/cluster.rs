//! Routing-based clustering: Top-1 assignment, routing purity, Haberman residuals,
//! per-cluster Kaplan–Meier curves and cross-seed ARI.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::argmax;
use crate::metrics::{kaplan_meier, KaplanMeier};

/// Cells with `|z|` above this are flagged.
pub const Z_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub experts: usize,
    pub index: Vec<usize>,
    pub alpha: Vec<Vec<f64>>,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.experts];
        for &k in &self.index {
            sizes[k] += 1;
        }
        sizes
    }
}

/// Argmax of each routing row; ties go to the lowest expert index.
pub fn top1_assign(alphas: &[Vec<f64>]) -> ClusterAssignment {
    let experts = alphas.first().map_or(0, Vec::len);
    ClusterAssignment {
        experts,
        index: alphas.iter().map(|a| argmax(a)).collect(),
        alpha: alphas.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingMatrix {
    /// `rows[e][c]`: share of expert `e`'s records that belong to class `c`.
    pub rows: Vec<Vec<f64>>,
    pub sizes: Vec<usize>,
    /// Size-weighted mean of row maxima.
    pub purity: f64,
}

pub fn routing_matrix(
    assignments: &[usize],
    labels: &[usize],
    experts: usize,
    classes: usize,
) -> Result<RoutingMatrix> {
    if assignments.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "routing matrix labels",
            expected: assignments.len(),
            actual: labels.len(),
        });
    }
    if assignments.is_empty() {
        return Err(Error::Empty("routing matrix input".into()));
    }
    let table = ContingencyTable::from_pairs(assignments, labels, experts, classes)?;
    let sizes = table.row_totals();
    let mut purity = 0.0;
    let rows = table
        .counts
        .iter()
        .zip(&sizes)
        .map(|(row, &n)| {
            if n == 0 {
                return vec![0.0; classes];
            }
            let r: Vec<f64> = row.iter().map(|&c| c as f64 / n as f64).collect();
            purity += n as f64 * r.iter().cloned().fold(0.0, f64::max);
            r
        })
        .collect();
    Ok(RoutingMatrix {
        rows,
        sizes,
        purity: purity / assignments.len() as f64,
    })
}

/// Cluster x level counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
}

impl ContingencyTable {
    pub fn from_pairs(rows: &[usize], cols: &[usize], n_rows: usize, n_cols: usize) -> Result<Self> {
        if rows.len() != cols.len() {
            return Err(Error::DimensionMismatch {
                context: "contingency table",
                expected: rows.len(),
                actual: cols.len(),
            });
        }
        let mut counts = vec![vec![0u64; n_cols]; n_rows];
        for (&r, &c) in rows.iter().zip(cols) {
            if r >= n_rows || c >= n_cols {
                return Err(Error::InvalidParameter(format!(
                    "cell ({r}, {c}) outside a {n_rows}x{n_cols} table"
                )));
            }
            counts[r][c] += 1;
        }
        Ok(Self { counts })
    }

    pub fn row_totals(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum::<u64>() as usize).collect()
    }

    pub fn col_totals(&self) -> Vec<usize> {
        let cols = self.counts.first().map_or(0, Vec::len);
        (0..cols)
            .map(|k| self.counts.iter().map(|r| r[k]).sum::<u64>() as usize)
            .collect()
    }

    pub fn total(&self) -> usize {
        self.row_totals().iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HabermanCell {
    pub cluster: usize,
    pub level: usize,
    pub observed: u64,
    pub expected: f64,
    /// `None` when the expected count or the variance term is zero.
    pub z: Option<f64>,
    pub flagged: bool,
}

/// Adjusted Pearson residuals for every cell, row-major.
pub fn haberman_z(table: &ContingencyTable) -> Result<Vec<HabermanCell>> {
    let n = table.total();
    if n == 0 {
        return Err(Error::Empty("contingency table has no counts".into()));
    }
    let nf = n as f64;
    let rows = table.row_totals();
    let cols = table.col_totals();
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for (c, row) in table.counts.iter().enumerate() {
        for (k, &obs) in row.iter().enumerate() {
            let (nc, nk) = (rows[c] as f64, cols[k] as f64);
            let expected = nc * nk / nf;
            let var = expected * (1.0 - nc / nf) * (1.0 - nk / nf);
            let z = (expected > 0.0 && var > 0.0).then(|| (obs as f64 - expected) / var.sqrt());
            out.push(HabermanCell {
                cluster: c,
                level: k,
                observed: obs,
                expected,
                z,
                flagged: z.is_some_and(|z| z.abs() > Z_THRESHOLD),
            });
        }
    }
    Ok(out)
}

fn pairs(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand Index by pair counting.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "ari partitions",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let ra = a.iter().max().map_or(0, |m| m + 1);
    let rb = b.iter().max().map_or(0, |m| m + 1);
    let table = ContingencyTable::from_pairs(a, b, ra, rb)?;
    let index: f64 = table.counts.iter().flatten().map(|&c| pairs(c)).sum();
    let sa: f64 = table.row_totals().iter().map(|&c| pairs(c as u64)).sum();
    let sb: f64 = table.col_totals().iter().map(|&c| pairs(c as u64)).sum();
    let total = pairs(a.len() as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        // both partitions trivial and identical
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseAri {
    /// `(i, j, ari)` for every unordered pair `i < j`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub mean: f64,
}

/// ARI over all unordered pairs of partitions, and their mean.
pub fn pairwise_ari(partitions: &[Vec<usize>]) -> Result<PairwiseAri> {
    if partitions.len() < 2 {
        return Err(Error::InvalidParameter("pairwise ARI needs at least two partitions".into()));
    }
    let mut out = Vec::new();
    for i in 0..partitions.len() {
        for j in i + 1..partitions.len() {
            out.push((i, j, ari(&partitions[i], &partitions[j])?));
        }
    }
    let mean = out.iter().map(|p| p.2).sum::<f64>() / out.len() as f64;
    Ok(PairwiseAri { pairs: out, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCurve {
    pub cluster: usize,
    pub size: usize,
    pub km: KaplanMeier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSurvival {
    pub curves: Vec<ClusterCurve>,
    pub notes: Vec<String>,
}

/// Kaplan–Meier per cluster; empty clusters are omitted with a note.
pub fn km_by_cluster(assignments: &[usize], experts: usize, times: &[f64], events: &[bool]) -> Result<ClusterSurvival> {
    if assignments.len() != times.len() || times.len() != events.len() {
        return Err(Error::DimensionMismatch {
            context: "km_by_cluster inputs",
            expected: assignments.len(),
            actual: times.len().min(events.len()),
        });
    }
    let mut curves = Vec::new();
    let mut notes = Vec::new();
    for c in 0..experts {
        let idx: Vec<usize> = (0..assignments.len()).filter(|&i| assignments[i] == c).collect();
        if idx.is_empty() {
            notes.push(format!("cluster {c} is empty; omitted"));
            continue;
        }
        let t: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
        let e: Vec<bool> = idx.iter().map(|&i| events[i]).collect();
        curves.push(ClusterCurve {
            cluster: c,
            size: idx.len(),
            km: kaplan_meier(&t, &e)?,
        });
    }
    Ok(ClusterSurvival { curves, notes })
}

/// Min, quartiles and max of one feature within one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub cluster: usize,
    pub feature: String,
    pub count: usize,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-cluster quantile table of continuous features; NaN entries are skipped.
pub fn quantile_table(
    assignments: &[usize],
    experts: usize,
    names: &[String],
    features: &[Vec<f64>],
) -> Vec<QuantileRow> {
    let mut out = Vec::new();
    for c in 0..experts {
        for (f, name) in names.iter().enumerate() {
            let mut v: Vec<f64> = assignments
                .iter()
                .zip(features)
                .filter(|(a, x)| **a == c && !x[f].is_nan())
                .map(|(_, x)| x[f])
                .collect();
            if v.is_empty() {
                continue;
            }
            v.sort_by(f64::total_cmp);
            out.push(QuantileRow {
                cluster: c,
                feature: name.clone(),
                count: v.len(),
                min: v[0],
                q25: quantile_sorted(&v, 0.25),
                median: quantile_sorted(&v, 0.5),
                q75: quantile_sorted(&v, 0.75),
                max: v[v.len() - 1],
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn top1_examples() {
        let a = top1_assign(&[vec![0.1, 0.7, 0.2], vec![0.5, 0.5], vec![0.3, 0.3, 0.4]]);
        assert_eq!(a.index, vec![1, 0, 2]);
        let b = top1_assign(&[vec![0.6, 0.4], vec![0.2, 0.8], vec![0.9, 0.1]]);
        assert_eq!(b.sizes().iter().sum::<usize>(), 3);
        assert_eq!(b.sizes(), vec![2, 1]);
    }

    #[test]
    fn routing_perfect_specialization() {
        let r = routing_matrix(&[2, 0, 1, 2], &[0, 1, 2, 0], 3, 3).unwrap();
        assert_eq!(r.purity, 1.0);
        assert_eq!(r.rows[2], vec![1.0, 0.0, 0.0]);
        let e = routing_matrix(&[0, 0], &[0, 1], 2, 2).unwrap();
        assert_eq!(e.rows[1], vec![0.0, 0.0]);
        assert_eq!(e.purity, 0.5);
    }

    #[test]
    fn routing_random_is_near_uniform() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 50_000;
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let assign: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let r = routing_matrix(&assign, &labels, 5, 10).unwrap();
        for row in &r.rows {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            for &v in row {
                assert!((v - 0.1).abs() < 0.015, "{v}");
            }
        }
    }

    #[test]
    fn haberman_two_by_two() {
        let t = ContingencyTable { counts: vec![vec![10, 0], vec![0, 10]] };
        let z = haberman_z(&t).unwrap();
        let expected = 5.0 / 1.25f64.sqrt();
        assert_abs_diff_eq!(z[0].z.unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(z[1].z.unwrap(), -expected, epsilon = 1e-12);
        assert_abs_diff_eq!(z[3].z.unwrap(), expected, epsilon = 1e-12);
        assert!(z.iter().all(|c| c.flagged));
        assert_abs_diff_eq!(expected, 4.472, epsilon = 1e-3);
    }

    #[test]
    fn haberman_independent_table_is_zero() {
        let rows = [2u64, 3, 5];
        let cols = [1u64, 4, 5];
        let t = ContingencyTable {
            counts: rows.iter().map(|r| cols.iter().map(|c| r * c).collect()).collect(),
        };
        for cell in haberman_z(&t).unwrap() {
            assert_eq!(cell.z, Some(0.0));
            assert!(!cell.flagged);
        }
    }

    #[test]
    fn haberman_skips_zero_expected() {
        let t = ContingencyTable { counts: vec![vec![3, 0], vec![2, 0]] };
        let z = haberman_z(&t).unwrap();
        assert!(z[1].z.is_none() && z[3].z.is_none());
        assert!(!z[1].flagged);
    }

    #[test]
    fn ari_examples() {
        assert_eq!(ari(&[0, 0, 1, 1, 2], &[0, 0, 1, 1, 2]).unwrap(), 1.0);
        assert_eq!(ari(&[0, 0, 1, 1], &[5, 5, 3, 3]).unwrap(), 1.0);
        let singles: Vec<usize> = (0..6).collect();
        assert_eq!(ari(&singles, &[0; 6]).unwrap(), 0.0);
        assert!(ari(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn pairwise_ari_counts_pairs() {
        let p: Vec<Vec<usize>> = (0..5).map(|s| (0..10).map(|i| (i + s) % 3).collect()).collect();
        let r = pairwise_ari(&p).unwrap();
        assert_eq!(r.pairs.len(), 10);
        assert!(pairwise_ari(&p[..1]).is_err());
    }

    #[test]
    fn km_single_cluster_matches_global() {
        let times = [3.0, 1.0, 2.0, 5.0, 4.0];
        let events = [true, false, true, true, false];
        let s = km_by_cluster(&[0; 5], 2, &times, &events).unwrap();
        assert_eq!(s.curves.len(), 1);
        assert_eq!(s.curves[0].size, 5);
        assert_eq!(s.curves[0].km, kaplan_meier(&times, &events).unwrap());
        assert_eq!(s.notes.len(), 1);
    }

    #[test]
    fn km_threshold_split_is_ordered() {
        let times: Vec<f64> = (1..=40).map(|i| i as f64).collect();
        let events: Vec<bool> = (0..40).map(|i| i % 3 != 0).collect();
        let assign: Vec<usize> = times.iter().map(|&t| usize::from(t > 20.0)).collect();
        let s = km_by_cluster(&assign, 2, &times, &events).unwrap();
        for k in 0..=45 {
            let t = k as f64;
            assert!(s.curves[0].km.eval(t) <= s.curves[1].km.eval(t));
        }
        assert_eq!(s.curves[0].km.eval(30.0), 0.0);
        assert_eq!(s.curves[1].km.eval(15.0), 1.0);
    }

    #[test]
    fn quantiles() {
        let names = vec!["x".to_string()];
        let feats: Vec<Vec<f64>> = [1.0, 2.0, 3.0, 4.0, 5.0, f64::NAN].iter().map(|&v| vec![v]).collect();
        let q = quantile_table(&[0; 6], 1, &names, &feats);
        assert_eq!(q.len(), 1);
        let r = &q[0];
        assert_eq!((r.count, r.min, r.q25, r.median, r.q75, r.max), (5, 1.0, 2.0, 3.0, 4.0, 5.0));
    }

    fn partition() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (2usize..40).prop_flat_map(|n| (prop::collection::vec(0usize..4, n), prop::collection::vec(0usize..5, n)))
    }

    proptest! {
        #[test]
        fn ari_symmetric_and_permutation_invariant((a, b) in partition(), shift in 1usize..4) {
            let ab = ari(&a, &b).unwrap();
            prop_assert_eq!(ab, ari(&b, &a).unwrap());
            let relabeled: Vec<usize> = a.iter().map(|&x| (x + shift) % 4).collect();
            prop_assert!((ab - ari(&relabeled, &b).unwrap()).abs() < 1e-12);
            prop_assert!(ab <= 1.0 + 1e-12 && ab >= -1.0 - 1e-12);
        }

        #[test]
        fn haberman_residual_mass_balances((a, b) in partition()) {
            let t = ContingencyTable::from_pairs(&a, &b, 4, 5).unwrap();
            let cells = haberman_z(&t).unwrap();
            for k in 0..5 {
                let s: f64 = cells.iter().filter(|c| c.level == k).map(|c| c.observed as f64 - c.expected).sum();
                prop_assert!(s.abs() < 1e-9);
            }
        }

        #[test]
        fn routing_rows_sum_to_one((a, b) in partition()) {
            let r = routing_matrix(&a, &b, 4, 5).unwrap();
            for (row, &n) in r.rows.iter().zip(&r.sizes) {
                if n > 0 {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
            prop_assert!(r.purity <= 1.0 && r.purity >= 0.2 - 1e-12);
        }
    }
}
