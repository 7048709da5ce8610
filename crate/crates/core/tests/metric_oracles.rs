//! Library metrics against the brute-force references in `oracles`.

mod oracles;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survmoe::cluster::{ari, haberman_z, ContingencyTable};
use survmoe::data::EncodedTarget;
use survmoe::metrics::*;
use survmoe::mtlr::{logits_to_pmf, nll, pmf_to_logits, IncrementLogits};
use survmoe::parallel::Execution;

const TOL: f64 = 1e-12;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn km_matches_rescan() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.random_range(1..=50);
        let inst = oracles::random_instance(&mut rng, n, 1, true);
        let km = kaplan_meier(&inst.times, &inst.events).unwrap();
        let g = censoring_survival(&inst.times, &inst.events).unwrap();
        for k in 0..30 {
            let t = 0.25 * k as f64;
            assert!(close(km.eval(t), oracles::km_at(&inst.times, &inst.events, t)));
            assert!(close(g.eval(t), oracles::censoring_at(&inst.times, &inst.events, t)));
        }
    }
}

#[test]
fn brier_ece_and_concordance_match_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.random_range(2..=50);
        let t = rng.random_range(1..=10);
        let q = rng.random_range(1..=n.min(10));
        let inst = oracles::random_instance(&mut rng, n, t, true);
        let g = censoring_survival(&inst.times, &inst.events).unwrap();
        for (j, &tj) in inst.eval_times.iter().enumerate() {
            let b = brier_ipcw(&inst.f, &inst.times, &inst.events, &g, j, tj);
            assert!(close(b, oracles::brier(&inst.f, &inst.times, &inst.events, j, tj)));
        }
        let e = ece_equal_mass(&inst.f, &inst.times, &inst.events, &g, &inst.eval_times, q, Execution::Sequential)
            .unwrap();
        assert!(close(e.ece, oracles::ece(&inst.f, &inst.times, &inst.events, &inst.eval_times, q)));

        let risks: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        match oracles::harrell(&risks, &inst.times, &inst.events) {
            Some(c) => assert!(close(concordance_harrell(&risks, &inst.times, &inst.events).unwrap(), c)),
            None => assert!(concordance_harrell(&risks, &inst.times, &inst.events).is_err()),
        }
        match oracles::uno(&risks, &inst.times, &inst.events) {
            Some(c) => assert!(close(concordance_ipcw(&risks, &inst.times, &inst.events, &g).unwrap(), c)),
            None => assert!(concordance_ipcw(&risks, &inst.times, &inst.events, &g).is_err()),
        }
    }
}

#[test]
fn haberman_and_ari_match_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..300 {
        let n = rng.random_range(1..=50);
        let (r, c) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..r)).collect();
        let cols: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let table = ContingencyTable::from_pairs(&rows, &cols, r, c).unwrap();
        let cells = haberman_z(&table).unwrap();
        for (cell, want) in cells.iter().zip(oracles::haberman(&rows, &cols, r, c)) {
            match (cell.z, want) {
                (Some(a), Some(b)) => assert!(close(a, b)),
                (None, None) => {}
                other => panic!("z mismatch {other:?}"),
            }
        }
        assert!(close(ari(&rows, &cols).unwrap(), oracles::ari(&rows, &cols)));
    }
}

#[test]
fn ipcw_metrics_equal_unweighted_without_censoring() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let n = rng.random_range(2..=50);
        let t = rng.random_range(1..=10);
        let q = rng.random_range(1..=n.min(10));
        let inst = oracles::random_instance(&mut rng, n, t, false);
        let g = censoring_survival(&inst.times, &inst.events).unwrap();
        for (j, &tj) in inst.eval_times.iter().enumerate() {
            let plain = inst
                .f
                .iter()
                .zip(&inst.times)
                .map(|(row, &ti)| (row[j] - if ti <= tj { 1.0 } else { 0.0 }).powi(2))
                .sum::<f64>()
                / n as f64;
            assert_eq!(brier_ipcw(&inst.f, &inst.times, &inst.events, &g, j, tj), plain);

            let (gap, bins) = ece_at(&inst.f, &inst.times, &inst.events, &g, j, tj, q);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| inst.f[a][j].total_cmp(&inst.f[b][j]));
            let mut start = 0;
            let mut want = 0.0;
            for (k, bin) in bins.iter().enumerate() {
                let size = n / q + usize::from(k < n % q);
                let members = &order[start..start + size];
                start += size;
                let hits = members.iter().filter(|&&i| inst.times[i] <= tj).count() as f64;
                assert_eq!(bin.observed, hits / size as f64);
                want += size as f64 / n as f64 * (bin.mean_prediction - hits / size as f64).abs();
            }
            assert_eq!(gap, want);
        }
        let risks: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        if let Ok(c) = concordance_harrell(&risks, &inst.times, &inst.events) {
            assert_eq!(concordance_ipcw(&risks, &inst.times, &inst.events, &g).unwrap(), c);
        }
    }
}

proptest! {
    #[test]
    fn nll_matches_enumeration(z in prop::collection::vec(-6.0f64..6.0, 2..=6), pick in 0usize..6, event: bool) {
        let bin = pick % z.len();
        let target = EncodedTarget::new(bin, event, z.len());
        let got = nll(&IncrementLogits(z.clone()), &target).unwrap();
        prop_assert!((got - oracles::nll_enumerated(&z, bin, event)).abs() < 1e-10);
    }

    #[test]
    fn pmf_logit_round_trip(z in prop::collection::vec(-4.0f64..4.0, 2..=6)) {
        let mut z = z;
        *z.last_mut().unwrap() = 0.0;
        let p = logits_to_pmf(&IncrementLogits(z.clone()));
        let back = pmf_to_logits(&p);
        for (a, b) in back.0.iter().zip(&z) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn concordance_is_a_probability(risks in prop::collection::vec(0.0f64..1.0, 2..30), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = oracles::random_instance(&mut rng, risks.len(), 1, true);
        if let Ok(c) = concordance_harrell(&risks, &inst.times, &inst.events) {
            prop_assert!((0.0..=1.0).contains(&c));
            let flipped: Vec<f64> = risks.iter().map(|r| -r).collect();
            let d = concordance_harrell(&flipped, &inst.times, &inst.events).unwrap();
            prop_assert!((c + d - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ari_is_symmetric_and_label_invariant(a in prop::collection::vec(0usize..4, 1..40), shift in 1usize..5) {
        let b: Vec<usize> = a.iter().map(|x| (x * 7 + shift) % 4).collect();
        prop_assert!((ari(&a, &b).unwrap() - ari(&b, &a).unwrap()).abs() < 1e-12);
        let relabeled: Vec<usize> = a.iter().map(|x| (x + shift) % 4).collect();
        prop_assert!((ari(&a, &relabeled).unwrap() - 1.0).abs() < 1e-12);
    }
}
