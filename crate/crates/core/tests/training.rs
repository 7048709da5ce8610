//! Training sanity and calibration of the true-distribution predictor on synthetic data.

use std::path::Path;

use statrs::distribution::{ContinuousCDF, LogNormal};
use survmoe::data::{
    discretize, generate_synthetic, load_csv, lognormal_params, split, ColumnRoles, SyntheticSpec, TimeGrid,
};
use survmoe::heads::HeadKind;
use survmoe::metrics::*;
use survmoe::model::{BackboneConfig, HeadSpec};
use survmoe::mtlr::pmf_nll_with_grad;
use survmoe::parallel::Execution;
use survmoe::train::{train, TrainConfig};

#[test]
fn validation_loss_beats_constant_pmf() {
    let data = generate_synthetic(&SyntheticSpec::ten_class(100, 7)).unwrap();
    let (tr, va, _) = split(&data, (0.7, 0.15, 0.15), 7).unwrap();
    let cfg = TrainConfig {
        learning_rate: 5e-3,
        max_epochs: 40,
        bins: 20,
        seed: 7,
        ..Default::default()
    };
    for kind in [HeadKind::Fixed, HeadKind::Adjustable, HeadKind::Personalized, HeadKind::Mtlr] {
        let experts = if kind == HeadKind::Mtlr { 1 } else { 4 };
        let tm = train(
            &tr,
            &va,
            BackboneConfig { hidden_dim: 32, num_layers: 2 },
            HeadSpec { kind, experts, kappa_init: 2.0 },
            &cfg,
        )
        .unwrap();

        // best constant guess available without features: the training Kaplan–Meier curve, binned
        let grid = &tm.model.grid;
        let km = kaplan_meier(&tr.times(), &tr.events()).unwrap();
        let m = grid.bins();
        let baseline: Vec<f64> = (0..m)
            .map(|j| {
                let hi = if j + 1 == m { 0.0 } else { km.eval(grid.edges[j + 1]) };
                (km.eval(grid.edges[j]) - hi).max(1e-12)
            })
            .collect();
        let total: f64 = baseline.iter().sum();
        let baseline: Vec<f64> = baseline.iter().map(|p| p / total).collect();
        let targets = discretize(&va, grid);
        let base_nll = targets
            .iter()
            .map(|t| pmf_nll_with_grad(&baseline, t).unwrap().0)
            .sum::<f64>()
            / targets.len() as f64;
        assert!(
            tm.best_val_loss < base_nll - 0.05,
            "{kind}: val NLL {} vs constant {base_nll}",
            tm.best_val_loss
        );
    }
}

#[test]
fn true_distribution_predictor_is_calibrated_and_discriminative() {
    let spec = SyntheticSpec::ten_class(1000, 11);
    let data = generate_synthetic(&spec).unwrap();
    let grid = TimeGrid::from_dataset(&data, 100).unwrap();
    let eval_times = evaluation_times(&grid);
    let dists: Vec<LogNormal> = spec
        .class_means
        .iter()
        .zip(&spec.class_stds)
        .map(|(&m, &s)| {
            let (mu, sigma) = lognormal_params(m, s).unwrap();
            LogNormal::new(mu, sigma).unwrap()
        })
        .collect();
    let labels = data.labels().unwrap();
    let cdf_rows = |shift: usize| -> Vec<Vec<f64>> {
        labels
            .iter()
            .map(|&k| {
                let d = &dists[(k + shift) % dists.len()];
                eval_times.iter().map(|&t| if t.is_finite() { d.cdf(t) } else { 1.0 }).collect()
            })
            .collect()
    };
    let (times, events) = (data.times(), data.events());
    let g = censoring_survival(&times, &events).unwrap();
    let ece = |f: &[Vec<f64>]| {
        ece_equal_mass(f, &times, &events, &g, &eval_times, 10, Execution::Sequential)
            .unwrap()
            .ece
    };
    let oracle = ece(&cdf_rows(0));
    let wrong = ece(&cdf_rows(3));
    assert!(oracle < 0.02, "oracle ECE {oracle}");
    assert!(wrong > 5.0 * oracle, "mismatched-class ECE {wrong} vs oracle {oracle}");

    // median-survival concordance of the oracle bounds what any model can reach here
    let risks: Vec<f64> = labels.iter().map(|&k| -dists[k].inverse_cdf(0.5)).collect();
    let c = concordance_harrell(&risks, &times, &events).unwrap();
    assert!((0.85..0.95).contains(&c), "oracle concordance {c}");
}

#[test]
fn support2_roles_file_loads_a_table_with_those_columns() {
    let roles_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/support2_roles.json");
    let roles = ColumnRoles::from_json_file(&roles_path).unwrap();
    assert_eq!((roles.time.as_str(), roles.event.as_str()), ("d.time", "death"));
    let mut header: Vec<String> = vec!["id".into(), "hospdead".into(), "d.time".into(), "death".into()];
    header.extend(roles.continuous.iter().cloned());
    header.extend(roles.categorical.iter().cloned());
    let row = |i: usize| -> String {
        let mut v = vec![i.to_string(), "0".into(), format!("{}", 10 + i), (i % 2).to_string()];
        v.extend(roles.continuous.iter().enumerate().map(|(j, _)| if (i + j) % 7 == 0 { String::new() } else { format!("{}.5", j + i) }));
        v.extend(roles.categorical.iter().map(|_| if i % 3 == 0 { "NA".to_string() } else { format!("lvl{}", i % 2) }));
        v.join(",")
    };
    let mut text = header.join(",") + "\n";
    for i in 0..12 {
        text += &(row(i) + "\n");
    }
    let tmp = tempfile::TempDir::new().unwrap();
    let path = tmp.path().join("support2.csv");
    std::fs::write(&path, text).unwrap();
    let data = load_csv(&path, &roles, None).unwrap();
    assert_eq!(data.len(), 12);
    assert_eq!(data.continuous_names.len(), roles.continuous.len());
    assert_eq!(data.categorical.len(), roles.categorical.len());
    assert!(!data.continuous_names.contains(&"hospdead".to_string()));
}
