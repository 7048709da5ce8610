//! Mini-batch training: reverse-mode gradients, Adam, early stopping and
//! finite-difference gradient checks.
//!
//! Batch gradients are accumulated in fixed-size chunks of records. Chunks
//! may run on different threads, but their partial sums are always added in
//! chunk order, so results do not depend on the execution mode or thread count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    apply_standardizer, discretize, fit_standardizer, CategoricalColumn, Dataset, EncodedTarget,
    SurvivalRecord, TimeGrid,
};
use crate::error::{Error, Result};
use crate::heads::{load_balance_grad, load_balance_loss, uniform_fill, Head, HeadKind, InverseSolver};
use crate::model::{BackboneConfig, HeadSpec, Model, RecordPass};
use crate::mtlr::{nll, pmf_to_logits, pmf_nll_with_grad, EventPmf};
use crate::parallel::Execution;
use crate::params::{add_assign, all_finite, Params};

/// Records per gradient-accumulation chunk.
pub const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda_lb: f64,
    pub kappa_init: f64,
    pub bins: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default)]
    pub solver: InverseSolver,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            batch_size: 64,
            lambda_lb: 0.01,
            kappa_init: 2.0,
            bins: 100,
            patience: 10,
            max_epochs: 100,
            seed: 0,
            execution: Execution::default(),
            solver: InverseSolver::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.kappa_init > 0.0) {
            return Err(Error::Config(format!("kappa init must be positive, got {}", self.kappa_init)));
        }
        if !(self.lambda_lb >= 0.0) {
            return Err(Error::Config(format!("lambda_lb must be non-negative, got {}", self.lambda_lb)));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size, patience and max epochs must be at least 1".into()));
        }
        if self.bins < 2 {
            return Err(Error::Config(format!("need at least 2 time bins, got {}", self.bins)));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) {
        let mut flat = params.to_flat();
        self.step_flat(&mut flat, &grads.to_flat());
        params.load_flat(&flat);
    }
}

/// Outcome of one early-stopping observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Wait,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopSignal {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            StopSignal::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopSignal::Stop
            } else {
                StopSignal::Wait
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchGradient {
    /// Mean NLL plus the load-balancing term.
    pub loss: f64,
    pub mean_nll: f64,
    pub grads: Model,
}

/// Exact gradients of the batch loss over every model parameter.
///
/// `records` must already be standardized.
pub fn compute_gradients(
    model: &Model,
    records: &[SurvivalRecord],
    targets: &[EncodedTarget],
    batch: &[usize],
    lambda_lb: f64,
    exec: Execution,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::Empty("gradient batch".into()));
    }
    let prepared = model.head.prepare();
    let passes: Vec<RecordPass> = exec.map(batch, |&i| model.forward(&records[i], prepared.as_deref()));

    let (lb_loss, lb_grad) = match model.head.router() {
        Some(_) if lambda_lb > 0.0 => {
            let alphas: Vec<Vec<f64>> = passes
                .iter()
                .map(|p| p.head.alpha.clone().expect("MoE heads route"))
                .collect();
            (load_balance_loss(&alphas, lambda_lb)?, Some(load_balance_grad(&alphas, lambda_lb)?))
        }
        _ => (0.0, None),
    };

    let scale = 1.0 / batch.len() as f64;
    let chunks: Vec<(usize, usize)> = (0..batch.len())
        .step_by(GRAD_CHUNK)
        .map(|s| (s, (s + GRAD_CHUNK).min(batch.len())))
        .collect();
    let partials = exec.map(&chunks, |&(start, end)| -> Result<(f64, Model)> {
        let mut grads = model.zeros_like();
        let mut nll_sum = 0.0;
        for k in start..end {
            let i = batch[k];
            let pass = &passes[k];
            let (loss, mut dp) = pmf_nll_with_grad(&pass.head.pmf, &targets[i])?;
            nll_sum += loss;
            dp.iter_mut().for_each(|d| *d *= scale);
            let dx = model.head.backward(
                &pass.backbone.output,
                &pass.head,
                &dp,
                lb_grad.as_deref(),
                &mut grads.head,
            );
            model
                .backbone
                .backward(&records[i], &pass.backbone, &dx, &mut grads.backbone);
        }
        Ok((nll_sum, grads))
    });

    let mut total = model.zeros_like();
    let mut nll_sum = 0.0;
    for part in partials {
        let (s, g) = part?;
        nll_sum += s;
        add_assign(&mut total, &g);
    }
    let mean_nll = nll_sum * scale;
    Ok(BatchGradient {
        loss: mean_nll + lb_loss,
        mean_nll,
        grads: total,
    })
}

/// Mean NLL of standardized records (no load-balancing term).
pub fn mean_nll(model: &Model, records: &[SurvivalRecord], targets: &[EncodedTarget], exec: Execution) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("loss evaluation set".into()));
    }
    let prepared = model.head.prepare();
    let losses = exec.map_range(records.len(), |i| {
        let p = model.forward(&records[i], prepared.as_deref()).head.pmf;
        nll(&pmf_to_logits(&EventPmf(p)), &targets[i])
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model: Model,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainedModel {
    /// `epoch,train_loss,val_loss` rows.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.history {
            s.push_str(&format!("{},{:.17e},{:.17e}\n", e.epoch, e.train_loss, e.val_loss));
        }
        s
    }
}

/// Trains on `train`, early-stopping on the validation NLL, and returns the best epoch's parameters.
///
/// Standardization statistics and the time grid are fitted on `train`.
pub fn train(
    train: &Dataset,
    val: &Dataset,
    backbone: BackboneConfig,
    head: HeadSpec,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    train_observed(train, val, backbone, head, cfg, |_| {})
}

/// [`train`] with a per-epoch callback (used for progress logging).
pub fn train_observed(
    train: &Dataset,
    val: &Dataset,
    backbone: BackboneConfig,
    head: HeadSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training and validation splits must be non-empty".into()));
    }
    let schema = fit_standardizer(train)?;
    let grid = TimeGrid::from_dataset(train, cfg.bins)?;
    let train_std = apply_standardizer(&schema, train)?;
    let val_std = apply_standardizer(&schema, val)?;
    let train_targets = discretize(&train_std, &grid);
    let val_targets = discretize(&val_std, &grid);

    let mut model = Model::new(schema, grid, backbone, head, cfg.seed)?;
    if let Head::Adjustable(h) = &mut model.head {
        h.solver = cfg.solver;
    }
    for r in train_std.records.iter().chain(&val_std.records) {
        crate::model::backbone_forward(r, &model.backbone)?;
    }

    let mut adam = Adam::new(cfg.learning_rate, model.num_params());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_std.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let g = compute_gradients(
                &model,
                &train_std.records,
                &train_targets,
                batch,
                cfg.lambda_lb,
                cfg.execution,
            )?;
            if !g.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {} at epoch {epoch}, batch {b} (step {step})",
                    g.loss
                )));
            }
            if let Some(block) = all_finite(&g.grads) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in {block} at epoch {epoch}, batch {b} (step {step})"
                )));
            }
            adam.step(&mut model, &g.grads);
            weighted += g.loss * batch.len() as f64;
        }
        let val_loss = mean_nll(&model, &val_std.records, &val_targets, cfg.execution)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        let stats = EpochStats {
            epoch,
            train_loss: weighted / train_std.len() as f64,
            val_loss,
        };
        history.push(stats);
        on_epoch(&stats);
        match stopper.observe(epoch, val_loss) {
            StopSignal::Improved => best = model.clone(),
            StopSignal::Wait => {}
            StopSignal::Stop => break,
        }
    }
    Ok(TrainedModel {
        model: best,
        history,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best,
    })
}

/// Maximum relative error between analytic and central-difference gradients, per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub head: HeadKind,
    pub experts: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub blocks: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// `|a - f| / max(|a|, |f|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Loss at the current parameters (mean NLL + load balance) on a standardized batch.
fn batch_objective(model: &Model, records: &[SurvivalRecord], targets: &[EncodedTarget], lambda_lb: f64) -> Result<f64> {
    let mut alphas = Vec::new();
    let mut total = 0.0;
    for (r, t) in records.iter().zip(targets) {
        let out = model.forward(r, None).head;
        total += pmf_nll_with_grad(&out.pmf, t)?.0;
        if let Some(a) = out.alpha {
            alphas.push(a);
        }
    }
    let mut loss = total / records.len() as f64;
    if !alphas.is_empty() && lambda_lb > 0.0 {
        loss += load_balance_loss(&alphas, lambda_lb)?;
    }
    Ok(loss)
}

/// Compares analytic gradients of `model` on a standardized batch to central differences.
///
/// `flip_sign` negates the analytic gradient; it exists so the harness can
/// prove it detects a wrong gradient.
pub fn grad_check_model(
    model: &Model,
    records: &[SurvivalRecord],
    targets: &[EncodedTarget],
    lambda_lb: f64,
    epsilon: f64,
    tolerance: f64,
    flip_sign: bool,
) -> Result<GradCheckReport> {
    let idx: Vec<usize> = (0..records.len()).collect();
    let g = compute_gradients(model, records, targets, &idx, lambda_lb, Execution::Sequential)?;
    let mut analytic = g.grads.to_flat();
    if flip_sign {
        analytic.iter_mut().for_each(|a| *a = -*a);
    }
    let base = model.to_flat();
    let mut probe = model.clone();
    let mut blocks = Vec::new();
    let mut offset = 0;
    for (name, len) in model.block_layout() {
        let mut worst: f64 = 0.0;
        for i in offset..offset + len {
            let mut theta = base.clone();
            theta[i] = base[i] + epsilon;
            probe.load_flat(&theta);
            let up = batch_objective(&probe, records, targets, lambda_lb)?;
            theta[i] = base[i] - epsilon;
            probe.load_flat(&theta);
            let down = batch_objective(&probe, records, targets, lambda_lb)?;
            let fd = (up - down) / (2.0 * epsilon);
            worst = worst.max(relative_error(analytic[i], fd));
        }
        blocks.push((name, worst));
        offset += len;
    }
    let max_rel_err = blocks.iter().map(|b| b.1).fold(0.0, f64::max);
    Ok(GradCheckReport {
        head: model.head.kind(),
        experts: model.head.experts(),
        epsilon,
        tolerance,
        blocks,
        max_rel_err,
        passed: max_rel_err < tolerance,
    })
}

/// Tiny fixed-size problem used by [`grad_check`]: 3 continuous features, one
/// 3-level categorical column, `m = 6`, 4 records (two censored).
pub fn tiny_problem(kind: HeadKind, experts: usize, seed: u64) -> Result<(Model, Vec<SurvivalRecord>, Vec<EncodedTarget>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let column = CategoricalColumn {
        name: "c".into(),
        levels: vec!["<missing>".into(), "a".into(), "b".into()],
    };
    let records: Vec<SurvivalRecord> = (0..4)
        .map(|i| SurvivalRecord {
            continuous: (0..3).map(|_| rng.random_range(-1.5..1.5)).collect(),
            categorical: vec![i % 3],
            time: rng.random_range(0.5..10.0),
            event: i % 2 == 0,
            label: None,
        })
        .collect();
    let data = Dataset::new(vec!["x0".into(), "x1".into(), "x2".into()], vec![column], records)?;
    let schema = fit_standardizer(&data)?;
    let grid = TimeGrid::uniform(6, 10.0)?;
    let std = apply_standardizer(&schema, &data)?;
    let targets = discretize(&std, &grid);
    let mut model = Model::new(
        schema,
        grid,
        BackboneConfig { hidden_dim: 8, num_layers: 2 },
        HeadSpec { kind, experts, kappa_init: 2.0 },
        seed,
    )?;
    match &mut model.head {
        Head::Adjustable(h) => {
            h.solver = InverseSolver::Converged;
            // move off the neutral warp so slope/center gradients are well above FD noise
            uniform_fill(&mut rng, &mut h.warp_bias, 2.0);
            uniform_fill(&mut rng, &mut h.prototypes.scores, 1.0);
        }
        Head::Fixed(h) => uniform_fill(&mut rng, &mut h.prototypes.scores, 1.0),
        Head::Personalized(h) => uniform_fill(&mut rng, &mut h.chunk_bias, 0.5),
        Head::Mtlr(h) => uniform_fill(&mut rng, &mut h.bias, 0.5),
    }
    Ok((model, std.records, targets))
}

/// Runs a finite-difference check of the full loss on [`tiny_problem`].
pub fn grad_check(kind: HeadKind, experts: usize, seed: u64, epsilon: f64, tolerance: f64, flip_sign: bool) -> Result<GradCheckReport> {
    let (model, records, targets) = tiny_problem(kind, experts, seed)?;
    grad_check_model(&model, &records, &targets, 0.1, epsilon, tolerance, flip_sign)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split, SyntheticSpec};
    use approx::assert_abs_diff_eq;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(0.01, 3);
        let mut p = vec![1.0, 2.0, 3.0];
        adam.step_flat(&mut p, &[0.5, -2.0, 1e-3]);
        assert_abs_diff_eq!(p[0], 1.0 - 0.01, epsilon = 1e-9);
        assert_abs_diff_eq!(p[1], 2.0 + 0.01, epsilon = 1e-9);
        assert_abs_diff_eq!(p[2], 3.0 - 0.01, epsilon = 1e-7);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut adam = Adam::new(0.1, 2);
        let mut p = vec![0.3, -0.7];
        for _ in 0..5 {
            adam.step_flat(&mut p, &[0.0, 0.0]);
        }
        assert_eq!(p, vec![0.3, -0.7]);
    }

    #[test]
    fn adam_matches_reference_trace() {
        // f(x) = sum c_i x_i^2, grad 2 c_i x_i; trace recomputed from the textbook recursion
        let c = [1.0, 0.5, 2.0];
        let mut x = vec![1.0, -2.0, 0.5];
        let mut adam = Adam::new(0.1, 3);
        let (mut m, mut v, mut r) = ([0.0; 3], [0.0; 3], x.clone());
        for t in 1..=5 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * c[i] * x[i]).collect();
            adam.step_flat(&mut x, &g);
            for i in 0..3 {
                let gi = 2.0 * c[i] * r[i];
                m[i] = 0.9 * m[i] + 0.1 * gi;
                v[i] = 0.999 * v[i] + 0.001 * gi * gi;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                r[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for i in 0..3 {
            assert_abs_diff_eq!(x[i], r[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn adam_two_steps_by_hand() {
        // x^2 from x = 1: step 1 moves by lr(1 - 1e-8/...), step 2 by lr * 1.8947 / 1.9026
        let mut adam = Adam::new(0.1, 1);
        let mut x = vec![1.0];
        adam.step_flat(&mut x, &[2.0]);
        assert_abs_diff_eq!(x[0], 0.9, epsilon = 1e-8);
        let g = 2.0 * x[0];
        adam.step_flat(&mut x, &[g]);
        assert_abs_diff_eq!(x[0], 0.800_412_228_69, epsilon = 1e-10);
    }

    #[test]
    fn early_stopping_after_plateau() {
        let mut s = EarlyStopping::new(10);
        let mut stopped = None;
        for epoch in 1..=100 {
            let val = if epoch <= 7 { 10.0 - epoch as f64 } else { 5.0 };
            if s.observe(epoch, val) == StopSignal::Stop {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(s.best_epoch, 7);
        assert_eq!(stopped, Some(17));
    }

    #[test]
    fn grad_check_passes_for_every_head() {
        for (kind, n) in [
            (HeadKind::Mtlr, 1),
            (HeadKind::Fixed, 2),
            (HeadKind::Fixed, 4),
            (HeadKind::Adjustable, 2),
            (HeadKind::Adjustable, 4),
            (HeadKind::Personalized, 2),
            (HeadKind::Personalized, 4),
        ] {
            let r = grad_check(kind, n, 3, 1e-5, 1e-4, false).unwrap();
            assert!(r.passed, "{kind} n={n}: {:?}", r.blocks);
        }
    }

    #[test]
    fn flipped_gradient_is_detected() {
        let r = grad_check(HeadKind::Fixed, 2, 3, 1e-5, 1e-4, true).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn single_expert_without_balance_has_no_kappa_gradient() {
        let (model, records, targets) = tiny_problem(HeadKind::Fixed, 1, 2).unwrap();
        let g = compute_gradients(&model, &records, &targets, &[0, 1, 2, 3], 0.0, Execution::Sequential).unwrap();
        match g.grads.head {
            Head::Fixed(h) => assert_eq!(h.router.kappa_raw, 0.0),
            _ => unreachable!(),
        }
    }

    #[test]
    fn duplicated_record_keeps_the_mean_gradient() {
        let (model, records, targets) = tiny_problem(HeadKind::Personalized, 2, 5).unwrap();
        let one = compute_gradients(&model, &records, &targets, &[1], 0.0, Execution::Sequential).unwrap();
        let two = compute_gradients(&model, &records, &targets, &[1, 1], 0.0, Execution::Sequential).unwrap();
        for (a, b) in one.grads.to_flat().iter().zip(two.grads.to_flat()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn parallel_and_sequential_gradients_are_identical() {
        let (model, records, targets) = tiny_problem(HeadKind::Adjustable, 4, 9).unwrap();
        let batch: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let a = compute_gradients(&model, &records, &targets, &batch, 0.01, Execution::Sequential).unwrap();
        let b = compute_gradients(&model, &records, &targets, &batch, 0.01, Execution::Parallel).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.grads.to_flat(), b.grads.to_flat());
    }

    fn small_synthetic(seed: u64) -> (Dataset, Dataset, Dataset) {
        let data = generate_synthetic(&SyntheticSpec::ten_class(60, seed)).unwrap();
        split(&data, (0.6, 0.2, 0.2), seed).unwrap()
    }

    fn quick_config(seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 5e-3,
            max_epochs: 3,
            bins: 20,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, va, _) = small_synthetic(1);
        let bb = BackboneConfig { hidden_dim: 16, num_layers: 1 };
        let head = HeadSpec { kind: HeadKind::Adjustable, experts: 3, kappa_init: 2.0 };
        let mut cfg = quick_config(4);
        let a = train(&tr, &va, bb, head, &cfg).unwrap();
        cfg.execution = Execution::Sequential;
        let b = train(&tr, &va, bb, head, &cfg).unwrap();
        assert_eq!(a.model.to_flat(), b.model.to_flat());
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn first_epoch_reduces_training_loss() {
        let bb = BackboneConfig { hidden_dim: 32, num_layers: 2 };
        let head = HeadSpec { kind: HeadKind::Fixed, experts: 10, kappa_init: 2.0 };
        let mut gains = 0.0;
        for seed in 0..5 {
            let (tr, va, _) = small_synthetic(seed);
            let mut cfg = quick_config(seed);
            cfg.max_epochs = 1;
            let t = train(&tr, &va, bb, head, &cfg).unwrap();
            // loss of the untrained model on the same standardized split
            let init = Model::new(t.model.schema.clone(), t.model.grid.clone(), bb, head, seed).unwrap();
            let std = apply_standardizer(&t.model.schema, &tr).unwrap();
            let targets = discretize(&std, &t.model.grid);
            let before = mean_nll(&init, &std.records, &targets, Execution::Sequential).unwrap();
            let after = mean_nll(&t.model, &std.records, &targets, Execution::Sequential).unwrap();
            gains += before - after;
        }
        assert!(gains > 0.0, "seed-summed training-loss change {gains}");
    }

    #[test]
    fn best_epoch_respects_patience() {
        let (tr, va, _) = small_synthetic(2);
        let bb = BackboneConfig { hidden_dim: 16, num_layers: 1 };
        let head = HeadSpec { kind: HeadKind::Fixed, experts: 4, kappa_init: 2.0 };
        let mut cfg = quick_config(2);
        cfg.max_epochs = 60;
        cfg.patience = 3;
        cfg.learning_rate = 2e-2;
        let t = train(&tr, &va, bb, head, &cfg).unwrap();
        let last = t.history.last().unwrap().epoch;
        assert!(t.best_epoch + cfg.patience >= last);
        let min = t.history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(t.best_val_loss, min);
        let std = apply_standardizer(&t.model.schema, &va).unwrap();
        let targets = discretize(&std, &t.model.grid);
        let again = mean_nll(&t.model, &std.records, &targets, Execution::Sequential).unwrap();
        assert_eq!(again, min);
    }

    #[test]
    fn nan_input_aborts_with_diagnostic() {
        let (mut tr, va, _) = small_synthetic(3);
        // an infinite feature survives standardization as NaN and poisons the forward pass
        tr.records[0].continuous[0] = f64::INFINITY;
        let bb = BackboneConfig { hidden_dim: 8, num_layers: 1 };
        let head = HeadSpec { kind: HeadKind::Fixed, experts: 2, kappa_init: 2.0 };
        let err = train(&tr, &va, bb, head, &quick_config(1)).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("epoch 1")), "{err}");
    }
}
