//! Mini-batch Adam training, error rates and stratified cross-validation.

use serde::{Deserialize, Serialize};

use crate::blocks::BlockPartition;
use crate::data::Dataset;
use crate::error::{DvcError, Result};
use crate::model::{
    add_l2, init_model, BackwardScratch, DvcModel, ForwardTrace, GateMasks, Gradients, StateSize,
};
use crate::numerics::{adam_step, argmax, derive_seed, AdamConfig, AdamState, Rng};

/// Tags mixed into derived seeds so independent streams never collide.
pub(crate) mod tags {
    pub const INIT: u64 = 0x1;
    pub const SHUFFLE: u64 = 0x2;
    pub const FOLDS: u64 = 0x3;
    pub const CV_FIT: u64 = 0x4;
    pub const GREEDY: u64 = 0x5;
    pub const PARTITION: u64 = 0x6;
    pub const TREE_CV: u64 = 0x7;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2: f64,
    pub dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub cv_folds: usize,
    pub state_size: StateSize,
    /// Worker threads for independent trainings; 0 uses every core.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            batch_size: 32,
            epochs: 200,
            l2: 0.0,
            dropout: 0.0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            cv_folds: 5,
            state_size: StateSize::MinBlock,
            jobs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DvcError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.cv_folds < 2 {
            return bad("cv_folds must be >= 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout rate must lie in [0, 1)");
        }
        if self.lr < 0.0 || self.l2 < 0.0 {
            return bad("learning rate and l2 must be non-negative");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Same settings with a different seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Misclassified / total on the training data after the last epoch.
    pub train_error: f64,
    /// Mean penalized minibatch loss per epoch.
    pub loss_curve: Vec<f64>,
}

fn check_labels(model: &DvcModel, data: &Dataset) -> Result<()> {
    if data.n() == 0 {
        return Err(DvcError::EmptyDataset);
    }
    if let Some(&l) = data.y.iter().find(|&&l| l >= model.k()) {
        return Err(DvcError::LabelOutOfRange {
            label: l,
            classes: model.k(),
        });
    }
    Ok(())
}

/// Inputs of every sample, gathered once per training into cell order.
fn gather_all(model: &DvcModel, data: &Dataset) -> Result<(Vec<f64>, usize)> {
    let dim = model.used_features().len();
    let mut out = Vec::with_capacity(dim * data.n());
    for i in 0..data.n() {
        out.extend(model.gather(data.row(i))?);
    }
    Ok((out, dim))
}

/// Trains `model` in place of a copy: `epochs` passes of shuffled minibatches,
/// one Adam step per batch. Shuffling and dropout draw from `cfg.seed`.
pub fn train(
    mut model: DvcModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(DvcModel, FitReport)> {
    cfg.validate()?;
    check_labels(&model, data)?;
    let (inputs, dim) = gather_all(&model, data)?;
    let n = data.n();
    let mut rng = Rng::new(derive_seed(cfg.seed, &[tags::SHUFFLE]));
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads = Gradients::zeros_like(&model);
    let mut adam = AdamState::new(model.tensors().iter().map(|t| t.len()));
    let adam_cfg = cfg.adam();
    let mut trace = ForwardTrace::default();
    let mut scratch = BackwardScratch::default();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &i in batch {
                let masks = (cfg.dropout > 0.0)
                    .then(|| GateMasks::sample(model.len(), model.q(), cfg.dropout, &mut rng));
                model.forward_gathered(&inputs[i * dim..(i + 1) * dim], masks, &mut trace);
                loss += scale
                    * model.backward_trace(&trace, data.y[i], scale, &mut grads, &mut scratch);
            }
            if cfg.l2 > 0.0 {
                add_l2(&model, cfg.l2, &mut grads);
                loss += 0.5 * cfg.l2 * model.weight_norm_sq();
            }
            epoch_loss += loss * batch.len() as f64;
            adam_step(
                &mut model.tensors_mut(),
                &grads.tensors(),
                &mut adam,
                &adam_cfg,
            )?;
        }
        if !model.is_finite() {
            return Err(DvcError::NonFinite { epoch });
        }
        loss_curve.push(epoch_loss / n as f64);
    }
    let train_error = error_on_gathered(&model, &inputs, dim, &data.y);
    Ok((
        model,
        FitReport {
            train_error,
            loss_curve,
        },
    ))
}

fn error_on_gathered(model: &DvcModel, inputs: &[f64], dim: usize, y: &[usize]) -> f64 {
    let mut trace = ForwardTrace::default();
    let mut wrong = 0;
    for (i, &label) in y.iter().enumerate() {
        model.forward_gathered(&inputs[i * dim..(i + 1) * dim], None, &mut trace);
        if argmax(&trace.posteriors) != label {
            wrong += 1;
        }
    }
    wrong as f64 / y.len() as f64
}

/// Fraction of samples whose arg-max posterior (ties to the lowest class) differs from the label.
pub fn evaluate_error(model: &DvcModel, data: &Dataset) -> Result<f64> {
    check_labels(model, data)?;
    let (inputs, dim) = gather_all(model, data)?;
    Ok(error_on_gathered(model, &inputs, dim, &data.y))
}

/// Posterior vectors for every row of `data`.
pub fn predict_posteriors(model: &DvcModel, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    (0..data.n())
        .map(|i| model.posteriors(data.row(i)))
        .collect()
}

/// Fresh model on `chain_prefix` trained on `data`; init and shuffling seeds derive from `cfg.seed`.
pub fn fit_prefix(
    chain_prefix: &[usize],
    partition: &BlockPartition,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(DvcModel, FitReport)> {
    let mut init_rng = Rng::new(derive_seed(cfg.seed, &[tags::INIT]));
    let model = init_model(
        chain_prefix,
        partition,
        data.k(),
        cfg.state_size,
        &mut init_rng,
    )?;
    train(model, data, cfg)
}

/// Stratified fold labels: within each class the (shuffled) samples are dealt
/// round-robin, continuing where the previous class stopped so fold sizes stay balanced.
pub fn stratified_folds(data: &Dataset, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 || folds > data.n() {
        return Err(DvcError::Config(format!(
            "{folds} folds for {} samples",
            data.n()
        )));
    }
    let mut rng = Rng::new(seed);
    let mut assign = vec![0; data.n()];
    let mut next = 0;
    for mut idx in data.indices_by_class() {
        rng.shuffle(&mut idx);
        for i in idx {
            assign[i] = next % folds;
            next += 1;
        }
    }
    Ok(assign)
}

/// Train/held-out index lists for each fold; fails if a training side misses a class.
pub fn fold_indices(
    data: &Dataset,
    assign: &[usize],
    folds: usize,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let mut out = Vec::with_capacity(folds);
    for f in 0..folds {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..data.n()).partition(|&i| assign[i] == f);
        let mut seen = vec![false; data.k()];
        for &i in &train {
            seen[data.y[i]] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(DvcError::ClassCoverage {
                class: c,
                reason: format!("absent from the training folds of fold {f}"),
            });
        }
        out.push((train, test));
    }
    Ok(out)
}

/// Mean held-out error of fresh models on `chain_prefix` over stratified folds.
pub fn cross_validate(
    chain_prefix: &[usize],
    partition: &BlockPartition,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<f64> {
    cfg.validate()?;
    let assign = stratified_folds(data, cfg.cv_folds, derive_seed(cfg.seed, &[tags::FOLDS]))?;
    let splits = fold_indices(data, &assign, cfg.cv_folds)?;
    cross_validate_on(chain_prefix, partition, data, cfg, &splits)
}

/// Cross-validation over caller-supplied splits so several prefixes can share them.
pub fn cross_validate_on(
    chain_prefix: &[usize],
    partition: &BlockPartition,
    data: &Dataset,
    cfg: &TrainConfig,
    splits: &[(Vec<usize>, Vec<usize>)],
) -> Result<f64> {
    let mut total = 0.0;
    for (f, (train_idx, test_idx)) in splits.iter().enumerate() {
        let fold_cfg = cfg.reseeded(derive_seed(
            cfg.seed,
            &[tags::CV_FIT, chain_prefix.len() as u64, f as u64],
        ));
        let (model, _) = fit_prefix(chain_prefix, partition, &data.subset(train_idx), &fold_cfg)?;
        total += evaluate_error(&model, &data.subset(test_idx))?;
    }
    Ok(total / splits.len() as f64)
}
