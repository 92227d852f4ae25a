//! Finite-difference check of the analytic gradients on random small models.

use serde::{Deserialize, Serialize};

use crate::blocks::BlockPartition;
use crate::error::{DvcError, Result};
use crate::model::{backward_with_masks, batch_loss, init_model, GateMasks, StateSize};
use crate::numerics::{derive_seed, finite_diff_grad, Rng};

/// Relative error accepted by [`GradcheckReport::passed`].
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub models: usize,
    pub max_cells: usize,
    pub max_q: usize,
    /// Pin every model to this many cells.
    pub cells: Option<usize>,
    /// Pin every model to this state size.
    pub q: Option<usize>,
    pub batch: usize,
    pub l2: f64,
    pub dropout: f64,
    pub step: f64,
    pub seed: u64,
    /// Corrupts one analytic gradient entry; the check must then fail.
    pub inject_bug: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            models: 20,
            max_cells: 3,
            max_q: 5,
            cells: None,
            q: None,
            batch: 4,
            l2: 1e-3,
            dropout: 0.25,
            step: 1e-5,
            seed: 0,
            inject_bug: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheck {
    pub cells: usize,
    pub q: usize,
    pub classes: usize,
    pub params: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub models: Vec<ModelCheck>,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.models == 0 || cfg.batch == 0 {
        return Err(DvcError::Config(
            "gradcheck needs at least one model and one example".into(),
        ));
    }
    if cfg.cells.unwrap_or(cfg.max_cells) == 0 || cfg.q.unwrap_or(cfg.max_q) == 0 {
        return Err(DvcError::Config("cells and q must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(DvcError::Config(format!(
            "dropout {} outside [0, 1)",
            cfg.dropout
        )));
    }
    let models = (0..cfg.models)
        .map(|m| check_one(cfg, derive_seed(cfg.seed, &[m as u64])))
        .collect::<Result<Vec<_>>>()?;
    let max_rel_error = models.iter().map(|m| m.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        models,
        max_rel_error,
    })
}

fn check_one(cfg: &GradcheckConfig, seed: u64) -> Result<ModelCheck> {
    let mut rng = Rng::new(seed);
    let cells = cfg.cells.unwrap_or_else(|| 1 + rng.below(cfg.max_cells));
    let q = cfg.q.unwrap_or_else(|| 1 + rng.below(cfg.max_q));
    let classes = 2 + rng.below(2);
    let mut blocks = Vec::with_capacity(cells);
    let mut p = 0;
    for _ in 0..cells {
        let size = 1 + rng.below(4);
        blocks.push((p..p + size).collect::<Vec<_>>());
        p += size;
    }
    let partition = BlockPartition::new(blocks, p)?;
    let order: Vec<usize> = (0..cells).rev().collect();
    let mut model = init_model(&order, &partition, classes, StateSize::Fixed(q), &mut rng)?;
    // move off the symmetric init so every gate sees non-trivial gradients
    let perturbed: Vec<f64> = model
        .flat_params()
        .iter()
        .map(|w| w + 0.3 * rng.normal())
        .collect();
    model.set_flat_params(&perturbed)?;

    let xs: Vec<Vec<f64>> = (0..cfg.batch)
        .map(|_| (0..p).map(|_| rng.normal()).collect())
        .collect();
    let ys: Vec<usize> = (0..cfg.batch).map(|_| rng.below(classes)).collect();
    let batch: Vec<(&[f64], usize)> = xs
        .iter()
        .map(|x| x.as_slice())
        .zip(ys.iter().copied())
        .collect();
    let masks: Vec<GateMasks> = (0..cfg.batch)
        .map(|_| GateMasks::sample(cells, q, cfg.dropout, &mut rng))
        .collect();

    let (_, grads) = backward_with_masks(&model, &batch, cfg.l2, &masks)?;
    let mut analytic = grads.flatten();
    if cfg.inject_bug {
        let i = rng.below(analytic.len());
        analytic[i] = analytic[i] * 1.5 + 1e-2;
    }
    let theta = model.flat_params();
    let mut probe = model.clone();
    let numeric = finite_diff_grad(
        |w| {
            probe.set_flat_params(w).expect("same length");
            batch_loss(&probe, &batch, cfg.l2, Some(&masks)).expect("valid batch")
        },
        &theta,
        cfg.step,
    );
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(ModelCheck {
        cells,
        q,
        classes,
        params: theta.len(),
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let rep = run_gradcheck(&GradcheckConfig::default()).unwrap();
        assert_eq!(rep.models.len(), 20);
        assert!(rep.models.iter().all(|m| m.cells <= 3 && m.q <= 5));
        assert!(rep.passed(DEFAULT_TOLERANCE), "{}", rep.max_rel_error);
    }

    #[test]
    fn scalar_model_is_tight() {
        let cfg = GradcheckConfig {
            cells: Some(1),
            q: Some(1),
            models: 5,
            ..GradcheckConfig::default()
        };
        let rep = run_gradcheck(&cfg).unwrap();
        assert!(rep.max_rel_error <= 1e-6, "{}", rep.max_rel_error);
    }

    #[test]
    fn injected_bug_is_caught() {
        let cfg = GradcheckConfig {
            inject_bug: true,
            ..GradcheckConfig::default()
        };
        assert!(!run_gradcheck(&cfg).unwrap().passed(DEFAULT_TOLERANCE));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
