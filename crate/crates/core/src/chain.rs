//! Greedy chain construction over variable blocks and global selection of the
//! chain length.
//!
//! [`build_chain`] grows the chain one block at a time. At step `v` a fresh
//! model is trained for every unused block appended to the current prefix and
//! the block with the lowest training error is kept; that candidate becomes the
//! sub-chain model for length `v`. [`global_select`] then cross-validates every
//! prefix length on one shared set of folds and keeps the shortest length with
//! the lowest held-out error.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::BlockPartition;
use crate::data::Dataset;
use crate::error::{io_err, DvcError, Result};
use crate::model::{init_model, DvcModel};
use crate::numerics::{derive_seed, Rng};
use crate::training::{
    cross_validate_on, fit_prefix, fold_indices, stratified_folds, tags, train, FitReport,
    TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub block: usize,
    pub train_error: f64,
}

/// Every candidate tried when extending the chain to `length`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAudit {
    pub length: usize,
    pub candidates: Vec<CandidateRecord>,
    pub chosen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChainOptions {
    /// Start each candidate from the previous step's model instead of a fresh init.
    pub warm_start: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    /// Block ids in chain order.
    pub order: Vec<usize>,
    /// `models[l - 1]` is the sub-chain model on the first `l` blocks.
    pub models: Vec<DvcModel>,
    pub train_errors: Vec<f64>,
    /// Filled by [`global_select`].
    pub cv_errors: Vec<f64>,
    /// Selected chain length, once [`global_select`] has run.
    pub selected: Option<usize>,
    pub audit: Vec<StepAudit>,
    pub partition: BlockPartition,
}

impl ChainResult {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// The selected length, or the full chain if selection has not run.
    pub fn selected_len(&self) -> usize {
        self.selected.unwrap_or(self.order.len())
    }

    /// Sub-chain models `1..=S`.
    pub fn selected_models(&self) -> &[DvcModel] {
        &self.models[..self.selected_len()]
    }

    /// The model on the selected sub-chain.
    pub fn final_model(&self) -> &DvcModel {
        &self.models[self.selected_len() - 1]
    }
}

pub(crate) fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| DvcError::Config(format!("thread pool: {e}")))
}

/// Forward step-wise greedy ordering of every block in `partition`.
pub fn build_chain(
    partition: &BlockPartition,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<ChainResult> {
    build_chain_with(partition, data, cfg, ChainOptions::default())
}

pub fn build_chain_with(
    partition: &BlockPartition,
    data: &Dataset,
    cfg: &TrainConfig,
    opts: ChainOptions,
) -> Result<ChainResult> {
    cfg.validate()?;
    if partition.is_empty() {
        return Err(DvcError::Partition("no blocks".into()));
    }
    if partition.total_features() != data.p() {
        return Err(DvcError::Partition(format!(
            "partition covers {} features, data has {}",
            partition.total_features(),
            data.p()
        )));
    }
    let pool = thread_pool(cfg.jobs)?;
    let v_total = partition.len();
    let mut order: Vec<usize> = Vec::with_capacity(v_total);
    let mut models: Vec<DvcModel> = Vec::with_capacity(v_total);
    let mut train_errors = Vec::with_capacity(v_total);
    let mut audit = Vec::with_capacity(v_total);

    for length in 1..=v_total {
        let unused: Vec<usize> = (0..v_total).filter(|b| !order.contains(b)).collect();
        let previous = models.last();
        let fits: Vec<(DvcModel, FitReport)> = pool.install(|| {
            unused
                .par_iter()
                .map(|&block| {
                    let mut prefix = order.clone();
                    prefix.push(block);
                    let cand_cfg = cfg.reseeded(derive_seed(
                        cfg.seed,
                        &[tags::GREEDY, length as u64, block as u64],
                    ));
                    match (opts.warm_start, previous) {
                        (true, Some(prev)) => {
                            let init = warm_init(prev, &prefix, partition, data.k(), &cand_cfg)?;
                            train(init, data, &cand_cfg)
                        }
                        _ => fit_prefix(&prefix, partition, data, &cand_cfg),
                    }
                })
                .collect::<Result<Vec<_>>>()
        })?;
        // lowest training error, ties to the lowest block id (unused is ascending)
        let mut best = 0;
        for (i, (_, rep)) in fits.iter().enumerate() {
            if rep.train_error < fits[best].1.train_error {
                best = i;
            }
        }
        audit.push(StepAudit {
            length,
            candidates: unused
                .iter()
                .zip(&fits)
                .map(|(&block, (_, rep))| CandidateRecord {
                    block,
                    train_error: rep.train_error,
                })
                .collect(),
            chosen: unused[best],
        });
        let (model, rep) = fits.into_iter().nth(best).expect("at least one candidate");
        order.push(unused[best]);
        train_errors.push(rep.train_error);
        models.push(model);
    }

    Ok(ChainResult {
        order,
        models,
        train_errors,
        cv_errors: Vec::new(),
        selected: None,
        audit,
        partition: partition.clone(),
    })
}

/// Copies the trained cells and head of `prev` and initializes the new last cell.
fn warm_init(
    prev: &DvcModel,
    prefix: &[usize],
    partition: &BlockPartition,
    classes: usize,
    cfg: &TrainConfig,
) -> Result<DvcModel> {
    let mut rng = Rng::new(derive_seed(cfg.seed, &[tags::INIT]));
    let fresh = init_model(prefix, partition, classes, cfg.state_size, &mut rng)?;
    let mut cells = prev.cells().to_vec();
    cells.push(fresh.cells()[prefix.len() - 1].clone());
    DvcModel::from_parts(prefix, partition, cells, prev.head().clone())
}

/// Cross-validated error for every prefix length on one shared fold split;
/// stores the errors and the shortest length attaining the minimum.
pub fn global_select(chain: &mut ChainResult, data: &Dataset, cfg: &TrainConfig) -> Result<usize> {
    cfg.validate()?;
    if chain.is_empty() {
        return Err(DvcError::EmptyChain);
    }
    let assign = stratified_folds(data, cfg.cv_folds, derive_seed(cfg.seed, &[tags::FOLDS]))?;
    let splits = fold_indices(data, &assign, cfg.cv_folds)?;
    let pool = thread_pool(cfg.jobs)?;
    let order = &chain.order;
    let partition = &chain.partition;
    let cv_errors: Vec<f64> = pool.install(|| {
        (1..=order.len())
            .into_par_iter()
            .map(|l| cross_validate_on(&order[..l], partition, data, cfg, &splits))
            .collect::<Result<Vec<_>>>()
    })?;
    let s = select_length(&cv_errors);
    chain.cv_errors = cv_errors;
    chain.selected = Some(s);
    Ok(s)
}

/// 1-based position of the first minimum.
pub fn select_length(cv_errors: &[f64]) -> usize {
    let mut best = 0;
    for (i, e) in cv_errors.iter().enumerate() {
        if *e < cv_errors[best] {
            best = i;
        }
    }
    best + 1
}

/// Features of blocks `B_1..B_s`, in chain order.
pub fn selected_variables(chain: &ChainResult, s: usize) -> Result<Vec<usize>> {
    if s == 0 || s > chain.len() {
        return Err(DvcError::Config(format!(
            "selected length {s} outside 1..={}",
            chain.len()
        )));
    }
    Ok(chain.order[..s]
        .iter()
        .flat_map(|&b| chain.partition.block(b).features.iter().copied())
        .collect())
}

const CHAIN_FORMAT: &str = "dvc-chain";
const CHAIN_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ChainDoc {
    format: String,
    version: u32,
    order: Vec<usize>,
    train_errors: Vec<f64>,
    cv_errors: Vec<f64>,
    selected_length: Option<usize>,
    partition: BlockPartition,
    models: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct AuditDoc {
    steps: Vec<StepAudit>,
}

pub fn model_file_name(length: usize) -> String {
    format!("model_{length:03}.json")
}

impl ChainResult {
    /// Writes `chain.json`, `greedy_audit.json` and `models/model_NNN.json` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let model_dir = dir.join("models");
        std::fs::create_dir_all(&model_dir).map_err(io_err(&model_dir))?;
        let mut names = Vec::with_capacity(self.models.len());
        for (l, m) in self.models.iter().enumerate() {
            let name = format!("models/{}", model_file_name(l + 1));
            m.save(dir.join(&name))?;
            names.push(name);
        }
        let doc = ChainDoc {
            format: CHAIN_FORMAT.into(),
            version: CHAIN_VERSION,
            order: self.order.clone(),
            train_errors: self.train_errors.clone(),
            cv_errors: self.cv_errors.clone(),
            selected_length: self.selected,
            partition: self.partition.clone(),
            models: names,
        };
        let path = dir.join("chain.json");
        std::fs::write(&path, serde_json::to_string_pretty(&doc)?).map_err(io_err(&path))?;
        let path = dir.join("greedy_audit.json");
        let audit = AuditDoc {
            steps: self.audit.clone(),
        };
        std::fs::write(&path, serde_json::to_string_pretty(&audit)?).map_err(io_err(&path))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("chain.json");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let doc: ChainDoc = serde_json::from_str(&text)?;
        if doc.format != CHAIN_FORMAT || doc.version != CHAIN_VERSION {
            return Err(DvcError::Config(format!(
                "unsupported chain document {} v{}",
                doc.format, doc.version
            )));
        }
        let models = doc
            .models
            .iter()
            .map(|name| DvcModel::load(dir.join(name)))
            .collect::<Result<Vec<_>>>()?;
        for (l, m) in models.iter().enumerate() {
            if m.block_ids() != &doc.order[..l + 1] {
                return Err(DvcError::Partition(format!(
                    "model {} does not sit on the chain prefix",
                    l + 1
                )));
            }
        }
        let audit_path = dir.join("greedy_audit.json");
        let audit = match std::fs::read_to_string(&audit_path) {
            Ok(text) => serde_json::from_str::<AuditDoc>(&text)?.steps,
            Err(_) => Vec::new(),
        };
        Ok(Self {
            order: doc.order,
            models,
            train_errors: doc.train_errors,
            cv_errors: doc.cv_errors,
            selected: doc.selected_length,
            audit,
            partition: doc.partition,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    /// Block 1 (features 2,3) separates the classes; blocks 0 and 2 are noise.
    fn one_informative(seed: u64) -> (Dataset, BlockPartition) {
        let mut rng = Rng::new(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..80 {
            let c = i % 2;
            let shift = if c == 0 { -1.5 } else { 1.5 };
            let mut r: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            r[2] = shift + 0.4 * rng.normal();
            r[3] = shift + 0.4 * rng.normal();
            rows.push(r);
            y.push(c);
        }
        let d = Dataset::new(
            Matrix::from_rows(&rows).unwrap(),
            y,
            (0..6).map(|j| format!("f{j}")).collect(),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let part = BlockPartition::new(vec![vec![0, 1], vec![2, 3], vec![4, 5]], 6).unwrap();
        (d, part)
    }

    fn cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 0.03,
            epochs: 25,
            batch_size: 16,
            cv_folds: 4,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn informative_block_leads_the_chain() {
        for seed in 0..5 {
            let (d, part) = one_informative(seed);
            let chain = build_chain(&part, &d, &cfg(seed)).unwrap();
            assert_eq!(chain.order[0], 1, "seed {seed}: {:?}", chain.audit);
        }
    }

    #[test]
    fn chain_invariants() {
        let (d, part) = one_informative(11);
        let mut chain = build_chain(&part, &d, &cfg(3)).unwrap();
        let mut sorted = chain.order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
        for (l, m) in chain.models.iter().enumerate() {
            assert_eq!(m.block_ids(), &chain.order[..l + 1]);
        }
        for (step, err) in chain.audit.iter().zip(&chain.train_errors) {
            assert!(step.candidates.iter().all(|c| *err <= c.train_error));
            assert_eq!(
                step.candidates
                    .iter()
                    .find(|c| c.block == step.chosen)
                    .unwrap()
                    .train_error,
                *err
            );
        }
        let s = global_select(&mut chain, &d, &cfg(3)).unwrap();
        assert_eq!(chain.cv_errors.len(), 3);
        assert!(chain.cv_errors.iter().all(|e| *e >= chain.cv_errors[s - 1]));
        for l in 1..=3 {
            for l2 in l..=3 {
                let a = selected_variables(&chain, l).unwrap();
                let b = selected_variables(&chain, l2).unwrap();
                assert!(a.iter().all(|f| b.contains(f)));
            }
        }
        assert_eq!(selected_variables(&chain, 3).unwrap().len(), 6);
        assert!(selected_variables(&chain, 0).is_err());
        assert!(selected_variables(&chain, 4).is_err());
    }

    #[test]
    fn single_block_chain() {
        let (d, _) = one_informative(2);
        let part = BlockPartition::new(vec![(0..6).collect()], 6).unwrap();
        let mut chain = build_chain(&part, &d, &cfg(0)).unwrap();
        assert_eq!(chain.order, vec![0]);
        assert_eq!(chain.models.len(), 1);
        assert_eq!(global_select(&mut chain, &d, &cfg(0)).unwrap(), 1);
    }

    #[test]
    fn select_length_prefers_shortest_minimum() {
        assert_eq!(select_length(&[0.3, 0.2, 0.1]), 3);
        assert_eq!(select_length(&[0.3, 0.1, 0.1, 0.2]), 2);
        assert_eq!(select_length(&[0.0, 0.0]), 1);
    }

    #[test]
    fn deterministic_and_job_count_independent() {
        let (d, part) = one_informative(4);
        let a = build_chain(&part, &d, &cfg(9)).unwrap();
        let b = build_chain(&part, &d, &TrainConfig { jobs: 3, ..cfg(9) }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn warm_start_knob_runs() {
        let (d, part) = one_informative(5);
        let chain =
            build_chain_with(&part, &d, &cfg(1), ChainOptions { warm_start: true }).unwrap();
        assert_eq!(chain.models.len(), 3);
        assert_eq!(chain.order[0], 1);
    }

    #[test]
    fn save_load_round_trip() {
        let (d, part) = one_informative(6);
        let mut chain = build_chain(&part, &d, &cfg(2)).unwrap();
        global_select(&mut chain, &d, &cfg(2)).unwrap();
        let dir = std::env::temp_dir().join(format!("dvc-chain-{}", std::process::id()));
        chain.save(&dir).unwrap();
        let back = ChainResult::load(&dir).unwrap();
        assert_eq!(back, chain);
    }
}
