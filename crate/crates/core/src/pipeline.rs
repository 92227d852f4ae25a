//! End-to-end stages shared by the command-line tool and the integration
//! tests: fit the chain, fit the selection tree, predict and evaluate.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::avs::{fit_avs, predict_avs, NuRecord, TreeConfig, VsTree};
use crate::blocks::{partition_variables, BlockPartition, PartitionConfig};
use crate::chain::{build_chain, global_select, ChainResult};
use crate::data::{metric_accuracy, metric_auc, Dataset, Standardizer};
use crate::error::{io_err, DvcError, Result};
use crate::numerics::{argmax, derive_seed, Rng};
use crate::training::{tags, TrainConfig};

/// Every tunable of a run; loadable from JSON or TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub partition: PartitionConfig,
    pub tree: TreeConfig,
    /// Skip z-scoring when true.
    pub raw_features: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockSpec {
    Given(BlockPartition),
    Learned(PartitionConfig),
}

/// A fitted chain plus the class names, feature names and scaling it was
/// trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedDvc {
    pub chain: ChainResult,
    pub classes: Vec<String>,
    pub feature_names: Vec<String>,
    pub standardizer: Option<Standardizer>,
}

const PIPELINE_FILE: &str = "pipeline.json";

#[derive(Serialize, Deserialize)]
struct PipelineDoc {
    classes: Vec<String>,
    feature_names: Vec<String>,
    standardizer: Option<Standardizer>,
}

impl FittedDvc {
    /// Maps labels onto the training class order and applies the stored scaling.
    pub fn prepare(&self, data: &Dataset) -> Result<Dataset> {
        if data.feature_names != self.feature_names {
            return Err(DvcError::Shape(format!(
                "feature columns differ from training ({} vs {} columns)",
                data.p(),
                self.feature_names.len()
            )));
        }
        let data = data.relabel(&self.classes)?;
        match &self.standardizer {
            Some(st) => st.apply(&data),
            None => Ok(data),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.chain.save(dir)?;
        let path = dir.join(PIPELINE_FILE);
        let doc = PipelineDoc {
            classes: self.classes.clone(),
            feature_names: self.feature_names.clone(),
            standardizer: self.standardizer.clone(),
        };
        std::fs::write(&path, serde_json::to_string_pretty(&doc)?).map_err(io_err(&path))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let chain = ChainResult::load(dir)?;
        let path = dir.join(PIPELINE_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let doc: PipelineDoc = serde_json::from_str(&text)?;
        Ok(Self {
            chain,
            classes: doc.classes,
            feature_names: doc.feature_names,
            standardizer: doc.standardizer,
        })
    }
}

/// Scaling, block partition, greedy chain and global selection on `train`.
pub fn fit_dvc(train: &Dataset, blocks: &BlockSpec, cfg: &PipelineConfig) -> Result<FittedDvc> {
    let standardizer = (!cfg.raw_features).then(|| Standardizer::fit(train));
    let prepared = match &standardizer {
        Some(st) => st.apply(train)?,
        None => train.clone(),
    };
    let partition = match blocks {
        BlockSpec::Given(p) => p.clone(),
        BlockSpec::Learned(pc) => {
            let mut rng = Rng::new(derive_seed(cfg.train.seed, &[tags::PARTITION]));
            partition_variables(&prepared.x, pc, &mut rng)?
        }
    };
    let mut chain = build_chain(&partition, &prepared, &cfg.train)?;
    global_select(&mut chain, &prepared, &cfg.train)?;
    Ok(FittedDvc {
        chain,
        classes: train.classes.clone(),
        feature_names: train.feature_names.clone(),
        standardizer,
    })
}

/// ν-numbers on the (raw) training data and the pruned selection tree.
pub fn fit_selection_tree(
    fitted: &FittedDvc,
    train: &Dataset,
    cfg: &PipelineConfig,
) -> Result<(VsTree, Vec<NuRecord>)> {
    let prepared = fitted.prepare(train)?;
    fit_avs(
        &fitted.chain,
        &prepared,
        &cfg.tree,
        derive_seed(cfg.train.seed, &[tags::TREE_CV]),
        cfg.train.jobs,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub index: usize,
    pub label: usize,
    pub class: String,
    pub posteriors: Vec<f64>,
    /// Sub-chain length of the model applied.
    pub model_len: usize,
    /// Routed leaf and its ν̃, when a selection tree is used.
    pub leaf: Option<u64>,
    pub nu_tilde: Option<usize>,
}

/// Predictions with the selected chain model, or routed through `tree`.
pub fn predict(
    fitted: &FittedDvc,
    tree: Option<&VsTree>,
    data: &Dataset,
) -> Result<Vec<SamplePrediction>> {
    let prepared = fitted.prepare(data)?;
    let chain = &fitted.chain;
    let classes = &fitted.classes;
    (0..prepared.n())
        .map(|i| {
            let x = prepared.row(i);
            let (label, posteriors, model_len, leaf, nu_tilde) = match tree {
                Some(t) => {
                    let p = predict_avs(t, chain.selected_models(), x)?;
                    (
                        p.label,
                        p.posteriors,
                        p.model_len,
                        Some(p.leaf),
                        Some(p.nu_tilde),
                    )
                }
                None => {
                    let post = chain.final_model().posteriors(x)?;
                    (argmax(&post), post, chain.selected_len(), None, None)
                }
            };
            Ok(SamplePrediction {
                index: i,
                class: classes
                    .get(label)
                    .cloned()
                    .unwrap_or_else(|| label.to_string()),
                label,
                posteriors,
                model_len,
                leaf,
                nu_tilde,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub accuracy: f64,
    /// Two-class problems only; scored by the posterior of class 1.
    pub auc: Option<f64>,
}

/// Accuracy of both classifiers on the test samples routed to one leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub leaf: u64,
    pub nu_tilde: usize,
    pub n: usize,
    pub dvc_accuracy: f64,
    pub avs_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteCount {
    pub nu_tilde: usize,
    pub model_len: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub classes: Vec<String>,
    pub chain_order: Vec<usize>,
    pub selected_len: usize,
    pub dvc: MethodScores,
    pub avs: Option<MethodScores>,
    pub groups: Vec<GroupRow>,
    pub routing: Vec<RouteCount>,
}

fn scores(preds: &[SamplePrediction], truth: &[usize], k: usize) -> Result<MethodScores> {
    let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let accuracy = metric_accuracy(&labels, truth)?;
    let auc = if k == 2 {
        let s: Vec<f64> = preds.iter().map(|p| p.posteriors[1]).collect();
        let pos: Vec<bool> = truth.iter().map(|&y| y == 1).collect();
        match metric_auc(&s, &pos) {
            Ok(a) => Some(a),
            Err(DvcError::AucClasses) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(MethodScores { accuracy, auc })
}

/// Scores the plain chain model and, with a tree, the routed classifier,
/// including per-leaf group accuracies and routing counts.
pub fn evaluate(fitted: &FittedDvc, tree: Option<&VsTree>, test: &Dataset) -> Result<EvalReport> {
    if test.n() == 0 {
        return Err(DvcError::EmptyDataset);
    }
    let k = fitted.chain.final_model().k();
    let dvc_preds = predict(fitted, None, test)?;
    let truth = test.relabel(&fitted.classes)?.y;
    let dvc = scores(&dvc_preds, &truth, k)?;
    let (avs, groups, routing) = match tree {
        None => (None, Vec::new(), Vec::new()),
        Some(t) => {
            let avs_preds = predict(fitted, Some(t), test)?;
            let avs = scores(&avs_preds, &truth, k)?;
            let mut by_leaf: BTreeMap<u64, (usize, usize, usize, usize)> = BTreeMap::new();
            let mut by_nu: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
            for ((a, d), &y) in avs_preds.iter().zip(&dvc_preds).zip(&truth) {
                let nu = a.nu_tilde.expect("routed prediction");
                let e = by_leaf
                    .entry(a.leaf.expect("routed prediction"))
                    .or_insert((nu, 0, 0, 0));
                e.1 += 1;
                e.2 += usize::from(d.label == y);
                e.3 += usize::from(a.label == y);
                let r = by_nu.entry(nu).or_insert((a.model_len, 0));
                r.1 += 1;
            }
            // leaves in heap order; unreached leaves are omitted
            let groups = by_leaf
                .into_iter()
                .map(|(leaf, (nu_tilde, n, dc, ac))| GroupRow {
                    leaf,
                    nu_tilde,
                    n,
                    dvc_accuracy: dc as f64 / n as f64,
                    avs_accuracy: ac as f64 / n as f64,
                })
                .collect();
            let routing = by_nu
                .into_iter()
                .map(|(nu_tilde, (model_len, count))| RouteCount {
                    nu_tilde,
                    model_len,
                    count,
                })
                .collect();
            (Some(avs), groups, routing)
        }
    };
    Ok(EvalReport {
        n: test.n(),
        classes: fitted.classes.clone(),
        chain_order: fitted.chain.order.clone(),
        selected_len: fitted.chain.selected_len(),
        dvc,
        avs,
        groups,
        routing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn toy(seed: u64, n: usize) -> Dataset {
        let mut rng = Rng::new(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let s = if c == 0 { -1.0 } else { 1.0 };
            rows.push(vec![
                10.0 + s + 0.3 * rng.normal(),
                5.0 * rng.normal(),
                2.0 * s + rng.normal(),
                rng.normal(),
            ]);
            y.push(c);
        }
        Dataset::new(
            Matrix::from_rows(&rows).unwrap(),
            y,
            (0..4).map(|j| format!("f{j}")).collect(),
            vec!["neg".into(), "pos".into()],
        )
        .unwrap()
    }

    fn cfg() -> PipelineConfig {
        PipelineConfig {
            train: TrainConfig {
                lr: 0.03,
                epochs: 20,
                batch_size: 16,
                cv_folds: 3,
                seed: 1,
                ..TrainConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn end_to_end_on_toy_data() {
        let train = toy(1, 90);
        let test = toy(2, 40);
        let part = BlockPartition::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let fitted = fit_dvc(&train, &BlockSpec::Given(part), &cfg()).unwrap();
        let (tree, records) = fit_selection_tree(&fitted, &train, &cfg()).unwrap();
        assert_eq!(records.len(), train.n());
        let rep = evaluate(&fitted, Some(&tree), &test).unwrap();
        assert!(rep.dvc.accuracy > 0.8, "{rep:?}");
        assert!(rep.dvc.auc.is_some());
        assert_eq!(rep.routing.iter().map(|r| r.count).sum::<usize>(), test.n());
        assert_eq!(rep.groups.iter().map(|g| g.n).sum::<usize>(), test.n());
    }

    #[test]
    fn single_leaf_tree_matches_plain_chain() {
        let train = toy(3, 60);
        let test = toy(4, 30);
        let part = BlockPartition::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let fitted = fit_dvc(&train, &BlockSpec::Given(part), &cfg()).unwrap();
        let s = fitted.chain.selected_len();
        let mut counts = vec![0; s + 1];
        counts[s - 1] = 1;
        let tree = VsTree::single_leaf(s, train.feature_names.clone(), counts, 0.9).unwrap();
        let plain = predict(&fitted, None, &test).unwrap();
        let routed = predict(&fitted, Some(&tree), &test).unwrap();
        for (a, b) in plain.iter().zip(&routed) {
            assert_eq!(a.posteriors, b.posteriors);
            assert_eq!(a.label, b.label);
        }
        let rep = evaluate(&fitted, Some(&tree), &test).unwrap();
        assert_eq!(rep.avs.as_ref().unwrap(), &rep.dvc);
    }

    #[test]
    fn learned_blocks_and_save_load() {
        let train = toy(5, 60);
        let mut c = cfg();
        c.partition = PartitionConfig::capped(2);
        let fitted = fit_dvc(&train, &BlockSpec::Learned(c.partition), &c).unwrap();
        assert_eq!(fitted.chain.partition.len(), 2);
        let dir = std::env::temp_dir().join(format!("dvc-pipeline-{}", std::process::id()));
        fitted.save(&dir).unwrap();
        assert_eq!(FittedDvc::load(&dir).unwrap(), fitted);
    }

    #[test]
    fn scoring_data_follows_training_class_order() {
        let train = toy(7, 60);
        let test = toy(8, 30);
        // same samples, classes listed the other way round
        let flipped = Dataset {
            y: test.y.iter().map(|&l| 1 - l).collect(),
            classes: vec!["pos".into(), "neg".into()],
            ..test.clone()
        };
        let part = BlockPartition::new(vec![vec![0, 1], vec![2, 3]], 4).unwrap();
        let fitted = fit_dvc(&train, &BlockSpec::Given(part), &cfg()).unwrap();
        assert_eq!(
            evaluate(&fitted, None, &test).unwrap(),
            evaluate(&fitted, None, &flipped).unwrap()
        );
        let unknown = Dataset {
            classes: vec!["neg".into(), "other".into()],
            ..test.clone()
        };
        assert!(matches!(
            evaluate(&fitted, None, &unknown),
            Err(DvcError::UnknownClass(_))
        ));
    }

    #[test]
    fn config_parses_partial_documents() {
        let c: PipelineConfig =
            serde_json::from_str(r#"{"train": {"epochs": 3}, "tree": {"min_leaf": 2}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.tree.min_leaf, 2);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
