//! Datasets: CSV ingestion, standardization, stratified splitting, the
//! Gaussian-mixture simulator and evaluation metrics.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, DvcError, Result};
use crate::numerics::{Matrix, Rng};

/// Labelled feature matrix. Labels are class indices `0..classes.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub feature_names: Vec<String>,
    /// Original label text for each class index.
    pub classes: Vec<String>,
}

impl Dataset {
    /// Builds a dataset, checking row counts, label range and that every class occurs.
    pub fn new(
        x: Matrix,
        y: Vec<usize>,
        feature_names: Vec<String>,
        classes: Vec<String>,
    ) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(DvcError::Shape(format!(
                "{} feature rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        if x.cols() != feature_names.len() {
            return Err(DvcError::Shape(format!(
                "{} columns but {} feature names",
                x.cols(),
                feature_names.len()
            )));
        }
        let k = classes.len();
        let mut seen = vec![false; k];
        for &l in &y {
            if l >= k {
                return Err(DvcError::LabelOutOfRange {
                    label: l,
                    classes: k,
                });
            }
            seen[l] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(DvcError::ClassCoverage {
                class: c,
                reason: "no samples".into(),
            });
        }
        Ok(Self {
            x,
            y,
            feature_names,
            classes,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.x.row(i)
    }

    /// Rows at `idx`. The class list is kept even if some class is absent from the subset.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
            classes: self.classes.clone(),
        }
    }

    /// Re-indexes labels to follow `classes` (matched by name). Classes in
    /// `classes` may be absent here; a label not in `classes` is an error.
    pub fn relabel(&self, classes: &[String]) -> Result<Dataset> {
        let map = self
            .classes
            .iter()
            .map(|name| classes.iter().position(|c| c == name))
            .collect::<Vec<_>>();
        let y = self
            .y
            .iter()
            .map(|&l| map[l].ok_or_else(|| DvcError::UnknownClass(self.classes[l].clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            x: self.x.clone(),
            y,
            feature_names: self.feature_names.clone(),
            classes: classes.to_vec(),
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k()];
        for &l in &self.y {
            c[l] += 1;
        }
        c
    }

    /// Sample indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &l) in self.y.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// Reads a CSV with a header row. `label_col` names the class column; every
/// other column must be numeric. Class indices follow first appearance.
pub fn load_csv(path: impl AsRef<Path>, label_col: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers = rdr.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_col)
        .ok_or_else(|| DvcError::Csv {
            path: path.to_path_buf(),
            row: 1,
            col: 0,
            msg: format!("label column `{label_col}` not found"),
        })?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != label_idx)
        .map(|(_, h)| h.trim().to_string())
        .collect();

    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut classes: Vec<String> = Vec::new();
    let mut class_of: HashMap<String, usize> = HashMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // header is line 1
        let line = r + 2;
        if rec.len() != headers.len() {
            return Err(DvcError::Csv {
                path: path.to_path_buf(),
                row: line,
                col: rec.len() + 1,
                msg: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(DvcError::Csv {
                    path: path.to_path_buf(),
                    row: line,
                    col: j + 1,
                    msg: "missing value".into(),
                });
            }
            if j == label_idx {
                let next = classes.len();
                let id = *class_of.entry(cell.to_string()).or_insert_with(|| {
                    classes.push(cell.to_string());
                    next
                });
                y.push(id);
            } else {
                let v: f64 = cell.parse().map_err(|_| DvcError::Csv {
                    path: path.to_path_buf(),
                    row: line,
                    col: j + 1,
                    msg: format!("non-numeric value `{cell}`"),
                })?;
                if !v.is_finite() {
                    return Err(DvcError::Csv {
                        path: path.to_path_buf(),
                        row: line,
                        col: j + 1,
                        msg: format!("non-finite value `{cell}`"),
                    });
                }
                data.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(DvcError::EmptyDataset);
    }
    let x = Matrix::from_vec(y.len(), feature_names.len(), data)?;
    Dataset::new(x, y, feature_names, classes)
}

/// Writes the dataset with the label column first. Floats use the shortest
/// representation that parses back to the same bits.
pub fn save_csv(data: &Dataset, path: impl AsRef<Path>, label_col: &str) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec![label_col.to_string()];
    header.extend(data.feature_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![data.classes[data.y[i]].clone()];
        rec.extend(data.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Per-feature z-score parameters estimated on a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Self {
        let n = train.n() as f64;
        let p = train.p();
        let mut mean = vec![0.0; p];
        for i in 0..train.n() {
            for (m, v) in mean.iter_mut().zip(train.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; p];
        for i in 0..train.n() {
            for ((s, v), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let sd = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Self { mean, sd }
    }

    /// Applies the training statistics; zero-variance features become 0.
    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.p() != self.mean.len() {
            return Err(DvcError::Shape(format!(
                "standardizer fitted on {} features, data has {}",
                self.mean.len(),
                data.p()
            )));
        }
        let mut out = data.clone();
        for i in 0..out.n() {
            for (j, v) in out.x.row_mut(i).iter_mut().enumerate() {
                *v = if self.sd[j] > 0.0 {
                    (*v - self.mean[j]) / self.sd[j]
                } else {
                    0.0
                };
            }
        }
        Ok(out)
    }
}

/// Fits on `train` and standardizes it together with any further datasets.
pub fn standardize(
    train: &Dataset,
    others: &[&Dataset],
) -> Result<(Dataset, Vec<Dataset>, Standardizer)> {
    let st = Standardizer::fit(train);
    let tr = st.apply(train)?;
    let rest = others
        .iter()
        .map(|d| st.apply(d))
        .collect::<Result<Vec<_>>>()?;
    Ok((tr, rest, st))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified random split; each class contributes `round(n_c * test_fraction)`
/// samples to the test side, clamped so both sides keep the class.
pub fn split_indices(data: &Dataset, test_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(DvcError::Config(format!(
            "test fraction {test_fraction} must lie in (0, 1)"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut idx) in data.indices_by_class().into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(DvcError::ClassCoverage {
                class: c,
                reason: format!("{} sample(s), a split needs at least 2", idx.len()),
            });
        }
        rng.shuffle(&mut idx);
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let s = split_indices(data, test_fraction, seed)?;
    Ok((data.subset(&s.train), data.subset(&s.test)))
}

/// Coupling between feature `i` and feature `i + half` of the informative
/// dimensions, where `half` is half the mean-vector length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCoupling {
    /// Within-component covariance of each coupled pair.
    pub covariance: f64,
    /// Within-component variance of the second member of each pair.
    pub partner_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    /// One mean vector per mixture component; components have equal priors.
    pub means: Vec<Vec<f64>>,
    /// Diagonal within-component variance of the informative dimensions.
    pub variance: f64,
    /// Independent standard-normal dimensions appended after the informative ones.
    pub noise_dims: usize,
    pub coupling: Option<PairCoupling>,
    pub seed: u64,
}

impl SimConfig {
    /// Four well-separated components over 20 informative dimensions, padded
    /// with noise up to `p` total features.
    pub fn standard(p: usize, seed: u64) -> Self {
        let block = |a: f64, b: f64| {
            let mut v = vec![a; 10];
            v.extend(std::iter::repeat_n(b, 10));
            v
        };
        Self {
            n: 1000,
            means: vec![
                block(5.0, 0.0),
                block(10.0, 0.0),
                block(0.0, 5.0),
                block(0.0, 10.0),
            ],
            variance: 0.25,
            noise_dims: p.saturating_sub(20),
            coupling: None,
            seed,
        }
    }

    /// Only the first ten dimensions separate the components; dimensions
    /// 10..20 share one mean and are coupled to 0..10 with covariance 1.
    pub fn correlated(p: usize, seed: u64) -> Self {
        let block = |a: f64| {
            let mut v = vec![a; 10];
            v.extend(std::iter::repeat_n(0.0, 10));
            v
        };
        Self {
            means: vec![block(5.0), block(10.0), block(-5.0), block(-10.0)],
            coupling: Some(PairCoupling {
                covariance: 1.0,
                partner_variance: 4.25,
            }),
            ..Self::standard(p, seed)
        }
    }

    pub fn informative_dims(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn p(&self) -> usize {
        self.informative_dims() + self.noise_dims
    }

    /// Features whose mean differs between at least two components.
    pub fn relevant_features(&self) -> Vec<usize> {
        (0..self.informative_dims())
            .filter(|&j| self.means.iter().any(|m| m[j] != self.means[0][j]))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let d = self.informative_dims();
        if self.means.len() < 2 || self.means.iter().any(|m| m.len() != d) {
            return Err(DvcError::Config(
                "need >= 2 components with equal-length means".into(),
            ));
        }
        if self.variance <= 0.0 || self.n == 0 {
            return Err(DvcError::Config("variance and n must be positive".into()));
        }
        if let Some(c) = self.coupling {
            if !d.is_multiple_of(2) {
                return Err(DvcError::Config(
                    "coupling needs an even informative dimension".into(),
                ));
            }
            if c.partner_variance - c.covariance * c.covariance / self.variance < 0.0 {
                return Err(DvcError::Config(format!(
                    "pair covariance {} with variances {} / {} is not positive semi-definite",
                    c.covariance, self.variance, c.partner_variance
                )));
            }
        }
        Ok(())
    }
}

/// Ground truth that accompanies a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetadata {
    pub config: SimConfig,
    pub relevant_features: Vec<usize>,
}

/// Draws a labelled sample from the Gaussian mixture. The label is the component index.
pub fn simulate_gmm(cfg: &SimConfig) -> Result<(Dataset, SimMetadata)> {
    cfg.validate()?;
    let d = cfg.informative_dims();
    let p = cfg.p();
    let k = cfg.means.len();
    let sd = cfg.variance.sqrt();
    let mut rng = Rng::new(cfg.seed);
    let mut data = Vec::with_capacity(cfg.n * p);
    let mut y = Vec::with_capacity(cfg.n);
    let mut row = vec![0.0; p];
    for _ in 0..cfg.n {
        let c = rng.below(k);
        let mu = &cfg.means[c];
        match cfg.coupling {
            None => {
                for j in 0..d {
                    row[j] = mu[j] + sd * rng.normal();
                }
            }
            Some(pc) => {
                // partner = mu + beta (x - mu) + e, beta = cov / var
                let half = d / 2;
                let beta = pc.covariance / cfg.variance;
                let resid_sd = (pc.partner_variance - beta * pc.covariance).max(0.0).sqrt();
                for j in 0..half {
                    let dev = sd * rng.normal();
                    row[j] = mu[j] + dev;
                    row[j + half] = mu[j + half] + beta * dev + resid_sd * rng.normal();
                }
            }
        }
        for v in row.iter_mut().skip(d) {
            *v = rng.normal();
        }
        data.extend_from_slice(&row);
        y.push(c);
    }
    let x = Matrix::from_vec(cfg.n, p, data)?;
    let names = (0..p).map(|j| format!("x{j}")).collect();
    let classes = (0..k).map(|c| c.to_string()).collect();
    let ds = Dataset::new(x, y, names, classes)?;
    let meta = SimMetadata {
        config: cfg.clone(),
        relevant_features: cfg.relevant_features(),
    };
    Ok((ds, meta))
}

pub fn metric_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(DvcError::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(DvcError::EmptyDataset);
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Area under the ROC curve via the rank-sum statistic; tied scores get midranks.
pub fn metric_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(DvcError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|&&b| b).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DvcError::AucClasses);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares the average rank
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            if positive[o] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// F1 between a selected feature set and the ground-truth relevant set; 0 when nothing overlaps.
pub fn metric_f1_selection(selected: &[usize], relevant: &[usize]) -> f64 {
    use std::collections::BTreeSet;
    let s: BTreeSet<_> = selected.iter().collect();
    let r: BTreeSet<_> = relevant.iter().collect();
    if s.is_empty() || r.is_empty() {
        return 0.0;
    }
    let hit = s.intersection(&r).count() as f64;
    let precision = hit / s.len() as f64;
    let recall = hit / r.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("dvc-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn toy(n_per: usize, k: usize) -> Dataset {
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for c in 0..k {
            for i in 0..n_per {
                rows.push(vec![c as f64, i as f64]);
                y.push(c);
            }
        }
        Dataset::new(
            Matrix::from_rows(&rows).unwrap(),
            y,
            vec!["a".into(), "b".into()],
            (0..k).map(|c| format!("c{c}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn parses_hand_written_csv() {
        let path = tmp("hand.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "a,label,b\n1.5,yes,2\n-3,no,4e1\n0,yes,0.25").unwrap();
        let d = load_csv(&path, "label").unwrap();
        assert_eq!(d.x.as_slice(), &[1.5, 2.0, -3.0, 40.0, 0.0, 0.25]);
        assert_eq!(d.y, vec![0, 1, 0]);
        assert_eq!(d.classes, vec!["yes", "no"]);
        assert_eq!(d.feature_names, vec!["a", "b"]);
    }

    #[test]
    fn csv_errors_carry_location() {
        let path = tmp("bad.csv");
        std::fs::write(&path, "a,label\n1,x\nfoo,y\n").unwrap();
        match load_csv(&path, "label") {
            Err(DvcError::Csv { row, col, .. }) => assert_eq!((row, col), (3, 1)),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, "a,label\n1,x\n,y\n").unwrap();
        match load_csv(&path, "label") {
            Err(DvcError::Csv { row, col, msg, .. }) => {
                assert_eq!((row, col), (3, 1));
                assert!(msg.contains("missing"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(load_csv(&path, "nope").is_err());
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let mut rng = Rng::new(3);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..4).map(|_| rng.normal() * 1e3).collect())
            .collect();
        let d = Dataset::new(
            Matrix::from_rows(&rows).unwrap(),
            (0..20).map(|i| i % 2).collect(),
            (0..4).map(|j| format!("f{j}")).collect(),
            vec!["u".into(), "v".into()],
        )
        .unwrap();
        let path = tmp("rt.csv");
        save_csv(&d, &path, "label").unwrap();
        let back = load_csv(&path, "label").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn standardize_uses_training_statistics() {
        let d = toy(10, 2);
        let mut shifted = d.clone();
        for i in 0..shifted.n() {
            shifted.x.row_mut(i)[1] += 7.0;
        }
        let (tr, rest, st) = standardize(&d, &[&shifted]).unwrap();
        for j in 0..tr.p() {
            let col = tr.x.column(j);
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / col.len() as f64;
            assert!(m.abs() < 1e-10 && (v.sqrt() - 1.0).abs() < 1e-10);
        }
        // shift by 7 in raw units moves by 7 / sd in standardized units
        for i in 0..tr.n() {
            let delta = rest[0].row(i)[1] - tr.row(i)[1];
            assert!((delta - 7.0 / st.sd[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_column_standardizes_to_zero() {
        let mut d = toy(5, 2);
        for i in 0..d.n() {
            d.x.row_mut(i)[1] = 3.0;
        }
        let (tr, _, _) = standardize(&d, &[]).unwrap();
        assert!(tr.x.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_is_stratified_partition() {
        let d = toy(50, 2);
        let s = split_indices(&d, 0.3, 9).unwrap();
        assert_eq!(s.test.len(), 30);
        assert_eq!(s.train.len(), 70);
        let test = d.subset(&s.test);
        assert_eq!(test.class_counts(), vec![15, 15]);
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, split_indices(&d, 0.3, 9).unwrap());
        let tiny = toy(1, 2);
        assert!(split_indices(&tiny, 0.3, 0).is_err());
    }

    #[test]
    fn simulation_priors_and_means() {
        let (d, meta) = simulate_gmm(&SimConfig::standard(100, 5)).unwrap();
        assert_eq!((d.n(), d.p()), (1000, 100));
        assert_eq!(meta.relevant_features, (0..20).collect::<Vec<_>>());
        // binomial(1000, 1/4): sd = sqrt(1000 * 0.25 * 0.75) ~ 13.7
        for c in d.class_counts() {
            assert!((c as f64 - 250.0).abs() < 3.0 * 13.7);
        }
        let idx0: Vec<usize> = (0..d.n()).filter(|&i| d.y[i] == 0).collect();
        let m = idx0.iter().map(|&i| d.row(i)[0]).sum::<f64>() / idx0.len() as f64;
        assert!((m - 5.0).abs() < 3.0 * 0.5 / (idx0.len() as f64).sqrt());
        let (d2, _) = simulate_gmm(&SimConfig::standard(20, 5)).unwrap();
        assert_eq!(d2.p(), 20);
        assert_eq!(simulate_gmm(&SimConfig::standard(100, 5)).unwrap().0, d);
    }

    #[test]
    fn correlated_variant_matches_implied_correlation() {
        let mut cfg = SimConfig::correlated(20, 2);
        cfg.n = 20_000;
        let (d, meta) = simulate_gmm(&cfg).unwrap();
        assert_eq!(meta.relevant_features, (0..10).collect::<Vec<_>>());
        // within-class corr = cov / sqrt(var_a var_b) = 1 / sqrt(0.25 * 4.25)
        let implied = 1.0 / (0.25f64 * 4.25).sqrt();
        let rows: Vec<usize> = (0..d.n()).filter(|&i| d.y[i] == 1).collect();
        let a: Vec<f64> = rows.iter().map(|&i| d.row(i)[0]).collect();
        let b: Vec<f64> = rows.iter().map(|&i| d.row(i)[10]).collect();
        let r = crate::blocks::pearson_correlation(&a, &b).unwrap();
        assert!((r - implied).abs() < 0.01, "r = {r}, implied {implied}");
        let mut bad = SimConfig::correlated(20, 2);
        bad.coupling.as_mut().unwrap().partner_variance = 0.25;
        assert!(simulate_gmm(&bad).is_err());
    }

    #[test]
    fn metrics() {
        assert_eq!(metric_accuracy(&[0, 1, 1], &[0, 1, 0]).unwrap(), 2.0 / 3.0);
        let rel: Vec<usize> = (0..20).collect();
        assert_eq!(metric_f1_selection(&rel, &rel), 1.0);
        assert_eq!(metric_f1_selection(&[30, 31], &rel), 0.0);
        let sel: Vec<usize> = (0..30).collect();
        assert!((metric_f1_selection(&sel, &rel) - 0.8).abs() < 1e-12);
        let pos = [false, false, true, true];
        assert_eq!(metric_auc(&[0.1, 0.2, 0.8, 0.9], &pos).unwrap(), 1.0);
        assert_eq!(metric_auc(&[0.9, 0.8, 0.2, 0.1], &pos).unwrap(), 0.0);
        assert_eq!(metric_auc(&[0.5; 4], &pos).unwrap(), 0.5);
        assert!(metric_auc(&[0.5, 0.4], &[true, true]).is_err());
    }

    #[test]
    fn random_scores_auc_near_half() {
        let mut rng = Rng::new(17);
        let n = 1000;
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1.0)).collect();
        let pos: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let auc = metric_auc(&scores, &pos).unwrap();
        // sd of AUC under H0 ~ sqrt((n1+n2+1)/(12 n1 n2))
        let sd = ((n as f64 + 1.0) / (12.0 * 500.0 * 500.0)).sqrt();
        assert!((auc - 0.5).abs() < 3.0 * sd);
    }
}
