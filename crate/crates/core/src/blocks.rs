//! Correlation-driven grouping of features into variable blocks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, DvcError, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableBlock {
    pub id: usize,
    pub features: Vec<usize>,
}

impl VariableBlock {
    pub fn size(&self) -> usize {
        self.features.len()
    }
}

/// Disjoint, exhaustive assignment of `total_features` columns to blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    blocks: Vec<VariableBlock>,
    total_features: usize,
}

#[derive(Serialize, Deserialize)]
struct PartitionDoc {
    blocks: Vec<Vec<usize>>,
}

impl Serialize for BlockPartition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PartitionDoc {
            blocks: self.blocks.iter().map(|b| b.features.clone()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for BlockPartition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = PartitionDoc::deserialize(d)?;
        let p = doc.blocks.iter().map(Vec::len).sum();
        BlockPartition::new(doc.blocks, p).map_err(serde::de::Error::custom)
    }
}

impl BlockPartition {
    /// Validates that the lists are nonempty, disjoint and cover `0..total_features`.
    pub fn new(blocks: Vec<Vec<usize>>, total_features: usize) -> Result<Self> {
        let mut seen = vec![false; total_features];
        for (b, feats) in blocks.iter().enumerate() {
            if feats.is_empty() {
                return Err(DvcError::Partition(format!("block {b} is empty")));
            }
            for &f in feats {
                if f >= total_features {
                    return Err(DvcError::Partition(format!(
                        "block {b} references feature {f} but there are {total_features}"
                    )));
                }
                if std::mem::replace(&mut seen[f], true) {
                    return Err(DvcError::Partition(format!("feature {f} appears twice")));
                }
            }
        }
        if let Some(f) = seen.iter().position(|s| !s) {
            return Err(DvcError::Partition(format!(
                "feature {f} is not in any block"
            )));
        }
        Ok(Self {
            blocks: blocks
                .into_iter()
                .enumerate()
                .map(|(id, features)| VariableBlock { id, features })
                .collect(),
            total_features,
        })
    }

    pub fn blocks(&self) -> &[VariableBlock] {
        &self.blocks
    }

    pub fn block(&self, id: usize) -> &VariableBlock {
        &self.blocks[id]
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn total_features(&self) -> usize {
        self.total_features
    }

    pub fn min_block_size(&self) -> usize {
        self.blocks
            .iter()
            .map(VariableBlock::size)
            .min()
            .unwrap_or(0)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Sample Pearson correlation. Fails on constant columns.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(DvcError::ColumnLength(a.len(), b.len()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(DvcError::ConstantColumn);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    /// Upper bound on features per block.
    pub block_size: usize,
    /// Correlation floor for the first grouping pass. A random seed only
    /// forms a block there if some remaining feature reaches `|r| >= min_corr`;
    /// seeds without such a partner are pooled and grouped afterwards by the
    /// plain size-capped procedure. `None` runs the size-capped procedure on
    /// everything.
    pub min_corr: Option<f64>,
}

impl PartitionConfig {
    pub fn capped(block_size: usize) -> Self {
        Self {
            block_size,
            min_corr: None,
        }
    }
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            block_size: 10,
            min_corr: Some(0.5),
        }
    }
}

/// |r| for every feature pair; constant features correlate 0 with everything.
pub fn abs_correlation_matrix(x: &Matrix) -> Matrix {
    let (n, p) = (x.rows(), x.cols());
    // centered, unit-norm columns stored row-wise
    let mut z = Matrix::zeros(p, n);
    for j in 0..p {
        let col = x.column(j);
        let m = col.iter().sum::<f64>() / n as f64;
        let norm = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (zi, v) in z.row_mut(j).iter_mut().zip(&col) {
                *zi = (v - m) / norm;
            }
        }
    }
    let mut r = Matrix::zeros(p, p);
    for a in 0..p {
        r.set(
            a,
            a,
            if z.row(a).iter().any(|&v| v != 0.0) {
                1.0
            } else {
                0.0
            },
        );
        for b in (a + 1)..p {
            let v = crate::numerics::dot(z.row(a), z.row(b)).abs().min(1.0);
            r.set(a, b, v);
            r.set(b, a, v);
        }
    }
    r
}

/// Greedy seeded grouping of the columns of `x` into blocks.
pub fn partition_variables(
    x: &Matrix,
    cfg: &PartitionConfig,
    rng: &mut Rng,
) -> Result<BlockPartition> {
    let p = x.cols();
    if cfg.block_size == 0 {
        return Err(DvcError::Config("block size must be >= 1".into()));
    }
    if p == 0 {
        return Err(DvcError::Config("no features to partition".into()));
    }
    if cfg.block_size >= p {
        return BlockPartition::new(vec![(0..p).collect()], p);
    }
    let corr = abs_correlation_matrix(x);
    let mut blocks = Vec::new();
    let mut remaining: Vec<usize> = (0..p).collect();

    if let Some(tau) = cfg.min_corr {
        let mut pool = Vec::new();
        while !remaining.is_empty() {
            let seed = remaining[rng.below(remaining.len())];
            let partners = ranked_partners(&corr, seed, &remaining)
                .into_iter()
                .take_while(|&j| corr.get(seed, j) >= tau)
                .take(cfg.block_size - 1);
            let mut block = vec![seed];
            block.extend(partners);
            remaining.retain(|f| !block.contains(f));
            if block.len() == 1 {
                pool.push(seed);
            } else {
                block.sort_unstable();
                blocks.push(block);
            }
        }
        pool.sort_unstable();
        remaining = pool;
    }

    while !remaining.is_empty() {
        let seed = remaining[rng.below(remaining.len())];
        let mut block = vec![seed];
        block.extend(
            ranked_partners(&corr, seed, &remaining)
                .into_iter()
                .take(cfg.block_size - 1),
        );
        remaining.retain(|f| !block.contains(f));
        block.sort_unstable();
        blocks.push(block);
    }
    BlockPartition::new(blocks, p)
}

/// Remaining features other than `seed`, by decreasing |r| then increasing index.
fn ranked_partners(corr: &Matrix, seed: usize, remaining: &[usize]) -> Vec<usize> {
    let mut others: Vec<usize> = remaining.iter().copied().filter(|&j| j != seed).collect();
    others.sort_by(|&a, &b| {
        corr.get(seed, b)
            .total_cmp(&corr.get(seed, a))
            .then(a.cmp(&b))
    });
    others
}
