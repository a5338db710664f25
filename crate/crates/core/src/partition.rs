//! Partition post-processing: Binder loss, co-clustering probabilities,
//! the Binder-optimal sampled partition, and heatmap ordering.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// A clustering of subjects. Only the induced equivalence relation matters
/// for scoring; label values are arbitrary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    labels: Vec<usize>,
}

impl Partition {
    pub fn new(labels: Vec<usize>) -> Self {
        Partition { labels }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_blocks(&self) -> usize {
        let mut seen: Vec<usize> = self.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    /// Relabels blocks 0, 1, 2, … in order of first appearance.
    pub fn canonical(&self) -> Partition {
        let mut map = HashMap::new();
        let labels = self
            .labels
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Partition { labels }
    }

    pub fn same_block(&self, i: usize, j: usize) -> bool {
        self.labels[i] == self.labels[j]
    }
}

impl From<Vec<usize>> for Partition {
    fn from(labels: Vec<usize>) -> Self {
        Partition::new(labels)
    }
}

fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Binder loss between two labelings of the same subjects: the number of
/// pairs `i < i'` placed together in one and apart in the other.
///
/// Computed from the contingency table:
/// `Σ_a C(n_a,2) + Σ_b C(m_b,2) − 2 Σ_ab C(n_ab,2)`.
pub fn binder_loss_labels(truth: &[usize], estimate: &[usize]) -> Result<u64> {
    if truth.len() != estimate.len() {
        return Err(Error::SizeMismatch {
            left: truth.len(),
            right: estimate.len(),
        });
    }
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    let mut cells: HashMap<(usize, usize), u64> = HashMap::new();
    for (&a, &b) in truth.iter().zip(estimate) {
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
        *cells.entry((a, b)).or_default() += 1;
    }
    let together_truth: u64 = rows.values().map(|&n| pairs(n)).sum();
    let together_est: u64 = cols.values().map(|&n| pairs(n)).sum();
    let together_both: u64 = cells.values().map(|&n| pairs(n)).sum();
    Ok(together_truth + together_est - 2 * together_both)
}

pub fn binder_loss(truth: &Partition, estimate: &Partition) -> Result<u64> {
    binder_loss_labels(&truth.labels, &estimate.labels)
}

/// Symmetric matrix of co-clustering frequencies with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CoClusterMatrix {
    n: usize,
    values: Vec<f64>,
}

impl CoClusterMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// Builds a matrix from explicit entries (row-major).
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::SizeMismatch {
                left: values.len(),
                right: n * n,
            });
        }
        Ok(CoClusterMatrix { n, values })
    }
}

fn check_draws(draws: &[&[usize]]) -> Result<usize> {
    let first = draws.first().ok_or(Error::EmptyDraws)?;
    let n = first.len();
    for d in draws {
        if d.len() != n {
            return Err(Error::SizeMismatch {
                left: d.len(),
                right: n,
            });
        }
    }
    Ok(n)
}

/// Entrywise mean of `I(ζ_i = ζ_i')` over draws.
pub fn coclustering(draws: &[&[usize]]) -> Result<CoClusterMatrix> {
    let n = check_draws(draws)?;
    let mut counts = vec![0u32; n * n];
    for labels in draws {
        for i in 0..n {
            let li = labels[i];
            let row = &mut counts[i * n..(i + 1) * n];
            for (j, slot) in row.iter_mut().enumerate().skip(i + 1) {
                if labels[j] == li {
                    *slot += 1;
                }
            }
        }
    }
    let m = draws.len() as f64;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let v = counts[i * n + j] as f64 / m;
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(CoClusterMatrix { n, values })
}

/// Expected Binder loss of a labeling against co-clustering probabilities:
/// `Σ_{i<i'} |I(ζ_i = ζ_i') − P_ii'|`.
pub fn expected_binder_loss(labels: &[usize], p: &CoClusterMatrix) -> f64 {
    let n = p.n();
    let mut total = 0.0;
    for i in 0..n {
        let row = p.row(i);
        for j in i + 1..n {
            let together = if labels[i] == labels[j] { 1.0 } else { 0.0 };
            total += (together - row[j]).abs();
        }
    }
    total
}

/// The sampled partition with the smallest expected Binder loss; ties go to
/// the earliest draw. Returns the draw index and the partition.
pub fn assign_mode(draws: &[&[usize]]) -> Result<(usize, Partition)> {
    let p = coclustering(draws)?;
    assign_mode_with(draws, &p)
}

pub fn assign_mode_with(draws: &[&[usize]], p: &CoClusterMatrix) -> Result<(usize, Partition)> {
    check_draws(draws)?;
    let mut best = (0, f64::INFINITY);
    let mut seen: HashMap<Vec<usize>, f64> = HashMap::new();
    for (m, labels) in draws.iter().enumerate() {
        let key = Partition::new(labels.to_vec()).canonical().labels;
        let loss = *seen
            .entry(key)
            .or_insert_with(|| expected_binder_loss(labels, p));
        if loss < best.1 {
            best = (m, loss);
        }
    }
    Ok((best.0, Partition::new(draws[best.0].to_vec())))
}

/// Average-linkage agglomerative clustering on `dist`; returns leaf order.
/// Clusters merge into the one holding the lower index, so equal distances
/// keep input order.
fn average_linkage_order(dist: &[Vec<f64>]) -> Vec<usize> {
    let n = dist.len();
    if n <= 2 {
        return (0..n).collect();
    }
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut d: Vec<Vec<f64>> = dist.to_vec();
    for _ in 1..n {
        let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
        for i in 0..n {
            if members[i].is_none() {
                continue;
            }
            for j in i + 1..n {
                if members[j].is_some() && d[i][j] < best.2 {
                    best = (i, j, d[i][j]);
                }
            }
        }
        let (a, b, _) = best;
        let mb = members[b].take().expect("active cluster");
        let (na, nb) = (
            members[a].as_ref().expect("active cluster").len() as f64,
            mb.len() as f64,
        );
        for k in 0..n {
            if k != a && members[k].is_some() {
                let v = (na * d[a][k] + nb * d[b][k]) / (na + nb);
                d[a][k] = v;
                d[k][a] = v;
            }
        }
        members[a].as_mut().expect("active cluster").extend(mb);
    }
    members.into_iter().flatten().next().unwrap_or_default()
}

/// Subject order for a co-clustering heatmap: mode-partition blocks are
/// contiguous (in order of first appearance), and each block is ordered by
/// average-linkage clustering on `1 − P`.
pub fn sort_for_heatmap(p: &CoClusterMatrix, mode: &Partition) -> Result<Vec<usize>> {
    if p.n() != mode.len() {
        return Err(Error::SizeMismatch {
            left: p.n(),
            right: mode.len(),
        });
    }
    let canon = mode.canonical();
    let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); canon.n_blocks()];
    for (i, &b) in canon.labels().iter().enumerate() {
        blocks[b].push(i);
    }
    let mut order = Vec::with_capacity(p.n());
    for block in blocks {
        let dist: Vec<Vec<f64>> = block
            .iter()
            .map(|&i| block.iter().map(|&j| 1.0 - p.get(i, j)).collect())
            .collect();
        order.extend(average_linkage_order(&dist).into_iter().map(|k| block[k]));
    }
    Ok(order)
}
