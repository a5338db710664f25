//! Tables derived from posterior draws, shared by `fit`, `summarize` and
//! `diagnose`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::basis::ExposureBasis;
use crate::diagnostics::{functional_traces, split_rhat, Degeneracy, Functional};
use crate::error::{Error, Result};
use crate::partition::{assign_mode_with, coclustering, sort_for_heatmap, CoClusterMatrix, Partition};
use crate::sampler::PosteriorDraws;
use crate::simgen::quantile_sorted;

use super::output::{finish, table_writer, write_rows};

pub struct PartitionSummary {
    pub coclustering: CoClusterMatrix,
    /// Mode partition relabeled 0, 1, … in order of first appearance.
    pub mode: Partition,
    pub heatmap_order: Vec<usize>,
}

pub fn partition_summary(draws: &PosteriorDraws) -> Result<PartitionSummary> {
    let labels = draws.label_draws();
    let p = coclustering(&labels)?;
    let (_, mode) = assign_mode_with(&labels, &p)?;
    let mode = mode.canonical();
    let heatmap_order = sort_for_heatmap(&p, &mode)?;
    Ok(PartitionSummary {
        coclustering: p,
        mode,
        heatmap_order,
    })
}

/// For every draw and every mode cluster, the sampled cluster holding the
/// most of that mode cluster's members (lowest label on ties).
fn matched_clusters(draws: &PosteriorDraws, mode: &Partition) -> Vec<Vec<usize>> {
    let n_mode = mode.n_blocks();
    let k = draws.sampler.n_clusters;
    draws
        .label_draws()
        .into_iter()
        .map(|labels| {
            let mut counts = vec![0usize; n_mode * k];
            for (i, &c) in mode.labels().iter().enumerate() {
                counts[c * k + labels[i]] += 1;
            }
            (0..n_mode)
                .map(|c| {
                    let row = &counts[c * k..(c + 1) * k];
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}

/// Draw-major iteration over (chain, draw index).
fn draw_index(draws: &PosteriorDraws) -> Vec<(usize, usize)> {
    draws
        .chains
        .iter()
        .enumerate()
        .flat_map(|(c, ch)| (0..ch.len()).map(move |m| (c, m)))
        .collect()
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn block_sizes(mode: &Partition) -> Vec<usize> {
    let mut sizes = vec![0; mode.n_blocks()];
    for &c in mode.labels() {
        sizes[c] += 1;
    }
    sizes
}

#[derive(Debug, Clone, Serialize)]
pub struct CurveRow {
    pub cluster: usize,
    pub share: f64,
    pub d: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

/// Pointwise 2.5/50/97.5% bands of each mode cluster's curve, built from
/// the draw-wise matched cluster coefficients.
pub fn cluster_curves(
    draws: &PosteriorDraws,
    basis: &ExposureBasis,
    mode: &Partition,
    grid: &[f64],
) -> Result<Vec<CurveRow>> {
    let g = basis.grid_matrix(grid)?;
    let matched = matched_clusters(draws, mode);
    let index = draw_index(draws);
    let sizes = block_sizes(mode);
    let n = mode.len() as f64;
    let mut rows = Vec::with_capacity(sizes.len() * grid.len());
    for (c, &size) in sizes.iter().enumerate() {
        let mut values = vec![Vec::with_capacity(index.len()); grid.len()];
        for (t, &(ch, m)) in index.iter().enumerate() {
            let beta = draws.chains[ch].beta(m, matched[t][c]);
            for (gi, slot) in values.iter_mut().enumerate() {
                slot.push(g.row(gi).iter().zip(beta).map(|(a, b)| a * b).sum());
            }
        }
        for (gi, v) in values.into_iter().enumerate() {
            let v = sorted(v);
            rows.push(CurveRow {
                cluster: c + 1,
                share: size as f64 / n,
                d: grid[gi],
                q025: quantile_sorted(&v, 0.025),
                q50: quantile_sorted(&v, 0.5),
                q975: quantile_sorted(&v, 0.975),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterSummaryRow {
    pub cluster: usize,
    pub n_subjects_mode: usize,
    /// Median over draws of the share of subjects in the matched cluster.
    pub median_share: f64,
    pub f0_median: f64,
    pub f0_q025: f64,
    pub f0_q975: f64,
}

pub fn cluster_summary(
    draws: &PosteriorDraws,
    basis: &ExposureBasis,
    mode: &Partition,
) -> Result<Vec<ClusterSummaryRow>> {
    let matched = matched_clusters(draws, mode);
    let index = draw_index(draws);
    let zero = basis.grid_matrix(&[0.0])?;
    let n = draws.n_subjects() as f64;
    block_sizes(mode)
        .into_iter()
        .enumerate()
        .map(|(c, size)| {
            let mut shares = Vec::with_capacity(index.len());
            let mut f0 = Vec::with_capacity(index.len());
            for (t, &(ch, m)) in index.iter().enumerate() {
                let chain = &draws.chains[ch];
                let k = matched[t][c];
                let members = chain.labels(m).iter().filter(|&&l| l == k).count();
                shares.push(members as f64 / n);
                f0.push(zero.row(0).iter().zip(chain.beta(m, k)).map(|(a, b)| a * b).sum());
            }
            let shares = sorted(shares);
            let f0 = sorted(f0);
            Ok(ClusterSummaryRow {
                cluster: c + 1,
                n_subjects_mode: size,
                median_share: quantile_sorted(&shares, 0.5),
                f0_median: quantile_sorted(&f0, 0.5),
                f0_q025: quantile_sorted(&f0, 0.025),
                f0_q975: quantile_sorted(&f0, 0.975),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CrosstabRow {
    pub covariate: String,
    pub level: String,
    pub cluster: usize,
    pub count: usize,
    /// Share of the cluster's members (with this covariate recorded) at
    /// this level.
    pub proportion: f64,
}

/// Cluster-by-covariate table. Every column other than `id_column` is
/// treated as categorical; subjects missing from the file are skipped.
pub fn crosstab(
    path: &Path,
    id_column: &str,
    subject_ids: &[String],
    mode: &Partition,
) -> Result<Vec<CrosstabRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let id = headers.iter().position(|h| h == id_column).ok_or_else(|| {
        Error::Input(format!("{}: missing id column `{id_column}`", path.display()))
    })?;
    let position: BTreeMap<&str, usize> = subject_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let covariates: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != id)
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    // (covariate, level, cluster) → count
    let mut counts: BTreeMap<(usize, String, usize), usize> = BTreeMap::new();
    let mut seen = vec![false; subject_ids.len()];
    for rec in reader.records() {
        let rec = rec?;
        let subject = rec.get(id).unwrap_or_default();
        let Some(&i) = position.get(subject) else {
            continue;
        };
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Input(format!(
                "{}: subject {subject} listed twice",
                path.display()
            )));
        }
        for (ci, (col, _)) in covariates.iter().enumerate() {
            let level = rec.get(*col).unwrap_or_default();
            if !level.is_empty() {
                *counts.entry((ci, level.to_string(), mode.labels()[i])).or_default() += 1;
            }
        }
    }
    let mut totals: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for ((ci, _, c), n) in &counts {
        *totals.entry((*ci, *c)).or_default() += n;
    }
    let mut rows: Vec<CrosstabRow> = counts
        .into_iter()
        .map(|((ci, level, c), count)| CrosstabRow {
            covariate: covariates[ci].1.clone(),
            level,
            cluster: c + 1,
            count,
            proportion: count as f64 / totals[&(ci, c)] as f64,
        })
        .collect();
    rows.sort_by(|a, b| {
        (&a.covariate, a.cluster, &a.level).cmp(&(&b.covariate, b.cluster, &b.level))
    });
    Ok(rows)
}

/// σ², α, occupied count and `f(0)` for four subjects spread across the
/// subject list.
pub fn default_functionals(draws: &PosteriorDraws) -> Vec<Functional> {
    let mut out = vec![Functional::Sigma2, Functional::Alpha, Functional::NOccupied];
    let n = draws.n_subjects();
    let mut picked: Vec<usize> = (0..4.min(n)).map(|j| j * n / 4).collect();
    picked.dedup();
    out.extend(picked.into_iter().map(|i| Functional::SubjectCurve {
        subject: draws.subject_ids[i].clone(),
        distance: 0.0,
    }));
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct RhatRow {
    pub functional: String,
    pub rhat: f64,
    pub flag: String,
}

pub fn rhat_table(
    draws: &PosteriorDraws,
    basis: &ExposureBasis,
    functionals: &[Functional],
) -> Result<Vec<RhatRow>> {
    functionals
        .iter()
        .map(|f| {
            let trace = functional_traces(draws, basis, f)?;
            let r = split_rhat(&trace)?;
            Ok(RhatRow {
                functional: f.to_string(),
                rhat: r.rhat,
                flag: match r.flag {
                    None => String::new(),
                    Some(Degeneracy::Constant) => "constant".into(),
                    Some(Degeneracy::IdenticalChains) => "identical-chains".into(),
                },
            })
        })
        .collect()
}

pub fn write_coclustering(path: &Path, hash: &str, ids: &[String], p: &CoClusterMatrix) -> Result<()> {
    let mut w = table_writer(path, hash)?;
    let mut header = vec!["subject".to_string()];
    header.extend(ids.iter().cloned());
    w.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut rec = vec![id.clone()];
        rec.extend(p.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    finish(w, path)
}

#[derive(Serialize)]
struct ModeRow<'a> {
    subject: &'a str,
    cluster: usize,
}

#[derive(Serialize)]
struct OrderRow<'a> {
    rank: usize,
    subject: &'a str,
}

pub fn write_mode_partition(path: &Path, hash: &str, ids: &[String], mode: &Partition) -> Result<()> {
    let rows: Vec<ModeRow> = ids
        .iter()
        .zip(mode.labels())
        .map(|(id, &c)| ModeRow { subject: id, cluster: c + 1 })
        .collect();
    write_rows(path, hash, &rows)
}

pub fn write_heatmap_order(path: &Path, hash: &str, ids: &[String], order: &[usize]) -> Result<()> {
    let rows: Vec<OrderRow> = order
        .iter()
        .enumerate()
        .map(|(r, &i)| OrderRow { rank: r + 1, subject: &ids[i] })
        .collect();
    write_rows(path, hash, &rows)
}

/// Wide trace table: chain, iteration, then one column per functional.
pub fn write_traces(
    path: &Path,
    hash: &str,
    draws: &PosteriorDraws,
    basis: &ExposureBasis,
    functionals: &[Functional],
) -> Result<()> {
    let traces = functionals
        .iter()
        .map(|f| functional_traces(draws, basis, f))
        .collect::<Result<Vec<_>>>()?;
    let mut w = table_writer(path, hash)?;
    let mut header = vec!["chain".to_string(), "iteration".into()];
    header.extend(functionals.iter().map(|f| f.to_string()));
    w.write_record(&header)?;
    for (c, chain) in draws.chains.iter().enumerate() {
        for m in 0..chain.len() {
            let mut rec = vec![c.to_string(), m.to_string()];
            rec.extend(traces.iter().map(|t| t.chain(c)[m].to_string()));
            w.write_record(&rec)?;
        }
    }
    finish(w, path)
}
