//! Multi-chain convergence diagnostics: rank-normalized split R̂ and the
//! label-invariant scalar traces it is computed on.

use std::fmt;
use std::str::FromStr;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::{dot, ExposureBasis};
use crate::error::{Error, Result};
use crate::sampler::PosteriorDraws;

/// Draws of one scalar functional, one row per chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainMatrix {
    n_iter: usize,
    chains: Vec<Vec<f64>>,
}

impl ChainMatrix {
    pub fn new(chains: Vec<Vec<f64>>) -> Result<Self> {
        let n_iter = chains.first().map_or(0, Vec::len);
        for c in &chains {
            if c.len() != n_iter {
                return Err(Error::SizeMismatch {
                    left: c.len(),
                    right: n_iter,
                });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("chain matrix has non-finite entries".into()));
            }
        }
        Ok(ChainMatrix { n_iter, chains })
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_iter(&self) -> usize {
        self.n_iter
    }

    pub fn chain(&self, c: usize) -> &[f64] {
        &self.chains[c]
    }

    pub fn chains(&self) -> &[Vec<f64>] {
        &self.chains
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degeneracy {
    /// Every draw has the same value; R̂ is reported as 1.
    Constant,
    /// Two or more chains are elementwise identical.
    IdenticalChains,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhatResult {
    pub rhat: f64,
    pub flag: Option<Degeneracy>,
}

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Rank-normalized split R̂.
///
/// Each chain is split in half (dropping the middle draw when the length is
/// odd), the pooled draws are replaced by normal scores of their average
/// ranks, `Φ⁻¹((r − 3/8) / (S + 1/4))`, and the classic potential scale
/// reduction `sqrt(((n−1)/n · W + B/n) / W)` is computed on the halves.
pub fn split_rhat(cm: &ChainMatrix) -> Result<RhatResult> {
    if cm.n_chains() == 0 || cm.n_iter() < 4 {
        return Err(Error::InvalidDimension(format!(
            "split R-hat needs at least one chain of 4 draws, got {} × {}",
            cm.n_chains(),
            cm.n_iter()
        )));
    }
    let first = cm.chain(0)[0];
    if cm.chains().iter().flatten().all(|&v| v == first) {
        return Ok(RhatResult {
            rhat: 1.0,
            flag: Some(Degeneracy::Constant),
        });
    }
    let identical = (0..cm.n_chains())
        .any(|a| (a + 1..cm.n_chains()).any(|b| cm.chain(a) == cm.chain(b)));

    let half = cm.n_iter() / 2;
    let offset = cm.n_iter() - half;
    let mut pooled = Vec::with_capacity(2 * half * cm.n_chains());
    for c in cm.chains() {
        pooled.extend_from_slice(&c[..half]);
        pooled.extend_from_slice(&c[offset..]);
    }
    let s = pooled.len() as f64;
    let normal = Normal::standard();
    let z: Vec<f64> = average_ranks(&pooled)
        .into_iter()
        .map(|r| normal.inverse_cdf((r - 0.375) / (s + 0.25)))
        .collect();

    let n = half as f64;
    let stats: Vec<(f64, f64)> = z.chunks(half).map(mean_var).collect();
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / stats.len() as f64;
    let b = n * mean_var(&means).1;
    let var_plus = (n - 1.0) / n * w + b / n;
    let rhat = if w > 0.0 { (var_plus / w).sqrt() } else { f64::INFINITY };
    Ok(RhatResult {
        rhat,
        flag: identical.then_some(Degeneracy::IdenticalChains),
    })
}

/// A scalar summary of each draw that does not depend on cluster labels.
#[derive(Debug, Clone, PartialEq)]
pub enum Functional {
    Sigma2,
    Alpha,
    NOccupied,
    /// Fixed effect by column name or 0-based index.
    Gamma(String),
    /// `f(d)` of the cluster the subject belongs to in each draw.
    SubjectCurve { subject: String, distance: f64 },
}

impl FromStr for Functional {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownFunctional(s.to_string());
        match s {
            "sigma2" => return Ok(Functional::Sigma2),
            "alpha" => return Ok(Functional::Alpha),
            "n_occupied" => return Ok(Functional::NOccupied),
            _ => {}
        }
        if let Some(name) = s.strip_prefix("gamma:") {
            if name.is_empty() {
                return Err(unknown());
            }
            return Ok(Functional::Gamma(name.to_string()));
        }
        if let Some(rest) = s.strip_prefix("f:") {
            let (subject, d) = rest.rsplit_once(':').ok_or_else(unknown)?;
            let distance: f64 = d.parse().map_err(|_| unknown())?;
            if subject.is_empty() || !distance.is_finite() {
                return Err(unknown());
            }
            return Ok(Functional::SubjectCurve {
                subject: subject.to_string(),
                distance,
            });
        }
        Err(unknown())
    }
}

impl fmt::Display for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Functional::Sigma2 => write!(f, "sigma2"),
            Functional::Alpha => write!(f, "alpha"),
            Functional::NOccupied => write!(f, "n_occupied"),
            Functional::Gamma(name) => write!(f, "gamma:{name}"),
            Functional::SubjectCurve { subject, distance } => write!(f, "f:{subject}:{distance}"),
        }
    }
}

/// Per-chain trace of a functional.
pub fn functional_traces(
    draws: &PosteriorDraws,
    basis: &ExposureBasis,
    functional: &Functional,
) -> Result<ChainMatrix> {
    let chains: Vec<Vec<f64>> = match functional {
        Functional::Sigma2 => draws.chains.iter().map(|c| c.sigma2.clone()).collect(),
        Functional::Alpha => draws.chains.iter().map(|c| c.alpha.clone()).collect(),
        Functional::NOccupied => draws
            .chains
            .iter()
            .map(|c| (0..c.len()).map(|m| c.n_occupied(m) as f64).collect())
            .collect(),
        Functional::Gamma(name) => {
            let j = draws
                .x_names
                .iter()
                .position(|n| n == name)
                .or_else(|| name.parse::<usize>().ok().filter(|&j| j < draws.x_names.len()))
                .ok_or_else(|| Error::UnknownFunctional(functional.to_string()))?;
            draws
                .chains
                .iter()
                .map(|c| (0..c.len()).map(|m| c.gamma(m)[j]).collect())
                .collect()
        }
        Functional::SubjectCurve { subject, distance } => {
            let i = draws
                .subject_ids
                .iter()
                .position(|id| id == subject)
                .ok_or_else(|| Error::UnknownFunctional(functional.to_string()))?;
            let row = basis.grid_matrix(&[*distance])?;
            let row: Vec<f64> = row.row(0).iter().copied().collect();
            draws
                .chains
                .iter()
                .map(|c| {
                    (0..c.len())
                        .map(|m| dot(&row, c.beta(m, c.labels(m)[i])))
                        .collect()
                })
                .collect()
        }
    };
    ChainMatrix::new(chains)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, shift: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                shift + z
            })
            .collect()
    }

    /// Straight transcription of the estimator with O(S²) rank counting.
    fn rhat_oracle(chains: &[Vec<f64>]) -> f64 {
        let m = chains[0].len();
        let h = m / 2;
        let mut halves: Vec<Vec<f64>> = Vec::new();
        for c in chains {
            halves.push(c[..h].to_vec());
            halves.push(c[m - h..].to_vec());
        }
        let all: Vec<f64> = halves.iter().flatten().copied().collect();
        let s = all.len() as f64;
        let rank = |v: f64| {
            let below = all.iter().filter(|&&x| x < v).count() as f64;
            let equal = all.iter().filter(|&&x| x == v).count() as f64;
            below + (equal + 1.0) / 2.0
        };
        let normal = Normal::standard();
        let z: Vec<Vec<f64>> = halves
            .iter()
            .map(|c| c.iter().map(|&v| normal.inverse_cdf((rank(v) - 0.375) / (s + 0.25))).collect())
            .collect();
        let n = h as f64;
        let k = z.len() as f64;
        let means: Vec<f64> = z.iter().map(|c| c.iter().sum::<f64>() / n).collect();
        let grand = means.iter().sum::<f64>() / k;
        let b = n / (k - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
        let w = z
            .iter()
            .zip(&means)
            .map(|(c, mu)| c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0))
            .sum::<f64>()
            / k;
        (((n - 1.0) / n * w + b / n) / w).sqrt()
    }

    #[test]
    fn matches_oracle() {
        for (m, shift) in [(40, 0.0), (41, 0.3), (100, 1.0)] {
            let chains = vec![normals(m, 0.0, 1), normals(m, shift, 2), normals(m, 0.0, 3)];
            let got = split_rhat(&ChainMatrix::new(chains.clone()).unwrap()).unwrap();
            assert!((got.rhat - rhat_oracle(&chains)).abs() < 1e-12);
            assert_eq!(got.flag, None);
        }
    }

    #[test]
    fn iid_chains_near_one() {
        let cm = ChainMatrix::new(vec![normals(1000, 0.0, 10), normals(1000, 0.0, 11)]).unwrap();
        let r = split_rhat(&cm).unwrap().rhat;
        assert!((0.99..=1.02).contains(&r), "{r}");
    }

    #[test]
    fn separated_chains_far_from_one() {
        let cm = ChainMatrix::new(vec![normals(1000, 0.0, 10), normals(1000, 5.0, 11)]).unwrap();
        let r = split_rhat(&cm).unwrap().rhat;
        assert!(r > 1.5, "{r}");
    }

    #[test]
    fn identical_chains_flagged() {
        let c = normals(500, 0.0, 4);
        let r = split_rhat(&ChainMatrix::new(vec![c.clone(), c]).unwrap()).unwrap();
        assert_eq!(r.flag, Some(Degeneracy::IdenticalChains));
        assert!((r.rhat - 1.0).abs() < 0.02, "{}", r.rhat);
    }

    #[test]
    fn constant_input() {
        let r = split_rhat(&ChainMatrix::new(vec![vec![2.0; 10], vec![2.0; 10]]).unwrap()).unwrap();
        assert_eq!(r, RhatResult { rhat: 1.0, flag: Some(Degeneracy::Constant) });
    }

    #[test]
    fn monotone_transform_invariance() {
        let chains = vec![normals(300, 0.0, 5), normals(300, 0.5, 6)];
        let exp: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|v| v.exp()).collect()).collect();
        let a = split_rhat(&ChainMatrix::new(chains).unwrap()).unwrap().rhat;
        let b = split_rhat(&ChainMatrix::new(exp).unwrap()).unwrap().rhat;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn input_checks() {
        assert!(split_rhat(&ChainMatrix::new(vec![vec![1.0, 2.0, 3.0]]).unwrap()).is_err());
        assert!(ChainMatrix::new(vec![vec![1.0; 4], vec![1.0; 5]]).is_err());
        assert!(ChainMatrix::new(vec![vec![1.0, f64::NAN, 1.0, 1.0]]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn functional_names() {
        for s in ["sigma2", "alpha", "n_occupied", "gamma:(intercept)", "f:school 7:0", "f:a:b:2.5"] {
            let f: Functional = s.parse().unwrap();
            assert_eq!(f.to_string(), s);
        }
        let f: Functional = "f:a:b:2.5".parse().unwrap();
        assert_eq!(f, Functional::SubjectCurve { subject: "a:b".into(), distance: 2.5 });
        for s in ["sigma", "gamma:", "f:x", "f::1", "f:x:nan", ""] {
            assert!(matches!(s.parse::<Functional>(), Err(Error::UnknownFunctional(_))), "{s}");
        }
    }

    fn small_fit() -> (PosteriorDraws, ExposureBasis) {
        use crate::basis::BasisSettings;
        use crate::data::{Dataset, DistanceSet, ObservationRow};
        use crate::sampler::{fit, PriorConfig, SamplerConfig};
        let rows = (0..12)
            .map(|i| ObservationRow {
                subject_id: format!("s{i}"),
                occasion_id: "0".into(),
                y: i as f64 * 0.1,
                x: vec![1.0],
                z: vec![],
                weight: 1.0,
                distances: DistanceSet::new(vec![(i % 5) as f64 * 0.2], 1.0).unwrap(),
            })
            .collect();
        let data = Dataset::new(rows, vec!["int".into()], vec![], 1.0).unwrap();
        let basis = ExposureBasis::new(BasisSettings::default(), 1.0).unwrap();
        let cfg = SamplerConfig { n_clusters: 5, burn_in: 2, retained: 8, chains: 2, ..Default::default() };
        (fit(&data, &basis, &PriorConfig::default(), &cfg, 1).unwrap(), basis)
    }

    #[test]
    fn traces_read_stored_columns() {
        let (draws, basis) = small_fit();
        let t = functional_traces(&draws, &basis, &Functional::Sigma2).unwrap();
        assert_eq!(t.chain(1), draws.chains[1].sigma2.as_slice());
        let t = functional_traces(&draws, &basis, &"n_occupied".parse().unwrap()).unwrap();
        for m in 0..8 {
            let mut seen = draws.chains[0].labels(m).to_vec();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(t.chain(0)[m], seen.len() as f64);
        }
        let by_name = functional_traces(&draws, &basis, &"gamma:int".parse().unwrap()).unwrap();
        let by_index = functional_traces(&draws, &basis, &"gamma:0".parse().unwrap()).unwrap();
        assert_eq!(by_name, by_index);
        for bad in ["gamma:slope", "gamma:1", "f:nobody:0"] {
            let f: Functional = bad.parse().unwrap();
            assert!(functional_traces(&draws, &basis, &f).is_err(), "{bad}");
        }
        let f: Functional = "f:s1:2".parse().unwrap();
        assert!(matches!(functional_traces(&draws, &basis, &f), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn subject_curves_ignore_cluster_labels() {
        let (draws, basis) = small_fit();
        let f: Functional = "f:s3:0.25".parse().unwrap();
        let before = functional_traces(&draws, &basis, &f).unwrap();
        // relabel clusters within every draw by a fixed cyclic shift
        let mut shifted = draws.clone();
        for chain in &mut shifted.chains {
            let (k, l) = (chain.n_clusters, chain.n_coef);
            for m in 0..chain.len() {
                let n = chain.n_subjects;
                for lab in &mut chain.labels[m * n..(m + 1) * n] {
                    *lab = (*lab + 2) % k;
                }
                let block = chain.beta[m * k * l..(m + 1) * k * l].to_vec();
                for c in 0..k {
                    let to = (c + 2) % k;
                    chain.beta[(m * k + to) * l..(m * k + to + 1) * l]
                        .copy_from_slice(&block[c * l..(c + 1) * l]);
                }
            }
        }
        let after = functional_traces(&shifted, &basis, &f).unwrap();
        assert_eq!(before, after);
        let curve = basis.curve_on_grid(draws.chains[0].beta(0, draws.chains[0].labels(0)[3]), &[0.25]).unwrap();
        assert!((curve[0].1 - before.chain(0)[0]).abs() < 1e-12);
    }
}
