//! Truncated Dirichlet-process blocked Gibbs sampler.
//!
//! One sweep updates, in order: labels, sticks and concentration, the joint
//! block of fixed effects and cluster spline coefficients, cluster
//! precisions, residual variance, subject random effects and the
//! random-effect covariance. With `n_clusters = 1` the same code fits the
//! homogeneous (single-curve) model.

mod gibbs;
mod linalg;
mod model;
pub mod store;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::ExposureBasis;
use crate::data::Dataset;
use crate::error::{Error, Result};

pub use gibbs::{stick_weights, ChainRng, CoefficientMean, Gibbs};
pub use model::Model;

/// Sticks are clamped below one so `log(1 − v)` stays finite.
pub const STICK_CLAMP: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RePriorKind {
    /// Improper `p(Σ) ∝ |Σ|^{-(q+1)/2}`.
    Jeffreys,
    /// Proper inverse-Wishart(`re_prior_df`, `re_prior_scale · I`).
    InverseWishart,
}

/// Hyperparameters. Gamma distributions use shape/rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub a_tau: f64,
    pub b_tau: f64,
    /// Prior on the residual precision σ⁻².
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub a_alpha: f64,
    pub b_alpha: f64,
    /// Fixed-effect prior variance is this times the sample variance of y.
    pub gamma_prior_scale: f64,
    pub re_prior: RePriorKind,
    /// Inverse-Wishart degrees of freedom; `None` means `q + 2`.
    pub re_prior_df: Option<f64>,
    pub re_prior_scale: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            a_tau: 1.0,
            b_tau: 1.0,
            a_sigma: 1.0,
            b_sigma: 1.0,
            a_alpha: 1.0,
            b_alpha: 1.0,
            gamma_prior_scale: 1e6,
            re_prior: RePriorKind::Jeffreys,
            re_prior_df: None,
            re_prior_scale: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("a_tau", self.a_tau),
            ("b_tau", self.b_tau),
            ("a_sigma", self.a_sigma),
            ("b_sigma", self.b_sigma),
            ("a_alpha", self.a_alpha),
            ("b_alpha", self.b_alpha),
            ("gamma_prior_scale", self.gamma_prior_scale),
            ("re_prior_scale", self.re_prior_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(df) = self.re_prior_df {
            if !(df > 0.0) {
                return Err(Error::Config(format!("re_prior_df must be positive, got {df}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Truncation level K.
    pub n_clusters: usize,
    pub burn_in: usize,
    pub retained: usize,
    pub thin: usize,
    pub chains: usize,
    /// Clusters with at most this many members get prior draws instead of
    /// entering the joint coefficient solve.
    pub low_member_threshold: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_clusters: 50,
            burn_in: 2000,
            retained: 2000,
            thin: 1,
            chains: 1,
            low_member_threshold: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(Error::Config("n_clusters must be at least 1".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.chains == 0 {
            return Err(Error::Config("chains must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parameters of one Gibbs iteration. Cluster quantities are indexed
/// `0..K`; subject quantities follow the dataset's subject order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub labels: Vec<usize>,
    /// Transformed spline coefficients, K rows of length L.
    pub beta: Vec<f64>,
    /// (τ₁, τ₂) per cluster: range-space and null-space precisions.
    pub tau: Vec<[f64; 2]>,
    pub gamma: Vec<f64>,
    pub sigma2: f64,
    pub sticks: Vec<f64>,
    pub weights: Vec<f64>,
    pub alpha: f64,
    /// Random effects, N rows of length q.
    pub b: Vec<f64>,
    pub sigma_re: DMatrix<f64>,
    n_coef: usize,
    q: usize,
}

impl ModelState {
    pub fn n_clusters(&self) -> usize {
        self.tau.len()
    }

    pub fn n_coef(&self) -> usize {
        self.n_coef
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn beta_k(&self, k: usize) -> &[f64] {
        &self.beta[k * self.n_coef..(k + 1) * self.n_coef]
    }

    pub fn beta_k_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.beta[k * self.n_coef..(k + 1) * self.n_coef]
    }

    pub fn b_i(&self, i: usize) -> &[f64] {
        &self.b[i * self.q..(i + 1) * self.q]
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.n_clusters()];
        for &k in &self.labels {
            n[k] += 1;
        }
        n
    }

    pub fn n_occupied(&self) -> usize {
        self.counts().iter().filter(|&&c| c > 0).count()
    }
}

/// Retained draws of one chain, stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub n_subjects: usize,
    pub n_clusters: usize,
    pub n_coef: usize,
    pub p: usize,
    pub q: usize,
    pub labels: Vec<usize>,
    pub beta: Vec<f64>,
    pub tau: Vec<f64>,
    pub weights: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub alpha: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma_re: Vec<f64>,
}

impl ChainDraws {
    pub fn new(n_subjects: usize, n_clusters: usize, n_coef: usize, p: usize, q: usize) -> Self {
        ChainDraws {
            n_subjects,
            n_clusters,
            n_coef,
            p,
            q,
            labels: Vec::new(),
            beta: Vec::new(),
            tau: Vec::new(),
            weights: Vec::new(),
            gamma: Vec::new(),
            sigma2: Vec::new(),
            alpha: Vec::new(),
            b: Vec::new(),
            sigma_re: Vec::new(),
        }
    }

    pub fn push(&mut self, s: &ModelState) {
        self.labels.extend(&s.labels);
        self.beta.extend(&s.beta);
        for t in &s.tau {
            self.tau.extend(t);
        }
        self.weights.extend(&s.weights);
        self.gamma.extend(&s.gamma);
        self.sigma2.push(s.sigma2);
        self.alpha.push(s.alpha);
        self.b.extend(&s.b);
        self.sigma_re.extend(s.sigma_re.iter());
    }

    pub fn len(&self) -> usize {
        self.sigma2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma2.is_empty()
    }

    pub fn labels(&self, m: usize) -> &[usize] {
        &self.labels[m * self.n_subjects..(m + 1) * self.n_subjects]
    }

    pub fn beta(&self, m: usize, k: usize) -> &[f64] {
        let start = (m * self.n_clusters + k) * self.n_coef;
        &self.beta[start..start + self.n_coef]
    }

    pub fn tau(&self, m: usize, k: usize) -> [f64; 2] {
        let i = (m * self.n_clusters + k) * 2;
        [self.tau[i], self.tau[i + 1]]
    }

    pub fn weights(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_clusters..(m + 1) * self.n_clusters]
    }

    pub fn gamma(&self, m: usize) -> &[f64] {
        &self.gamma[m * self.p..(m + 1) * self.p]
    }

    pub fn b(&self, m: usize, i: usize) -> &[f64] {
        let start = (m * self.n_subjects + i) * self.q;
        &self.b[start..start + self.q]
    }

    /// Column-major q×q covariance of draw `m`.
    pub fn sigma_re(&self, m: usize) -> &[f64] {
        let qq = self.q * self.q;
        &self.sigma_re[m * qq..(m + 1) * qq]
    }

    pub fn n_occupied(&self, m: usize) -> usize {
        let mut seen = vec![false; self.n_clusters];
        for &k in self.labels(m) {
            seen[k] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }
}

/// Draws from all chains together with what is needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub chains: Vec<ChainDraws>,
    pub subject_ids: Vec<String>,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub prior: PriorConfig,
}

impl PosteriorDraws {
    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(ChainDraws::len).sum()
    }

    /// Label vectors of every retained draw, chain by chain.
    pub fn label_draws(&self) -> Vec<&[usize]> {
        self.chains
            .iter()
            .flat_map(|c| (0..c.len()).map(move |m| c.labels(m)))
            .collect()
    }
}

/// Runs one chain: `burn_in + retained · thin` sweeps, keeping every
/// `thin`-th state after burn-in.
pub fn run_chain(
    model: &Model,
    prior: &PriorConfig,
    config: &SamplerConfig,
    seed: u64,
    chain: usize,
) -> Result<ChainDraws> {
    let gibbs = Gibbs::new(model, prior, config)?;
    let mut rng = ChainRng::new(seed, chain, model.subject_ids());
    let mut state = gibbs.init_state(&mut rng);
    let mut draws = ChainDraws::new(
        model.n_subjects(),
        config.n_clusters,
        model.n_coef(),
        model.p(),
        model.q(),
    );
    let total = config.burn_in + config.retained * config.thin;
    for it in 0..total {
        gibbs
            .sweep(&mut state, &mut rng)
            .map_err(|e| e.at_iteration(it))?;
        if it >= config.burn_in && (it - config.burn_in + 1) % config.thin == 0 {
            draws.push(&state);
        }
    }
    Ok(draws)
}

/// Fits all configured chains, concurrently, against one shared model.
pub fn fit(
    dataset: &Dataset,
    basis: &ExposureBasis,
    prior: &PriorConfig,
    config: &SamplerConfig,
    seed: u64,
) -> Result<PosteriorDraws> {
    prior.validate()?;
    config.validate()?;
    let model = Model::new(dataset, basis, prior)?;
    let chains = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(&model, prior, config, seed, c).map_err(|e| e.context(format!("chain {c}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorDraws {
        chains,
        subject_ids: dataset.subjects().to_vec(),
        x_names: dataset.x_names().to_vec(),
        z_names: dataset.z_names().to_vec(),
        seed,
        sampler: config.clone(),
        prior: prior.clone(),
    })
}
