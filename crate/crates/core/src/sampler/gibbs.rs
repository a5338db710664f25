use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::basis::dot;
use crate::error::{Error, Result};
use crate::seeding::{stream, StreamRng};

use super::linalg::{cholesky, sample_from_precision, sample_inverse_wishart, symmetrize};
use super::model::Model;
use super::{ModelState, PriorConfig, RePriorKind, SamplerConfig, STICK_CLAMP};

/// Weights below this get zero label mass.
const MIN_WEIGHT: f64 = 1e-300;

/// Random streams of one chain. Global updates draw from `global`; label
/// and random-effect draws for a subject come from that subject's own
/// stream, keyed by its id, so reordering subjects does not reshuffle them.
#[derive(Debug, Clone)]
pub struct ChainRng {
    pub global: StreamRng,
    pub subjects: Vec<StreamRng>,
}

impl ChainRng {
    pub fn new(seed: u64, chain: usize, subject_ids: &[String]) -> Self {
        let c = (chain as u64).to_le_bytes();
        ChainRng {
            global: stream(seed, &[b"chain", &c]),
            subjects: subject_ids
                .iter()
                .map(|id| stream(seed, &[b"subject", &c, id.as_bytes()]))
                .collect(),
        }
    }
}

/// `π_k = v_k Π_{u<k} (1 − v_u)`.
pub fn stick_weights(sticks: &[f64]) -> Vec<f64> {
    let mut rest = 1.0;
    sticks
        .iter()
        .map(|&v| {
            let w = v * rest;
            rest *= 1.0 - v;
            w
        })
        .collect()
}

fn gamma_rate<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma parameters are positive")
        .sample(rng)
}

/// `ln G` for `G ~ Gamma(shape, 1)`, finite even where `G` underflows.
fn ln_gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        Gamma::new(shape, 1.0)
            .expect("gamma shape is positive")
            .sample(rng)
            .ln()
    } else {
        let u = 1.0 - rng.random::<f64>();
        ln_gamma_variate(shape + 1.0, rng) + u.ln() / shape
    }
}

/// `(ln v, ln(1 − v))` for `v ~ Beta(a, b)`. Small `b` puts most of the mass
/// within rounding of 1, where `ln(1 − v)` cannot be recovered from `v`.
pub(super) fn ln_beta_variate<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> (f64, f64) {
    let x = ln_gamma_variate(a, rng);
    let y = ln_gamma_variate(b, rng);
    let m = x.max(y);
    let ln_sum = m + ((x - m).exp() + (y - m).exp()).ln();
    (x - ln_sum, y - ln_sum)
}

/// Posterior mean of the fixed effects and of every cluster that enters the
/// joint solve, holding everything else at the current state.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMean {
    pub gamma: Vec<f64>,
    pub beta: Vec<(usize, Vec<f64>)>,
}

pub struct Gibbs<'a> {
    model: &'a Model,
    prior: &'a PriorConfig,
    n_clusters: usize,
    threshold: usize,
}

impl<'a> Gibbs<'a> {
    pub fn new(model: &'a Model, prior: &'a PriorConfig, config: &SamplerConfig) -> Result<Self> {
        prior.validate()?;
        config.validate()?;
        Ok(Gibbs {
            model,
            prior,
            n_clusters: config.n_clusters,
            threshold: config.low_member_threshold,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    fn tau_for(&self, l: usize, tau: [f64; 2]) -> f64 {
        if l < self.model.rank() {
            tau[0]
        } else {
            tau[1]
        }
    }

    fn draw_beta_prior(&self, state: &mut ModelState, k: usize, rng: &mut StreamRng) {
        let sigma2 = state.sigma2;
        let tau = state.tau[k];
        for l in 0..self.model.n_coef() {
            let z: f64 = StandardNormal.sample(rng);
            state.beta_k_mut(k)[l] = (sigma2 / self.tau_for(l, tau)).sqrt() * z;
        }
    }

    /// Labels uniform over clusters; sticks, α, τ, σ² and β from their
    /// priors; fixed effects at their ridge estimate; b = 0; Σ = I.
    pub fn init_state(&self, rng: &mut ChainRng) -> ModelState {
        let (k, l, p, q) = (self.n_clusters, self.model.n_coef(), self.model.p(), self.model.q());
        let n = self.model.n_subjects();
        let pr = self.prior;
        let labels: Vec<usize> = rng.subjects.iter_mut().map(|r| r.random_range(0..k)).collect();
        let g = &mut rng.global;
        let alpha = gamma_rate(pr.a_alpha, pr.b_alpha, g);
        let sticks: Vec<f64> = (0..k)
            .map(|i| if i + 1 == k { 1.0 } else { ln_beta_variate(1.0, alpha, g).0.exp().min(STICK_CLAMP) })
            .collect();
        let tau: Vec<[f64; 2]> = (0..k)
            .map(|_| [gamma_rate(pr.a_tau, pr.b_tau, g), gamma_rate(pr.a_tau, pr.b_tau, g)])
            .collect();
        let sigma2 = 1.0 / gamma_rate(pr.a_sigma, pr.b_sigma, g);

        let mut state = ModelState {
            labels,
            beta: vec![0.0; k * l],
            tau,
            gamma: vec![0.0; p],
            sigma2,
            weights: stick_weights(&sticks),
            sticks,
            alpha,
            b: vec![0.0; n * q],
            sigma_re: DMatrix::identity(q, q),
            n_coef: l,
            q,
        };
        for c in 0..k {
            self.draw_beta_prior(&mut state, c, &mut rng.global);
        }
        if p > 0 {
            let mut a = self.model.xtwx().clone();
            for i in 0..p {
                a[(i, i)] += 1.0 / self.model.gamma_prior_var();
            }
            let mut h = DVector::zeros(p);
            for j in 0..self.model.n_rows() {
                let c = self.model.w(j) * self.model.y(j);
                for (i, xv) in self.model.x(j).iter().enumerate() {
                    h[i] += c * xv;
                }
            }
            if let Some(chol) = a.cholesky() {
                state.gamma = chol.solve(&h).iter().copied().collect();
            }
        }
        state
    }

    fn fixed_part(&self, state: &ModelState, s: usize, j: usize) -> f64 {
        dot(self.model.x(j), &state.gamma) + dot(self.model.z(j), state.b_i(s))
    }

    /// Unnormalized log label mass of subject `s` for every cluster. With
    /// random effects the mass integrates `b_s` out against `N(0, Σ)`.
    pub fn label_log_weights(&self, state: &ModelState, s: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_clusters];
        let re = self.re_context(state)?;
        self.label_log_weights_into(state, re.as_ref(), s, &mut Vec::new(), &mut out)?;
        Ok(out)
    }

    fn re_context(&self, state: &ModelState) -> Result<Option<DMatrix<f64>>> {
        if self.model.q() == 0 {
            return Ok(None);
        }
        Ok(Some(cholesky(state.sigma_re.clone(), "random-effect covariance")?.inverse()))
    }

    /// Precision `Σ⁻¹ + Zᵀ W Z / σ²` of `b_s` given everything else.
    fn re_precision(&self, state: &ModelState, sigma_inv: &DMatrix<f64>, s: usize) -> Result<Cholesky<f64, Dyn>> {
        cholesky(self.model.ztwz(s) / state.sigma2 + sigma_inv, "random-effect precision")
    }

    /// `Zᵀ W r / σ²` for `r = y − Xγ − Eβ`.
    fn re_linear(&self, state: &ModelState, s: usize, beta: &[f64]) -> DVector<f64> {
        let m = self.model;
        let mut h = DVector::<f64>::zeros(m.q());
        for j in m.rows(s) {
            let r = m.y(j) - dot(m.x(j), &state.gamma) - dot(m.e(j), beta);
            let wr = m.w(j) * r / state.sigma2;
            for (i, zv) in m.z(j).iter().enumerate() {
                h[i] += wr * zv;
            }
        }
        h
    }

    fn label_log_weights_into(
        &self,
        state: &ModelState,
        sigma_inv: Option<&DMatrix<f64>>,
        s: usize,
        resid: &mut Vec<f64>,
        out: &mut [f64],
    ) -> Result<()> {
        let m = self.model;
        let rows = m.rows(s);
        resid.clear();
        match sigma_inv {
            None => resid.extend(rows.clone().map(|j| m.y(j) - self.fixed_part(state, s, j))),
            Some(_) => resid.extend(rows.clone().map(|j| m.y(j) - dot(m.x(j), &state.gamma))),
        }
        let chol = sigma_inv.map(|si| self.re_precision(state, si, s)).transpose()?;
        let half_precision = 0.5 / state.sigma2;
        let mut h = DVector::<f64>::zeros(m.q());
        for (k, slot) in out.iter_mut().enumerate() {
            let w = state.weights[k];
            if !(w >= MIN_WEIGHT) {
                *slot = f64::NEG_INFINITY;
                continue;
            }
            let beta = state.beta_k(k);
            let mut sse = 0.0;
            h.fill(0.0);
            for (r, j) in resid.iter().zip(rows.clone()) {
                let d = r - dot(m.e(j), beta);
                sse += m.w(j) * d * d;
                if chol.is_some() {
                    let wr = m.w(j) * d / state.sigma2;
                    for (i, zv) in m.z(j).iter().enumerate() {
                        h[i] += wr * zv;
                    }
                }
            }
            // Woodbury: rᵀ(ZΣZᵀ + σ²W⁻¹)⁻¹r = rᵀWr/σ² − hᵀP⁻¹h; the
            // determinant does not depend on k.
            let explained = chol.as_ref().map_or(0.0, |c| h.dot(&c.solve(&h)));
            *slot = w.ln() - half_precision * sse + 0.5 * explained;
        }
        Ok(())
    }

    /// Draws each subject's label, and with random effects draws `(ζ_s, b_s)`
    /// as one block: `ζ_s` with `b_s` integrated out, then `b_s | ζ_s`.
    pub fn update_labels(&self, state: &mut ModelState, rng: &mut ChainRng) -> Result<()> {
        if self.n_clusters == 1 {
            return Ok(());
        }
        let sigma_inv = self.re_context(state)?;
        let q = self.model.q();
        let mut logw = vec![0.0; self.n_clusters];
        let mut resid = Vec::new();
        for s in 0..self.model.n_subjects() {
            self.label_log_weights_into(state, sigma_inv.as_ref(), s, &mut resid, &mut logw)?;
            let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in logw.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            if !(total > 0.0 && total.is_finite()) {
                return Err(Error::Numerical(format!(
                    "label mass for subject {} is {total} (max log mass {max}, σ² = {})",
                    self.model.subject_ids()[s],
                    state.sigma2
                )));
            }
            let u = rng.subjects[s].random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = self.n_clusters - 1;
            for (k, v) in logw.iter().enumerate() {
                acc += v;
                if u < acc {
                    chosen = k;
                    break;
                }
            }
            // never land on a zero-mass cluster through round-off at the top end
            while logw[chosen] == 0.0 && chosen > 0 {
                chosen -= 1;
            }
            state.labels[s] = chosen;
            if let Some(si) = &sigma_inv {
                let chol = self.re_precision(state, si, s)?;
                let h = self.re_linear(state, s, state.beta_k(chosen));
                let draw = sample_from_precision(&chol, &h, &mut rng.subjects[s]);
                state.b[s * q..(s + 1) * q].copy_from_slice(draw.as_slice());
            }
        }
        Ok(())
    }

    /// `v_k ~ Beta(1 + n_k, α + Σ_{u>k} n_u)`, then
    /// `α ~ Gamma(a_α + K − 1, b_α − Σ_{k<K} log(1 − v_k))`.
    pub fn update_sticks_and_alpha(&self, state: &mut ModelState, rng: &mut ChainRng) {
        let k = self.n_clusters;
        let counts = state.counts();
        let g = &mut rng.global;
        let mut tail: usize = counts.iter().sum();
        let mut log_rest = 0.0;
        for c in 0..k {
            tail -= counts[c];
            if c + 1 == k {
                state.sticks[c] = 1.0;
                break;
            }
            let (ln_v, ln_rest) = ln_beta_variate(1.0 + counts[c] as f64, state.alpha + tail as f64, g);
            state.sticks[c] = ln_v.exp().min(STICK_CLAMP);
            log_rest += ln_rest;
        }
        state.weights = stick_weights(&state.sticks);
        let shape = self.prior.a_alpha + (k - 1) as f64;
        let rate = self.prior.b_alpha - log_rest;
        state.alpha = gamma_rate(shape, rate, g);
    }

    fn active(&self, state: &ModelState) -> Vec<bool> {
        state.counts().iter().map(|&c| c > self.threshold).collect()
    }

    /// Joint Gaussian conditional of (γ, β_k for active k). The precision
    /// has arrow structure (γ couples to every cluster block, cluster blocks
    /// are mutually independent), so γ is drawn from its Schur-complement
    /// marginal and each β_k from its conditional given γ.
    fn solve_coefficients(
        &self,
        state: &ModelState,
        active: &[bool],
        mut rng: Option<&mut StreamRng>,
    ) -> Result<CoefficientMean> {
        let m = self.model;
        let (k_total, l, p) = (self.n_clusters, m.n_coef(), m.p());
        let inv_s2 = 1.0 / state.sigma2;

        let mut h_gamma = DVector::<f64>::zeros(p);
        let mut h_beta = vec![DVector::<f64>::zeros(l); k_total];
        let mut gram = vec![DMatrix::<f64>::zeros(l, l); k_total];
        let mut cross = vec![DMatrix::<f64>::zeros(p, l); k_total];
        for s in 0..m.n_subjects() {
            let k = state.labels[s];
            let b = state.b_i(s);
            for j in m.rows(s) {
                let mut r = m.y(j) - dot(m.z(j), b);
                if !active[k] {
                    r -= dot(m.e(j), state.beta_k(k));
                }
                let wr = m.w(j) * r;
                for (i, xv) in m.x(j).iter().enumerate() {
                    h_gamma[i] += wr * xv;
                }
                if active[k] {
                    for (i, ev) in m.e(j).iter().enumerate() {
                        h_beta[k][i] += wr * ev;
                    }
                }
            }
            if active[k] {
                gram[k] += m.gram(s);
                cross[k] += m.cross(s);
            }
        }
        h_gamma *= inv_s2;

        let mut a_schur = m.xtwx() * inv_s2;
        for i in 0..p {
            a_schur[(i, i)] += 1.0 / m.gamma_prior_var();
        }
        let mut h_schur = h_gamma;
        let mut blocks = Vec::new();
        for k in (0..k_total).filter(|&k| active[k]) {
            let mut d = std::mem::replace(&mut gram[k], DMatrix::zeros(0, 0)) * inv_s2;
            for i in 0..l {
                d[(i, i)] += self.tau_for(i, state.tau[k]) * inv_s2;
            }
            let chol = cholesky(d, "cluster coefficient precision")?;
            let b = &cross[k] * inv_s2;
            let y = chol.solve(&b.transpose());
            let u = chol.solve(&(&h_beta[k] * inv_s2));
            a_schur -= &b * &y;
            h_schur -= &b * &u;
            blocks.push((k, chol, y, u));
        }

        let gamma = if p > 0 {
            let chol = cholesky(symmetrize(a_schur), "fixed-effect precision")?;
            match rng.as_deref_mut() {
                Some(r) => sample_from_precision(&chol, &h_schur, r),
                None => chol.solve(&h_schur),
            }
        } else {
            DVector::zeros(0)
        };

        let mut beta = Vec::with_capacity(blocks.len());
        for (k, chol, y, u) in blocks {
            let linear_mean = u - y * &gamma;
            let draw = match rng.as_deref_mut() {
                Some(r) => {
                    let z = super::linalg::standard_normals(l, r);
                    let offset = chol
                        .l_dirty()
                        .tr_solve_lower_triangular(&z)
                        .expect("Cholesky factor has a positive diagonal");
                    linear_mean + offset
                }
                None => linear_mean,
            };
            beta.push((k, draw.iter().copied().collect()));
        }
        Ok(CoefficientMean {
            gamma: gamma.iter().copied().collect(),
            beta,
        })
    }

    /// Conditional posterior mean of the coefficient block at the current state.
    pub fn coefficient_mean(&self, state: &ModelState) -> Result<CoefficientMean> {
        let active = self.active(state);
        self.solve_coefficients(state, &active, None)
    }

    pub fn update_coefficients(&self, state: &mut ModelState, rng: &mut ChainRng) -> Result<()> {
        let active = self.active(state);
        for k in 0..self.n_clusters {
            if !active[k] {
                self.draw_beta_prior(state, k, &mut rng.global);
            }
        }
        let draw = self.solve_coefficients(state, &active, Some(&mut rng.global))?;
        state.gamma = draw.gamma;
        for (k, beta) in draw.beta {
            state.beta_k_mut(k).copy_from_slice(&beta);
        }
        Ok(())
    }

    fn split_norms(&self, state: &ModelState, k: usize) -> (f64, f64) {
        let r = self.model.rank();
        let beta = state.beta_k(k);
        let range: f64 = beta[..r].iter().map(|v| v * v).sum();
        let null: f64 = beta[r..].iter().map(|v| v * v).sum();
        (range, null)
    }

    pub fn update_precisions(&self, state: &mut ModelState, rng: &mut ChainRng) {
        let active = self.active(state);
        let (l, r) = (self.model.n_coef() as f64, self.model.rank() as f64);
        let (a, b) = (self.prior.a_tau, self.prior.b_tau);
        for k in 0..self.n_clusters {
            let g = &mut rng.global;
            state.tau[k] = if active[k] {
                let (range, null) = self.split_norms(state, k);
                let denom = 2.0 * state.sigma2;
                [
                    gamma_rate(a + r / 2.0, b + range / denom, g),
                    gamma_rate(a + (l - r) / 2.0, b + null / denom, g),
                ]
            } else {
                [gamma_rate(a, b, g), gamma_rate(a, b, g)]
            };
        }
    }

    /// Weighted residual sum of squares of the full model.
    pub fn weighted_sse(&self, state: &ModelState) -> f64 {
        let m = self.model;
        let mut sse = 0.0;
        for s in 0..m.n_subjects() {
            let beta = state.beta_k(state.labels[s]);
            for j in m.rows(s) {
                let r = m.y(j) - self.fixed_part(state, s, j) - dot(m.e(j), beta);
                sse += m.w(j) * r * r;
            }
        }
        sse
    }

    pub fn update_variance(&self, state: &mut ModelState, rng: &mut ChainRng) {
        let active = self.active(state);
        let mut penalty = 0.0;
        let mut n_active = 0;
        for k in (0..self.n_clusters).filter(|&k| active[k]) {
            let (range, null) = self.split_norms(state, k);
            penalty += state.tau[k][0] * range + state.tau[k][1] * null;
            n_active += 1;
        }
        let shape = self.prior.a_sigma
            + (self.model.n_rows() + n_active * self.model.n_coef()) as f64 / 2.0;
        let rate = self.prior.b_sigma + (self.weighted_sse(state) + penalty) / 2.0;
        state.sigma2 = 1.0 / gamma_rate(shape, rate, &mut rng.global);
    }

    pub fn update_random_effects(&self, state: &mut ModelState, rng: &mut ChainRng) -> Result<()> {
        let q = self.model.q();
        let Some(sigma_inv) = self.re_context(state)? else {
            return Ok(());
        };
        for s in 0..self.model.n_subjects() {
            let chol = self.re_precision(state, &sigma_inv, s)?;
            let h = self.re_linear(state, s, state.beta_k(state.labels[s]));
            let draw = sample_from_precision(&chol, &h, &mut rng.subjects[s]);
            state.b[s * q..(s + 1) * q].copy_from_slice(draw.as_slice());
        }
        Ok(())
    }

    pub fn update_re_covariance(&self, state: &mut ModelState, rng: &mut ChainRng) -> Result<()> {
        let q = self.model.q();
        if q == 0 {
            return Ok(());
        }
        let n = self.model.n_subjects();
        let mut scatter = DMatrix::<f64>::zeros(q, q);
        for s in 0..n {
            let b = DVector::from_column_slice(state.b_i(s));
            scatter.ger(1.0, &b, &b, 1.0);
        }
        state.sigma_re = match self.prior.re_prior {
            RePriorKind::Jeffreys => {
                if n < q || scatter.clone().cholesky().is_none() {
                    return Err(Error::ImproperPrior(format!(
                        "scatter of {n} random-effect vectors is singular in dimension {q}; \
                         use the proper inverse-Wishart prior (re_prior = \"inverse-wishart\")"
                    )));
                }
                sample_inverse_wishart(n as f64, &scatter, &mut rng.global)?
            }
            RePriorKind::InverseWishart => {
                let df = self.prior.re_prior_df.unwrap_or(q as f64 + 2.0);
                let psi = DMatrix::<f64>::identity(q, q) * self.prior.re_prior_scale + scatter;
                sample_inverse_wishart(df + n as f64, &psi, &mut rng.global)?
            }
        };
        Ok(())
    }

    pub fn sweep(&self, state: &mut ModelState, rng: &mut ChainRng) -> Result<()> {
        self.update_labels(state, rng)?;
        self.update_sticks_and_alpha(state, rng);
        self.update_coefficients(state, rng)?;
        self.update_precisions(state, rng);
        self.update_variance(state, rng);
        self.update_random_effects(state, rng)?;
        self.update_re_covariance(state, rng)?;
        Ok(())
    }
}
