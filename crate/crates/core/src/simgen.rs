//! Synthetic two-cluster data and the simulation studies built on it.
//!
//! Subjects fall in a "high" cluster with decay curve
//! `f₁(d) = exp(−(d / (R/2))⁵)` or a "low" cluster with `f₂ = ν f₁`, and
//!
//! ```text
//! Y_i = 26 + 0.5 Z_i + Σ_{d ∈ D_i} f_{ζ_i}(d) + ε_i,   Z_i ~ Bernoulli(1/2),  ε_i ~ N(0, σ²)
//! ```
//!
//! Studies fit the clustering model to replicate datasets and score every
//! retained label draw by its Binder loss against the generating partition.

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSettings, ExposureBasis};
use crate::data::{Dataset, DistanceSet, ObservationRow, INTERCEPT_COLUMN};
use crate::error::{Error, Result};
use crate::partition::binder_loss_labels;
use crate::sampler::{fit, PriorConfig, SamplerConfig};
use crate::seeding::{derive_seed, stream};

pub const HIGH: usize = 0;
pub const LOW: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceLaw {
    Uniform,
    /// Moderately far-skewed scaled Beta.
    Ca,
    /// Strongly far-skewed scaled Beta.
    Skew,
}

impl DistanceLaw {
    pub const ALL: [DistanceLaw; 3] = [DistanceLaw::Uniform, DistanceLaw::Ca, DistanceLaw::Skew];

    pub fn name(self) -> &'static str {
        match self {
            DistanceLaw::Uniform => "uniform",
            DistanceLaw::Ca => "ca",
            DistanceLaw::Skew => "skew",
        }
    }
}

/// Beta shape parameters of the non-uniform laws, on `[0, 1]` before
/// scaling to `[0, R]`. Both defaults put more features far from the
/// subject than near: CA mildly (mean 5R/9), Skew strongly (mean 5R/7).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LawShapes {
    pub ca: [f64; 2],
    pub skew: [f64; 2],
}

impl Default for LawShapes {
    fn default() -> Self {
        LawShapes {
            ca: [2.5, 2.0],
            skew: [5.0, 2.0],
        }
    }
}

impl LawShapes {
    fn validate(&self) -> Result<()> {
        if self.ca.iter().chain(&self.skew).all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("Beta shapes must be positive".into()))
        }
    }
}

/// Draws `count` iid distances from `law` on `[0, radius]`.
pub fn gen_distances<R: Rng + ?Sized>(
    law: DistanceLaw,
    shapes: &LawShapes,
    count: usize,
    radius: f64,
    rng: &mut R,
) -> Result<DistanceSet> {
    let draws: Vec<f64> = match law {
        DistanceLaw::Uniform => (0..count).map(|_| rng.random::<f64>() * radius).collect(),
        DistanceLaw::Ca | DistanceLaw::Skew => {
            let [a, b] = if law == DistanceLaw::Ca { shapes.ca } else { shapes.skew };
            let beta = Beta::new(a, b).map_err(|e| Error::Config(format!("Beta({a}, {b}): {e}")))?;
            (0..count).map(|_| beta.sample(rng) * radius).collect()
        }
    };
    DistanceSet::new(draws, radius)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrueCurves {
    pub nu: f64,
    pub radius: f64,
}

impl TrueCurves {
    pub fn high(&self, d: f64) -> f64 {
        (-(d / (0.5 * self.radius)).powi(5)).exp()
    }

    pub fn low(&self, d: f64) -> f64 {
        self.nu * self.high(d)
    }

    pub fn eval(&self, cluster: usize, d: f64) -> f64 {
        if cluster == HIGH {
            self.high(d)
        } else {
            self.low(d)
        }
    }

    /// `Σ_{d ∈ D} f_cluster(d)`.
    pub fn exposure(&self, cluster: usize, distances: &[f64]) -> f64 {
        distances.iter().map(|&d| self.eval(cluster, d)).sum()
    }
}

pub const BASE_LEVEL: f64 = 26.0;
pub const Z_EFFECT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_subjects: usize,
    /// Mean of the per-subject feature count.
    pub mean_features: usize,
    /// Counts are uniform on `mean ± halfwidth`; `None` means
    /// `round(2·mean/3)`, which gives 5..=25 around 15.
    pub count_halfwidth: Option<usize>,
    pub nu: f64,
    pub law_high: DistanceLaw,
    pub law_low: DistanceLaw,
    pub shapes: LawShapes,
    /// Probability of the high cluster.
    pub p_high: f64,
    pub sigma: f64,
    pub radius: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_subjects: 200,
            mean_features: 15,
            count_halfwidth: None,
            nu: 0.0,
            law_high: DistanceLaw::Skew,
            law_low: DistanceLaw::Skew,
            shapes: LawShapes::default(),
            p_high: 0.5,
            sigma: 1.0,
            radius: 1.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.nu) {
            return Err(Error::Config(format!("nu must lie in [0, 1], got {}", self.nu)));
        }
        if !(0.0..=1.0).contains(&self.p_high) {
            return Err(Error::Config(format!("p_high must lie in [0, 1], got {}", self.p_high)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!("radius must be positive, got {}", self.radius)));
        }
        if self.halfwidth() > self.mean_features {
            return Err(Error::Config(format!(
                "count halfwidth {} exceeds mean count {}",
                self.halfwidth(),
                self.mean_features
            )));
        }
        self.shapes.validate()
    }

    pub fn halfwidth(&self) -> usize {
        self.count_halfwidth
            .unwrap_or_else(|| (2.0 * self.mean_features as f64 / 3.0).round() as usize)
    }

    pub fn count_range(&self) -> std::ops::RangeInclusive<usize> {
        let h = self.halfwidth();
        self.mean_features - h..=self.mean_features + h
    }

    pub fn curves(&self) -> TrueCurves {
        TrueCurves {
            nu: self.nu,
            radius: self.radius,
        }
    }

    pub fn law(&self, cluster: usize) -> DistanceLaw {
        if cluster == HIGH {
            self.law_high
        } else {
            self.law_low
        }
    }
}

/// A generated dataset with its generating labels and covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub dataset: Dataset,
    /// [`HIGH`] or [`LOW`] per subject, in dataset subject order.
    pub labels: Vec<usize>,
    pub z: Vec<f64>,
}

pub fn subject_id(i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len();
    format!("s{i:0width$}")
}

/// Builds the outcome for each subject from given distances and labels.
pub fn gen_outcomes<R: Rng + ?Sized>(
    scenario: &ScenarioConfig,
    distances: Vec<DistanceSet>,
    labels: &[usize],
    rng: &mut R,
) -> Result<SimulatedData> {
    if distances.len() != labels.len() {
        return Err(Error::SizeMismatch {
            left: distances.len(),
            right: labels.len(),
        });
    }
    let curves = scenario.curves();
    let noise = Normal::new(0.0, scenario.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let n = labels.len();
    let mut rows = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    for (i, (d, &k)) in distances.into_iter().zip(labels).enumerate() {
        let z = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let y = BASE_LEVEL + Z_EFFECT * z + curves.exposure(k, d.distances()) + noise.sample(rng);
        zs.push(z);
        rows.push(ObservationRow {
            subject_id: subject_id(i, n),
            occasion_id: "1".into(),
            y,
            x: vec![1.0, z],
            z: vec![],
            weight: 1.0,
            distances: d,
        });
    }
    let dataset = Dataset::new(
        rows,
        vec![INTERCEPT_COLUMN.to_string(), "Z".to_string()],
        vec![],
        scenario.radius,
    )?;
    Ok(SimulatedData {
        dataset,
        labels: labels.to_vec(),
        z: zs,
    })
}

/// Labels, feature counts, distances and outcomes, all from one stream.
pub fn generate(scenario: &ScenarioConfig, seed: u64) -> Result<SimulatedData> {
    scenario.validate()?;
    let mut rng = stream(seed, &[b"simulate"]);
    let labels: Vec<usize> = (0..scenario.n_subjects)
        .map(|_| if rng.random_bool(scenario.p_high) { HIGH } else { LOW })
        .collect();
    let range = scenario.count_range();
    let distances = labels
        .iter()
        .map(|&k| {
            let count = rng.random_range(range.clone());
            gen_distances(scenario.law(k), &scenario.shapes, count, scenario.radius, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    gen_outcomes(scenario, distances, &labels, &mut rng)
}

/// Model settings used for every fit in a study.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub basis: BasisSettings,
    pub prior: PriorConfig,
    pub sampler: SamplerConfig,
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Fits one replicate and returns the Binder loss of every retained label
/// draw against the generating partition.
pub fn replicate_losses(sim: &SimulatedData, fit_settings: &FitSettings, seed: u64) -> Result<Vec<u64>> {
    let basis = ExposureBasis::new(fit_settings.basis, sim.dataset.radius())?;
    let draws = fit(&sim.dataset, &basis, &fit_settings.prior, &fit_settings.sampler, seed)?;
    draws
        .label_draws()
        .into_iter()
        .map(|labels| binder_loss_labels(&sim.labels, labels))
        .collect()
}

/// Relative-loss summary of one replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSummary {
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Divides every raw loss by the largest raw loss across the whole batch
/// and summarizes each replicate. Returns the summaries and the normalizer.
pub fn normalize_losses(batch: &[Vec<u64>]) -> (Vec<LossSummary>, u64) {
    let max = batch.iter().flatten().copied().max().unwrap_or(0);
    let scale = if max > 0 { max as f64 } else { 1.0 };
    let summaries = batch
        .iter()
        .map(|raw| {
            let mut rel: Vec<f64> = raw.iter().map(|&v| v as f64 / scale).collect();
            rel.sort_by(f64::total_cmp);
            LossSummary {
                median: quantile_sorted(&rel, 0.5),
                q025: quantile_sorted(&rel, 0.025),
                q975: quantile_sorted(&rel, 0.975),
            }
        })
        .collect();
    (summaries, max)
}

fn run_jobs<J: Sync>(
    jobs: &[J],
    run: impl Fn(&J) -> Result<Vec<u64>> + Sync + Send,
) -> Result<Vec<Vec<u64>>> {
    jobs.par_iter().map(run).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EffectSizeStudy {
    pub nus: Vec<f64>,
    pub replicates: usize,
    pub law: DistanceLaw,
    /// Settings shared by every cell; `nu` and the laws are overridden.
    pub scenario: ScenarioConfig,
    pub fit: FitSettings,
}

impl Default for EffectSizeStudy {
    fn default() -> Self {
        EffectSizeStudy {
            nus: vec![0.0, 0.25, 0.5, 0.75],
            replicates: 25,
            law: DistanceLaw::Skew,
            scenario: ScenarioConfig::default(),
            fit: FitSettings::default(),
        }
    }
}

impl EffectSizeStudy {
    /// Ten replicates instead of twenty-five.
    pub fn desk() -> Self {
        EffectSizeStudy {
            replicates: 10,
            ..Default::default()
        }
    }

    pub fn cell(&self, nu: f64) -> ScenarioConfig {
        ScenarioConfig {
            nu,
            law_high: self.law,
            law_low: self.law,
            ..self.scenario.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSizeRow {
    pub nu: f64,
    pub replicate: usize,
    pub median_loss: f64,
    pub q025: f64,
    pub q975: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult<R> {
    pub rows: Vec<R>,
    /// Largest raw Binder loss in the batch; relative losses divide by it.
    pub normalizer: u64,
}

/// Data and fit seeds of one study job, keyed by study, cell and replicate.
fn job_seeds(master: u64, study: &[u8], cell: &str, replicate: usize) -> (u64, u64) {
    let r = (replicate as u64).to_le_bytes();
    let data = derive_seed(master, &[study, cell.as_bytes(), &r, b"data"]);
    let fit = derive_seed(master, &[study, cell.as_bytes(), &r, b"fit"]);
    (data, fit)
}

pub fn run_effect_size_study(study: &EffectSizeStudy, seed: u64) -> Result<StudyResult<EffectSizeRow>> {
    if study.nus.is_empty() || study.replicates == 0 {
        return Err(Error::Config("study needs at least one cell and one replicate".into()));
    }
    for &nu in &study.nus {
        study.cell(nu).validate()?;
    }
    let jobs: Vec<(f64, usize)> = study
        .nus
        .iter()
        .flat_map(|&nu| (0..study.replicates).map(move |r| (nu, r)))
        .collect();
    let raw = run_jobs(&jobs, |&(nu, r)| {
        let cell = format!("nu={nu}");
        let (data_seed, fit_seed) = job_seeds(seed, b"effect-size", &cell, r);
        let sim = generate(&study.cell(nu), data_seed)?;
        replicate_losses(&sim, &study.fit, fit_seed)
            .map_err(|e| e.context(format!("{cell}, replicate {r}")))
    })?;
    let (summaries, normalizer) = normalize_losses(&raw);
    let rows = jobs
        .iter()
        .zip(summaries)
        .map(|(&(nu, replicate), s)| EffectSizeRow {
            nu,
            replicate,
            median_loss: s.median,
            q025: s.q025,
            q975: s.q975,
        })
        .collect();
    Ok(StudyResult { rows, normalizer })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceStudy {
    pub nu: f64,
    pub laws: Vec<DistanceLaw>,
    /// Mean feature counts.
    pub ladder: Vec<usize>,
    pub replicates: usize,
    pub scenario: ScenarioConfig,
    pub fit: FitSettings,
}

impl Default for DistanceStudy {
    fn default() -> Self {
        DistanceStudy {
            nu: 0.25,
            laws: DistanceLaw::ALL.to_vec(),
            ladder: vec![5, 10, 15, 20, 25],
            replicates: 25,
            scenario: ScenarioConfig::default(),
            fit: FitSettings::default(),
        }
    }
}

impl DistanceStudy {
    pub fn desk() -> Self {
        DistanceStudy {
            replicates: 10,
            ..Default::default()
        }
    }

    pub fn cell(&self, law_low: DistanceLaw, law_high: DistanceLaw, mean_features: usize) -> ScenarioConfig {
        ScenarioConfig {
            nu: self.nu,
            law_low,
            law_high,
            mean_features,
            ..self.scenario.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub law_low: DistanceLaw,
    pub law_high: DistanceLaw,
    pub mean_features: usize,
    pub replicate: usize,
    pub median_loss: f64,
    pub q025: f64,
    pub q975: f64,
}

pub fn run_distance_study(study: &DistanceStudy, seed: u64) -> Result<StudyResult<DistanceRow>> {
    if study.laws.is_empty() || study.ladder.is_empty() || study.replicates == 0 {
        return Err(Error::Config("study needs at least one cell and one replicate".into()));
    }
    let mut jobs = Vec::new();
    for &low in &study.laws {
        for &high in &study.laws {
            for &m in &study.ladder {
                study.cell(low, high, m).validate()?;
                for r in 0..study.replicates {
                    jobs.push((low, high, m, r));
                }
            }
        }
    }
    let raw = run_jobs(&jobs, |&(low, high, m, r)| {
        let cell = format!("low={},high={},features={m}", low.name(), high.name());
        let (data_seed, fit_seed) = job_seeds(seed, b"distance", &cell, r);
        let sim = generate(&study.cell(low, high, m), data_seed)?;
        replicate_losses(&sim, &study.fit, fit_seed)
            .map_err(|e| e.context(format!("{cell}, replicate {r}")))
    })?;
    let (summaries, normalizer) = normalize_losses(&raw);
    let rows = jobs
        .iter()
        .zip(summaries)
        .map(|(&(law_low, law_high, mean_features, replicate), s)| DistanceRow {
            law_low,
            law_high,
            mean_features,
            replicate,
            median_loss: s.median,
            q025: s.q025,
            q975: s.q975,
        })
        .collect();
    Ok(StudyResult { rows, normalizer })
}

/// Median over replicates of the per-replicate median loss, keyed by cell.
pub fn cell_medians<R, K: PartialEq + Clone>(
    rows: &[R],
    key: impl Fn(&R) -> K,
    value: impl Fn(&R) -> f64,
) -> Vec<(K, f64)> {
    let mut keys: Vec<K> = Vec::new();
    for r in rows {
        let k = key(r);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|k| {
            let vals: Vec<f64> = rows.iter().filter(|r| key(r) == k).map(&value).collect();
            (k, median(&vals))
        })
        .collect()
}
