//! Acceptance suite. Runs each criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use stapdp::basis::{uniform_grid, BasisSettings, ExposureBasis};
use stapdp::cli::report::{default_functionals, partition_summary, rhat_table};
use stapdp::data::{Dataset, DistanceSet, ObservationRow, INTERCEPT_COLUMN, RANDOM_INTERCEPT_COLUMN};
use stapdp::partition::{assign_mode, binder_loss_labels, coclustering};
use stapdp::sampler::{fit, PosteriorDraws, PriorConfig, SamplerConfig};
use stapdp::simgen::{
    cell_medians, gen_distances, generate, median, run_distance_study, run_effect_size_study,
    DistanceLaw, DistanceStudy, EffectSizeStudy, LawShapes, ScenarioConfig, TrueCurves,
    BASE_LEVEL, HIGH, LOW, Z_EFFECT,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("effect-size trend", effect_size_trend),
        ("distance-law trends", distance_trends),
        ("cluster recovery", cluster_recovery),
        ("homogeneous limit", homogeneous_limit),
        ("prior reproduction", prior_reproduction),
        ("partition suite", partition_suite),
        ("longitudinal recovery", longitudinal_recovery),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.0}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.0}s] {detail}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1, 2

fn effect_size_trend() -> Outcome {
    let study = EffectSizeStudy::desk();
    let result = run_effect_size_study(&study, 2024).map_err(|e| e.to_string())?;
    let cells = cell_medians(&result.rows, |r| r.nu.to_bits(), |r| r.median_loss);
    let mut cells: Vec<(f64, f64)> = cells.into_iter().map(|(k, v)| (f64::from_bits(k), v)).collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let increasing_in_nu = cells.windows(2).all(|w| w[0].1 < w[1].1);
    let text: Vec<String> = cells.iter().map(|(nu, l)| format!("nu={nu}: {l:.4}")).collect();
    check(increasing_in_nu && cells.len() == 4, text.join(", "))
}

/// Median loss over the ladder must fall, except for at most one adjacent
/// rise between cells whose 95% bands overlap.
fn ladder_ok(cells: &[(f64, f64, f64)]) -> bool {
    let rises: Vec<usize> = (1..cells.len()).filter(|&i| cells[i].0 > cells[i - 1].0).collect();
    match rises.as_slice() {
        [] => true,
        [i] => {
            let (a, b) = (cells[*i - 1], cells[*i]);
            a.1 <= b.2 && b.1 <= a.2
        }
        _ => false,
    }
}

fn distance_trends() -> Outcome {
    let study = DistanceStudy::desk();
    let result = run_distance_study(&study, 2024).map_err(|e| e.to_string())?;
    let key = |r: &stapdp::simgen::DistanceRow| (r.law_low, r.law_high, r.mean_features);
    let med = cell_medians(&result.rows, key, |r| r.median_loss);
    let lo = cell_medians(&result.rows, key, |r| r.q025);
    let hi = cell_medians(&result.rows, key, |r| r.q975);
    let mut detail = String::new();
    let mut ladders_ok = true;
    for &low in &DistanceLaw::ALL {
        for &high in &DistanceLaw::ALL {
            let cells: Vec<(f64, f64, f64)> = study
                .ladder
                .iter()
                .map(|&m| {
                    let i = med.iter().position(|c| c.0 == (low, high, m)).unwrap();
                    (med[i].1, lo[i].1, hi[i].1)
                })
                .collect();
            let ok = ladder_ok(&cells);
            ladders_ok &= ok;
            if !ok {
                let meds: Vec<String> = cells.iter().map(|c| format!("{:.3}", c.0)).collect();
                let _ = write!(detail, "{}/{} not monotone [{}]; ", low.name(), high.name(), meds.join(" "));
            }
        }
    }
    let smallest = study.ladder[0];
    let at_smallest: Vec<((DistanceLaw, DistanceLaw), f64)> = med
        .iter()
        .filter(|c| c.0 .2 == smallest)
        .map(|c| ((c.0 .0, c.0 .1), c.1))
        .collect();
    let uu = at_smallest
        .iter()
        .find(|c| c.0 == (DistanceLaw::Uniform, DistanceLaw::Uniform))
        .unwrap()
        .1;
    let min_other = at_smallest
        .iter()
        .filter(|c| c.0 != (DistanceLaw::Uniform, DistanceLaw::Uniform))
        .map(|c| c.1)
        .fold(f64::INFINITY, f64::min);
    let uu_ok = uu <= min_other;
    let _ = write!(
        detail,
        "ladders monotone: {ladders_ok}; uniform/uniform at m={smallest}: {uu:.4} vs best other {min_other:.4}"
    );
    check(ladders_ok && uu_ok, detail)
}

// ---------------------------------------------------------------- 3

fn cluster_recovery() -> Outcome {
    let scenario = ScenarioConfig {
        n_subjects: 200,
        nu: 0.0,
        law_high: DistanceLaw::Uniform,
        law_low: DistanceLaw::Uniform,
        mean_features: 25,
        count_halfwidth: Some(10),
        ..ScenarioConfig::default()
    };
    let sim = generate(&scenario, 31).map_err(|e| e.to_string())?;
    let basis = ExposureBasis::new(BasisSettings::default(), scenario.radius).unwrap();
    let draws = fit(
        &sim.dataset,
        &basis,
        &PriorConfig::default(),
        &SamplerConfig::default(),
        32,
    )
    .map_err(|e| e.to_string())?;
    let (_, mode) = assign_mode(&draws.label_draws()).map_err(|e| e.to_string())?;
    let mode = mode.labels().to_vec();
    let n = sim.labels.len();

    let loss = binder_loss_labels(&sim.labels, &mode).unwrap();
    let singletons: Vec<usize> = (0..n).collect();
    let baseline = binder_loss_labels(&sim.labels, &singletons).unwrap();

    // Plug-in Bayes classifier with the true curves, coefficients and noise.
    let curves = scenario.curves();
    let oracle: Vec<usize> = sim
        .dataset
        .rows()
        .iter()
        .map(|row| {
            let base = BASE_LEVEL + Z_EFFECT * row.x[1];
            let d = row.distances.distances();
            let rh = row.y - base - curves.exposure(HIGH, d);
            let rl = row.y - base - curves.exposure(LOW, d);
            if rh * rh <= rl * rl {
                HIGH
            } else {
                LOW
            }
        })
        .collect();
    let agree = majority_agreement(&mode, &oracle);
    let ratio = loss as f64 / baseline as f64;
    check(
        ratio <= 0.05 && agree >= 0.9,
        format!(
            "Binder {loss} vs singleton {baseline} (ratio {ratio:.4}); oracle agreement {:.3}; mode blocks {}",
            agree,
            mode.iter().max().map_or(0, |m| m + 1)
        ),
    )
}

/// Share of subjects whose oracle class equals the majority oracle class
/// of their estimated cluster.
fn majority_agreement(estimate: &[usize], oracle: &[usize]) -> f64 {
    let blocks = estimate.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![[0usize; 2]; blocks];
    for (&e, &o) in estimate.iter().zip(oracle) {
        counts[e][o] += 1;
    }
    let hits: usize = counts.iter().map(|c| c[0].max(c[1])).sum();
    hits as f64 / estimate.len() as f64
}

// ---------------------------------------------------------------- 4

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|j| solve(a.to_vec(), (0..n).map(|i| (i == j) as u8 as f64).collect()))
        .collect();
    (0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect()
}

/// Second-difference penalty on `n` coefficients, built entry by entry.
fn second_difference_penalty(n: usize) -> Vec<Vec<f64>> {
    let mut s = vec![vec![0.0; n]; n];
    for r in 0..n - 2 {
        let row = [(r, 1.0), (r + 1, -2.0), (r + 2, 1.0)];
        for &(i, a) in &row {
            for &(j, b) in &row {
                s[i][j] += a * b;
            }
        }
    }
    s
}

/// Projection onto span{1, l}, the null space of the second-difference
/// penalty.
fn linear_projection(n: usize) -> Vec<Vec<f64>> {
    let basis: Vec<Vec<f64>> = vec![vec![1.0; n], (0..n).map(|l| l as f64).collect()];
    let gram: Vec<Vec<f64>> = (0..2)
        .map(|a| (0..2).map(|b| (0..n).map(|l| basis[a][l] * basis[b][l]).sum()).collect())
        .collect();
    let g = invert(&gram);
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let mut v = 0.0;
                    for a in 0..2 {
                        for b in 0..2 {
                            v += basis[a][i] * g[a][b] * basis[b][j];
                        }
                    }
                    v
                })
                .collect()
        })
        .collect()
}

fn penalty_precision(n: usize, tau1: f64, tau2: f64) -> Vec<Vec<f64>> {
    let s = second_difference_penalty(n);
    let p = linear_projection(n);
    (0..n)
        .map(|i| (0..n).map(|j| tau1 * s[i][j] + tau2 * p[i][j]).collect())
        .collect()
}

fn homogeneous_limit() -> Outcome {
    let scenario = ScenarioConfig {
        n_subjects: 200,
        p_high: 1.0,
        law_high: DistanceLaw::Uniform,
        law_low: DistanceLaw::Uniform,
        ..ScenarioConfig::default()
    };
    let sim = generate(&scenario, 41).map_err(|e| e.to_string())?;
    let basis = ExposureBasis::new(BasisSettings::default(), scenario.radius).unwrap();
    let sampler = SamplerConfig {
        n_clusters: 1,
        ..SamplerConfig::default()
    };
    let prior = PriorConfig::default();
    let draws = fit(&sim.dataset, &basis, &prior, &sampler, 42).map_err(|e| e.to_string())?;
    let chain = &draws.chains[0];
    let m_total = chain.len();
    let grid = uniform_grid(scenario.radius, 100);

    let mut curves = vec![Vec::with_capacity(m_total); grid.len()];
    for m in 0..m_total {
        let curve = basis.curve_on_grid(chain.beta(m, 0), &grid).unwrap();
        for (g, (_, f)) in curve.into_iter().enumerate() {
            curves[g].push(f);
        }
    }
    let tau1 = median(&(0..m_total).map(|m| chain.tau(m, 0)[0]).collect::<Vec<_>>());
    let tau2 = median(&(0..m_total).map(|m| chain.tau(m, 0)[1]).collect::<Vec<_>>());
    let sigma2 = median(&chain.sigma2);

    // Generalized ridge in the original B-spline coordinates:
    // [X Φ]ᵀW[X Φ] + blockdiag(σ²/v I, τ₁S + τ₂P) against [X Φ]ᵀWy.
    let spline = basis.spline();
    let l = spline.n_basis();
    let rows = sim.dataset.rows();
    let p = rows[0].x.len();
    let design: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let mut v = r.x.clone();
            v.extend(spline.exposure_row(r.distances.distances()).unwrap());
            v
        })
        .collect();
    let dim = p + l;
    let mut a = vec![vec![0.0; dim]; dim];
    let mut rhs = vec![0.0; dim];
    for (row, d) in rows.iter().zip(&design) {
        for i in 0..dim {
            rhs[i] += row.weight * d[i] * row.y;
            for j in 0..dim {
                a[i][j] += row.weight * d[i] * d[j];
            }
        }
    }
    let ys: Vec<f64> = rows.iter().map(|r| r.y).collect();
    let mean_y = ys.iter().sum::<f64>() / ys.len() as f64;
    let var_y = ys.iter().map(|y| (y - mean_y).powi(2)).sum::<f64>() / (ys.len() - 1) as f64;
    let v = prior.gamma_prior_scale * var_y;
    for i in 0..p {
        a[i][i] += sigma2 / v;
    }
    let q = penalty_precision(l, tau1, tau2);
    for i in 0..l {
        for j in 0..l {
            a[p + i][p + j] += q[i][j];
        }
    }
    let coef = solve(a, rhs);
    let ridge = spline.curve_on_grid(&coef[p..], &grid).unwrap();

    let mut worst = 0.0f64;
    for (g, values) in curves.iter().enumerate() {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let sd = (values.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt();
        worst = worst.max((mean - ridge[g].1).abs() / sd);
    }
    check(
        worst < 2.0,
        format!("max |posterior mean - ridge| / posterior sd over {} grid points: {worst:.3}", grid.len()),
    )
}

// ---------------------------------------------------------------- 5

/// Asymptotic Kolmogorov p-value for the one-sample KS statistic `d`.
fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// KS statistic against Exp(1), which is Gamma(1, 1).
fn ks_exp1(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = 1.0 - (-x).exp();
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn empty_dataset() -> Dataset {
    Dataset::new(vec![], vec![], vec![], 1.0).unwrap()
}

fn prior_reproduction() -> Outcome {
    let basis = ExposureBasis::new(BasisSettings::default(), 1.0).unwrap();
    let prior = PriorConfig::default();
    // α mixes slowly against 49 sticks, so thin hard; 10 chains × 500 draws.
    let sampler = SamplerConfig {
        chains: 10,
        burn_in: 2000,
        retained: 500,
        thin: 200,
        ..SamplerConfig::default()
    };
    let draws = fit(&empty_dataset(), &basis, &prior, &sampler, 51).map_err(|e| e.to_string())?;
    let collect = |f: &dyn Fn(&stapdp::sampler::ChainDraws, usize) -> f64| -> Vec<f64> {
        draws
            .chains
            .iter()
            .flat_map(|c| (0..c.len()).map(move |m| f(c, m)))
            .collect()
    };
    let marginals = [
        ("alpha", collect(&|c, m| c.alpha[m])),
        ("1/sigma2", collect(&|c, m| 1.0 / c.sigma2[m])),
        ("tau1", collect(&|c, m| c.tau(m, 0)[0])),
        ("tau2", collect(&|c, m| c.tau(m, 0)[1])),
    ];
    let mut detail = String::new();
    let mut ok = true;
    for (name, values) in &marginals {
        let d = ks_exp1(values);
        let pv = ks_pvalue(d, values.len());
        ok &= pv > 0.01 && values.len() == 5000;
        let _ = write!(detail, "{name} KS p={pv:.3}; ");
    }

    // β prior covariance: 20000 sweeps × 50 clusters of prior draws, each
    // standardized by the (σ², τ) it was drawn under and rescaled to a
    // fixed target. τ and σ² are updated after β within a sweep, so those
    // come from the previous stored state.
    let sampler = SamplerConfig {
        chains: 1,
        burn_in: 0,
        retained: 20_001,
        thin: 1,
        ..SamplerConfig::default()
    };
    let draws = fit(&empty_dataset(), &basis, &prior, &sampler, 52).map_err(|e| e.to_string())?;
    let chain = &draws.chains[0];
    let (sigma2_t, tau_t): (f64, [f64; 2]) = (1.5, [2.0, 0.5]);
    let pen = basis.penalty();
    let (l, r) = (basis.n_coef(), basis.rank());
    let mut cov = vec![vec![0.0; l]; l];
    let mut count = 0usize;
    for m in 1..chain.len() {
        for k in 0..chain.n_clusters {
            let tau = chain.tau(m - 1, k);
            let theta = nalgebra::DVector::from_iterator(
                l,
                chain.beta(m, k).iter().enumerate().map(|(i, &b)| {
                    let t = if i < r { (tau[0], tau_t[0]) } else { (tau[1], tau_t[1]) };
                    b / (chain.sigma2[m - 1] / t.0).sqrt() * (sigma2_t / t.1).sqrt()
                }),
            );
            let beta = pen.untransform(&theta);
            for i in 0..l {
                for j in 0..l {
                    cov[i][j] += beta[i] * beta[j];
                }
            }
            count += 1;
        }
    }
    let target: Vec<Vec<f64>> = invert(&penalty_precision(l, tau_t[0], tau_t[1]))
        .into_iter()
        .map(|row| row.into_iter().map(|v| v * sigma2_t).collect())
        .collect();
    let (mut diff, mut norm) = (0.0, 0.0);
    for i in 0..l {
        for j in 0..l {
            let c = cov[i][j] / count as f64;
            diff += (c - target[i][j]).powi(2);
            norm += target[i][j].powi(2);
        }
    }
    let rel = (diff / norm).sqrt();
    ok &= rel < 0.05 && count >= 1_000_000;
    let _ = write!(detail, "beta covariance Frobenius rel. error {rel:.4} over {count} draws");
    check(ok, detail)
}

// ---------------------------------------------------------------- 6

/// Binder loss straight from its pair definition.
fn pair_loss(a: &[usize], b: &[usize]) -> u64 {
    let mut loss = 0;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            if (a[i] == a[j]) != (b[i] == b[j]) {
                loss += 1;
            }
        }
    }
    loss
}

/// Every set partition of `n` items as restricted growth strings.
fn all_partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0; n];
    fn rec(i: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == cur.len() {
            out.push(cur.clone());
            return;
        }
        for v in 0..=max + 1 {
            cur[i] = v;
            rec(i + 1, max.max(v), cur, out);
        }
    }
    if n > 0 {
        rec(1, 0, &mut cur, &mut out);
    }
    out
}

fn partition_suite() -> Outcome {
    let mut problems = Vec::new();
    let exact = [
        (vec![0, 0, 1], vec![0, 0, 1], 0),
        (vec![0, 0, 1], vec![0, 1, 1], 2),
        (vec![0, 0, 0, 0], vec![0, 1, 2, 3], 6),
    ];
    for (a, b, want) in &exact {
        let got = binder_loss_labels(a, b).unwrap();
        if got != *want {
            problems.push(format!("loss({a:?}, {b:?}) = {got}, want {want}"));
        }
    }

    // Ten draws over six subjects.
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let draws: Vec<Vec<usize>> = (0..10)
        .map(|_| {
            let base = [0, 0, 0, 1, 1, 2];
            base.iter()
                .map(|&k| if rng.random_bool(0.25) { rng.random_range(0..3) } else { k })
                .collect()
        })
        .collect();
    let refs: Vec<&[usize]> = draws.iter().map(Vec::as_slice).collect();
    let p = coclustering(&refs).unwrap();
    for i in 0..6 {
        if p.get(i, i) != 1.0 {
            problems.push(format!("P[{i}][{i}] = {}", p.get(i, i)));
        }
        for j in 0..6 {
            if p.get(i, j) != p.get(j, i) {
                problems.push(format!("P not symmetric at ({i}, {j})"));
            }
            let share = draws.iter().filter(|d| d[i] == d[j]).count() as f64 / 10.0;
            if (p.get(i, j) - share).abs() > 1e-12 {
                problems.push(format!("P[{i}][{j}] = {} vs {share}", p.get(i, j)));
            }
        }
    }

    // Expected loss of every partition of six items against the ten draws;
    // the mode must be the best sampled one.
    let expected = |c: &[usize]| draws.iter().map(|d| pair_loss(c, d)).sum::<u64>();
    let best_sampled = draws.iter().map(|d| expected(d)).min().unwrap();
    let best_overall = all_partitions(6).iter().map(|c| expected(c)).min().unwrap();
    let (index, mode) = assign_mode(&refs).unwrap();
    let mode_loss = expected(mode.labels());
    let first_best = draws.iter().position(|d| expected(d) == best_sampled).unwrap();
    if mode_loss != best_sampled || index != first_best {
        problems.push(format!(
            "mode draw {index} has loss {mode_loss}; best sampled draw {first_best} has {best_sampled}"
        ));
    }
    let detail = format!(
        "mode = draw {index}, expected loss {} (best over all 203 partitions {})",
        mode_loss as f64 / 10.0,
        best_overall as f64 / 10.0
    );
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(problems.join("; "))
    }
}

// ---------------------------------------------------------------- 7

struct Longitudinal {
    dataset: Dataset,
    sigma2: f64,
    sigma_re: [f64; 2],
}

/// 300 subjects × 4 occasions, two exposure clusters, random intercept
/// and slope on occasion, observation weights in {0.5, 1, 2}.
fn longitudinal_fixture(seed: u64) -> Longitudinal {
    let (n, occasions, sigma2, sigma_re): (usize, usize, f64, [f64; 2]) = (300, 4, 1.0, [1.0, 0.25]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let curves = TrueCurves { nu: 0.0, radius: 1.0 };
    let shapes = LawShapes::default();
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::new();
    for i in 0..n {
        let id = format!("p{i:03}");
        let k = if rng.random_bool(0.5) { HIGH } else { LOW };
        let z = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let b0 = sigma_re[0].sqrt() * std.sample(&mut rng);
        let b1 = sigma_re[1].sqrt() * std.sample(&mut rng);
        for t in 0..occasions {
            let t = t as f64;
            let count = rng.random_range(10..=20);
            let d: DistanceSet = gen_distances(DistanceLaw::Uniform, &shapes, count, 1.0, &mut rng).unwrap();
            let w = [0.5, 1.0, 2.0][rng.random_range(0..3)];
            let noise = (sigma2 / w).sqrt() * std.sample(&mut rng);
            let y = BASE_LEVEL + Z_EFFECT * z + curves.exposure(k, d.distances()) + b0 + b1 * t + noise;
            rows.push(ObservationRow {
                subject_id: id.clone(),
                occasion_id: format!("{t}"),
                y,
                x: vec![1.0, z],
                z: vec![1.0, t],
                weight: w,
                distances: d,
            });
        }
    }
    let dataset = Dataset::new(
        rows,
        vec![INTERCEPT_COLUMN.into(), "Z".into()],
        vec![RANDOM_INTERCEPT_COLUMN.into(), "t".into()],
        1.0,
    )
    .unwrap();
    Longitudinal { dataset, sigma2, sigma_re }
}

fn longitudinal_recovery() -> Outcome {
    let fx = longitudinal_fixture(71);
    let basis = ExposureBasis::new(BasisSettings::default(), 1.0).unwrap();
    let sampler = SamplerConfig {
        chains: 4,
        ..SamplerConfig::default()
    };
    let draws: PosteriorDraws =
        fit(&fx.dataset, &basis, &PriorConfig::default(), &sampler, 72).map_err(|e| e.to_string())?;
    let pooled = |f: &dyn Fn(&stapdp::sampler::ChainDraws, usize) -> f64| -> f64 {
        let v: Vec<f64> = draws
            .chains
            .iter()
            .flat_map(|c| (0..c.len()).map(move |m| f(c, m)))
            .collect();
        median(&v)
    };
    let s2 = pooled(&|c, m| c.sigma2[m]);
    let s00 = pooled(&|c, m| c.sigma_re(m)[0]);
    let s11 = pooled(&|c, m| c.sigma_re(m)[3]);
    let rel = |est: f64, truth: f64| (est - truth).abs() / truth;
    let recovery_ok = rel(s2, fx.sigma2) <= 0.2
        && rel(s00, fx.sigma_re[0]) <= 0.2
        && rel(s11, fx.sigma_re[1]) <= 0.2;

    let rhat = rhat_table(&draws, &basis, &default_functionals(&draws)).map_err(|e| e.to_string())?;
    let rhat_ok = rhat.len() == 7 && rhat.iter().all(|r| r.rhat < 1.05);
    let rhat_text: Vec<String> = rhat.iter().map(|r| format!("{}={:.3}", r.functional, r.rhat)).collect();
    let summary = partition_summary(&draws).map_err(|e| e.to_string())?;
    check(
        recovery_ok && rhat_ok,
        format!(
            "sigma2 {s2:.3} (1), Sigma11 {s00:.3} (1), Sigma22 {s11:.3} (0.25); mode blocks {}; R-hat {}",
            summary.mode.n_blocks(),
            rhat_text.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 8

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let name = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((name, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let run = |args: &[&str]| {
        let mut argv = vec!["stapdp".to_string()];
        argv.extend(args.iter().map(|s| s.to_string()));
        stapdp::cli::run(argv)
    };
    let sim = path("sim");
    if run(&["simulate", "generate", "--out", &sim, "--seed", "81", "--n-subjects", "100", "--nu", "0.25"]) != 0 {
        return Err("simulate failed".into());
    }
    let fit_into = |out: &str| {
        run(&[
            "fit",
            "--subjects",
            &format!("{sim}/subjects.csv"),
            "--distances",
            &format!("{sim}/distances.csv"),
            "--schema",
            &format!("{sim}/schema.toml"),
            "--out",
            out,
            "--seed",
            "82",
            "--burn-in",
            "500",
            "--retained",
            "500",
        ])
    };
    let (a, b) = (path("a"), path("b"));
    if fit_into(&a) != 0 || fit_into(&b) != 0 {
        return Err("fit failed".into());
    }
    let (ta, tb) = (tree_bytes(Path::new(&a)), tree_bytes(Path::new(&b)));
    let bytes: usize = ta.iter().map(|f| f.1.len()).sum();
    check(ta == tb, format!("{} files, {bytes} bytes compared", ta.len()))
}
