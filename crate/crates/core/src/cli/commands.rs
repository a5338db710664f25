use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::basis::{uniform_grid, ExposureBasis};
use crate::data::{load_dataset, validate, write_dataset, SchemaConfig};
use crate::diagnostics::Functional;
use crate::error::{Error, Result};
use crate::sampler::store::{read_draws, write_draws, DrawsManifest, MANIFEST_FILE};
use crate::sampler::{fit as fit_model, PosteriorDraws};
use crate::simgen::{
    cell_medians, generate, run_distance_study, run_effect_size_study, DistanceLaw, ScenarioConfig, HIGH,
};

use super::config::{config_hash, file_hash, RunConfig};
use super::output::{write_json, write_rows, write_text, Staging};
use super::report::{
    cluster_summary, cluster_curves, crosstab, default_functionals, partition_summary, rhat_table,
    write_coclustering, write_heatmap_order, write_mode_partition, write_traces, RhatRow,
};
use super::{DiagnoseArgs, Failure, FitArgs, SimulateArgs, SimulateKind, StudyArgs, SummarizeArgs};

pub const DRAWS_DIR: &str = "draws";

fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    value.ok_or_else(|| Error::Input(format!("missing --{flag} (or `{flag}` in the config file)")))
}

fn parse_functionals(config: &RunConfig, draws: &PosteriorDraws) -> Result<Vec<Functional>> {
    match &config.functionals {
        Some(names) => names.iter().map(|n| n.parse()).collect(),
        None => Ok(default_functionals(draws)),
    }
}

/// R̂ rows, or none when chains are too short to split.
fn rhat_rows(
    draws: &PosteriorDraws,
    basis: &ExposureBasis,
    functionals: &[Functional],
) -> Result<Vec<RhatRow>> {
    if draws.chains.iter().any(|c| c.len() < 4) {
        eprintln!("note: fewer than 4 retained draws per chain; R-hat not computed");
        return Ok(Vec::new());
    }
    rhat_table(draws, basis, functionals)
}

fn check_rhat(rows: &[RhatRow], config: &RunConfig) -> std::result::Result<(), Failure> {
    if !config.strict_rhat {
        return Ok(());
    }
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| !(r.rhat <= config.rhat_threshold))
        .map(|r| format!("{} = {}", r.functional, r.rhat))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Convergence(format!(
            "R-hat above {}: {}",
            config.rhat_threshold,
            bad.join(", ")
        )))
    }
}

pub fn fit(args: &FitArgs) -> std::result::Result<(), Failure> {
    let mut config = RunConfig::load(args.config.as_deref())?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(g) = args.grid_points {
        config.grid_points = g;
    }
    args.sampler.apply(&mut config.sampler);
    args.prior.apply(&mut config.prior);
    args.rhat.apply(&mut config);
    config.validate()?;

    let subjects = required(args.subjects.clone().or(config.subjects.clone()), "subjects")?;
    let distances = required(args.distances.clone().or(config.distances.clone()), "distances")?;
    let mut schema = match args.schema.clone().or(config.schema.clone()) {
        Some(path) => SchemaConfig::from_file(&path)?,
        None => SchemaConfig::default(),
    };
    if let Some(r) = args.radius {
        schema.radius = r;
    }
    let mut basis_settings = config.basis.unwrap_or(schema.basis);
    if args.basis.any() {
        args.basis.apply(&mut basis_settings);
    }
    schema.basis = basis_settings;

    let hash = config_hash(&json!({
        "command": "fit",
        "seed": config.seed,
        "grid_points": config.grid_points,
        "rhat_threshold": config.rhat_threshold,
        "functionals": config.functionals,
        "sampler": config.sampler,
        "prior": config.prior,
        "schema": schema,
        "subjects_sha256": file_hash(&subjects)?,
        "distances_sha256": file_hash(&distances)?,
    }));

    let (dataset, load_report) = load_dataset(&subjects, &distances, &schema)?;
    if load_report.dropped_beyond_radius > 0 {
        eprintln!(
            "note: dropped {} distances beyond radius {}",
            load_report.dropped_beyond_radius, schema.radius
        );
    }
    for w in validate(&dataset).warnings {
        eprintln!("warning: {w}");
    }
    let basis = ExposureBasis::new(basis_settings, schema.radius)?;
    let staging = Staging::new(&args.out, args.force)?;

    let draws = fit_model(&dataset, &basis, &config.prior, &config.sampler, config.seed)?;
    let manifest = DrawsManifest::new(&draws, schema.radius, basis_settings, &hash);
    write_draws(&staging.file(DRAWS_DIR), &draws, &manifest)?;

    let functionals = parse_functionals(&config, &draws)?;
    let rhat = rhat_rows(&draws, &basis, &functionals)?;
    write_rows(&staging.file("rhat.csv"), &hash, &rhat)?;

    if draws.total_draws() > 0 && draws.n_subjects() > 0 {
        let ids = &draws.subject_ids;
        let summary = partition_summary(&draws)?;
        write_coclustering(&staging.file("coclustering.csv"), &hash, ids, &summary.coclustering)?;
        write_mode_partition(&staging.file("mode_partition.csv"), &hash, ids, &summary.mode)?;
        write_heatmap_order(&staging.file("heatmap_order.csv"), &hash, ids, &summary.heatmap_order)?;
        let grid = uniform_grid(schema.radius, config.grid_points);
        let curves = cluster_curves(&draws, &basis, &summary.mode, &grid)?;
        write_rows(&staging.file("curves.csv"), &hash, &curves)?;
    }
    let out = staging.commit()?;
    println!("wrote {}", out.display());
    check_rhat(&rhat, &config)
}

fn draws_dir(path: &Path) -> PathBuf {
    let nested = path.join(DRAWS_DIR);
    if nested.join(MANIFEST_FILE).exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn load_fit(path: &Path) -> Result<(PosteriorDraws, DrawsManifest, ExposureBasis)> {
    let (draws, manifest) = read_draws(&draws_dir(path))?;
    if draws.total_draws() == 0 {
        return Err(Error::EmptyDraws);
    }
    let basis = ExposureBasis::new(manifest.basis, manifest.radius)?;
    Ok((draws, manifest, basis))
}

pub fn summarize(args: &SummarizeArgs) -> std::result::Result<(), Failure> {
    let mut config = RunConfig::load(args.config.as_deref())?;
    if let Some(g) = args.grid_points {
        config.grid_points = g;
    }
    config.validate()?;
    let (draws, manifest, basis) = load_fit(&args.draws)?;
    let covariates_sha = args.covariates.as_deref().map(file_hash).transpose()?;
    let hash = config_hash(&json!({
        "command": "summarize",
        "draws": manifest.config_hash,
        "grid_points": config.grid_points,
        "covariates_sha256": covariates_sha,
        "covariate_id": args.covariate_id,
    }));
    let staging = Staging::new(&args.out, args.force)?;
    let summary = partition_summary(&draws)?;
    let ids = &draws.subject_ids;
    write_rows(
        &staging.file("cluster_summary.csv"),
        &hash,
        &cluster_summary(&draws, &basis, &summary.mode)?,
    )?;
    write_mode_partition(&staging.file("mode_partition.csv"), &hash, ids, &summary.mode)?;
    write_heatmap_order(&staging.file("heatmap_order.csv"), &hash, ids, &summary.heatmap_order)?;
    let grid = uniform_grid(manifest.radius, config.grid_points);
    write_rows(
        &staging.file("curves.csv"),
        &hash,
        &cluster_curves(&draws, &basis, &summary.mode, &grid)?,
    )?;
    if let Some(path) = &args.covariates {
        let rows = crosstab(path, &args.covariate_id, ids, &summary.mode)?;
        write_rows(&staging.file("crosstab.csv"), &hash, &rows)?;
    }
    let out = staging.commit()?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn diagnose(args: &DiagnoseArgs) -> std::result::Result<(), Failure> {
    let mut config = RunConfig::load(args.config.as_deref())?;
    args.rhat.apply(&mut config);
    config.validate()?;
    let (draws, manifest, basis) = load_fit(&args.draws)?;
    let functionals = parse_functionals(&config, &draws)?;
    let names: Vec<String> = functionals.iter().map(|f| f.to_string()).collect();
    let hash = config_hash(&json!({
        "command": "diagnose",
        "draws": manifest.config_hash,
        "functionals": names,
        "rhat_threshold": config.rhat_threshold,
    }));
    let staging = Staging::new(&args.out, args.force)?;
    let rows = rhat_rows(&draws, &basis, &functionals)?;
    write_rows(&staging.file("rhat.csv"), &hash, &rows)?;
    write_traces(&staging.file("traces.csv"), &hash, &draws, &basis, &functionals)?;
    let out = staging.commit()?;
    println!("wrote {}", out.display());
    check_rhat(&rows, &config)
}

#[derive(Serialize)]
struct TruthRow<'a> {
    subject: &'a str,
    cluster: &'static str,
    z: f64,
}

#[derive(Serialize)]
struct ScenarioFile<'a> {
    seed: u64,
    scenario: &'a ScenarioConfig,
}

#[derive(Serialize)]
struct EffectCell {
    nu: f64,
    median_loss: f64,
    q025: f64,
    q975: f64,
}

#[derive(Serialize)]
struct DistanceCell {
    law_low: DistanceLaw,
    law_high: DistanceLaw,
    mean_features: usize,
    median_loss: f64,
    q025: f64,
    q975: f64,
}

fn study_config(args: &StudyArgs) -> Result<RunConfig> {
    let mut config = RunConfig::load(args.common.config.as_deref())?;
    if let Some(s) = args.common.seed {
        config.seed = s;
    }
    for scenario in [&mut config.effect_size.scenario, &mut config.distance.scenario] {
        args.common.scenario.apply(scenario);
    }
    for fit in [&mut config.effect_size.fit, &mut config.distance.fit] {
        args.sampler.apply(&mut fit.sampler);
    }
    let replicates = args.replicates.or(args.desk.then_some(10));
    if let Some(r) = replicates {
        config.effect_size.replicates = r;
        config.distance.replicates = r;
    }
    Ok(config)
}

pub fn simulate(args: &SimulateArgs) -> std::result::Result<(), Failure> {
    match &args.kind {
        SimulateKind::Generate(common) => {
            let mut config = RunConfig::load(common.config.as_deref())?;
            if let Some(s) = common.seed {
                config.seed = s;
            }
            common.scenario.apply(&mut config.scenario);
            config.scenario.validate()?;
            let hash = config_hash(&json!({
                "command": "simulate-generate",
                "seed": config.seed,
                "scenario": config.scenario,
            }));
            let staging = Staging::new(&common.out, common.force)?;
            let sim = generate(&config.scenario, config.seed)?;
            let mut subjects = Vec::new();
            let mut distances = Vec::new();
            let schema = write_dataset(&sim.dataset, &mut subjects, &mut distances, b',')?;
            let text = |bytes: Vec<u8>| String::from_utf8(bytes).expect("csv output is UTF-8");
            write_text(&staging.file("subjects.csv"), &hash, &text(subjects))?;
            write_text(&staging.file("distances.csv"), &hash, &text(distances))?;
            write_text(&staging.file("schema.toml"), &hash, &schema.to_toml_string())?;
            let truth: Vec<TruthRow> = sim
                .dataset
                .subjects()
                .iter()
                .zip(&sim.labels)
                .zip(&sim.z)
                .map(|((id, &k), &z)| TruthRow {
                    subject: id,
                    cluster: if k == HIGH { "high" } else { "low" },
                    z,
                })
                .collect();
            write_rows(&staging.file("truth.csv"), &hash, &truth)?;
            let scenario = toml::to_string(&ScenarioFile { seed: config.seed, scenario: &config.scenario })
                .map_err(|e| Error::Config(e.to_string()))?;
            write_text(&staging.file("scenario.toml"), &hash, &scenario)?;
            let out = staging.commit()?;
            println!("wrote {}", out.display());
        }
        SimulateKind::EffectSize(study) => {
            let config = study_config(study)?;
            let s = &config.effect_size;
            let hash = config_hash(&json!({
                "command": "simulate-effect-size",
                "seed": config.seed,
                "study": s,
            }));
            let staging = Staging::new(&study.common.out, study.common.force)?;
            let result = run_effect_size_study(s, config.seed)?;
            write_rows(&staging.file("effect_size.csv"), &hash, &result.rows)?;
            let key = |r: &crate::simgen::EffectSizeRow| r.nu.to_bits();
            let med = cell_medians(&result.rows, key, |r| r.median_loss);
            let lo = cell_medians(&result.rows, key, |r| r.q025);
            let hi = cell_medians(&result.rows, key, |r| r.q975);
            let cells: Vec<EffectCell> = med
                .iter()
                .zip(&lo)
                .zip(&hi)
                .map(|((m, l), h)| EffectCell {
                    nu: f64::from_bits(m.0),
                    median_loss: m.1,
                    q025: l.1,
                    q975: h.1,
                })
                .collect();
            write_rows(&staging.file("effect_size_cells.csv"), &hash, &cells)?;
            write_json(
                &staging.file("study.json"),
                &json!({ "config_hash": hash, "seed": config.seed, "normalizer": result.normalizer, "study": s }),
            )?;
            let out = staging.commit()?;
            println!("wrote {}", out.display());
        }
        SimulateKind::Distance(study) => {
            let config = study_config(study)?;
            let s = &config.distance;
            let hash = config_hash(&json!({
                "command": "simulate-distance",
                "seed": config.seed,
                "study": s,
            }));
            let staging = Staging::new(&study.common.out, study.common.force)?;
            let result = run_distance_study(s, config.seed)?;
            write_rows(&staging.file("distance.csv"), &hash, &result.rows)?;
            let key = |r: &crate::simgen::DistanceRow| (r.law_low, r.law_high, r.mean_features);
            let med = cell_medians(&result.rows, key, |r| r.median_loss);
            let lo = cell_medians(&result.rows, key, |r| r.q025);
            let hi = cell_medians(&result.rows, key, |r| r.q975);
            let cells: Vec<DistanceCell> = med
                .iter()
                .zip(&lo)
                .zip(&hi)
                .map(|((m, l), h)| DistanceCell {
                    law_low: m.0 .0,
                    law_high: m.0 .1,
                    mean_features: m.0 .2,
                    median_loss: m.1,
                    q025: l.1,
                    q975: h.1,
                })
                .collect();
            write_rows(&staging.file("distance_cells.csv"), &hash, &cells)?;
            write_json(
                &staging.file("study.json"),
                &json!({ "config_hash": hash, "seed": config.seed, "normalizer": result.normalizer, "study": s }),
            )?;
            let out = staging.commit()?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
