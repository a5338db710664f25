//! On-disk layout of posterior draws.
//!
//! ```text
//! manifest.json                 dimensions, seed, settings, config hash
//! chain<c>_scalars.csv          iteration, sigma2, alpha, n_occupied, gamma columns
//! chain<c>_labels.csv           iteration, one 1-based label column per subject
//! chain<c>_clusters.csv         iteration, cluster, weight, tau1, tau2, beta_1..beta_L
//! chain<c>_re.csv               iteration, subject, b_1..b_q          (q > 0)
//! chain<c>_re_cov.csv           iteration, s_r_c for the q×q matrix   (q > 0)
//! ```
//!
//! Every table starts with a `# config_hash=<hex>` comment line. Floats are
//! written in shortest round-trip form, so reading back is bit-exact.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::basis::BasisSettings;
use crate::error::{Error, Result};

use super::{ChainDraws, PosteriorDraws, PriorConfig, SamplerConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawsManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub radius: f64,
    pub basis: BasisSettings,
    pub sampler: SamplerConfig,
    pub prior: PriorConfig,
    pub n_subjects: usize,
    pub n_clusters: usize,
    pub n_coef: usize,
    pub p: usize,
    pub q: usize,
    pub retained_per_chain: Vec<usize>,
    pub subject_ids: Vec<String>,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
}

impl DrawsManifest {
    pub fn new(draws: &PosteriorDraws, radius: f64, basis: BasisSettings, config_hash: &str) -> Self {
        let first = draws.chains.first();
        DrawsManifest {
            format_version: FORMAT_VERSION,
            config_hash: config_hash.to_string(),
            seed: draws.seed,
            radius,
            basis,
            sampler: draws.sampler.clone(),
            prior: draws.prior.clone(),
            n_subjects: draws.n_subjects(),
            n_clusters: draws.sampler.n_clusters,
            n_coef: first.map_or(basis.n_basis, |c| c.n_coef),
            p: draws.x_names.len(),
            q: draws.z_names.len(),
            retained_per_chain: draws.chains.iter().map(ChainDraws::len).collect(),
            subject_ids: draws.subject_ids.clone(),
            x_names: draws.x_names.clone(),
            z_names: draws.z_names.clone(),
        }
    }
}

/// Creates a CSV writer whose file begins with the config-hash comment.
pub fn table_writer(path: &Path, config_hash: &str) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "# config_hash={config_hash}").map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(out))
}

pub fn finish(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn fmt(v: f64) -> String {
    v.to_string()
}

pub fn write_draws(dir: &Path, draws: &PosteriorDraws, manifest: &DrawsManifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash = &manifest.config_hash;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;

    for (c, chain) in draws.chains.iter().enumerate() {
        let path = dir.join(format!("chain{c}_scalars.csv"));
        let mut w = table_writer(&path, hash)?;
        let mut header = vec!["iteration".to_string(), "sigma2".into(), "alpha".into(), "n_occupied".into()];
        header.extend(draws.x_names.iter().map(|n| format!("gamma[{n}]")));
        w.write_record(&header)?;
        for m in 0..chain.len() {
            let mut rec = vec![
                m.to_string(),
                fmt(chain.sigma2[m]),
                fmt(chain.alpha[m]),
                chain.n_occupied(m).to_string(),
            ];
            rec.extend(chain.gamma(m).iter().map(|&v| fmt(v)));
            w.write_record(&rec)?;
        }
        finish(w, &path)?;

        let path = dir.join(format!("chain{c}_labels.csv"));
        let mut w = table_writer(&path, hash)?;
        let mut header = vec!["iteration".to_string()];
        header.extend(draws.subject_ids.iter().cloned());
        w.write_record(&header)?;
        for m in 0..chain.len() {
            let mut rec = vec![m.to_string()];
            rec.extend(chain.labels(m).iter().map(|k| (k + 1).to_string()));
            w.write_record(&rec)?;
        }
        finish(w, &path)?;

        let path = dir.join(format!("chain{c}_clusters.csv"));
        let mut w = table_writer(&path, hash)?;
        let mut header = vec![
            "iteration".to_string(),
            "cluster".into(),
            "weight".into(),
            "tau1".into(),
            "tau2".into(),
        ];
        header.extend((1..=chain.n_coef).map(|l| format!("beta_{l}")));
        w.write_record(&header)?;
        for m in 0..chain.len() {
            for k in 0..chain.n_clusters {
                let tau = chain.tau(m, k);
                let mut rec = vec![
                    m.to_string(),
                    (k + 1).to_string(),
                    fmt(chain.weights(m)[k]),
                    fmt(tau[0]),
                    fmt(tau[1]),
                ];
                rec.extend(chain.beta(m, k).iter().map(|&v| fmt(v)));
                w.write_record(&rec)?;
            }
        }
        finish(w, &path)?;

        if chain.q > 0 {
            let q = chain.q;
            let path = dir.join(format!("chain{c}_re.csv"));
            let mut w = table_writer(&path, hash)?;
            let mut header = vec!["iteration".to_string(), "subject".into()];
            header.extend((1..=q).map(|i| format!("b_{i}")));
            w.write_record(&header)?;
            for m in 0..chain.len() {
                for (i, id) in draws.subject_ids.iter().enumerate() {
                    let mut rec = vec![m.to_string(), id.clone()];
                    rec.extend(chain.b(m, i).iter().map(|&v| fmt(v)));
                    w.write_record(&rec)?;
                }
            }
            finish(w, &path)?;

            let path = dir.join(format!("chain{c}_re_cov.csv"));
            let mut w = table_writer(&path, hash)?;
            let mut header = vec!["iteration".to_string()];
            for col in 1..=q {
                for row in 1..=q {
                    header.push(format!("s_{row}_{col}"));
                }
            }
            w.write_record(&header)?;
            for m in 0..chain.len() {
                let mut rec = vec![m.to_string()];
                rec.extend(chain.sigma_re(m).iter().map(|&v| fmt(v)));
                w.write_record(&rec)?;
            }
            finish(w, &path)?;
        }
    }
    Ok(())
}

fn open_table(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

fn number<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse::<T>().ok())
        .ok_or_else(|| {
            Error::Input(format!(
                "{}: line {}: bad value in column {}",
                path.display(),
                rec.position().map_or(0, |p| p.line()),
                i + 1
            ))
        })
}

fn expect_rows(path: &Path, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Input(format!(
            "{}: expected {want} rows, found {got}",
            path.display()
        )));
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DrawsManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

pub fn read_draws(dir: &Path) -> Result<(PosteriorDraws, DrawsManifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Input(format!(
            "unsupported draws format version {}",
            manifest.format_version
        )));
    }
    let (n, k, l, p, q) = (
        manifest.n_subjects,
        manifest.n_clusters,
        manifest.n_coef,
        manifest.p,
        manifest.q,
    );
    let mut chains = Vec::new();
    for (c, &len) in manifest.retained_per_chain.iter().enumerate() {
        let mut chain = ChainDraws::new(n, k, l, p, q);

        let path = dir.join(format!("chain{c}_scalars.csv"));
        let mut rows = 0;
        for rec in open_table(&path)?.records() {
            let rec = rec?;
            chain.sigma2.push(number(&rec, 1, &path)?);
            chain.alpha.push(number(&rec, 2, &path)?);
            for i in 0..p {
                chain.gamma.push(number(&rec, 4 + i, &path)?);
            }
            rows += 1;
        }
        expect_rows(&path, rows, len)?;

        let path = dir.join(format!("chain{c}_labels.csv"));
        let mut rows = 0;
        for rec in open_table(&path)?.records() {
            let rec = rec?;
            for i in 0..n {
                let label: usize = number(&rec, 1 + i, &path)?;
                if label == 0 || label > k {
                    return Err(Error::Input(format!(
                        "{}: label {label} outside 1..={k}",
                        path.display()
                    )));
                }
                chain.labels.push(label - 1);
            }
            rows += 1;
        }
        expect_rows(&path, rows, len)?;

        let path = dir.join(format!("chain{c}_clusters.csv"));
        let mut rows = 0;
        for rec in open_table(&path)?.records() {
            let rec = rec?;
            chain.weights.push(number(&rec, 2, &path)?);
            chain.tau.push(number(&rec, 3, &path)?);
            chain.tau.push(number(&rec, 4, &path)?);
            for i in 0..l {
                chain.beta.push(number(&rec, 5 + i, &path)?);
            }
            rows += 1;
        }
        expect_rows(&path, rows, len * k)?;

        if q > 0 {
            let path = dir.join(format!("chain{c}_re.csv"));
            let mut rows = 0;
            for rec in open_table(&path)?.records() {
                let rec = rec?;
                for i in 0..q {
                    chain.b.push(number(&rec, 2 + i, &path)?);
                }
                rows += 1;
            }
            expect_rows(&path, rows, len * n)?;

            let path = dir.join(format!("chain{c}_re_cov.csv"));
            let mut rows = 0;
            for rec in open_table(&path)?.records() {
                let rec = rec?;
                for i in 0..q * q {
                    chain.sigma_re.push(number(&rec, 1 + i, &path)?);
                }
                rows += 1;
            }
            expect_rows(&path, rows, len)?;
        }
        chains.push(chain);
    }
    let draws = PosteriorDraws {
        chains,
        subject_ids: manifest.subject_ids.clone(),
        x_names: manifest.x_names.clone(),
        z_names: manifest.z_names.clone(),
        seed: manifest.seed,
        sampler: manifest.sampler.clone(),
        prior: manifest.prior.clone(),
    };
    Ok((draws, manifest))
}
