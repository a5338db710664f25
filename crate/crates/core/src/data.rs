//! Outcomes, covariates, weights and per-occasion distance sets.
//!
//! Subjects are stored in order of first appearance. [`load_dataset`]
//! canonicalizes row order before building the dataset, so permuting the
//! input files never changes what the sampler sees.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::basis::BasisSettings;
use crate::error::{Error, Result};

/// Name given to the constant column added when `intercept = true`.
pub const INTERCEPT_COLUMN: &str = "(intercept)";
pub const RANDOM_INTERCEPT_COLUMN: &str = "(random intercept)";

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceSet {
    distances: Vec<f64>,
    radius: f64,
}

impl DistanceSet {
    pub fn new(distances: Vec<f64>, radius: f64) -> Result<Self> {
        for &d in &distances {
            if !(d >= 0.0 && d <= radius) {
                return Err(Error::OutOfDomain {
                    distance: d,
                    radius,
                });
            }
        }
        Ok(DistanceSet { distances, radius })
    }

    pub fn empty(radius: f64) -> Self {
        DistanceSet {
            distances: Vec::new(),
            radius,
        }
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRow {
    pub subject_id: String,
    pub occasion_id: String,
    pub y: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    /// Precision multiplier: the row's residual variance is `σ² / weight`.
    pub weight: f64,
    pub distances: DistanceSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    rows: Vec<ObservationRow>,
    subjects: Vec<String>,
    subject_rows: Vec<Vec<usize>>,
    subject_index: HashMap<String, usize>,
    x_names: Vec<String>,
    z_names: Vec<String>,
    radius: f64,
}

impl Dataset {
    pub fn new(
        rows: Vec<ObservationRow>,
        x_names: Vec<String>,
        z_names: Vec<String>,
        radius: f64,
    ) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Input(format!("radius must be positive, got {radius}")));
        }
        let (p, q) = (x_names.len(), z_names.len());
        let mut subjects = Vec::new();
        let mut subject_rows: Vec<Vec<usize>> = Vec::new();
        let mut subject_index = HashMap::new();
        for (r, row) in rows.iter().enumerate() {
            let here = || format!("subject {} occasion {}", row.subject_id, row.occasion_id);
            if !row.y.is_finite() {
                return Err(Error::Input(format!("{}: non-finite outcome", here())));
            }
            if !(row.weight > 0.0 && row.weight.is_finite()) {
                return Err(Error::Input(format!(
                    "{}: weight must be positive, got {}",
                    here(),
                    row.weight
                )));
            }
            if row.x.len() != p || row.z.len() != q {
                return Err(Error::Input(format!(
                    "{}: expected {p} fixed and {q} random covariates, got {} and {}",
                    here(),
                    row.x.len(),
                    row.z.len()
                )));
            }
            if row.x.iter().chain(&row.z).any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("{}: non-finite covariate", here())));
            }
            if row.distances.radius() != radius {
                return Err(Error::Input(format!(
                    "{}: distance set radius {} differs from dataset radius {radius}",
                    here(),
                    row.distances.radius()
                )));
            }
            let s = *subject_index.entry(row.subject_id.clone()).or_insert_with(|| {
                subjects.push(row.subject_id.clone());
                subject_rows.push(Vec::new());
                subjects.len() - 1
            });
            subject_rows[s].push(r);
        }
        Ok(Dataset {
            rows,
            subjects,
            subject_rows,
            subject_index,
            x_names,
            z_names,
            radius,
        })
    }

    pub fn rows(&self) -> &[ObservationRow] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    /// Row indices belonging to the `s`-th subject.
    pub fn subject_rows(&self, s: usize) -> &[usize] {
        &self.subject_rows[s]
    }

    pub fn subject_position(&self, id: &str) -> Option<usize> {
        self.subject_index.get(id).copied()
    }

    pub fn p(&self) -> usize {
        self.x_names.len()
    }

    pub fn q(&self) -> usize {
        self.z_names.len()
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

/// Column layout of the input files plus exposure and basis settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaConfig {
    pub radius: f64,
    pub delimiter: char,
    pub id_column: String,
    pub occasion_column: String,
    pub outcome_column: String,
    /// Absent column ⇒ every weight is 1.
    pub weight_column: Option<String>,
    /// `None` ⇒ every column whose name starts with `x_`.
    pub x_columns: Option<Vec<String>>,
    /// `None` ⇒ every column whose name starts with `z_`.
    pub z_columns: Option<Vec<String>>,
    pub intercept: bool,
    pub random_intercept: bool,
    pub distance_column: String,
    pub basis: BasisSettings,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        SchemaConfig {
            radius: 1.0,
            delimiter: ',',
            id_column: "id".into(),
            occasion_column: "occasion".into(),
            outcome_column: "y".into(),
            weight_column: Some("weight".into()),
            x_columns: None,
            z_columns: None,
            intercept: true,
            random_intercept: false,
            distance_column: "distance".into(),
            basis: BasisSettings::default(),
        }
    }
}

impl SchemaConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    fn delimiter_byte(&self) -> Result<u8> {
        if self.delimiter.is_ascii() {
            Ok(self.delimiter as u8)
        } else {
            Err(Error::Config(format!(
                "delimiter must be ASCII, got {:?}",
                self.delimiter
            )))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    /// Distances beyond the radius that were discarded.
    pub dropped_beyond_radius: usize,
    pub n_distances: usize,
}

fn reader<R: Read>(source: R, delimiter: u8) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(source)
}

fn column(headers: &csv::StringRecord, name: &str, file: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Input(format!("{file}: missing required column `{name}`")))
}

fn parse_number(text: &str, what: &str, line: u64) -> Result<f64> {
    text.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Input(format!("line {line}: non-numeric {what} `{text}`")))
}

/// Reads and joins the subjects and distances tables.
pub fn load_dataset_from_readers<A: Read, B: Read>(
    subjects: A,
    distances: B,
    schema: &SchemaConfig,
) -> Result<(Dataset, LoadReport)> {
    let delimiter = schema.delimiter_byte()?;
    let radius = schema.radius;
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!("radius must be positive, got {radius}")));
    }

    let mut subj = reader(subjects, delimiter);
    let headers = subj.headers()?.clone();
    let id_col = column(&headers, &schema.id_column, "subjects")?;
    let occ_col = column(&headers, &schema.occasion_column, "subjects")?;
    let y_col = column(&headers, &schema.outcome_column, "subjects")?;
    let w_col = match &schema.weight_column {
        Some(name) => headers.iter().position(|h| h == name),
        None => None,
    };
    let select = |explicit: &Option<Vec<String>>, prefix: &str| -> Result<Vec<(String, usize)>> {
        match explicit {
            Some(names) => names
                .iter()
                .map(|n| Ok((n.clone(), column(&headers, n, "subjects")?)))
                .collect(),
            None => Ok(headers
                .iter()
                .enumerate()
                .filter(|(_, h)| h.starts_with(prefix))
                .map(|(i, h)| (h.to_string(), i))
                .collect()),
        }
    };
    let x_cols = select(&schema.x_columns, "x_")?;
    let z_cols = select(&schema.z_columns, "z_")?;

    let mut x_names: Vec<String> = Vec::new();
    if schema.intercept {
        x_names.push(INTERCEPT_COLUMN.to_string());
    }
    x_names.extend(x_cols.iter().map(|(n, _)| n.clone()));
    let mut z_names: Vec<String> = Vec::new();
    if schema.random_intercept {
        z_names.push(RANDOM_INTERCEPT_COLUMN.to_string());
    }
    z_names.extend(z_cols.iter().map(|(n, _)| n.clone()));

    let mut rows = Vec::new();
    let mut keys: HashMap<(String, String), Vec<usize>> = HashMap::new();
    for record in subj.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let y = parse_number(field(y_col), "outcome", line)?;
        let weight = match w_col {
            Some(c) => parse_number(field(c), "weight", line)?,
            None => 1.0,
        };
        if weight <= 0.0 {
            return Err(Error::Input(format!(
                "line {line}: weight must be positive, got {weight}"
            )));
        }
        let mut x = Vec::with_capacity(x_names.len());
        if schema.intercept {
            x.push(1.0);
        }
        for (name, c) in &x_cols {
            x.push(parse_number(field(*c), name, line)?);
        }
        let mut z = Vec::with_capacity(z_names.len());
        if schema.random_intercept {
            z.push(1.0);
        }
        for (name, c) in &z_cols {
            z.push(parse_number(field(*c), name, line)?);
        }
        let key = (field(id_col).to_string(), field(occ_col).to_string());
        keys.entry(key.clone()).or_default().push(rows.len());
        rows.push((key, y, weight, x, z));
    }

    let mut dist = reader(distances, delimiter);
    let dheaders = dist.headers()?.clone();
    let did = column(&dheaders, &schema.id_column, "distances")?;
    let docc = column(&dheaders, &schema.occasion_column, "distances")?;
    let dval = column(&dheaders, &schema.distance_column, "distances")?;
    let mut per_key: HashMap<(String, String), Vec<f64>> = HashMap::new();
    let mut report = LoadReport::default();
    let mut unmatched: BTreeMap<(String, String), usize> = BTreeMap::new();
    for record in dist.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let key = (
            record.get(did).unwrap_or("").to_string(),
            record.get(docc).unwrap_or("").to_string(),
        );
        let d = parse_number(record.get(dval).unwrap_or(""), "distance", line)?;
        if d < 0.0 {
            return Err(Error::Input(format!("line {line}: negative distance {d}")));
        }
        if !keys.contains_key(&key) {
            *unmatched.entry(key).or_default() += 1;
            continue;
        }
        if d > radius {
            report.dropped_beyond_radius += 1;
            continue;
        }
        report.n_distances += 1;
        per_key.entry(key).or_default().push(d);
    }
    if !unmatched.is_empty() {
        let listed: Vec<String> = unmatched
            .iter()
            .take(20)
            .map(|((id, occ), n)| format!("{id}/{occ} ({n} rows)"))
            .collect();
        return Err(Error::Input(format!(
            "{} distance keys have no matching subject row: {}{}",
            unmatched.len(),
            listed.join(", "),
            if unmatched.len() > 20 { ", ..." } else { "" }
        )));
    }

    let mut observations = Vec::with_capacity(rows.len());
    for ((subject_id, occasion_id), y, weight, x, z) in rows {
        let mut ds = per_key
            .get(&(subject_id.clone(), occasion_id.clone()))
            .cloned()
            .unwrap_or_default();
        ds.sort_by(f64::total_cmp);
        observations.push(ObservationRow {
            subject_id,
            occasion_id,
            y,
            x,
            z,
            weight,
            distances: DistanceSet::new(ds, radius)?,
        });
    }
    observations.sort_by(canonical_order);
    let dataset = Dataset::new(observations, x_names, z_names, radius)?;
    Ok((dataset, report))
}

pub fn load_dataset(
    subjects: &Path,
    distances: &Path,
    schema: &SchemaConfig,
) -> Result<(Dataset, LoadReport)> {
    let a = std::fs::File::open(subjects).map_err(|e| Error::io(subjects, e))?;
    let b = std::fs::File::open(distances).map_err(|e| Error::io(distances, e))?;
    load_dataset_from_readers(a, b, schema)
}

/// Integer-aware comparison so `s2 < s10`.
fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

fn canonical_order(a: &ObservationRow, b: &ObservationRow) -> Ordering {
    let floats = |r: &ObservationRow| -> Vec<f64> {
        let mut v = vec![r.y, r.weight];
        v.extend(&r.x);
        v.extend(&r.z);
        v.extend(r.distances.distances());
        v
    };
    natural_cmp(&a.subject_id, &b.subject_id)
        .then_with(|| natural_cmp(&a.occasion_id, &b.occasion_id))
        .then_with(|| {
            let (fa, fb) = (floats(a), floats(b));
            fa.iter()
                .zip(&fb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or_else(|| fa.len().cmp(&fb.len()))
        })
}

/// Writes the dataset as subjects and distances tables, plus the schema
/// that reloads them unchanged.
pub fn write_dataset<A: Write, B: Write>(
    dataset: &Dataset,
    subjects: A,
    distances: B,
    delimiter: u8,
) -> Result<SchemaConfig> {
    let column_name = |name: &str, prefix: &str| -> String {
        if name == INTERCEPT_COLUMN {
            format!("{prefix}intercept")
        } else if name == RANDOM_INTERCEPT_COLUMN {
            format!("{prefix}random_intercept")
        } else {
            name.to_string()
        }
    };
    let x_cols: Vec<String> = dataset.x_names().iter().map(|n| column_name(n, "x_")).collect();
    let z_cols: Vec<String> = dataset.z_names().iter().map(|n| column_name(n, "z_")).collect();

    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(subjects);
    let mut header = vec!["id".to_string(), "occasion".into(), "y".into(), "weight".into()];
    header.extend(x_cols.iter().cloned());
    header.extend(z_cols.iter().cloned());
    w.write_record(&header)?;
    for row in dataset.rows() {
        let mut rec = vec![
            row.subject_id.clone(),
            row.occasion_id.clone(),
            row.y.to_string(),
            row.weight.to_string(),
        ];
        rec.extend(row.x.iter().chain(&row.z).map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("subjects table", e))?;

    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(distances);
    w.write_record(["id", "occasion", "distance"])?;
    for row in dataset.rows() {
        for d in row.distances.distances() {
            w.write_record([&row.subject_id, &row.occasion_id, &d.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("distances table", e))?;

    Ok(SchemaConfig {
        radius: dataset.radius(),
        delimiter: delimiter as char,
        weight_column: Some("weight".into()),
        x_columns: Some(x_cols),
        z_columns: Some(z_cols),
        intercept: false,
        random_intercept: false,
        ..SchemaConfig::default()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub n_subjects: usize,
    pub n_rows: usize,
    pub n_distances: usize,
    pub rows_without_features: usize,
    /// Subjects with no feature closer than [`NEAR_DISTANCE`] on any occasion.
    pub subjects_without_near_features: usize,
    pub mean_distance: Option<f64>,
    pub histogram: Vec<HistogramBin>,
    pub warnings: Vec<String>,
}

pub const NEAR_DISTANCE: f64 = 1.0;
pub const HISTOGRAM_BINS: usize = 10;

pub fn validate(dataset: &Dataset) -> ValidationReport {
    let r = dataset.radius();
    let mut histogram: Vec<HistogramBin> = (0..HISTOGRAM_BINS)
        .map(|b| HistogramBin {
            lower: r * b as f64 / HISTOGRAM_BINS as f64,
            upper: r * (b + 1) as f64 / HISTOGRAM_BINS as f64,
            count: 0,
        })
        .collect();
    let mut n_distances = 0;
    let mut sum = 0.0;
    let mut rows_without_features = 0;
    for row in dataset.rows() {
        if row.distances.is_empty() {
            rows_without_features += 1;
        }
        for &d in row.distances.distances() {
            let b = ((d / r * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            histogram[b].count += 1;
            n_distances += 1;
            sum += d;
        }
    }
    let subjects_without_near_features = (0..dataset.n_subjects())
        .filter(|&s| {
            dataset.subject_rows(s).iter().all(|&i| {
                dataset.rows()[i]
                    .distances
                    .distances()
                    .iter()
                    .all(|&d| d >= NEAR_DISTANCE)
            })
        })
        .count();

    let mut warnings = Vec::new();
    if n_distances == 0 {
        warnings.push("no exposure information: every distance set is empty".to_string());
    } else if subjects_without_near_features * 2 > dataset.n_subjects() {
        warnings.push(format!(
            "{subjects_without_near_features} of {} subjects have no feature within {NEAR_DISTANCE}; \
             clusters that differ only at short range will be hard to detect",
            dataset.n_subjects()
        ));
    }
    ValidationReport {
        n_subjects: dataset.n_subjects(),
        n_rows: dataset.n_rows(),
        n_distances,
        rows_without_features,
        subjects_without_near_features,
        mean_distance: (n_distances > 0).then(|| sum / n_distances as f64),
        histogram,
        warnings,
    }
}
