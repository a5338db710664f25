use std::ops::Range;

use nalgebra::DMatrix;

use crate::basis::ExposureBasis;
use crate::data::Dataset;
use crate::error::{Error, Result};

use super::PriorConfig;

/// Dataset flattened for sampling: rows regrouped so each subject's rows
/// are contiguous, exposure rows in transformed coordinates, and the
/// per-subject cross products that never change between iterations.
#[derive(Debug, Clone)]
pub struct Model {
    n_coef: usize,
    rank: usize,
    p: usize,
    q: usize,
    y: Vec<f64>,
    w: Vec<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
    e: Vec<f64>,
    ranges: Vec<Range<usize>>,
    subject_ids: Vec<String>,
    xtwx: DMatrix<f64>,
    gram: Vec<DMatrix<f64>>,
    cross: Vec<DMatrix<f64>>,
    ztwz: Vec<DMatrix<f64>>,
    gamma_prior_var: f64,
}

impl Model {
    pub fn new(dataset: &Dataset, basis: &ExposureBasis, prior: &PriorConfig) -> Result<Self> {
        if (dataset.radius() - basis.radius()).abs() > 0.0 {
            return Err(Error::Input(format!(
                "dataset radius {} differs from basis radius {}",
                dataset.radius(),
                basis.radius()
            )));
        }
        let (l, p, q) = (basis.n_coef(), dataset.p(), dataset.q());
        let n = dataset.n_rows();
        let mut y = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n * p);
        let mut z = Vec::with_capacity(n * q);
        let mut e = Vec::with_capacity(n * l);
        let mut ranges = Vec::with_capacity(dataset.n_subjects());
        for s in 0..dataset.n_subjects() {
            let start = y.len();
            for &r in dataset.subject_rows(s) {
                let row = &dataset.rows()[r];
                y.push(row.y);
                w.push(row.weight);
                x.extend(&row.x);
                z.extend(&row.z);
                e.extend(basis.design_row(row.distances.distances())?);
            }
            ranges.push(start..y.len());
        }

        let mut xtwx = DMatrix::zeros(p, p);
        let mut gram = Vec::with_capacity(ranges.len());
        let mut cross = Vec::with_capacity(ranges.len());
        let mut ztwz = Vec::with_capacity(ranges.len());
        for range in &ranges {
            let mut g = DMatrix::zeros(l, l);
            let mut c = DMatrix::zeros(p, l);
            let mut zz = DMatrix::zeros(q, q);
            for j in range.clone() {
                let (ej, xj, zj) = (&e[j * l..(j + 1) * l], &x[j * p..(j + 1) * p], &z[j * q..(j + 1) * q]);
                let wj = w[j];
                for a in 0..l {
                    for b in 0..l {
                        g[(a, b)] += wj * ej[a] * ej[b];
                    }
                }
                for a in 0..p {
                    for b in 0..l {
                        c[(a, b)] += wj * xj[a] * ej[b];
                    }
                    for b in 0..p {
                        xtwx[(a, b)] += wj * xj[a] * xj[b];
                    }
                }
                for a in 0..q {
                    for b in 0..q {
                        zz[(a, b)] += wj * zj[a] * zj[b];
                    }
                }
            }
            gram.push(g);
            cross.push(c);
            ztwz.push(zz);
        }

        let var_y = if n >= 2 {
            let mean = y.iter().sum::<f64>() / n as f64;
            y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let gamma_prior_var = prior.gamma_prior_scale * if var_y > 0.0 { var_y } else { 1.0 };

        Ok(Model {
            n_coef: l,
            rank: basis.rank(),
            p,
            q,
            y,
            w,
            x,
            z,
            e,
            ranges,
            subject_ids: dataset.subjects().to_vec(),
            xtwx,
            gram,
            cross,
            ztwz,
            gamma_prior_var,
        })
    }

    pub fn n_coef(&self) -> usize {
        self.n_coef
    }

    /// Dimension of the penalized (τ₁) block.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.ranges.len()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn gamma_prior_var(&self) -> f64 {
        self.gamma_prior_var
    }

    pub(crate) fn rows(&self, s: usize) -> Range<usize> {
        self.ranges[s].clone()
    }

    pub(crate) fn y(&self, j: usize) -> f64 {
        self.y[j]
    }

    pub(crate) fn w(&self, j: usize) -> f64 {
        self.w[j]
    }

    pub(crate) fn x(&self, j: usize) -> &[f64] {
        &self.x[j * self.p..(j + 1) * self.p]
    }

    pub(crate) fn z(&self, j: usize) -> &[f64] {
        &self.z[j * self.q..(j + 1) * self.q]
    }

    /// Transformed exposure row of observation `j`.
    pub(crate) fn e(&self, j: usize) -> &[f64] {
        &self.e[j * self.n_coef..(j + 1) * self.n_coef]
    }

    pub(crate) fn xtwx(&self) -> &DMatrix<f64> {
        &self.xtwx
    }

    pub(crate) fn gram(&self, s: usize) -> &DMatrix<f64> {
        &self.gram[s]
    }

    pub(crate) fn cross(&self, s: usize) -> &DMatrix<f64> {
        &self.cross[s]
    }

    pub(crate) fn ztwz(&self, s: usize) -> &DMatrix<f64> {
        &self.ztwz[s]
    }
}
