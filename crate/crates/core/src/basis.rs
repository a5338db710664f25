//! B-spline bases over distance, difference penalties and the
//! reparameterization that gives spline coefficients independent priors.
//!
//! Coefficients live in two coordinate systems. *Original* coordinates
//! multiply the B-spline functions directly. *Transformed* coordinates are
//! `T · β_orig`, where the first `rank` entries span the range of the
//! penalty `S` (scaled so the penalty becomes the identity there) and the
//! remaining entries span its null space. In transformed coordinates the
//! prior `τ₁ S + τ₂ P_null` is diagonal.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-10;

/// Uniform (equally spaced, boundary-padded) B-spline basis on `[0, R]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    degree: usize,
    n_basis: usize,
    radius: f64,
    knots: Vec<f64>,
}

impl SplineBasis {
    pub fn new(degree: usize, n_basis: usize, radius: f64) -> Result<Self> {
        if n_basis < degree + 1 {
            return Err(Error::InvalidDimension(format!(
                "{n_basis} basis functions cannot carry degree {degree} (need at least {})",
                degree + 1
            )));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidDimension(format!(
                "radius must be positive and finite, got {radius}"
            )));
        }
        let spacing = radius / (n_basis - degree) as f64;
        let knots = (0..n_basis + degree + 1)
            .map(|j| (j as f64 - degree as f64) * spacing)
            .collect();
        Ok(SplineBasis {
            degree,
            n_basis,
            radius,
            knots,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_basis(&self) -> usize {
        self.n_basis
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn check_domain(&self, d: f64) -> Result<()> {
        if d >= 0.0 && d <= self.radius {
            Ok(())
        } else {
            Err(Error::OutOfDomain {
                distance: d,
                radius: self.radius,
            })
        }
    }

    /// Knot span `i` with `t_i <= d < t_{i+1}`; `d = R` falls in the last span.
    fn span(&self, d: f64) -> usize {
        let p = self.degree;
        let last = self.n_basis - 1;
        let spacing = self.knots[p + 1] - self.knots[p];
        let mut i = (p + (d / spacing).floor() as usize).min(last);
        while i < last && d >= self.knots[i + 1] {
            i += 1;
        }
        while i > p && d < self.knots[i] {
            i -= 1;
        }
        i
    }

    /// Adds `scale · φ_l(d)` into `out[l]` for the `degree + 1` nonzero functions.
    fn accumulate(&self, d: f64, scale: f64, out: &mut [f64]) {
        let p = self.degree;
        let i = self.span(d);
        let t = &self.knots;
        let mut values = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        values[0] = 1.0;
        for j in 1..=p {
            left[j] = d - t[i + 1 - j];
            right[j] = t[i + j] - d;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        for (r, v) in values.iter().enumerate() {
            out[i - p + r] += scale * v;
        }
    }

    /// All `L` basis values at one distance.
    pub fn evaluate(&self, d: f64) -> Result<Vec<f64>> {
        self.check_domain(d)?;
        let mut out = vec![0.0; self.n_basis];
        self.accumulate(d, 1.0, &mut out);
        Ok(out)
    }

    /// `Σ_{d ∈ set} φ_l(d)` for every `l`: the design row whose dot product
    /// with original-coordinate coefficients is the aggregated exposure.
    pub fn exposure_row(&self, distances: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_basis];
        for &d in distances {
            self.check_domain(d)?;
            self.accumulate(d, 1.0, &mut out);
        }
        Ok(out)
    }

    /// `f(d) = Σ_l β_l φ_l(d)` at each grid point (original coordinates).
    pub fn curve_on_grid(&self, coefficients: &[f64], grid: &[f64]) -> Result<Vec<(f64, f64)>> {
        if coefficients.len() != self.n_basis {
            return Err(Error::SizeMismatch {
                left: coefficients.len(),
                right: self.n_basis,
            });
        }
        grid.iter()
            .map(|&d| {
                let phi = self.evaluate(d)?;
                Ok((d, dot(&phi, coefficients)))
            })
            .collect()
    }
}

/// Difference penalty `S = DᵀD` with its eigen-based reparameterization.
#[derive(Debug, Clone)]
pub struct PenaltyDecomposition {
    order: usize,
    penalty: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    rank: usize,
    to_transformed: DMatrix<f64>,
    to_original: DMatrix<f64>,
}

/// The `order`-th difference operator as an `(n - order) × n` matrix.
pub fn difference_matrix(n: usize, order: usize) -> DMatrix<f64> {
    let mut d = DMatrix::<f64>::identity(n, n);
    for _ in 0..order {
        let rows = d.nrows();
        d = DMatrix::from_fn(rows - 1, n, |i, j| d[(i + 1, j)] - d[(i, j)]);
    }
    d
}

pub fn difference_penalty(n_basis: usize, order: usize) -> Result<PenaltyDecomposition> {
    if order == 0 || order >= n_basis {
        return Err(Error::InvalidDimension(format!(
            "difference order {order} must lie in 1..{n_basis}"
        )));
    }
    let d = difference_matrix(n_basis, order);
    let penalty = d.transpose() * &d;

    let eig = SymmetricEigen::new(penalty.clone());
    let mut order_idx: Vec<usize> = (0..n_basis).collect();
    order_idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order_idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let max_eig = eigenvalues[0];
    let rank = eigenvalues
        .iter()
        .filter(|&&v| v > RANK_TOLERANCE * max_eig)
        .count();

    // Columns of U in descending-eigenvalue order with a fixed sign
    // (largest-magnitude entry positive).
    let mut u = DMatrix::<f64>::zeros(n_basis, n_basis);
    for (c, &i) in order_idx.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).clone_owned();
        let pivot = col
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap_or(1.0);
        if pivot < 0.0 {
            col.neg_mut();
        }
        u.set_column(c, &col);
    }

    let mut to_original = u.clone();
    let mut to_transformed = u.transpose();
    for c in 0..rank {
        let s = eigenvalues[c].sqrt();
        to_original.column_mut(c).unscale_mut(s);
        to_transformed.row_mut(c).scale_mut(s);
    }

    Ok(PenaltyDecomposition {
        order,
        penalty,
        eigenvalues,
        rank,
        to_transformed,
        to_original,
    })
}

impl PenaltyDecomposition {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.penalty.nrows()
    }

    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    /// Eigenvalues of `S`, descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `r_S`, the dimension of the penalized subspace.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn null_dim(&self) -> usize {
        self.dim() - self.rank
    }

    /// `T`: original → transformed coordinates.
    pub fn to_transformed(&self) -> &DMatrix<f64> {
        &self.to_transformed
    }

    /// `T⁻¹`: transformed → original coordinates.
    pub fn to_original(&self) -> &DMatrix<f64> {
        &self.to_original
    }

    pub fn transform(&self, original: &DVector<f64>) -> DVector<f64> {
        &self.to_transformed * original
    }

    pub fn untransform(&self, transformed: &DVector<f64>) -> DVector<f64> {
        &self.to_original * transformed
    }

    /// Prior precision in original coordinates, `τ₁ S + τ₂ P_null`, where
    /// `P_null` projects onto the null space of `S`.
    pub fn original_precision(&self, tau1: f64, tau2: f64) -> DMatrix<f64> {
        let n = self.dim();
        let mut scale = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            scale[(i, i)] = if i < self.rank { tau1 } else { tau2 };
        }
        self.to_transformed.transpose() * scale * &self.to_transformed
    }
}

/// Basis settings as they appear in schema and run configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisSettings {
    pub degree: usize,
    pub n_basis: usize,
    pub penalty_order: usize,
}

impl Default for BasisSettings {
    fn default() -> Self {
        BasisSettings {
            degree: 3,
            n_basis: 7,
            penalty_order: 2,
        }
    }
}

/// A spline basis paired with its penalty reparameterization. Design rows
/// and curves produced here are in transformed coordinates.
#[derive(Debug, Clone)]
pub struct ExposureBasis {
    spline: SplineBasis,
    penalty: PenaltyDecomposition,
}

impl ExposureBasis {
    pub fn new(settings: BasisSettings, radius: f64) -> Result<Self> {
        let spline = SplineBasis::new(settings.degree, settings.n_basis, radius)?;
        let penalty = difference_penalty(settings.n_basis, settings.penalty_order)?;
        Ok(ExposureBasis { spline, penalty })
    }

    pub fn spline(&self) -> &SplineBasis {
        &self.spline
    }

    pub fn penalty(&self) -> &PenaltyDecomposition {
        &self.penalty
    }

    pub fn n_coef(&self) -> usize {
        self.spline.n_basis()
    }

    pub fn rank(&self) -> usize {
        self.penalty.rank()
    }

    pub fn radius(&self) -> f64 {
        self.spline.radius()
    }

    /// Exposure row mapped into transformed coordinates (`T⁻ᵀ · row`).
    pub fn design_row(&self, distances: &[f64]) -> Result<Vec<f64>> {
        let row = DVector::from_vec(self.spline.exposure_row(distances)?);
        Ok(self.penalty.to_original().tr_mul(&row).iter().copied().collect())
    }

    /// Basis values at each grid point in transformed coordinates, one row
    /// per grid point.
    pub fn grid_matrix(&self, grid: &[f64]) -> Result<DMatrix<f64>> {
        let l = self.n_coef();
        let mut m = DMatrix::zeros(grid.len(), l);
        for (g, &d) in grid.iter().enumerate() {
            let phi = DVector::from_vec(self.spline.evaluate(d)?);
            let row = self.penalty.to_original().tr_mul(&phi);
            m.row_mut(g).copy_from(&row.transpose());
        }
        Ok(m)
    }

    /// `f(d)` on the grid for transformed-coordinate coefficients.
    pub fn curve_on_grid(&self, transformed: &[f64], grid: &[f64]) -> Result<Vec<(f64, f64)>> {
        if transformed.len() != self.n_coef() {
            return Err(Error::SizeMismatch {
                left: transformed.len(),
                right: self.n_coef(),
            });
        }
        let original = self
            .penalty
            .untransform(&DVector::from_column_slice(transformed));
        self.spline.curve_on_grid(original.as_slice(), grid)
    }
}

/// `n` equally spaced points covering `[0, radius]`.
pub fn uniform_grid(radius: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n)
            .map(|i| {
                if i + 1 == n {
                    radius
                } else {
                    radius * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
