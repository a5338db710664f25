//! Gaussian and Wishart variates from precision/scale matrices.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};

pub(crate) fn standard_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

pub(crate) fn cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    Cholesky::new(m).ok_or_else(|| {
        Error::Numerical(format!("{what}: {n}×{n} matrix is not positive definite"))
    })
}

/// Draw from `N(Q⁻¹ h, Q⁻¹)` given a factored precision `Q = L Lᵀ`:
/// `Q⁻¹ h + L⁻ᵀ z`.
pub(crate) fn sample_from_precision<R: Rng + ?Sized>(
    chol: &Cholesky<f64, Dyn>,
    linear: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let mean = chol.solve(linear);
    let z = standard_normals(linear.len(), rng);
    let offset = chol
        .l_dirty()
        .tr_solve_lower_triangular(&z)
        .expect("Cholesky factor has a positive diagonal");
    mean + offset
}

/// Wishart(`df`, `scale`) by the Bartlett decomposition.
pub(crate) fn sample_wishart<R: Rng + ?Sized>(
    df: f64,
    scale: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let q = scale.nrows();
    if df <= q as f64 - 1.0 {
        return Err(Error::Numerical(format!(
            "Wishart degrees of freedom {df} too small for dimension {q}"
        )));
    }
    let l = cholesky(scale.clone(), "Wishart scale")?.unpack();
    let mut a = DMatrix::<f64>::zeros(q, q);
    for i in 0..q {
        let chi = ChiSquared::new(df - i as f64)
            .map_err(|e| Error::Numerical(format!("chi-square: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = l * a;
    Ok(&la * la.transpose())
}

/// Inverse-Wishart(`df`, `psi`), density ∝ |Σ|^{-(df+q+1)/2} exp(-tr(ΨΣ⁻¹)/2).
pub(crate) fn sample_inverse_wishart<R: Rng + ?Sized>(
    df: f64,
    psi: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let psi_inv = cholesky(psi.clone(), "inverse-Wishart scale")?.inverse();
    let w = sample_wishart(df, &psi_inv, rng)?;
    let sigma = cholesky(w, "Wishart draw")?.inverse();
    Ok(symmetrize(sigma))
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}
