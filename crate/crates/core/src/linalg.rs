//! Dense matrix utilities: Moore-Penrose pseudo-inverse, symmetric
//! eigendecomposition, definiteness tests, range containment and the extended
//! Schur block test.
//!
//! Every symmetric input is symmetrized as `(S + S^T) / 2` before it reaches an
//! eigensolver. Norms are spectral for symmetric matrices and max-entry
//! otherwise.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{DelqError, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative singular-value cutoff used by [`pinv`] when no other is given.
pub const DEFAULT_PINV_REL_TOL: f64 = 1e-12;
/// Relative eigenvalue slack for semidefiniteness tests.
pub const DEFAULT_PSD_TOL: f64 = 1e-9;
/// Relative slack for LMEI constraint residuals and margins.
pub const DEFAULT_FEASIBILITY_TOL: f64 = 1e-9;
/// Relative asymmetry accepted for inputs declared symmetric.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Numerical tolerances threaded through the solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub pinv_rel: f64,
    pub psd: f64,
    pub feasibility: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            pinv_rel: DEFAULT_PINV_REL_TOL,
            psd: DEFAULT_PSD_TOL,
            feasibility: DEFAULT_FEASIBILITY_TOL,
        }
    }
}

/// Largest absolute entry.
pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn is_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub(crate) fn ensure_finite(m: &Matrix, context: &str) -> Result<()> {
    if is_finite(m) {
        Ok(())
    } else {
        Err(DelqError::NonFinite(context.to_string()))
    }
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Max-entry asymmetry `max |S - S^T|`.
pub fn asymmetry(m: &Matrix) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub(crate) fn check_symmetric(s: &Matrix, context: &str) -> Result<()> {
    if !s.is_square() {
        return Err(DelqError::dims(
            context,
            "square matrix",
            format!("{}x{}", s.nrows(), s.ncols()),
        ));
    }
    ensure_finite(s, context)?;
    let scale = max_abs(s).max(1.0);
    let asym = asymmetry(s);
    if asym > SYMMETRY_TOL * scale {
        return Err(DelqError::InvalidInput(format!(
            "{context}: matrix is not symmetric (max |S - S^T| = {asym:.3e})"
        )));
    }
    Ok(())
}

struct Svd {
    u: Matrix,
    s: Vec<f64>,
    v: Matrix,
}

// nalgebra's bidiagonal SVD loses accuracy on some rank-deficient inputs;
// faer's is used instead.
fn thin_svd(m: &Matrix, context: &str) -> Result<Svd> {
    let (rows, cols) = m.shape();
    let a = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    let svd = a
        .thin_svd()
        .map_err(|e| DelqError::NonFinite(format!("{context}: SVD did not converge ({e:?})")))?;
    let rank = rows.min(cols);
    let sv = svd.S().column_vector();
    let (u, v) = (svd.U(), svd.V());
    Ok(Svd {
        u: Matrix::from_fn(rows, rank, |i, j| u[(i, j)]),
        s: (0..rank).map(|i| sv[i]).collect(),
        v: Matrix::from_fn(cols, rank, |i, j| v[(i, j)]),
    })
}

/// Singular values in descending order.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    ensure_finite(m, "singular_values")?;
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(Vec::new());
    }
    let mut s = thin_svd(m, "singular_values")?.s;
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Moore-Penrose pseudo-inverse via the singular value decomposition.
///
/// Singular values below `rel_tol * sigma_max` are treated as zero.
pub fn pinv(m: &Matrix, rel_tol: f64) -> Result<Matrix> {
    if rel_tol.is_nan() || rel_tol <= 0.0 {
        return Err(DelqError::InvalidInput(format!(
            "pinv: relative tolerance must be positive, got {rel_tol}"
        )));
    }
    ensure_finite(m, "pinv")?;
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(Matrix::zeros(cols, rows));
    }
    let svd = thin_svd(m, "pinv")?;
    let sigma_max = svd.s.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = rel_tol * sigma_max;
    let mut out = Matrix::zeros(cols, rows);
    for (idx, &sigma) in svd.s.iter().enumerate() {
        if sigma > cutoff && sigma > 0.0 {
            let v = svd.v.column(idx);
            let u_col = svd.u.column(idx);
            out += (v * u_col.transpose()) / sigma;
        }
    }
    ensure_finite(&out, "pinv output")?;
    Ok(out)
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order; the columns of `basis` are the matching eigenvectors.
#[derive(Debug, Clone)]
pub struct SymEigDecomposition {
    pub eigenvalues: Vector,
    pub basis: Matrix,
}

impl SymEigDecomposition {
    pub fn reconstruct(&self) -> Matrix {
        &self.basis * Matrix::from_diagonal(&self.eigenvalues) * self.basis.transpose()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Spectral norm `max |lambda_i|` (zero for an empty matrix).
    pub fn spectral_norm(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

pub fn sym_eig(s: &Matrix) -> Result<SymEigDecomposition> {
    check_symmetric(s, "sym_eig")?;
    let n = s.nrows();
    if n == 0 {
        return Ok(SymEigDecomposition {
            eigenvalues: Vector::zeros(0),
            basis: Matrix::zeros(0, 0),
        });
    }
    let eig = SymmetricEigen::new(symmetrize(s));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut basis = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        basis.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEigDecomposition { eigenvalues, basis })
}

pub fn min_eigenvalue(s: &Matrix) -> Result<f64> {
    Ok(sym_eig(s)?.min_eigenvalue())
}

/// `lambda_min(S) >= -tol * max(1, ||S||)`.
pub fn is_psd(s: &Matrix, tol: f64) -> Result<bool> {
    Ok(psd_margin(s, tol)? >= 0.0)
}

/// `lambda_min(S) > tol * max(1, ||S||)`.
pub fn is_pd(s: &Matrix, tol: f64) -> Result<bool> {
    let eig = sym_eig(s)?;
    if s.nrows() == 0 {
        return Ok(true);
    }
    Ok(eig.min_eigenvalue() > tol * eig.spectral_norm().max(1.0))
}

/// Signed semidefiniteness margin `lambda_min(S) + tol * max(1, ||S||)`;
/// non-negative exactly when [`is_psd`] holds.
pub fn psd_margin(s: &Matrix, tol: f64) -> Result<f64> {
    let eig = sym_eig(s)?;
    if s.nrows() == 0 {
        return Ok(tol);
    }
    Ok(eig.min_eigenvalue() + tol * eig.spectral_norm().max(1.0))
}

/// Max-entry norm of `L L^† N - N`.
pub fn range_residual(n: &Matrix, l: &Matrix, pinv_rel: f64) -> Result<f64> {
    if n.nrows() != l.nrows() {
        return Err(DelqError::dims(
            "range_contained",
            format!("{} rows", l.nrows()),
            format!("{} rows", n.nrows()),
        ));
    }
    ensure_finite(n, "range_contained")?;
    let projector = l * pinv(l, pinv_rel)?;
    Ok(max_abs(&(&projector * n - n)))
}

/// `Ran(N) ⊂ Ran(L)`, tested as `||L L^† N - N|| <= tol * max(1, ||N||)`.
pub fn range_contained(n: &Matrix, l: &Matrix, tol: f64) -> Result<bool> {
    let residual = range_residual(n, l, DEFAULT_PINV_REL_TOL)?;
    Ok(residual <= tol * max_abs(n).max(1.0))
}

/// Outcome of the extended Schur block test for `[[S, H^T], [H, W]] >= 0`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SchurCheck {
    /// Verdict of the direct block eigenvalue test.
    pub psd: bool,
    /// `lambda_min` of the assembled block.
    pub block_min_eig: f64,
    /// `lambda_min(S - H^T W^† H)`.
    pub complement_min_eig: f64,
    /// `lambda_min(W)`.
    pub w_min_eig: f64,
    /// `||W W^† H - H||`.
    pub range_residual: f64,
    /// Signed margin of the direct test, `>= 0` iff `psd`.
    pub margin: f64,
    /// `max(1, ||block||_2)`, the scale the margin is measured against.
    pub scale: f64,
}

/// Extended Schur test computed two ways, directly on the block and through
/// `S - H^T W^† H >= 0, W >= 0, W W^† H = H`.
///
/// A disagreement between the two paths is reported as
/// [`DelqError::Inconsistent`] unless the block sits within `1e3 * tol` of the
/// semidefinite boundary, where rounding legitimately decides either way.
pub fn schur_block_check(s: &Matrix, h: &Matrix, w: &Matrix, tol: f64) -> Result<SchurCheck> {
    let n = s.nrows();
    let m = w.nrows();
    if !s.is_square() || !w.is_square() || h.shape() != (m, n) {
        return Err(DelqError::dims(
            "schur_block_psd",
            format!("S {n}x{n}, H {m}x{n}, W {m}x{m}"),
            format!(
                "S {}x{}, H {}x{}, W {}x{}",
                s.nrows(),
                s.ncols(),
                h.nrows(),
                h.ncols(),
                w.nrows(),
                w.ncols()
            ),
        ));
    }
    ensure_finite(h, "schur_block_psd")?;
    let s = symmetrize(s);
    let w = symmetrize(w);

    let mut block = Matrix::zeros(n + m, n + m);
    block.view_mut((0, 0), (n, n)).copy_from(&s);
    block.view_mut((0, n), (n, m)).copy_from(&h.transpose());
    block.view_mut((n, 0), (m, n)).copy_from(h);
    block.view_mut((n, n), (m, m)).copy_from(&w);
    let block_eig = sym_eig(&block)?;
    let scale = block_eig.spectral_norm().max(1.0);
    let block_min = if n + m == 0 { 0.0 } else { block_eig.min_eigenvalue() };
    let margin = block_min + tol * scale;
    let direct = margin >= 0.0;

    let w_pinv = pinv(&w, DEFAULT_PINV_REL_TOL)?;
    let complement = symmetrize(&(&s - h.transpose() * &w_pinv * h));
    let complement_eig = sym_eig(&complement)?;
    let complement_min = if n == 0 { 0.0 } else { complement_eig.min_eigenvalue() };
    let w_eig = sym_eig(&w)?;
    let w_min = if m == 0 { 0.0 } else { w_eig.min_eigenvalue() };
    let range_residual = max_abs(&(&w * &w_pinv * h - h));

    let triple = complement_min >= -tol * complement_eig.spectral_norm().max(1.0)
        && w_min >= -tol * w_eig.spectral_norm().max(1.0)
        && range_residual <= tol * max_abs(h).max(1.0);

    if direct != triple && block_min.abs() > 1e3 * tol * scale {
        return Err(DelqError::Inconsistent(format!(
            "extended Schur test disagrees: block lambda_min = {block_min:.6e}, \
             complement lambda_min = {complement_min:.6e}, W lambda_min = {w_min:.6e}, \
             range residual = {range_residual:.3e}"
        )));
    }

    Ok(SchurCheck {
        psd: direct,
        block_min_eig: block_min,
        complement_min_eig: complement_min,
        w_min_eig: w_min,
        range_residual,
        margin,
        scale,
    })
}

pub fn schur_block_psd(s: &Matrix, h: &Matrix, w: &Matrix, tol: f64) -> Result<bool> {
    Ok(schur_block_check(s, h, w, tol)?.psd)
}

/// Build a matrix from row slices; all rows must share one length.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(DelqError::InvalidInput(format!(
            "ragged matrix: row {bad} has {} entries, expected {ncols}",
            rows[bad].len()
        )));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Serde adapter storing a matrix as an array of rows.
pub mod rows_serde {
    use super::{from_rows, to_rows, Matrix};
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, ser: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(de)?;
        from_rows(&rows).map_err(D::Error::custom)
    }
}

/// Serde adapter for a sequence of matrices, each an array of rows.
pub mod rows_seq_serde {
    use super::{from_rows, to_rows, Matrix};
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(ms: &[Matrix], ser: S) -> Result<S::Ok, S::Error> {
        ms.iter().map(to_rows).collect::<Vec<_>>().serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<Matrix>, D::Error> {
        let seq = Vec::<Vec<Vec<f64>>>::deserialize(de)?;
        seq.iter()
            .map(|rows| from_rows(rows).map_err(D::Error::custom))
            .collect()
    }
}
