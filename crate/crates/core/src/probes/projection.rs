//! Orthogonal projectors onto the span of a set of directions.

use serde_json::json;

use crate::error::{Error, Result};
use crate::model_io::{Archive, ArchiveWriter};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Pivots below this fraction of the largest pivot are treated as zero.
pub const RANK_TOL: f64 = 1e-8;

/// Symmetric idempotent `D × D` matrix with its rank.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix<T> {
    matrix: Matrix<T>,
    rank: usize,
}

impl<T: Scalar> ProjectionMatrix<T> {
    /// Wraps an existing matrix after checking projector algebra.
    pub fn from_matrix(matrix: Matrix<T>, rank: usize) -> Result<Self> {
        let p = Self { matrix, rank };
        p.check()?;
        Ok(p)
    }

    pub fn identity(d: usize) -> Self {
        Self {
            matrix: Matrix::identity(d),
            rank: d,
        }
    }

    pub fn zero(d: usize) -> Self {
        Self {
            matrix: Matrix::zeros(d, d),
            rank: 0,
        }
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// `‖P − Pᵀ‖∞`, `‖P² − P‖∞`, `|trace(P) − rank|`.
    pub fn algebra_residuals(&self) -> (f64, f64, f64) {
        let p = &self.matrix;
        let sym = p.max_abs_diff(&p.transpose()).as_f64();
        let idem = p.matmul(p).max_abs_diff(p).as_f64();
        let trace: f64 = (0..p.rows()).map(|i| p[(i, i)].as_f64()).sum();
        (sym, idem, (trace - self.rank as f64).abs())
    }

    pub fn check(&self) -> Result<()> {
        if self.matrix.rows() != self.matrix.cols() {
            return Err(Error::Input("projector must be square".into()));
        }
        let (sym, idem, tr) = self.algebra_residuals();
        // f32 projectors carry single-precision rounding in P².
        let scale = if T::DTYPE == crate::DType::F32 { 1e3 } else { 1.0 };
        if sym > 1e-8 * scale || idem > 1e-6 * scale || tr > 1e-4 * scale {
            return Err(Error::Input(format!(
                "not an orthogonal projector (asymmetry {sym:.2e}, idempotency {idem:.2e}, trace error {tr:.2e})"
            )));
        }
        Ok(())
    }

    /// `(P x, x − P x)`
    pub fn split(&self, x: &[T]) -> (Vec<T>, Vec<T>) {
        split_subspace(x, self)
    }

    pub fn to_archive(&self) -> ArchiveWriter {
        let d = self.dim();
        let mut w = ArchiveWriter::new();
        w.metadata("kind", "projector".into());
        w.metadata("rank", json!(self.rank));
        w.add("projector", &[d, d], self.matrix.as_slice());
        w
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let (shape, values) = archive.tensor_f64("projector")?;
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::ArchiveFormat(format!("projector shape {shape:?} is not square")));
        }
        let rank = archive
            .metadata("rank")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::ArchiveFormat("projector archive has no rank".into()))? as usize;
        let m = Matrix::from_vec(shape[0], shape[1], values.into_iter().map(T::of_f64).collect());
        Self::from_matrix(m, rank)
    }
}

/// Householder QR with column pivoting of a `rows × cols` matrix.
///
/// Returns the orthonormal basis of the column space (first `rank` columns
/// of Q, as a `rows × rank` matrix) and the absolute pivots `|R_jj|`.
pub fn pivoted_qr_basis<T: Scalar>(a: &Matrix<T>, tol: f64) -> (Matrix<T>, Vec<T>) {
    let (m, n) = a.shape();
    let mut r = a.clone();
    let steps = m.min(n);
    let mut reflectors: Vec<Vec<T>> = Vec::with_capacity(steps);
    let mut pivots = Vec::with_capacity(steps);

    for j in 0..steps {
        // pivot: remaining column with the largest norm below row j
        let col_norm = |r: &Matrix<T>, c: usize| (j..m).fold(T::zero(), |s, i| s + r[(i, c)] * r[(i, c)]);
        let (best, best_norm) = (j..n)
            .map(|c| (c, col_norm(&r, c)))
            .fold((j, T::neg_infinity()), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best != j {
            for i in 0..m {
                let tmp = r[(i, j)];
                r[(i, j)] = r[(i, best)];
                r[(i, best)] = tmp;
            }
        }
        let norm = best_norm.sqrt();
        if norm == T::zero() {
            pivots.push(T::zero());
            break;
        }
        // v = x + sign(x0)·‖x‖·e1, normalized
        let x0 = r[(j, j)];
        let alpha = if x0 >= T::zero() { -norm } else { norm };
        let mut v: Vec<T> = (j..m).map(|i| r[(i, j)]).collect();
        v[0] -= alpha;
        let vnorm = v.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
        if vnorm > T::zero() {
            for x in &mut v {
                *x /= vnorm;
            }
            let two = T::of_f64(2.0);
            for c in j..n {
                let dot = (j..m).fold(T::zero(), |s, i| s + v[i - j] * r[(i, c)]);
                for i in j..m {
                    r[(i, c)] -= two * v[i - j] * dot;
                }
            }
        }
        pivots.push(r[(j, j)].abs());
        reflectors.push(v);
    }

    let largest = pivots.first().copied().unwrap_or(T::zero());
    let rank = if largest == T::zero() {
        0
    } else {
        let cutoff = largest * T::of_f64(tol);
        pivots.iter().take_while(|&&p| p > cutoff).count()
    };

    // Q e_c for c < rank: apply reflectors in reverse order
    let mut q = Matrix::zeros(m, rank);
    for c in 0..rank {
        q[(c, c)] = T::one();
    }
    let two = T::of_f64(2.0);
    for (j, v) in reflectors.iter().enumerate().rev() {
        for c in 0..rank {
            let dot = (j..m).fold(T::zero(), |s, i| s + v[i - j] * q[(i, c)]);
            for i in j..m {
                q[(i, c)] -= two * v[i - j] * dot;
            }
        }
    }
    (q, pivots)
}

/// Projector onto the row span of `directions` (`c × D`), built from a
/// pivoted QR of its transpose: `P = U_r U_rᵀ`.
pub fn projection_from_directions<T: Scalar>(directions: &Matrix<T>) -> Result<ProjectionMatrix<T>> {
    if directions.rows() == 0 || directions.max_abs() == T::zero() {
        return Err(Error::DegenerateSubspace("all direction rows are zero".into()));
    }
    let (basis, _) = pivoted_qr_basis(&directions.transpose(), RANK_TOL);
    let rank = basis.cols();
    let matrix = basis.matmul_t(&basis);
    Ok(ProjectionMatrix { matrix, rank })
}

/// `(P x, x − P x)`
pub fn split_subspace<T: Scalar>(x: &[T], p: &ProjectionMatrix<T>) -> (Vec<T>, Vec<T>) {
    let pm = p.matrix();
    let par: Vec<T> = (0..pm.rows()).map(|i| crate::scalar::dot(pm.row(i), x)).collect();
    let perp = x.iter().zip(&par).map(|(&a, &b)| a - b).collect();
    (par, perp)
}
