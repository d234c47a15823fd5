//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::exec::Exec;

/// Relative threshold below which a singular value counts as zero.
pub const RANK_RTOL: f64 = 1e-10;

/// Singular-value summary of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub rank: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Singular values in descending order.
    pub singular_values: Vec<f64>,
}

impl RankReport {
    pub fn of(m: &DMatrix<f64>) -> Self {
        let svd = m.clone().svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let sigma_max = sv.first().copied().unwrap_or(0.0);
        let cutoff = RANK_RTOL * sigma_max.max(f64::MIN_POSITIVE);
        let rank = sv.iter().filter(|&&s| s > cutoff).count();
        // smallest singular value over min(rows, cols)
        let sigma_min = sv.last().copied().unwrap_or(0.0);
        RankReport {
            rank,
            sigma_min,
            sigma_max,
            singular_values: sv,
        }
    }

    pub fn condition(&self) -> f64 {
        if self.sigma_min > 0.0 {
            self.sigma_max / self.sigma_min
        } else {
            f64::INFINITY
        }
    }
}

/// Moore-Penrose pseudo-inverse with the crate-wide rank cutoff.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let eps = RANK_RTOL * sigma_max.max(f64::MIN_POSITIVE);
    svd.pseudo_inverse(eps).expect("u and v were computed")
}

/// Orthonormal basis of the kernel of `m`, one column per vector.
pub fn null_space(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let n = m.ncols();
    // Eigen-decomposition of the Gram matrix keeps the full right basis even
    // for wide matrices, where the thin SVD would drop it.
    let gram = m.transpose() * m;
    let eig = gram.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    // Squaring loses half the digits, so compare singular values at 1e-7.
    let cutoff = 1e-7 * lmax.sqrt();
    (0..n)
        .filter(|&i| eig.eigenvalues[i].abs().sqrt() <= cutoff)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect()
}

/// Matrix exponential; scalar fast path for 1x1.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 1 {
        return DMatrix::from_element(1, 1, m[(0, 0)].exp());
    }
    m.exp()
}

/// Symmetric Hausdorff distance between two finite point sets.
pub fn hausdorff(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    hausdorff_with(Exec::default(), a, b)
}

pub fn hausdorff_with(exec: Exec, a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.is_empty() && b.is_empty() {
            0.0
        } else {
            f64::INFINITY
        };
    }
    let directed = |from: &[Vector3<f64>], to: &[Vector3<f64>]| {
        exec.map(from.len(), |i| {
            to.iter()
                .map(|q| (from[i] - q).norm_squared())
                .fold(f64::INFINITY, f64::min)
        })
        .into_iter()
        .fold(0.0f64, f64::max)
        .sqrt()
    };
    directed(a, b).max(directed(b, a))
}
