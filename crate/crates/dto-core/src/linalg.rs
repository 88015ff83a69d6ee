//! Small dense symmetric solves with a condition-number guard.

use nalgebra::{DMatrix, DVector};

use crate::math;

pub(crate) const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct IllConditioned {
    pub(crate) condition: f64,
}

/// Eigenvalues of a symmetric matrix, ascending.
pub(crate) fn symmetric_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let mut vals = m.clone().symmetric_eigen().eigenvalues;
    vals.as_mut_slice()
        .sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    vals
}

/// Solves `h * y = b` for symmetric `h`, rejecting condition numbers above
/// [`MAX_CONDITION`]. Dimension one is special-cased; the simulator spends
/// most of its time there.
pub(crate) fn solve_symmetric(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>, IllConditioned> {
    if h.nrows() == 1 {
        let a = h[(0, 0)];
        if a == 0.0 || !a.is_finite() {
            return Err(IllConditioned {
                condition: f64::INFINITY,
            });
        }
        return Ok(DVector::from_element(1, b[0] / a));
    }
    let eig = h.clone().symmetric_eigen();
    let mut min_abs = f64::INFINITY;
    let mut max_abs = 0.0f64;
    for &v in eig.eigenvalues.iter() {
        let a = math::abs(v);
        min_abs = min_abs.min(a);
        max_abs = max_abs.max(a);
    }
    let condition = if min_abs == 0.0 {
        f64::INFINITY
    } else {
        max_abs / min_abs
    };
    if !(condition <= MAX_CONDITION) {
        return Err(IllConditioned { condition });
    }
    // y = V diag(1/lambda) V^T b
    let vt_b = eig.eigenvectors.transpose() * b;
    let scaled = DVector::from_iterator(
        vt_b.len(),
        vt_b.iter().zip(eig.eigenvalues.iter()).map(|(x, l)| x / l),
    );
    Ok(&eig.eigenvectors * scaled)
}
