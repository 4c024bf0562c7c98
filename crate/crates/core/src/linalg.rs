use nalgebra::{DMatrix, DVector};

/// Solves `a x = b` through a singular value decomposition, treating
/// singular values below `1e-12 * max` as zero (minimum-norm solution).
pub fn solve_svd(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = a.svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if !smax.is_finite() {
        return None;
    }
    let x = svd.solve(b, smax * 1e-12).ok()?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Builds a dense matrix from a row-major slice.
pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}
