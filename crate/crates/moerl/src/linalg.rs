//! Dense linear-algebra helpers bridging ndarray tables to nalgebra solvers.

use ndarray::{Array1, Array2};

use crate::error::{MoeError, Result};

fn to_dmatrix(a: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[[r, c]])
}

/// Solve `a x = b` by LU with partial pivoting.
pub fn solve(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(MoeError::ShapeMismatch {
            context: "linalg::solve",
            expected: format!("{n}x{n} matrix with rhs of length {n}"),
            got: format!("{}x{} matrix, rhs length {}", a.nrows(), a.ncols(), b.len()),
        });
    }
    let lu = to_dmatrix(a).lu();
    let rhs = nalgebra::DVector::from_iterator(n, b.iter().copied());
    let x = lu.solve(&rhs).ok_or(MoeError::Numerical {
        context: "linalg::solve (singular matrix)",
        residual: f64::INFINITY,
        tol: 0.0,
    })?;
    Ok(Array1::from_iter(x.iter().copied()))
}

/// Solve `a X = B` for a matrix right-hand side.
pub fn solve_matrix(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(MoeError::ShapeMismatch {
            context: "linalg::solve_matrix",
            expected: format!("{n}x{n} matrix with rhs of {n} rows"),
            got: format!("{}x{}, rhs {}x{}", a.nrows(), a.ncols(), b.nrows(), b.ncols()),
        });
    }
    let lu = to_dmatrix(a).lu();
    let rhs = to_dmatrix(b);
    let x = lu.solve(&rhs).ok_or(MoeError::Numerical {
        context: "linalg::solve_matrix (singular matrix)",
        residual: f64::INFINITY,
        tol: 0.0,
    })?;
    Ok(Array2::from_shape_fn((n, b.ncols()), |(r, c)| x[(r, c)]))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let eig = nalgebra::SymmetricEigen::new(to_dmatrix(a));
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
    vals
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(a: &Array2<f64>) -> f64 {
    symmetric_eigenvalues(a).first().copied().unwrap_or(0.0)
}

/// Sup-norm of the residual `a x - b`.
pub fn residual_inf(a: &Array2<f64>, x: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let r = a.dot(x) - b;
    r.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn solve_small_system() {
        let a = array![[2.0, 1.0], [1.0, 3.0]];
        let b = array![3.0, 5.0];
        let x = solve(&a, &b).unwrap();
        assert!(residual_inf(&a, &x, &b) < 1e-12);
    }

    #[test]
    fn eigenvalues_of_diagonal() {
        let a = array![[3.0, 0.0], [0.0, -1.0]];
        let vals = symmetric_eigenvalues(&a);
        assert!((vals[0] + 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
    }
}
