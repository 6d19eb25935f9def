//! Exact dense linear solving over rationals.

use crate::model::Rational;

/// Solves the square system `A x = b` by Gaussian elimination with exact
/// arithmetic. Returns `None` when the matrix is singular. With rationals
/// any nonzero pivot is as good as any other, so the first one found is
/// used.
pub(crate) fn solve_linear_system(
    mut a: Vec<Vec<Rational>>,
    mut b: Vec<Rational>,
) -> Option<Vec<Rational>> {
    let n = b.len();
    debug_assert!(a.len() == n && a.iter().all(|row| row.len() == n));
    for col in 0..n {
        let pivot_row = (col..n).find(|&r| !a[r][col].is_zero())?;
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        let pivot = a[col][col].clone();
        for x in &mut a[col] {
            *x = &*x / &pivot;
        }
        b[col] = &b[col] / &pivot;
        for row in 0..n {
            if row == col || a[row][col].is_zero() {
                continue;
            }
            let factor = a[row][col].clone();
            for c in col..n {
                let delta = &factor * &a[col][c];
                a[row][c] -= delta;
            }
            let delta = &factor * &b[col];
            b[row] -= delta;
        }
    }
    Some(b)
}
