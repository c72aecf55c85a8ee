//! Dense linear algebra over an exact field, used for the undetermined-
//! coefficient solves (annihilator derivation, factor search, integration).

use num_rational::BigRational;
use num_traits::{One, Zero};

use crate::expr::Expr;

/// Exact field operations needed by row reduction.
pub trait Field: Clone + PartialEq {
    fn f_zero() -> Self;
    fn f_one() -> Self;
    fn f_is_zero(&self) -> bool;
    fn f_add(&self, other: &Self) -> Self;
    fn f_sub(&self, other: &Self) -> Self;
    fn f_mul(&self, other: &Self) -> Self;
    fn f_div(&self, other: &Self) -> Self;
    fn f_neg(&self) -> Self;
}

impl Field for BigRational {
    fn f_zero() -> Self {
        BigRational::zero()
    }
    fn f_one() -> Self {
        BigRational::one()
    }
    fn f_is_zero(&self) -> bool {
        self.is_zero()
    }
    fn f_add(&self, other: &Self) -> Self {
        self + other
    }
    fn f_sub(&self, other: &Self) -> Self {
        self - other
    }
    fn f_mul(&self, other: &Self) -> Self {
        self * other
    }
    fn f_div(&self, other: &Self) -> Self {
        self / other
    }
    fn f_neg(&self) -> Self {
        -self
    }
}

impl Field for Expr {
    fn f_zero() -> Self {
        Expr::zero()
    }
    fn f_one() -> Self {
        Expr::one()
    }
    fn f_is_zero(&self) -> bool {
        self.is_zero()
    }
    fn f_add(&self, other: &Self) -> Self {
        self.add(other)
    }
    fn f_sub(&self, other: &Self) -> Self {
        self.sub(other)
    }
    fn f_mul(&self, other: &Self) -> Self {
        self.mul(other)
    }
    fn f_div(&self, other: &Self) -> Self {
        self.div(other).expect("division by zero pivot")
    }
    fn f_neg(&self) -> Self {
        self.neg()
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug)]
pub struct Matrix<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Field> Matrix<F> {
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> &F {
        &self.data[r * self.cols + c]
    }

    fn at_mut(&mut self, r: usize, c: usize) -> &mut F {
        &mut self.data[r * self.cols + c]
    }

    /// In-place reduced row echelon form; returns pivot columns.
    pub fn rref(&mut self) -> Vec<usize> {
        let mut pivots = Vec::new();
        let mut row = 0;
        for col in 0..self.cols {
            if row >= self.rows {
                break;
            }
            let Some(p) = (row..self.rows).find(|&r| !self.at(r, col).f_is_zero()) else {
                continue;
            };
            if p != row {
                for c in 0..self.cols {
                    self.data.swap(p * self.cols + c, row * self.cols + c);
                }
            }
            let inv_pivot = F::f_one().f_div(self.at(row, col));
            for c in col..self.cols {
                let v = self.at(row, c).f_mul(&inv_pivot);
                *self.at_mut(row, c) = v;
            }
            for r in 0..self.rows {
                if r == row || self.at(r, col).f_is_zero() {
                    continue;
                }
                let factor = self.at(r, col).clone();
                for c in col..self.cols {
                    let v = self.at(r, c).f_sub(&factor.f_mul(self.at(row, c)));
                    *self.at_mut(r, c) = v;
                }
            }
            pivots.push(col);
            row += 1;
        }
        pivots
    }

    /// Basis of the right nullspace, one vector per free column.
    pub fn nullspace(mut self) -> Vec<Vec<F>> {
        let pivots = self.rref();
        let free: Vec<usize> = (0..self.cols).filter(|c| !pivots.contains(c)).collect();
        let mut basis = Vec::new();
        for &fc in &free {
            let mut v = vec![F::f_zero(); self.cols];
            v[fc] = F::f_one();
            for (r, &pc) in pivots.iter().enumerate() {
                v[pc] = self.at(r, fc).f_neg();
            }
            basis.push(v);
        }
        basis
    }

    /// Solve `self * x = b` exactly; free variables set to zero.
    /// Returns `None` when the system is inconsistent.
    pub fn solve(&self, b: &[F]) -> Option<Vec<F>> {
        assert_eq!(b.len(), self.rows);
        let mut aug = Matrix::new(
            self.rows,
            self.cols + 1,
            (0..self.rows)
                .flat_map(|r| {
                    (0..self.cols)
                        .map(move |c| self.at(r, c).clone())
                        .chain(std::iter::once(b[r].clone()))
                })
                .collect(),
        );
        let pivots = aug.rref();
        if pivots.contains(&self.cols) {
            return None;
        }
        let mut x = vec![F::f_zero(); self.cols];
        for (r, &pc) in pivots.iter().enumerate() {
            x[pc] = aug.at(r, self.cols).clone();
        }
        Some(x)
    }

    /// 2x2 determinant helper for the condition-iv check.
    pub fn det2(&self) -> F {
        assert!(self.rows == 2 && self.cols == 2);
        self.at(0, 0)
            .f_mul(self.at(1, 1))
            .f_sub(&self.at(0, 1).f_mul(self.at(1, 0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;

    fn q(n: i64) -> BigRational {
        BigRational::from(BigInt::from(n))
    }

    #[test]
    fn solve_2x2() {
        // x + y = 3, x - y = 1 → x = 2, y = 1
        let m = Matrix::new(2, 2, vec![q(1), q(1), q(1), q(-1)]);
        let x = m.solve(&[q(3), q(1)]).unwrap();
        assert_eq!(x, vec![q(2), q(1)]);
    }

    #[test]
    fn inconsistent_detected() {
        let m = Matrix::new(2, 1, vec![q(1), q(1)]);
        assert!(m.solve(&[q(1), q(2)]).is_none());
    }

    #[test]
    fn nullspace_of_rank1() {
        // [1 2; 2 4] → nullspace spanned by (-2, 1)
        let m = Matrix::new(2, 2, vec![q(1), q(2), q(2), q(4)]);
        let ns = m.nullspace();
        assert_eq!(ns.len(), 1);
        assert_eq!(ns[0], vec![q(-2), q(1)]);
    }
}
