//! Matrix-coefficient operators in total derivatives: composition,
//! commutator, formal adjoint, application, and lambda-splitting.

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use num_integer::binomial;
use num_rational::BigRational;

use crate::error::{Error, Result};
use crate::expr::{Dir, Expr, MultiIndex};
use crate::jet::{free_total_derivative_multi, Context};

/// An operator sum of matrix coefficients against total-derivative
/// monomials; the empty multi-index is the zero-order block. Stored fully
/// expanded: no unresolved D-compositions remain.
#[derive(Clone, Debug, PartialEq)]
pub struct TDOperator {
    pub rows: usize,
    pub cols: usize,
    /// Row-major rows x cols coefficient matrix per derivative monomial.
    pub terms: BTreeMap<MultiIndex, Vec<Expr>>,
}

impl TDOperator {
    pub fn zero(rows: usize, cols: usize) -> Self {
        TDOperator {
            rows,
            cols,
            terms: BTreeMap::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut op = TDOperator::zero(n, n);
        for i in 0..n {
            op.add_term(MultiIndex::empty(), i, i, &Expr::one());
        }
        op
    }

    /// Scalar zero-order operator (multiplication by `e`).
    pub fn scalar(e: Expr) -> Self {
        let mut op = TDOperator::zero(1, 1);
        op.add_term(MultiIndex::empty(), 0, 0, &e);
        op
    }

    /// The scalar total derivative D_dir.
    pub fn d(dir: &Dir) -> Self {
        let mut op = TDOperator::zero(1, 1);
        op.add_term(MultiIndex::from_dirs(vec![dir.clone()]), 0, 0, &Expr::one());
        op
    }

    pub fn order(&self) -> usize {
        self.terms.keys().map(|i| i.order()).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coeff(&self, idx: &MultiIndex, r: usize, c: usize) -> Expr {
        self.terms
            .get(idx)
            .map(|m| m[r * self.cols + c].clone())
            .unwrap_or_else(Expr::zero)
    }

    pub fn add_term(&mut self, idx: MultiIndex, r: usize, c: usize, e: &Expr) {
        if e.is_zero() {
            return;
        }
        let cols = self.cols;
        let mat = self
            .terms
            .entry(idx.clone())
            .or_insert_with(|| vec![Expr::zero(); self.rows * cols]);
        mat[r * cols + c] = mat[r * cols + c].add(e);
        if mat.iter().all(|x| x.is_zero()) {
            self.terms.remove(&idx);
        }
    }

    fn prune(&mut self) {
        self.terms.retain(|_, m| m.iter().any(|x| !x.is_zero()));
    }

    pub fn add(&self, other: &TDOperator) -> TDOperator {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (idx, mat) in &other.terms {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    out.add_term(idx.clone(), r, c, &mat[r * self.cols + c]);
                }
            }
        }
        out
    }

    pub fn neg(&self) -> TDOperator {
        TDOperator {
            rows: self.rows,
            cols: self.cols,
            terms: self
                .terms
                .iter()
                .map(|(i, m)| (i.clone(), m.iter().map(|e| e.neg()).collect()))
                .collect(),
        }
    }

    pub fn sub(&self, other: &TDOperator) -> TDOperator {
        self.add(&other.neg())
    }

    pub fn scale(&self, e: &Expr) -> TDOperator {
        let mut out = TDOperator {
            rows: self.rows,
            cols: self.cols,
            terms: self
                .terms
                .iter()
                .map(|(i, m)| (i.clone(), m.iter().map(|x| x.mul(e)).collect()))
                .collect(),
        };
        out.prune();
        out
    }

    /// Operator product expanded by the Leibniz rule:
    /// A·D^I ∘ B·D^J = Σ_{K ⊆ I} C(I,K) · A·(D^K B) · D^{(I−K)∪J}.
    pub fn compose(&self, other: &TDOperator) -> Result<TDOperator> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "compose: {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = TDOperator::zero(self.rows, other.cols);
        for (i_idx, a_mat) in &self.terms {
            for (k_idx, coeff, rest) in sub_multisets(i_idx) {
                for (j_idx, b_mat) in &other.terms {
                    // Matrix product A * D^K(B).
                    let target = rest.union(j_idx);
                    for r in 0..self.rows {
                        for c in 0..other.cols {
                            let mut acc = Expr::zero();
                            for m in 0..self.cols {
                                let a = &a_mat[r * self.cols + m];
                                if a.is_zero() {
                                    continue;
                                }
                                let b = &b_mat[m * other.cols + c];
                                if b.is_zero() {
                                    continue;
                                }
                                let db = free_total_derivative_multi(b, &k_idx);
                                acc = acc.add(&a.mul(&db));
                            }
                            if !acc.is_zero() {
                                out.add_term(
                                    target.clone(),
                                    r,
                                    c,
                                    &acc.scale(&BigRational::from(coeff.clone())),
                                );
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn commutator(&self, other: &TDOperator) -> Result<TDOperator> {
        Ok(self.compose(other)?.sub(&other.compose(self)?))
    }

    fn transpose_mat(mat: &[Expr], rows: usize, cols: usize) -> Vec<Expr> {
        let mut out = vec![Expr::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = mat[r * cols + c].clone();
            }
        }
        out
    }

    /// Formal adjoint: (Q^0)^T + Σ (−1)^k D^J ∘ (Q^J)^T, fully expanded.
    pub fn adjoint(&self) -> TDOperator {
        let mut out = TDOperator::zero(self.cols, self.rows);
        for (idx, mat) in &self.terms {
            let t = Self::transpose_mat(mat, self.rows, self.cols);
            let sign = if idx.order() % 2 == 0 { 1 } else { -1 };
            // Expand D^J ∘ C = Σ_{K ⊆ J} C(J,K) (D^K C) D^{J−K}.
            for (k_idx, coeff, rest) in sub_multisets(idx) {
                let factor = BigRational::from(BigInt::from(sign) * coeff);
                for r in 0..self.cols {
                    for c in 0..self.rows {
                        let e = &t[r * self.rows + c];
                        if e.is_zero() {
                            continue;
                        }
                        let de = free_total_derivative_multi(e, &k_idx);
                        out.add_term(rest.clone(), r, c, &de.scale(&factor));
                    }
                }
            }
        }
        out.prune();
        out
    }

    /// Apply to a vector by iterated covering-aware total derivatives;
    /// result in normal form.
    pub fn apply_to(&self, v: &[Expr], ctx: &Context) -> Result<Vec<Expr>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "apply: operator has {} columns, vector has {} components",
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![Expr::zero(); self.rows];
        for (idx, mat) in &self.terms {
            for (c, vc) in v.iter().enumerate() {
                let dv = ctx.total_derivative_multi(vc, idx)?;
                for (r, o) in out.iter_mut().enumerate() {
                    let a = &mat[r * self.cols + c];
                    if !a.is_zero() {
                        *o = o.add(&a.mul(&dv));
                    }
                }
            }
        }
        out.iter().map(|e| ctx.normal_form(e)).collect()
    }

    /// Apply on the free jet space (no reduction).
    pub fn apply_free(&self, v: &[Expr]) -> Result<Vec<Expr>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "apply: operator has {} columns, vector has {} components",
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![Expr::zero(); self.rows];
        for (idx, mat) in &self.terms {
            for (c, vc) in v.iter().enumerate() {
                let dv = free_total_derivative_multi(vc, idx);
                for (r, o) in out.iter_mut().enumerate() {
                    let a = &mat[r * self.cols + c];
                    if !a.is_zero() {
                        *o = o.add(&a.mul(&dv));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Normal-form every coefficient, dropping vanished terms.
    pub fn normalized(&self, ctx: &Context) -> Result<TDOperator> {
        let mut out = TDOperator::zero(self.rows, self.cols);
        for (idx, mat) in &self.terms {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    let e = ctx.normal_form(&mat[r * self.cols + c])?;
                    out.add_term(idx.clone(), r, c, &e);
                }
            }
        }
        Ok(out)
    }

    /// Zero modulo the system (identically in lambda)?
    pub fn is_zero_mod(&self, ctx: &Context) -> Result<bool> {
        Ok(self.normalized(ctx)?.is_zero())
    }

    pub fn lambda_degree(&self) -> u32 {
        self.terms
            .values()
            .flat_map(|m| m.iter())
            .map(|e| {
                let (n, d) = e.lambda_degree();
                n.max(d)
            })
            .max()
            .unwrap_or(0)
    }

    /// Coefficient operator at lambda^k (coefficients must be lambda-free
    /// in their denominators).
    pub fn lambda_coeff(&self, k: u32) -> Result<TDOperator> {
        let mut out = TDOperator::zero(self.rows, self.cols);
        for (idx, mat) in &self.terms {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    let e = mat[r * self.cols + c].lambda_coeff(k)?;
                    out.add_term(idx.clone(), r, c, &e);
                }
            }
        }
        Ok(out)
    }

    /// Split Q = lambda*A − B; requires lambda-degree ≤ 1.
    pub fn lambda_split(&self) -> Result<(TDOperator, TDOperator)> {
        if self.lambda_degree() > 1 {
            return Err(Error::LambdaDegree(format!(
                "lambda-degree {} > 1; reduce first",
                self.lambda_degree()
            )));
        }
        let a = self.lambda_coeff(1)?;
        let b = self.lambda_coeff(0)?.neg();
        Ok((a, b))
    }

    /// The scalar coefficient of D_dir (first-order term), for condition iv.
    pub fn first_order_coeff(&self, dir: &Dir) -> Expr {
        self.coeff(&MultiIndex::from_dirs(vec![dir.clone()]), 0, 0)
    }

    /// Directions carried by first-order terms with nonzero coefficients.
    pub fn support_dirs(&self) -> Vec<Dir> {
        let mut out = Vec::new();
        for idx in self.terms.keys() {
            for d in &idx.0 {
                if !out.contains(d) {
                    out.push(d.clone());
                }
            }
        }
        out.sort();
        out
    }
}

impl fmt::Display for TDOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let mut first = true;
        for (idx, mat) in self.terms.iter().rev() {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            if self.rows == 1 && self.cols == 1 {
                write!(f, "({})", mat[0])?;
            } else {
                write!(f, "[")?;
                for r in 0..self.rows {
                    if r > 0 {
                        write!(f, "; ")?;
                    }
                    for c in 0..self.cols {
                        if c > 0 {
                            write!(f, ", ")?;
                        }
                        write!(f, "{}", mat[r * self.cols + c])?;
                    }
                }
                write!(f, "]")?;
            }
            for d in &idx.0 {
                write!(f, "*D[{}]", d.name)?;
            }
        }
        Ok(())
    }
}

/// Enumerate sub-multisets K of I with the multiset binomial coefficient
/// C(I,K) and the complement I−K.
fn sub_multisets(idx: &MultiIndex) -> Vec<(MultiIndex, BigInt, MultiIndex)> {
    let counts = idx.counts();
    let mut out: Vec<(Vec<Dir>, BigInt, Vec<Dir>)> =
        vec![(Vec::new(), BigInt::from(1), Vec::new())];
    for (d, n) in counts {
        let mut next = Vec::new();
        for (k_part, coeff, rest) in &out {
            for k in 0..=n {
                let mut kp = k_part.clone();
                kp.extend(std::iter::repeat(d.clone()).take(k as usize));
                let mut rp = rest.clone();
                rp.extend(std::iter::repeat(d.clone()).take((n - k) as usize));
                next.push((kp, coeff * binomial(BigInt::from(n), BigInt::from(k)), rp));
            }
        }
        out = next;
    }
    out.into_iter()
        .map(|(k, c, r)| (MultiIndex::from_dirs(k), c, MultiIndex::from_dirs(r)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::expr::{JetVar, Var};

    fn pavlov_ctx() -> Context {
        Context::new(corpus::load_system("pavlov").unwrap())
    }

    fn jet(ctx: &Context, dep: &str, dirs: &[&str]) -> Expr {
        let d = ctx.ws().dep(dep).unwrap().clone();
        let idx = MultiIndex::from_dirs(
            dirs.iter().map(|n| ctx.ws().dir(n).unwrap().clone()).collect(),
        );
        Expr::var(Var::Jet(JetVar { dep: d, idx }))
    }

    #[test]
    fn compose_dx_with_multiplication() {
        // D_x ∘ u = u D_x + u_x
        let ctx = pavlov_ctx();
        let x = ctx.ws().dir("x").unwrap().clone();
        let dx = TDOperator::d(&x);
        let mu = TDOperator::scalar(jet(&ctx, "u", &[]));
        let p = dx.compose(&mu).unwrap();
        assert_eq!(p.coeff(&MultiIndex::from_dirs(vec![x.clone()]), 0, 0), jet(&ctx, "u", &[]));
        assert_eq!(p.coeff(&MultiIndex::empty(), 0, 0), jet(&ctx, "u", &["x"]));
    }

    #[test]
    fn commutators() {
        let ctx = pavlov_ctx();
        let x = ctx.ws().dir("x").unwrap().clone();
        let y = ctx.ws().dir("y").unwrap().clone();
        let dx = TDOperator::d(&x);
        let dy = TDOperator::d(&y);
        assert!(dx.commutator(&dy).unwrap().is_zero());
        // [D_x, u D_y] = u_x D_y
        let udy = TDOperator::scalar(jet(&ctx, "u", &[])).compose(&dy).unwrap();
        let c = dx.commutator(&udy).unwrap();
        assert_eq!(c.coeff(&MultiIndex::from_dirs(vec![y.clone()]), 0, 0), jet(&ctx, "u", &["x"]));
        assert_eq!(c.terms.len(), 1);
    }

    #[test]
    fn adjoint_of_dx_and_u_dx() {
        let ctx = pavlov_ctx();
        let x = ctx.ws().dir("x").unwrap().clone();
        let dx = TDOperator::d(&x);
        assert_eq!(dx.adjoint(), dx.neg());
        // (u D_x)† = −u D_x − u_x
        let udx = TDOperator::scalar(jet(&ctx, "u", &[])).compose(&dx).unwrap();
        let adj = udx.adjoint();
        assert_eq!(adj.coeff(&MultiIndex::from_dirs(vec![x.clone()]), 0, 0), jet(&ctx, "u", &[]).neg());
        assert_eq!(adj.coeff(&MultiIndex::empty(), 0, 0), jet(&ctx, "u", &["x"]).neg());
    }

    #[test]
    fn adjoint_is_involutive() {
        let ctx = pavlov_ctx();
        let x = ctx.ws().dir("x").unwrap().clone();
        let y = ctx.ws().dir("y").unwrap().clone();
        let q = TDOperator::scalar(jet(&ctx, "u", &["x"]))
            .compose(&TDOperator::d(&x))
            .unwrap()
            .compose(&TDOperator::d(&y))
            .unwrap()
            .add(&TDOperator::scalar(jet(&ctx, "u", &["y"])));
        assert_eq!(q.adjoint().adjoint(), q);
    }

    #[test]
    fn lambda_split_sign_convention() {
        let ctx = pavlov_ctx();
        let x = ctx.ws().dir("x").unwrap().clone();
        let y = ctx.ws().dir("y").unwrap().clone();
        // Q = −D_y + (lambda − u_x) D_x + u_xx  →  A = D_x,
        // B = D_y + u_x D_x − u_xx
        let l = Expr::var(Var::Lambda);
        let q = TDOperator::d(&y)
            .neg()
            .add(&TDOperator::scalar(l.sub(&jet(&ctx, "u", &["x"]))).compose(&TDOperator::d(&x)).unwrap())
            .add(&TDOperator::scalar(jet(&ctx, "u", &["x", "x"])));
        let (a, b) = q.lambda_split().unwrap();
        assert_eq!(a, TDOperator::d(&x));
        let want_b = TDOperator::d(&y)
            .add(&TDOperator::scalar(jet(&ctx, "u", &["x"])).compose(&TDOperator::d(&x)).unwrap())
            .sub(&TDOperator::scalar(jet(&ctx, "u", &["x", "x"])));
        assert_eq!(b, want_b);
    }

    #[test]
    fn lambda_free_split() {
        let ctx = pavlov_ctx();
        let x = ctx.ws().dir("x").unwrap().clone();
        let q = TDOperator::d(&x);
        let (a, b) = q.lambda_split().unwrap();
        assert!(a.is_zero());
        assert_eq!(b, q.neg());
    }
}
