//! Differential coverings: nonlocal variables defined by derivative
//! relations, compatibility verification, and the vector-field covering.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::expr::{DepRef, Dir, Expr, JetVar, MultiIndex, Var};
use crate::jet::{Check, Context, PDESystem};
use crate::ops::TDOperator;

/// A scalar nonlocal variable with one defining relation per related
/// direction; derivatives in the remaining (free) directions are new jet
/// coordinates.
#[derive(Clone, Debug)]
pub struct NonlocalVariable {
    pub dep: DepRef,
    /// direction -> right side of d(var)/d(direction).
    pub relations: BTreeMap<Dir, Expr>,
}

impl NonlocalVariable {
    pub fn free_directions<'a>(&self, all: &'a [Dir]) -> Vec<&'a Dir> {
        all.iter().filter(|d| !self.relations.contains_key(d)).collect()
    }
}

/// A set of nonlocal variables over one system.
#[derive(Clone, Debug, Default)]
pub struct Covering {
    pub variables: Vec<NonlocalVariable>,
}

impl Covering {
    pub fn variable(&self, name: &str) -> Option<&NonlocalVariable> {
        self.variables.iter().find(|v| &*v.dep.name == name)
    }

    /// Extend the covering with a new variable.
    pub fn define_nonlocal(&self, v: NonlocalVariable) -> Result<Covering> {
        if self.variable(&v.dep.name).is_some() {
            return Err(Error::Invalid(format!(
                "nonlocal variable {} already defined",
                v.dep.name
            )));
        }
        let mut out = self.clone();
        out.variables.push(v);
        Ok(out)
    }
}

/// Verify that every pair of related directions of every nonlocal variable
/// has a vanishing cross-derivative residual modulo the system, the
/// covering itself, and lambda-powers.
pub fn compatibility_check(cov: &Covering, system: Arc<PDESystem>) -> Result<Vec<Check>> {
    let ctx = Context::with_covering(system, cov.clone());
    let mut checks = Vec::new();
    for v in &cov.variables {
        let dirs: Vec<&Dir> = v.relations.keys().collect();
        for (a, &di) in dirs.iter().enumerate() {
            for &dj in dirs.iter().skip(a + 1) {
                // D_i(rel_j) − D_j(rel_i), both via covering-aware
                // derivatives, must vanish identically in lambda.
                let lhs = ctx.total_derivative(&v.relations[dj], di)?;
                let rhs = ctx.total_derivative(&v.relations[di], dj)?;
                let residual = ctx.normal_form(&lhs.sub(&rhs))?;
                checks.push(Check::of_residual(
                    format!("{}:D[{}]D[{}]", v.dep.name, di.name, dj.name),
                    &residual,
                ));
            }
        }
    }
    Ok(checks)
}

/// Build the covering for the components of a commuting vector field
/// Z = Σ ζ^j D_j, from [X_i, Z] = 0 for two pure vector fields X_i with
/// designated eliminated directions.
///
/// For X = Σ a^k D_k the condition reads, per direction j:
/// Σ_k a^k D_k(ζ^j) = Σ_k ζ^k D_k(a^j), solved for ζ^j in the eliminated
/// direction of each X_i.
pub fn build_vector_covering(
    xs: [&TDOperator; 2],
    eliminated: [&Dir; 2],
    ctx: &Context,
) -> Result<Vec<NonlocalVariable>> {
    for x in xs {
        if x.rows != 1 || x.cols != 1 {
            return Err(Error::DimensionMismatch(
                "vector covering needs scalar operators".into(),
            ));
        }
        if !x.coeff(&MultiIndex::empty(), 0, 0).is_zero() {
            return Err(Error::Invalid(
                "vector covering needs pure vector fields (zero-order term present)".into(),
            ));
        }
        if x.order() > 1 {
            return Err(Error::Invalid(
                "vector covering needs first-order vector fields".into(),
            ));
        }
    }
    let all = ctx.ws().independents.clone();
    // Fresh component symbols zeta1..zetad.
    let comps: Vec<DepRef> = (0..all.len())
        .map(|j| DepRef {
            nonlocal: true,
            ord: 100 + j as u8,
            name: Arc::from(format!("zeta{}", j + 1)),
        })
        .collect();
    let zeta = |j: usize| Expr::var(Var::Jet(JetVar { dep: comps[j].clone(), idx: MultiIndex::empty() }));
    let zeta_d = |j: usize, d: &Dir| {
        Expr::var(Var::Jet(JetVar {
            dep: comps[j].clone(),
            idx: MultiIndex::from_dirs(vec![d.clone()]),
        }))
    };
    let mut vars: Vec<NonlocalVariable> = comps
        .iter()
        .map(|dep| NonlocalVariable {
            dep: dep.clone(),
            relations: BTreeMap::new(),
        })
        .collect();
    for (x, elim) in xs.iter().zip(eliminated.iter()) {
        let a = |k: &Dir| x.first_order_coeff(k);
        let a_elim = a(elim);
        if a_elim.is_zero() {
            return Err(Error::Invalid(format!(
                "eliminated direction {} has zero coefficient",
                elim.name
            )));
        }
        for (j, dj) in all.iter().enumerate() {
            // rhs_j = Σ_k ζ^k D_k(a^j) − Σ_{k ≠ elim} a^k ζ^j_k,
            // divided by a^elim.
            let mut rhs = Expr::zero();
            for (k, dk) in all.iter().enumerate() {
                let daj = ctx.total_derivative(&a(dj), dk)?;
                if !daj.is_zero() {
                    rhs = rhs.add(&zeta(k).mul(&daj));
                }
                if dk != *elim {
                    let ak = a(dk);
                    if !ak.is_zero() {
                        rhs = rhs.sub(&ak.mul(&zeta_d(j, dk)));
                    }
                }
            }
            let rel = rhs.div(&a_elim)?;
            vars[j].relations.insert((*elim).clone(), rel);
        }
    }
    Ok(vars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    #[test]
    fn pavlov_covering_is_compatible() {
        let (sys, cov) = corpus::load_with_covering("pavlov").unwrap();
        let checks = compatibility_check(&cov, sys).unwrap();
        assert!(!checks.is_empty());
        for c in &checks {
            assert!(c.pass, "{} residual {}", c.name, c.residual);
        }
    }

    #[test]
    fn mas_covering_is_compatible() {
        let (sys, cov) = corpus::load_with_covering("mas").unwrap();
        let checks = compatibility_check(&cov, sys).unwrap();
        assert!(checks.iter().all(|c| c.pass));
    }

    #[test]
    fn corrupted_relation_is_rejected() {
        let (sys, cov) = corpus::load_with_covering("pavlov").unwrap();
        let mut bad = cov.clone();
        let (dir, rel) = bad.variables[0]
            .relations
            .iter()
            .next()
            .map(|(d, e)| (d.clone(), e.clone()))
            .unwrap();
        bad.variables[0].relations.insert(dir, rel.neg());
        let checks = compatibility_check(&bad, sys).unwrap();
        assert!(checks.iter().any(|c| !c.pass));
    }

    #[test]
    fn constant_fields_give_zero_relations() {
        let sys = corpus::load_system("pavlov").unwrap();
        let ctx = Context::new(sys);
        let x = ctx.ws().dir("x").unwrap().clone();
        let y = ctx.ws().dir("y").unwrap().clone();
        let dx = TDOperator::d(&x);
        let dy = TDOperator::d(&y);
        let vars = build_vector_covering([&dx, &dy], [&x, &y], &ctx).unwrap();
        for v in &vars {
            for rel in v.relations.values() {
                assert!(rel.is_zero());
            }
        }
    }

    #[test]
    fn zero_order_term_rejected() {
        let sys = corpus::load_system("pavlov").unwrap();
        let ctx = Context::new(sys);
        let x = ctx.ws().dir("x").unwrap().clone();
        let y = ctx.ws().dir("y").unwrap().clone();
        let bad = TDOperator::d(&x).add(&TDOperator::scalar(Expr::one()));
        let err = build_vector_covering([&bad, &TDOperator::d(&y)], [&x, &y], &ctx);
        assert!(err.is_err());
    }
}
