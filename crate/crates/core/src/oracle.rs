//! Independent floating-point verification of symbolic identities at
//! random consistent jet points.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::expr::{Expr, MultiIndex, Var};
use crate::jet::{free_total_derivative_multi, Check, Context};
use crate::ops::TDOperator;

const MAX_RESAMPLES: u64 = 100;

/// 64-bit FNV-1a, used so point sampling is stable across platforms.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn hashed_value(seed: u64, tag: &str) -> f64 {
    let h = fnv1a(format!("{}#{}", seed, tag).as_bytes());
    // Uniform-ish in [-2, 2], nudged away from zero so generic
    // denominators stay clear of the guard.
    let mut x = ((h % 4_000_001) as f64) / 1_000_000.0 - 2.0;
    if x.abs() < 0.05 {
        x += if x >= 0.0 { 0.25 } else { -0.25 };
    }
    x
}

/// A numeric point of the (covered) diffiety: free coordinates receive
/// deterministic pseudo-random values in [-2, 2]; solved coordinates are
/// computed on demand from the orientation, covering relations, and
/// constant constraints, so every system identity holds at the point by
/// construction.
pub struct JetPoint<'a> {
    ctx: &'a Context,
    seed: u64,
    cache: RefCell<HashMap<Var, f64>>,
    depth: RefCell<u32>,
}

impl<'a> JetPoint<'a> {
    pub fn new(ctx: &'a Context, seed: u64) -> Self {
        JetPoint {
            ctx,
            seed,
            cache: RefCell::new(HashMap::new()),
            depth: RefCell::new(0),
        }
    }

    pub fn value(&self, v: &Var) -> Result<f64> {
        if let Some(x) = self.cache.borrow().get(v) {
            return Ok(*x);
        }
        {
            let mut d = self.depth.borrow_mut();
            *d += 1;
            if *d > 4096 {
                return Err(Error::InvalidOrientation(
                    "numeric reduction does not terminate".into(),
                ));
            }
        }
        let out = self.value_uncached(v);
        *self.depth.borrow_mut() -= 1;
        if let Ok(x) = out {
            self.cache.borrow_mut().insert(v.clone(), x);
        }
        out
    }

    fn value_uncached(&self, v: &Var) -> Result<f64> {
        match v {
            Var::Jet(j) => {
                if let Some(rep) = self.ctx.raw_replacement(j) {
                    return Ok(self.eval(&rep)?.0);
                }
                Ok(hashed_value(self.seed, &v.to_string()))
            }
            Var::Constant(_) => {
                for (cv, rule) in &self.ctx.system.const_rules {
                    if cv == v {
                        return Ok(self.eval(rule)?.0);
                    }
                }
                Ok(hashed_value(self.seed, &v.to_string()))
            }
            _ => Ok(hashed_value(self.seed, &v.to_string())),
        }
    }

    /// Evaluate an expression; returns (value, largest intermediate
    /// magnitude). Fails with `DegeneratePoint` on a guarded denominator.
    pub fn eval(&self, e: &Expr) -> Result<(f64, f64)> {
        e.eval(&mut |v| self.value(v))
    }
}

/// Draw a point deterministically, resampling away from the degenerate
/// locus; the probe expressions must all evaluate with denominators above
/// the guard.
pub fn sample_point<'a>(
    ctx: &'a Context,
    probes: &[Expr],
    seed: u64,
) -> Result<(JetPoint<'a>, u64)> {
    for attempt in 0..MAX_RESAMPLES {
        let p = JetPoint::new(ctx, seed.wrapping_add(attempt << 32));
        if probes.iter().all(|e| p.eval(e).is_ok()) {
            return Ok((p, attempt));
        }
    }
    Err(Error::DegeneratePoint)
}

/// A claim the oracle can test: an expression that should vanish on the
/// diffiety, or an operator that should reduce to zero.
#[derive(Clone, Debug)]
pub enum OracleClaim {
    Expression(Expr),
    Operator(TDOperator),
}

fn test_vector(ctx: &Context, seed: u64) -> Expr {
    // Random quadratic polynomial in the independent variables.
    let mut e = Expr::zero();
    let dirs = &ctx.ws().independents;
    for (i, d) in dirs.iter().enumerate() {
        let xi = Expr::var(Var::Indep(d.clone()));
        let c = hashed_value(seed, &format!("tv:{}", d.name));
        e = e.add(&xi.scale(&rat(c)));
        for dj in dirs.iter().skip(i) {
            let xj = Expr::var(Var::Indep(dj.clone()));
            let c = hashed_value(seed, &format!("tv:{}:{}", d.name, dj.name));
            e = e.add(&xi.mul(&xj).scale(&rat(c)));
        }
    }
    e
}

fn rat(x: f64) -> num_rational::BigRational {
    // The hashed values are exact multiples of 1e-6 (plus the 0.25 nudge),
    // so this conversion is lossless.
    let micros = (x * 1_000_000.0).round() as i64;
    num_rational::BigRational::new(micros.into(), 1_000_000.into())
}

/// Evaluate one claim at `trials` deterministic points and report the
/// worst relative residual. Operator claims are tested coefficient-wise at
/// three λ values per trial and additionally applied to a random
/// polynomial test vector.
pub fn oracle_verify(
    name: &str,
    claim: &OracleClaim,
    ctx: &Context,
    trials: u64,
    tol: f64,
    seed: u64,
) -> Result<Check> {
    // Trials are independent; run them data-parallel and fold the maxima.
    let trial_ids: Vec<u64> = (0..trials).collect();
    let per_trial = crate::par::par_map(&trial_ids, |t| -> Result<f64> {
        let mut worst = 0.0f64;
        let base = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(*t);
        match claim {
            OracleClaim::Expression(e) => {
                let mut done = false;
                for attempt in 0..MAX_RESAMPLES {
                    let p = JetPoint::new(ctx, base.wrapping_add(attempt << 32));
                    match p.eval(e) {
                        Ok((val, mag)) => {
                            worst = worst.max(val.abs() / (1.0 + mag));
                            done = true;
                            break;
                        }
                        Err(Error::DegeneratePoint) => continue,
                        Err(other) => return Err(other),
                    }
                }
                if !done {
                    return Err(Error::DegeneratePoint);
                }
            }
            OracleClaim::Operator(op) => {
                // Three λ values per trial, plus the test-vector probe.
                for l in 0..3u64 {
                    let sub = base.wrapping_add(l.wrapping_mul(0x1234567));
                    let mut done = false;
                    for attempt in 0..MAX_RESAMPLES {
                        let p = JetPoint::new(ctx, sub.wrapping_add(attempt << 32));
                        let r = (|| -> Result<f64> {
                            let mut w = 0.0f64;
                            for mat in op.terms.values() {
                                for c in mat {
                                    let (val, mag) = p.eval(c)?;
                                    w = w.max(val.abs() / (1.0 + mag));
                                }
                            }
                            let tv = test_vector(ctx, sub);
                            let applied = op.apply_free(std::slice::from_ref(&tv))?;
                            for a in &applied {
                                let (val, mag) = p.eval(a)?;
                                w = w.max(val.abs() / (1.0 + mag));
                            }
                            Ok(w)
                        })();
                        match r {
                            Ok(w) => {
                                worst = worst.max(w);
                                done = true;
                                break;
                            }
                            Err(Error::DegeneratePoint) => continue,
                            Err(other) => return Err(other),
                        }
                    }
                    if !done {
                        return Err(Error::DegeneratePoint);
                    }
                }
            }
        }
        Ok(worst)
    });
    let mut worst = 0.0f64;
    for r in per_trial {
        worst = worst.max(r?);
    }
    Ok(Check {
        name: name.to_string(),
        pass: worst < tol,
        residual: format!("max relative residual {:.3e}", worst),
    })
}

/// Cheap numeric estimate of the symmetry residual ℓ_F(U) at a few points,
/// used to discard hopeless candidates before symbolic work. Derivatives of
/// U are taken freely; solved coordinates are resolved numerically.
pub fn numeric_symmetry_residual(u: &Expr, ctx: &Context, trials: u64, seed: u64) -> Result<f64> {
    // Pre-differentiate U once per distinct jet index of the equations.
    let mut derivs: HashMap<MultiIndex, Expr> = HashMap::new();
    let mut terms: Vec<(Expr, MultiIndex)> = Vec::new();
    for f in &ctx.system.equations {
        for v in f.vars() {
            let Some(j) = v.as_jet() else { continue };
            if j.dep.nonlocal {
                continue;
            }
            let pd = f.diff(&v);
            let idx = j.idx.clone();
            derivs
                .entry(idx.clone())
                .or_insert_with(|| free_total_derivative_multi(u, &idx));
            terms.push((pd, idx));
        }
    }
    let mut worst = 0.0f64;
    for t in 0..trials {
        let base = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(t);
        let mut done = false;
        for attempt in 0..MAX_RESAMPLES {
            let p = JetPoint::new(ctx, base.wrapping_add(attempt << 32));
            let r = (|| -> Result<f64> {
                let mut sum = 0.0f64;
                let mut mag = 0.0f64;
                for (pd, idx) in &terms {
                    let (a, m1) = p.eval(pd)?;
                    let (b, m2) = p.eval(&derivs[idx])?;
                    sum += a * b;
                    mag = mag.max(m1).max(m2).max((a * b).abs());
                }
                Ok(sum.abs() / (1.0 + mag))
            })();
            match r {
                Ok(w) => {
                    worst = worst.max(w);
                    done = true;
                    break;
                }
                Err(Error::DegeneratePoint) => continue,
                Err(other) => return Err(other),
            }
        }
        if !done {
            return Err(Error::DegeneratePoint);
        }
    }
    Ok(worst)
}

/// Numeric consistency probe for a linear system over expressions: returns
/// false when `M x = b` is inconsistent at a generic point (so no exact
/// solution can exist).
pub fn numeric_consistency(
    rows: usize,
    cols: usize,
    data: &[Expr],
    rhs: &[Expr],
    ctx: &Context,
    seed: u64,
) -> Result<bool> {
    'point: for attempt in 0..MAX_RESAMPLES {
        let p = JetPoint::new(ctx, seed.wrapping_add(attempt << 32));
        let mut m = vec![0.0f64; rows * (cols + 1)];
        for r in 0..rows {
            for c in 0..cols {
                match p.eval(&data[r * cols + c]) {
                    Ok((v, _)) => m[r * (cols + 1) + c] = v,
                    Err(Error::DegeneratePoint) => continue 'point,
                    Err(e) => return Err(e),
                }
            }
            match p.eval(&rhs[r]) {
                Ok((v, _)) => m[r * (cols + 1) + cols] = v,
                Err(Error::DegeneratePoint) => continue 'point,
                Err(e) => return Err(e),
            }
        }
        // Gaussian elimination with partial pivoting on the augmented
        // matrix; inconsistent iff a zero coefficient row has nonzero rhs.
        let w = cols + 1;
        let mut row = 0;
        for col in 0..cols {
            let Some(p_) = (row..rows)
                .filter(|&r| m[r * w + col].abs() > 1e-9)
                .max_by(|&x, &y| m[x * w + col].abs().total_cmp(&m[y * w + col].abs()))
            else {
                continue;
            };
            for c in 0..w {
                m.swap(p_ * w + c, row * w + c);
            }
            let piv = m[row * w + col];
            for r in 0..rows {
                if r == row {
                    continue;
                }
                let f = m[r * w + col] / piv;
                if f != 0.0 {
                    for c in col..w {
                        m[r * w + c] -= f * m[row * w + c];
                    }
                }
            }
            row += 1;
            if row >= rows {
                break;
            }
        }
        for r in row..rows {
            let coeff_mag: f64 = (0..cols).map(|c| m[r * w + c].abs()).fold(0.0, f64::max);
            if coeff_mag < 1e-9 && m[r * w + cols].abs() > 1e-6 {
                return Ok(false);
            }
        }
        return Ok(true);
    }
    Err(Error::DegeneratePoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::dsl::parse_expr;
    use crate::jet::Context;

    fn ctx(name: &str) -> Context {
        let wf = corpus::load_corpus(name).unwrap();
        Context::with_covering(wf.system.clone(), wf.covering.clone())
    }

    #[test]
    fn pavlov_point_satisfies_equation() {
        let c = ctx("pavlov");
        let p = JetPoint::new(&c, 1);
        let (val, mag) = p.eval(&c.system.equations[0]).unwrap();
        assert!(val.abs() < 1e-12 * (1.0 + mag), "residual {}", val);
    }

    #[test]
    fn heavenly_constraint_holds() {
        let c = ctx("heavenly");
        let p = JetPoint::new(&c, 7);
        let e = parse_expr("a + b + c", c.ws()).unwrap();
        let (val, _) = p.eval(&e).unwrap();
        assert!(val.abs() < 1e-12, "a+b+c = {}", val);
    }

    #[test]
    fn same_seed_is_deterministic() {
        let c = ctx("mas");
        let e = &c.system.equations[0];
        // Probe a generic jet through the equation's variables.
        let p1 = JetPoint::new(&c, 42);
        let p2 = JetPoint::new(&c, 42);
        let u = parse_expr("u[x]*u[y,z] - u[t]", c.ws()).unwrap();
        assert_eq!(p1.eval(&u).unwrap().0, p2.eval(&u).unwrap().0);
        assert!(p1.eval(e).unwrap().0.abs() < 1e-12);
    }

    #[test]
    fn zero_claim_passes() {
        let c = ctx("pavlov");
        let check = oracle_verify(
            "zero",
            &OracleClaim::Expression(Expr::zero()),
            &c,
            5,
            1e-9,
            3,
        )
        .unwrap();
        assert!(check.pass);
        assert!(check.residual.contains("0.000e0"));
    }

    #[test]
    fn commutator_claim_passes_and_flipped_fails() {
        let wf = corpus::load_corpus("pavlov").unwrap();
        let c = Context::new(wf.system.clone());
        let a1 = wf.op("A1").unwrap().clone();
        let a2 = wf.op("A2").unwrap().clone();
        let comm = a1.commutator(&a2).unwrap();
        let ok = oracle_verify("i", &OracleClaim::Operator(comm), &c, 20, 1e-9, 5).unwrap();
        assert!(ok.pass, "{}", ok.residual);

        // Planted failure: condition ii residual for the sign-flipped B1.
        let bad = corpus::load_fixture("pavlov_flipped").unwrap();
        let lf = crate::jet::linearize(&c.system.equations, &c).unwrap();
        let ab = bad
            .op("A1")
            .unwrap()
            .compose(bad.op("B2").unwrap())
            .unwrap()
            .sub(&bad.op("A2").unwrap().compose(bad.op("B1").unwrap()).unwrap());
        let resid = ab.add(&lf); // direct condition ii with L = -1
        let r = oracle_verify("ii", &OracleClaim::Operator(resid), &c, 5, 1e-9, 5).unwrap();
        assert!(!r.pass, "{}", r.residual);
    }

    #[test]
    fn numeric_residual_separates_candidates() {
        let c = ctx("pavlov");
        let good = parse_expr("1/psi[x]", c.ws()).unwrap();
        let bad = parse_expr("u[x]^2", c.ws()).unwrap();
        assert!(numeric_symmetry_residual(&good, &c, 3, 9).unwrap() < 1e-9);
        assert!(numeric_symmetry_residual(&bad, &c, 3, 9).unwrap() > 1e-3);
    }
}
