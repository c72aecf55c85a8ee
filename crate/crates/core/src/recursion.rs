//! Verification of the recursion-operator conditions, factor search for the
//! L and M operators, the induced Lax pair, and application of a verified
//! operator to a seed symmetry.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use num_rational::BigRational;
use num_traits::One;

use crate::covering::{compatibility_check, Covering, NonlocalVariable};
use crate::dsl::{ROMode, WorkspaceFile};
use crate::error::{Error, Result};
use crate::expr::{DepRef, Dir, Expr, JetVar, Mono, MultiIndex, Poly, Var};
use crate::jet::{check_invariance, linearize, Check, Context, InvarianceMode};
use crate::linalg::Matrix;
use crate::ops::TDOperator;

/// The sextuple of a recursion-operator candidate, plus solve directions.
#[derive(Clone, Debug)]
pub struct ROSpec {
    pub a: [TDOperator; 2],
    pub b: [TDOperator; 2],
    pub l: Option<TDOperator>,
    pub m: Option<TDOperator>,
    pub p: Dir,
    pub q: Dir,
    pub mode: ROMode,
}

impl ROSpec {
    /// Resolve the `ro` block of a parsed workspace file.
    pub fn from_file(wf: &WorkspaceFile) -> Result<ROSpec> {
        let rb = wf
            .ro
            .as_ref()
            .ok_or_else(|| Error::Invalid("file has no ro block".into()))?;
        let get = |n: &str| {
            wf.op(n)
                .cloned()
                .ok_or_else(|| Error::UnknownSymbol(n.to_string()))
        };
        let a = [get(&rb.a[0])?, get(&rb.a[1])?];
        let b = [get(&rb.b[0])?, get(&rb.b[1])?];
        let (p, q) = match &rb.solve_dirs {
            Some((p, q)) => (p.clone(), q.clone()),
            None => {
                // fall back to the first two directions in the A-support
                let dirs: Vec<Dir> = a[0]
                    .support_dirs()
                    .into_iter()
                    .chain(a[1].support_dirs())
                    .collect();
                let mut uniq: Vec<Dir> = Vec::new();
                for d in dirs {
                    if !uniq.contains(&d) {
                        uniq.push(d);
                    }
                }
                if uniq.len() < 2 {
                    return Err(Error::Invalid(
                        "cannot infer solve directions; add a solve_dirs line".into(),
                    ));
                }
                (uniq[0].clone(), uniq[1].clone())
            }
        };
        Ok(ROSpec {
            a,
            b,
            l: rb.l.clone(),
            m: rb.m.clone(),
            p,
            q,
            mode: rb.mode,
        })
    }
}

/// Per-condition verification outcome with the factors that were used.
#[derive(Clone, Debug)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
    pub l: Option<TDOperator>,
    pub m: Option<TDOperator>,
}

impl VerificationReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn op_residual_check(name: &str, diff: &TDOperator, ctx: &Context) -> Result<Check> {
    let nf = diff.normalized(ctx)?;
    Ok(Check {
        name: name.to_string(),
        pass: nf.is_zero(),
        residual: nf.to_string(),
    })
}

/// Search for a factor F with `target = F ∘ base` modulo the system, first
/// zero-order, then order 1 with undetermined rational-function
/// coefficients solved over the expression field.
pub fn find_factor(target: &TDOperator, base: &TDOperator, ctx: &Context) -> Result<TDOperator> {
    if target.rows != 1 || target.cols != 1 || base.rows != 1 || base.cols != 1 {
        return Err(Error::NoFactor(
            "factor search is implemented for scalar operators".into(),
        ));
    }
    let base_n = base.normalized(ctx)?;
    let target_n = target.normalized(ctx)?;
    if base_n.is_zero() {
        return Err(Error::NoFactor("factor base reduces to zero".into()));
    }
    if target_n.is_zero() {
        return Ok(TDOperator::scalar(Expr::zero()));
    }
    // Zero-order candidate from the leading-coefficient ratio.
    let lead = base_n.terms.keys().next_back().unwrap().clone();
    let bl = base_n.coeff(&lead, 0, 0);
    if !bl.is_zero() {
        let c = ctx.normal_form(&target_n.coeff(&lead, 0, 0).div(&bl)?)?;
        let cand = TDOperator::scalar(c);
        let diff = target_n.sub(&cand.compose(&base_n)?);
        if diff.is_zero_mod(ctx)? {
            return Ok(cand);
        }
    }
    // Order-1 fallback: F = f0 + Σ f_k D_k. The unknowns enter the
    // composition linearly, so this is one linear solve over the
    // rational-function field.
    let dirs = ctx.ws().independents.clone();
    let mut basis: Vec<(TDOperator, TDOperator)> = Vec::new(); // (F piece, F∘base)
    basis.push((TDOperator::scalar(Expr::one()), base_n.clone()));
    for d in &dirs {
        let fd = TDOperator::d(d);
        basis.push((fd.clone(), fd.compose(&base_n)?.normalized(ctx)?));
    }
    let mut rows: BTreeSet<MultiIndex> = BTreeSet::new();
    for (_, g) in &basis {
        rows.extend(g.terms.keys().cloned());
    }
    rows.extend(target_n.terms.keys().cloned());
    let rows: Vec<MultiIndex> = rows.into_iter().collect();
    let mut data = Vec::with_capacity(rows.len() * basis.len());
    let mut rhs = Vec::with_capacity(rows.len());
    for k in &rows {
        for (_, g) in &basis {
            data.push(g.coeff(k, 0, 0));
        }
        rhs.push(target_n.coeff(k, 0, 0));
    }
    let mat = Matrix::new(rows.len(), basis.len(), data);
    let sol = mat.solve(&rhs);
    let sol = sol.ok_or_else(|| {
        Error::NoFactor(format!(
            "no order-1 factor: residual target {}",
            target_n
        ))
    })?;
    let mut f = TDOperator::zero(1, 1);
    for ((piece, _), c) in basis.iter().zip(sol.iter()) {
        let c = ctx.normal_form(c)?;
        f = f.add(&TDOperator::scalar(c).compose(piece)?);
    }
    let diff = target_n.sub(&f.compose(&base_n)?);
    if !diff.is_zero_mod(ctx)? {
        return Err(Error::NoFactor(format!(
            "order-1 factor candidate fails verification: residual {}",
            diff.normalized(ctx)?
        )));
    }
    Ok(f)
}

/// Find both factors for the mode's conditions ii and iii; condition i is
/// assumed to hold already.
pub fn find_factors(
    a: &[TDOperator; 2],
    b: &[TDOperator; 2],
    ctx: &Context,
    mode: ROMode,
) -> Result<(TDOperator, TDOperator)> {
    let lf = linearize(&ctx.system.equations, ctx)?;
    let ab = a[0].compose(&b[1])?.sub(&a[1].compose(&b[0])?);
    let ba = b[0].compose(&a[1])?.sub(&b[1].compose(&a[0])?);
    match mode {
        ROMode::Direct => {
            let l = find_factor(&ab, &lf, ctx)?;
            let m = find_factor(&lf, &ba, ctx)?;
            Ok((l, m))
        }
        ROMode::Adjoint => {
            let lfa = lf.adjoint();
            let l = find_factor(&lfa, &ba, ctx)?;
            let m = find_factor(&ab, &lfa, ctx)?;
            Ok((l, m))
        }
    }
}

/// Check the four defining conditions of a recursion operator (direct or
/// adjoint form). Supplied L and M are verified, never trusted; missing
/// factors are searched for.
pub fn verify(spec: &ROSpec, ctx: &Context) -> Result<VerificationReport> {
    let mut checks = Vec::new();
    let [a1, a2] = &spec.a;
    let [b1, b2] = &spec.b;

    // i) [A1, A2] = 0
    checks.push(op_residual_check("i", &a1.commutator(a2)?, ctx)?);

    let lf = linearize(&ctx.system.equations, ctx)?;
    let ab = a1.compose(b2)?.sub(&a2.compose(b1)?);
    let ba = b1.compose(a2)?.sub(&b2.compose(a1)?);

    // ii and iii with their factor operators.
    let (ii_target, ii_base, iii_target, iii_base) = match spec.mode {
        ROMode::Direct => (ab.clone(), lf.clone(), lf.clone(), ba.clone()),
        ROMode::Adjoint => {
            let lfa = lf.adjoint();
            (lfa.clone(), ba.clone(), ab.clone(), lfa.clone())
        }
    };
    let l = match &spec.l {
        Some(l) => l.clone(),
        None => match find_factor(&ii_target, &ii_base, ctx) {
            Ok(l) => l,
            Err(e) => {
                checks.push(Check {
                    name: "ii".into(),
                    pass: false,
                    residual: e.to_string(),
                });
                return Ok(VerificationReport {
                    checks,
                    l: None,
                    m: None,
                });
            }
        },
    };
    checks.push(op_residual_check(
        "ii",
        &ii_target.sub(&l.compose(&ii_base)?),
        ctx,
    )?);
    let m = match &spec.m {
        Some(m) => m.clone(),
        None => match find_factor(&iii_target, &iii_base, ctx) {
            Ok(m) => m,
            Err(e) => {
                checks.push(Check {
                    name: "iii".into(),
                    pass: false,
                    residual: e.to_string(),
                });
                return Ok(VerificationReport {
                    checks,
                    l: Some(l),
                    m: None,
                });
            }
        },
    };
    checks.push(op_residual_check(
        "iii",
        &iii_target.sub(&m.compose(&iii_base)?),
        ctx,
    )?);

    // iv) the 2x2 coefficient matrix of D_p, D_q in (A1, A2) is invertible
    // over rational functions.
    let det = Matrix::new(
        2,
        2,
        vec![
            ctx.normal_form(&a1.first_order_coeff(&spec.p))?,
            ctx.normal_form(&a1.first_order_coeff(&spec.q))?,
            ctx.normal_form(&a2.first_order_coeff(&spec.p))?,
            ctx.normal_form(&a2.first_order_coeff(&spec.q))?,
        ],
    )
    .det2();
    let det = ctx.normal_form(&det)?;
    checks.push(Check {
        name: "iv".into(),
        pass: !det.is_zero(),
        residual: format!("det = {}", det),
    });

    Ok(VerificationReport {
        checks,
        l: Some(l),
        m: Some(m),
    })
}

/// The induced Lax pair (λA_i − B_i); its commutator must vanish modulo the
/// system identically in λ whenever verification passed.
pub fn build_lax_from_ro(spec: &ROSpec, ctx: &Context) -> Result<(TDOperator, TDOperator)> {
    let lam = TDOperator::scalar(Expr::var(Var::Lambda));
    let l1 = lam.compose(&spec.a[0])?.sub(&spec.b[0]);
    let l2 = lam.compose(&spec.a[1])?.sub(&spec.b[1]);
    let comm = l1.commutator(&l2)?.normalized(ctx)?;
    if !comm.is_zero() {
        return Err(Error::Invalid(format!(
            "induced pair does not commute: residual {}",
            comm
        )));
    }
    Ok((l1, l2))
}

/// Outcome of one application of the operator to a seed.
#[derive(Clone, Debug)]
pub struct ApplyResult {
    /// Explicitly integrated local part of the new symmetry.
    pub local: Expr,
    /// Fresh nonlocal variable carrying the unintegrated relations, if any.
    pub remainder: Option<NonlocalVariable>,
    /// The full new symmetry: local part plus the fresh variable.
    pub result: Expr,
    /// Covering extended with the fresh variable (when one was created).
    pub covering: Covering,
}

fn fresh_nonlocal_name(cov: &Covering, ws_nonlocals: &[DepRef]) -> String {
    for k in 0.. {
        let cand = if k == 0 { "w".to_string() } else { format!("w{}", k + 1) };
        if cov.variable(&cand).is_none() && !ws_nonlocals.iter().any(|d| &*d.name == cand) {
            return cand;
        }
    }
    unreachable!()
}

/// Apply the verified operator to a seed symmetry: solve the defining
/// relations for the p- and q-derivatives of the new symmetry, verify
/// cross-compatibility, and attempt explicit integration by an
/// undetermined-coefficient ansatz; whatever does not integrate is returned
/// as a fresh nonlocal variable.
pub fn apply(spec: &ROSpec, seed: &Expr, ctx: &Context) -> Result<ApplyResult> {
    if ctx.ws().dependents.len() != 1 || ctx.system.equations.len() != 1 {
        return Err(Error::Invalid(
            "apply is implemented for scalar systems".into(),
        ));
    }
    // The seed must be a symmetry (or cosymmetry) already.
    let mode = match spec.mode {
        ROMode::Direct => InvarianceMode::Symmetry,
        ROMode::Adjoint => InvarianceMode::Cosymmetry,
    };
    let seed_checks = check_invariance(std::slice::from_ref(seed), ctx, mode)?;
    if let Some(bad) = seed_checks.iter().find(|c| !c.pass) {
        return Err(Error::NoSolution(format!(
            "seed is not invariant: {} residual {}",
            bad.name, bad.residual
        )));
    }

    let b_rhs: Vec<Expr> = spec
        .b
        .iter()
        .map(|b| Ok(b.apply_to(std::slice::from_ref(seed), ctx)?.pop().unwrap()))
        .collect::<Result<_>>()?;

    // Coefficient matrix of the unknown derivatives in directions p, q.
    let m2 = Matrix::new(
        2,
        2,
        vec![
            spec.a[0].first_order_coeff(&spec.p),
            spec.a[0].first_order_coeff(&spec.q),
            spec.a[1].first_order_coeff(&spec.p),
            spec.a[1].first_order_coeff(&spec.q),
        ],
    );
    let det = ctx.normal_form(&m2.det2())?;
    if det.is_zero() {
        return Err(Error::NoSolution(
            "condition-iv matrix is singular".into(),
        ));
    }

    // Extra terms of A_i acting on the unknown: zero-order parts and
    // derivatives in directions other than p, q.
    let extra_dirs: Vec<Dir> = ctx
        .ws()
        .independents
        .iter()
        .filter(|d| **d != spec.p && **d != spec.q)
        .cloned()
        .collect();
    let has_extra = spec.a.iter().any(|a| {
        !a.coeff(&MultiIndex::empty(), 0, 0).is_zero()
            || extra_dirs.iter().any(|d| !a.first_order_coeff(d).is_zero())
    });

    let cov = ctx.covering.clone().unwrap_or_default();
    let name = fresh_nonlocal_name(&cov, &ctx.ws().nonlocals);
    let dep = DepRef {
        nonlocal: true,
        ord: 200,
        name: Arc::from(name.as_str()),
    };
    let dep2 = dep.clone();
    let wvar = move |idx: MultiIndex| Expr::var(Var::Jet(JetVar { dep: dep2.clone(), idx }));

    if has_extra {
        // Solve for W_p, W_q with the remaining terms of A_i(W) moved to
        // the right side; the result is a purely nonlocal symmetry.
        let aw_rest = |i: usize| -> Expr {
            let mut e = spec.a[i]
                .coeff(&MultiIndex::empty(), 0, 0)
                .mul(&wvar(MultiIndex::empty()));
            for d in &extra_dirs {
                let c = spec.a[i].first_order_coeff(d);
                if !c.is_zero() {
                    e = e.add(&c.mul(&wvar(MultiIndex::from_dirs(vec![d.clone()]))));
                }
            }
            e
        };
        let r = [b_rhs[0].sub(&aw_rest(0)), b_rhs[1].sub(&aw_rest(1))];
        // 2x2 inverse.
        let wp = m2.at(1, 1).mul(&r[0]).sub(&m2.at(0, 1).mul(&r[1])).div(&det)?;
        let wq = m2.at(0, 0).mul(&r[1]).sub(&m2.at(1, 0).mul(&r[0])).div(&det)?;
        let mut relations = BTreeMap::new();
        relations.insert(spec.p.clone(), ctx.normal_form(&wp)?);
        relations.insert(spec.q.clone(), ctx.normal_form(&wq)?);
        let nv = NonlocalVariable { dep, relations };
        let extended = cov.define_nonlocal(nv.clone())?;
        let compat = compatibility_check(&extended, ctx.system.clone())?;
        if let Some(bad) = compat.iter().find(|c| !c.pass) {
            return Err(Error::IncompatibleCovering(format!(
                "{} residual {}",
                bad.name, bad.residual
            )));
        }
        return Ok(ApplyResult {
            local: Expr::zero(),
            remainder: Some(nv),
            result: wvar(MultiIndex::empty()),
            covering: extended,
        });
    }

    // Pure case: W_p and W_q are explicit expressions.
    let wp = m2
        .at(1, 1)
        .mul(&b_rhs[0])
        .sub(&m2.at(0, 1).mul(&b_rhs[1]))
        .div(&det)?;
    let wq = m2
        .at(0, 0)
        .mul(&b_rhs[1])
        .sub(&m2.at(1, 0).mul(&b_rhs[0]))
        .div(&det)?;
    let wp = ctx.normal_form(&wp)?;
    let wq = ctx.normal_form(&wq)?;

    // Cross-compatibility: D_q(W_p) = D_p(W_q) modulo everything.
    let compat = ctx
        .total_derivative(&wp, &spec.q)?
        .sub(&ctx.total_derivative(&wq, &spec.p)?);
    let compat = ctx.normal_form(&compat)?;
    if !compat.is_zero() {
        return Err(Error::NoSolution(format!(
            "relations for the new symmetry are incompatible: residual {}",
            compat
        )));
    }

    // Attempt explicit integration.
    let (local, rp, rq) = integrate_pair(&wp, &wq, &spec.p, &spec.q, ctx)?;
    if rp.is_zero() && rq.is_zero() {
        return Ok(ApplyResult {
            local: local.clone(),
            remainder: None,
            result: local,
            covering: cov,
        });
    }
    let mut relations = BTreeMap::new();
    relations.insert(spec.p.clone(), rp);
    relations.insert(spec.q.clone(), rq);
    let nv = NonlocalVariable { dep, relations };
    let extended = cov.define_nonlocal(nv.clone())?;
    let result = local.add(&wvar(MultiIndex::empty()));
    Ok(ApplyResult {
        local,
        remainder: Some(nv),
        result,
        covering: extended,
    })
}

/// Largest derivative order among the local jets of an expression.
fn max_jet_order(e: &Expr) -> usize {
    e.vars()
        .iter()
        .filter_map(|v| v.as_jet().map(|j| j.idx.order()))
        .max()
        .unwrap_or(0)
}

/// Candidate monomials for the integration ansatz: degree ≤ 2 products of
/// irreducible local jet coordinates up to the given order and independent
/// variables.
fn ansatz_monomials(ctx: &Context, order: usize) -> Result<Vec<Expr>> {
    let mut vars: Vec<Expr> = Vec::new();
    for d in &ctx.ws().independents {
        vars.push(Expr::var(Var::Indep(d.clone())));
    }
    for dep in &ctx.ws().dependents {
        let mut frontier = vec![MultiIndex::empty()];
        let mut seen: BTreeSet<MultiIndex> = frontier.iter().cloned().collect();
        while let Some(idx) = frontier.pop() {
            let jv = Var::Jet(JetVar {
                dep: dep.clone(),
                idx: idx.clone(),
            });
            let e = Expr::var(jv.clone());
            if ctx.normal_form(&e)? == e {
                vars.push(e);
                if idx.order() < order {
                    for d in &ctx.ws().independents {
                        let nxt = idx.push(d);
                        if seen.insert(nxt.clone()) {
                            frontier.push(nxt);
                        }
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    for (i, a) in vars.iter().enumerate() {
        out.push(a.clone());
        for b in vars.iter().skip(i) {
            out.push(a.mul(b));
        }
    }
    Ok(out)
}

fn as_rational_poly(e: &Expr) -> Option<&Poly> {
    if e.den().as_constant().map(|c| c.is_one()).unwrap_or(false) {
        Some(e.num())
    } else {
        None
    }
}

/// Two-stage undetermined-coefficient integration of the pair
/// D_p(T) = bp, D_q(T) = bq modulo the system. Returns the integrated
/// local part and the unintegrated remainders.
///
/// Stage 1 solves the full system exactly over the rationals. When it is
/// inconsistent, stage 2 keeps only ansatz monomials whose derivative
/// support lies inside the right sides' support and solves that subsystem
/// exactly, leaving the unmatched terms as the remainder. No least-squares
/// fitting is involved: whatever is returned satisfies its equations
/// exactly.
fn integrate_pair(
    bp: &Expr,
    bq: &Expr,
    p: &Dir,
    q: &Dir,
    ctx: &Context,
) -> Result<(Expr, Expr, Expr)> {
    let give_up = |()| (Expr::zero(), bp.clone(), bq.clone());
    let (Some(bpp), Some(bqp)) = (as_rational_poly(bp), as_rational_poly(bq)) else {
        return Ok(give_up(()));
    };
    if bp.has_nonlocal() || bq.has_nonlocal() {
        return Ok(give_up(()));
    }
    let order = max_jet_order(bp).max(max_jet_order(bq));
    let monos = ansatz_monomials(ctx, order)?;
    // Derivatives of each candidate in both directions; drop kernel
    // elements (integration constants are fixed to zero).
    let mut cands: Vec<(Expr, Poly, Poly)> = Vec::new();
    for m in &monos {
        let dp = ctx.total_derivative(m, p)?;
        let dq = ctx.total_derivative(m, q)?;
        if dp.is_zero() && dq.is_zero() {
            continue;
        }
        let (Some(dpp), Some(dqp)) = (as_rational_poly(&dp), as_rational_poly(&dq)) else {
            continue;
        };
        cands.push((m.clone(), dpp.clone(), dqp.clone()));
    }

    let solve_subset = |keep: &[usize]| -> Option<(Vec<BigRational>, bool)> {
        // Rows: all monomials reachable by kept candidates plus, for the
        // full stage, the right sides' monomials.
        let mut row_set: BTreeMap<(bool, Mono), usize> = BTreeMap::new();
        let mut add_row = |tag: bool, m: &Mono| {
            let n = row_set.len();
            row_set.entry((tag, m.clone())).or_insert(n);
        };
        for &i in keep {
            for m in cands[i].1.terms.keys() {
                add_row(false, m);
            }
            for m in cands[i].2.terms.keys() {
                add_row(true, m);
            }
        }
        let full = {
            // check whether every right-side monomial is covered
            bpp.terms.keys().all(|m| row_set.contains_key(&(false, m.clone())))
                && bqp.terms.keys().all(|m| row_set.contains_key(&(true, m.clone())))
        };
        let nrows = row_set.len();
        let ncols = keep.len();
        let zero = BigRational::from_integer(0.into());
        let mut data = vec![zero.clone(); nrows * ncols];
        let mut rhs = vec![zero; nrows];
        for (ci, &i) in keep.iter().enumerate() {
            for (m, c) in &cands[i].1.terms {
                data[row_set[&(false, m.clone())] * ncols + ci] = c.clone();
            }
            for (m, c) in &cands[i].2.terms {
                data[row_set[&(true, m.clone())] * ncols + ci] = c.clone();
            }
        }
        for (m, c) in &bpp.terms {
            if let Some(&r) = row_set.get(&(false, m.clone())) {
                rhs[r] = c.clone();
            }
        }
        for (m, c) in &bqp.terms {
            if let Some(&r) = row_set.get(&(true, m.clone())) {
                rhs[r] = c.clone();
            }
        }
        Matrix::new(nrows, ncols, data).solve(&rhs).map(|s| (s, full))
    };

    // Stage 1: full system over all candidates, requiring every right-side
    // monomial to be expressible.
    let all: Vec<usize> = (0..cands.len()).collect();
    if let Some((sol, full)) = solve_subset(&all) {
        if full {
            let t = build_combo(&cands, &all, &sol);
            let rp = ctx.normal_form(&bp.sub(&ctx.total_derivative(&t, p)?))?;
            let rq = ctx.normal_form(&bq.sub(&ctx.total_derivative(&t, q)?))?;
            if rp.is_zero() && rq.is_zero() {
                return Ok((t, rp, rq));
            }
        }
    }

    // Stage 2: support-restricted partial integration.
    let supp_p: BTreeSet<&Mono> = bpp.terms.keys().collect();
    let supp_q: BTreeSet<&Mono> = bqp.terms.keys().collect();
    let keep: Vec<usize> = (0..cands.len())
        .filter(|&i| {
            cands[i].1.terms.keys().all(|m| supp_p.contains(m))
                && cands[i].2.terms.keys().all(|m| supp_q.contains(m))
        })
        .collect();
    if keep.is_empty() {
        return Ok(give_up(()));
    }
    let Some((sol, _)) = solve_subset(&keep) else {
        return Ok(give_up(()));
    };
    let t = build_combo(&cands, &keep, &sol);
    let rp = ctx.normal_form(&bp.sub(&ctx.total_derivative(&t, p)?))?;
    let rq = ctx.normal_form(&bq.sub(&ctx.total_derivative(&t, q)?))?;
    Ok((t, rp, rq))
}

fn build_combo(cands: &[(Expr, Poly, Poly)], keep: &[usize], sol: &[BigRational]) -> Expr {
    let mut t = Expr::zero();
    for (ci, &i) in keep.iter().enumerate() {
        if !num_traits::Zero::is_zero(&sol[ci]) {
            t = t.add(&cands[i].0.scale(&sol[ci]));
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::dsl::parse_expr;

    fn load_ctx(name: &str) -> (ROSpec, Context) {
        let wf = corpus::load_corpus(name).unwrap();
        let spec = ROSpec::from_file(&wf).unwrap();
        let ctx = Context::with_covering(wf.system.clone(), wf.covering.clone());
        (spec, ctx)
    }

    #[test]
    fn pavlov_verifies_with_l_minus_one() {
        let (spec, ctx) = load_ctx("pavlov");
        let report = verify(&spec, &ctx).unwrap();
        assert!(report.pass(), "{:?}", report.checks);
        assert_eq!(report.l.unwrap(), TDOperator::scalar(Expr::integer(-1)));
        assert_eq!(report.m.unwrap(), TDOperator::scalar(Expr::one()));
    }

    #[test]
    fn mas_verifies() {
        let (spec, ctx) = load_ctx("mas");
        let report = verify(&spec, &ctx).unwrap();
        assert!(report.pass(), "{:?}", report.checks);
    }

    #[test]
    fn heavenly_verifies_with_m_uzt() {
        let (spec, ctx) = load_ctx("heavenly");
        let report = verify(&spec, &ctx).unwrap();
        assert!(report.pass(), "{:?}", report.checks);
        // The factor is u_zt up to overall sign (the sign depends on the
        // orientation of the equation).
        let uzt = ctx
            .normal_form(&parse_expr("u[z,t]", ctx.ws()).unwrap())
            .unwrap();
        let m = report.m.unwrap();
        let want = TDOperator::scalar(uzt);
        assert!(m.sub(&want).is_zero() || m.add(&want).is_zero(), "M = {}", m);
    }

    #[test]
    fn fk6d_verifies() {
        let (spec, ctx) = load_ctx("fk6d");
        let report = verify(&spec, &ctx).unwrap();
        assert!(report.pass(), "{:?}", report.checks);
    }

    #[test]
    fn flipped_sign_fails_condition_ii() {
        let wf = corpus::load_fixture("pavlov_flipped").unwrap();
        let spec = ROSpec::from_file(&wf).unwrap();
        let ctx = Context::new(wf.system.clone());
        let report = verify(&spec, &ctx).unwrap();
        assert!(!report.pass());
        let ii = report.checks.iter().find(|c| c.name == "ii").unwrap();
        assert!(!ii.pass);
    }

    #[test]
    fn pavlov_induced_pair_commutes() {
        let (spec, ctx) = load_ctx("pavlov");
        let (l1, l2) = build_lax_from_ro(&spec, &ctx).unwrap();
        assert!(l1.commutator(&l2).unwrap().is_zero_mod(&ctx).unwrap());
    }

    #[test]
    fn mas_apply_to_ux() {
        let (spec, ctx) = load_ctx("mas");
        // Apply over the bare system so the fresh variable is named w.
        let ctx = Context::new(ctx.system.clone());
        let seed = parse_expr("u[x]", ctx.ws()).unwrap();
        let out = apply(&spec, &seed, &ctx).unwrap();
        let want_local = parse_expr("-u[x]^2/2", ctx.ws()).unwrap();
        assert_eq!(out.local, want_local);
        let w = out.remainder.unwrap();
        let y = ctx.ws().dir("y").unwrap();
        let z = ctx.ws().dir("z").unwrap();
        assert_eq!(
            w.relations[y],
            parse_expr("u[y]*u[x,x]", ctx.ws()).unwrap()
        );
        assert_eq!(
            w.relations[z],
            parse_expr("u[z]*u[x,x] - u[x,t]", ctx.ws()).unwrap()
        );
    }

    #[test]
    fn pavlov_apply_to_constant_integrates_fully() {
        let (spec, ctx) = load_ctx("pavlov");
        let ctx = Context::new(ctx.system.clone());
        let seed = Expr::one();
        let out = apply(&spec, &seed, &ctx).unwrap();
        assert!(out.remainder.is_none());
        let want = parse_expr("-u[x]", ctx.ws()).unwrap();
        assert_eq!(out.result, want);
    }

    #[test]
    fn non_symmetry_seed_rejected() {
        let (spec, ctx) = load_ctx("pavlov");
        let seed = parse_expr("u[x]^2", ctx.ws()).unwrap();
        assert!(apply(&spec, &seed, &ctx).is_err());
    }
}
