//! Exact symbolic expression kernel.
//!
//! Expressions are reduced fractions of expanded multivariate polynomials
//! with arbitrary-precision rational coefficients. The denominator is kept
//! monic under the global monomial order, the gcd of numerator and
//! denominator is 1, and zero is represented uniquely, so structural
//! equality decides algebraic equality.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};

pub type Name = Arc<str>;

/// An independent variable: declaration index plus name.
/// The declaration index drives the multi-index priority in the global
/// monomial order, so the first declared direction weighs most.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Dir {
    pub ord: u8,
    pub name: Name,
}

impl PartialOrd for Dir {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Dir {
    fn cmp(&self, other: &Self) -> Ordering {
        self.ord.cmp(&other.ord).then_with(|| self.name.cmp(&other.name))
    }
}

/// Reference to a dependent (or nonlocal) variable.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DepRef {
    pub nonlocal: bool,
    pub ord: u8,
    pub name: Name,
}

/// Ordered multiset of directions, kept sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct MultiIndex(pub Vec<Dir>);

impl MultiIndex {
    pub fn empty() -> Self {
        MultiIndex(Vec::new())
    }

    pub fn from_dirs(mut dirs: Vec<Dir>) -> Self {
        dirs.sort();
        MultiIndex(dirs)
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn push(&self, d: &Dir) -> Self {
        let mut v = self.0.clone();
        let pos = v.partition_point(|x| x <= d);
        v.insert(pos, d.clone());
        MultiIndex(v)
    }

    pub fn union(&self, other: &Self) -> Self {
        let mut v = self.0.clone();
        v.extend(other.0.iter().cloned());
        v.sort();
        MultiIndex(v)
    }

    pub fn count(&self, d: &Dir) -> usize {
        self.0.iter().filter(|x| *x == d).count()
    }

    pub fn contains(&self, d: &Dir) -> bool {
        self.0.iter().any(|x| x == d)
    }

    /// Multiset difference `self - other`, `None` when `other ⊄ self`.
    pub fn sub(&self, other: &Self) -> Option<Self> {
        let mut v = self.0.clone();
        for d in &other.0 {
            let pos = v.iter().position(|x| x == d)?;
            v.remove(pos);
        }
        Some(MultiIndex(v))
    }

    /// Distinct directions with multiplicities.
    pub fn counts(&self) -> Vec<(Dir, u32)> {
        let mut out: Vec<(Dir, u32)> = Vec::new();
        for d in &self.0 {
            match out.last_mut() {
                Some((last, n)) if last == d => *n += 1,
                _ => out.push((d.clone(), 1)),
            }
        }
        out
    }
}

impl PartialOrd for MultiIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for MultiIndex {
    /// Graded order, then priority-lex: at equal total order the index with
    /// more copies of the earliest-declared direction is greater.
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.len().cmp(&other.0.len()).then_with(|| {
            for (a, b) in self.0.iter().zip(other.0.iter()) {
                match a.cmp(b) {
                    Ordering::Less => return Ordering::Greater,
                    Ordering::Greater => return Ordering::Less,
                    Ordering::Equal => {}
                }
            }
            Ordering::Equal
        })
    }
}

/// A jet coordinate u^α_{i₁…iₙ}; an empty index denotes the variable itself.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct JetVar {
    pub dep: DepRef,
    pub idx: MultiIndex,
}

impl JetVar {
    pub fn shift(&self, d: &Dir) -> JetVar {
        JetVar {
            dep: self.dep.clone(),
            idx: self.idx.push(d),
        }
    }
}

/// A variable of the polynomial ring.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Var {
    Indep(Dir),
    Constant(Name),
    Lambda,
    Jet(JetVar),
}

impl Var {
    fn rank(&self) -> u8 {
        match self {
            Var::Jet(_) => 3,
            Var::Lambda => 2,
            Var::Constant(_) => 1,
            Var::Indep(_) => 0,
        }
    }

    pub fn is_jet(&self) -> bool {
        matches!(self, Var::Jet(_))
    }

    pub fn as_jet(&self) -> Option<&JetVar> {
        match self {
            Var::Jet(j) => Some(j),
            _ => None,
        }
    }

    pub fn is_nonlocal_jet(&self) -> bool {
        matches!(self, Var::Jet(j) if j.dep.nonlocal)
    }
}

impl PartialOrd for Var {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Var {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank().cmp(&other.rank()).then_with(|| match (self, other) {
            (Var::Jet(a), Var::Jet(b)) => a
                .idx
                .cmp(&b.idx)
                .then_with(|| a.dep.cmp(&b.dep)),
            (Var::Constant(a), Var::Constant(b)) => a.cmp(b),
            (Var::Indep(a), Var::Indep(b)) => a.cmp(b),
            _ => Ordering::Equal,
        })
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::Indep(d) => write!(f, "{}", d.name),
            Var::Constant(n) => write!(f, "{}", n),
            Var::Lambda => write!(f, "lambda"),
            Var::Jet(j) => {
                if j.idx.is_empty() {
                    write!(f, "{}", j.dep.name)
                } else {
                    let dirs: Vec<&str> = j.idx.0.iter().map(|d| &*d.name).collect();
                    write!(f, "{}[{}]", j.dep.name, dirs.join(","))
                }
            }
        }
    }
}

/// A monomial: exponent list sorted by variable, descending.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct Mono(pub Vec<(Var, u32)>);

impl Mono {
    pub fn one() -> Self {
        Mono(Vec::new())
    }

    pub fn var(v: Var) -> Self {
        Mono(vec![(v, 1)])
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|(_, e)| e).sum()
    }

    pub fn is_one(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mul(&self, other: &Mono) -> Mono {
        let mut out: Vec<(Var, u32)> = Vec::with_capacity(self.0.len() + other.0.len());
        let (mut i, mut j) = (0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].0.cmp(&other.0[j].0) {
                Ordering::Greater => {
                    out.push(self.0[i].clone());
                    i += 1;
                }
                Ordering::Less => {
                    out.push(other.0[j].clone());
                    j += 1;
                }
                Ordering::Equal => {
                    out.push((self.0[i].0.clone(), self.0[i].1 + other.0[j].1));
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&self.0[i..]);
        out.extend_from_slice(&other.0[j..]);
        Mono(out)
    }

    pub fn divides(&self, other: &Mono) -> bool {
        // self | other
        self.0.iter().all(|(v, e)| {
            other
                .0
                .iter()
                .find(|(w, _)| w == v)
                .map(|(_, f)| f >= e)
                .unwrap_or(false)
        })
    }

    pub fn div(&self, other: &Mono) -> Option<Mono> {
        let mut out = Vec::new();
        for (v, e) in &self.0 {
            let f = other.0.iter().find(|(w, _)| w == v).map(|(_, f)| *f).unwrap_or(0);
            if f > *e {
                return None;
            }
            if *e - f > 0 {
                out.push((v.clone(), e - f));
            }
        }
        // other must not contain vars absent from self
        for (v, _) in &other.0 {
            if !self.0.iter().any(|(w, _)| w == v) {
                return None;
            }
        }
        Some(Mono(out))
    }

    pub fn exponent(&self, v: &Var) -> u32 {
        self.0.iter().find(|(w, _)| w == v).map(|(_, e)| *e).unwrap_or(0)
    }

    /// Remove `v` entirely, returning its exponent.
    pub fn without(&self, v: &Var) -> (Mono, u32) {
        let e = self.exponent(v);
        if e == 0 {
            return (self.clone(), 0);
        }
        let rest = self.0.iter().filter(|(w, _)| w != v).cloned().collect();
        (Mono(rest), e)
    }
}

impl PartialOrd for Mono {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Mono {
    /// Graded lexicographic with the larger variable weighing more.
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree().cmp(&other.degree()).then_with(|| {
            let mut i = 0;
            let mut j = 0;
            loop {
                match (self.0.get(i), other.0.get(j)) {
                    (None, None) => return Ordering::Equal,
                    (None, Some(_)) => return Ordering::Less,
                    (Some(_), None) => return Ordering::Greater,
                    (Some((va, ea)), Some((vb, eb))) => {
                        match va.cmp(vb) {
                            Ordering::Greater => return Ordering::Greater,
                            Ordering::Less => return Ordering::Less,
                            Ordering::Equal => match ea.cmp(eb) {
                                Ordering::Equal => {
                                    i += 1;
                                    j += 1;
                                }
                                ord => return ord,
                            },
                        }
                    }
                }
            }
        })
    }
}

/// Expanded multivariate polynomial over ℚ.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Poly {
    pub terms: BTreeMap<Mono, BigRational>,
}

impl Poly {
    pub fn zero() -> Self {
        Poly { terms: BTreeMap::new() }
    }

    pub fn one() -> Self {
        Poly::constant(BigRational::one())
    }

    pub fn constant(c: BigRational) -> Self {
        let mut terms = BTreeMap::new();
        if !c.is_zero() {
            terms.insert(Mono::one(), c);
        }
        Poly { terms }
    }

    pub fn var(v: Var) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(Mono::var(v), BigRational::one());
        Poly { terms }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty() || (self.terms.len() == 1 && self.terms.keys().next().unwrap().is_one())
    }

    pub fn as_constant(&self) -> Option<BigRational> {
        if self.is_zero() {
            return Some(BigRational::zero());
        }
        if self.is_constant() {
            return Some(self.terms.values().next().unwrap().clone());
        }
        None
    }

    fn insert_term(&mut self, m: Mono, c: BigRational) {
        if c.is_zero() {
            return;
        }
        match self.terms.entry(m) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(c);
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                let s = e.get().clone() + c;
                if s.is_zero() {
                    e.remove();
                } else {
                    *e.get_mut() = s;
                }
            }
        }
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.insert_term(m.clone(), c.clone());
        }
        out
    }

    pub fn neg(&self) -> Poly {
        Poly {
            terms: self.terms.iter().map(|(m, c)| (m.clone(), -c.clone())).collect(),
        }
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.neg())
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                out.insert_term(ma.mul(mb), ca * cb);
            }
        }
        out
    }

    pub fn scale(&self, c: &BigRational) -> Poly {
        if c.is_zero() {
            return Poly::zero();
        }
        Poly {
            terms: self.terms.iter().map(|(m, k)| (m.clone(), k * c)).collect(),
        }
    }

    pub fn pow(&self, n: u32) -> Poly {
        let mut out = Poly::one();
        for _ in 0..n {
            out = out.mul(self);
        }
        out
    }

    pub fn leading(&self) -> Option<(&Mono, &BigRational)> {
        self.terms.iter().next_back()
    }

    pub fn vars(&self) -> BTreeSet<Var> {
        let mut s = BTreeSet::new();
        for m in self.terms.keys() {
            for (v, _) in &m.0 {
                s.insert(v.clone());
            }
        }
        s
    }

    pub fn contains_var(&self, v: &Var) -> bool {
        self.terms.keys().any(|m| m.exponent(v) > 0)
    }

    pub fn degree_in(&self, v: &Var) -> u32 {
        self.terms.keys().map(|m| m.exponent(v)).max().unwrap_or(0)
    }

    /// Partial derivative, all variables treated as independent quantities.
    pub fn diff(&self, v: &Var) -> Poly {
        let mut out = Poly::zero();
        for (m, c) in &self.terms {
            let e = m.exponent(v);
            if e == 0 {
                continue;
            }
            let mut reduced = Vec::new();
            for (w, f) in &m.0 {
                if w == v {
                    if *f > 1 {
                        reduced.push((w.clone(), f - 1));
                    }
                } else {
                    reduced.push((w.clone(), *f));
                }
            }
            out.insert_term(Mono(reduced), c * BigRational::from(BigInt::from(e)));
        }
        out
    }

    /// Exact polynomial division; `None` when `d` does not divide `self`.
    pub fn div_exact(&self, d: &Poly) -> Option<Poly> {
        if d.is_zero() {
            return None;
        }
        if let Some(c) = d.as_constant() {
            return Some(self.scale(&(BigRational::one() / c)));
        }
        let (dlm, dlc) = d.leading().unwrap();
        let dlm = dlm.clone();
        let dlc = dlc.clone();
        let mut rem = self.clone();
        let mut quot = Poly::zero();
        while !rem.is_zero() {
            let (rlm, rlc) = rem.leading().unwrap();
            let qm = rlm.div(&dlm)?;
            let qc = rlc / &dlc;
            let mut t = Poly::zero();
            t.insert_term(qm, qc);
            quot = quot.add(&t);
            rem = rem.sub(&t.mul(d));
        }
        Some(quot)
    }

    /// View as a univariate polynomial in `v` with `Poly` coefficients.
    fn univ(&self, v: &Var) -> BTreeMap<u32, Poly> {
        let mut out: BTreeMap<u32, Poly> = BTreeMap::new();
        for (m, c) in &self.terms {
            let (rest, e) = m.without(v);
            let entry = out.entry(e).or_insert_with(Poly::zero);
            entry.insert_term(rest, c.clone());
        }
        out.retain(|_, p| !p.is_zero());
        out
    }

    /// Coefficients by powers of lambda; index = power.
    pub fn lambda_coeffs(&self) -> Vec<Poly> {
        let u = self.univ(&Var::Lambda);
        let deg = u.keys().next_back().copied().unwrap_or(0);
        (0..=deg).map(|k| u.get(&k).cloned().unwrap_or_else(Poly::zero)).collect()
    }

    /// Group terms by the sub-monomial built from variables matching `pred`
    /// (the "outer" part); values collect the remaining factors.
    pub fn group_by<F: Fn(&Var) -> bool>(&self, pred: F) -> BTreeMap<Mono, Poly> {
        let mut out: BTreeMap<Mono, Poly> = BTreeMap::new();
        for (m, c) in &self.terms {
            let mut outer = Vec::new();
            let mut inner = Vec::new();
            for (v, e) in &m.0 {
                if pred(v) {
                    outer.push((v.clone(), *e));
                } else {
                    inner.push((v.clone(), *e));
                }
            }
            out.entry(Mono(outer))
                .or_insert_with(Poly::zero)
                .insert_term(Mono(inner), c.clone());
        }
        out.retain(|_, p| !p.is_zero());
        out
    }

    /// Make the leading coefficient 1.
    fn monic(&self) -> Poly {
        match self.leading() {
            None => Poly::zero(),
            Some((_, lc)) => {
                let lc = lc.clone();
                self.scale(&(BigRational::one() / lc))
            }
        }
    }

    /// Common monomial factor of all terms (elementwise minimum exponents).
    fn monomial_content(&self) -> Mono {
        let mut it = self.terms.keys();
        let Some(first) = it.next() else {
            return Mono::one();
        };
        let mut acc = first.clone();
        for m in it {
            if acc.is_one() {
                break;
            }
            acc = Mono(
                acc.0
                    .iter()
                    .filter_map(|(v, e)| {
                        let f = m.exponent(v).min(*e);
                        (f > 0).then(|| (v.clone(), f))
                    })
                    .collect(),
            );
        }
        acc
    }

    fn div_mono(&self, m: &Mono) -> Poly {
        if m.is_one() {
            return self.clone();
        }
        Poly {
            terms: self
                .terms
                .iter()
                .map(|(k, c)| (k.div(m).expect("monomial content divides"), c.clone()))
                .collect(),
        }
    }

    /// Multivariate gcd over ℚ, returned monic.
    pub fn gcd(a: &Poly, b: &Poly) -> Poly {
        if a.is_zero() {
            return b.monic();
        }
        if b.is_zero() {
            return a.monic();
        }
        if a.is_constant() || b.is_constant() {
            return Poly::one();
        }
        // Split off the common monomial factor first; it is cheap and keeps
        // the recursive work on content-free parts.
        let ma = a.monomial_content();
        let mb = b.monomial_content();
        let mut mg = Vec::new();
        for (v, e) in &ma.0 {
            let f = mb.exponent(v).min(*e);
            if f > 0 {
                mg.push((v.clone(), f));
            }
        }
        let mg = Mono(mg);
        let core = Poly::gcd_core(&a.div_mono(&ma), &b.div_mono(&mb));
        let mut mono_poly = Poly::zero();
        mono_poly.insert_term(mg, BigRational::one());
        mono_poly.mul(&core).monic()
    }

    fn gcd_core(a: &Poly, b: &Poly) -> Poly {
        if a.is_constant() || b.is_constant() {
            return Poly::one();
        }
        if a == b {
            return a.monic();
        }
        // Trial divisions: exact cancellation is the common case in
        // elimination chains and avoids the remainder sequence entirely.
        if a.div_exact(b).is_some() {
            return b.monic();
        }
        if b.div_exact(a).is_some() {
            return a.monic();
        }
        let va = a.vars();
        let vb = b.vars();
        // Recurse on a shared variable of least degree; sides with a
        // one-sided variable are replaced by their content in it.
        let shared = va
            .intersection(&vb)
            .min_by_key(|v| (a.degree_in(v).min(b.degree_in(v)), (*v).clone()))
            .cloned();
        let Some(v) = shared else {
            let v = va.iter().next_back().unwrap().clone();
            return Poly::gcd(&Poly::content_in(a, &v), b);
        };
        if !a.contains_var(&v) || !b.contains_var(&v) {
            unreachable!("shared variable occurs on both sides");
        }
        // Evaluation fast path: map every other variable to a small integer
        // and take the univariate gcd of the images. When neither leading
        // coefficient vanishes at the point, the image gcd bounds the true
        // gcd degree in `v` from above, so a constant image gcd proves the
        // gcd is free of `v` and equals the gcd of the contents.
        for salt in 0..2u64 {
            match Poly::image_gcd_degree(a, b, &v, salt) {
                Some(0) => {
                    return Poly::gcd(&Poly::content_in(a, &v), &Poly::content_in(b, &v));
                }
                Some(_) => break,
                None => continue,
            }
        }
        let ca = Poly::content_in(a, &v);
        let cb = Poly::content_in(b, &v);
        let cg = Poly::gcd(&ca, &cb);
        let pa = a.div_exact(&ca).expect("content divides");
        let pb = b.div_exact(&cb).expect("content divides");
        // primitive PRS
        let (mut f, mut g) = if pa.degree_in(&v) >= pb.degree_in(&v) {
            (pa, pb)
        } else {
            (pb, pa)
        };
        loop {
            let r = Poly::pseudo_rem(&f, &g, &v);
            if r.is_zero() {
                let gp = g.div_exact(&Poly::content_in(&g, &v)).expect("content divides");
                return cg.mul(&gp).monic();
            }
            if r.degree_in(&v) == 0 {
                return cg.monic();
            }
            f = g;
            g = r.div_exact(&Poly::content_in(&r, &v)).expect("content divides");
        }
    }

    /// Univariate image of `p` in `v` with all other variables evaluated at
    /// deterministic small primes; None if the leading coefficient vanishes.
    fn image_in(p: &Poly, v: &Var, salt: u64) -> Option<Vec<BigRational>> {
        const PRIMES: [i64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];
        let value = |w: &Var| -> i64 {
            use std::hash::{Hash, Hasher};
            let mut h = std::collections::hash_map::DefaultHasher::new();
            w.hash(&mut h);
            salt.hash(&mut h);
            PRIMES[(h.finish() % 16) as usize]
        };
        let deg = p.degree_in(v) as usize;
        let mut img = vec![BigRational::zero(); deg + 1];
        for (m, c) in &p.terms {
            let mut acc = c.clone();
            let mut k = 0usize;
            for (w, e) in &m.0 {
                if w == v {
                    k = *e as usize;
                } else {
                    let val = BigRational::from_integer(value(w).into());
                    for _ in 0..*e {
                        acc *= &val;
                    }
                }
            }
            img[k] += acc;
        }
        if img[deg].is_zero() {
            return None;
        }
        Some(img)
    }

    /// Degree of the gcd of the univariate images of `a` and `b` in `v`;
    /// None if either leading coefficient vanishes at the sample point.
    fn image_gcd_degree(a: &Poly, b: &Poly, v: &Var, salt: u64) -> Option<usize> {
        let trim = |f: &mut Vec<BigRational>| {
            while f.last().map(|c| c.is_zero()).unwrap_or(false) {
                f.pop();
            }
        };
        let mut f = Poly::image_in(a, v, salt)?;
        let mut g = Poly::image_in(b, v, salt)?;
        loop {
            trim(&mut g);
            if g.is_empty() {
                trim(&mut f);
                return Some(f.len().saturating_sub(1));
            }
            if g.len() == 1 {
                return Some(0);
            }
            trim(&mut f);
            if f.len() < g.len() {
                std::mem::swap(&mut f, &mut g);
                continue;
            }
            // f := f mod g (monic division)
            let lg = g.last().unwrap().clone();
            while f.len() >= g.len() {
                let q = f.last().unwrap() / &lg;
                let off = f.len() - g.len();
                for (i, c) in g.iter().enumerate() {
                    let d = &q * c;
                    f[off + i] -= d;
                }
                f.pop();
                trim(&mut f);
                if f.is_empty() {
                    break;
                }
            }
            std::mem::swap(&mut f, &mut g);
        }
    }

    /// gcd of the coefficients of `p` viewed as univariate in `v`.
    fn content_in(p: &Poly, v: &Var) -> Poly {
        let u = p.univ(v);
        let mut g = Poly::zero();
        for c in u.values() {
            g = Poly::gcd(&g, c);
            if let Some(k) = g.as_constant() {
                if k.is_one() {
                    return g;
                }
            }
        }
        g
    }

    fn pseudo_rem(a: &Poly, b: &Poly, v: &Var) -> Poly {
        let db = b.degree_in(v);
        let ub = b.univ(v);
        let lb = ub.get(&db).cloned().unwrap();
        let mut r = a.clone();
        loop {
            let dr = r.degree_in(v);
            if r.is_zero() || dr < db {
                return r;
            }
            let ur = r.univ(v);
            let lr = ur.get(&dr).cloned().unwrap();
            // r = r*lb - lr*v^(dr-db)*b
            let shift = if dr - db == 0 {
                Poly::one()
            } else {
                Poly::var(v.clone()).pow(dr - db)
            };
            r = r.mul(&lb).sub(&lr.mul(&shift).mul(b));
        }
    }

    /// Simultaneous substitution of variables by expressions.
    pub fn subst(&self, map: &HashMap<Var, Expr>) -> Result<Expr> {
        let mut acc = Expr::zero();
        for (m, c) in &self.terms {
            let mut t = Expr::rational(c.clone());
            for (v, e) in &m.0 {
                let base = match map.get(v) {
                    Some(r) => r.clone(),
                    None => Expr::var(v.clone()),
                };
                t = t.mul(&base.powi(*e as i64)?);
            }
            acc = acc.add(&t);
        }
        Ok(acc)
    }

    /// Numeric evaluation; returns (value, max |term| encountered).
    pub fn eval<F>(&self, lookup: &mut F) -> Result<(f64, f64)>
    where
        F: FnMut(&Var) -> Result<f64>,
    {
        let mut sum = 0.0f64;
        let mut maxmag = 0.0f64;
        for (m, c) in &self.terms {
            let mut t = c.to_f64().ok_or(Error::DegeneratePoint)?;
            for (v, e) in &m.0 {
                let x = lookup(v)?;
                t *= x.powi(*e as i32);
            }
            maxmag = maxmag.max(t.abs());
            sum += t;
        }
        Ok((sum, maxmag))
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let mut first = true;
        for (m, c) in self.terms.iter().rev() {
            let neg = c.is_negative();
            let mag = c.abs();
            if first {
                if neg {
                    write!(f, "-")?;
                }
                first = false;
            } else if neg {
                write!(f, " - ")?;
            } else {
                write!(f, " + ")?;
            }
            let coeff_is_one = mag.is_one();
            if !coeff_is_one || m.is_one() {
                if mag.is_integer() {
                    write!(f, "{}", mag.numer())?;
                } else {
                    write!(f, "{}/{}", mag.numer(), mag.denom())?;
                }
                if !m.is_one() {
                    write!(f, "*")?;
                }
            }
            let mut firstv = true;
            for (v, e) in m.0.iter() {
                if !firstv {
                    write!(f, "*")?;
                }
                firstv = false;
                write!(f, "{}", v)?;
                if *e > 1 {
                    write!(f, "^{}", e)?;
                }
            }
        }
        Ok(())
    }
}

/// Canonical rational expression: reduced fraction with monic denominator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Expr {
    num: Poly,
    den: Poly,
}

impl Expr {
    pub fn new(num: Poly, den: Poly) -> Result<Expr> {
        if den.is_zero() {
            return Err(Error::DivisionByZero);
        }
        if num.is_zero() {
            return Ok(Expr {
                num: Poly::zero(),
                den: Poly::one(),
            });
        }
        let g = Poly::gcd(&num, &den);
        let mut n = num.div_exact(&g).expect("gcd divides");
        let mut d = den.div_exact(&g).expect("gcd divides");
        let lc = d.leading().unwrap().1.clone();
        if !lc.is_one() {
            let inv = BigRational::one() / lc;
            n = n.scale(&inv);
            d = d.scale(&inv);
        }
        Ok(Expr { num: n, den: d })
    }

    pub fn zero() -> Expr {
        Expr {
            num: Poly::zero(),
            den: Poly::one(),
        }
    }

    pub fn one() -> Expr {
        Expr {
            num: Poly::one(),
            den: Poly::one(),
        }
    }

    pub fn rational(c: BigRational) -> Expr {
        Expr {
            num: Poly::constant(c),
            den: Poly::one(),
        }
    }

    pub fn integer(n: i64) -> Expr {
        Expr::rational(BigRational::from(BigInt::from(n)))
    }

    pub fn var(v: Var) -> Expr {
        Expr {
            num: Poly::var(v),
            den: Poly::one(),
        }
    }

    pub fn from_poly(p: Poly) -> Expr {
        Expr { num: p, den: Poly::one() }
    }

    pub fn num(&self) -> &Poly {
        &self.num
    }

    pub fn den(&self) -> &Poly {
        &self.den
    }

    pub fn is_zero(&self) -> bool {
        self.num.is_zero()
    }

    pub fn is_one(&self) -> bool {
        self.den.as_constant().map(|c| c.is_one()).unwrap_or(false)
            && self.num.as_constant().map(|c| c.is_one()).unwrap_or(false)
    }

    pub fn as_rational(&self) -> Option<BigRational> {
        let d = self.den.as_constant()?;
        let n = self.num.as_constant()?;
        Some(n / d)
    }

    pub fn add(&self, other: &Expr) -> Expr {
        // Use the denominator gcd so reduction works on small cofactors
        // instead of the full product (Henrici's scheme).
        let g = Poly::gcd(&self.den, &other.den);
        if g.is_constant() {
            let num = self.num.mul(&other.den).add(&other.num.mul(&self.den));
            if num.is_zero() {
                return Expr::zero();
            }
            return Expr {
                num,
                den: self.den.mul(&other.den),
            }
            .rescaled();
        }
        let d1 = self.den.div_exact(&g).expect("gcd divides");
        let d2 = other.den.div_exact(&g).expect("gcd divides");
        let num = self.num.mul(&d2).add(&other.num.mul(&d1));
        if num.is_zero() {
            return Expr::zero();
        }
        // Any residual common factor of num and the combined denominator
        // divides g.
        let h = Poly::gcd(&num, &g);
        let den = self.den.mul(&d2);
        if h.is_constant() {
            return Expr {
                num,
                den,
            }
            .rescaled();
        }
        Expr {
            num: num.div_exact(&h).expect("gcd divides"),
            den: den.div_exact(&h).expect("gcd divides"),
        }
        .rescaled()
    }

    pub fn sub(&self, other: &Expr) -> Expr {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Expr {
        Expr {
            num: self.num.neg(),
            den: self.den.clone(),
        }
    }

    pub fn mul(&self, other: &Expr) -> Expr {
        if self.is_zero() || other.is_zero() {
            return Expr::zero();
        }
        // Cross-cancel before multiplying so reductions stay small.
        let g1 = Poly::gcd(&self.num, &other.den);
        let g2 = Poly::gcd(&other.num, &self.den);
        let n1 = self.num.div_exact(&g1).expect("gcd divides");
        let n2 = other.num.div_exact(&g2).expect("gcd divides");
        let d1 = self.den.div_exact(&g2).expect("gcd divides");
        let d2 = other.den.div_exact(&g1).expect("gcd divides");
        Expr {
            num: n1.mul(&n2),
            den: d1.mul(&d2),
        }
        .rescaled()
    }

    /// Restore the monic-denominator normalization.
    fn rescaled(mut self) -> Expr {
        let lc = self.den.leading().expect("nonzero denominator").1.clone();
        if !lc.is_one() {
            let inv = BigRational::one() / lc;
            self.num = self.num.scale(&inv);
            self.den = self.den.scale(&inv);
        }
        self
    }

    pub fn scale(&self, c: &BigRational) -> Expr {
        Expr::new(self.num.scale(c), self.den.clone()).expect("nonzero denominator")
    }

    pub fn div(&self, other: &Expr) -> Result<Expr> {
        if other.is_zero() {
            return Err(Error::DivisionByZero);
        }
        Expr::new(self.num.mul(&other.den), self.den.mul(&other.num))
    }

    pub fn inv(&self) -> Result<Expr> {
        Expr::one().div(self)
    }

    pub fn powi(&self, n: i64) -> Result<Expr> {
        if n == 0 {
            return Ok(Expr::one());
        }
        let base = if n < 0 { self.inv()? } else { self.clone() };
        let mut out = Expr::one();
        for _ in 0..n.unsigned_abs() {
            out = out.mul(&base);
        }
        Ok(out)
    }

    /// Partial derivative treating every variable as independent.
    pub fn diff(&self, v: &Var) -> Expr {
        let dn = self.num.diff(v);
        let dd = self.den.diff(v);
        if dd.is_zero() {
            return Expr::new(dn, self.den.clone()).expect("nonzero denominator");
        }
        Expr::new(
            dn.mul(&self.den).sub(&self.num.mul(&dd)),
            self.den.mul(&self.den),
        )
        .expect("nonzero denominator")
    }

    pub fn subst(&self, map: &HashMap<Var, Expr>) -> Result<Expr> {
        let n = self.num.subst(map)?;
        let d = self.den.subst(map)?;
        n.div(&d)
    }

    pub fn vars(&self) -> BTreeSet<Var> {
        let mut s = self.num.vars();
        s.extend(self.den.vars());
        s
    }

    pub fn contains_var(&self, v: &Var) -> bool {
        self.num.contains_var(v) || self.den.contains_var(v)
    }

    pub fn has_nonlocal(&self) -> bool {
        self.vars().iter().any(|v| v.is_nonlocal_jet())
    }

    pub fn lambda_degree(&self) -> (u32, u32) {
        (self.num.degree_in(&Var::Lambda), self.den.degree_in(&Var::Lambda))
    }

    /// Coefficient of lambda^k, valid when the denominator is lambda-free.
    pub fn lambda_coeff(&self, k: u32) -> Result<Expr> {
        if self.den.contains_var(&Var::Lambda) {
            return Err(Error::LambdaDegree(format!(
                "denominator involves lambda: {}",
                self
            )));
        }
        let cs = self.num.lambda_coeffs();
        let p = cs.get(k as usize).cloned().unwrap_or_else(Poly::zero);
        Expr::new(p, self.den.clone())
    }

    /// Numerator coefficients by powers of lambda, each over the original
    /// denominator with lambda factored out of it. Valid for any expression:
    /// the expression vanishes identically in lambda iff all entries vanish.
    pub fn lambda_parts(&self) -> Vec<Expr> {
        self.num
            .lambda_coeffs()
            .into_iter()
            .map(Expr::from_poly)
            .collect()
    }

    pub fn eval<F>(&self, lookup: &mut F) -> Result<(f64, f64)>
    where
        F: FnMut(&Var) -> Result<f64>,
    {
        let (n, mn) = self.num.eval(lookup)?;
        let (d, md) = self.den.eval(lookup)?;
        if d.abs() < 1e-6 {
            return Err(Error::DegeneratePoint);
        }
        Ok((n / d, mn.max(md).max((n / d).abs())))
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den.as_constant().map(|c| c.is_one()).unwrap_or(false) {
            write!(f, "{}", self.num)
        } else {
            write!(f, "({})/({})", self.num, self.den)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir(ord: u8, name: &str) -> Dir {
        Dir {
            ord,
            name: Arc::from(name),
        }
    }

    fn jet(name: &str, dirs: &[&Dir]) -> Var {
        Var::Jet(JetVar {
            dep: DepRef {
                nonlocal: false,
                ord: 0,
                name: Arc::from(name),
            },
            idx: MultiIndex::from_dirs(dirs.iter().map(|d| (*d).clone()).collect()),
        })
    }

    #[test]
    fn multiindex_priority_order() {
        let y = dir(0, "y");
        let x = dir(1, "x");
        let t = dir(2, "t");
        let uyy = MultiIndex::from_dirs(vec![y.clone(), y.clone()]);
        let uxt = MultiIndex::from_dirs(vec![x.clone(), t.clone()]);
        let uxy = MultiIndex::from_dirs(vec![x.clone(), y.clone()]);
        let ux = MultiIndex::from_dirs(vec![x.clone()]);
        assert!(uyy > uxt);
        assert!(uyy > uxy);
        assert!(uxy > ux);
    }

    #[test]
    fn cancellation_and_gcd_reduction() {
        let y = dir(0, "y");
        let x = dir(1, "x");
        let ux = Expr::var(jet("u", &[&x]));
        let uy = Expr::var(jet("u", &[&y]));
        // (ux^2 - uy^2)/(ux - uy) = ux + uy
        let num = ux.mul(&ux).sub(&uy.mul(&uy));
        let den = ux.sub(&uy);
        let q = num.div(&den).unwrap();
        assert_eq!(q, ux.add(&uy));
        // ux - ux = 0 canonical zero
        assert!(ux.sub(&ux).is_zero());
        assert_eq!(ux.sub(&ux), Expr::zero());
    }

    #[test]
    fn binomial_identity() {
        let y = dir(0, "y");
        let x = dir(1, "x");
        let ux = Expr::var(jet("u", &[&x]));
        let uy = Expr::var(jet("u", &[&y]));
        let lhs = ux.add(&uy).powi(2).unwrap();
        let rhs = ux
            .mul(&ux)
            .add(&ux.mul(&uy).scale(&BigRational::from(BigInt::from(2))))
            .add(&uy.mul(&uy));
        assert!(lhs.sub(&rhs).is_zero());
    }

    #[test]
    fn self_division_is_one() {
        let x = dir(1, "x");
        let t = dir(2, "t");
        let uzt = Expr::var(jet("u", &[&x, &t]));
        assert!(uzt.div(&uzt).unwrap().is_one());
    }

    #[test]
    fn partial_derivative() {
        let x = dir(1, "x");
        let ux = jet("u", &[&x]);
        let e = Expr::var(ux.clone()).powi(2).unwrap();
        let d = e.diff(&ux);
        assert_eq!(d, Expr::var(ux).scale(&BigRational::from(BigInt::from(2))));
    }

    #[test]
    fn lambda_parts_split() {
        let x = dir(1, "x");
        let ux = Expr::var(jet("u", &[&x]));
        let l = Expr::var(Var::Lambda);
        let e = l.mul(&ux).add(&Expr::one()).add(&l.mul(&l));
        let parts = e.lambda_parts();
        assert_eq!(parts.len(), 3);
        assert!(parts[0].is_one());
        assert_eq!(parts[1], ux);
        assert!(parts[2].is_one());
    }
}
