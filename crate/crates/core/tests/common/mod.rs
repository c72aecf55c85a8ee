//! Shared helpers for the integration-test targets: a deterministic RNG and
//! random expression / operator generators over a small fixed workspace.

use jetop::dsl::{parse_expr, parse_workspace, WorkspaceFile};
use jetop::expr::{Dir, Expr, MultiIndex};
use jetop::jet::Context;
use jetop::ops::TDOperator;

/// xorshift64* — deterministic, seedable, no dependencies.
pub struct Rng(pub u64);

impl Rng {
    pub fn next(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.0 = x;
        x.wrapping_mul(0x2545F4914F6CDD1D)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }

    pub fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len() as u64) as usize]
    }
}

/// A two-direction scalar workspace whose only rewrite sits at order six,
/// far above anything the generators produce, so the normal form acts as
/// the identity on generated expressions.
pub fn free_workspace() -> WorkspaceFile {
    parse_workspace(
        "system free\n  indep x, y\n  dep u\n  eq u[x,x,x,x,x,x]\n  solve u[x,x,x,x,x,x]\nend\n",
    )
    .unwrap()
}

pub fn free_context() -> Context {
    let wf = free_workspace();
    Context::with_covering(wf.system.clone(), wf.covering.clone())
}

/// Atom pool for the generators (local jets up to order two, independents,
/// lambda, and a couple of rationals).
pub fn atoms(ctx: &Context) -> Vec<Expr> {
    [
        "2", "-1/2", "3", "x", "y", "u", "u[x]", "u[y]", "u[x,y]", "u[x,x]", "lambda",
    ]
    .iter()
    .map(|s| parse_expr(s, ctx.ws()).unwrap())
    .collect()
}

/// Random expression tree of bounded depth over the atom pool. Division is
/// only ever by `1 + atom^2` scaled positive, which cannot vanish
/// identically, so the result is always well formed.
pub fn random_expr(rng: &mut Rng, pool: &[Expr], depth: u32) -> Expr {
    if depth == 0 {
        return rng.pick(pool).clone();
    }
    let a = random_expr(rng, pool, depth - 1);
    let b = random_expr(rng, pool, depth - 1);
    match rng.below(7) {
        0 | 1 => a.add(&b),
        2 => a.sub(&b),
        3 | 4 => a.mul(&b),
        5 => a.neg(),
        _ => {
            let d = rng.pick(pool).clone();
            let den = d.mul(&d).add(&Expr::one());
            a.div(&den).unwrap()
        }
    }
}

/// Random scalar operator in total derivatives of order at most `max_order`
/// over `dirs`. Coefficients are kept polynomial (atoms and binary
/// products), so iterated commutators stay within reasonable size.
pub fn random_operator(rng: &mut Rng, pool: &[Expr], dirs: &[Dir], max_order: u32) -> TDOperator {
    let mut op = TDOperator::zero(1, 1);
    let nterms = 1 + rng.below(3);
    for _ in 0..nterms {
        let ord = rng.below(max_order as u64 + 1);
        let mut idx = Vec::new();
        for _ in 0..ord {
            idx.push(rng.pick(dirs).clone());
        }
        let coeff = match rng.below(3) {
            0 => rng.pick(pool).clone(),
            1 => rng.pick(pool).mul(rng.pick(pool)),
            _ => rng.pick(pool).add(rng.pick(pool)),
        };
        op.add_term(MultiIndex::from_dirs(idx), 0, 0, &coeff);
    }
    op
}
