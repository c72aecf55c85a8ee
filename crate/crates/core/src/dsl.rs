//! The workspace DSL: `#` comments, a `system` block declaring symbols,
//! equations and their solved leading derivatives, followed by `op`, `lax`,
//! `nonlocal`, `ro`, and `ansatz` declarations.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;

use crate::covering::{Covering, NonlocalVariable};
use crate::error::{Error, Result};
use crate::expr::{DepRef, Dir, Expr, JetVar, MultiIndex, Var};
use crate::jet::{PDESystem, Workspace};
use crate::ops::TDOperator;

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Int(BigInt),
    LBracket,
    RBracket,
    LParen,
    RParen,
    Comma,
    Colon,
    Equals,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
}

#[derive(Clone, Debug)]
struct Sp {
    tok: Tok,
    line: usize,
    col: usize,
}

fn err(line: usize, col: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        col,
        msg: msg.into(),
    }
}

fn lex_line(text: &str, line_no: usize) -> Result<Vec<Sp>> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        match c {
            '#' => break,
            ' ' | '\t' | '\r' => {
                i += 1;
                continue;
            }
            '[' => out.push(Sp { tok: Tok::LBracket, line: line_no, col }),
            ']' => out.push(Sp { tok: Tok::RBracket, line: line_no, col }),
            '(' => out.push(Sp { tok: Tok::LParen, line: line_no, col }),
            ')' => out.push(Sp { tok: Tok::RParen, line: line_no, col }),
            ',' => out.push(Sp { tok: Tok::Comma, line: line_no, col }),
            ':' => out.push(Sp { tok: Tok::Colon, line: line_no, col }),
            '=' => out.push(Sp { tok: Tok::Equals, line: line_no, col }),
            '+' => out.push(Sp { tok: Tok::Plus, line: line_no, col }),
            '-' => out.push(Sp { tok: Tok::Minus, line: line_no, col }),
            '*' => out.push(Sp { tok: Tok::Star, line: line_no, col }),
            '/' => out.push(Sp { tok: Tok::Slash, line: line_no, col }),
            '^' => out.push(Sp { tok: Tok::Caret, line: line_no, col }),
            _ if c.is_ascii_digit() => {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                let s: String = chars[start..i].iter().collect();
                out.push(Sp {
                    tok: Tok::Int(s.parse().unwrap()),
                    line: line_no,
                    col: start + 1,
                });
                continue;
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let s: String = chars[start..i].iter().collect();
                out.push(Sp {
                    tok: Tok::Ident(s),
                    line: line_no,
                    col: start + 1,
                });
                continue;
            }
            _ => return Err(err(line_no, col, format!("unexpected character `{}`", c))),
        }
        i += 1;
    }
    Ok(out)
}

/// Token-stream parser for (operator) expressions. Every node is carried as
/// a `TDOperator`; pure expressions are zero-order 1x1 operators.
struct P<'a> {
    toks: &'a [Sp],
    pos: usize,
    ws: &'a Workspace,
    allow_d: bool,
    line: usize,
}

impl<'a> P<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|s| &s.tok)
    }

    fn here(&self) -> (usize, usize) {
        self.toks
            .get(self.pos)
            .map(|s| (s.line, s.col))
            .unwrap_or((self.line, 1))
    }

    fn bump(&mut self) -> Option<&Sp> {
        let s = self.toks.get(self.pos);
        self.pos += 1;
        s
    }

    fn expect(&mut self, t: Tok, what: &str) -> Result<()> {
        let (l, c) = self.here();
        match self.bump() {
            Some(s) if s.tok == t => Ok(()),
            _ => Err(err(l, c, format!("expected {}", what))),
        }
    }

    fn parse_sum(&mut self) -> Result<TDOperator> {
        let mut acc = self.parse_product()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    let rhs = self.parse_product()?;
                    acc = self.op_add(acc, rhs)?;
                }
                Some(Tok::Minus) => {
                    self.bump();
                    let rhs = self.parse_product()?;
                    acc = self.op_add(acc, rhs.neg())?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn op_add(&self, a: TDOperator, b: TDOperator) -> Result<TDOperator> {
        if (a.rows, a.cols) != (b.rows, b.cols) {
            return Err(err(self.line, 1, "matrix dimension mismatch in sum"));
        }
        Ok(a.add(&b))
    }

    fn parse_product(&mut self) -> Result<TDOperator> {
        let mut acc = self.parse_power()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.bump();
                    let rhs = self.parse_power()?;
                    acc = acc.compose(&rhs).map_err(|e| {
                        err(self.line, 1, format!("{}", e))
                    })?;
                }
                Some(Tok::Slash) => {
                    let (l, c) = self.here();
                    self.bump();
                    let rhs = self.parse_power()?;
                    let rhs = as_scalar(&rhs)
                        .ok_or_else(|| err(l, c, "division requires a scalar right side"))?;
                    let inv = rhs.inv().map_err(|e| err(l, c, format!("{}", e)))?;
                    acc = acc.scale(&inv);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn parse_power(&mut self) -> Result<TDOperator> {
        let base = self.parse_atom()?;
        if let Some(Tok::Caret) = self.peek() {
            let (l, c) = self.here();
            self.bump();
            let exp = match self.bump() {
                Some(Sp { tok: Tok::Int(n), .. }) => n.clone(),
                _ => return Err(err(l, c, "expected integer exponent")),
            };
            let e = as_scalar(&base)
                .ok_or_else(|| err(l, c, "power requires a scalar base"))?;
            let n: i64 = e_to_i64(&exp).ok_or_else(|| err(l, c, "exponent too large"))?;
            let p = e.powi(n).map_err(|ei| err(l, c, format!("{}", ei)))?;
            return Ok(TDOperator::scalar(p));
        }
        Ok(base)
    }

    fn parse_atom(&mut self) -> Result<TDOperator> {
        let (l, c) = self.here();
        match self.peek().cloned() {
            Some(Tok::Minus) => {
                self.bump();
                Ok(self.parse_power()?.neg())
            }
            Some(Tok::Int(n)) => {
                self.bump();
                Ok(TDOperator::scalar(Expr::rational(BigRational::from(n))))
            }
            Some(Tok::LParen) => {
                self.bump();
                let inner = self.parse_sum()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Some(Tok::LBracket) => self.parse_matrix(),
            Some(Tok::Ident(name)) => {
                self.bump();
                self.parse_symbol(&name, l, c)
            }
            _ => Err(err(l, c, "expected an expression")),
        }
    }

    fn parse_matrix(&mut self) -> Result<TDOperator> {
        let (l, c) = self.here();
        self.expect(Tok::LBracket, "`[`")?;
        let mut rows: Vec<Vec<Expr>> = Vec::new();
        loop {
            self.expect(Tok::LBracket, "`[` starting a matrix row")?;
            let mut row = Vec::new();
            loop {
                let e = self.parse_sum()?;
                let e = as_scalar(&e)
                    .ok_or_else(|| err(l, c, "matrix entries must be scalar expressions"))?;
                row.push(e);
                match self.peek() {
                    Some(Tok::Comma) => {
                        self.bump();
                    }
                    Some(Tok::RBracket) => {
                        self.bump();
                        break;
                    }
                    _ => return Err(err(l, c, "expected `,` or `]` in matrix row")),
                }
            }
            if let Some(prev) = rows.first() {
                if prev.len() != row.len() {
                    return Err(err(l, c, "ragged matrix rows"));
                }
            }
            rows.push(row);
            match self.peek() {
                Some(Tok::Comma) => {
                    self.bump();
                }
                Some(Tok::RBracket) => {
                    self.bump();
                    break;
                }
                _ => return Err(err(l, c, "expected `,` or `]` after matrix row")),
            }
        }
        let r = rows.len();
        let cl = rows[0].len();
        let mut op = TDOperator::zero(r, cl);
        for (i, row) in rows.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                op.add_term(MultiIndex::empty(), i, j, e);
            }
        }
        Ok(op)
    }

    fn parse_symbol(&mut self, name: &str, l: usize, c: usize) -> Result<TDOperator> {
        if name == "D" {
            if !self.allow_d {
                return Err(err(l, c, "total-derivative token D[..] not allowed here"));
            }
            self.expect(Tok::LBracket, "`[` after D")?;
            let dir = self.parse_dir()?;
            self.expect(Tok::RBracket, "`]`")?;
            return Ok(TDOperator::d(&dir));
        }
        if name == "lambda" {
            return Ok(TDOperator::scalar(Expr::var(Var::Lambda)));
        }
        if let Some(Tok::LBracket) = self.peek() {
            // jet coordinate NAME[d1,d2,...]
            let dep = self
                .ws
                .dep(name)
                .cloned()
                .ok_or_else(|| Error::BadJet(name.to_string()))?;
            self.bump();
            let mut dirs = Vec::new();
            loop {
                dirs.push(self.parse_dir()?);
                match self.peek() {
                    Some(Tok::Comma) => {
                        self.bump();
                    }
                    Some(Tok::RBracket) => {
                        self.bump();
                        break;
                    }
                    _ => return Err(err(l, c, "expected `,` or `]` in jet index")),
                }
            }
            return Ok(TDOperator::scalar(Expr::var(Var::Jet(JetVar {
                dep,
                idx: MultiIndex::from_dirs(dirs),
            }))));
        }
        if let Some(d) = self.ws.dir(name) {
            return Ok(TDOperator::scalar(Expr::var(Var::Indep(d.clone()))));
        }
        if let Some(dep) = self.ws.dep(name) {
            return Ok(TDOperator::scalar(Expr::var(Var::Jet(JetVar {
                dep: dep.clone(),
                idx: MultiIndex::empty(),
            }))));
        }
        if self.ws.constants.iter().any(|k| &**k == name) {
            return Ok(TDOperator::scalar(Expr::var(Var::Constant(Arc::from(name)))));
        }
        Err(Error::UnknownSymbol(name.to_string()))
    }

    fn parse_dir(&mut self) -> Result<Dir> {
        let (l, c) = self.here();
        match self.bump() {
            Some(Sp { tok: Tok::Ident(n), .. }) => {
                let n = n.clone();
                self.ws
                    .dir(&n)
                    .cloned()
                    .ok_or_else(|| err(l, c, format!("unknown direction `{}`", n)))
            }
            _ => Err(err(l, c, "expected a direction name")),
        }
    }
}

fn e_to_i64(n: &BigInt) -> Option<i64> {
    use num_traits::ToPrimitive;
    n.to_i64()
}

/// The zero-order 1x1 content of an operator, when it is one.
pub fn as_scalar(op: &TDOperator) -> Option<Expr> {
    if op.rows != 1 || op.cols != 1 {
        return None;
    }
    if op.order() > 0 {
        return None;
    }
    Some(op.coeff(&MultiIndex::empty(), 0, 0))
}

fn parse_with(toks: &[Sp], ws: &Workspace, allow_d: bool, line: usize) -> Result<TDOperator> {
    let mut p = P {
        toks,
        pos: 0,
        ws,
        allow_d,
        line,
    };
    let op = p.parse_sum()?;
    if p.pos != toks.len() {
        let (l, c) = p.here();
        return Err(err(l, c, "unexpected trailing input"));
    }
    Ok(op)
}

/// Parse a pure expression (no D tokens) against a workspace.
pub fn parse_expr(text: &str, ws: &Workspace) -> Result<Expr> {
    let toks = lex_line(text, 1)?;
    let op = parse_with(&toks, ws, false, 1)?;
    as_scalar(&op).ok_or_else(|| err(1, 1, "expected a scalar expression"))
}

/// Parse an operator expression (D tokens and matrices allowed).
pub fn parse_opexpr(text: &str, ws: &Workspace) -> Result<TDOperator> {
    let toks = lex_line(text, 1)?;
    parse_with(&toks, ws, true, 1)
}

/// One `lax` declaration with an optional designated eliminated direction.
#[derive(Clone, Debug)]
pub struct LaxDecl {
    pub name: String,
    pub op: TDOperator,
    pub eliminated: Option<Dir>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ROMode {
    Direct,
    Adjoint,
}

/// A parsed `ro` block referencing named operators.
#[derive(Clone, Debug)]
pub struct ROBlock {
    pub name: String,
    pub a: [String; 2],
    pub b: [String; 2],
    pub l: Option<TDOperator>,
    pub m: Option<TDOperator>,
    pub solve_dirs: Option<(Dir, Dir)>,
    pub mode: ROMode,
}

/// A parsed `ansatz` block.
#[derive(Clone, Debug)]
pub struct AnsatzBlock {
    pub name: String,
    pub form: String,
    pub basis: Vec<Expr>,
    pub order: u32,
}

/// A fully parsed workspace file.
#[derive(Clone, Debug)]
pub struct WorkspaceFile {
    pub system: Arc<PDESystem>,
    pub ops: Vec<(String, TDOperator)>,
    pub laxes: Vec<LaxDecl>,
    pub covering: Covering,
    pub ro: Option<ROBlock>,
    pub ansatz: Vec<AnsatzBlock>,
}

impl WorkspaceFile {
    pub fn op(&self, name: &str) -> Option<&TDOperator> {
        self.ops
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, o)| o)
            .or_else(|| {
                self.laxes
                    .iter()
                    .find(|l| l.name == name)
                    .map(|l| &l.op)
            })
    }
}

/// Solve `constraint = 0` for the largest constant that appears linearly.
fn constraint_rule(e: &Expr, line: usize) -> Result<(Var, Expr)> {
    let consts: Vec<Var> = e
        .vars()
        .into_iter()
        .filter(|v| matches!(v, Var::Constant(_)))
        .collect();
    for v in consts.iter().rev() {
        let coeff = e.diff(v);
        if coeff.is_zero() || coeff.contains_var(v) {
            continue;
        }
        let rest = e.sub(&coeff.mul(&Expr::var(v.clone())));
        if rest.contains_var(v) {
            continue;
        }
        let rhs = rest.neg().div(&coeff)?;
        return Ok((v.clone(), rhs));
    }
    Err(err(line, 1, "constraint has no constant appearing linearly"))
}

/// Solve equation `f = 0` for the jet coordinate `lead` (must be linear).
fn orient_equation(f: &Expr, lead: &JetVar, line: usize) -> Result<Expr> {
    let v = Var::Jet(lead.clone());
    let coeff = f.diff(&v);
    if coeff.is_zero() {
        return Err(err(line, 1, format!("equation does not contain {}", v)));
    }
    if coeff.contains_var(&v) {
        return Err(err(line, 1, format!("equation is nonlinear in {}", v)));
    }
    let rest = f.sub(&coeff.mul(&Expr::var(v.clone())));
    if rest.contains_var(&v) {
        return Err(err(line, 1, format!("equation is nonlinear in {}", v)));
    }
    rest.neg().div(&coeff)
}

fn ident_list(toks: &[Sp]) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let mut want_name = true;
    for s in toks {
        match (&s.tok, want_name) {
            (Tok::Ident(n), true) => {
                names.push(n.clone());
                want_name = false;
            }
            (Tok::Comma, false) => want_name = true,
            _ => return Err(err(s.line, s.col, "expected a comma-separated name list")),
        }
    }
    if names.is_empty() || want_name {
        return Err(err(1, 1, "expected at least one name"));
    }
    Ok(names)
}

/// Parse a full workspace file.
pub fn parse_workspace(text: &str) -> Result<WorkspaceFile> {
    let mut ws = Workspace::default();
    let mut name = String::new();
    let mut equations: Vec<Expr> = Vec::new();
    let mut orientation: Vec<(JetVar, Expr)> = Vec::new();
    let mut const_rules: Vec<(Var, Expr)> = Vec::new();
    let mut ops: Vec<(String, TDOperator)> = Vec::new();
    let mut laxes: Vec<LaxDecl> = Vec::new();
    let mut covering = Covering::default();
    let mut ro: Option<ROBlock> = None;
    let mut ansatz: Vec<AnsatzBlock> = Vec::new();

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .collect::<Vec<_>>()
        .into_iter()
        .peekable();

    enum Block {
        Top,
        System,
        Nonlocal(String, BTreeMap<Dir, Expr>),
        Ro(ROBlock),
        Ansatz(AnsatzBlock),
    }
    let mut block = Block::Top;
    let mut seen_system = false;

    while let Some((ln, raw)) = lines.next() {
        let toks = lex_line(raw, ln)?;
        if toks.is_empty() {
            continue;
        }
        let head = match &toks[0].tok {
            Tok::Ident(s) => s.as_str(),
            _ => return Err(err(ln, toks[0].col, "expected a keyword")),
        };
        let rest = &toks[1..];
        match &mut block {
            Block::Top => match head {
                "system" => {
                    if seen_system {
                        return Err(err(ln, 1, "only one system block per file"));
                    }
                    let [Sp { tok: Tok::Ident(n), .. }] = rest else {
                        return Err(err(ln, 1, "expected `system NAME`"));
                    };
                    name = n.clone();
                    seen_system = true;
                    block = Block::System;
                }
                "op" | "lax" => {
                    if !seen_system {
                        return Err(err(ln, 1, "operator declared before the system block"));
                    }
                    let (n, eqpos) = match rest {
                        [Sp { tok: Tok::Ident(n), .. }, Sp { tok: Tok::Equals, .. }, ..] => {
                            (n.clone(), 2)
                        }
                        _ => return Err(err(ln, 1, format!("expected `{} NAME = ...`", head))),
                    };
                    let mut body = &rest[eqpos..];
                    let mut eliminated = None;
                    if head == "lax" {
                        // optional trailing `solve DIR`
                        if body.len() >= 2 {
                            if let (Tok::Ident(kw), Tok::Ident(dn)) =
                                (&body[body.len() - 2].tok, &body[body.len() - 1].tok)
                            {
                                if kw == "solve" {
                                    let d = ws.dir(dn).cloned().ok_or_else(|| {
                                        err(ln, 1, format!("unknown direction `{}`", dn))
                                    })?;
                                    eliminated = Some(d);
                                    body = &body[..body.len() - 2];
                                }
                            }
                        }
                    }
                    let op = parse_with(body, &ws, true, ln)?;
                    if head == "op" {
                        ops.push((n, op));
                    } else {
                        laxes.push(LaxDecl {
                            name: n,
                            op,
                            eliminated,
                        });
                    }
                }
                "nonlocal" => {
                    let [Sp { tok: Tok::Ident(n), .. }] = rest else {
                        return Err(err(ln, 1, "expected `nonlocal NAME`"));
                    };
                    ws.add_nonlocal(n);
                    block = Block::Nonlocal(n.clone(), BTreeMap::new());
                }
                "ro" => {
                    let [Sp { tok: Tok::Ident(n), .. }] = rest else {
                        return Err(err(ln, 1, "expected `ro NAME`"));
                    };
                    block = Block::Ro(ROBlock {
                        name: n.clone(),
                        a: [String::new(), String::new()],
                        b: [String::new(), String::new()],
                        l: None,
                        m: None,
                        solve_dirs: None,
                        mode: ROMode::Direct,
                    });
                }
                "ansatz" => {
                    let [Sp { tok: Tok::Ident(n), .. }] = rest else {
                        return Err(err(ln, 1, "expected `ansatz NAME`"));
                    };
                    block = Block::Ansatz(AnsatzBlock {
                        name: n.clone(),
                        form: String::new(),
                        basis: Vec::new(),
                        order: 0,
                    });
                }
                other => return Err(err(ln, 1, format!("unknown declaration `{}`", other))),
            },
            Block::System => match head {
                "indep" => {
                    for n in ident_list(rest)? {
                        if ws.dir(&n).is_some() {
                            return Err(err(ln, 1, format!("duplicate direction `{}`", n)));
                        }
                        ws.independents.push(Dir {
                            ord: ws.independents.len() as u8,
                            name: Arc::from(n.as_str()),
                        });
                    }
                }
                "dep" => {
                    for n in ident_list(rest)? {
                        ws.dependents.push(DepRef {
                            nonlocal: false,
                            ord: ws.dependents.len() as u8,
                            name: Arc::from(n.as_str()),
                        });
                    }
                }
                "const" => {
                    for n in ident_list(rest)? {
                        ws.constants.push(Arc::from(n.as_str()));
                    }
                }
                "constraint" => {
                    let e = parse_with(rest, &ws, false, ln)?;
                    let e = as_scalar(&e)
                        .ok_or_else(|| err(ln, 1, "constraint must be a scalar expression"))?;
                    const_rules.push(constraint_rule(&e, ln)?);
                }
                "eq" => {
                    let e = parse_with(rest, &ws, false, ln)?;
                    let e = as_scalar(&e)
                        .ok_or_else(|| err(ln, 1, "equation must be a scalar expression"))?;
                    equations.push(e);
                }
                "solve" => {
                    let e = parse_with(rest, &ws, false, ln)?;
                    let e = as_scalar(&e).ok_or_else(|| err(ln, 1, "expected a jet coordinate"))?;
                    let vars: Vec<Var> = e.vars().into_iter().collect();
                    let lead = match (vars.as_slice(), e.num().terms.len()) {
                        ([Var::Jet(j)], 1) => j.clone(),
                        _ => return Err(err(ln, 1, "expected a single jet coordinate")),
                    };
                    if orientation.len() >= equations.len() {
                        return Err(err(ln, 1, "solve line without a preceding eq line"));
                    }
                    let f = &equations[orientation.len()];
                    let rhs = orient_equation(f, &lead, ln)?;
                    orientation.push((lead, rhs));
                }
                "end" => block = Block::Top,
                other => return Err(err(ln, 1, format!("unknown system keyword `{}`", other))),
            },
            Block::Nonlocal(n, rels) => match head {
                "rel" => {
                    let (dir, colon) = match rest {
                        [Sp { tok: Tok::Ident(d), .. }, Sp { tok: Tok::Colon, .. }, ..] => {
                            (d.clone(), 2)
                        }
                        _ => return Err(err(ln, 1, "expected `rel DIR: EXPR`")),
                    };
                    let d = ws
                        .dir(&dir)
                        .cloned()
                        .ok_or_else(|| err(ln, 1, format!("unknown direction `{}`", dir)))?;
                    if rels.contains_key(&d) {
                        return Err(err(ln, 1, format!("duplicate relation direction `{}`", dir)));
                    }
                    let e = parse_with(&rest[colon..], &ws, false, ln)?;
                    let e = as_scalar(&e)
                        .ok_or_else(|| err(ln, 1, "relation must be a scalar expression"))?;
                    rels.insert(d, e);
                }
                "end" => {
                    let dep = ws.dep(n).unwrap().clone();
                    covering = covering.define_nonlocal(NonlocalVariable {
                        dep,
                        relations: std::mem::take(rels),
                    })?;
                    block = Block::Top;
                }
                other => return Err(err(ln, 1, format!("unknown nonlocal keyword `{}`", other))),
            },
            Block::Ro(rb) => match head {
                "A" | "B" => {
                    let [Sp { tok: Tok::Ident(n1), .. }, Sp { tok: Tok::Ident(n2), .. }] = rest
                    else {
                        return Err(err(ln, 1, format!("expected `{} NAME NAME`", head)));
                    };
                    let pair = [n1.clone(), n2.clone()];
                    if head == "A" {
                        rb.a = pair;
                    } else {
                        rb.b = pair;
                    }
                }
                "L" | "M" => {
                    let op = parse_with(rest, &ws, true, ln)?;
                    if head == "L" {
                        rb.l = Some(op);
                    } else {
                        rb.m = Some(op);
                    }
                }
                "solve_dirs" => {
                    let [Sp { tok: Tok::Ident(p), .. }, Sp { tok: Tok::Ident(q), .. }] = rest
                    else {
                        return Err(err(ln, 1, "expected `solve_dirs DIR DIR`"));
                    };
                    let dp = ws
                        .dir(p)
                        .cloned()
                        .ok_or_else(|| err(ln, 1, format!("unknown direction `{}`", p)))?;
                    let dq = ws
                        .dir(q)
                        .cloned()
                        .ok_or_else(|| err(ln, 1, format!("unknown direction `{}`", q)))?;
                    if dp == dq {
                        return Err(err(ln, 1, "solve_dirs must name two distinct directions"));
                    }
                    rb.solve_dirs = Some((dp, dq));
                }
                "mode" => {
                    let [Sp { tok: Tok::Ident(m), .. }] = rest else {
                        return Err(err(ln, 1, "expected `mode direct|adjoint`"));
                    };
                    rb.mode = match m.as_str() {
                        "direct" => ROMode::Direct,
                        "adjoint" => ROMode::Adjoint,
                        _ => return Err(err(ln, 1, "expected `mode direct|adjoint`")),
                    };
                }
                "end" => {
                    if rb.a[0].is_empty() || rb.b[0].is_empty() {
                        return Err(err(ln, 1, "ro block needs both A and B lines"));
                    }
                    ro = Some(std::mem::replace(
                        rb,
                        ROBlock {
                            name: String::new(),
                            a: [String::new(), String::new()],
                            b: [String::new(), String::new()],
                            l: None,
                            m: None,
                            solve_dirs: None,
                            mode: ROMode::Direct,
                        },
                    ));
                    block = Block::Top;
                }
                other => return Err(err(ln, 1, format!("unknown ro keyword `{}`", other))),
            },
            Block::Ansatz(ab) => match head {
                "form" => {
                    let [Sp { tok: Tok::Ident(f), .. }] = rest else {
                        return Err(err(ln, 1, "expected `form psi1|psi2|psi3|reciprocal`"));
                    };
                    ab.form = f.clone();
                }
                "basis" => {
                    // comma-separated expressions
                    let mut start = 0;
                    let mut depth = 0usize;
                    for (i, s) in rest.iter().enumerate() {
                        match s.tok {
                            Tok::LBracket | Tok::LParen => depth += 1,
                            Tok::RBracket | Tok::RParen => depth -= 1,
                            Tok::Comma if depth == 0 => {
                                let e = parse_with(&rest[start..i], &ws, false, ln)?;
                                ab.basis.push(
                                    as_scalar(&e)
                                        .ok_or_else(|| err(ln, 1, "basis entries are scalar"))?,
                                );
                                start = i + 1;
                            }
                            _ => {}
                        }
                    }
                    let e = parse_with(&rest[start..], &ws, false, ln)?;
                    ab.basis
                        .push(as_scalar(&e).ok_or_else(|| err(ln, 1, "basis entries are scalar"))?);
                }
                "order" => {
                    let [Sp { tok: Tok::Int(n), .. }] = rest else {
                        return Err(err(ln, 1, "expected `order N`"));
                    };
                    ab.order = e_to_i64(n).and_then(|v| u32::try_from(v).ok()).ok_or_else(
                        || err(ln, 1, "order out of range"),
                    )?;
                }
                "end" => {
                    ansatz.push(std::mem::replace(
                        ab,
                        AnsatzBlock {
                            name: String::new(),
                            form: String::new(),
                            basis: Vec::new(),
                            order: 0,
                        },
                    ));
                    block = Block::Top;
                }
                other => return Err(err(ln, 1, format!("unknown ansatz keyword `{}`", other))),
            },
        }
    }
    if !matches!(block, Block::Top) {
        return Err(err(text.lines().count(), 1, "unterminated block"));
    }
    if !seen_system {
        return Err(err(1, 1, "file has no system block"));
    }
    if orientation.len() != equations.len() {
        return Err(err(
            1,
            1,
            "every eq line needs a matching solve line".to_string(),
        ));
    }
    let system = PDESystem {
        name,
        ws,
        equations,
        orientation,
        const_rules,
    };
    system.validate()?;
    Ok(WorkspaceFile {
        system: Arc::new(system),
        ops,
        laxes,
        covering,
        ro,
        ansatz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    #[test]
    fn expression_round_trip() {
        let sys = corpus::load_system("pavlov").unwrap();
        let ws = &sys.ws;
        let e = parse_expr("u[y,y] + u[x]*u[x,y]", ws).unwrap();
        let back = parse_expr(&e.to_string(), ws).unwrap();
        assert_eq!(e, back);
    }

    #[test]
    fn cancellation_during_parse() {
        let sys = corpus::load_system("pavlov").unwrap();
        let e = parse_expr("u[x] - u[x]", &sys.ws).unwrap();
        assert!(e.is_zero());
    }

    #[test]
    fn rational_coefficient() {
        let sys = corpus::load_system("pavlov").unwrap();
        let e = parse_expr("lambda*(1/2)*u[x,t]", &sys.ws).unwrap();
        let two = Expr::integer(2);
        let doubled = e.mul(&two);
        let want = parse_expr("lambda*u[x,t]", &sys.ws).unwrap();
        assert_eq!(doubled, want);
    }

    #[test]
    fn syntax_error_has_position() {
        let e = parse_workspace("system s\nindep x$\nend").unwrap_err();
        match e {
            Error::Parse { line, col, .. } => {
                assert_eq!(line, 2);
                assert!(col > 0);
            }
            other => panic!("expected parse error, got {:?}", other),
        }
    }

    #[test]
    fn unknown_symbol_rejected() {
        let sys = corpus::load_system("pavlov").unwrap();
        assert!(parse_expr("q[x]", &sys.ws).is_err());
        assert!(parse_expr("nope", &sys.ws).is_err());
    }

    #[test]
    fn substitution_of_heavenly_constraint() {
        let sys = corpus::load_system("heavenly").unwrap();
        // a+b+c reduces to zero under the constraint rule.
        let e = parse_expr("a + b + c", &sys.ws).unwrap();
        let ctx = crate::jet::Context::new(sys);
        assert!(ctx.normal_form(&e).unwrap().is_zero());
    }

    #[test]
    fn matrix_literal() {
        let sys = corpus::load_system("pavlov").unwrap();
        let op = parse_opexpr("[[1, u[x]],[0, 1]]", &sys.ws).unwrap();
        assert_eq!((op.rows, op.cols), (2, 2));
    }
}
