//! Command-line interface: validate workspace files, check and reduce Lax
//! pairs, verify/derive/apply recursion operators, test symmetry candidates,
//! and run the numeric oracle. Exit codes: 0 all checks pass, 1 some check
//! fails, 2 usage or parse error.

use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use jetop::covering::compatibility_check;
use jetop::dsl::{parse_expr, WorkspaceFile};
use jetop::error::Error;
use jetop::jet::{check_invariance, free_total_derivative, Context, InvarianceMode};
use jetop::laxkit::{
    check_lax, derive_ro_ad_route, derive_ro_pipeline, lambda_degree_reduce, LaxPair,
};
use jetop::oracle::{oracle_verify, OracleClaim};
use jetop::recursion::{apply, verify, ROSpec};
use jetop::report::RunReport;
use jetop::Result;

const DEFAULT_SEED: u64 = 0xA5EED;

#[derive(Parser)]
#[command(name = "jetop", version, about = "Operator calculus on jet spaces: recursion operators for dispersionless integrable systems")]
struct Cli {
    /// Emit the report as JSON instead of human-readable text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct OracleOpts {
    /// Number of sample points per claim.
    #[arg(long, default_value_t = 20)]
    trials: u64,
    /// Relative-residual tolerance.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Oracle seed (JETOP_SEED overrides the default).
    #[arg(long, env = "JETOP_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a workspace file and check its declarations for consistency.
    Validate { file: String },
    /// Lax-pair operations.
    Lax {
        #[command(subcommand)]
        cmd: LaxCmd,
    },
    /// Recursion-operator operations.
    Ro {
        #[command(subcommand)]
        cmd: RoCmd,
    },
    /// Invariance checks for symmetry and cosymmetry candidates.
    Symmetry {
        #[command(subcommand)]
        cmd: SymCmd,
    },
    /// Test a named claim numerically at random points on the solution set.
    Oracle {
        file: String,
        /// Claim name: eqN, lax:N, cov:NAME, or ro.
        #[arg(long)]
        claim: String,
        #[command(flatten)]
        oracle: OracleOpts,
    },
}

#[derive(Subcommand)]
enum LaxCmd {
    /// Verify that each declared pair commutes modulo the system.
    Check { file: String },
    /// Reduce the first declared pair to λ-linear form and re-check it.
    Reduce { file: String },
}

#[derive(Subcommand)]
enum RoCmd {
    /// Verify the conditions for the declared recursion-operator blocks.
    Verify { file: String },
    /// Derive a recursion operator from a seed symmetry (or `ad` /
    /// `ad(DIR)` for the adjoint-action route).
    Derive {
        file: String,
        #[arg(long)]
        phi: String,
    },
    /// Apply the declared recursion operator to a seed symmetry.
    Apply {
        file: String,
        /// Seed symmetry expression.
        #[arg(long)]
        seed: String,
        /// Number of applications.
        #[arg(long, default_value_t = 1)]
        steps: u32,
    },
}

#[derive(Subcommand)]
enum SymCmd {
    /// Check a candidate for invariance.
    Check {
        file: String,
        #[arg(long)]
        candidate: String,
        /// `symmetry` (default) or `cosymmetry`.
        #[arg(long, default_value = "symmetry")]
        mode: String,
    },
}

fn load_file(path: &str) -> Result<WorkspaceFile> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(_) => {
            let stem = std::path::Path::new(path)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or(path);
            jetop::corpus::source(stem)
                .ok_or_else(|| Error::UnknownCorpus(path.to_string()))?
                .to_string()
        }
    };
    jetop::dsl::parse_workspace(&text)
}

fn context_of(wf: &WorkspaceFile) -> Context {
    Context::with_covering(wf.system.clone(), wf.covering.clone())
}

fn seed_from_env() -> u64 {
    std::env::var("JETOP_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_SEED)
}

fn cmd_validate(file: &str, report: &mut RunReport) -> Result<()> {
    let wf = load_file(file)?;
    report.push("parse", true, "");
    match wf.system.validate() {
        Ok(()) => report.push("system", true, ""),
        Err(e) => report.push("system", false, e.to_string()),
    }
    let checks = compatibility_check(&wf.covering, wf.system.clone())?;
    report.push_checks(&checks);
    if !wf.laxes.is_empty() {
        match LaxPair::pairs_from_file(&wf) {
            Ok(pairs) => report.push("lax:pairs", true, format!("{} pair(s)", pairs.len())),
            Err(e) => report.push("lax:pairs", false, e.to_string()),
        }
    }
    if wf.ro.is_some() {
        match ROSpec::from_file(&wf) {
            Ok(_) => report.push("ro:resolve", true, ""),
            Err(e) => report.push("ro:resolve", false, e.to_string()),
        }
    }
    Ok(())
}

fn cmd_lax_check(file: &str, report: &mut RunReport) -> Result<()> {
    let wf = load_file(file)?;
    let ctx = context_of(&wf);
    for (i, pair) in LaxPair::pairs_from_file(&wf)?.iter().enumerate() {
        let checks = check_lax(pair, &ctx)?;
        for c in &checks {
            report.push(format!("pair{}:{}", i + 1, c.name), c.pass, c.residual.clone());
        }
    }
    Ok(())
}

fn cmd_lax_reduce(file: &str, report: &mut RunReport) -> Result<()> {
    let wf = load_file(file)?;
    let ctx = context_of(&wf);
    let pairs = LaxPair::pairs_from_file(&wf)?;
    let reduced = lambda_degree_reduce(&pairs[0])?;
    for (i, op) in reduced.ops.iter().enumerate() {
        report.push(format!("reduced:op{}", i + 1), true, op.to_string());
    }
    report.push(
        "reduced:lambda_degree",
        reduced.lambda_degree() <= 1,
        reduced.lambda_degree().to_string(),
    );
    report.push_checks(&check_lax(&reduced, &ctx)?);
    Ok(())
}

fn cmd_ro_verify(file: &str, report: &mut RunReport) -> Result<()> {
    let wf = load_file(file)?;
    let ctx = context_of(&wf);
    let spec = ROSpec::from_file(&wf)?;
    let vr = verify(&spec, &ctx)?;
    report.push_checks(&vr.checks);
    if let Some(l) = &vr.l {
        report.push("factor:L", true, l.to_string());
    }
    if let Some(m) = &vr.m {
        report.push("factor:M", true, m.to_string());
    }
    Ok(())
}

fn cmd_ro_derive(file: &str, phi: &str, report: &mut RunReport) -> Result<()> {
    let wf = load_file(file)?;
    let ctx = context_of(&wf);
    let out = if phi == "ad" || phi.starts_with("ad(") {
        let dir = phi
            .strip_prefix("ad(")
            .and_then(|s| s.strip_suffix(')'))
            .map(|name| {
                ctx.ws()
                    .dir(name)
                    .cloned()
                    .ok_or_else(|| Error::UnknownSymbol(name.to_string()))
            })
            .transpose()?;
        derive_ro_ad_route(&wf, dir.as_ref(), &ctx)?
    } else {
        let phi = parse_expr(phi, ctx.ws())?;
        derive_ro_pipeline(&wf, &phi, &ctx)?
    };
    for (i, ann) in out.annihilators.iter().enumerate() {
        report.push(format!("annihilator{}", i + 1), true, ann.to_string());
    }
    for i in 0..2 {
        report.push(
            format!("relation{}", i + 1),
            true,
            format!("({}) Unew = ({}) U", out.rospec.a[i], out.rospec.b[i]),
        );
    }
    report.push(
        "solve_dirs",
        true,
        format!("{} {}", out.rospec.p.name, out.rospec.q.name),
    );
    report.push_checks(&out.report.checks);
    Ok(())
}

fn cmd_ro_apply(file: &str, seed: &str, steps: u32, report: &mut RunReport) -> Result<()> {
    let wf = load_file(file)?;
    let mut ctx = context_of(&wf);
    let spec = ROSpec::from_file(&wf)?;
    let mut cur = parse_expr(seed, ctx.ws())?;
    for step in 1..=steps {
        let out = apply(&spec, &cur, &ctx)?;
        report.push(format!("step{}:local", step), true, out.local.to_string());
        if let Some(nl) = &out.remainder {
            for (d, rel) in &nl.relations {
                report.push(
                    format!("step{}:nonlocal:{}[{}]", step, nl.dep.name, d.name),
                    true,
                    rel.to_string(),
                );
            }
        }
        report.push(format!("step{}:result", step), true, out.result.to_string());
        ctx = Context::with_covering(wf.system.clone(), out.covering.clone());
        let mode = InvarianceMode::Symmetry;
        let checks = check_invariance(std::slice::from_ref(&out.result), &ctx, mode)?;
        for c in &checks {
            report.push(format!("step{}:invariance:{}", step, c.name), c.pass, c.residual.clone());
        }
        cur = out.result;
    }
    Ok(())
}

fn cmd_symmetry(file: &str, candidate: &str, mode: &str, report: &mut RunReport) -> Result<()> {
    let wf = load_file(file)?;
    let ctx = context_of(&wf);
    let mode = match mode {
        "symmetry" => InvarianceMode::Symmetry,
        "cosymmetry" => InvarianceMode::Cosymmetry,
        other => return Err(Error::UnknownSymbol(format!("mode `{}`", other))),
    };
    let cand = parse_expr(candidate, ctx.ws())?;
    let checks = check_invariance(std::slice::from_ref(&cand), &ctx, mode)?;
    report.push_checks(&checks);
    Ok(())
}

fn cmd_oracle(file: &str, claim: &str, opts: &OracleOpts, report: &mut RunReport) -> Result<()> {
    let wf = load_file(file)?;
    let ctx = context_of(&wf);
    let mut claims: Vec<(String, OracleClaim)> = Vec::new();
    if let Some(n) = claim.strip_prefix("eq") {
        let i: usize = n
            .parse()
            .map_err(|_| Error::UnknownSymbol(format!("claim `{}`", claim)))?;
        let e = ctx
            .system
            .equations
            .get(i - 1)
            .ok_or_else(|| Error::Invalid(format!("no equation {}", i)))?;
        claims.push((claim.to_string(), OracleClaim::Expression(e.clone())));
    } else if let Some(n) = claim.strip_prefix("lax:") {
        let i: usize = n
            .parse()
            .map_err(|_| Error::UnknownSymbol(format!("claim `{}`", claim)))?;
        let pairs = LaxPair::pairs_from_file(&wf)?;
        let pair = pairs
            .get(i - 1)
            .ok_or_else(|| Error::Invalid(format!("no lax pair {}", i)))?;
        let comm = pair.ops[0].commutator(&pair.ops[1])?;
        claims.push((claim.to_string(), OracleClaim::Operator(comm)));
    } else if let Some(name) = claim.strip_prefix("cov:") {
        let v = wf
            .covering
            .variable(name)
            .ok_or_else(|| Error::Invalid(format!("no nonlocal variable `{}`", name)))?;
        let dirs: Vec<_> = v.relations.keys().collect();
        for (a, &di) in dirs.iter().enumerate() {
            for &dj in dirs.iter().skip(a + 1) {
                // Unreduced cross-derivative residual; the sample point
                // resolves solved and covering jets on its own.
                let lhs = free_total_derivative(&v.relations[dj], di);
                let rhs = free_total_derivative(&v.relations[di], dj);
                claims.push((
                    format!("cov:{}:D[{}]D[{}]", name, di.name, dj.name),
                    OracleClaim::Expression(lhs.sub(&rhs)),
                ));
            }
        }
    } else if claim == "ro" {
        let spec = ROSpec::from_file(&wf)?;
        claims.push((
            "ro:i".into(),
            OracleClaim::Operator(spec.a[0].commutator(&spec.a[1])?),
        ));
        // Induced λ-linear pair; its commutator vanishes on the solution
        // set exactly when the operator conditions hold.
        let lam = jetop::expr::Expr::var(jetop::expr::Var::Lambda);
        let x1 = spec.a[0].scale(&lam).sub(&spec.b[0]);
        let x2 = spec.a[1].scale(&lam).sub(&spec.b[1]);
        claims.push(("ro:pair".into(), OracleClaim::Operator(x1.commutator(&x2)?)));
    } else {
        return Err(Error::UnknownSymbol(format!(
            "claim `{}`; use eqN, lax:N, cov:NAME, or ro",
            claim
        )));
    }
    for (name, c) in &claims {
        let check = oracle_verify(name, c, &ctx, opts.trials, opts.tol, opts.seed)?;
        report.push(&check.name, check.pass, check.residual.clone());
    }
    Ok(())
}

fn run(cli: &Cli) -> (RunReport, Result<()>) {
    let (command, file, seed) = match &cli.cmd {
        Cmd::Validate { file } => ("validate".to_string(), file.clone(), seed_from_env()),
        Cmd::Lax { cmd: LaxCmd::Check { file } } => ("lax check".into(), file.clone(), seed_from_env()),
        Cmd::Lax { cmd: LaxCmd::Reduce { file } } => ("lax reduce".into(), file.clone(), seed_from_env()),
        Cmd::Ro { cmd: RoCmd::Verify { file } } => ("ro verify".into(), file.clone(), seed_from_env()),
        Cmd::Ro { cmd: RoCmd::Derive { file, .. } } => ("ro derive".into(), file.clone(), seed_from_env()),
        Cmd::Ro { cmd: RoCmd::Apply { file, .. } } => ("ro apply".into(), file.clone(), seed_from_env()),
        Cmd::Symmetry { cmd: SymCmd::Check { file, .. } } => {
            ("symmetry check".into(), file.clone(), seed_from_env())
        }
        Cmd::Oracle { file, oracle, .. } => ("oracle".into(), file.clone(), oracle.seed),
    };
    let mut report = RunReport::new(command, file, seed);
    let start = Instant::now();
    let res = match &cli.cmd {
        Cmd::Validate { file } => cmd_validate(file, &mut report),
        Cmd::Lax { cmd: LaxCmd::Check { file } } => cmd_lax_check(file, &mut report),
        Cmd::Lax { cmd: LaxCmd::Reduce { file } } => cmd_lax_reduce(file, &mut report),
        Cmd::Ro { cmd: RoCmd::Verify { file } } => cmd_ro_verify(file, &mut report),
        Cmd::Ro { cmd: RoCmd::Derive { file, phi } } => cmd_ro_derive(file, phi, &mut report),
        Cmd::Ro { cmd: RoCmd::Apply { file, seed, steps } } => {
            cmd_ro_apply(file, seed, *steps, &mut report)
        }
        Cmd::Symmetry { cmd: SymCmd::Check { file, candidate, mode } } => {
            cmd_symmetry(file, candidate, mode, &mut report)
        }
        Cmd::Oracle { file, claim, oracle } => cmd_oracle(file, claim, oracle, &mut report),
    };
    report.elapsed_ms = start.elapsed().as_millis() as u64;
    (report, res)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (report, res) = run(&cli);
    match res {
        Ok(()) => {
            if cli.json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
            }
            if report.all_pass() {
                ExitCode::from(0)
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {}", e);
            let usage = matches!(
                e,
                Error::Parse { .. }
                    | Error::UnknownCorpus(_)
                    | Error::UnknownSymbol(_)
            ) || matches!(&e, Error::Stage { source, .. }
                if matches!(**source, Error::Parse { .. }));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
