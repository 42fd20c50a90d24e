//! `fbci` command line: validate a run config, solve the base state, run
//! the density iteration, certify saved fields and export them.

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use fbci::config::{Pipeline, RunConfig};
use fbci::grid::{from_csv, to_csv, to_json, Grid};
use fbci::parabolic::{from_snapshot, snapshot};
use fbci::verify::{certify, Certificate};
use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Exit code when certification finds a failed mandatory check.
const EXIT_UNCERTIFIED: u8 = 3;

#[derive(Parser)]
#[command(name = "fbci", version, about = "Convex integration for forward-backward parabolic equations")]
struct Cli {
    /// Run config (TOML); the shipped reference config when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of schedule steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    nx: Option<usize>,
    #[arg(long, global = true)]
    nt: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Flux and problem checks only.
    Validate,
    /// Solve the modified problem and write base.json.
    SolveBase,
    /// Full iteration: base.json, final fields, report.json, profiles.json.
    Densify,
    /// Re-run certification on the saved final fields.
    Verify,
    /// Write the base fields as CSV and the final field as a JSON block.
    Export,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default_config(),
    };
    if let Some(s) = cli.seed {
        c.densify.seed = s;
    }
    if let Some(s) = cli.steps {
        c.densify.steps = s;
    }
    if let Some(o) = &cli.out {
        c.output = o.clone();
    }
    if let Some(n) = cli.nx {
        c.grid.nx = n;
    }
    if let Some(n) = cli.nt {
        c.grid.nt = n;
    }
    Ok(c)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, text).with_context(|| format!("io.write: {}", p.display()))
}

fn write_json(dir: &Path, name: &str, v: &Value) -> Result<()> {
    write(dir, name, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let p = dir.join(name);
    fs::read_to_string(&p).with_context(|| format!("io.read: {}", p.display()))
}

fn validate(p: &Pipeline) {
    let w = &p.window;
    println!("s1* = {}", p.model.s1_star);
    println!("s2* = {}", p.model.s2_star);
    println!("window r1 = {}, r2 = {}", w.r1, w.r2);
    println!("s^- band = [{}, {}]", w.s_minus_r1, w.s_minus_r2);
    println!("s^+ band = [{}, {}]", w.s_plus_r1, w.s_plus_r2);
    println!("modified flux slope range = [{}, {}]", p.sig.lambda_tilde, p.sig.lambda_tilde_hi);
    println!("transition point x0 = {}", p.spec.transition_point);
    println!("b_x from {:?}, u0' from {:?}", p.spec.b_x_source, p.spec.u0_prime_source);
    println!("grid {} x {}, T = {}", p.grid.nx, p.grid.nt, p.grid.t_final);
}

fn solve_base(p: &Pipeline) -> Result<()> {
    let out = &p.config.output;
    fs::create_dir_all(out).with_context(|| format!("io.mkdir: {}", out.display()))?;
    let base = p.base().map_err(|e| anyhow!("parabolic.{e}"))?;
    write_json(out, "base.json", &snapshot(&base))?;
    let part = &base.partition;
    println!(
        "base on {} x {}: Omega2 {} cells, Omega1 {}, Omega3 {}, delta* = {}, gamma_base = {}",
        base.grid.nx,
        base.grid.nt,
        part.omega2.count(),
        part.omega1.count(),
        part.omega3.count(),
        part.delta_star,
        base.gamma_base
    );
    Ok(())
}

fn print_certificate(c: &Certificate) {
    for ch in &c.checks {
        println!("{} {} value {:e} bound {:e}", if ch.pass { "ok  " } else { "FAIL" }, ch.name, ch.value, ch.bound);
    }
    println!(
        "weak residual {:e} (C = {:.4}), mass defect {:e}, phase fraction {:.4}, gauge {:.4}",
        c.weak.max, c.weak_constant, c.mass_defect, c.census.phase_fraction, c.census.gauge
    );
}

fn densify(p: &Pipeline) -> Result<()> {
    let out = &p.config.output;
    fs::create_dir_all(out).with_context(|| format!("io.mkdir: {}", out.display()))?;
    let base = p.base().map_err(|e| anyhow!("parabolic.{e}"))?;
    write_json(out, "base.json", &snapshot(&base))?;
    let run = fbci::densify::iterate(base, p.rebuild(), &p.config.densify).map_err(|e| anyhow!("densify.{e}"))?;
    let report = &run.report;
    let delta = report.certified_delta();
    let cert = certify(&run.state.u, &p.reference(&run.level), p.spec.epsilon, delta);
    write(out, "final_u.csv", &to_csv(&run.state.u))?;
    write(out, "final_v.csv", &to_csv(&run.state.v))?;
    let profiles: Vec<Value> =
        run.profiles.iter().map(|(j, pr)| json!({ "step": j, "profile": pr.summary() })).collect();
    write_json(out, "profiles.json", &Value::Array(profiles))?;
    let doc = json!({
        "config": p.config,
        "s1_star": p.model.s1_star,
        "s2_star": p.model.s2_star,
        "window": p.window,
        "certified_delta": delta,
        "run": report,
        "certificate": cert,
    });
    write_json(out, "report.json", &doc)?;
    for s in &report.steps {
        println!("step {} on {} x {}: {} {}", s.j, s.grid.nx, s.grid.nt, s.status, s.message);
    }
    println!("dist trajectory {:?}", report.dist_trajectory);
    println!("stop: {}", report.stop_reason);
    print_certificate(&cert);
    Ok(())
}

fn verify(p: &Pipeline) -> Result<bool> {
    let out = &p.config.output;
    let report: Value = serde_json::from_str(&read(out, "report.json")?).context("verify.report")?;
    let grid: Grid = serde_json::from_value(report["run"]["final_grid"].clone()).context("verify.report: final_grid")?;
    let delta = report["certified_delta"].as_f64().ok_or_else(|| anyhow!("verify.report: certified_delta"))?;
    let u = from_csv(&read(out, "final_u.csv")?, &grid, "u").map_err(|e| anyhow!("verify.field: {e}"))?;
    let base = p.base_on(&grid).map_err(|e| anyhow!("parabolic.{e}"))?;
    let level = p.level(base);
    let cert = certify(&u, &p.reference(&level), p.spec.epsilon, delta);
    print_certificate(&cert);
    write_json(out, "verify.json", &serde_json::to_value(&cert)?)?;
    let failed = cert.mandatory_failures();
    if failed.is_empty() {
        println!("certified");
    } else {
        println!("failed checks: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}

fn export(p: &Pipeline) -> Result<()> {
    let out = &p.config.output;
    let snap: Value = serde_json::from_str(&read(out, "base.json")?).context("export.base")?;
    let base = from_snapshot(&snap).map_err(|e| anyhow!("parabolic.{e}"))?;
    write(out, "base_u.csv", &to_csv(&base.u_star))?;
    write(out, "base_v.csv", &to_csv(&base.v_star))?;
    let mut written = vec!["base_u.csv", "base_v.csv"];
    if out.join("final_u.csv").exists() {
        let report: Value = serde_json::from_str(&read(out, "report.json")?).context("export.report")?;
        let grid: Grid = serde_json::from_value(report["run"]["final_grid"].clone()).context("export.report")?;
        let u = from_csv(&read(out, "final_u.csv")?, &grid, "u").map_err(|e| anyhow!("export.field: {e}"))?;
        write_json(out, "final_u.json", &to_json(&u))?;
        written.push("final_u.json");
    }
    println!("wrote {}", written.join(", "));
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let p = load_config(cli)?.prepare()?;
    match cli.cmd {
        Cmd::Validate => validate(&p),
        Cmd::SolveBase => solve_base(&p)?,
        Cmd::Densify => densify(&p)?,
        Cmd::Verify => return verify(&p),
        Cmd::Export => export(&p)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_UNCERTIFIED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
