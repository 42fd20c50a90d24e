//! Acceptance run over the primary criteria. Prints one PASS/FAIL line per
//! criterion; set FBCI_ACCEPTANCE_STRICT=1 to exit non-zero on a failure.

use fbci::config::{Pipeline, RunConfig};
use fbci::densify::{density_step, Level, RunOutcome, StepInputs};
use fbci::flux::{distance_to_kprime, Branch};
use fbci::grid::{Field, Grid};
use fbci::oscillate::{build_profile, Rect};
use fbci::parabolic::{solve_modified, stream_function, stream_identities, SolverOptions};
use fbci::problem::{parse_problem, RawProblem};
use fbci::verify::{certify, modified_sigma, weak_residual, Certificate, WEAK_CONSTANT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

const BRANCH_TOL: f64 = 1e-10;
const PROJECTION_TOL: f64 = 1e-6;
const SOLVER_RATIO: f64 = 3.0;
const STREAM_RATIO: f64 = 2.0;
const ROW_MEAN_TOL: f64 = 1e-12;
const PHASE_FRACTION: f64 = 0.95;
const WEAK_DECAY: f64 = 3.0;
const SEEDS: [u64; 2] = [7, 8];
/// Grid the default schedule reaches before its first successful step.
const STEP_GRID: (usize, usize) = (16384, 256);

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn pipeline() -> Pipeline {
    RunConfig::default_config().prepare().expect("shipped config")
}

fn flux_geometry(p: &Pipeline) -> Outcome {
    let m = &p.model;
    let stars = (m.s1_star - 0.5).abs() < 1e-12 && (m.s2_star - 2.5).abs() < 1e-12;
    let mut branch: f64 = 0.0;
    for j in 0..100 {
        let r = m.sigma_s2() + (m.sigma_s1() - m.sigma_s2()) * j as f64 / 99.0;
        for b in [Branch::Left, Branch::Right] {
            let s = m.branch_inverse(r, b).unwrap();
            branch = branch.max((m.eval(s) - r).abs());
        }
    }
    let w = &p.window;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut proj: f64 = 0.0;
    for _ in 0..100 {
        let (x, y) = (rng.gen_range(0.0..3.0), rng.gen_range(0.8..2.2));
        let mut best = f64::INFINITY;
        for (a, b) in [(w.s_minus_r1, w.s_minus_r2), (w.s_plus_r1, w.s_plus_r2)] {
            for k in 0..500_000 {
                let s = a + (b - a) * k as f64 / 499_999.0;
                best = best.min((x - s).powi(2) + (y - m.eval(s)).powi(2));
            }
        }
        proj = proj.max((distance_to_kprime(&p.kprime, x, y).distance - best.sqrt()).abs());
    }
    outcome(
        stars && branch <= BRANCH_TOL && proj <= PROJECTION_TOL,
        format!("s1* = {}, s2* = {}, branch defect {branch:.1e}, projection defect {proj:.1e}", m.s1_star, m.s2_star),
    )
}

fn solver_convergence(p: &Pipeline) -> Outcome {
    let raw = RawProblem {
        u0: "0.1*cos(pi*x)".into(),
        f: "0.1*exp(-t)*((2*pi^2 - 1.15)*cos(pi*x) + 0.1*pi*x*sin(pi*x))".into(),
        ..RawProblem::default_problem()
    };
    let spec = parse_problem(&raw).unwrap();
    let errs: Vec<f64> = [64, 128, 256]
        .iter()
        .map(|&n| {
            let g = Grid::new(n, n, spec.t_final).unwrap();
            let u = solve_modified(&spec, &p.sig, &g, SolverOptions::default()).unwrap();
            let exact = Field::from_fn(&g, "exact", |x, t| 0.1 * (-t).exp() * (std::f64::consts::PI * x).cos());
            u.max_abs_diff(&exact)
        })
        .collect();
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    outcome(ratios.iter().all(|&r| r >= SOLVER_RATIO), format!("errors {}, ratios {ratios:.2?}", sci(&errs)))
}

fn stream_convergence(p: &Pipeline) -> Outcome {
    let d: Vec<(f64, f64)> = [256, 512]
        .iter()
        .map(|&n| {
            let g = Grid::new(n, n, p.spec.t_final).unwrap();
            let u = solve_modified(&p.spec, &p.sig, &g, SolverOptions::default()).unwrap();
            let v = stream_function(&u, &p.spec, &p.sig);
            stream_identities(&u, &v, &p.spec, &p.sig)
        })
        .collect();
    let (rx, rt) = (d[0].0 / d[1].0, d[0].1 / d[1].1);
    outcome(
        rx >= STREAM_RATIO && rt >= STREAM_RATIO,
        format!("v_x - u ratio {rx:.2}, v_t identity ratio {rt:.2} (256 -> 512)"),
    )
}

fn oscillation_profiles() -> Outcome {
    let g = Grid::new(1024, 256, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut failures = Vec::new();
    let mut worst_mean: f64 = 0.0;
    for k in 0..20 {
        let w = 2 * rng.gen_range(16..=128);
        let ht = rng.gen_range(32..=128);
        let (i0, n0) = (rng.gen_range(0..=g.nx - w), rng.gen_range(0..=g.nt - ht));
        let q = Rect { i0, i1: i0 + w, n0, n1: n0 + ht };
        let (l1, l2, eps) = (rng.gen_range(0.2..2.0), rng.gen_range(0.2..2.0), rng.gen_range(0.1..0.5));
        let prof = match build_profile(q, l1, l2, eps, &g, &mut rng) {
            Ok(p) => p,
            Err(e) => {
                failures.push(format!("case {k}: {e}"));
                continue;
            }
        };
        let (phi, psi) = prof.fields(&g);
        let dx = |f: &Field, i: usize, n: usize| 0.5 * (f.at(i + 1, n) - f.at(i, n) + f.at(i + 1, n + 1) - f.at(i, n + 1)) / g.h();
        let dt = |f: &Field, i: usize, n: usize| 0.5 * (f.at(i, n + 1) - f.at(i, n) + f.at(i + 1, n + 1) - f.at(i + 1, n)) / g.dt();
        let mut a = phi.max_abs() < eps && psi.max_abs() < eps;
        let mut b = true;
        let (mut minus, mut plus) = (0usize, 0usize);
        for n in q.n0..q.n1 {
            for i in q.i0..q.i1 {
                a &= dt(&phi, i, n).abs() < eps && dt(&psi, i, n).abs() < eps;
                let s = dx(&phi, i, n);
                b &= s >= -l1 - 1e-12 && s <= l2 + 1e-12;
                minus += ((s + l1).abs() <= 1e-9) as usize;
                plus += ((s - l2).abs() <= 1e-9) as usize;
            }
        }
        let area = q.cells() as f64 * g.cell_area();
        let c = (minus as f64 * g.cell_area() - l2 / (l1 + l2) * area).abs() < eps
            && (plus as f64 * g.cell_area() - l1 / (l1 + l2) * area).abs() < eps;
        let mut d = true;
        for n in q.n0..=q.n1 {
            for i in q.i0..q.i1 {
                let inc = psi.at(i + 1, n) - psi.at(i, n);
                d &= (inc - 0.5 * g.h() * (phi.at(i, n) + phi.at(i + 1, n))).abs() <= 1e-14;
            }
            let sum: f64 = (q.i0..=q.i1).map(|i| phi.at(i, n) * if i == q.i0 || i == q.i1 { 0.5 } else { 1.0 }).sum();
            worst_mean = worst_mean.max((sum * g.h()).abs());
        }
        let e = worst_mean < ROW_MEAN_TOL;
        for (ok, name) in [(a, "a"), (b, "b"), (c, "c"), (d, "d"), (e, "e")] {
            if !ok {
                failures.push(format!("case {k}: ({name})"));
            }
        }
    }
    outcome(failures.is_empty(), format!("20 cases, worst row mean {worst_mean:.1e}, failures {failures:?}"))
}

fn density_contract(p: &Pipeline) -> Outcome {
    let g = Grid::new(STEP_GRID.0, STEP_GRID.1, p.spec.t_final).unwrap();
    let level = Level::new(p.base_on(&g).unwrap(), &p.spec, &p.kprime);
    let set = level.setting(&p.kprime);
    let state = &level.base_state;
    let delta = 0.5 * state.dist_ratio(&set);
    let opts = &p.config.densify;
    let inputs = StepInputs {
        epsilon: p.spec.epsilon,
        reference_gauge: state.gauge.gauge_value,
        coefficient_norms: p.spec.coefficient_norms(),
        options: opts,
    };
    let (next, diag, _) = match density_step(state, delta, opts.eta0, 0, inputs, &set) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("step failed: {e}")),
    };
    let om = level.base.omega2().count() as f64 * g.cell_area();
    let dist_ok = next.dist_integral <= delta * om;
    let members = next.membership_failures(&set).len();
    let drift = (next.gauge.gauge_value - state.gauge.gauge_value).abs();
    let part = &level.base.partition;
    let outer = part.omega1.or(&part.omega3);
    let strip = (level.base.delta_star() / g.h()).round() as usize;
    let mut moved = 0usize;
    for n in 0..=g.nt {
        for i in 0..=g.nx {
            let lateral = i <= strip || i >= g.nx - strip;
            let fixed = lateral || fbci::inclusion::touches(&outer, &g, i, n);
            if fixed && next.u.at(i, n) != level.base.u_star.at(i, n) {
                moved += 1;
            }
        }
    }
    outcome(
        dist_ok && members == 0 && drift < 0.5 * p.spec.epsilon && moved == 0,
        format!(
            "{}x{}: dist {:.3e} -> {:.3e} (target {:.3e}), membership failures {members}, gauge drift {drift:.2e}, moved outer nodes {moved}, {} blocks",
            g.nx, g.nt, diag.dist_before, next.dist_integral, delta * om, diag.blocks.len()
        ),
    )
}

struct Run {
    seed: u64,
    out: RunOutcome,
    cert: Certificate,
}

fn full_run(seed: u64) -> Run {
    let mut c = RunConfig::default_config();
    c.densify.seed = seed;
    let p = c.prepare().unwrap();
    let out = p.run().expect("density iteration");
    let cert = certify(&out.state.u, &p.reference(&out.level), p.spec.epsilon, out.report.certified_delta());
    Run { seed, out, cert }
}

fn check<'a>(c: &'a Certificate, name: &str) -> &'a fbci::densify::Check {
    c.checks.iter().find(|k| k.name == name).expect(name)
}

fn iteration(r: &Run) -> Outcome {
    let successes: Vec<_> = r.out.report.steps.iter().filter(|s| s.status == "success").collect();
    let mut dists = Vec::new();
    if let Some(d) = successes.first().and_then(|s| s.diagnostics.as_ref()) {
        dists.push(d.dist_before);
    }
    dists.extend(successes.iter().filter_map(|s| s.diagnostics.as_ref()).map(|d| d.dist_after));
    let decreasing = dists.len() >= 2 && dists.windows(2).all(|w| w[1] < w[0]);
    let c = &r.cert.census;
    outcome(
        decreasing && c.phase_fraction >= PHASE_FRACTION && c.lower_forward > 0 && c.upper_forward > 0,
        format!(
            "seed {}: {} successful steps, dist {}, phase fraction {:.3}, forward cells lower {} upper {}, stop: {}",
            r.seed,
            successes.len(),
            sci(&dists),
            c.phase_fraction,
            c.lower_forward,
            c.upper_forward,
            r.out.report.stop_reason
        ),
    )
}

const LEDGER: &[&str] = &[
    "a.outer_nodes_unchanged",
    "a.sup_u",
    "a.sup_ut",
    "c.omega0_minus",
    "c.omega0_plus",
    "d.plus_measure",
    "d.minus_measure",
    "d.gauge_drift",
    "initial_datum_exact",
    "neumann_identity",
];

fn theorem_ledger(r: &Run) -> Outcome {
    let failed: Vec<String> = LEDGER
        .iter()
        .map(|n| check(&r.cert, n))
        .filter(|c| !c.pass)
        .map(|c| format!("{} = {:.3e} > {:.3e}", c.name, c.value, c.bound))
        .collect();
    outcome(failed.is_empty(), format!("seed {}: failed {failed:?}", r.seed))
}

fn base_weak_decay(p: &Pipeline) -> Vec<f64> {
    [128, 256, 512]
        .iter()
        .map(|&n| {
            let base = p.base_on(&Grid::new(n, n, p.spec.t_final).unwrap()).unwrap();
            weak_residual(&base.u_star, &p.spec, modified_sigma(&p.sig)).max
        })
        .collect()
}

fn weak_form(r: &Run, base: &[f64]) -> Outcome {
    let w = check(&r.cert, "weak_residual");
    let ratios: Vec<f64> = base.windows(2).map(|x| x[0] / x[1]).collect();
    outcome(
        w.pass && ratios.iter().all(|&q| q >= WEAK_DECAY),
        format!(
            "seed {}: residual {:.3e} <= {WEAK_CONSTANT} (h + dt + delta) = {:.3e}, C = {:.4}; base ratios {ratios:.2?}",
            r.seed, w.value, w.bound, r.cert.weak_constant
        ),
    )
}

fn report(n: usize, name: &str, o: &Outcome, all: &mut bool) {
    *all &= o.pass;
    println!("criterion {n} [{name}]: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    let t0 = Instant::now();
    let p = pipeline();
    let mut all = true;
    report(1, "flux geometry", &flux_geometry(&p), &mut all);
    report(2, "solver convergence", &solver_convergence(&p), &mut all);
    report(3, "stream identities", &stream_convergence(&p), &mut all);
    report(4, "oscillation profiles", &oscillation_profiles(), &mut all);
    report(5, "density step", &density_contract(&p), &mut all);

    let runs: Vec<Run> = SEEDS.iter().map(|&s| full_run(s)).collect();
    let base = base_weak_decay(&p);
    let c6: Vec<Outcome> = runs.iter().map(iteration).collect();
    let c7: Vec<Outcome> = runs.iter().map(theorem_ledger).collect();
    let c8: Vec<Outcome> = runs.iter().map(|r| weak_form(r, &base)).collect();
    let join = |v: &[Outcome]| outcome(v.iter().all(|o| o.pass), v.iter().map(|o| o.detail.as_str()).collect::<Vec<_>>().join("; "));
    // criteria 6 to 8 are reported on the first seed
    report(6, "iteration", &c6[0], &mut all);
    report(7, "theorem ledger", &c7[0], &mut all);
    report(8, "weak form", &c8[0], &mut all);

    let diff = runs[0].out.state.u.max_abs_diff(&runs[1].out.state.u);
    let distinct = runs[0].out.state.u.grid == runs[1].out.state.u.grid && diff > 10.0 * f64::EPSILON;
    let both = [join(&c6), join(&c7), join(&c8)];
    let failing: Vec<usize> = (6..=8).filter(|k| !both[k - 6].pass).collect();
    report(
        9,
        "multiplicity",
        &outcome(
            distinct && failing.is_empty(),
            format!("seeds {SEEDS:?}: sup difference {diff:.3e}, criteria failing for some seed {failing:?}"),
        ),
        &mut all,
    );
    println!("acceptance finished in {:.1} s", t0.elapsed().as_secs_f64());
    if !all && std::env::var("FBCI_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
