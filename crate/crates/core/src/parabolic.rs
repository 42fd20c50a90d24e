//! Monotone modified problem: time stepping for u*, the stream function
//! v*, the separation of the domain into Omega^1/2/3 and the base gauge.

use crate::flux::{Branch, KPrime, ModifiedFlux, PhaseWindow};
use crate::grid::{cumulative_x, refine, CellMask, Field, Grid, GridError};
use crate::problem::{accumulate_f, potential, ProblemSpec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const NEWTON_MAX: usize = 40;
pub const NEWTON_TOL: f64 = 1e-10;
const BLOWUP: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParabolicError {
    #[error("Newton correction did not converge at step {step} (residual {residual:e})")]
    NonConvergence { step: usize, residual: f64 },
    #[error("field norm exceeded 1e6 at step {0}")]
    StabilityBreach(usize),
    #[error("transition region is empty")]
    EmptyTransitionRegion,
    #[error("no lateral strip lies inside Omega^1")]
    NoLateralMargin,
    #[error("gauge of the base state is {0}, outside (0, 1)")]
    GaugeOutOfRange(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("malformed snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Newton polish after the frozen-slope step.
    pub newton: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { newton: true }
    }
}

fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], scratch: &mut [f64]) {
    let n = diag.len();
    scratch[0] = upper[0] / diag[0];
    rhs[0] /= diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * scratch[i - 1];
        scratch[i] = if i + 1 < n { upper[i] / m } else { 0.0 };
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
}

/// Discrete divergence of the face fluxes with the mirrored boundary flux.
fn divergence(u: &[f64], sig: &ModifiedFlux, h: f64, out: &mut [f64], slopes: &mut [f64]) {
    let m = u.len() - 1;
    let mut prev = 0.0;
    for i in 0..m {
        let s = (u[i + 1] - u[i]) / h;
        let fl = sig.eval(s);
        slopes[i] = sig.slope(s);
        let wgt = if i == 0 { 2.0 } else { 1.0 };
        out[i] = wgt * (fl - prev) / h;
        prev = fl;
    }
    out[m] = 2.0 * (0.0 - prev) / h;
}

/// Explicit convection, reaction and source at time level `t`.
fn explicit_terms(u: &[f64], spec: &ProblemSpec, grid: &Grid, t: f64, out: &mut [f64]) {
    let m = grid.nx;
    let h = grid.h();
    for i in 0..=m {
        let x = grid.x(i);
        let ux = if i == 0 || i == m { 0.0 } else { (u[i + 1] - u[i - 1]) / (2.0 * h) };
        out[i] = spec.b(x, t) * ux + spec.c(x, t) * u[i] + spec.f(x, t);
    }
}

/// Time stepping for the modified problem: BDF2 for the diffusion with
/// the explicit terms extrapolated to the new level, one backward Euler
/// step to start.
pub fn solve_modified(
    spec: &ProblemSpec,
    sig: &ModifiedFlux,
    grid: &Grid,
    opts: SolverOptions,
) -> Result<Field, ParabolicError> {
    let m = grid.nx;
    let (h, dt) = (grid.h(), grid.dt());
    let mut out = Field::zeros(grid, "u_star");
    let mut u: Vec<f64> = (0..=m).map(|i| spec.u0(grid.x(i))).collect();
    out.row_mut(0).copy_from_slice(&u);

    let mut div = vec![0.0; m + 1];
    let mut slopes = vec![0.0; m];
    let mut expl = vec![0.0; m + 1];
    let mut expl_prev = vec![0.0; m + 1];
    let mut u_prev = u.clone();
    let mut known = vec![0.0; m + 1];
    let (mut lo, mut di, mut up) = (vec![0.0; m + 1], vec![0.0; m + 1], vec![0.0; m + 1]);
    let mut rhs = vec![0.0; m + 1];
    let mut scratch = vec![0.0; m + 1];
    let r = dt / (h * h);

    for step in 0..grid.nt {
        std::mem::swap(&mut expl, &mut expl_prev);
        explicit_terms(&u, spec, grid, grid.t(step), &mut expl);
        let alpha = if step == 0 { 1.0 } else { 1.5 };
        for i in 0..=m {
            known[i] = if step == 0 {
                u[i] + dt * expl[i]
            } else {
                2.0 * u[i] - 0.5 * u_prev[i] + dt * (2.0 * expl[i] - expl_prev[i])
            };
        }
        u_prev.copy_from_slice(&u);
        let iters = if opts.newton { 1 + NEWTON_MAX } else { 1 };
        let mut converged = !opts.newton;
        for it in 0..iters {
            divergence(&u, sig, h, &mut div, &mut slopes);
            let mut res: f64 = 0.0;
            for i in 0..=m {
                rhs[i] = -(alpha * u[i] - known[i] - dt * div[i]);
                res = res.max(rhs[i].abs());
            }
            if it > 0 && res <= NEWTON_TOL {
                converged = true;
                break;
            }
            if it == iters - 1 && opts.newton {
                break;
            }
            // Jacobian of the residual: alpha I - dt * dD/du with frozen slopes
            for i in 0..=m {
                let a_l = if i > 0 { slopes[i - 1] } else { 0.0 };
                let a_r = if i < m { slopes[i] } else { 0.0 };
                let wgt = if i == 0 || i == m { 2.0 } else { 1.0 };
                di[i] = alpha + wgt * r * (a_l + a_r);
                lo[i] = -wgt * r * a_l;
                up[i] = -wgt * r * a_r;
            }
            thomas(&lo, &di, &up, &mut rhs, &mut scratch);
            for i in 0..=m {
                u[i] += rhs[i];
            }
        }
        if !converged {
            divergence(&u, sig, h, &mut div, &mut slopes);
            let res = (0..=m).map(|i| (alpha * u[i] - known[i] - dt * div[i]).abs()).fold(0.0, f64::max);
            if res > NEWTON_TOL {
                return Err(ParabolicError::NonConvergence { step, residual: res });
            }
        }
        if u.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP) {
            return Err(ParabolicError::StabilityBreach(step + 1));
        }
        out.row_mut(step + 1).copy_from_slice(&u);
    }
    Ok(out)
}

/// Residual of the scheme at the two boundary nodes, where the mirrored
/// ghost value makes the outer face flux vanish.
pub fn boundary_residual(u: &Field, spec: &ProblemSpec, sig: &ModifiedFlux) -> f64 {
    let g = u.grid;
    let (h, dt) = (g.h(), g.dt());
    let m = g.nx;
    let expl = |n: usize, i: usize| {
        let x = g.x(i);
        let t = g.t(n);
        spec.c(x, t) * u.at(i, n) + spec.f(x, t)
    };
    let mut worst: f64 = 0.0;
    for n in 0..g.nt {
        for (i, inner, sign) in [(0, 1, 1.0), (m, m - 1, -1.0)] {
            let s = sign * (u.at(inner, n + 1) - u.at(i, n + 1)) / h;
            let d = sign * 2.0 * sig.eval(s) / h;
            let r = if n == 0 {
                u.at(i, 1) - u.at(i, 0) - dt * (d + expl(0, i))
            } else {
                1.5 * u.at(i, n + 1) - 2.0 * u.at(i, n) + 0.5 * u.at(i, n - 1)
                    - dt * (d + 2.0 * expl(n, i) - expl(n - 1, i))
            };
            worst = worst.max(r.abs());
        }
    }
    worst
}

/// Node gradient with the Neumann mirror at both ends.
fn node_dx(row: &[f64], h: f64, i: usize) -> f64 {
    let m = row.len() - 1;
    if i == 0 || i == m {
        0.0
    } else {
        (row[i + 1] - row[i - 1]) / (2.0 * h)
    }
}

/// Total flux `sigma~(u_x) + b u + P_u + F` at the nodes.
pub fn total_flux(u: &Field, spec: &ProblemSpec, sig: &ModifiedFlux) -> Field {
    let g = u.grid;
    let p = potential(u, spec);
    let big_f = accumulate_f(spec, &g);
    let mut out = Field::zeros(&g, "G");
    for n in 0..=g.nt {
        let t = g.t(n);
        let row = u.row(n);
        for i in 0..=g.nx {
            let v = sig.eval(node_dx(row, g.h(), i)) + spec.b(g.x(i), t) * row[i] + p.at(i, n) + big_f.at(i, n);
            out.set(i, n, v);
        }
    }
    out
}

/// `v*(x,t) = int_0^x u0 + int_0^t G`, trapezoid in both variables.
pub fn stream_function(u_star: &Field, spec: &ProblemSpec, sig: &ModifiedFlux) -> Field {
    let g = u_star.grid;
    let gfl = total_flux(u_star, spec, sig);
    let mut v = Field::zeros(&g, "v_star");
    let v0 = cumulative_x(u_star.row(0), g.h());
    v.row_mut(0).copy_from_slice(&v0);
    let dt = g.dt();
    for n in 0..g.nt {
        for i in 0..=g.nx {
            let val = v.at(i, n) + 0.5 * dt * (gfl.at(i, n) + gfl.at(i, n + 1));
            v.set(i, n + 1, val);
        }
    }
    v
}

/// `(max |v_x - u|, max |v_t - b u - P_u - F - sigma~(u_x)|)` over
/// interior nodes with centred differences in both directions.
pub fn stream_identities(u: &Field, v: &Field, spec: &ProblemSpec, sig: &ModifiedFlux) -> (f64, f64) {
    let g = u.grid;
    let (h, dt) = (g.h(), g.dt());
    let gfl = total_flux(u, spec, sig);
    let (mut ex, mut et): (f64, f64) = (0.0, 0.0);
    for n in 0..=g.nt {
        for i in 1..g.nx {
            ex = ex.max(((v.at(i + 1, n) - v.at(i - 1, n)) / (2.0 * h) - u.at(i, n)).abs());
        }
    }
    for n in 1..g.nt {
        for i in 0..=g.nx {
            et = et.max(((v.at(i, n + 1) - v.at(i, n - 1)) / (2.0 * dt) - gfl.at(i, n)).abs());
        }
    }
    (ex, et)
}

/// Cell masks of the separation of the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub omega1: CellMask,
    pub omega2: CellMask,
    pub omega3: CellMask,
    pub omega0_minus: CellMask,
    pub omega0_plus: CellMask,
    pub tol: f64,
    pub delta_star: f64,
    /// Omega^2 cells moved into the threshold bands because the discrete
    /// base pair fell outside U'.
    pub reclassified: usize,
    /// Largest `|u*_x - threshold|` over the threshold bands, at least
    /// `tol`; exceeds it only through moved cells.
    pub settled_tol: f64,
}

/// Moves Omega^2 cells whose base pair is not strictly inside U' into the
/// nearer threshold band.
fn settle_band(
    p: &mut Partition,
    u_star: &Field,
    v_star: &Field,
    spec: &ProblemSpec,
    sig: &ModifiedFlux,
    window: &PhaseWindow,
) -> usize {
    let g = u_star.grid;
    let frame = crate::inclusion::Frame::new(spec, &g);
    let pairs = crate::inclusion::residual_pair(u_star, v_star, &frame);
    let kprime = KPrime::new(sig.model(), window);
    let mut moved = 0;
    p.settled_tol = p.tol;
    for n in 0..g.nt {
        for i in 0..g.nx {
            let pr = pairs[g.cell(i, n)];
            if p.omega2.get(i, n) && !kprime.inside_u(pr[0], pr[1]) {
                p.omega2.set(i, n, false);
                let lower = (pr[0] - window.s_minus_r1).abs() <= (pr[0] - window.s_plus_r2).abs();
                let target = if lower { window.s_minus_r1 } else { window.s_plus_r2 };
                p.settled_tol = p.settled_tol.max((u_star.cell_dx(i, n) - target).abs());
                if lower {
                    p.omega0_minus.set(i, n, true);
                } else {
                    p.omega0_plus.set(i, n, true);
                }
                moved += 1;
            }
        }
    }
    moved
}

/// `max |u_xx|` over interior nodes by second differences.
pub fn max_uxx(u: &Field) -> f64 {
    let g = u.grid;
    let h2 = g.h() * g.h();
    let mut mx: f64 = 0.0;
    for n in 0..=g.nt {
        let r = u.row(n);
        for i in 1..g.nx {
            mx = mx.max(((r[i + 1] - 2.0 * r[i] + r[i - 1]) / h2).abs());
        }
    }
    mx
}

/// Default band: `factor * h * max |u_xx|`.
pub fn default_band(u: &Field, factor: f64) -> f64 {
    factor * u.grid.h() * max_uxx(u)
}

pub fn partition(u_star: &Field, window: &PhaseWindow, tol: f64) -> Result<Partition, ParabolicError> {
    let g = u_star.grid;
    let (a, b) = (window.s_minus_r1, window.s_plus_r2);
    let mut p = Partition {
        omega1: CellMask::empty(&g),
        omega2: CellMask::empty(&g),
        omega3: CellMask::empty(&g),
        omega0_minus: CellMask::empty(&g),
        omega0_plus: CellMask::empty(&g),
        tol,
        delta_star: 0.0,
        reclassified: 0,
        settled_tol: tol,
    };
    for n in 0..g.nt {
        for i in 0..g.nx {
            let s = u_star.cell_dx(i, n);
            let mask = if (s - a).abs() <= tol {
                &mut p.omega0_minus
            } else if (s - b).abs() <= tol {
                &mut p.omega0_plus
            } else if s < a {
                &mut p.omega1
            } else if s > b {
                &mut p.omega3
            } else {
                &mut p.omega2
            };
            mask.set(i, n, true);
        }
    }
    if p.omega2.is_empty() {
        return Err(ParabolicError::EmptyTransitionRegion);
    }
    let column_in_omega1 = |i: usize| (0..g.nt).all(|n| p.omega1.get(i, n));
    let left = (0..g.nx).take_while(|&i| column_in_omega1(i)).count();
    let right = (0..g.nx).rev().take_while(|&i| column_in_omega1(i)).count();
    p.delta_star = left.min(right) as f64 * g.h();
    Ok(p)
}

/// Mean over Omega^2 of `(s - s^-)/(s^+ - s^-)` at level `sigma~(s)`.
pub fn base_gauge(u_star: &Field, sig: &ModifiedFlux, omega2: &CellMask) -> Result<f64, ParabolicError> {
    let g = u_star.grid;
    let model = sig.model();
    let mut acc = 0.0;
    let mut cnt = 0usize;
    for n in 0..g.nt {
        for i in 0..g.nx {
            if omega2.get(i, n) {
                let s = u_star.cell_dx(i, n);
                let lev = sig.eval(s);
                let lo = model.branch_inverse_clamped(lev, Branch::Left);
                let hi = model.branch_inverse_clamped(lev, Branch::Right);
                acc += (s - lo) / (hi - lo);
                cnt += 1;
            }
        }
    }
    if cnt == 0 {
        return Err(ParabolicError::EmptyTransitionRegion);
    }
    Ok(acc / cnt as f64)
}

/// `max |u_t|` over cells (cell-averaged time differences).
pub fn max_cell_ut(u: &Field) -> f64 {
    let g = u.grid;
    let mut mx: f64 = 0.0;
    for n in 0..g.nt {
        for i in 0..g.nx {
            mx = mx.max(u.cell_dt(i, n).abs());
        }
    }
    mx
}

/// Base subsolution `w* = (u*, v*)` with its partition.
#[derive(Debug, Clone)]
pub struct BaseSubsolution {
    pub grid: Grid,
    pub u_star: Field,
    pub v_star: Field,
    pub partition: Partition,
    pub m_star: f64,
    pub gamma_base: f64,
}

impl BaseSubsolution {
    pub fn omega2(&self) -> &CellMask {
        &self.partition.omega2
    }

    pub fn delta_star(&self) -> f64 {
        self.partition.delta_star
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseOptions {
    pub solver: SolverOptions,
    /// Multiplier of `h * max |u_xx|` for the threshold band.
    pub band_factor: f64,
    /// Explicit band width; overrides `band_factor` when set.
    pub band: Option<f64>,
}

impl Default for BaseOptions {
    fn default() -> Self {
        BaseOptions { solver: SolverOptions::default(), band_factor: 0.25, band: None }
    }
}

pub fn build_base(
    spec: &ProblemSpec,
    sig: &ModifiedFlux,
    window: &PhaseWindow,
    grid: &Grid,
    opts: BaseOptions,
) -> Result<BaseSubsolution, ParabolicError> {
    let u_star = solve_modified(spec, sig, grid, opts.solver)?;
    let v_star = stream_function(&u_star, spec, sig);
    let tol = opts.band.unwrap_or_else(|| default_band(&u_star, opts.band_factor));
    let mut partition = partition(&u_star, window, tol)?;
    partition.reclassified = settle_band(&mut partition, &u_star, &v_star, spec, sig, window);
    if partition.omega2.is_empty() {
        return Err(ParabolicError::EmptyTransitionRegion);
    }
    if partition.delta_star <= 0.0 {
        return Err(ParabolicError::NoLateralMargin);
    }
    let gamma_base = base_gauge(&u_star, sig, &partition.omega2)?;
    if !(gamma_base > 0.0 && gamma_base < 1.0) {
        return Err(ParabolicError::GaugeOutOfRange(gamma_base));
    }
    let m_star = max_cell_ut(&u_star) + 1.0;
    Ok(BaseSubsolution { grid: *grid, u_star, v_star, partition, m_star, gamma_base })
}

/// Interpolates the base onto a grid refined by `(fx, ft)`. The initial
/// row is reset to the exact datum so `u(.,0) = u0` keeps holding at the
/// new nodes; masks are inherited blockwise.
pub fn refine_base(base: &BaseSubsolution, spec: &ProblemSpec, fx: usize, ft: usize) -> Result<BaseSubsolution, ParabolicError> {
    let (fine, mut u) = refine(&base.grid, &base.u_star, fx, ft)?;
    let (_, mut v) = refine(&base.grid, &base.v_star, fx, ft)?;
    let row0: Vec<f64> = (0..=fine.nx).map(|i| spec.u0(fine.x(i))).collect();
    u.row_mut(0).copy_from_slice(&row0);
    let v0 = cumulative_x(&row0, fine.h());
    v.row_mut(0).copy_from_slice(&v0);
    let p = &base.partition;
    let partition = Partition {
        omega1: p.omega1.refined(fx, ft),
        omega2: p.omega2.refined(fx, ft),
        omega3: p.omega3.refined(fx, ft),
        omega0_minus: p.omega0_minus.refined(fx, ft),
        omega0_plus: p.omega0_plus.refined(fx, ft),
        tol: p.tol,
        delta_star: p.delta_star,
        reclassified: p.reclassified,
        settled_tol: p.settled_tol,
    };
    Ok(BaseSubsolution {
        grid: fine,
        u_star: u,
        v_star: v,
        partition,
        m_star: base.m_star,
        gamma_base: base.gamma_base,
    })
}

/// JSON snapshot of the base state.
pub fn snapshot(base: &BaseSubsolution) -> serde_json::Value {
    let p = &base.partition;
    serde_json::json!({
        "grid": base.grid,
        "u_star": base.u_star.values,
        "v_star": base.v_star.values,
        "masks": {
            "encoding": "run lengths over cells, row-major in t, first run is false",
            "omega1": p.omega1.rle(),
            "omega2": p.omega2.rle(),
            "omega3": p.omega3.rle(),
            "omega0_minus": p.omega0_minus.rle(),
            "omega0_plus": p.omega0_plus.rle(),
        },
        "band_tol": p.tol,
        "reclassified": p.reclassified,
        "settled_tol": p.settled_tol,
        "delta_star": p.delta_star,
        "m_star": base.m_star,
        "gamma_base": base.gamma_base,
    })
}

pub fn from_snapshot(v: &serde_json::Value) -> Result<BaseSubsolution, ParabolicError> {
    let bad = |what: &str| ParabolicError::Snapshot(what.to_string());
    let grid: Grid = serde_json::from_value(v["grid"].clone()).map_err(|_| bad("grid"))?;
    let vals = |key: &str| -> Result<Vec<f64>, ParabolicError> {
        let out: Vec<f64> = serde_json::from_value(v[key].clone()).map_err(|_| bad(key))?;
        if out.len() != grid.nodes() {
            return Err(bad(key));
        }
        Ok(out)
    };
    let mask = |key: &str| -> Result<CellMask, ParabolicError> {
        let runs: Vec<usize> = serde_json::from_value(v["masks"][key].clone()).map_err(|_| bad(key))?;
        Ok(CellMask::from_rle(grid.nx, grid.nt, &runs)?)
    };
    let num = |key: &str| v[key].as_f64().ok_or_else(|| bad(key));
    Ok(BaseSubsolution {
        grid,
        u_star: Field { name: "u_star".into(), grid, values: vals("u_star")? },
        v_star: Field { name: "v_star".into(), grid, values: vals("v_star")? },
        partition: Partition {
            omega1: mask("omega1")?,
            omega2: mask("omega2")?,
            omega3: mask("omega3")?,
            omega0_minus: mask("omega0_minus")?,
            omega0_plus: mask("omega0_plus")?,
            tol: num("band_tol")?,
            delta_star: num("delta_star")?,
            reclassified: v["reclassified"].as_u64().unwrap_or(0) as usize,
            settled_tol: v["settled_tol"].as_f64().unwrap_or(num("band_tol")?),
        },
        m_star: num("m_star")?,
        gamma_base: num("gamma_base")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thomas_solves_small_system() {
        // [2 1 0; 1 3 1; 0 1 2] x = [3 5 3] -> x = 1
        let (lo, di, up) = ([0.0, 1.0, 1.0], [2.0, 3.0, 2.0], [1.0, 1.0, 0.0]);
        let mut rhs = [3.0, 5.0, 3.0];
        let mut s = [0.0; 3];
        thomas(&lo, &di, &up, &mut rhs, &mut s);
        for v in rhs {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }
}
