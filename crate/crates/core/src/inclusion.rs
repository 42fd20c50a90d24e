//! Subsolution states, the reduced gradient pair, membership in U, the
//! distance integral to K and transition gauges.

use crate::flux::{Branch, FluxModel, KPrime, PhaseWindow};
use crate::grid::{CellMask, Field, Grid};
use crate::parabolic::BaseSubsolution;
use crate::problem::{accumulate_f, ProblemSpec};
use serde::{Deserialize, Serialize};

/// Grid-dependent coefficient samples reused by every residual evaluation.
#[derive(Debug, Clone)]
pub struct Frame {
    pub grid: Grid,
    pub b: Field,
    pub big_f: Field,
    pub d: Vec<f64>,
}

impl Frame {
    pub fn new(spec: &ProblemSpec, grid: &Grid) -> Frame {
        Frame {
            grid: *grid,
            b: Field::from_fn(grid, "b", |x, t| spec.b(x, t)),
            big_f: accumulate_f(spec, grid),
            d: (0..=grid.nt).map(|n| spec.d(grid.t(n))).collect(),
        }
    }
}

/// Per-cell pair `(u_x, v_t - b u - P_u - F)`, cells row-major in t.
pub fn residual_pair(u: &Field, v: &Field, frame: &Frame) -> Vec<[f64; 2]> {
    let g = frame.grid;
    let h = g.h();
    // node values of b u + P_u + F
    let mut w = Field::zeros(&g, "explicit");
    for n in 0..=g.nt {
        let row = u.row(n);
        let mut cum = 0.0;
        for i in 0..=g.nx {
            if i > 0 {
                cum += 0.5 * h * (row[i - 1] + row[i]);
            }
            let val = frame.b.at(i, n) * row[i] + frame.d[n] * cum + frame.big_f.at(i, n);
            w.set(i, n, val);
        }
    }
    let mut out = Vec::with_capacity(g.cells());
    for n in 0..g.nt {
        for i in 0..g.nx {
            out.push([u.cell_dx(i, n), v.cell_dt(i, n) - w.cell_mean(i, n)]);
        }
    }
    out
}

/// Strict membership of a cell in `U((x,t);u)`.
pub fn membership_u(pair: [f64; 2], ut: f64, kprime: &KPrime, m_star: f64) -> bool {
    ut.abs() < m_star && kprime.inside_u(pair[0], pair[1])
}

/// Membership in the wide lens `U_0` bounded by the full branches.
pub fn membership_u0(pair: [f64; 2], model: &FluxModel) -> bool {
    let (lo, hi) = (model.sigma_s2(), model.sigma_s1());
    if !(pair[1] > lo && pair[1] < hi) {
        return false;
    }
    let sm = model.branch_inverse_clamped(pair[1], Branch::Left);
    let sp = model.branch_inverse_clamped(pair[1], Branch::Right);
    pair[0] > sm && pair[0] < sp
}

/// `int dist(pair, K') dxdt` over the cells of `mask`.
pub fn dist_to_k_integral(pairs: &[[f64; 2]], mask: &CellMask, kprime: &KPrime, grid: &Grid) -> f64 {
    let mut acc = 0.0;
    for n in 0..grid.nt {
        for i in 0..grid.nx {
            if mask.get(i, n) {
                let p = pairs[grid.cell(i, n)];
                acc += kprime.distance(p[0], p[1]);
            }
        }
    }
    acc * grid.cell_area()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaugeReport {
    /// Gauge in `[0, 1]`, or `-1` for a null set or one disjoint from the
    /// transition set.
    pub gauge_value: f64,
    /// `|F^+|` and `|F^-|` as cell measure.
    pub phase_plus: f64,
    pub phase_minus: f64,
    pub z: Option<ZStats>,
    /// Cells of E, and of E inside the transition set.
    pub e_cells: usize,
    pub transition_cells: usize,
    pub e_measure: f64,
}

impl GaugeReport {
    pub fn is_sentinel(&self) -> bool {
        self.gauge_value < 0.0
    }
}

/// Position of `s` between the branches at `level`, or `None` outside the
/// transition set.
pub fn z_value(s: f64, level: f64, model: &FluxModel) -> Option<f64> {
    let (lo, hi) = (model.sigma_s2(), model.sigma_s1());
    if !(level >= lo && level <= hi) {
        return None;
    }
    let sm = model.branch_inverse_clamped(level, Branch::Left);
    let sp = model.branch_inverse_clamped(level, Branch::Right);
    if !(s >= sm && s <= sp) || sp <= sm {
        return None;
    }
    Some((s - sm) / (sp - sm))
}

/// Transition gauge over E with levels taken from `levels` (the residual
/// level for subsolutions, `sigma(u_x)` for solutions).
pub fn gauge_from_levels(
    slopes: &[f64],
    levels: &[f64],
    e: &CellMask,
    grid: &Grid,
    model: &FluxModel,
    window: &PhaseWindow,
) -> GaugeReport {
    let area = grid.cell_area();
    let mut rep = GaugeReport {
        gauge_value: -1.0,
        phase_plus: 0.0,
        phase_minus: 0.0,
        z: None,
        e_cells: 0,
        transition_cells: 0,
        e_measure: 0.0,
    };
    let (mut zmin, mut zmax, mut zsum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for n in 0..grid.nt {
        for i in 0..grid.nx {
            if !e.get(i, n) {
                continue;
            }
            let c = grid.cell(i, n);
            rep.e_cells += 1;
            let s = slopes[c];
            if s >= window.s_plus_r1 && s <= window.s_plus_r2 {
                rep.phase_plus += area;
            } else if s >= window.s_minus_r1 && s <= window.s_minus_r2 {
                rep.phase_minus += area;
            }
            if let Some(z) = z_value(s, levels[c], model) {
                rep.transition_cells += 1;
                zmin = zmin.min(z);
                zmax = zmax.max(z);
                zsum += z;
            }
        }
    }
    rep.e_measure = rep.e_cells as f64 * area;
    if rep.transition_cells > 0 {
        let mean = zsum / rep.transition_cells as f64;
        rep.gauge_value = mean;
        rep.z = Some(ZStats { min: zmin, max: zmax, mean });
    }
    rep
}

/// `Gamma_w^E` for a subsolution state.
pub fn gauge(pairs: &[[f64; 2]], e: &CellMask, grid: &Grid, model: &FluxModel, window: &PhaseWindow) -> GaugeReport {
    let s: Vec<f64> = pairs.iter().map(|p| p[0]).collect();
    let l: Vec<f64> = pairs.iter().map(|p| p[1]).collect();
    gauge_from_levels(&s, &l, e, grid, model, window)
}

/// `gamma_u^E` for a candidate solution: levels are `sigma(u_x)`.
pub fn solution_gauge(u: &Field, e: &CellMask, model: &FluxModel, window: &PhaseWindow) -> GaugeReport {
    let g = u.grid;
    let mut s = Vec::with_capacity(g.cells());
    for n in 0..g.nt {
        for i in 0..g.nx {
            s.push(u.cell_dx(i, n));
        }
    }
    let l: Vec<f64> = s.iter().map(|&x| model.eval(x)).collect();
    gauge_from_levels(&s, &l, e, &g, model, window)
}

/// Discrete subsolution `w = (u, v)` with the perturbed region and cached
/// diagnostics.
#[derive(Debug, Clone)]
pub struct SubsolutionState {
    pub grid: Grid,
    pub u: Field,
    pub v: Field,
    pub omega_w: CellMask,
    pub residual: Vec<[f64; 2]>,
    pub dist_integral: f64,
    pub gauge: GaugeReport,
}

/// Read-only inputs shared by the inclusion machinery at one grid level.
#[derive(Debug, Clone, Copy)]
pub struct Setting<'a> {
    pub base: &'a BaseSubsolution,
    pub frame: &'a Frame,
    pub kprime: &'a KPrime,
}

impl<'a> Setting<'a> {
    pub fn model(&self) -> &FluxModel {
        self.kprime.model()
    }
    pub fn window(&self) -> &PhaseWindow {
        &self.kprime.window
    }
}

impl SubsolutionState {
    pub fn new(u: Field, v: Field, omega_w: CellMask, set: &Setting) -> SubsolutionState {
        let grid = u.grid;
        let residual = residual_pair(&u, &v, set.frame);
        let omega2 = set.base.omega2();
        let dist_integral = dist_to_k_integral(&residual, omega2, set.kprime, &grid);
        let gauge = gauge(&residual, omega2, &grid, set.model(), set.window());
        SubsolutionState { grid, u, v, omega_w, residual, dist_integral, gauge }
    }

    pub fn from_base(set: &Setting) -> SubsolutionState {
        let b = set.base;
        SubsolutionState::new(b.u_star.clone(), b.v_star.clone(), CellMask::empty(&b.grid), set)
    }

    /// Cell-averaged `u_t` of cell `(i, n)`.
    pub fn ut(&self, i: usize, n: usize) -> f64 {
        self.u.cell_dt(i, n)
    }

    /// Mean distance to K' over Omega^2.
    pub fn dist_ratio(&self, set: &Setting) -> f64 {
        let m = set.base.omega2().count() as f64 * self.grid.cell_area();
        self.dist_integral / m
    }

    /// Omega^2 cells that fail strict membership in U.
    pub fn membership_failures(&self, set: &Setting) -> Vec<(usize, usize)> {
        let g = self.grid;
        let mut bad = Vec::new();
        for n in 0..g.nt {
            for i in 0..g.nx {
                if set.base.omega2().get(i, n)
                    && !membership_u(self.residual[g.cell(i, n)], self.ut(i, n), set.kprime, set.base.m_star)
                {
                    bad.push((i, n));
                }
            }
        }
        bad
    }

    /// Omega^2 cells whose pair leaves `U_0` (asserted, never enforced).
    pub fn u0_failures(&self, set: &Setting) -> usize {
        let g = self.grid;
        let mut cnt = 0;
        for n in 0..g.nt {
            for i in 0..g.nx {
                if set.base.omega2().get(i, n) && !membership_u0(self.residual[g.cell(i, n)], set.model()) {
                    cnt += 1;
                }
            }
        }
        cnt
    }

    /// Nodes where the state differs from the base although no touching
    /// cell lies in `omega_w`.
    pub fn escaped_nodes(&self, base: &BaseSubsolution) -> usize {
        let g = self.grid;
        let mut cnt = 0;
        for n in 0..=g.nt {
            for i in 0..=g.nx {
                let differs = self.u.at(i, n) != base.u_star.at(i, n) || self.v.at(i, n) != base.v_star.at(i, n);
                if differs && !touches(&self.omega_w, &g, i, n) {
                    cnt += 1;
                }
            }
        }
        cnt
    }

    /// `max |v_x - u|` over interior nodes (centered differences).
    pub fn stream_defect(&self) -> f64 {
        let g = self.grid;
        let h = g.h();
        let mut mx: f64 = 0.0;
        for n in 0..=g.nt {
            let (u, v) = (self.u.row(n), self.v.row(n));
            for i in 1..g.nx {
                mx = mx.max(((v[i + 1] - v[i - 1]) / (2.0 * h) - u[i]).abs());
            }
        }
        mx
    }
}

/// Whether node `(i, n)` is a corner of some cell of `mask`.
pub fn touches(mask: &CellMask, g: &Grid, i: usize, n: usize) -> bool {
    let is = [i.checked_sub(1), (i < g.nx).then_some(i)];
    let ns = [n.checked_sub(1), (n < g.nt).then_some(n)];
    is.iter().flatten().any(|&a| ns.iter().flatten().any(|&b| mask.get(a, b)))
}
