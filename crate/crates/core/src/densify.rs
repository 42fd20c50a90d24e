//! Density step and the outer delta-schedule: tile the transition region
//! with rectangles, pick slopes from the delta/k loci, superpose sawtooth
//! perturbations, and refine the grid when the budgets cannot be met.

use crate::flux::{Branch, KPrime, PhaseWindow};
use crate::grid::{CellMask, Grid, GridError};
use crate::inclusion::{Frame, Setting, SubsolutionState};
use crate::oscillate::{closed_sawtooth, superpose, OscillateError, OscillationProfile, Rect};
use crate::flux::ModifiedFlux;
use crate::parabolic::{build_base, BaseOptions, BaseSubsolution, ParabolicError};
use crate::problem::ProblemSpec;
use crate::grid::refine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const BISECT_ITERS: usize = 80;
const SAFETY: f64 = 0.98;

#[derive(Debug, Error, Clone)]
pub enum DensifyError {
    #[error("degenerate margin: {0}")]
    DegenerateMargin(String),
    #[error("halo exhausted: {0}")]
    HaloExhausted(String),
    #[error("ray from ({s}, {level}) leaves U' before reaching the locus")]
    RayEscape { s: f64, level: f64 },
    #[error("refinement needed (x{fx}, t{ft}): {reason}")]
    RefinementNeeded { fx: usize, ft: usize, reason: String, diagnostics: Option<Box<StepDiagnostics>> },
    #[error("post-conditions failed: {}", failed.join(", "))]
    PostconditionFailure { failed: Vec<String>, diagnostics: Box<StepDiagnostics> },
    #[error("dist integral did not decrease over two successful steps")]
    IterationStalled,
    #[error(transparent)]
    Oscillate(#[from] OscillateError),
    #[error(transparent)]
    Parabolic(#[from] ParabolicError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// User-facing knobs of the density iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyOptions {
    pub k_min: usize,
    /// Halo (cells) between the tiled core and the rest of the domain.
    pub halo: usize,
    /// Target rectangle width in cells.
    pub rect_width: usize,
    pub min_width: usize,
    pub min_height: usize,
    /// Minimum share of the spanned column runs a rectangle must cover.
    pub fill: f64,
    /// Preferred rectangle height in rows.
    pub layer_rows: usize,
    /// Rectangles are cut in time where the row-mean slack drops below
    /// this fraction of its running maximum.
    pub layer_ratio: f64,
    /// Sup-norm budget of the first step, halved every step.
    pub eta0: f64,
    /// Number of schedule steps J (steps `0..J`).
    pub steps: usize,
    /// `delta_0`; half the baseline mean distance when absent.
    pub delta0: Option<f64>,
    /// Share of the remaining `u_t` budget one step may spend.
    pub time_share: f64,
    /// Fraction of rectangle cells allowed outside both phase bands.
    pub band_cap: f64,
    /// Share of the halo distance mass allowed in the delta budget.
    pub halo_share: f64,
    /// Trial scalings of the per-column down slope.
    pub scales: Vec<f64>,
    pub max_nodes: usize,
    pub max_refinements: usize,
    pub seed: u64,
}

impl Default for DensifyOptions {
    fn default() -> Self {
        DensifyOptions {
            k_min: 6,
            halo: 2,
            rect_width: 96,
            min_width: 8,
            min_height: 4,
            fill: 0.8,
            layer_rows: 1000,
            layer_ratio: 0.7,
            eta0: 0.05,
            steps: 4,
            delta0: None,
            time_share: 0.75,
            band_cap: 0.04,
            halo_share: 1.0 / 6.0,
            scales: vec![1.0, 0.85, 0.7, 0.55, 0.4, 0.25],
            max_nodes: 4_300_000,
            max_refinements: 6,
            seed: 7,
        }
    }
}

/// Per-rectangle caps on the perturbation size from the construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Caps {
    pub norms: f64,
    pub time_derivative: f64,
    pub distance: f64,
    pub level: f64,
    pub count: f64,
    pub gauge: f64,
}

impl Caps {
    pub fn min(&self) -> f64 {
        [self.norms, self.time_derivative, self.distance, self.level, self.count, self.gauge]
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invariant {
    pub name: String,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensifyParams {
    pub delta: f64,
    pub k: usize,
    pub l: usize,
    pub kappa: f64,
    pub d_prime: f64,
    pub m_prime: f64,
    pub d_doubleprime: f64,
    pub epsilon_i_caps: Caps,
    pub square_size: usize,
    pub n_squares: usize,
    pub invariants: Vec<Invariant>,
}

/// Smallest integer with `l > 34 (s^+_{r2} - s^-_{r1}) / (s^+_{r1} - s^-_{r2})^2`.
pub fn l_bound(w: &PhaseWindow) -> usize {
    let v = 34.0 * (w.s_plus_r2 - w.s_minus_r1) / (w.s_plus_r1 - w.s_minus_r2).powi(2);
    v.floor() as usize + 1
}

/// `kappa` with `|s^pm_a - s^pm_b| <= d''/l` whenever `|a - b| <= kappa`,
/// from the sampled Lipschitz constant of both branch inverses.
pub fn kappa_for(kprime: &KPrime, target: f64) -> f64 {
    let w = &kprime.window;
    let model = kprime.model();
    let samples = 4096;
    let mut lip: f64 = 0.0;
    for br in [Branch::Left, Branch::Right] {
        let mut prev = model.branch_inverse_clamped(w.r1, br);
        for j in 1..=samples {
            let a = w.r1 + (w.r2 - w.r1) * j as f64 / samples as f64;
            let s = model.branch_inverse_clamped(a, br);
            lip = lip.max((s - prev).abs() * samples as f64 / (w.r2 - w.r1));
            prev = s;
        }
    }
    target / lip
}

/// `(d', m', d'', kappa)` on the core G.
pub fn measure_constants(
    state: &SubsolutionState,
    reference_gauge: f64,
    epsilon: f64,
    l: usize,
    core: &CellMask,
    set: &Setting,
) -> Result<(f64, f64, f64, f64), DensifyError> {
    let g = state.grid;
    let mut d_prime = f64::INFINITY;
    let mut ut_max: f64 = 0.0;
    for n in 0..g.nt {
        for i in 0..g.nx {
            if core.get(i, n) {
                let p = state.residual[g.cell(i, n)];
                let d = set.kprime.distance_to_boundary(p[0], p[1]);
                d_prime = d_prime.min(if set.kprime.inside_u(p[0], p[1]) { d } else { 0.0 });
                ut_max = ut_max.max(state.ut(i, n).abs());
            }
        }
    }
    let m_prime = set.base.m_star - ut_max;
    let d2 = 0.5 * (0.5 * epsilon - (state.gauge.gauge_value - reference_gauge).abs());
    if !(d_prime > 0.0) || !(m_prime > 0.0) || !(d2 > 0.0) {
        return Err(DensifyError::DegenerateMargin(format!("d' = {d_prime:e}, m' = {m_prime:e}, d'' = {d2:e}")));
    }
    let kappa = kappa_for(set.kprime, d2 / l as f64);
    Ok((d_prime, m_prime, d2, kappa))
}

/// Omega^2 minus the cells within `halo` (Chebyshev) of a cell outside it.
pub fn erode(omega2: &CellMask, g: &Grid, halo: usize) -> CellMask {
    let mut out = omega2.clone();
    let hl = halo as isize;
    for n in 0..g.nt {
        for i in 0..g.nx {
            if !omega2.get(i, n) {
                continue;
            }
            'scan: for dn in -hl..=hl {
                for di in -hl..=hl {
                    let (a, b) = (i as isize + di, n as isize + dn);
                    if a < 0 || b < 0 || a >= g.nx as isize || b >= g.nt as isize {
                        continue;
                    }
                    if !omega2.get(a as usize, b as usize) {
                        out.set(i, n, false);
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

fn mask_dist(state: &SubsolutionState, mask: &CellMask, kprime: &KPrime) -> f64 {
    crate::inclusion::dist_to_k_integral(&state.residual, mask, kprime, &state.grid)
}

/// Core G: Omega^2 eroded by the halo; the distance mass left outside must
/// fit in `budget`.
pub fn choose_core(
    state: &SubsolutionState,
    set: &Setting,
    halo: usize,
    budget: f64,
) -> Result<(CellMask, f64), DensifyError> {
    let g = state.grid;
    let omega2 = set.base.omega2();
    let core = erode(omega2, &g, halo);
    if core.is_empty() {
        return Err(DensifyError::HaloExhausted("the eroded core is empty".into()));
    }
    let rim = mask_dist(state, &omega2.minus(&core), set.kprime);
    if rim > budget {
        return Err(DensifyError::HaloExhausted(format!("rim mass {rim:.3e} exceeds {budget:.3e}")));
    }
    Ok((core, rim))
}

/// Greedy rectangles over the core: runs in t per column chained across
/// neighbouring columns up to `width` cells.
/// Rectangles cover at least `fill` of the union of the column runs they
/// span; tall ones are cut into layers of about `layer` rows.
pub fn tile(core: &CellMask, g: &Grid, width: usize, min_width: usize, min_height: usize, fill: f64, layer: usize) -> Vec<Rect> {
    let mut used = CellMask::empty(g);
    let free = |used: &CellMask, i: usize, n: usize| core.get(i, n) && !used.get(i, n);
    let runs = |used: &CellMask, i: usize| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut n = 0;
        while n < g.nt {
            if free(used, i, n) {
                let s = n;
                while n < g.nt && free(used, i, n) {
                    n += 1;
                }
                out.push((s, n));
            } else {
                n += 1;
            }
        }
        out
    };
    let mut rects = Vec::new();
    for i in 0..g.nx {
        for (lo0, hi0) in runs(&used, i) {
            if hi0 - lo0 < min_height {
                continue;
            }
            let (mut lo, mut hi) = (lo0, hi0);
            let (mut ulo, mut uhi) = (lo0, hi0);
            let mut j = i + 1;
            while j < g.nx && j - i < width {
                let best = runs(&used, j)
                    .into_iter()
                    .filter(|&(a, b)| b.min(hi) > a.max(lo))
                    .max_by_key(|&(a, b)| b.min(hi) - a.max(lo));
                match best {
                    Some((a, b)) => {
                        let (nlo, nhi) = (a.max(lo), b.min(hi));
                        let (nulo, nuhi) = (a.min(ulo), b.max(uhi));
                        if nhi - nlo < min_height || ((nhi - nlo) as f64) < fill * (nuhi - nulo) as f64 {
                            break;
                        }
                        (lo, hi, ulo, uhi) = (nlo, nhi, nulo, nuhi);
                        j += 1;
                    }
                    None => break,
                }
            }
            let mut w = j - i;
            if w % 2 == 1 {
                w -= 1;
            }
            if w < min_width {
                continue;
            }
            let layers = ((hi - lo) / layer.max(min_height)).max(1);
            for k in 0..layers {
                let q = Rect { i0: i, i1: i + w, n0: lo + (hi - lo) * k / layers, n1: lo + (hi - lo) * (k + 1) / layers };
                for n in q.n0..q.n1 {
                    for c in q.i0..q.i1 {
                        used.set(c, n, true);
                    }
                }
                rects.push(q);
            }
        }
    }
    rects
}

/// Abscissae on the horizontal ray through `(s, level)` at distance
/// `margin` from K', left and right of `s`.
pub fn ray_loci(kprime: &KPrime, s: f64, level: f64, margin: f64) -> Result<(f64, f64), DensifyError> {
    if !kprime.inside_u(s, level) {
        return Err(DensifyError::RayEscape { s, level });
    }
    if kprime.distance(s, level) <= margin {
        return Ok((s, s));
    }
    let model = kprime.model();
    let bisect = |mut near: f64, mut far: f64| {
        // dist(near) <= margin < dist(far)
        for _ in 0..BISECT_ITERS {
            let mid = 0.5 * (near + far);
            if kprime.distance(mid, level) <= margin {
                near = mid;
            } else {
                far = mid;
            }
            if (far - near).abs() < 1e-15 {
                break;
            }
        }
        far
    };
    let left = bisect(model.branch_inverse_clamped(level, Branch::Left), s);
    let right = bisect(model.branch_inverse_clamped(level, Branch::Right), s);
    Ok((left, right))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub rect: Rect,
    pub class: String,
    /// `(s_i, gamma_i, c_i)` at the central cell.
    pub center: [f64; 3],
    pub s_bar: Option<f64>,
    pub lambda1: [f64; 2],
    pub lambda2: [f64; 2],
    pub scale: f64,
    pub eps_i: f64,
    pub pair_oscillation: f64,
    pub ut_oscillation: f64,
    pub h_max: f64,
    pub omega_sup: f64,
    pub plateau_minus: f64,
    pub plateau_plus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

impl Check {
    pub fn lt(name: &str, value: f64, bound: f64) -> Check {
        Check { name: name.into(), value, bound, pass: value < bound }
    }
    pub fn le(name: &str, value: f64, bound: f64) -> Check {
        Check { name: name.into(), value, bound, pass: value <= bound }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub grid: Grid,
    pub delta: f64,
    pub eta: f64,
    pub margin: f64,
    pub params: Option<DensifyParams>,
    pub census: [usize; 3],
    pub untiled_cells: usize,
    /// Distance mass `[rim, untiled core, idle rectangles, perturbed before, perturbed after]`.
    pub mass_split: [f64; 5],
    pub rim_mass: f64,
    pub blocks: Vec<BlockRecord>,
    pub omega2_measure: f64,
    pub dist_before: f64,
    pub dist_after: f64,
    pub gauge_before: f64,
    pub gauge_after: f64,
    pub gauge_drift: f64,
    pub sup_change: f64,
    pub u_dev: f64,
    pub ut_dev: f64,
    pub time_budget: f64,
    pub amplitude_budget: f64,
    pub lipschitz_limited: f64,
    pub amplitude_limited: usize,
    pub checks: Vec<Check>,
}

/// Inputs of one density step that stay fixed along the schedule.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    pub epsilon: f64,
    /// Gauge of the base state evaluated like the current state's.
    pub reference_gauge: f64,
    pub coefficient_norms: (f64, f64),
    pub options: &'a DensifyOptions,
}

struct Slack {
    left: Vec<f64>,
    right: Vec<f64>,
}

fn slacks(state: &SubsolutionState, core: &CellMask, set: &Setting, margin: f64) -> Result<Slack, DensifyError> {
    let g = state.grid;
    let mut left = vec![0.0; g.cells()];
    let mut right = vec![0.0; g.cells()];
    for n in 0..g.nt {
        for i in 0..g.nx {
            if !core.get(i, n) {
                continue;
            }
            let c = g.cell(i, n);
            let p = state.residual[c];
            let (lo, hi) = ray_loci(set.kprime, p[0], p[1], margin)?;
            left[c] = (p[0] - lo).max(0.0);
            right[c] = (hi - p[0]).max(0.0);
        }
    }
    Ok(Slack { left, right })
}

fn in_bands(s: f64, w: &PhaseWindow) -> bool {
    (s >= w.s_minus_r1 && s <= w.s_minus_r2) || (s >= w.s_plus_r1 && s <= w.s_plus_r2)
}

struct Plan {
    profile: OscillationProfile,
    scale: f64,
    lipschitz_limited: usize,
    nodes: usize,
}

struct BlockContext<'a> {
    state: &'a SubsolutionState,
    set: &'a Setting<'a>,
    slack: &'a Slack,
    time_budget: f64,
    amplitude_budget: f64,
    band_cap: f64,
    scales: &'a [f64],
}

/// Best sawtooth for one rectangle over the trial down-slope scalings and
/// trimmed widths (whole teeth per half), or `None` when nothing improves
/// the distance.
fn plan_block(q: Rect, phase: f64, ctx: &BlockContext, amplitude_hit: &mut bool) -> (f64, Option<(f64, Plan)>) {
    let g = ctx.state.grid;
    let (w, hgt) = (q.width(), q.height());
    let cell = |c: usize, r: usize| g.cell(q.i0 + c, q.n0 + r);
    let a_max: Vec<f64> = (0..w).map(|c| (0..hgt).map(|r| ctx.slack.left[cell(c, r)]).fold(0.0, f64::max)).collect();
    let b_min: Vec<f64> =
        (0..w).map(|c| (0..hgt).map(|r| ctx.slack.right[cell(c, r)]).fold(f64::INFINITY, f64::min)).collect();
    let window = ctx.set.window();
    let d0: Vec<f64> = (0..hgt)
        .flat_map(|r| (0..w).map(move |c| (c, r)))
        .map(|(c, r)| {
            let p = ctx.state.residual[cell(c, r)];
            ctx.set.kprime.distance(p[0], p[1])
        })
        .collect();
    let column_mass: Vec<f64> = (0..w).map(|c| (0..hgt).map(|r| d0[r * w + c]).sum()).collect();
    let current: f64 = column_mass.iter().sum();
    if a_max.iter().all(|&a| a <= 0.0) || b_min.iter().all(|&b| b <= 0.0) {
        return (current, None);
    }
    let m = w / 2;
    let mut best: Option<(f64, Plan)> = None;
    for &mu in ctx.scales {
        for half in (m.div_ceil(2).max(2)..=m).rev() {
            let wq = 2 * half;
            let l1: Vec<f64> = a_max[..wq].iter().map(|a| mu * a).collect();
            let (f, l1, l2) = closed_sawtooth(&l1, &b_min[..wq], g.h(), phase);
            let fmax = f.windows(2).map(|p| 0.5 * (p[0] + p[1]).abs()).fold(0.0, f64::max);
            if fmax == 0.0 {
                continue;
            }
            if fmax >= ctx.amplitude_budget {
                *amplitude_hit = true;
                continue;
            }
            // largest admissible time factor per row
            let mut cap = vec![1.0f64; hgt];
            for (r, cr) in cap.iter_mut().enumerate() {
                for c in 0..wq {
                    let d = (f[c + 1] - f[c]) / g.h();
                    let slack = if d < 0.0 { ctx.slack.left[cell(c, r)] } else { ctx.slack.right[cell(c, r)] };
                    if d != 0.0 {
                        *cr = cr.min(slack / d.abs());
                    }
                }
            }
            let mut bound = vec![0.0; hgt + 1];
            for r in 1..hgt {
                bound[r] = cap[r - 1].min(cap[r]);
            }
            let step = SAFETY * ctx.time_budget / fmax * g.dt();
            let mut h = bound.clone();
            for r in 1..=hgt {
                h[r] = h[r].min(h[r - 1] + step);
            }
            for r in (0..hgt).rev() {
                h[r] = h[r].min(h[r + 1] + step);
            }
            let limited = (1..hgt).filter(|&r| h[r] < bound[r] - 1e-12).count();
            let mut score: f64 = column_mass[wq..].iter().sum();
            let mut off_band = 0usize;
            for r in 0..hgt {
                let hb = 0.5 * (h[r] + h[r + 1]);
                for c in 0..wq {
                    let p = ctx.state.residual[cell(c, r)];
                    let s = p[0] + hb * (f[c + 1] - f[c]) / g.h();
                    score += ctx.set.kprime.distance(s, p[1]);
                    if hb > 0.0 && !in_bands(s, window) && in_bands(p[0], window) {
                        off_band += 1;
                    }
                }
            }
            if off_band as f64 > ctx.band_cap * (wq * hgt) as f64 || score >= current {
                continue;
            }
            if best.as_ref().is_none_or(|(sc, _)| score < *sc) {
                let sub = Rect { i0: q.i0, i1: q.i0 + wq, n0: q.n0, n1: q.n1 };
                let profile = OscillationProfile::from_parts(sub, l1, l2, f, phase, h, &g);
                best = Some((score, Plan { profile, scale: mu, lipschitz_limited: limited, nodes: hgt - 1 }));
            }
        }
    }
    (current, best)
}

/// Splits `q` into row layers over which the row-mean left slack stays
/// within `ratio` of its extremes.
fn row_layers(q: Rect, slack: &Slack, g: &Grid, ratio: f64, min_height: usize) -> Vec<Rect> {
    let mean: Vec<f64> = (q.n0..q.n1)
        .map(|n| (q.i0..q.i1).map(|i| slack.left[g.cell(i, n)]).sum::<f64>() / q.width() as f64)
        .collect();
    let mut cuts = vec![0];
    let (mut lo, mut hi) = (mean[0], mean[0]);
    for (r, &a) in mean.iter().enumerate().skip(1) {
        let (nlo, nhi) = (lo.min(a), hi.max(a));
        if r - cuts[cuts.len() - 1] >= min_height && nlo < ratio * nhi {
            cuts.push(r);
            (lo, hi) = (a, a);
        } else {
            (lo, hi) = (nlo, nhi);
        }
    }
    if cuts.len() > 1 && q.height() - cuts[cuts.len() - 1] < min_height {
        cuts.pop();
    }
    cuts.push(q.height());
    cuts.windows(2).map(|c| Rect { i0: q.i0, i1: q.i1, n0: q.n0 + c[0], n1: q.n0 + c[1] }).collect()
}

fn pair_oscillation(state: &SubsolutionState, q: &Rect) -> (f64, f64) {
    let g = state.grid;
    let (mut s0, mut s1, mut l0, mut l1, mut t0, mut t1) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for n in q.n0..q.n1 {
        for i in q.i0..q.i1 {
            let p = state.residual[g.cell(i, n)];
            let ut = state.ut(i, n);
            s0 = s0.min(p[0]);
            s1 = s1.max(p[0]);
            l0 = l0.min(p[1]);
            l1 = l1.max(p[1]);
            t0 = t0.min(ut);
            t1 = t1.max(ut);
        }
    }
    (((s1 - s0).powi(2) + (l1 - l0).powi(2)).sqrt(), t1 - t0)
}

/// `max |u - u*|` and `max |u_t - u*_t|` (cell-averaged).
pub fn deviations(state: &SubsolutionState, base: &BaseSubsolution) -> (f64, f64) {
    let g = state.grid;
    let du = state.u.max_abs_diff(&base.u_star);
    let mut dt: f64 = 0.0;
    for n in 0..g.nt {
        for i in 0..g.nx {
            dt = dt.max((state.u.cell_dt(i, n) - base.u_star.cell_dt(i, n)).abs());
        }
    }
    (du, dt)
}

/// One pass of the construction: from `state` toward A_delta.
pub fn density_step(
    state: &SubsolutionState,
    delta: f64,
    eta: f64,
    step_index: usize,
    inputs: StepInputs,
    set: &Setting,
) -> Result<(SubsolutionState, StepDiagnostics, Vec<OscillationProfile>), DensifyError> {
    let g = state.grid;
    let opts = inputs.options;
    let eps = inputs.epsilon;
    let omega2 = set.base.omega2();
    let om_measure = omega2.count() as f64 * g.cell_area();
    let window = *set.window();
    let l = l_bound(&window);

    let (core, rim) = choose_core(state, set, opts.halo, opts.halo_share * delta * om_measure)?;
    let (d_prime, m_prime, d2, kappa) = measure_constants(state, inputs.reference_gauge, eps, l, &core, set)?;
    let k = opts
        .k_min
        .max((5.0 * delta * l as f64 / (4.0 * d2)).ceil() as usize)
        .max((delta / kappa).ceil() as usize);
    let margin = delta / k as f64;

    let rects = tile(&core, &g, opts.rect_width, opts.min_width, opts.min_height, opts.fill, opts.layer_rows);
    let tiled: usize = rects.iter().map(|q| q.cells()).sum();
    let (u_dev0, ut_dev0) = deviations(state, set.base);
    let time_budget = (opts.time_share * (0.5 * eps - ut_dev0)).min(0.25 * m_prime) * SAFETY;
    let amplitude_budget = eta.min(0.5 * eps - u_dev0) * SAFETY;
    if time_budget <= 0.0 || amplitude_budget <= 0.0 {
        return Err(DensifyError::DegenerateMargin(format!(
            "no budget left: time {time_budget:e}, amplitude {amplitude_budget:e}"
        )));
    }
    let slack = slacks(state, &core, set, margin)?;
    let ctx = BlockContext {
        state,
        set,
        slack: &slack,
        time_budget,
        amplitude_budget,
        band_cap: opts.band_cap,
        scales: &opts.scales,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ ((step_index as u64 + 1) << 32) ^ (g.nx as u64) << 8 ^ g.nt as u64);
    let (nb, nd) = inputs.coefficient_norms;
    let scale = 1.0 + nb + nd;
    let mut blocks = Vec::new();
    let mut profiles = Vec::new();
    let (mut limited, mut nodes, mut amp_hits) = (0usize, 0usize, 0usize);
    let mut census = [0, 0, 0];
    for tiled in &rects {
        // whole rectangle or its row layers, whichever leaves less distance
        let whole_phase: f64 = rng.gen();
        let mut pieces = vec![(*tiled, whole_phase)];
        let layers = row_layers(*tiled, &slack, &g, opts.layer_ratio, opts.min_height);
        if layers.len() > 1 {
            let mut hit = false;
            let (cur, whole) = plan_block(*tiled, whole_phase, &ctx, &mut hit);
            let whole_score = whole.map_or(cur, |(sc, _)| sc);
            let split: Vec<(Rect, f64)> = layers.iter().map(|l| (*l, rng.gen())).collect();
            let split_score: f64 = split
                .iter()
                .map(|(l, ph)| {
                    let (c, b) = plan_block(*l, *ph, &ctx, &mut hit);
                    b.map_or(c, |(sc, _)| sc)
                })
                .sum();
            if split_score < whole_score {
                pieces = split;
            }
        }
        for (q, phase) in pieces {
            census[0] += 1;
            let (ci, cn) = ((q.i0 + q.i1) / 2, (q.n0 + q.n1) / 2);
            let p = state.residual[g.cell(ci, cn)];
            let center = [p[0], p[1], state.ut(ci, cn)];
            let (osc, ut_osc) = pair_oscillation(state, &q);
            let proj = set.kprime.project(p[0], p[1]);
            let mut rec = BlockRecord {
                rect: q,
                class: "I1".into(),
                center,
                s_bar: None,
                lambda1: [0.0; 2],
                lambda2: [0.0; 2],
                scale: 0.0,
                eps_i: 0.0,
                pair_oscillation: osc,
                ut_oscillation: ut_osc,
                h_max: 0.0,
                omega_sup: 0.0,
                plateau_minus: 0.0,
                plateau_plus: 0.0,
            };
            if proj.distance <= margin {
                census[1] += 1;
                rec.s_bar = Some(proj.nearest_s);
                blocks.push(rec);
                continue;
            }
            census[2] += 1;
            rec.class = "I2".into();
            let mut hit = false;
            if let (_, Some((_, plan))) = plan_block(q, phase, &ctx, &mut hit) {
                let pr = &plan.profile;
                let mm = |v: &[f64]| [v.iter().cloned().fold(f64::INFINITY, f64::min), v.iter().cloned().fold(0.0, f64::max)];
                rec.lambda1 = mm(&pr.lambda1);
                rec.lambda2 = mm(&pr.lambda2);
                rec.scale = plan.scale;
                rec.h_max = pr.h.iter().cloned().fold(0.0, f64::max);
                rec.omega_sup = pr.max_phi().max(pr.max_psi());
                rec.plateau_minus = pr.plateau_minus_measure;
                rec.plateau_plus = pr.plateau_plus_measure;
                limited += plan.lipschitz_limited;
                nodes += plan.nodes;
                profiles.push(plan.profile);
            }
            if hit {
                amp_hits += 1;
            }
            blocks.push(rec);
        }
    }
    let n_sq = census[2].max(1) as f64;
    let caps = Caps {
        norms: eta.min(0.5 * eps - u_dev0).min(0.5 * eps - ut_dev0),
        time_derivative: 0.25 * m_prime,
        distance: (delta / (4.0 * k as f64)).min(0.25 * d_prime) / scale,
        level: kappa / (2.0 * scale),
        count: delta * om_measure / (2.0 * n_sq * k as f64 * set.kprime.diameter()),
        gauge: d2 * om_measure / (14.0 * n_sq),
    };
    let eps_i = caps.min();
    for b in blocks.iter_mut().filter(|b| b.class == "I2") {
        b.eps_i = eps_i;
    }
    let lw = &window;
    let l_ratio = 17.0 * (lw.s_plus_r2 - lw.s_minus_r1) / (l as f64 * (lw.s_plus_r1 - lw.s_minus_r2).powi(2));
    let params = DensifyParams {
        delta,
        k,
        l,
        kappa,
        d_prime,
        m_prime,
        d_doubleprime: d2,
        epsilon_i_caps: caps,
        square_size: opts.rect_width,
        n_squares: census[2],
        invariants: vec![
            Invariant { name: "k >= 6".into(), holds: k >= 6 },
            Invariant { name: "5 delta / 4k <= d''/l".into(), holds: 5.0 * delta / (4.0 * k as f64) <= d2 / l as f64 },
            Invariant { name: "delta / k <= kappa".into(), holds: delta / k as f64 <= kappa },
            Invariant { name: "17 gap ratio / l < 1/2".into(), holds: l_ratio < 0.5 },
            Invariant { name: "caps positive".into(), holds: eps_i > 0.0 },
        ],
    };

    let next = superpose(state, &profiles, set)?;
    let mut tiled_mask = CellMask::empty(&g);
    for q in &rects {
        for n in q.n0..q.n1 {
            for i in q.i0..q.i1 {
                tiled_mask.set(i, n, true);
            }
        }
    }
    let mut active = CellMask::empty(&g);
    for p in &profiles {
        let q = p.rect;
        for n in q.n0..q.n1 {
            for i in q.i0..q.i1 {
                active.set(i, n, true);
            }
        }
    }
    let mass_split = [
        rim,
        mask_dist(state, &core.minus(&tiled_mask), set.kprime),
        mask_dist(state, &tiled_mask.minus(&active), set.kprime),
        mask_dist(state, &active, set.kprime),
        mask_dist(&next, &active, set.kprime),
    ];
    let (u_dev, ut_dev) = deviations(&next, set.base);
    let sup_change = next.u.max_abs_diff(&state.u).max(next.v.max_abs_diff(&state.v));
    let gauge_drift = (next.gauge.gauge_value - inputs.reference_gauge).abs();
    let membership = next.membership_failures(set).len();
    let escaped = next.escaped_nodes(set.base);
    let checks = vec![
        Check::le("dist", next.dist_integral, delta * om_measure),
        Check::le("membership failures", membership as f64, 0.0),
        Check::lt("|u - u*|", u_dev, 0.5 * eps),
        Check::lt("|u_t - u*_t|", ut_dev, 0.5 * eps),
        Check::lt("gauge drift", gauge_drift, 0.5 * eps),
        Check::lt("sup change", sup_change, eta),
        Check::le("escaped nodes", escaped as f64, 0.0),
    ];
    let diag = StepDiagnostics {
        grid: g,
        delta,
        eta,
        margin,
        params: Some(params),
        census,
        untiled_cells: core.count() - tiled,
        mass_split,
        rim_mass: rim,
        blocks,
        omega2_measure: om_measure,
        dist_before: state.dist_integral,
        dist_after: next.dist_integral,
        gauge_before: state.gauge.gauge_value,
        gauge_after: next.gauge.gauge_value,
        gauge_drift,
        sup_change,
        u_dev,
        ut_dev,
        time_budget,
        amplitude_budget,
        lipschitz_limited: if nodes > 0 { limited as f64 / nodes as f64 } else { 0.0 },
        amplitude_limited: amp_hits,
        checks,
    };
    let failed: Vec<String> = diag.checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect();
    if failed.is_empty() {
        return Ok((next, diag, profiles));
    }
    if failed == ["dist"] {
        // finer x shortens the teeth and the time ramps; finer t only
        // helps when the rectangles are too short to ramp at all
        let tallest = rects.iter().map(|q| q.height()).max().unwrap_or(0);
        let (fx, ft) = if tallest < 2 * opts.min_height { (1, 2) } else { (2, 1) };
        let reason = format!(
            "dist {:.3e} > {:.3e} ({} of {} core cells untiled, ramp-limited share {:.2})",
            diag.dist_after,
            delta * om_measure,
            diag.untiled_cells,
            core.count(),
            diag.lipschitz_limited
        );
        return Err(DensifyError::RefinementNeeded { fx, ft, reason, diagnostics: Some(Box::new(diag)) });
    }
    Err(DensifyError::PostconditionFailure { failed, diagnostics: Box::new(diag) })
}

/// Everything that depends on the grid level.
#[derive(Debug, Clone)]
pub struct Level {
    pub base: BaseSubsolution,
    pub frame: Frame,
    pub base_state: SubsolutionState,
}

impl Level {
    pub fn new(base: BaseSubsolution, spec: &ProblemSpec, kprime: &KPrime) -> Level {
        let frame = Frame::new(spec, &base.grid);
        let base_state = {
            let set = Setting { base: &base, frame: &frame, kprime };
            SubsolutionState::from_base(&set)
        };
        Level { base, frame, base_state }
    }

    pub fn setting<'a>(&'a self, kprime: &'a KPrime) -> Setting<'a> {
        Setting { base: &self.base, frame: &self.frame, kprime }
    }
}

/// How a base is rebuilt on a finer grid.
#[derive(Debug, Clone, Copy)]
pub struct Rebuild<'a> {
    pub spec: &'a ProblemSpec,
    pub sig: &'a ModifiedFlux,
    pub kprime: &'a KPrime,
    pub base_options: BaseOptions,
}

/// Moves `state` to the grid refined by `(fx, ft)`: the base is solved
/// afresh there and the perturbation `w - w*` is interpolated on top.
pub fn refine_state(
    state: &SubsolutionState,
    level: &Level,
    rb: Rebuild,
    fx: usize,
    ft: usize,
) -> Result<(Level, SubsolutionState), DensifyError> {
    let (spec, kprime) = (rb.spec, rb.kprime);
    let grid = level.base.grid.refined(fx, ft)?;
    let base = build_base(spec, rb.sig, &kprime.window, &grid, rb.base_options)?;
    let fine = Level::new(base, spec, kprime);
    let mut du = state.u.clone();
    let mut dv = state.v.clone();
    for (d, (a, b)) in du.values.iter_mut().zip(state.u.values.iter().zip(&level.base.u_star.values)) {
        *d = a - b;
    }
    for (d, (a, b)) in dv.values.iter_mut().zip(state.v.values.iter().zip(&level.base.v_star.values)) {
        *d = a - b;
    }
    let (_, du) = refine(&level.base.grid, &du, fx, ft)?;
    let (_, dv) = refine(&level.base.grid, &dv, fx, ft)?;
    let mut u = fine.base.u_star.clone();
    let mut v = fine.base.v_star.clone();
    for (x, d) in u.values.iter_mut().zip(&du.values) {
        if *d != 0.0 {
            *x += d;
        }
    }
    for (x, d) in v.values.iter_mut().zip(&dv.values) {
        if *d != 0.0 {
            *x += d;
        }
    }
    u.name = state.u.name.clone();
    v.name = state.v.name.clone();
    let omega_w = state.omega_w.refined(fx, ft);
    if !omega_w.minus(fine.base.omega2()).is_empty() {
        return Err(DensifyError::Oscillate(OscillateError::SupportEscape(Rect { i0: 0, i1: grid.nx, n0: 0, n1: grid.nt })));
    }
    let next = SubsolutionState::new(u, v, omega_w, &fine.setting(kprime));
    Ok((fine, next))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub j: usize,
    pub delta: f64,
    pub eta: f64,
    pub grid: Grid,
    pub status: String,
    pub message: String,
    pub diagnostics: Option<StepDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub epsilon: f64,
    pub schedule: Vec<f64>,
    pub etas: Vec<f64>,
    pub baseline_dist: f64,
    pub baseline_ratio: f64,
    pub reference_gauge: f64,
    pub gamma_base: f64,
    pub steps: Vec<StepRecord>,
    pub refinements: Vec<(usize, usize, String)>,
    pub dist_trajectory: Vec<f64>,
    pub gauge_trajectory: Vec<f64>,
    pub successful_steps: usize,
    pub final_grid: Grid,
    pub stop_reason: String,
}

impl RunReport {
    /// Last schedule value reached, or the baseline mean distance when no
    /// step succeeded.
    pub fn certified_delta(&self) -> f64 {
        self.steps.iter().rfind(|s| s.status == "success").map_or(self.baseline_ratio, |s| s.delta)
    }
}

pub struct RunOutcome {
    pub level: Level,
    pub state: SubsolutionState,
    pub report: RunReport,
    /// Profiles of the successful steps, tagged by step index.
    pub profiles: Vec<(usize, OscillationProfile)>,
}

/// The delta-schedule with refinement on demand.
pub fn iterate(base: BaseSubsolution, rb: Rebuild, opts: &DensifyOptions) -> Result<RunOutcome, DensifyError> {
    let (spec, kprime) = (rb.spec, rb.kprime);
    let mut level = Level::new(base, spec, kprime);
    let mut state = level.base_state.clone();
    let baseline_dist = state.dist_integral;
    let om = level.base.omega2().count() as f64 * level.base.grid.cell_area();
    let baseline_ratio = baseline_dist / om;
    let delta0 = opts.delta0.unwrap_or(0.5 * baseline_ratio);
    let schedule: Vec<f64> = (0..opts.steps).map(|j| delta0 * 0.5f64.powi(j as i32)).collect();
    let etas: Vec<f64> = (0..opts.steps).map(|j| opts.eta0 * 0.5f64.powi(j as i32)).collect();
    let norms = spec.coefficient_norms();
    let mut report = RunReport {
        seed: opts.seed,
        epsilon: spec.epsilon,
        schedule: schedule.clone(),
        etas: etas.clone(),
        baseline_dist,
        baseline_ratio,
        reference_gauge: level.base_state.gauge.gauge_value,
        gamma_base: level.base.gamma_base,
        steps: Vec::new(),
        refinements: Vec::new(),
        dist_trajectory: vec![baseline_dist],
        gauge_trajectory: vec![state.gauge.gauge_value],
        successful_steps: 0,
        final_grid: level.base.grid,
        stop_reason: "schedule complete".into(),
    };
    let mut profiles = Vec::new();
    let mut refinements = 0usize;
    let mut stalls = 0usize;
    let mut j = 0;
    while j < schedule.len() {
        let (delta, eta) = (schedule[j], etas[j]);
        let inputs = StepInputs {
            epsilon: spec.epsilon,
            reference_gauge: level.base_state.gauge.gauge_value,
            coefficient_norms: norms,
            options: opts,
        };
        let res = density_step(&state, delta, eta, j, inputs, &level.setting(kprime));
        let grid = state.grid;
        match res {
            Ok((next, diag, profs)) => {
                let before = state.dist_integral;
                report.steps.push(StepRecord {
                    j,
                    delta,
                    eta,
                    grid,
                    status: "success".into(),
                    message: String::new(),
                    diagnostics: Some(diag),
                });
                stalls = if next.dist_integral < before { 0 } else { stalls + 1 };
                state = next;
                report.dist_trajectory.push(state.dist_integral);
                report.gauge_trajectory.push(state.gauge.gauge_value);
                report.successful_steps += 1;
                profiles.extend(profs.into_iter().map(|p| (j, p)));
                if stalls >= 2 {
                    report.stop_reason = "stalled".into();
                    report.final_grid = state.grid;
                    return Err(DensifyError::IterationStalled);
                }
                j += 1;
            }
            Err(e) => {
                let (fx, ft, status) = match &e {
                    DensifyError::RefinementNeeded { fx, ft, .. } => (*fx, *ft, "refinement needed"),
                    DensifyError::HaloExhausted(_) => (1, 2, "halo exhausted"),
                    DensifyError::PostconditionFailure { .. } => (0, 0, "post-condition failure"),
                    _ => (0, 0, "error"),
                };
                let diagnostics = match &e {
                    DensifyError::PostconditionFailure { diagnostics, .. } => Some((**diagnostics).clone()),
                    DensifyError::RefinementNeeded { diagnostics: Some(d), .. } => Some((**d).clone()),
                    _ => None,
                };
                report.steps.push(StepRecord {
                    j,
                    delta,
                    eta,
                    grid,
                    status: status.into(),
                    message: e.to_string(),
                    diagnostics,
                });
                if fx == 0 {
                    report.stop_reason = format!("step {j}: {e}");
                    break;
                }
                let nodes = (grid.nx * fx + 1) * (grid.nt * ft + 1);
                if refinements >= opts.max_refinements || nodes > opts.max_nodes {
                    report.stop_reason = format!("refinement cap reached at step {j}");
                    break;
                }
                let (fine, next) = refine_state(&state, &level, rb, fx, ft)?;
                level = fine;
                state = next;
                refinements += 1;
                report.refinements.push((fx, ft, e.to_string()));
            }
        }
    }
    report.final_grid = state.grid;
    Ok(RunOutcome { level, state, report, profiles })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::{build_window, validate_flux, FluxDescription};

    const LOCUS_TOL: f64 = 1e-8;

    fn kprime() -> KPrime {
        let m = validate_flux(&FluxDescription::reference()).unwrap();
        let w = build_window(&m, 1.2, 1.8).unwrap();
        KPrime::new(&m, &w)
    }

    #[test]
    fn l_bound_reference() {
        let k = kprime();
        // 34 * 1.8 / 1.2^2 = 42.5
        assert_eq!(l_bound(&k.window), 43);
    }

    #[test]
    fn kappa_reference_is_twice_target() {
        let k = kprime();
        assert!((kappa_for(&k, 0.01) - 0.02).abs() < 1e-9);
    }

    #[test]
    fn loci_sit_at_margin() {
        let k = kprime();
        let (l, r) = ray_loci(&k, 1.5, 1.5, 0.01).unwrap();
        assert!((k.distance(l, 1.5) - 0.01).abs() < LOCUS_TOL);
        assert!((k.distance(r, 1.5) - 0.01).abs() < LOCUS_TOL);
        assert!(l < 1.5 && r > 1.5);
    }

    #[test]
    fn tile_covers_a_block() {
        let g = Grid::new(64, 32, 1.0).unwrap();
        let mut m = CellMask::empty(&g);
        for n in 0..10 {
            for i in 10..50 {
                m.set(i, n, true);
            }
        }
        let rects = tile(&m, &g, 16, 8, 4, 0.8, 64);
        let cells: usize = rects.iter().map(|q| q.cells()).sum();
        assert_eq!(cells, 400);
    }
}
