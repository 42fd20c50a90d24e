//! Highly oscillating perturbations: a discrete sawtooth in x times a
//! cutoff in t, with exact zero row means.

use crate::grid::{CellMask, Field, Grid};
use crate::inclusion::{Setting, SubsolutionState};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const SLOPE_TOL: f64 = 1e-12;
const MIN_WIDTH: usize = 8;
const MIN_HEIGHT: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OscillateError {
    #[error("sawtooth not resolvable on this grid: {0}")]
    UnresolvableSawtooth(String),
    #[error("budget infeasible: {0}")]
    BudgetInfeasible(String),
    #[error("rectangle {0:?} is below the resolvability floor")]
    TooSmall(Rect),
    #[error("rectangles {0:?} and {1:?} overlap")]
    OverlapViolation(Rect, Rect),
    #[error("rectangle {0:?} leaves Omega^2")]
    SupportEscape(Rect),
}

/// Cell-aligned rectangle: cells `i0..i1` by rows `n0..n1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub i0: usize,
    pub i1: usize,
    pub n0: usize,
    pub n1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.i1 - self.i0
    }
    pub fn height(&self) -> usize {
        self.n1 - self.n0
    }
    pub fn cells(&self) -> usize {
        self.width() * self.height()
    }
    pub fn contains_cell(&self, i: usize, n: usize) -> bool {
        i >= self.i0 && i < self.i1 && n >= self.n0 && n < self.n1
    }
    pub fn overlaps(&self, o: &Rect) -> bool {
        self.i0 < o.i1 && o.i0 < self.i1 && self.n0 < o.n1 && o.n0 < self.n1
    }
    pub fn measure(&self, g: &Grid) -> f64 {
        self.cells() as f64 * g.cell_area()
    }
}

/// Smoothstep `3z^2 - 2z^3` clamped to `[0, 1]`.
pub fn smoothstep(z: f64) -> f64 {
    let z = z.clamp(0.0, 1.0);
    z * z * (3.0 - 2.0 * z)
}

/// Node values of the cutoff `h_tau` on rows `n0..=n1`.
pub fn cutoff(rect: &Rect, tau: f64, g: &Grid) -> Vec<f64> {
    (rect.n0..=rect.n1)
        .map(|n| {
            let (a, b) = ((n - rect.n0) as f64 * g.dt(), (rect.n1 - n) as f64 * g.dt());
            smoothstep(a / tau).min(smoothstep(b / tau))
        })
        .collect()
}

/// Sawtooth node values on `0..=w` with per-column slopes, `f(0) = f(w) = 0`
/// and `f(w - j) = -f(j)`, so every trapezoid row integral vanishes.
///
/// `nu` is the peak-to-peak range targeted by the relay; `phase` in
/// `[0, 1)` shifts the first switching threshold.
pub fn sawtooth(lambda1: &[f64], lambda2: &[f64], h: f64, nu: f64, phase: f64) -> Vec<f64> {
    let w = lambda1.len();
    assert!(w >= 2 && w % 2 == 0 && lambda2.len() == w);
    let m = w / 2;
    let l1: Vec<f64> = (0..m).map(|c| lambda1[c].min(lambda1[w - 1 - c])).collect();
    let l2: Vec<f64> = (0..m).map(|c| lambda2[c].min(lambda2[w - 1 - c])).collect();
    // suffix capacities for the return to zero at the centre node
    let mut down_cap = vec![0.0; m + 1];
    let mut up_cap = vec![0.0; m + 1];
    for c in (0..m).rev() {
        down_cap[c] = down_cap[c + 1] + l1[c] * h;
        up_cap[c] = up_cap[c + 1] + l2[c] * h;
    }
    let half = 0.5 * nu;
    let mut f = vec![0.0; w + 1];
    let mut mode_down = phase < 0.5;
    // only the first switching threshold carries the phase
    let mut low = -half + 2.0 * half * (2.0 * phase).fract();
    let mut g = 0.0;
    for c in 0..m {
        if c + 1 < m {
            let (lo, hi) = (-up_cap[c + 1], down_cap[c + 1]);
            let gd = g - l1[c] * h;
            let gu = g + l2[c] * h;
            let prefer_down = if mode_down { gd >= low } else { gu > half };
            let (first, second) = if prefer_down { (gd, gu) } else { (gu, gd) };
            let pick = if first >= lo && first <= hi {
                first
            } else if second >= lo && second <= hi {
                second
            } else {
                first.clamp(lo, hi).clamp(gd, gu)
            };
            if mode_down && pick > g {
                low = -half;
            }
            mode_down = pick < g;
            g = pick;
        } else {
            g = 0.0;
        }
        f[c + 1] = g;
    }
    for j in 0..m {
        f[w - j] = -f[j];
    }
    f[m] = 0.0;
    f
}

/// Sawtooth without partial cells: each half carries the most evenly
/// spaced up cells (shifted by `phase`) whose rise fits under the summed
/// down slack, and the down slopes are scaled by the common factor that
/// closes the half exactly. Returns the nodes and the slopes used.
pub fn closed_sawtooth(lambda1: &[f64], lambda2: &[f64], h: f64, phase: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let w = lambda1.len();
    assert!(w >= 2 && w % 2 == 0 && lambda2.len() == w);
    let m = w / 2;
    let l1: Vec<f64> = (0..m).map(|c| lambda1[c].min(lambda1[w - 1 - c])).collect();
    let l2: Vec<f64> = (0..m).map(|c| lambda2[c].min(lambda2[w - 1 - c])).collect();
    let mut slope = vec![0.0; m];
    for count in (1..m).rev() {
        let mut up = vec![false; m];
        for j in 0..count {
            up[(((j as f64 + phase) * m as f64 / count as f64) as usize).min(m - 1)] = true;
        }
        let rise: f64 = (0..m).filter(|&c| up[c]).map(|c| l2[c]).sum();
        let fall: f64 = (0..m).filter(|&c| !up[c]).map(|c| l1[c]).sum();
        if rise > 0.0 && rise <= fall {
            let theta = rise / fall;
            for c in 0..m {
                slope[c] = if up[c] { l2[c] } else { -theta * l1[c] };
            }
            break;
        }
    }
    let mut f = vec![0.0; w + 1];
    for c in 0..m {
        f[c + 1] = f[c] + slope[c] * h;
    }
    f[m] = 0.0;
    for j in 0..m {
        f[w - j] = -f[j];
    }
    let mut used1 = vec![0.0; w];
    let mut used2 = vec![0.0; w];
    for c in 0..m {
        let (a, b) = if slope[c] > 0.0 { (0.0, slope[c]) } else { (-slope[c], 0.0) };
        used1[c] = a;
        used1[w - 1 - c] = a;
        used2[c] = b;
        used2[w - 1 - c] = b;
    }
    (f, used1, used2)
}

/// Cumulative trapezoid of `f` along x.
fn cumulative(f: &[f64], h: f64) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    for j in 1..f.len() {
        out[j] = out[j - 1] + 0.5 * h * (f[j - 1] + f[j]);
    }
    out
}

/// Perturbation `omega = (phi, psi)` with `phi = h(t) f(x)` and
/// `psi = h(t) int f`, stored in separated form on its rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationProfile {
    pub rect: Rect,
    /// Per-column slopes actually used.
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub epsilon_budget: f64,
    /// Cutoff margin in time units; 0 for shaped time profiles.
    pub tau: f64,
    /// Peak-to-peak range of the sawtooth.
    pub nu: f64,
    pub phase: f64,
    pub f: Vec<f64>,
    pub f_int: Vec<f64>,
    pub h: Vec<f64>,
    pub plateau_minus_measure: f64,
    pub plateau_plus_measure: f64,
}

impl OscillationProfile {
    /// Assembles a profile from a sawtooth and node values of the time
    /// factor (first and last must vanish).
    pub fn assemble(rect: Rect, lambda1: Vec<f64>, lambda2: Vec<f64>, nu: f64, phase: f64, h: Vec<f64>, g: &Grid) -> Self {
        let f = sawtooth(&lambda1, &lambda2, g.h(), nu, phase);
        Self::from_parts(rect, lambda1, lambda2, f, phase, h, g)
    }

    /// Profile from precomputed sawtooth nodes `f` on `0..=width`.
    pub fn from_parts(rect: Rect, lambda1: Vec<f64>, lambda2: Vec<f64>, f: Vec<f64>, phase: f64, h: Vec<f64>, g: &Grid) -> Self {
        let (lo, hi) = f.iter().fold((0.0f64, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        let nu = hi - lo;
        let f_int = cumulative(&f, g.h());
        let mut p = OscillationProfile {
            rect,
            lambda1,
            lambda2,
            epsilon_budget: f64::INFINITY,
            tau: 0.0,
            nu,
            phase,
            f,
            f_int,
            h,
            plateau_minus_measure: 0.0,
            plateau_plus_measure: 0.0,
        };
        p.measure_plateaus(g);
        p
    }

    fn measure_plateaus(&mut self, g: &Grid) {
        let (mut minus, mut plus) = (0usize, 0usize);
        for r in 0..self.rect.height() {
            for c in 0..self.rect.width() {
                let sl = self.cell_dx(c, r, g);
                let (a, b) = (self.lambda1[c], self.lambda2[c]);
                if (sl + a).abs() <= SLOPE_TOL * a.max(1.0) {
                    minus += 1;
                } else if (sl - b).abs() <= SLOPE_TOL * b.max(1.0) {
                    plus += 1;
                }
            }
        }
        self.plateau_minus_measure = minus as f64 * g.cell_area();
        self.plateau_plus_measure = plus as f64 * g.cell_area();
    }

    /// `phi` at local node `(j, r)`.
    pub fn phi_local(&self, j: usize, r: usize) -> f64 {
        self.h[r] * self.f[j]
    }

    pub fn psi_local(&self, j: usize, r: usize) -> f64 {
        self.h[r] * self.f_int[j]
    }

    /// Cell-averaged `phi_x` of local cell `(c, r)`.
    pub fn cell_dx(&self, c: usize, r: usize, g: &Grid) -> f64 {
        0.5 * (self.h[r] + self.h[r + 1]) * (self.f[c + 1] - self.f[c]) / g.h()
    }

    /// Cell-averaged `phi_t` of local cell `(c, r)`.
    pub fn cell_dt(&self, c: usize, r: usize, g: &Grid) -> f64 {
        0.5 * (self.f[c] + self.f[c + 1]) * (self.h[r + 1] - self.h[r]) / g.dt()
    }

    pub fn max_phi(&self) -> f64 {
        sup(&self.f) * sup(&self.h)
    }

    pub fn max_psi(&self) -> f64 {
        sup(&self.f_int) * sup(&self.h)
    }

    fn max_dh(&self, g: &Grid) -> f64 {
        self.h.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max) / g.dt()
    }

    /// Node-level bound on `|phi_t|`.
    pub fn max_phi_t(&self, g: &Grid) -> f64 {
        sup(&self.f) * self.max_dh(g)
    }

    pub fn max_psi_t(&self, g: &Grid) -> f64 {
        sup(&self.f_int) * self.max_dh(g)
    }

    /// Largest `|trapezoid int phi dx|` over the rows.
    pub fn row_mean_defect(&self, g: &Grid) -> f64 {
        let w = self.f.len() - 1;
        let mut s = 0.0;
        for j in 0..=w {
            let wt = if j == 0 || j == w { 0.5 } else { 1.0 };
            s += wt * self.f[j];
        }
        (s * g.h()).abs() * sup(&self.h)
    }

    /// Dense fields on the whole grid (tests and export).
    pub fn fields(&self, g: &Grid) -> (Field, Field) {
        let mut phi = Field::zeros(g, "phi");
        let mut psi = Field::zeros(g, "psi");
        self.add_to(&mut phi, &mut psi);
        (phi, psi)
    }

    fn add_to(&self, u: &mut Field, v: &mut Field) {
        let q = self.rect;
        for r in 1..q.height() {
            if self.h[r] == 0.0 {
                continue;
            }
            for j in 1..q.width() {
                let (i, n) = (q.i0 + j, q.n0 + r);
                u.set(i, n, u.at(i, n) + self.phi_local(j, r));
                v.set(i, n, v.at(i, n) + self.psi_local(j, r));
            }
        }
    }

    /// JSON summary without the node arrays.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "rect": self.rect,
            "lambda1_min": self.lambda1.iter().cloned().fold(f64::INFINITY, f64::min),
            "lambda2_min": self.lambda2.iter().cloned().fold(f64::INFINITY, f64::min),
            "nu": self.nu,
            "tau": self.tau,
            "phase": self.phase,
            "h_max": sup(&self.h),
            "plateau_minus": self.plateau_minus_measure,
            "plateau_plus": self.plateau_plus_measure,
        })
    }
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Perturbation with constant slopes on `q`, amplitude, cutoff and plateau
/// defects all below `epsilon`.
pub fn build_profile(
    q: Rect,
    lambda1: f64,
    lambda2: f64,
    epsilon: f64,
    g: &Grid,
    rng: &mut impl Rng,
) -> Result<OscillationProfile, OscillateError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) || !(lambda1 > 0.0 && lambda2 > 0.0) {
        return Err(OscillateError::BudgetInfeasible(format!(
            "epsilon = {epsilon}, slopes = ({lambda1}, {lambda2})"
        )));
    }
    if q.width() < MIN_WIDTH || q.height() < MIN_HEIGHT || q.width() % 2 == 1 {
        return Err(OscillateError::TooSmall(q));
    }
    let h = g.h();
    let width = q.width() as f64 * h;
    // plateau defect from the two ramps: 2 tau width < epsilon / 2
    let tau_cap = (0.999 * epsilon / (4.0 * width)).min(0.5 * q.height() as f64 * g.dt());
    let rows = (tau_cap / g.dt()).floor();
    if rows < 2.0 {
        return Err(OscillateError::UnresolvableSawtooth(format!(
            "cutoff needs {:.3} rows, at least 2 required",
            tau_cap / g.dt()
        )));
    }
    let tau = rows * g.dt();
    let harm = lambda1 * lambda2 / (lambda1 + lambda2);
    let nu_min = (4.0 * h * harm).max(lambda1.max(lambda2) * h);
    // |phi| <= nu / 2 and |phi_t| <= 1.5 nu / (2 tau)
    let mut nu = (0.999 * epsilon).min(0.999 * epsilon * tau / 0.75);
    if nu < nu_min {
        return Err(OscillateError::UnresolvableSawtooth(format!(
            "amplitude {nu_min:.3e} needed for a 4-cell period exceeds the budget {nu:.3e}"
        )));
    }
    let phase: f64 = rng.gen();
    let time = cutoff(&q, tau, g);
    loop {
        let mut p = OscillationProfile::assemble(
            q,
            vec![lambda1; q.width()],
            vec![lambda2; q.width()],
            nu,
            phase,
            time.clone(),
            g,
        );
        p.tau = tau;
        p.epsilon_budget = epsilon;
        let ok = p.max_phi() < epsilon
            && p.max_psi() < epsilon
            && p.max_phi_t(g) < epsilon
            && p.max_psi_t(g) < epsilon
            && plateau_defects(&p, g).0 < epsilon
            && plateau_defects(&p, g).1 < epsilon;
        if ok {
            return Ok(p);
        }
        if nu <= nu_min {
            return Err(OscillateError::UnresolvableSawtooth(format!(
                "defects stay above {epsilon} at the smallest period"
            )));
        }
        nu = (0.5 * nu).max(nu_min);
    }
}

/// Defects `| |Q^-| - lambda2 |Q| / (lambda1 + lambda2) |` and the plus
/// counterpart, using the first column's slopes.
pub fn plateau_defects(p: &OscillationProfile, g: &Grid) -> (f64, f64) {
    let (a, b) = (p.lambda1[0], p.lambda2[0]);
    let q = p.rect.measure(g);
    (
        (p.plateau_minus_measure - b / (a + b) * q).abs(),
        (p.plateau_plus_measure - a / (a + b) * q).abs(),
    )
}

/// `w + sum omega_i` with the perturbed region grown by the rectangles.
pub fn superpose(
    state: &SubsolutionState,
    profiles: &[OscillationProfile],
    set: &Setting,
) -> Result<SubsolutionState, OscillateError> {
    let omega2 = set.base.omega2();
    for (a, p) in profiles.iter().enumerate() {
        let q = p.rect;
        for o in &profiles[a + 1..] {
            if q.overlaps(&o.rect) {
                return Err(OscillateError::OverlapViolation(q, o.rect));
            }
        }
        for n in q.n0..q.n1 {
            for i in q.i0..q.i1 {
                if !omega2.get(i, n) {
                    return Err(OscillateError::SupportEscape(q));
                }
            }
        }
    }
    if profiles.is_empty() {
        return Ok(state.clone());
    }
    let mut u = state.u.clone();
    let mut v = state.v.clone();
    let mut omega_w = state.omega_w.clone();
    for p in profiles {
        p.add_to(&mut u, &mut v);
        mark(&mut omega_w, &p.rect);
    }
    Ok(SubsolutionState::new(u, v, omega_w, set))
}

fn mark(mask: &mut CellMask, q: &Rect) {
    for n in q.n0..q.n1 {
        for i in q.i0..q.i1 {
            mask.set(i, n, true);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sawtooth_is_odd_and_closed() {
        let l1 = vec![0.1; 40];
        let l2 = vec![1.5; 40];
        let f = sawtooth(&l1, &l2, 0.01, 0.015, 0.3);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[40], 0.0);
        for j in 0..=40 {
            assert_eq!(f[40 - j], -f[j]);
        }
        for c in 0..40 {
            let s = (f[c + 1] - f[c]) / 0.01;
            assert!(s >= -0.1 - 1e-12 && s <= 1.5 + 1e-12, "slope {s}");
        }
    }

    #[test]
    fn smoothstep_ends() {
        assert_eq!(smoothstep(0.0), 0.0);
        assert_eq!(smoothstep(1.0), 1.0);
        assert!((smoothstep(0.5) - 0.5).abs() < 1e-15);
    }
}
