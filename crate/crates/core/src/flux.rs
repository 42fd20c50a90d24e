//! Forward-backward flux, phase window, monotone modification and the
//! geometry of the target arcs K' and the lens U'.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Root-finding tolerance in `s`.
pub const ROOT_TOL: f64 = 1e-12;
/// Bisection step cap.
pub const MAX_BISECT: usize = 200;
/// Samples per branch for the structural checks.
const CHECK_SAMPLES: usize = 10_000;
/// Polyline chord error bound for curved arcs.
const CHORD_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FluxError {
    #[error("flux is not increasing on the {branch} branch near s = {at}")]
    MonotonicityViolation { branch: &'static str, at: f64 },
    #[error("sign structure violated: {0}")]
    SignViolation(String),
    #[error("slope bound violated: {0}")]
    SlopeBoundViolation(String),
    #[error("level {r} outside [{lo}, {hi}]")]
    OutOfRange { r: f64, lo: f64, hi: f64 },
    #[error("modified flux construction failed: {0}")]
    ConstructionFailure(String),
    #[error("malformed flux description: {0}")]
    Malformed(String),
}

/// One polynomial piece `c0 + c1 s + c2 s^2 + c3 s^3` on `[start, end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    #[serde(default = "neg_inf")]
    pub start: f64,
    #[serde(default = "pos_inf")]
    pub end: f64,
    pub coeffs: Vec<f64>,
}

fn neg_inf() -> f64 {
    f64::NEG_INFINITY
}
fn pos_inf() -> f64 {
    f64::INFINITY
}

impl Segment {
    pub fn affine(start: f64, end: f64, c0: f64, c1: f64) -> Self {
        Segment { start, end, coeffs: vec![c0, c1] }
    }

    fn c(&self, k: usize) -> f64 {
        self.coeffs.get(k).copied().unwrap_or(0.0)
    }

    pub fn eval(&self, s: f64) -> f64 {
        ((self.c(3) * s + self.c(2)) * s + self.c(1)) * s + self.c(0)
    }

    pub fn slope(&self, s: f64) -> f64 {
        (3.0 * self.c(3) * s + 2.0 * self.c(2)) * s + self.c(1)
    }

    fn curvature_bound(&self, a: f64, b: f64) -> f64 {
        let d2 = |s: f64| (6.0 * self.c(3) * s + 2.0 * self.c(2)).abs();
        d2(a).max(d2(b))
    }

    fn is_affine(&self) -> bool {
        self.c(2) == 0.0 && self.c(3) == 0.0
    }
}

/// Raw flux description as declared in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxDescription {
    pub s1: f64,
    pub s2: f64,
    #[serde(rename = "segment")]
    pub segments: Vec<Segment>,
    #[serde(default = "default_working")]
    pub working_interval: [f64; 2],
    #[serde(default)]
    pub lambda_lo: Option<f64>,
    #[serde(default)]
    pub lambda_hi: Option<f64>,
}

fn default_working() -> [f64; 2] {
    [-10.0, 10.0]
}

impl FluxDescription {
    /// The piecewise-linear reference flux `2s | 3 - s | 2s - 3`.
    pub fn reference() -> Self {
        FluxDescription {
            s1: 1.0,
            s2: 2.0,
            segments: vec![
                Segment::affine(f64::NEG_INFINITY, 1.0, 0.0, 2.0),
                Segment::affine(1.0, 2.0, 3.0, -1.0),
                Segment::affine(2.0, f64::INFINITY, -3.0, 2.0),
            ],
            working_interval: default_working(),
            lambda_lo: None,
            lambda_hi: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Left,
    Right,
}

/// Validated flux with its branch structure.
#[derive(Debug, Clone, Serialize)]
pub struct FluxModel {
    segments: Vec<Segment>,
    pub s1: f64,
    pub s2: f64,
    pub s1_star: f64,
    pub s2_star: f64,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub working_interval: [f64; 2],
}

fn segment_index(segments: &[Segment], s: f64) -> usize {
    // first segment whose end is >= s; knots resolve to the left piece
    segments.iter().position(|g| s <= g.end).unwrap_or(segments.len() - 1)
}

fn bisect<F: Fn(f64) -> f64>(g: F, mut lo: f64, mut hi: f64, r: f64) -> f64 {
    // g increasing on [lo, hi], g(lo) <= r <= g(hi)
    for _ in 0..MAX_BISECT {
        if hi - lo <= ROOT_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if g(mid) < r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

impl FluxModel {
    pub fn eval(&self, s: f64) -> f64 {
        self.segments[segment_index(&self.segments, s)].eval(s)
    }

    /// One-sided derivative; `from_left` picks the piece ending at a knot.
    pub fn slope_one_sided(&self, s: f64, from_left: bool) -> f64 {
        let idx = if from_left {
            segment_index(&self.segments, s)
        } else {
            self.segments
                .iter()
                .position(|g| s < g.end)
                .unwrap_or(self.segments.len() - 1)
        };
        self.segments[idx].slope(s)
    }

    pub fn sigma_s1(&self) -> f64 {
        self.eval(self.s1)
    }

    pub fn sigma_s2(&self) -> f64 {
        self.eval(self.s2)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Branch inverse `s_r^-` or `s_r^+`.
    pub fn branch_inverse(&self, r: f64, branch: Branch) -> Result<f64, FluxError> {
        let (lo_r, hi_r) = (self.sigma_s2(), self.sigma_s1());
        if !(r >= lo_r && r <= hi_r) {
            return Err(FluxError::OutOfRange { r, lo: lo_r, hi: hi_r });
        }
        Ok(self.branch_inverse_unchecked(r, branch))
    }

    /// Branch inverse with `r` clamped to the admissible level range.
    pub fn branch_inverse_clamped(&self, r: f64, branch: Branch) -> f64 {
        let r = r.clamp(self.sigma_s2(), self.sigma_s1());
        self.branch_inverse_unchecked(r, branch)
    }

    fn branch_inverse_unchecked(&self, r: f64, branch: Branch) -> f64 {
        let (mut lo, mut hi) = match branch {
            Branch::Left => (0.0_f64.min(self.s1), self.s1),
            Branch::Right => (self.s2, self.s2 + 1.0),
        };
        match branch {
            Branch::Left => {
                let mut w = 1.0;
                while self.eval(lo) > r {
                    lo -= w;
                    w *= 2.0;
                }
            }
            Branch::Right => {
                let mut w = 1.0;
                while self.eval(hi) < r {
                    hi += w;
                    w *= 2.0;
                }
            }
        }
        // localize to a single piece and solve there
        let i_lo = segment_index(&self.segments, lo);
        let i_hi = segment_index(&self.segments, hi);
        for i in i_lo..=i_hi {
            let g = &self.segments[i];
            let a = g.start.max(lo);
            let b = g.end.min(hi);
            if a > b {
                continue;
            }
            if g.eval(a) <= r && r <= g.eval(b) {
                if g.is_affine() && g.c(1) != 0.0 {
                    return ((r - g.c(0)) / g.c(1)).clamp(a, b);
                }
                return bisect(|s| g.eval(s), a, b, r);
            }
        }
        bisect(|s| self.eval(s), lo, hi, r)
    }
}

/// Checks the structural hypotheses and builds the model.
pub fn validate_flux(desc: &FluxDescription) -> Result<FluxModel, FluxError> {
    let segs = &desc.segments;
    if segs.is_empty() {
        return Err(FluxError::Malformed("no segments".into()));
    }
    if segs[0].start != f64::NEG_INFINITY || segs[segs.len() - 1].end != f64::INFINITY {
        return Err(FluxError::Malformed("segments must cover the real line".into()));
    }
    for w in segs.windows(2) {
        if w[0].end != w[1].start {
            return Err(FluxError::Malformed(format!(
                "segments not contiguous at {} / {}",
                w[0].end, w[1].start
            )));
        }
    }
    for g in segs {
        if g.coeffs.is_empty() || g.coeffs.len() > 4 || g.coeffs.iter().any(|c| !c.is_finite()) {
            return Err(FluxError::Malformed("each segment needs 1..=4 finite coefficients".into()));
        }
        if !(g.start < g.end) {
            return Err(FluxError::Malformed("empty segment".into()));
        }
    }
    let (s1, s2) = (desc.s1, desc.s2);
    if !(s1 > 0.0 && s2 > s1) {
        return Err(FluxError::Malformed(format!("need 0 < s1 < s2, got s1={s1}, s2={s2}")));
    }
    let [w_lo, w_hi] = desc.working_interval;
    if !(w_lo < 0.0 && w_hi > 2.0 * s2) {
        return Err(FluxError::Malformed("working interval must contain [0, 2 s2]".into()));
    }
    let mut model = FluxModel {
        segments: segs.clone(),
        s1,
        s2,
        s1_star: 0.0,
        s2_star: 0.0,
        lambda_lo: 0.0,
        lambda_hi: 0.0,
        working_interval: desc.working_interval,
    };
    let sig0 = model.eval(0.0);
    if sig0.abs() > 1e-12 {
        return Err(FluxError::SignViolation(format!("sigma(0) = {sig0}")));
    }
    let (a1, a2) = (model.sigma_s1(), model.sigma_s2());
    if !(a1 > a2) {
        return Err(FluxError::SignViolation(format!("sigma(s1) = {a1} <= sigma(s2) = {a2}")));
    }
    if a2 < 0.0 {
        return Err(FluxError::SignViolation(format!("sigma(s2) = {a2} < 0")));
    }

    let sample = |a: f64, b: f64| -> Vec<f64> {
        (0..=CHECK_SAMPLES).map(|j| a + (b - a) * j as f64 / CHECK_SAMPLES as f64).collect()
    };
    for (branch, a, b) in [("left", w_lo, s1), ("right", s2, w_hi)] {
        let xs = sample(a, b);
        for w in xs.windows(2) {
            if !(model.eval(w[1]) > model.eval(w[0])) {
                return Err(FluxError::MonotonicityViolation { branch, at: w[0] });
            }
        }
    }

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (a, b) in [(w_lo, 0.5 * s1), (2.0 * s2, w_hi)] {
        let xs = sample(a, b);
        for w in xs.windows(2) {
            let sl = (model.eval(w[1]) - model.eval(w[0])) / (w[1] - w[0]);
            lo = lo.min(sl);
            hi = hi.max(sl);
        }
    }
    if lo <= 0.0 {
        return Err(FluxError::SlopeBoundViolation(format!("far-field slope {lo} not positive")));
    }
    let tol = 1e-9;
    if let Some(l) = desc.lambda_lo {
        if l <= 0.0 || lo < l - tol {
            return Err(FluxError::SlopeBoundViolation(format!("sampled slope {lo} < lambda {l}")));
        }
        lo = l;
    }
    if let Some(u) = desc.lambda_hi {
        if hi > u + tol {
            return Err(FluxError::SlopeBoundViolation(format!("sampled slope {hi} > Lambda {u}")));
        }
        hi = u;
    }
    model.lambda_lo = lo;
    model.lambda_hi = hi;

    model.s1_star = model.branch_inverse_unchecked(a2, Branch::Left);
    model.s2_star = model.branch_inverse_unchecked(a1, Branch::Right);
    if !(model.s1_star >= 0.0 && model.s1_star < s1 && model.s2_star > s2) {
        return Err(FluxError::SignViolation("conjugate abscissae out of order".into()));
    }
    Ok(model)
}

/// The level window `(r1, r2)` and its branch endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseWindow {
    pub r1: f64,
    pub r2: f64,
    pub s_minus_r1: f64,
    pub s_minus_r2: f64,
    pub s_plus_r1: f64,
    pub s_plus_r2: f64,
    pub gap: f64,
}

impl PhaseWindow {
    pub fn in_left_band(&self, s: f64) -> bool {
        s >= self.s_minus_r1 && s <= self.s_minus_r2
    }

    pub fn in_right_band(&self, s: f64) -> bool {
        s >= self.s_plus_r1 && s <= self.s_plus_r2
    }
}

pub fn build_window(model: &FluxModel, r1: f64, r2: f64) -> Result<PhaseWindow, FluxError> {
    let (lo, hi) = (model.sigma_s2(), model.sigma_s1());
    if !(lo < r1 && r1 < r2 && r2 < hi) {
        let r = if lo < r1 && r1 < hi { r2 } else { r1 };
        return Err(FluxError::OutOfRange { r, lo, hi });
    }
    let w = PhaseWindow {
        r1,
        r2,
        s_minus_r1: model.branch_inverse(r1, Branch::Left)?,
        s_minus_r2: model.branch_inverse(r2, Branch::Left)?,
        s_plus_r1: model.branch_inverse(r1, Branch::Right)?,
        s_plus_r2: model.branch_inverse(r2, Branch::Right)?,
        gap: 0.0,
    };
    let gap = w.s_plus_r1 - w.s_minus_r2;
    if gap <= 0.0 {
        return Err(FluxError::ConstructionFailure("non-positive gap".into()));
    }
    Ok(PhaseWindow { gap, ..w })
}

/// C^1 monotone modification: quadratic blend, linear middle, quadratic blend.
#[derive(Debug, Clone, Serialize)]
pub struct ModifiedFlux {
    #[serde(skip)]
    model: FluxModel,
    pub a: f64,
    pub b: f64,
    pub blend_left: f64,
    pub blend_right: f64,
    pub slope_a: f64,
    pub slope_b: f64,
    pub mid_slope: f64,
    pub lambda_tilde: f64,
    pub lambda_tilde_hi: f64,
    y_a: f64,
    y_l: f64,
    y_r: f64,
}

impl ModifiedFlux {
    pub fn eval(&self, s: f64) -> f64 {
        if s <= self.a || s >= self.b {
            return self.model.eval(s);
        }
        let (dl, dr) = (self.blend_left, self.blend_right);
        if s <= self.a + dl {
            let x = s - self.a;
            self.y_a + self.slope_a * x + (self.mid_slope - self.slope_a) / (2.0 * dl) * x * x
        } else if s <= self.b - dr {
            self.y_l + self.mid_slope * (s - self.a - dl)
        } else {
            let x = s - (self.b - dr);
            self.y_r + self.mid_slope * x + (self.slope_b - self.mid_slope) / (2.0 * dr) * x * x
        }
    }

    /// Exact derivative of the construction; outside the window the
    /// derivative of the declared piece.
    pub fn slope(&self, s: f64) -> f64 {
        if s <= self.a {
            return self.model.slope_one_sided(s, true);
        }
        if s >= self.b {
            return self.model.slope_one_sided(s, false);
        }
        let (dl, dr) = (self.blend_left, self.blend_right);
        if s <= self.a + dl {
            self.slope_a + (self.mid_slope - self.slope_a) * (s - self.a) / dl
        } else if s <= self.b - dr {
            self.mid_slope
        } else {
            self.mid_slope + (self.slope_b - self.mid_slope) * (s - (self.b - dr)) / dr
        }
    }

    pub fn model(&self) -> &FluxModel {
        &self.model
    }
}

fn blend(model: &FluxModel, w: &PhaseWindow, dl: f64, dr: f64) -> Option<ModifiedFlux> {
    let (a, b) = (w.s_minus_r1, w.s_plus_r2);
    let ga = model.slope_one_sided(a, true);
    let gb = model.slope_one_sided(b, false);
    let rise = model.eval(b) - model.eval(a);
    let m = (rise - dl * ga / 2.0 - dr * gb / 2.0) / (b - a - (dl + dr) / 2.0);
    if !(m > 0.0 && ga > 0.0 && gb > 0.0) {
        return None;
    }
    let y_a = model.eval(a);
    let y_l = y_a + dl * (ga + m) / 2.0;
    let y_r = y_l + m * (b - dr - a - dl);
    Some(ModifiedFlux {
        model: model.clone(),
        a,
        b,
        blend_left: dl,
        blend_right: dr,
        slope_a: ga,
        slope_b: gb,
        mid_slope: m,
        lambda_tilde: 0.0,
        lambda_tilde_hi: 0.0,
        y_a,
        y_l,
        y_r,
    })
}

fn check_modified(mf: &ModifiedFlux, w: &PhaseWindow) -> Result<(f64, f64), String> {
    let model = &mf.model;
    let n = CHECK_SAMPLES;
    let interior = |a: f64, b: f64, j: usize| a + (b - a) * j as f64 / n as f64;
    for j in 1..=n {
        let s = interior(w.s_minus_r1, w.s_minus_r2, j);
        if !(mf.eval(s) < model.eval(s)) {
            return Err(format!("modified flux not below sigma at s = {s}"));
        }
    }
    for j in 0..n {
        let s = interior(w.s_plus_r1, w.s_plus_r2, j);
        if !(mf.eval(s) > model.eval(s)) {
            return Err(format!("modified flux not above sigma at s = {s}"));
        }
    }
    let [lo, hi] = model.working_interval;
    let mut smin = f64::INFINITY;
    let mut smax = f64::NEG_INFINITY;
    let m = 4 * n;
    for j in 0..m {
        let s0 = lo + (hi - lo) * j as f64 / m as f64;
        let s1 = lo + (hi - lo) * (j + 1) as f64 / m as f64;
        let sl = (mf.eval(s1) - mf.eval(s0)) / (s1 - s0);
        smin = smin.min(sl);
        smax = smax.max(sl);
    }
    // also resolve the window itself finely
    for j in 0..n {
        let s0 = interior(w.s_minus_r1, w.s_plus_r2, j);
        let s1 = interior(w.s_minus_r1, w.s_plus_r2, j + 1);
        let sl = (mf.eval(s1) - mf.eval(s0)) / (s1 - s0);
        smin = smin.min(sl);
        smax = smax.max(sl);
    }
    if !(smin > 0.0) {
        return Err(format!("modified flux not increasing (slope {smin})"));
    }
    Ok((smin, smax))
}

/// Builds the monotone modification, shrinking the blend widths until the
/// strict ordering against sigma holds.
pub fn build_modified_flux(model: &FluxModel, w: &PhaseWindow) -> Result<ModifiedFlux, FluxError> {
    let mut dl = (w.s_minus_r2 - w.s_minus_r1) / 10.0;
    let mut dr = (w.s_plus_r2 - w.s_plus_r1) / 10.0;
    let mut last = String::from("no admissible blend");
    for _ in 0..20 {
        if let Some(mut mf) = blend(model, w, dl, dr) {
            match check_modified(&mf, w) {
                Ok((lo, hi)) => {
                    mf.lambda_tilde = lo;
                    mf.lambda_tilde_hi = hi;
                    return Ok(mf);
                }
                Err(e) => last = e,
            }
        }
        dl *= 0.5;
        dr *= 0.5;
    }
    Err(FluxError::ConstructionFailure(last))
}

/// Result of a projection onto K'.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub distance: f64,
    pub nearest_s: f64,
    pub inside_u: bool,
}

/// Polyline sampling of the two arcs of K' together with U' membership.
#[derive(Debug, Clone)]
pub struct KPrime {
    pub window: PhaseWindow,
    model: FluxModel,
    arcs: [Vec<(f64, f64)>; 2],
}

fn sample_arc(model: &FluxModel, a: f64, b: f64) -> Vec<(f64, f64)> {
    let mut knots = vec![a];
    for g in model.segments() {
        if g.start > a && g.start < b {
            knots.push(g.start);
        }
    }
    knots.push(b);
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for w in knots.windows(2) {
        let (p, q) = (w[0], w[1]);
        let g = &model.segments()[segment_index(model.segments(), 0.5 * (p + q))];
        let n = if g.is_affine() {
            1
        } else {
            let m = g.curvature_bound(p, q).max(1e-300);
            let len = (8.0 * CHORD_TOL / m).sqrt();
            (((q - p) / len).ceil() as usize).max(1)
        };
        for j in 0..=n {
            if j == 0 && !pts.is_empty() {
                continue;
            }
            let s = if j == n { q } else { p + (q - p) * j as f64 / n as f64 };
            pts.push((s, g.eval(s)));
        }
    }
    pts
}

fn project_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    (((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt(), qx)
}

impl KPrime {
    pub fn new(model: &FluxModel, window: &PhaseWindow) -> Self {
        KPrime {
            window: *window,
            model: model.clone(),
            arcs: [
                sample_arc(model, window.s_minus_r1, window.s_minus_r2),
                sample_arc(model, window.s_plus_r1, window.s_plus_r2),
            ],
        }
    }

    pub fn model(&self) -> &FluxModel {
        &self.model
    }

    pub fn arc_points(&self, branch: Branch) -> &[(f64, f64)] {
        match branch {
            Branch::Left => &self.arcs[0],
            Branch::Right => &self.arcs[1],
        }
    }

    fn arc_distance(&self, arc: &[(f64, f64)], p: (f64, f64)) -> (f64, f64) {
        // the arc is the graph of an increasing function; a vertical probe
        // gives an upper bound that limits the abscissa window searched
        let (a, b) = (arc[0].0, arc[arc.len() - 1].0);
        let sc = p.0.clamp(a, b);
        let bound = ((p.0 - sc).powi(2) + (p.1 - self.model.eval(sc)).powi(2)).sqrt();
        let lo = p.0 - bound;
        let hi = p.0 + bound;
        let start = arc.partition_point(|q| q.0 < lo).saturating_sub(1);
        let mut best = (f64::INFINITY, sc);
        for j in start..arc.len().saturating_sub(1) {
            if arc[j].0 > hi {
                break;
            }
            let (d, s) = project_segment(p, arc[j], arc[j + 1]);
            if d < best.0 {
                best = (d, s);
            }
        }
        if arc.len() == 1 {
            let d = ((p.0 - arc[0].0).powi(2) + (p.1 - arc[0].1).powi(2)).sqrt();
            best = (d, arc[0].0);
        }
        best
    }

    /// Distance from `(s, gamma)` to K', nearest abscissa, and U' flag.
    pub fn project(&self, s: f64, gamma: f64) -> Projection {
        let l = self.arc_distance(&self.arcs[0], (s, gamma));
        let r = self.arc_distance(&self.arcs[1], (s, gamma));
        let (distance, nearest_s) = if l.0 <= r.0 { l } else { r };
        Projection { distance, nearest_s, inside_u: self.inside_u(s, gamma) }
    }

    pub fn distance(&self, s: f64, gamma: f64) -> f64 {
        let l = self.arc_distance(&self.arcs[0], (s, gamma)).0;
        let r = self.arc_distance(&self.arcs[1], (s, gamma)).0;
        l.min(r)
    }

    /// Open-lens membership `r1 < gamma < r2`, `s^-_gamma < s < s^+_gamma`.
    pub fn inside_u(&self, s: f64, gamma: f64) -> bool {
        let w = &self.window;
        if !(gamma > w.r1 && gamma < w.r2) {
            return false;
        }
        if s <= w.s_minus_r1 || s >= w.s_plus_r2 {
            return false;
        }
        let lo = self.model.branch_inverse_clamped(gamma, Branch::Left);
        let hi = self.model.branch_inverse_clamped(gamma, Branch::Right);
        s > lo && s < hi
    }

    /// Distance to the boundary of U' (arcs plus the two level segments).
    pub fn distance_to_boundary(&self, s: f64, gamma: f64) -> f64 {
        let w = &self.window;
        let seg = |y: f64, a: f64, b: f64| project_segment((s, gamma), (a, y), (b, y)).0;
        self.distance(s, gamma)
            .min(seg(w.r1, w.s_minus_r1, w.s_plus_r1))
            .min(seg(w.r2, w.s_minus_r2, w.s_plus_r2))
    }

    /// Diameter of U' (largest distance between two of its corner points).
    pub fn diameter(&self) -> f64 {
        let w = &self.window;
        let pts = [
            (w.s_minus_r1, w.r1),
            (w.s_minus_r2, w.r2),
            (w.s_plus_r1, w.r1),
            (w.s_plus_r2, w.r2),
        ];
        let mut d: f64 = 0.0;
        for p in pts {
            for q in pts {
                d = d.max(((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt());
            }
        }
        d
    }
}

/// Free-function form of the projection.
pub fn distance_to_kprime(k: &KPrime, s: f64, gamma: f64) -> Projection {
    k.project(s, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> FluxModel {
        validate_flux(&FluxDescription::reference()).unwrap()
    }

    #[test]
    fn knot_values_resolve_left() {
        let m = reference();
        assert_eq!(m.eval(1.0), 2.0);
        assert_eq!(m.eval(2.0), 1.0);
        assert_eq!(m.slope_one_sided(1.0, true), 2.0);
        assert_eq!(m.slope_one_sided(1.0, false), -1.0);
    }

    #[test]
    fn gaps_in_segments_rejected() {
        let mut d = FluxDescription::reference();
        d.segments[1].start = 1.1;
        assert!(matches!(validate_flux(&d), Err(FluxError::Malformed(_))));
    }

    #[test]
    fn cubic_arc_is_densely_sampled() {
        let mut d = FluxDescription::reference();
        d.segments[0] = Segment { start: f64::NEG_INFINITY, end: 1.0, coeffs: vec![0.0, 1.5, 0.0, 0.5] };
        d.segments[1].coeffs = vec![4.0, -2.0];
        d.segments[2].coeffs = vec![-4.0, 2.0];
        let m = validate_flux(&d).unwrap();
        let w = build_window(&m, 0.5, 1.5).unwrap();
        let k = KPrime::new(&m, &w);
        assert!(k.arc_points(Branch::Left).len() > 100);
        assert_eq!(k.arc_points(Branch::Right).len(), 2);
    }
}
