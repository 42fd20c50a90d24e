//! PDE data: coefficients, source, initial datum and the derived
//! integrals F and P_u.

use crate::expr::{Expr, ExprError, Var};
use crate::flux::PhaseWindow;
use crate::grid::{cumulative_x, Field, Grid};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const STRUCT_TOL: f64 = 1e-10;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("compatibility violated: u0'(0) = {left}, u0'(1) = {right}")]
    CompatibilityViolation { left: f64, right: f64 },
    #[error("c - b_x depends on x (max deviation {0})")]
    StructureViolation(f64),
    #[error("no point with s^-(r1) < u0'(x) < s^+(r2)")]
    NoTransitionPoint,
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("in '{key}': {source}")]
    Expr { key: String, source: ExprError },
}

/// Problem section of a run config; all coefficients are expressions in
/// `x` and `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawProblem {
    #[serde(rename = "T")]
    pub t_final: f64,
    #[serde(default = "zero")]
    pub b: String,
    #[serde(default)]
    pub b_x: Option<String>,
    #[serde(default)]
    pub d: Option<String>,
    #[serde(default)]
    pub c: Option<String>,
    #[serde(default = "zero")]
    pub f: String,
    pub u0: String,
    #[serde(default)]
    pub u0_prime: Option<String>,
    pub epsilon: f64,
}

fn zero() -> String {
    "0".into()
}

impl RawProblem {
    pub fn default_problem() -> RawProblem {
        RawProblem {
            t_final: 0.25,
            b: "0.1*x".into(),
            b_x: None,
            d: Some("0.05".into()),
            c: None,
            f: "0".into(),
            u0: "1.5*x^2 - x^3".into(),
            u0_prime: None,
            epsilon: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeSource {
    Config,
    Symbolic,
    CentralDifference,
}

#[derive(Debug, Clone)]
enum Deriv {
    Expr(Expr),
    Fd(Expr),
}

impl Deriv {
    fn eval(&self, x: f64, t: f64) -> f64 {
        match self {
            Deriv::Expr(e) => e.eval(x, t),
            Deriv::Fd(e) => (e.eval(x + FD_STEP, t) - e.eval(x - FD_STEP, t)) / (2.0 * FD_STEP),
        }
    }
}

/// Validated problem data.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub t_final: f64,
    pub epsilon: f64,
    b: Expr,
    b_x: Deriv,
    d: Expr,
    f: Expr,
    u0: Expr,
    u0_prime: Deriv,
    pub b_x_source: DerivativeSource,
    pub u0_prime_source: DerivativeSource,
    pub transition_point: f64,
    pub raw: RawProblem,
}

fn parse(key: &str, src: &str) -> Result<Expr, ProblemError> {
    Expr::parse(src).map_err(|source| ProblemError::Expr { key: key.into(), source })
}

fn derivative(key: &str, given: &Option<String>, of: &Expr) -> Result<(Deriv, DerivativeSource), ProblemError> {
    if let Some(s) = given {
        return Ok((Deriv::Expr(parse(key, s)?), DerivativeSource::Config));
    }
    Ok(match of.derivative(Var::X) {
        Some(e) => (Deriv::Expr(e), DerivativeSource::Symbolic),
        None => (Deriv::Fd(of.clone()), DerivativeSource::CentralDifference),
    })
}

fn sample_points(t_final: f64) -> impl Iterator<Item = (f64, f64)> {
    (0..=64).flat_map(move |i| (0..=32).map(move |n| (i as f64 / 64.0, t_final * n as f64 / 32.0)))
}

/// Checks compatibility, the coefficient structure and the transition
/// condition.
pub fn validate_problem(raw: &RawProblem, window: &PhaseWindow) -> Result<ProblemSpec, ProblemError> {
    let mut spec = parse_problem(raw)?;
    let (lo, hi) = (window.s_minus_r1, window.s_plus_r2);
    let mut best: Option<(f64, f64)> = None;
    for j in 0..=10_000 {
        let x = j as f64 / 10_000.0;
        let s = spec.u0_prime.eval(x, 0.0);
        if s > lo && s < hi {
            let margin = (s - lo).min(hi - s);
            if best.is_none_or(|(_, m)| margin > m) {
                best = Some((x, margin));
            }
        }
    }
    spec.transition_point = best.ok_or(ProblemError::NoTransitionPoint)?.0;
    Ok(spec)
}

/// Parses the coefficients and checks compatibility and the coefficient
/// structure; the transition point is left as NaN.
pub fn parse_problem(raw: &RawProblem) -> Result<ProblemSpec, ProblemError> {
    if !(raw.t_final > 0.0 && raw.t_final.is_finite()) {
        return Err(ProblemError::BadParameter(format!("T = {}", raw.t_final)));
    }
    if !(raw.epsilon > 0.0 && raw.epsilon.is_finite()) {
        return Err(ProblemError::BadParameter(format!("epsilon = {}", raw.epsilon)));
    }
    let b = parse("b", &raw.b)?;
    let f = parse("f", &raw.f)?;
    let u0 = parse("u0", &raw.u0)?;
    if u0.depends_on(Var::T) {
        return Err(ProblemError::BadParameter("u0 must not depend on t".into()));
    }
    let (b_x, b_x_source) = derivative("b_x", &raw.b_x, &b)?;
    let (u0_prime, u0_prime_source) = derivative("u0_prime", &raw.u0_prime, &u0)?;

    let d = match (&raw.d, &raw.c) {
        (Some(d), _) => {
            let d = parse("d", d)?;
            if d.depends_on(Var::X) {
                return Err(ProblemError::StructureViolation(f64::NAN));
            }
            d
        }
        (None, Some(c)) => {
            // d(t) read off at x = 0, then checked below
            let c = parse("c", c)?;
            let bx0 = match &b_x {
                Deriv::Expr(e) => e.clone(),
                Deriv::Fd(_) => return Err(ProblemError::BadParameter("give d when b_x is numerical".into())),
            };
            let at0 = |e: &Expr| substitute_x0(e);
            Expr::Sub(Box::new(at0(&c)), Box::new(at0(&bx0)))
        }
        (None, None) => Expr::Num(0.0),
    };
    if let Some(c) = &raw.c {
        let c = parse("c", c)?;
        let dev = sample_points(raw.t_final)
            .map(|(x, t)| (c.eval(x, t) - b_x.eval(x, t) - d.eval(x, t)).abs())
            .fold(0.0, f64::max);
        if dev > STRUCT_TOL {
            return Err(ProblemError::StructureViolation(dev));
        }
    }

    let (l, r) = (u0_prime.eval(0.0, 0.0), u0_prime.eval(1.0, 0.0));
    if l.abs() > STRUCT_TOL || r.abs() > STRUCT_TOL {
        return Err(ProblemError::CompatibilityViolation { left: l, right: r });
    }

    Ok(ProblemSpec {
        t_final: raw.t_final,
        epsilon: raw.epsilon,
        b,
        b_x,
        d,
        f,
        u0,
        u0_prime,
        b_x_source,
        u0_prime_source,
        transition_point: f64::NAN,
        raw: raw.clone(),
    })
}

fn substitute_x0(e: &Expr) -> Expr {
    use Expr::*;
    let s = |a: &Expr| Box::new(substitute_x0(a));
    match e {
        X => Num(0.0),
        Num(_) | T => e.clone(),
        Neg(a) => Neg(s(a)),
        Add(a, b) => Add(s(a), s(b)),
        Sub(a, b) => Sub(s(a), s(b)),
        Mul(a, b) => Mul(s(a), s(b)),
        Div(a, b) => Div(s(a), s(b)),
        Pow(a, b) => Pow(s(a), s(b)),
        Call(f, a) => Call(*f, s(a)),
    }
}

impl ProblemSpec {
    pub fn b(&self, x: f64, t: f64) -> f64 {
        self.b.eval(x, t)
    }
    pub fn b_x(&self, x: f64, t: f64) -> f64 {
        self.b_x.eval(x, t)
    }
    pub fn d(&self, t: f64) -> f64 {
        self.d.eval(0.0, t)
    }
    pub fn c(&self, x: f64, t: f64) -> f64 {
        self.b_x(x, t) + self.d(t)
    }
    pub fn f(&self, x: f64, t: f64) -> f64 {
        self.f.eval(x, t)
    }
    pub fn u0(&self, x: f64) -> f64 {
        self.u0.eval(x, 0.0)
    }
    pub fn u0_prime(&self, x: f64) -> f64 {
        self.u0_prime.eval(x, 0.0)
    }

    /// Sup norms of b and d by dense sampling.
    pub fn coefficient_norms(&self) -> (f64, f64) {
        let mut nb: f64 = 0.0;
        let mut nd: f64 = 0.0;
        for i in 0..=256 {
            for n in 0..=256 {
                let (x, t) = (i as f64 / 256.0, self.t_final * n as f64 / 256.0);
                nb = nb.max(self.b(x, t).abs());
                nd = nd.max(self.d(t).abs());
            }
        }
        (nb, nd)
    }
}

/// `P_u(x,t) = d(t) * int_0^x u(y,t) dy` by the cumulative trapezoid rule.
pub fn potential(u: &Field, spec: &ProblemSpec) -> Field {
    let g = u.grid;
    let mut out = Field::zeros(&g, "P_u");
    for n in 0..=g.nt {
        let dn = spec.d(g.t(n));
        let cum = cumulative_x(u.row(n), g.h());
        for (o, c) in out.row_mut(n).iter_mut().zip(cum) {
            *o = dn * c;
        }
    }
    out
}

/// `F(x,t) = int_0^x f(y,t) dy` by the cumulative trapezoid rule.
pub fn accumulate_f(spec: &ProblemSpec, grid: &Grid) -> Field {
    let f = Field::from_fn(grid, "f", |x, t| spec.f(x, t));
    let mut out = Field::zeros(grid, "F");
    for n in 0..=grid.nt {
        let cum = cumulative_x(f.row(n), grid.h());
        out.row_mut(n).copy_from_slice(&cum);
    }
    out
}
