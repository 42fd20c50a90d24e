//! Uniform space-time grid on (0,1) x (0,T), node fields, cell masks,
//! difference stencils, trapezoid integrals and nested refinement.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid needs nx >= 16 and nt >= 16, got {nx} x {nt}")]
    TooCoarse { nx: usize, nt: usize },
    #[error("final time must be positive, got {0}")]
    BadTime(f64),
    #[error("refinement factor {0} not in 1..=4")]
    BadFactor(usize),
    #[error("field shape does not match grid")]
    ShapeMismatch,
    #[error("non-finite value in field '{name}' at node ({i}, {n})")]
    NonFinite { name: String, i: usize, n: usize },
    #[error("malformed field file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub nt: usize,
    pub t_final: f64,
    #[serde(default)]
    pub level: u32,
}

impl Grid {
    pub fn new(nx: usize, nt: usize, t_final: f64) -> Result<Grid, GridError> {
        if nx < 16 || nt < 16 {
            return Err(GridError::TooCoarse { nx, nt });
        }
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(GridError::BadTime(t_final));
        }
        Ok(Grid { nx, nt, t_final, level: 0 })
    }

    pub fn h(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.nt as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 / self.nx as f64
    }

    pub fn t(&self, n: usize) -> f64 {
        self.t_final * n as f64 / self.nt as f64
    }

    pub fn nodes(&self) -> usize {
        (self.nx + 1) * (self.nt + 1)
    }

    pub fn cells(&self) -> usize {
        self.nx * self.nt
    }

    pub fn cell_area(&self) -> f64 {
        self.h() * self.dt()
    }

    #[inline]
    pub fn idx(&self, i: usize, n: usize) -> usize {
        n * (self.nx + 1) + i
    }

    #[inline]
    pub fn cell(&self, i: usize, n: usize) -> usize {
        n * self.nx + i
    }

    pub fn refined(&self, fx: usize, ft: usize) -> Result<Grid, GridError> {
        for f in [fx, ft] {
            if !(1..=4).contains(&f) {
                return Err(GridError::BadFactor(f));
            }
        }
        Ok(Grid { nx: self.nx * fx, nt: self.nt * ft, t_final: self.t_final, level: self.level + 1 })
    }
}

/// Node-centred values, row-major in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: &Grid, name: &str) -> Field {
        Field { name: name.to_string(), grid: *grid, values: vec![0.0; grid.nodes()] }
    }

    pub fn from_fn(grid: &Grid, name: &str, f: impl Fn(f64, f64) -> f64) -> Field {
        let mut out = Field::zeros(grid, name);
        for n in 0..=grid.nt {
            let t = grid.t(n);
            for i in 0..=grid.nx {
                out.values[grid.idx(i, n)] = f(grid.x(i), t);
            }
        }
        out
    }

    #[inline]
    pub fn at(&self, i: usize, n: usize) -> f64 {
        self.values[self.grid.idx(i, n)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, n: usize, v: f64) {
        let k = self.grid.idx(i, n);
        self.values[k] = v;
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let w = self.grid.nx + 1;
        &self.values[n * w..(n + 1) * w]
    }

    pub fn row_mut(&mut self, n: usize) -> &mut [f64] {
        let w = self.grid.nx + 1;
        &mut self.values[n * w..(n + 1) * w]
    }

    pub fn renamed(mut self, name: &str) -> Field {
        self.name = name.to_string();
        self
    }

    pub fn check_finite(&self) -> Result<(), GridError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(k) => Err(GridError::NonFinite {
                name: self.name.clone(),
                i: k % (self.grid.nx + 1),
                n: k / (self.grid.nx + 1),
            }),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Cell-averaged x-derivative: mean of the forward differences of the
    /// two time rows bounding the cell.
    #[inline]
    pub fn cell_dx(&self, i: usize, n: usize) -> f64 {
        let g = &self.grid;
        let w = g.nx + 1;
        let k0 = n * w + i;
        let k1 = k0 + w;
        0.5 * ((self.values[k0 + 1] - self.values[k0]) + (self.values[k1 + 1] - self.values[k1])) * g.nx as f64
    }

    /// Cell-averaged t-derivative.
    #[inline]
    pub fn cell_dt(&self, i: usize, n: usize) -> f64 {
        let g = &self.grid;
        let w = g.nx + 1;
        let k0 = n * w + i;
        let k1 = k0 + w;
        0.5 * ((self.values[k1] - self.values[k0]) + (self.values[k1 + 1] - self.values[k0 + 1])) / g.dt()
    }

    /// Mean of the four corner values.
    #[inline]
    pub fn cell_mean(&self, i: usize, n: usize) -> f64 {
        let w = self.grid.nx + 1;
        let k0 = n * w + i;
        let k1 = k0 + w;
        0.25 * (self.values[k0] + self.values[k0 + 1] + self.values[k1] + self.values[k1 + 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Centred interior, second-order one-sided at the ends.
    Centered,
    /// Forward differences, backward at the last node.
    OneSided,
}

pub fn ddx(field: &Field, scheme: Scheme) -> Field {
    let g = field.grid;
    let h = g.h();
    let mut out = Field::zeros(&g, &format!("d{}/dx", field.name));
    for n in 0..=g.nt {
        let r = field.row(n);
        let o = out.row_mut(n);
        let m = g.nx;
        match scheme {
            Scheme::Centered => {
                for i in 1..m {
                    o[i] = (r[i + 1] - r[i - 1]) / (2.0 * h);
                }
                o[0] = (-3.0 * r[0] + 4.0 * r[1] - r[2]) / (2.0 * h);
                o[m] = (3.0 * r[m] - 4.0 * r[m - 1] + r[m - 2]) / (2.0 * h);
            }
            Scheme::OneSided => {
                for i in 0..m {
                    o[i] = (r[i + 1] - r[i]) / h;
                }
                o[m] = (r[m] - r[m - 1]) / h;
            }
        }
    }
    out
}

/// x-derivative with the Neumann mirror `u_{-1} = u_1`, so the boundary
/// values vanish identically.
pub fn ddx_neumann(field: &Field) -> Field {
    let mut out = ddx(field, Scheme::Centered);
    let g = field.grid;
    for n in 0..=g.nt {
        out.set(0, n, 0.0);
        out.set(g.nx, n, 0.0);
    }
    out
}

/// Centred in time, first-order one-sided at t = 0 and t = T.
pub fn ddt(field: &Field) -> Field {
    let g = field.grid;
    let dt = g.dt();
    let mut out = Field::zeros(&g, &format!("d{}/dt", field.name));
    for n in 0..=g.nt {
        for i in 0..=g.nx {
            let v = if n == 0 {
                (field.at(i, 1) - field.at(i, 0)) / dt
            } else if n == g.nt {
                (field.at(i, n) - field.at(i, n - 1)) / dt
            } else {
                (field.at(i, n + 1) - field.at(i, n - 1)) / (2.0 * dt)
            };
            out.set(i, n, v);
        }
    }
    out
}

/// Cumulative trapezoid of one row, starting from zero at x = 0.
pub fn cumulative_x(row: &[f64], h: f64) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    for i in 1..row.len() {
        out[i] = out[i - 1] + 0.5 * h * (row[i - 1] + row[i]);
    }
    out
}

/// Trapezoid integral of a row from 0 to `x` (partial cells interpolated).
pub fn integrate_x(row: &[f64], h: f64, x: f64) -> f64 {
    let nx = row.len() - 1;
    let x = x.clamp(0.0, 1.0);
    let full = ((x / h).floor() as usize).min(nx);
    let mut acc = 0.0;
    for i in 0..full {
        acc += 0.5 * h * (row[i] + row[i + 1]);
    }
    let rem = x - full as f64 * h;
    if full < nx && rem > 0.0 {
        let end = row[full] + (row[full + 1] - row[full]) * rem / h;
        acc += 0.5 * rem * (row[full] + end);
    }
    acc
}

/// Cell-centred boolean mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMask {
    pub nx: usize,
    pub nt: usize,
    pub cells: Vec<bool>,
}

impl CellMask {
    pub fn empty(grid: &Grid) -> CellMask {
        CellMask { nx: grid.nx, nt: grid.nt, cells: vec![false; grid.cells()] }
    }

    #[inline]
    pub fn get(&self, i: usize, n: usize) -> bool {
        self.cells[n * self.nx + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, n: usize, v: bool) {
        self.cells[n * self.nx + i] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|c| *c)
    }

    pub fn and(&self, other: &CellMask) -> CellMask {
        let cells = self.cells.iter().zip(&other.cells).map(|(a, b)| *a && *b).collect();
        CellMask { nx: self.nx, nt: self.nt, cells }
    }

    pub fn or(&self, other: &CellMask) -> CellMask {
        let cells = self.cells.iter().zip(&other.cells).map(|(a, b)| *a || *b).collect();
        CellMask { nx: self.nx, nt: self.nt, cells }
    }

    pub fn minus(&self, other: &CellMask) -> CellMask {
        let cells = self.cells.iter().zip(&other.cells).map(|(a, b)| *a && !*b).collect();
        CellMask { nx: self.nx, nt: self.nt, cells }
    }

    /// Run-length encoding: alternating run lengths starting with `false`.
    pub fn rle(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = false;
        let mut len = 0;
        for &c in &self.cells {
            if c == cur {
                len += 1;
            } else {
                out.push(len);
                cur = c;
                len = 1;
            }
        }
        out.push(len);
        out
    }

    pub fn from_rle(nx: usize, nt: usize, runs: &[usize]) -> Result<CellMask, GridError> {
        let mut cells = Vec::with_capacity(nx * nt);
        let mut cur = false;
        for &r in runs {
            cells.extend(std::iter::repeat_n(cur, r));
            cur = !cur;
        }
        if cells.len() != nx * nt {
            return Err(GridError::Malformed("mask run lengths do not cover the grid".into()));
        }
        Ok(CellMask { nx, nt, cells })
    }

    /// Each coarse cell becomes an `fx` by `ft` block.
    pub fn refined(&self, fx: usize, ft: usize) -> CellMask {
        let (nx, nt) = (self.nx * fx, self.nt * ft);
        let mut cells = vec![false; nx * nt];
        for n in 0..nt {
            for i in 0..nx {
                cells[n * nx + i] = self.get(i / fx, n / ft);
            }
        }
        CellMask { nx, nt, cells }
    }
}

/// Sum of cell averages times cell area over the masked cells.
pub fn integrate_xt(field: &Field, mask: &CellMask) -> f64 {
    let g = field.grid;
    let mut acc = 0.0;
    for n in 0..g.nt {
        for i in 0..g.nx {
            if mask.get(i, n) {
                acc += field.cell_mean(i, n);
            }
        }
    }
    acc * g.cell_area()
}

/// Bilinear interpolation onto a grid refined by `(fx, ft)`; coarse nodes
/// are reproduced exactly.
pub fn refine(grid: &Grid, field: &Field, fx: usize, ft: usize) -> Result<(Grid, Field), GridError> {
    if field.grid != *grid {
        return Err(GridError::ShapeMismatch);
    }
    let fine = grid.refined(fx, ft)?;
    let mut out = Field::zeros(&fine, &field.name);
    for n in 0..=fine.nt {
        let (nc, rn) = (n / ft, n % ft);
        let wt = rn as f64 / ft as f64;
        for i in 0..=fine.nx {
            let (ic, ri) = (i / fx, i % fx);
            let wx = ri as f64 / fx as f64;
            let v00 = field.at(ic, nc);
            let v = if ri == 0 && rn == 0 {
                v00
            } else {
                let v10 = if ri > 0 { field.at(ic + 1, nc) } else { v00 };
                let v01 = if rn > 0 { field.at(ic, nc + 1) } else { v00 };
                let v11 = if ri > 0 && rn > 0 { field.at(ic + 1, nc + 1) } else if ri > 0 { v10 } else { v01 };
                (1.0 - wt) * ((1.0 - wx) * v00 + wx * v10) + wt * ((1.0 - wx) * v01 + wx * v11)
            };
            out.set(i, n, v);
        }
    }
    Ok((fine, out))
}

/// Injection back onto every `(fx, ft)`-th node.
pub fn restrict(fine: &Field, fx: usize, ft: usize) -> Result<Field, GridError> {
    let g = fine.grid;
    if g.nx % fx != 0 || g.nt % ft != 0 {
        return Err(GridError::ShapeMismatch);
    }
    let coarse = Grid { nx: g.nx / fx, nt: g.nt / ft, t_final: g.t_final, level: g.level.saturating_sub(1) };
    let mut out = Field::zeros(&coarse, &fine.name);
    for n in 0..=coarse.nt {
        for i in 0..=coarse.nx {
            out.set(i, n, fine.at(i * fx, n * ft));
        }
    }
    Ok(out)
}

/// CSV with header `x,t,value`, one node per line, row-major in time.
pub fn to_csv(field: &Field) -> String {
    let g = field.grid;
    let mut s = String::with_capacity(g.nodes() * 40);
    s.push_str("x,t,value\n");
    for n in 0..=g.nt {
        let t = g.t(n);
        for i in 0..=g.nx {
            let _ = writeln!(s, "{},{},{}", g.x(i), t, field.at(i, n));
        }
    }
    s
}

pub fn from_csv(text: &str, grid: &Grid, name: &str) -> Result<Field, GridError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "x,t,value" => {}
        _ => return Err(GridError::Malformed("missing header x,t,value".into())),
    }
    let mut values = Vec::with_capacity(grid.nodes());
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = line
            .rsplit(',')
            .next()
            .and_then(|c| c.trim().parse::<f64>().ok())
            .ok_or_else(|| GridError::Malformed(format!("bad value on data line {}", k + 1)))?;
        values.push(v);
    }
    if values.len() != grid.nodes() {
        return Err(GridError::Malformed(format!(
            "expected {} nodes, found {}",
            grid.nodes(),
            values.len()
        )));
    }
    let f = Field { name: name.to_string(), grid: *grid, values };
    f.check_finite()?;
    Ok(f)
}

/// JSON block: grid descriptor plus the row-major value array.
pub fn to_json(field: &Field) -> serde_json::Value {
    serde_json::json!({
        "name": field.name,
        "grid": field.grid,
        "layout": "row-major in t, nodes i = 0..=nx within a row",
        "values": field.values,
    })
}
