//! Scale-flow form of the density equation and its stationary limit.
//!
//! With `beta = t D` the drift-only density equation reads
//! `beta . grad P + t dP/dt + (div beta) P = 0`. Once the density stops
//! changing, `div(P G) = 0` remains and is solved along characteristics
//! `dw/ds = G`, on which `P = P0 exp(-int div G ds)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::fokker_planck::DriftField;
use crate::grid::{divergence, gradient, sq, Density, Grid2D};
use crate::{Error, Result};

/// Default bound on the per-epoch L1 change of the density.
pub const DEFAULT_TERMINAL_THRESHOLD: f64 = 1e-3;

/// Mass deviation above which an epoch is flagged.
pub const MASS_TOLERANCE: f64 = 1e-6;

/// Below this speed a characteristic is considered stuck.
pub const STAGNATION_SPEED: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct BetaField {
    grid: Grid2D,
    vectors: Vec<[f64; 2]>,
    pub time: f64,
}

impl BetaField {
    pub fn new(grid: Grid2D, vectors: Vec<[f64; 2]>, time: f64) -> Result<Self> {
        if vectors.len() != grid.len() {
            return Err(Error::invalid("beta field does not match the grid"));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("beta field must be finite"));
        }
        Ok(Self { grid, vectors, time })
    }

    pub fn from_fn(grid: Grid2D, time: f64, f: impl Fn(f64, f64) -> [f64; 2]) -> Result<Self> {
        let mut vectors = Vec::with_capacity(grid.len());
        for i in 0..grid.nx() {
            for j in 0..grid.ny() {
                let [x, y] = grid.center(i, j);
                vectors.push(f(x, y));
            }
        }
        Self::new(grid, vectors, time)
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn vectors(&self) -> &[[f64; 2]] {
        &self.vectors
    }

    pub fn divergence(&self) -> Vec<f64> {
        divergence(&self.grid, &self.vectors)
    }
}

pub fn beta_from_drift(d: &DriftField, t: f64) -> Result<BetaField> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("training time must be positive, got {t}")));
    }
    let vectors = d.vectors().iter().map(|v| [t * v[0], t * v[1]]).collect();
    BetaField::new(*d.grid(), vectors, t)
}

/// Per-cell residual with its integrated L1 norm and max norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub cells: Vec<f64>,
    pub l1: f64,
    pub max: f64,
}

impl Residual {
    fn from_cells(grid: &Grid2D, cells: Vec<f64>) -> Self {
        let l1 = cells.iter().map(|r| r.abs()).sum::<f64>() * grid.cell_area();
        let max = cells.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        Self { cells, l1, max }
    }
}

/// `beta . grad P + t (P_next - P) / dt + (div beta) P`, evaluated at `p`.
/// The time step is taken from the densities' time stamps.
pub fn cs_residual(p: &Density, p_next: &Density, beta: &BetaField, t: f64) -> Result<Residual> {
    let grid = p.grid();
    grid.ensure_same(p_next.grid())?;
    grid.ensure_same(beta.grid())?;
    let dt = p_next.time - p.time;
    if !(dt > 0.0) {
        return Err(Error::invalid("densities must be at increasing times"));
    }
    let grad = gradient(grid, p.values());
    let div = beta.divergence();
    let cells = (0..grid.len())
        .map(|c| {
            let b = beta.vectors[c];
            let dpdt = (p_next.values()[c] - p.values()[c]) / dt;
            b[0] * grad[c][0] + b[1] * grad[c][1] + t * dpdt + div[c] * p.values()[c]
        })
        .collect();
    Ok(Residual::from_cells(grid, cells))
}

/// Conservative divergence of `P G`. Interior faces carry the mean of the
/// two adjacent cell fluxes; wall faces are extrapolated linearly from the
/// two nearest cells.
pub fn stationary_residual(p: &Density, g: &BetaField) -> Result<Residual> {
    let grid = p.grid();
    grid.ensure_same(g.grid())?;
    let (nx, ny) = (grid.nx(), grid.ny());
    let flux: Vec<[f64; 2]> = p
        .values()
        .iter()
        .zip(&g.vectors)
        .map(|(pv, gv)| [pv * gv[0], pv * gv[1]])
        .collect();
    let fx = |i: usize, j: usize| flux[i * ny + j][0];
    let fy = |i: usize, j: usize| flux[i * ny + j][1];
    // Face k lies between cells k-1 and k.
    let face = |k: usize, n: usize, f: &dyn Fn(usize) -> f64| {
        if k == 0 {
            1.5 * f(0) - 0.5 * f(1)
        } else if k == n {
            1.5 * f(n - 1) - 0.5 * f(n - 2)
        } else {
            0.5 * (f(k - 1) + f(k))
        }
    };
    let mut cells = vec![0.0; grid.len()];
    for i in 0..nx {
        for j in 0..ny {
            let col = |k: usize| fx(k, j);
            let row = |k: usize| fy(i, k);
            let dxf = face(i + 1, nx, &col) - face(i, nx, &col);
            let dyf = face(j + 1, ny, &row) - face(j, ny, &row);
            cells[i * ny + j] = dxf / grid.dx() + dyf / grid.dy();
        }
    }
    Ok(Residual::from_cells(grid, cells))
}

/// One sample along a characteristic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    /// Flow parameter with `dw/ds = G`.
    pub s: f64,
    pub w: [f64; 2],
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub points: Vec<CurvePoint>,
    /// The curve left the grid before the requested number of steps.
    pub exited: bool,
}

/// Integrates `dw/ds = G` in fixed arc-length steps with classic RK4.
/// The state is `(w, s, I)` with `I = int div G ds`.
struct Tracer<'a> {
    grid: &'a Grid2D,
    g: &'a [[f64; 2]],
    div: Vec<f64>,
    /// +1 follows `G`, -1 runs against it.
    direction: f64,
    h: f64,
}

impl Tracer<'_> {
    fn rhs(&self, w: [f64; 2]) -> Result<[f64; 4]> {
        let v = self.grid.interpolate_vec(self.g, w);
        let speed = libm::sqrt(sq(v[0]) + sq(v[1]));
        if !(speed >= STAGNATION_SPEED) {
            return Err(Error::Stagnation { x: w[0], y: w[1], steps: 0 });
        }
        let d = self.grid.interpolate(&self.div, w);
        Ok([self.direction * v[0] / speed, self.direction * v[1] / speed, 1.0 / speed, d / speed])
    }

    fn rk4(&self, y: [f64; 4], h: f64) -> Result<[f64; 4]> {
        let add = |y: [f64; 4], k: [f64; 4], c: f64| [y[0] + c * k[0], y[1] + c * k[1], y[2] + c * k[2], y[3] + c * k[3]];
        let k1 = self.rhs([y[0], y[1]])?;
        let k2 = self.rhs({
            let t = add(y, k1, h / 2.0);
            [t[0], t[1]]
        })?;
        let k3 = self.rhs({
            let t = add(y, k2, h / 2.0);
            [t[0], t[1]]
        })?;
        let k4 = self.rhs({
            let t = add(y, k3, h);
            [t[0], t[1]]
        })?;
        let mut out = y;
        for c in 0..4 {
            out[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        Ok(out)
    }

    /// Fraction of the segment `a -> b` that stays inside the grid.
    fn inside_fraction(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let g = self.grid;
        let mut lam: f64 = 1.0;
        for (lo, hi, p, q) in [(g.x_min(), g.x_max(), a[0], b[0]), (g.y_min(), g.y_max(), a[1], b[1])] {
            if q > hi {
                lam = lam.min((hi - p) / (q - p));
            }
            if q < lo {
                lam = lam.min((lo - p) / (q - p));
            }
        }
        lam.clamp(0.0, 1.0)
    }

    /// Runs up to `steps` steps from `start`, calling `visit` on every state
    /// after the first. Returns whether the curve reached the grid boundary.
    fn trace(&self, start: [f64; 2], steps: usize, mut visit: impl FnMut([f64; 4])) -> Result<bool> {
        let mut y = [start[0], start[1], 0.0, 0.0];
        for k in 0..steps {
            let mut next = self.rk4(y, self.h).map_err(|e| stamp(e, k))?;
            let lam = self.inside_fraction([y[0], y[1]], [next[0], next[1]]);
            if lam < 1.0 {
                next = if lam * self.h > 1e-12 * self.h.max(1.0) {
                    self.rk4(y, lam * self.h).map_err(|e| stamp(e, k))?
                } else {
                    y
                };
                next[0] = next[0].clamp(self.grid.x_min(), self.grid.x_max());
                next[1] = next[1].clamp(self.grid.y_min(), self.grid.y_max());
                visit(next);
                return Ok(true);
            }
            y = next;
            visit(y);
        }
        Ok(false)
    }
}

fn stamp(e: Error, steps: usize) -> Error {
    match e {
        Error::Stagnation { x, y, .. } => Error::Stagnation { x, y, steps },
        other => other,
    }
}

/// Arc-length step used for characteristics on `grid`.
pub fn arc_step(grid: &Grid2D) -> f64 {
    grid.dx().min(grid.dy()) / 4.0
}

/// Follows `dw/ds = G` from each seed for `arc_steps` steps and returns the
/// density carried along each curve, starting from `p0[k]` at seed `k`.
pub fn characteristic_solution(
    g: &BetaField,
    seeds: &[[f64; 2]],
    p0: &[f64],
    arc_steps: usize,
) -> Result<Vec<Curve>> {
    if seeds.len() != p0.len() {
        return Err(Error::invalid("one initial density value per seed is required"));
    }
    let tracer = Tracer { grid: &g.grid, g: &g.vectors, div: g.divergence(), direction: 1.0, h: arc_step(&g.grid) };
    seeds
        .iter()
        .zip(p0)
        .map(|(&seed, &p)| {
            if !g.grid.contains(seed) {
                return Err(Error::invalid(format!("seed {seed:?} lies outside the grid")));
            }
            let mut points = vec![CurvePoint { s: 0.0, w: seed, p }];
            let exited = tracer.trace(seed, arc_steps, |y| {
                points.push(CurvePoint { s: y[2], w: [y[0], y[1]], p: p * libm::exp(-y[3]) });
            })?;
            if exited {
                log::debug!("characteristic from {seed:?} left the grid after {} points", points.len());
            }
            Ok(Curve { points, exited })
        })
        .collect()
}

/// Stationary density fixed by its values on the inflow boundary: every cell
/// centre is traced back against `G` to the boundary point `b` and gets
/// `inflow(b) exp(-int div G ds)`.
pub fn stationary_from_inflow(g: &BetaField, inflow: impl Fn([f64; 2]) -> f64) -> Result<Vec<f64>> {
    let grid = &g.grid;
    let tracer = Tracer { grid, g: &g.vectors, div: g.divergence(), direction: -1.0, h: arc_step(grid) };
    // Generous cap: several times the longest monotone path across the grid.
    let cap = 16 * (grid.nx() + grid.ny()) * 4;
    let mut out = Vec::with_capacity(grid.len());
    for i in 0..grid.nx() {
        for j in 0..grid.ny() {
            let mut last = [0.0; 4];
            let start = grid.center(i, j);
            if !tracer.trace(start, cap, |y| last = y)? {
                return Err(Error::invalid(format!("characteristic through {start:?} never reaches the boundary")));
            }
            out.push(inflow([last[0], last[1]]) * libm::exp(-last[3]));
        }
    }
    Ok(out)
}

/// Least-squares line through `(time, ln residual)` and where it crosses
/// the threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrapolation {
    pub slope: f64,
    pub intercept: f64,
    /// Absent when the fit does not decrease.
    pub crossing: Option<f64>,
}

pub fn extrapolate_crossing(times: &[f64], residuals: &[f64], threshold: f64) -> Result<Extrapolation> {
    if times.len() != residuals.len() {
        return Err(Error::invalid("times and residuals differ in length"));
    }
    if !(threshold > 0.0) {
        return Err(Error::invalid("threshold must be positive"));
    }
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(residuals)
        .filter(|(_, r)| **r > 0.0)
        .map(|(t, r)| (*t, libm::log(*r)))
        .collect();
    if pts.len() < 2 {
        return Err(Error::degenerate("need at least two positive residuals to fit"));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt = pts.iter().map(|p| sq(p.0 - mt)).sum::<f64>();
    if stt == 0.0 {
        return Err(Error::degenerate("residual times are all equal"));
    }
    let mut slope = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum::<f64>() / stt;
    // A flat series can come out a few ulps either side of zero.
    if slope.abs() <= 1e-12 * my.abs().max(1.0) {
        slope = 0.0;
    }
    let intercept = my - slope * mt;
    let crossing = (slope < 0.0).then(|| (libm::log(threshold) - intercept) / slope);
    Ok(Extrapolation { slope, intercept, crossing })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalCondition {
    /// `dP/dt` vanished.
    Stationary,
    /// `t dP/dt` vanished.
    ScaleInvariant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalReport {
    pub threshold: f64,
    /// Times of the densities the residuals start from.
    pub times: Vec<f64>,
    /// L1 norm of `dP/dt` between consecutive densities.
    pub dp_dt: Vec<f64>,
    /// The same scaled by the later time, `t dP/dt`.
    pub t_dp_dt: Vec<f64>,
    /// History index at which `dP/dt` stays below threshold for two epochs.
    pub stationary_at: Option<usize>,
    pub scale_invariant_at: Option<usize>,
    pub terminal: Option<usize>,
    pub triggered_by: Option<TerminalCondition>,
    pub extrapolation: Option<Extrapolation>,
}

fn first_quiet(res: &[f64], threshold: f64) -> Option<usize> {
    res.windows(2).position(|w| w[0] < threshold && w[1] < threshold)
}

/// Residuals of both terminal conditions over a density history and the
/// first index from which one of them holds for two consecutive epochs.
pub fn terminal_detect(history: &[Density], threshold: f64) -> Result<TerminalReport> {
    if history.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 densities, got {}", history.len())));
    }
    if !(threshold > 0.0) {
        return Err(Error::invalid("threshold must be positive"));
    }
    let mut times = Vec::new();
    let mut dp_dt = Vec::new();
    let mut t_dp_dt = Vec::new();
    for w in history.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        a.grid().ensure_same(b.grid())?;
        let dt = b.time - a.time;
        if !(dt > 0.0) {
            return Err(Error::invalid("density history must be ordered in time"));
        }
        let l1 = a.values().iter().zip(b.values()).map(|(x, y)| (y - x).abs()).sum::<f64>() * a.grid().cell_area() / dt;
        times.push(a.time);
        dp_dt.push(l1);
        t_dp_dt.push(b.time.abs() * l1);
    }
    let stationary_at = first_quiet(&dp_dt, threshold);
    let scale_invariant_at = first_quiet(&t_dp_dt, threshold);
    let (terminal, triggered_by) = match (stationary_at, scale_invariant_at) {
        (Some(a), Some(b)) if b < a => (Some(b), Some(TerminalCondition::ScaleInvariant)),
        (Some(a), _) => (Some(a), Some(TerminalCondition::Stationary)),
        (None, Some(b)) => (Some(b), Some(TerminalCondition::ScaleInvariant)),
        (None, None) => (None, None),
    };
    let extrapolation = match extrapolate_crossing(&times, &dp_dt, threshold) {
        Ok(e) => Some(e),
        Err(Error::DegenerateInput(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(TerminalReport {
        threshold,
        times,
        dp_dt,
        t_dp_dt,
        stationary_at,
        scale_invariant_at,
        terminal,
        triggered_by,
        extrapolation,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MassAudit {
    pub masses: Vec<f64>,
    pub max_deviation: f64,
    /// Indices whose mass is off by more than [`MASS_TOLERANCE`].
    pub flagged: Vec<usize>,
}

pub fn mass_audit(history: &[Density]) -> MassAudit {
    let masses: Vec<f64> = history.iter().map(Density::mass).collect();
    let max_deviation = masses.iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
    let flagged = masses
        .iter()
        .enumerate()
        .filter(|(_, m)| (*m - 1.0).abs() > MASS_TOLERANCE)
        .map(|(k, _)| k)
        .collect();
    MassAudit { masses, max_deviation, flagged }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fokker_planck::{fp_step, SolverConfig};
    use core::f64::consts::PI;

    fn grid(n: usize) -> Grid2D {
        Grid2D::square(-2.0, 2.0, n).unwrap()
    }

    #[test]
    fn beta_is_time_scaled_drift() {
        let g = grid(16);
        let d = DriftField::from_fn(g, |x, y| [x - y, 0.5 * x * y]).unwrap();
        assert_eq!(beta_from_drift(&d, 1.0).unwrap().vectors(), d.vectors());
        let b = beta_from_drift(&d, 2.5).unwrap();
        for (u, v) in b.vectors().iter().zip(d.vectors()) {
            assert_eq!(*u, [2.5 * v[0], 2.5 * v[1]]);
            assert_eq!([u[0] / 2.5, u[1] / 2.5], *v);
        }
        let z = beta_from_drift(&DriftField::zero(g), 7.0).unwrap();
        assert!(z.vectors().iter().all(|v| *v == [0.0, 0.0]));
        assert!(matches!(beta_from_drift(&d, 0.0), Err(Error::InvalidInput(_))));
        assert!(matches!(beta_from_drift(&d, -1.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn static_density_without_flow_has_zero_residual() {
        let g = grid(16);
        let p = Density::gaussian(g, [0.1, 0.0], [0.4, 0.6]).unwrap();
        let b = BetaField::new(g, vec![[0.0; 2]; g.len()], 1.0).unwrap();
        let r = cs_residual(&p, &p.clone().with_time(1.0), &b, 1.0).unwrap();
        assert_eq!(r.l1, 0.0);
        assert_eq!(r.max, 0.0);
        assert!(cs_residual(&p, &p, &b, 1.0).is_err());
    }

    #[test]
    fn unrelated_densities_leave_a_large_residual() {
        let g = grid(32);
        let p = Density::gaussian(g, [-0.5, 0.3], [0.3, 0.3]).unwrap();
        let q = Density::gaussian(g, [0.7, -0.4], [0.2, 0.5]).unwrap().with_time(0.01);
        let b = BetaField::from_fn(g, 1.0, |x, y| [1.0 + 0.2 * y, 0.3 * x]).unwrap();
        assert!(cs_residual(&p, &q, &b, 1.0).unwrap().l1 > 10.0);
    }

    fn cs_after_one_step(n: usize, dt: f64) -> f64 {
        let g = grid(n);
        let t = 1.5;
        let p = Density::gaussian(g, [-0.3, 0.2], [0.3, 0.25]).unwrap().with_time(t);
        let beta = BetaField::from_fn(g, t, |x, y| [0.6 + 0.2 * (y * PI / 4.0).sin(), 0.3 * (x * PI / 4.0).cos()]).unwrap();
        let d = DriftField::new(g, beta.vectors().iter().map(|v| [v[0] / t, v[1] / t]).collect(), vec![[0.0; 2]; g.len()])
            .unwrap();
        let cfg = SolverConfig::new((1.0 / dt).round() as u32, 0.9).unwrap();
        let (next, _) = fp_step(&p, &d, &cfg).unwrap();
        cs_residual(&p, &next, &beta, t).unwrap().l1
    }

    #[test]
    fn cs_residual_shrinks_with_joint_refinement() {
        let coarse = cs_after_one_step(32, 1.0 / 100.0);
        let fine = cs_after_one_step(64, 1.0 / 200.0);
        let order = libm::log2(coarse / fine);
        assert!(order > 0.9, "order {order} ({coarse} -> {fine})");
    }

    #[test]
    fn stationary_residual_basics() {
        let g = grid(32);
        let p = Density::gaussian(g, [0.0, 0.0], [0.5, 0.5]).unwrap();
        let zero = BetaField::new(g, vec![[0.0; 2]; g.len()], 1.0).unwrap();
        assert_eq!(stationary_residual(&p, &zero).unwrap().l1, 0.0);

        // 1D field with P = c / g: the flux P g is constant.
        let gf = |x: f64| 0.5 + 0.3 * (x * PI / 4.0).sin();
        let b = BetaField::from_fn(g, 1.0, |x, _| [gf(x), 0.0]).unwrap();
        let vals: Vec<f64> = (0..g.len()).map(|c| 1.0 / gf(g.center(c / 32, c % 32)[0])).collect();
        let p = Density::new(g, vals, 0.0).unwrap();
        assert!(stationary_residual(&p, &b).unwrap().max < 1e-12);
    }

    #[test]
    fn rotation_keeps_density_constant() {
        let g = grid(64);
        let b = BetaField::from_fn(g, 1.0, |x, y| [-y, x]).unwrap();
        let curves = characteristic_solution(&b, &[[1.0, 0.0], [0.0, -0.5]], &[0.3, 2.0], 400).unwrap();
        for (c, p0) in curves.iter().zip([0.3, 2.0]) {
            assert!(!c.exited);
            assert_eq!(c.points.len(), 401);
            assert!(c.points.iter().all(|pt| (pt.p - p0).abs() < 1e-9 * p0));
        }
        // A quarter turn on the unit circle takes s = pi / 2.
        let r = curves[0].points.iter().map(|pt| (pt.w[0].hypot(pt.w[1]) - 1.0).abs()).fold(0.0, f64::max);
        assert!(r < 1e-6, "radius drift {r}");
    }

    #[test]
    fn radial_field_decays_exponentially() {
        let g = grid(64);
        let b = BetaField::from_fn(g, 1.0, |x, y| [x, y]).unwrap();
        let curves = characteristic_solution(&b, &[[0.3, 0.1], [-0.05, -0.2]], &[1.0, 0.5], 100_000).unwrap();
        for (c, p0) in curves.iter().zip([1.0, 0.5]) {
            assert!(c.exited);
            let last = c.points.last().unwrap();
            assert!(last.w[0].abs().max(last.w[1].abs()) > 2.0 - 1e-9);
            for pt in &c.points {
                let exact = p0 * (-2.0 * pt.s).exp();
                assert!((pt.p - exact).abs() < 1e-6 * p0, "{} vs {exact}", pt.p);
                let w0 = c.points[0].w;
                assert!((pt.w[0] - w0[0] * pt.s.exp()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn stagnation_and_bad_seeds() {
        let g = grid(16);
        let b = BetaField::new(g, vec![[0.0; 2]; g.len()], 1.0).unwrap();
        assert!(matches!(characteristic_solution(&b, &[[0.0, 0.0]], &[1.0], 10), Err(Error::Stagnation { .. })));
        assert!(characteristic_solution(&b, &[[5.0, 0.0]], &[1.0], 10).is_err());
        assert!(characteristic_solution(&b, &[[0.0, 0.0]], &[], 10).is_err());
    }

    #[test]
    fn inflow_solution_matches_one_dimensional_closed_form() {
        let g = grid(64);
        let gf = |x: f64| 0.2 + 0.15 * x + 0.1 * x * x;
        let b = BetaField::from_fn(g, 1.0, |x, _| [gf(x), 0.0]).unwrap();
        let p = stationary_from_inflow(&b, |w| 1.0 / gf(w[0])).unwrap();
        for (c, v) in p.iter().enumerate() {
            let x = g.center(c / 64, c % 64)[0];
            let exact = 1.0 / gf(x);
            assert!((v - exact).abs() < 1e-2 * exact, "x = {x}: {v} vs {exact}");
        }
    }

    #[test]
    fn inflow_solution_is_stationary() {
        let g = grid(64);
        // Tangential at the top and bottom walls, so all data enters on the left.
        let b = BetaField::from_fn(g, 1.0, |x, y| {
            [1.0 + 0.3 * (y * 0.8).sin(), 0.3 * (y * PI / 4.0).cos() * (x * 0.7).cos()]
        })
        .unwrap();
        let vals = stationary_from_inflow(&b, |w| (-0.5 * w[1] * w[1]).exp()).unwrap();
        let mass = vals.iter().sum::<f64>() * g.cell_area();
        let p = Density::new(g, vals.iter().map(|v| v / mass).collect(), 0.0).unwrap();
        let r = stationary_residual(&p, &b).unwrap();
        assert!(r.l1 < 1e-3, "{}", r.l1);
    }

    fn history(vals: &[f64]) -> Vec<Density> {
        let g = grid(8);
        let base = Density::gaussian(g, [0.0, 0.0], [0.5, 0.5]).unwrap();
        let other = Density::gaussian(g, [0.4, 0.0], [0.5, 0.5]).unwrap();
        vals.iter()
            .enumerate()
            .map(|(k, w)| {
                let v = base.values().iter().zip(other.values()).map(|(a, b)| (1.0 - w) * a + w * b).collect();
                Density::new(g, v, k as f64).unwrap()
            })
            .collect()
    }

    #[test]
    fn terminal_detects_frozen_history() {
        let h = history(&[1.0, 0.5, 0.2, 0.2, 0.2, 0.2]);
        let r = terminal_detect(&h, 1e-3).unwrap();
        assert_eq!(r.terminal, Some(2));
        assert_eq!(r.triggered_by, Some(TerminalCondition::Stationary));
        assert!(r.dp_dt.iter().all(|v| *v >= 0.0));
        assert!(terminal_detect(&h[..2], 1e-3).is_err());
    }

    #[test]
    fn oscillating_history_never_terminates() {
        let h = history(&[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let r = terminal_detect(&h, 1e-3).unwrap();
        assert_eq!(r.terminal, None);
        let e = r.extrapolation.unwrap();
        assert!(e.slope >= 0.0 && e.crossing.is_none());
    }

    #[test]
    fn exponential_residuals_extrapolate_exactly() {
        let tau = 3.0;
        let times: Vec<f64> = (1..=8).map(f64::from).collect();
        let res: Vec<f64> = times.iter().map(|t| (-t / tau).exp()).collect();
        let e = extrapolate_crossing(&times, &res, 1e-3).unwrap();
        let expected = tau * (1e3f64).ln();
        assert!((e.crossing.unwrap() - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn mass_audit_flags_scaled_density() {
        let g = grid(16);
        let p = Density::gaussian(g, [0.0, 0.0], [0.5, 0.5]).unwrap();
        let doubled = Density::new(g, p.values().iter().map(|v| 2.0 * v).collect(), 1.0).unwrap();
        let a = mass_audit(&[p.clone(), doubled, p]);
        assert_eq!(a.flagged, vec![1]);
        assert!((a.max_deviation - 1.0).abs() < 1e-9);
        assert!(mass_audit(&[Density::uniform(g)]).flagged.is_empty());
    }
}
