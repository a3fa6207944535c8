//! Explicit finite-volume integration of the drift-diffusion density equation
//!
//! ```text
//! dP/dt = -div(D P) + 1/2 lap(sigma2 P)
//! ```
//!
//! and of the equivalent equation for the potential `V = -log P`.
//!
//! The density update is conservative: drift fluxes are upwinded at cell
//! faces, diffusive fluxes are centred, and faces on the grid boundary carry
//! no flux, so total mass changes only by round-off.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::grid::{gradient, Density, Grid2D, PotentialField};
use crate::{Error, Result};

/// Relative mass drift per step above which the solver rescales and warns.
pub const MASS_CORRECTION_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    /// Reflecting walls: no probability crosses the grid boundary.
    #[default]
    ZeroFlux,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub substeps_per_epoch: u32,
    pub boundary: Boundary,
    pub cfl_safety: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            substeps_per_epoch: 100,
            boundary: Boundary::ZeroFlux,
            cfl_safety: 0.9,
        }
    }
}

impl SolverConfig {
    pub fn new(substeps_per_epoch: u32, cfl_safety: f64) -> Result<Self> {
        let cfg = Self {
            substeps_per_epoch,
            boundary: Boundary::ZeroFlux,
            cfl_safety,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.substeps_per_epoch == 0 {
            return Err(Error::invalid("substeps_per_epoch must be at least 1"));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(Error::invalid("cfl_safety must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Step length in epochs.
    pub fn dt(&self) -> f64 {
        1.0 / f64::from(self.substeps_per_epoch)
    }
}

/// Drift vectors (weight units per epoch) and diagonal diffusion
/// coefficients (weight^2 per epoch) at every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftField {
    grid: Grid2D,
    vectors: Vec<[f64; 2]>,
    sigma2: Vec<[f64; 2]>,
}

impl DriftField {
    pub fn new(grid: Grid2D, vectors: Vec<[f64; 2]>, sigma2: Vec<[f64; 2]>) -> Result<Self> {
        if vectors.len() != grid.len() || sigma2.len() != grid.len() {
            return Err(Error::invalid("drift field size does not match grid"));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("drift vectors must be finite"));
        }
        if sigma2.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("diffusion coefficients must be finite and non-negative"));
        }
        Ok(Self { grid, vectors, sigma2 })
    }

    pub fn zero(grid: Grid2D) -> Self {
        Self {
            grid,
            vectors: vec![[0.0; 2]; grid.len()],
            sigma2: vec![[0.0; 2]; grid.len()],
        }
    }

    /// Same drift everywhere, no diffusion.
    pub fn uniform(grid: Grid2D, drift: [f64; 2]) -> Self {
        Self {
            grid,
            vectors: vec![drift; grid.len()],
            sigma2: vec![[0.0; 2]; grid.len()],
        }
    }

    /// Drift sampled from `f(x1, x2)` at cell centres.
    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> [f64; 2]) -> Result<Self> {
        let mut vectors = Vec::with_capacity(grid.len());
        for i in 0..grid.nx() {
            for j in 0..grid.ny() {
                vectors.push(f(grid.x_center(i), grid.y_center(j)));
            }
        }
        Self::new(grid, vectors, vec![[0.0; 2]; grid.len()])
    }

    pub fn with_sigma2(mut self, sigma2: Vec<[f64; 2]>) -> Result<Self> {
        if sigma2.len() != self.grid.len() || sigma2.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("diffusion coefficients must match the grid and be non-negative"));
        }
        self.sigma2 = sigma2;
        Ok(self)
    }

    pub fn with_uniform_sigma2(self, sigma2: f64) -> Result<Self> {
        let n = self.grid.len();
        self.with_sigma2(vec![[sigma2; 2]; n])
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn vectors(&self) -> &[[f64; 2]] {
        &self.vectors
    }

    pub fn sigma2(&self) -> &[[f64; 2]] {
        &self.sigma2
    }

    pub fn max_speed(&self) -> f64 {
        self.vectors
            .iter()
            .map(|v| libm::sqrt(v[0] * v[0] + v[1] * v[1]))
            .fold(0.0, f64::max)
    }

    pub fn max_sigma2(&self) -> f64 {
        self.sigma2.iter().flatten().copied().fold(0.0, f64::max)
    }

    /// `(1 - w) * a + w * b`, cell by cell.
    pub fn lerp(a: &DriftField, b: &DriftField, w: f64) -> Result<DriftField> {
        a.grid.ensure_same(&b.grid)?;
        let mix = |x: &[[f64; 2]], y: &[[f64; 2]]| -> Vec<[f64; 2]> {
            x.iter()
                .zip(y)
                .map(|(p, q)| [(1.0 - w) * p[0] + w * q[0], (1.0 - w) * p[1] + w * q[1]])
                .collect()
        };
        Ok(DriftField {
            grid: a.grid,
            vectors: mix(&a.vectors, &b.vectors),
            sigma2: mix(&a.sigma2, &b.sigma2),
        })
    }
}

/// How close a step is to the explicit-scheme limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stability {
    /// `dt * max|D| / min(dx, dy)`.
    pub advective_cfl: f64,
    /// `dt * 2 max(sigma2) / min(dx^2, dy^2)`.
    pub diffusive_cfl: f64,
    /// Largest per-cell outflow fraction `dt * (outflow rate)`; positivity
    /// requires it to stay at or below the safety factor.
    pub outflow_fraction: f64,
    /// Largest admissible step for this field.
    pub max_dt: f64,
}

/// Per-cell outflow rate of the discrete operator (fraction of the cell's
/// own mass leaving per unit time).
fn outflow_rates(f: &DriftField) -> impl Iterator<Item = f64> + '_ {
    let g = f.grid;
    let (nx, ny, dx, dy) = (g.nx(), g.ny(), g.dx(), g.dy());
    (0..nx).flat_map(move |i| {
        (0..ny).map(move |j| {
            let k = i * ny + j;
            let face = |a: usize, b: usize, c: usize| 0.5 * (f.vectors[a][c] + f.vectors[b][c]);
            let mut rate = 0.0;
            if i + 1 < nx {
                rate += face(k, k + ny, 0).max(0.0) / dx;
            }
            if i > 0 {
                rate += (-face(k - ny, k, 0)).max(0.0) / dx;
            }
            if j + 1 < ny {
                rate += face(k, k + 1, 1).max(0.0) / dy;
            }
            if j > 0 {
                rate += (-face(k - 1, k, 1)).max(0.0) / dy;
            }
            rate + f.sigma2[k][0] / (dx * dx) + f.sigma2[k][1] / (dy * dy)
        })
    })
}

/// Checks that a step of `dt` keeps the explicit update positive.
pub fn check_stability(f: &DriftField, dt: f64, safety: f64) -> Result<Stability> {
    let g = f.grid;
    let h = g.dx().min(g.dy());
    let max_rate = outflow_rates(f).fold(0.0, f64::max);
    let max_dt = if max_rate > 0.0 { safety / max_rate } else { f64::INFINITY };
    let report = Stability {
        advective_cfl: dt * f.max_speed() / h,
        diffusive_cfl: dt * 2.0 * f.max_sigma2() / (h * h),
        outflow_fraction: dt * max_rate,
        max_dt,
    };
    if dt > max_dt {
        let required = libm::ceil(1.0 / max_dt) as u64;
        return Err(Error::Stability { dt, max_dt, required_substeps: required });
    }
    Ok(report)
}

/// Diagnostics for one density step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub time: f64,
    /// Mass after the step minus mass before it.
    pub mass_error: f64,
    pub mass: f64,
    pub max_density: f64,
    pub stability: Stability,
    pub renormalized: bool,
}

/// One explicit step of the density equation.
pub fn fp_step(p: &Density, f: &DriftField, cfg: &SolverConfig) -> Result<(Density, StepReport)> {
    cfg.validate()?;
    p.grid().ensure_same(&f.grid)?;
    let dt = cfg.dt();
    let stability = check_stability(f, dt, cfg.cfl_safety)?;

    let g = *p.grid();
    let (nx, ny, dx, dy) = (g.nx(), g.ny(), g.dx(), g.dy());
    let pv = p.values();
    let vec = &f.vectors;
    let s2 = &f.sigma2;

    // fx[i][j]: flux through the face between cells (i-1, j) and (i, j).
    // Boundary faces keep zero flux.
    let mut fx = vec![0.0; (nx + 1) * ny];
    for i in 1..nx {
        for j in 0..ny {
            let (l, r) = ((i - 1) * ny + j, i * ny + j);
            let u = 0.5 * (vec[l][0] + vec[r][0]);
            let adv = if u > 0.0 { u * pv[l] } else { u * pv[r] };
            let dif = -0.5 * (s2[r][0] * pv[r] - s2[l][0] * pv[l]) / dx;
            fx[i * ny + j] = adv + dif;
        }
    }
    let mut fy = vec![0.0; nx * (ny + 1)];
    for i in 0..nx {
        for j in 1..ny {
            let (b, t) = (i * ny + j - 1, i * ny + j);
            let u = 0.5 * (vec[b][1] + vec[t][1]);
            let adv = if u > 0.0 { u * pv[b] } else { u * pv[t] };
            let dif = -0.5 * (s2[t][1] * pv[t] - s2[b][1] * pv[b]) / dy;
            fy[i * (ny + 1) + j] = adv + dif;
        }
    }

    let mut next = Vec::with_capacity(g.len());
    for i in 0..nx {
        for j in 0..ny {
            let k = i * ny + j;
            let div = (fx[(i + 1) * ny + j] - fx[i * ny + j]) / dx
                + (fy[i * (ny + 1) + j + 1] - fy[i * (ny + 1) + j]) / dy;
            // Positivity holds up to round-off under the stability bound.
            next.push((pv[k] - dt * div).max(0.0));
        }
    }

    let area = g.cell_area();
    let mass_before = pv.iter().sum::<f64>() * area;
    let mut mass_after = next.iter().sum::<f64>() * area;
    let mass_error = mass_after - mass_before;
    let mut renormalized = false;
    if libm::fabs(mass_error) > MASS_CORRECTION_THRESHOLD * mass_before {
        log::warn!(
            "density step at t = {:.4} lost mass {:.3e}; rescaling",
            p.time,
            mass_error
        );
        let scale = mass_before / mass_after;
        for v in &mut next {
            *v *= scale;
        }
        mass_after = mass_before;
        renormalized = true;
    }

    let out = Density::from_parts(g, next, p.time + dt);
    let report = StepReport {
        time: out.time,
        mass_error,
        mass: mass_after,
        max_density: out.max_value(),
        stability,
        renormalized,
    };
    Ok((out, report))
}

/// Supplies the drift field for each sub-step of an epoch.
pub trait DriftProvider {
    fn field_at(&self, time: f64) -> Result<DriftField>;
}

impl DriftProvider for DriftField {
    fn field_at(&self, _time: f64) -> Result<DriftField> {
        Ok(self.clone())
    }
}

/// Linear interpolation in time between two fields.
#[derive(Debug, Clone)]
pub struct LinearInTime {
    pub start: DriftField,
    pub end: DriftField,
    pub t_start: f64,
    pub t_end: f64,
}

impl DriftProvider for LinearInTime {
    fn field_at(&self, time: f64) -> Result<DriftField> {
        let span = self.t_end - self.t_start;
        let w = if span > 0.0 { ((time - self.t_start) / span).clamp(0.0, 1.0) } else { 0.0 };
        DriftField::lerp(&self.start, &self.end, w)
    }
}

/// Advances `p` by one epoch in `substeps_per_epoch` steps. Each step uses
/// the field at its left end point.
pub fn evolve_epoch(
    p: &Density,
    drift: &dyn DriftProvider,
    cfg: &SolverConfig,
) -> Result<(Density, Vec<StepReport>)> {
    cfg.validate()?;
    let t0 = p.time;
    let dt = cfg.dt();
    let mut cur = p.clone();
    let mut reports = Vec::with_capacity(cfg.substeps_per_epoch as usize);
    for k in 0..cfg.substeps_per_epoch {
        let t = t0 + f64::from(k) * dt;
        let field = drift
            .field_at(t)
            .map_err(|e| e.context(format!("drift for sub-step {k}")))?;
        let (next, report) =
            fp_step(&cur, &field, cfg).map_err(|e| e.context(format!("sub-step {k}")))?;
        cur = next;
        reports.push(report);
    }
    // Avoid accumulating round-off in the epoch counter.
    cur.time = t0 + 1.0;
    Ok((cur, reports))
}

/// One explicit step of the potential equation obtained from the density
/// equation by `V = -log P` (diagonal diffusion):
///
/// ```text
/// dV/dt = sum_i [ s_i/2 V_ii - s_i/2 V_i^2 + V_i (d_i s_i - D_i) + d_i D_i - 1/2 d_ii s_i ]
/// ```
///
/// with `s_i = sigma2_i`. Central differences throughout; the potential has
/// zero normal gradient at the walls.
pub fn kpz_step(v: &PotentialField, f: &DriftField, cfg: &SolverConfig) -> Result<PotentialField> {
    cfg.validate()?;
    v.grid().ensure_same(&f.grid)?;
    let dt = cfg.dt();
    check_stability(f, dt, cfg.cfl_safety)?;

    let g = *v.grid();
    let (nx, ny, dx, dy) = (g.nx(), g.ny(), g.dx(), g.dy());
    let vv = v.values();
    let at = |i: isize, j: isize| -> f64 {
        // Mirror ghost cells give a zero normal gradient.
        let i = i.clamp(0, nx as isize - 1) as usize;
        let j = j.clamp(0, ny as isize - 1) as usize;
        vv[i * ny + j]
    };

    let comp = |c: usize, src: &[[f64; 2]]| -> Vec<f64> { src.iter().map(|e| e[c]).collect() };
    let (dx_, dy_) = (comp(0, &f.vectors), comp(1, &f.vectors));
    let (sx, sy) = (comp(0, &f.sigma2), comp(1, &f.sigma2));
    let ddx = gradient(&g, &dx_);
    let ddy = gradient(&g, &dy_);
    let dsx = gradient(&g, &sx);
    let dsy = gradient(&g, &sy);
    let dsx_x: Vec<f64> = dsx.iter().map(|e| e[0]).collect();
    let dsy_y: Vec<f64> = dsy.iter().map(|e| e[1]).collect();
    let d2sx = gradient(&g, &dsx_x);
    let d2sy = gradient(&g, &dsy_y);

    let mut next = Vec::with_capacity(g.len());
    for i in 0..nx {
        for j in 0..ny {
            let k = i * ny + j;
            let (ii, jj) = (i as isize, j as isize);
            let c = at(ii, jj);
            let vx = (at(ii + 1, jj) - at(ii - 1, jj)) / (2.0 * dx);
            let vy = (at(ii, jj + 1) - at(ii, jj - 1)) / (2.0 * dy);
            let vxx = (at(ii + 1, jj) - 2.0 * c + at(ii - 1, jj)) / (dx * dx);
            let vyy = (at(ii, jj + 1) - 2.0 * c + at(ii, jj - 1)) / (dy * dy);
            let rhs_x = 0.5 * sx[k] * vxx - 0.5 * sx[k] * vx * vx + vx * (dsx[k][0] - dx_[k])
                + ddx[k][0]
                - 0.5 * d2sx[k][0];
            let rhs_y = 0.5 * sy[k] * vyy - 0.5 * sy[k] * vy * vy + vy * (dsy[k][1] - dy_[k])
                + ddy[k][1]
                - 0.5 * d2sy[k][1];
            next.push(c + dt * (rhs_x + rhs_y));
        }
    }
    if next.iter().any(|x| !x.is_finite()) {
        return Err(Error::degenerate("potential step produced non-finite values"));
    }
    Ok(PotentialField::from_parts(g, next, v.floor()))
}

/// Advances a potential by one epoch with the same sub-stepping as
/// [`evolve_epoch`].
pub fn evolve_potential_epoch(
    v: &PotentialField,
    t0: f64,
    drift: &dyn DriftProvider,
    cfg: &SolverConfig,
) -> Result<PotentialField> {
    let dt = cfg.dt();
    let mut cur = v.clone();
    for k in 0..cfg.substeps_per_epoch {
        let field = drift.field_at(t0 + f64::from(k) * dt)?;
        cur = kpz_step(&cur, &field, cfg).map_err(|e| e.context(format!("sub-step {k}")))?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::potential_from_density;

    fn gaussian(n: usize, var: f64) -> Density {
        Density::gaussian(Grid2D::square(-3.0, 3.0, n).unwrap(), [0.0, 0.0], [var, var]).unwrap()
    }

    #[test]
    fn no_dynamics_is_identity() {
        let p = gaussian(32, 0.5);
        let f = DriftField::zero(*p.grid());
        let (q, r) = fp_step(&p, &f, &SolverConfig::default()).unwrap();
        assert_eq!(q.values(), p.values());
        assert_eq!(r.mass_error, 0.0);
        let (q, reports) = evolve_epoch(&p, &f, &SolverConfig::default()).unwrap();
        assert_eq!(q.values(), p.values());
        assert_eq!(q.time, 1.0);
        assert_eq!(reports.len(), 100);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::new(0, 0.5).is_err());
        assert!(SolverConfig::new(10, 0.0).is_err());
        assert!(SolverConfig::new(10, 1.5).is_err());
        assert_eq!(SolverConfig::new(4, 1.0).unwrap().dt(), 0.25);
    }

    #[test]
    fn stiff_drift_trips_stability() {
        let p = gaussian(64, 0.5);
        let f = DriftField::uniform(*p.grid(), [5.0, 0.0]);
        let cfg = SolverConfig::new(1, 0.9).unwrap();
        match fp_step(&p, &f, &cfg) {
            Err(Error::Stability { required_substeps, .. }) => {
                // dx = 6/64, rate = 5/dx -> need dt <= 0.9 dx / 5
                let expected = (5.0_f64 / (0.9 * 6.0 / 64.0)).ceil() as u64;
                assert_eq!(required_substeps, expected);
            }
            other => panic!("expected stability error, got {other:?}"),
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let p = gaussian(32, 0.5);
        let f = DriftField::zero(Grid2D::square(-3.0, 3.0, 16).unwrap());
        assert!(matches!(
            fp_step(&p, &f, &SolverConfig::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn drift_translates_centroid() {
        let g = Grid2D::square(-4.0, 4.0, 128).unwrap();
        let p = Density::gaussian(g, [-1.0, 0.0], [0.3, 0.3]).unwrap();
        let c = 0.8;
        let f = DriftField::uniform(g, [c, 0.0]);
        let cfg = SolverConfig::default();
        let (q, reports) = evolve_epoch(&p, &f, &cfg).unwrap();
        let (m0, _) = p.moments();
        let (m1, _) = q.moments();
        assert!((m1[0] - m0[0] - c).abs() < g.dx(), "moved {}", m1[0] - m0[0]);
        assert!(m1[1].abs() < 1e-12);
        assert!(reports.iter().all(|r| r.mass_error.abs() < 1e-9));
        assert!((q.mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn potential_step_without_dynamics_is_identity() {
        let p = gaussian(32, 0.5);
        let v = potential_from_density(&p, 1e-14).unwrap();
        let w = kpz_step(&v, &DriftField::zero(*p.grid()), &SolverConfig::default()).unwrap();
        assert_eq!(w.values(), v.values());
    }

    #[test]
    fn constant_potential_tracks_divergence() {
        // V constant, D = (g x1, 0): dV/dt = g exactly.
        let g = Grid2D::square(-1.0, 1.0, 16).unwrap();
        let rate = 0.3;
        let v = PotentialField::new(g, vec![2.0; g.len()], 1e-12).unwrap();
        let f = DriftField::from_fn(g, |x, _| [rate * x, 0.0]).unwrap();
        let cfg = SolverConfig::new(10, 1.0).unwrap();
        let w = evolve_potential_epoch(&v, 0.0, &f, &cfg).unwrap();
        // The gradient of V stays zero, so the increment is exactly g per epoch.
        for x in w.values() {
            assert!((x - (2.0 + rate)).abs() < 1e-12);
        }
    }

    /// Smooth density on [-3, 3]^2 whose gradient vanishes on the walls.
    fn wall_compatible(n: usize) -> Density {
        use core::f64::consts::PI;
        let g = Grid2D::square(-3.0, 3.0, n).unwrap();
        let v = |x: f64, y: f64| {
            0.8 * (PI * x / 3.0).cos() + 0.5 * (PI * y / 3.0).cos()
                + 0.3 * (2.0 * PI * x / 3.0).cos() * (PI * y / 3.0).cos()
        };
        let vals = (0..g.len())
            .map(|k| {
                let [x, y] = g.center(k / n, k % n);
                (-v(x, y)).exp()
            })
            .collect();
        let mut d = Density::new(g, vals, 0.0).unwrap();
        d.normalize().unwrap();
        d
    }

    #[test]
    fn potential_and_density_agree_for_pure_diffusion() {
        let p = wall_compatible(64);
        let f = DriftField::zero(*p.grid()).with_uniform_sigma2(0.05).unwrap();
        let cfg = SolverConfig::default();
        let (q, _) = evolve_epoch(&p, &f, &cfg).unwrap();
        let v = potential_from_density(&p, 1e-14).unwrap();
        let w = evolve_potential_epoch(&v, 0.0, &f, &cfg).unwrap();
        let worst = q
            .values()
            .iter()
            .zip(w.values())
            .map(|(a, b)| (-a.ln() - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "worst {worst}");
    }
}
