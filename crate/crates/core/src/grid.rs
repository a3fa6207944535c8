//! Cell-centred 2D grids, densities and potentials over them, Gaussian KDE
//! from point clouds, and the grid-level comparison metrics.
//!
//! Values are stored row-major by the x index: cell `(i, j)` lives at
//! `i * ny + j`, with `i` along `x1` and `j` along `x2`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Smallest number of cells allowed along either axis.
pub const MIN_CELLS: usize = 8;

/// Default per-side padding applied when a grid is fitted around data.
pub const DEFAULT_PAD_FRACTION: f64 = 0.1;

/// Default resolution along each axis.
pub const DEFAULT_RESOLUTION: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2D {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    nx: usize,
    ny: usize,
}

impl Grid2D {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, nx: usize, ny: usize) -> Result<Self> {
        if ![x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("grid bounds must be finite"));
        }
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::invalid(format!(
                "empty grid extent [{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        if nx < MIN_CELLS || ny < MIN_CELLS {
            return Err(Error::invalid(format!(
                "grid needs at least {MIN_CELLS} cells per axis, got {nx}x{ny}"
            )));
        }
        Ok(Self { x_min, x_max, y_min, y_max, nx, ny })
    }

    pub fn square(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(lo, hi, lo, hi, n, n)
    }

    /// Bounding box of `points`, padded by `pad_fraction` of the span on each side.
    pub fn fitting(points: &[[f64; 2]], pad_fraction: f64, nx: usize, ny: usize) -> Result<Self> {
        let mut bounds = Bounds::default();
        for p in points {
            bounds.include(*p);
        }
        bounds.to_grid(pad_fraction, nx, ny)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    #[inline]
    pub fn x_center(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx()
    }

    #[inline]
    pub fn y_center(&self, j: usize) -> f64 {
        self.y_min + (j as f64 + 0.5) * self.dy()
    }

    pub fn center(&self, i: usize, j: usize) -> [f64; 2] {
        [self.x_center(i), self.y_center(j)]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    /// Cell containing `p`, if it lies on the grid.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        if !self.contains(p) {
            return None;
        }
        let i = (((p[0] - self.x_min) / self.dx()) as usize).min(self.nx - 1);
        let j = (((p[1] - self.y_min) / self.dy()) as usize).min(self.ny - 1);
        Some((i, j))
    }

    pub(crate) fn ensure_same(&self, other: &Grid2D) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::invalid("fields live on different grids"))
        }
    }

    /// Bilinear interpolation of cell-centred `values` at `p`.
    ///
    /// Points between the outermost cell centres and the grid edge are
    /// linearly extrapolated from the boundary patch, so linear fields are
    /// reproduced exactly everywhere on the grid.
    pub fn interpolate(&self, values: &[f64], p: [f64; 2]) -> f64 {
        let (i0, tx) = locate(p[0], self.x_min, self.dx(), self.nx);
        let (j0, ty) = locate(p[1], self.y_min, self.dy(), self.ny);
        let v00 = values[self.index(i0, j0)];
        let v10 = values[self.index(i0 + 1, j0)];
        let v01 = values[self.index(i0, j0 + 1)];
        let v11 = values[self.index(i0 + 1, j0 + 1)];
        (1.0 - tx) * ((1.0 - ty) * v00 + ty * v01) + tx * ((1.0 - ty) * v10 + ty * v11)
    }

    /// Bilinear interpolation of a per-cell vector field.
    pub fn interpolate_vec(&self, vectors: &[[f64; 2]], p: [f64; 2]) -> [f64; 2] {
        let (i0, tx) = locate(p[0], self.x_min, self.dx(), self.nx);
        let (j0, ty) = locate(p[1], self.y_min, self.dy(), self.ny);
        let mut out = [0.0; 2];
        for (c, o) in out.iter_mut().enumerate() {
            let v00 = vectors[self.index(i0, j0)][c];
            let v10 = vectors[self.index(i0 + 1, j0)][c];
            let v01 = vectors[self.index(i0, j0 + 1)][c];
            let v11 = vectors[self.index(i0 + 1, j0 + 1)][c];
            *o = (1.0 - tx) * ((1.0 - ty) * v00 + ty * v01) + tx * ((1.0 - ty) * v10 + ty * v11);
        }
        out
    }
}

/// Lower patch index and (possibly out-of-[0,1]) fractional offset.
fn locate(x: f64, min: f64, h: f64, n: usize) -> (usize, f64) {
    let u = (x - min) / h - 0.5;
    let i0 = libm::floor(u).clamp(0.0, (n - 2) as f64) as usize;
    (i0, u - i0 as f64)
}

/// Running bounding box.
#[derive(Debug, Clone, Copy)]
pub struct Bounds {
    min: [f64; 2],
    max: [f64; 2],
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            min: [f64::INFINITY; 2],
            max: [f64::NEG_INFINITY; 2],
        }
    }
}

impl Bounds {
    pub fn include(&mut self, p: [f64; 2]) {
        for c in 0..2 {
            self.min[c] = self.min[c].min(p[c]);
            self.max[c] = self.max[c].max(p[c]);
        }
    }

    pub fn include_all(&mut self, points: &[[f64; 2]]) {
        for p in points {
            self.include(*p);
        }
    }

    pub fn to_grid(&self, pad_fraction: f64, nx: usize, ny: usize) -> Result<Grid2D> {
        if !(self.min[0].is_finite() && self.max[0].is_finite()) {
            return Err(Error::invalid("cannot fit a grid around no points"));
        }
        let mut lo = [0.0; 2];
        let mut hi = [0.0; 2];
        for c in 0..2 {
            let mut span = self.max[c] - self.min[c];
            let mid = 0.5 * (self.max[c] + self.min[c]);
            // A collapsed axis still needs a finite width.
            if span <= 0.0 {
                span = libm::fabs(mid).max(1.0) * 1e-3;
            }
            lo[c] = mid - span * (0.5 + pad_fraction);
            hi[c] = mid + span * (0.5 + pad_fraction);
        }
        Grid2D::new(lo[0], hi[0], lo[1], hi[1], nx, ny)
    }
}

/// The rows of one weight matrix (or any set of 2D samples).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud(Vec<[f64; 2]>);

impl PointCloud {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud is empty"));
        }
        if let Some(k) = points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::invalid(format!("point {k} is not finite")));
        }
        Ok(Self(points))
    }

    /// Interprets a row-major `rows x 2` buffer as points.
    pub fn from_rows(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 {
            return Err(Error::invalid("row buffer length is not a multiple of 2"));
        }
        Self::new(flat.chunks_exact(2).map(|r| [r[0], r[1]]).collect())
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.0
    }

    pub fn into_points(self) -> Vec<[f64; 2]> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> [f64; 2] {
        let n = self.0.len() as f64;
        let mut m = [0.0; 2];
        for p in &self.0 {
            m[0] += p[0];
            m[1] += p[1];
        }
        [m[0] / n, m[1] / n]
    }

    /// Per-axis sample standard deviation (n - 1 denominator).
    pub fn std_dev(&self) -> [f64; 2] {
        let n = self.0.len();
        if n < 2 {
            return [0.0; 2];
        }
        let m = self.mean();
        let mut s = [0.0; 2];
        for p in &self.0 {
            s[0] += (p[0] - m[0]) * (p[0] - m[0]);
            s[1] += (p[1] - m[1]) * (p[1] - m[1]);
        }
        [libm::sqrt(s[0] / (n - 1) as f64), libm::sqrt(s[1] / (n - 1) as f64)]
    }

    /// Scott's rule per axis in two dimensions: `h = sigma * m^(-1/6)`.
    pub fn scott_bandwidth(&self) -> Result<[f64; 2]> {
        let s = self.std_dev();
        if !(s[0] > 0.0 && s[1] > 0.0) {
            return Err(Error::degenerate(
                "Scott bandwidth needs spread along both axes",
            ));
        }
        let f = libm::pow(self.0.len() as f64, -1.0 / 6.0);
        Ok([s[0] * f, s[1] * f])
    }
}

/// How a KDE bandwidth is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Bandwidth {
    #[default]
    Scott,
    /// Scott's rule multiplied by a factor.
    ScaledScott(f64),
    Fixed([f64; 2]),
}

impl Bandwidth {
    pub fn resolve(&self, points: &PointCloud) -> Result<[f64; 2]> {
        match *self {
            Bandwidth::Scott => points.scott_bandwidth(),
            Bandwidth::ScaledScott(k) => {
                let h = points.scott_bandwidth()?;
                Ok([h[0] * k, h[1] * k])
            }
            Bandwidth::Fixed(h) => Ok(h),
        }
    }
}

/// A probability density per unit area, sampled at cell centres.
#[derive(Debug, Clone, PartialEq)]
pub struct Density {
    grid: Grid2D,
    values: Vec<f64>,
    /// Training time in epochs.
    pub time: f64,
}

impl Density {
    pub fn new(grid: Grid2D, values: Vec<f64>, time: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "expected {} cell values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(format!(
                "cell {k} has invalid density {}",
                values[k]
            )));
        }
        Ok(Self { grid, values, time })
    }

    /// Skips validation; for solver internals that maintain the invariants.
    pub(crate) fn from_parts(grid: Grid2D, values: Vec<f64>, time: f64) -> Self {
        Self { grid, values, time }
    }

    pub fn uniform(grid: Grid2D) -> Self {
        let v = 1.0 / grid.area();
        Self { grid, values: vec![v; grid.len()], time: 0.0 }
    }

    /// Axis-aligned Gaussian evaluated at cell centres, normalized on the grid.
    pub fn gaussian(grid: Grid2D, mean: [f64; 2], variance: [f64; 2]) -> Result<Self> {
        if !(variance[0] > 0.0 && variance[1] > 0.0) {
            return Err(Error::invalid("Gaussian variance must be positive"));
        }
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..grid.nx() {
            let ex = sq(grid.x_center(i) - mean[0]) / (2.0 * variance[0]);
            for j in 0..grid.ny() {
                let ey = sq(grid.y_center(j) - mean[1]) / (2.0 * variance[1]);
                values.push(libm::exp(-ex - ey));
            }
        }
        let mut d = Self::new(grid, values, 0.0)?;
        d.normalize()?;
        Ok(d)
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    /// Riemann sum over cells.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_area()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn normalize(&mut self) -> Result<()> {
        let mass = self.mass();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::degenerate("density has no mass to normalize"));
        }
        let inv = 1.0 / mass;
        for v in &mut self.values {
            *v *= inv;
        }
        Ok(())
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    /// First and second moments of the cell-centre distribution.
    pub fn moments(&self) -> ([f64; 2], [f64; 2]) {
        let g = &self.grid;
        let (mut w, mut m0, mut m1) = (0.0, 0.0, 0.0);
        for i in 0..g.nx() {
            for j in 0..g.ny() {
                let p = self.value(i, j);
                w += p;
                m0 += p * g.x_center(i);
                m1 += p * g.y_center(j);
            }
        }
        let mean = [m0 / w, m1 / w];
        let (mut v0, mut v1) = (0.0, 0.0);
        for i in 0..g.nx() {
            for j in 0..g.ny() {
                let p = self.value(i, j);
                v0 += p * sq(g.x_center(i) - mean[0]);
                v1 += p * sq(g.y_center(j) - mean[1]);
            }
        }
        (mean, [v0 / w, v1 / w])
    }
}

/// `V = -log(max(P, floor))` on a grid, in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialField {
    grid: Grid2D,
    values: Vec<f64>,
    floor: f64,
}

impl PotentialField {
    pub fn new(grid: Grid2D, values: Vec<f64>, floor: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid("potential size does not match grid"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("potential has non-finite values"));
        }
        Ok(Self { grid, values, floor })
    }

    pub(crate) fn from_parts(grid: Grid2D, values: Vec<f64>, floor: f64) -> Self {
        Self { grid, values, floor }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Density clamp used by default: 1e-12 of the uniform level on the grid.
pub fn default_floor(grid: &Grid2D) -> f64 {
    1e-12 / grid.area()
}

/// Gaussian-kernel KDE at cell centres, normalized to unit mass on the grid.
pub fn kde_estimate(points: &PointCloud, grid: &Grid2D, bandwidth: [f64; 2]) -> Result<Density> {
    kde_weighted(points, None, grid, bandwidth)
}

/// KDE with optional non-negative per-point weights.
pub fn kde_weighted(
    points: &PointCloud,
    weights: Option<&[f64]>,
    grid: &Grid2D,
    bandwidth: [f64; 2],
) -> Result<Density> {
    if !(bandwidth[0] > 0.0 && bandwidth[1] > 0.0 && bandwidth[0].is_finite() && bandwidth[1].is_finite()) {
        return Err(Error::invalid("KDE bandwidths must be positive and finite"));
    }
    if let Some(w) = weights {
        if w.len() != points.len() || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::invalid("KDE weights must match points and be non-negative"));
        }
    }
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut values = vec![0.0; grid.len()];
    let mut kx = vec![0.0; nx];
    let mut ky = vec![0.0; ny];
    // The Gaussian kernel is a product of per-axis factors, so each point
    // costs nx + ny exponentials instead of nx * ny.
    for (k, p) in points.points().iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[k]);
        if w == 0.0 {
            continue;
        }
        for (i, kxi) in kx.iter_mut().enumerate() {
            *kxi = libm::exp(-0.5 * sq((grid.x_center(i) - p[0]) / bandwidth[0]));
        }
        for (j, kyj) in ky.iter_mut().enumerate() {
            *kyj = w * libm::exp(-0.5 * sq((grid.y_center(j) - p[1]) / bandwidth[1]));
        }
        for (i, &a) in kx.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let row = &mut values[i * ny..(i + 1) * ny];
            for (v, &b) in row.iter_mut().zip(&ky) {
                *v += a * b;
            }
        }
    }
    let mut d = Density::from_parts(*grid, values, 0.0);
    d.normalize()
        .map_err(|_| Error::degenerate("all kernels vanish on the grid"))?;
    Ok(d)
}

/// `V = -log(max(P, floor))`.
pub fn potential_from_density(d: &Density, floor: f64) -> Result<PotentialField> {
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::invalid("density floor must be positive"));
    }
    let values = d.values().iter().map(|&p| -libm::log(p.max(floor))).collect();
    Ok(PotentialField::from_parts(*d.grid(), values, floor))
}

/// `P = exp(-V)`, normalized to unit mass.
pub fn density_from_potential(v: &PotentialField) -> Result<Density> {
    if v.values().iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("potential has non-finite values"));
    }
    // Shifting by the minimum only changes the normalization constant.
    let shift = v.min_value();
    let values = v.values().iter().map(|&x| libm::exp(shift - x)).collect();
    let mut d = Density::from_parts(*v.grid(), values, 0.0);
    d.normalize()?;
    Ok(d)
}

/// Gradient of a cell-centred scalar field.
///
/// Central differences in the interior and second-order one-sided
/// differences on boundary cells.
pub fn gradient(grid: &Grid2D, f: &[f64]) -> Vec<[f64; 2]> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let (dx, dy) = (grid.dx(), grid.dy());
    let at = |i: usize, j: usize| f[i * ny + j];
    let mut out = vec![[0.0; 2]; grid.len()];
    for i in 0..nx {
        for j in 0..ny {
            let gx = if i == 0 {
                (-3.0 * at(0, j) + 4.0 * at(1, j) - at(2, j)) / (2.0 * dx)
            } else if i == nx - 1 {
                (3.0 * at(i, j) - 4.0 * at(i - 1, j) + at(i - 2, j)) / (2.0 * dx)
            } else {
                (at(i + 1, j) - at(i - 1, j)) / (2.0 * dx)
            };
            let gy = if j == 0 {
                (-3.0 * at(i, 0) + 4.0 * at(i, 1) - at(i, 2)) / (2.0 * dy)
            } else if j == ny - 1 {
                (3.0 * at(i, j) - 4.0 * at(i, j - 1) + at(i, j - 2)) / (2.0 * dy)
            } else {
                (at(i, j + 1) - at(i, j - 1)) / (2.0 * dy)
            };
            out[i * ny + j] = [gx, gy];
        }
    }
    out
}

/// Divergence of a cell-centred vector field, same stencils as [`gradient`].
pub fn divergence(grid: &Grid2D, v: &[[f64; 2]]) -> Vec<f64> {
    let xs: Vec<f64> = v.iter().map(|e| e[0]).collect();
    let ys: Vec<f64> = v.iter().map(|e| e[1]).collect();
    let gx = gradient(grid, &xs);
    let gy = gradient(grid, &ys);
    gx.iter().zip(&gy).map(|(a, b)| a[0] + b[1]).collect()
}

/// Per-cell `-grad V`: the potential-descending direction.
pub fn score_field(v: &PotentialField) -> Vec<[f64; 2]> {
    gradient(v.grid(), v.values())
        .into_iter()
        .map(|g| [-g[0], -g[1]])
        .collect()
}

/// Mean squared difference over cell values.
pub fn grid_mse(a: &Density, b: &Density) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    let n = a.values().len() as f64;
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| sq(y - x))
        .sum::<f64>()
        / n)
}

/// Pearson correlation over cell values.
pub fn grid_pearson(a: &Density, b: &Density) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    pearson(a.values(), b.values())
}

pub(crate) fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    let constant = |v: &[f64]| v.iter().all(|e| *e == v[0]);
    if constant(x) || constant(y) || sxx == 0.0 || syy == 0.0 {
        return Err(Error::degenerate("Pearson correlation of a constant field"));
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

#[inline]
pub(crate) fn sq(x: f64) -> f64 {
    x * x
}
