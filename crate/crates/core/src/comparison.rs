//! Empirical versus theoretical bottleneck outputs.
//!
//! The same encoder outputs are pushed through the trained bottleneck
//! matrices and through matrices whose rows are drawn from the evolved
//! densities. Both output clouds are smoothed on one grid and scored.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::grid::{grid_mse, grid_pearson, kde_estimate, Bandwidth, Bounds, Density, Grid2D, PointCloud};
use crate::rng::{stream, StreamRng, JITTER, SAMPLE};
use crate::{Error, Result};

/// Allowed deviation from unit mass for a density to be sampled.
pub const SAMPLING_MASS_TOLERANCE: f64 = 1e-3;

pub const DEFAULT_ENSEMBLE: usize = 16;

fn sample_with(p: &Density, m: usize, pick: &mut StreamRng, jitter: &mut StreamRng) -> Result<Vec<[f64; 2]>> {
    if m == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let mass = p.mass();
    if (mass - 1.0).abs() > SAMPLING_MASS_TOLERANCE {
        return Err(Error::invalid(format!("density mass {mass} is not normalized")));
    }
    let g = p.grid();
    let mut cdf = Vec::with_capacity(g.len());
    let mut acc = 0.0;
    for v in p.values() {
        acc += v.max(0.0);
        cdf.push(acc);
    }
    let ny = g.ny();
    Ok((0..m)
        .map(|_| {
            let u = pick.gen::<f64>() * acc;
            // First cell whose cumulative mass exceeds u; never an empty cell.
            let c = cdf.partition_point(|&x| x <= u).min(g.len() - 1);
            let [x, y] = g.center(c / ny, c % ny);
            let (jx, jy): (f64, f64) = (jitter.gen(), jitter.gen());
            [x + (jx - 0.5) * g.dx(), y + (jy - 0.5) * g.dy()]
        })
        .collect())
}

/// `m` independent rows drawn from `p`: a cell by its mass, then a uniform
/// position inside it. `member` selects an independent stream under `seed`.
pub fn sample_rows(p: &Density, m: usize, seed: u64, member: u64) -> Result<PointCloud> {
    let mut pick = stream(seed, SAMPLE, member);
    let mut jitter = stream(seed, JITTER, member);
    PointCloud::new(sample_with(p, m, &mut pick, &mut jitter)?)
}

/// Where the rows of a theoretical bottleneck matrix come from.
pub trait RowSource {
    fn draw(&self, rows: usize, seed: u64, member: u64) -> Result<Vec<[f64; 2]>>;
}

impl RowSource for Density {
    fn draw(&self, rows: usize, seed: u64, member: u64) -> Result<Vec<[f64; 2]>> {
        Ok(sample_rows(self, rows, seed, member)?.into_points())
    }
}

/// Always yields the same rows: the point-mass limit of a density
/// concentrated on an actual weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedRows(pub Vec<[f64; 2]>);

impl RowSource for FixedRows {
    fn draw(&self, rows: usize, _seed: u64, _member: u64) -> Result<Vec<[f64; 2]>> {
        if rows != self.0.len() {
            return Err(Error::invalid(format!("matrix has {} rows, {rows} requested", self.0.len())));
        }
        Ok(self.0.clone())
    }
}

/// `h W1` and `h W1 W2` for `n` encoder outputs of width `w1.len()`.
pub fn bottleneck_outputs(h: &[f64], w1: &[[f64; 2]], w2: &[[f64; 2]; 2]) -> Result<[Vec<[f64; 2]>; 2]> {
    let dim = w1.len();
    if dim == 0 || h.len() % dim != 0 {
        return Err(Error::invalid("encoder outputs do not match the first bottleneck matrix"));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("encoder outputs must be finite"));
    }
    let y1: Vec<[f64; 2]> = h
        .chunks_exact(dim)
        .map(|row| {
            row.iter().zip(w1).fold([0.0; 2], |a, (x, w)| [a[0] + x * w[0], a[1] + x * w[1]])
        })
        .collect();
    let y2 = y1
        .iter()
        .map(|y| [y[0] * w2[0][0] + y[1] * w2[1][0], y[0] * w2[0][1] + y[1] * w2[1][1]])
        .collect();
    Ok([y1, y2])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareConfig {
    pub ensemble: usize,
    pub seed: u64,
    pub resolution: usize,
    pub pad_fraction: f64,
    pub bandwidth: Bandwidth,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            ensemble: DEFAULT_ENSEMBLE,
            seed: 0,
            resolution: crate::grid::DEFAULT_RESOLUTION,
            pad_fraction: crate::grid::DEFAULT_PAD_FRACTION,
            bandwidth: Bandwidth::Scott,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonResult {
    pub epoch: u32,
    pub layer: u32,
    pub mse: f64,
    pub pearson: f64,
    /// Encoder outputs pushed through each matrix.
    pub sample_count: usize,
    pub ensemble: usize,
    pub seed: u64,
    pub grid: Grid2D,
}

/// Scores and the two output densities behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerComparison {
    pub result: ComparisonResult,
    pub empirical: Density,
    pub theoretical: Density,
}

fn kde(points: &[[f64; 2]], grid: &Grid2D, bw: Bandwidth) -> Result<Density> {
    let cloud = PointCloud::new(points.to_vec())?;
    kde_estimate(&cloud, grid, bw.resolve(&cloud)?)
}

/// Compares both bottleneck layers at one epoch.
///
/// `h` holds `n` encoder outputs row by row; `w1` and `w2` are the trained
/// matrices as rows. Each ensemble member draws a fresh pair of theoretical
/// matrices from `src1` and `src2`; their output densities are averaged.
pub fn compare_outputs(
    epoch: u32,
    h: &[f64],
    w1: &[[f64; 2]],
    w2: &[[f64; 2]; 2],
    src1: &dyn RowSource,
    src2: &dyn RowSource,
    cfg: &CompareConfig,
) -> Result<[LayerComparison; 2]> {
    if cfg.ensemble == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    let empirical = bottleneck_outputs(h, w1, w2)?;
    let n = empirical[0].len();
    let mut theory: Vec<[Vec<[f64; 2]>; 2]> = Vec::with_capacity(cfg.ensemble);
    for member in 0..cfg.ensemble as u64 {
        let t1 = src1.draw(w1.len(), cfg.seed, 2 * member)?;
        let t2 = src2.draw(2, cfg.seed, 2 * member + 1)?;
        theory.push(bottleneck_outputs(h, &t1, &[t2[0], t2[1]])?);
    }

    let mut out = Vec::with_capacity(2);
    for layer in 0..2 {
        let mut bounds = Bounds::default();
        bounds.include_all(&empirical[layer]);
        for t in &theory {
            bounds.include_all(&t[layer]);
        }
        let grid = bounds.to_grid(cfg.pad_fraction, cfg.resolution, cfg.resolution)?;
        let emp = kde(&empirical[layer], &grid, cfg.bandwidth).map_err(|e| e.context("empirical outputs"))?;
        let mut acc = vec![0.0; grid.len()];
        for t in &theory {
            let d = kde(&t[layer], &grid, cfg.bandwidth).map_err(|e| e.context("theoretical outputs"))?;
            acc.iter_mut().zip(d.values()).for_each(|(a, v)| *a += v);
        }
        let mut th = Density::new(grid, acc, f64::from(epoch))?;
        th.normalize()?;
        let emp = emp.with_time(f64::from(epoch));
        let result = ComparisonResult {
            epoch,
            layer: layer as u32 + 1,
            mse: grid_mse(&emp, &th)?,
            pearson: grid_pearson(&emp, &th)?,
            sample_count: n,
            ensemble: cfg.ensemble,
            seed: cfg.seed,
            grid,
        };
        log::info!(
            "epoch {epoch} layer {}: mse {:.3e} pearson {:.4}",
            result.layer,
            result.mse,
            result.pearson
        );
        out.push(LayerComparison { result, empirical: emp, theoretical: th });
    }
    let second = out.pop().expect("two layers");
    let first = out.pop().expect("two layers");
    Ok([first, second])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand_distr::{Distribution, Normal};

    fn gaussian_density() -> Density {
        Density::gaussian(Grid2D::square(-4.0, 4.0, 64).unwrap(), [0.0, 0.0], [0.5, 0.5]).unwrap()
    }

    #[test]
    fn point_mass_samples_stay_in_their_cell() {
        let g = Grid2D::square(-1.0, 1.0, 16).unwrap();
        let mut v = vec![0.0; g.len()];
        v[g.index(5, 9)] = 1.0 / g.cell_area();
        let p = Density::new(g, v, 0.0).unwrap();
        let s = sample_rows(&p, 500, 3, 0).unwrap();
        assert!(s.points().iter().all(|q| g.cell_of(*q) == Some((5, 9))));
    }

    #[test]
    fn gaussian_sample_moments() {
        let p = gaussian_density();
        let m = 100_000;
        let s = sample_rows(&p, m, 11, 0).unwrap();
        let dx = p.grid().dx();
        // Cell jitter adds the variance of a uniform over one cell.
        let expected = 0.5 + dx * dx / 12.0;
        let tol = 3.0 * (2.0 * expected * expected / m as f64).sqrt();
        let mean = s.mean();
        let sd = s.std_dev();
        for c in 0..2 {
            assert!((sd[c] * sd[c] - expected).abs() < tol, "var {}", sd[c] * sd[c]);
            assert!(mean[c].abs() < 3.0 * (expected / m as f64).sqrt());
        }
        let cov = s.points().iter().map(|q| (q[0] - mean[0]) * (q[1] - mean[1])).sum::<f64>() / (m - 1) as f64;
        assert!(cov.abs() < 3.0 * expected / (m as f64).sqrt());
    }

    #[test]
    fn sampling_is_seeded() {
        let p = gaussian_density();
        assert_eq!(sample_rows(&p, 50, 7, 2).unwrap(), sample_rows(&p, 50, 7, 2).unwrap());
        assert_ne!(sample_rows(&p, 50, 7, 2).unwrap(), sample_rows(&p, 50, 7, 3).unwrap());
    }

    #[test]
    fn rejects_unnormalized_density() {
        let g = Grid2D::square(-1.0, 1.0, 8).unwrap();
        let p = Density::new(g, vec![1.0; g.len()], 0.0).unwrap();
        assert!(matches!(sample_rows(&p, 5, 0, 0), Err(Error::InvalidInput(_))));
        assert!(sample_rows(&gaussian_density(), 0, 0, 0).is_err());
    }

    fn encoder_outputs(n: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, "h", 0);
        (0..n * dim).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    fn rows(n: usize, seed: u64) -> Vec<[f64; 2]> {
        let normal = Normal::new(0.0, 0.7).unwrap();
        let mut rng = stream(seed, "rows", 0);
        (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect()
    }

    #[test]
    fn hand_computed_toy() {
        let h = [1.0, 2.0, 0.5, -1.0, 3.0, 0.0];
        let w1 = [[1.0, 2.0], [0.5, -1.0]];
        let w2 = [[0.0, 1.0], [2.0, 1.0]];
        let [y1, y2] = bottleneck_outputs(&h, &w1, &w2).unwrap();
        assert_eq!(y1, vec![[2.0, 0.0], [0.0, 2.0], [3.0, 6.0]]);
        assert_eq!(y2, vec![[0.0, 2.0], [4.0, 2.0], [12.0, 9.0]]);

        let cfg = CompareConfig { ensemble: 3, resolution: 16, ..Default::default() };
        let fixed1 = FixedRows(w1.to_vec());
        let fixed2 = FixedRows(w2.to_vec());
        let [l1, l2] = compare_outputs(0, &h, &w1, &w2, &fixed1, &fixed2, &cfg).unwrap();
        for (lc, y) in [(&l1, &y1), (&l2, &y2)] {
            let g = lc.result.grid;
            let cloud = PointCloud::new(y.clone()).unwrap();
            let bw = cloud.scott_bandwidth().unwrap();
            let mut brute = vec![0.0; g.len()];
            for i in 0..g.nx() {
                for j in 0..g.ny() {
                    let [x, z] = g.center(i, j);
                    brute[g.index(i, j)] = y
                        .iter()
                        .map(|p| (-0.5 * ((x - p[0]) / bw[0]).powi(2) - 0.5 * ((z - p[1]) / bw[1]).powi(2)).exp())
                        .sum::<f64>();
                }
            }
            let mass = brute.iter().sum::<f64>() * g.cell_area();
            for (a, b) in lc.theoretical.values().iter().zip(&brute) {
                assert!((a - b / mass).abs() < 1e-12);
            }
            assert!((lc.result.pearson - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_sources_reproduce_empirical_outputs() {
        let (n, dim) = (300, 20);
        let h = encoder_outputs(n, dim, 1);
        let w1 = rows(dim, 2);
        let w2 = [[0.8, -0.3], [0.2, 1.1]];
        let cfg = CompareConfig { ensemble: 4, ..Default::default() };
        let out = compare_outputs(3, &h, &w1, &w2, &FixedRows(w1.clone()), &FixedRows(w2.to_vec()), &cfg).unwrap();
        for lc in &out {
            let worst = lc
                .empirical
                .values()
                .iter()
                .zip(lc.theoretical.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-9, "{worst}");
            assert!(lc.result.mse < 1e-18);
        }
    }

    #[test]
    fn identity_second_layer_copies_first() {
        let (n, dim) = (200, 10);
        let h = encoder_outputs(n, dim, 4);
        let w1 = rows(dim, 5);
        let eye = [[1.0, 0.0], [0.0, 1.0]];
        let cfg = CompareConfig { ensemble: 2, ..Default::default() };
        let src1 = FixedRows(rows(dim, 6));
        let [a, b] = compare_outputs(1, &h, &w1, &eye, &src1, &FixedRows(eye.to_vec()), &cfg).unwrap();
        assert_eq!(a.theoretical, b.theoretical);
        assert_eq!(a.empirical, b.empirical);
    }

    #[test]
    fn uniform_theory_scores_poorly() {
        let (n, dim) = (500, 40);
        let h = encoder_outputs(n, dim, 8);
        let w1 = rows(dim, 9);
        let w2 = [[1.0, 0.2], [-0.3, 0.9]];
        let cfg = CompareConfig { ensemble: 8, seed: 2, ..Default::default() };
        let uniform = Density::uniform(Grid2D::square(-6.0, 6.0, 64).unwrap());
        let [bad, _] = compare_outputs(1, &h, &w1, &w2, &uniform, &FixedRows(w2.to_vec()), &cfg).unwrap();
        let [good, _] =
            compare_outputs(1, &h, &w1, &w2, &FixedRows(w1.clone()), &FixedRows(w2.to_vec()), &cfg).unwrap();
        assert!(bad.result.pearson < 0.3, "{}", bad.result.pearson);
        assert!((good.result.pearson - 1.0).abs() < 1e-12);
    }

    #[test]
    fn larger_ensembles_vary_less() {
        let (n, dim) = (200, 30);
        let h = encoder_outputs(n, dim, 12);
        let w1 = rows(dim, 13);
        let w2 = [[1.0, 0.0], [0.0, 1.0]];
        let p1 = kde_estimate(
            &PointCloud::new(w1.clone()).unwrap(),
            &Grid2D::square(-3.0, 3.0, 48).unwrap(),
            [0.4, 0.4],
        )
        .unwrap();
        let spread = |ensemble: usize| {
            let scores: Vec<f64> = (0..8)
                .map(|seed| {
                    let cfg = CompareConfig { ensemble, seed, resolution: 32, ..Default::default() };
                    compare_outputs(1, &h, &w1, &w2, &p1, &FixedRows(w2.to_vec()), &cfg).unwrap()[0].result.pearson
                })
                .collect();
            let m = scores.iter().sum::<f64>() / 8.0;
            scores.iter().map(|s| (s - m).powi(2)).sum::<f64>() / 7.0
        };
        let (v1, v4, v16) = (spread(1), spread(4), spread(16));
        assert!(v16 < v4 && v4 < v1, "{v1} {v4} {v16}");
    }
}
