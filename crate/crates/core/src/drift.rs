//! Drift and diffusion fields built from the live optimizer.
//!
//! The drift on the weight plane is the ADAM update direction of the rows,
//! switched off by a Heaviside gate whenever the epoch loss failed to
//! decrease. The optimizer only tells us the update at the rows themselves;
//! between rows the field is extended by Nadaraya-Watson kernel regression.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::fokker_planck::{DriftField, LinearInTime};
use crate::grid::{sq, Grid2D};
use crate::{Error, Result};

/// Cells whose total kernel weight falls below this get zero drift.
pub const MIN_KERNEL_WEIGHT: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    /// Learning rate.
    pub eta: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eta: 1e-3, eps: 1e-8 }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(unit(self.beta1) && unit(self.beta2)) {
            return Err(Error::invalid("ADAM betas must lie in (0, 1)"));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid("ADAM eps must be positive"));
        }
        Ok(())
    }
}

/// Moment accumulators for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(len: usize, hyper: AdamHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(Self { m: vec![0.0; len], v: vec![0.0; len], step_count: 0, hyper })
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Advances the moments with `grad` and writes the additive update
    /// `-eta * m_hat / (eps + sqrt(v_hat))` into `update`.
    pub fn step(&mut self, grad: &[f64], update: &mut [f64]) -> Result<()> {
        if grad.len() != self.m.len() || update.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "gradient of length {} for ADAM state of length {}",
                grad.len(),
                self.m.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid("non-finite gradient"));
        }
        let AdamHyper { beta1, beta2, eta, eps } = self.hyper;
        let t = self.step_count + 1;
        let c1 = 1.0 - libm::pow(beta1, t as f64);
        let c2 = 1.0 - libm::pow(beta2, t as f64);
        for (((m, v), &g), u) in self.m.iter_mut().zip(&mut self.v).zip(grad).zip(update.iter_mut()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *u = -eta * m_hat / (eps + libm::sqrt(v_hat));
        }
        self.step_count = t;
        Ok(())
    }
}

/// Functional form of [`AdamState::step`]: the update and the advanced state.
/// The update is returned, not applied.
pub fn adam_direction(gradient: &[f64], state: &AdamState) -> Result<(Vec<f64>, AdamState)> {
    let mut next = state.clone();
    let mut update = vec![0.0; gradient.len()];
    next.step(gradient, &mut update)?;
    Ok((update, next))
}

/// Heaviside factor on the loss change; closed when the loss did not
/// strictly decrease.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossGate {
    pub prev_loss: f64,
    pub curr_loss: f64,
    pub open: bool,
}

impl LossGate {
    pub fn factor(&self) -> f64 {
        if self.open {
            1.0
        } else {
            0.0
        }
    }
}

pub fn gate(prev_loss: f64, curr_loss: f64) -> LossGate {
    LossGate { prev_loss, curr_loss, open: curr_loss < prev_loss }
}

/// Net optimizer displacement of one weight row over an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowUpdateSample {
    /// Row coordinates at the start of the epoch.
    pub position: [f64; 2],
    /// Sum of the optimizer steps applied to the row during the epoch.
    pub update: [f64; 2],
    pub epoch_time: f64,
}

/// Nadaraya-Watson extension of the row updates to every cell, times the
/// gate factor. The diffusion part of the returned field is zero.
pub fn drift_from_rows(
    samples: &[RowUpdateSample],
    gate: &LossGate,
    grid: &Grid2D,
    bandwidth: [f64; 2],
) -> Result<DriftField> {
    if samples.is_empty() {
        return Err(Error::invalid("no row update samples"));
    }
    if !(bandwidth[0] > 0.0 && bandwidth[1] > 0.0) {
        return Err(Error::invalid("kernel bandwidth must be positive"));
    }
    if samples
        .iter()
        .any(|s| !(s.position.iter().chain(&s.update).all(|v| v.is_finite())))
    {
        return Err(Error::invalid("row update samples must be finite"));
    }
    if !gate.open {
        return Ok(DriftField::zero(*grid));
    }
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut weight = vec![0.0; grid.len()];
    let mut acc = vec![[0.0; 2]; grid.len()];
    let mut kx = vec![0.0; nx];
    let mut ky = vec![0.0; ny];
    for s in samples {
        for (i, k) in kx.iter_mut().enumerate() {
            *k = libm::exp(-0.5 * sq((grid.x_center(i) - s.position[0]) / bandwidth[0]));
        }
        for (j, k) in ky.iter_mut().enumerate() {
            *k = libm::exp(-0.5 * sq((grid.y_center(j) - s.position[1]) / bandwidth[1]));
        }
        for i in 0..nx {
            for j in 0..ny {
                let w = kx[i] * ky[j];
                let c = i * ny + j;
                weight[c] += w;
                acc[c][0] += w * s.update[0];
                acc[c][1] += w * s.update[1];
            }
        }
    }
    let vectors = weight
        .iter()
        .zip(&acc)
        .map(|(&w, a)| {
            if w < MIN_KERNEL_WEIGHT {
                [0.0; 2]
            } else {
                [a[0] / w, a[1] / w]
            }
        })
        .collect();
    DriftField::new(*grid, vectors, vec![[0.0; 2]; grid.len()])
}

/// Diagonal diffusion `scale * eps^2 * eta^2`, the same at every cell.
pub fn diffusion_coefficients(grid: &Grid2D, eta: f64, eps_adam: f64, scale: f64) -> Result<Vec<[f64; 2]>> {
    if !(eta > 0.0 && eps_adam > 0.0) {
        return Err(Error::invalid("eta and eps must be positive"));
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::invalid("diffusion scale must be non-negative"));
    }
    let s = scale * sq(eps_adam) * sq(eta);
    Ok(vec![[s, s]; grid.len()])
}

/// Time-dependent drift for one epoch `[t0, t0 + 1]`.
///
/// The row updates of the epoch are regressed onto the grid twice: at the
/// rows' start-of-epoch positions and at their end-of-epoch positions
/// (start plus update). Sub-steps interpolate linearly between the two.
pub fn epoch_drift(
    samples: &[RowUpdateSample],
    gate: &LossGate,
    grid: &Grid2D,
    bandwidth: [f64; 2],
    sigma2: Vec<[f64; 2]>,
    t0: f64,
) -> Result<LinearInTime> {
    let start = drift_from_rows(samples, gate, grid, bandwidth)?;
    let moved: Vec<RowUpdateSample> = samples
        .iter()
        .map(|s| RowUpdateSample {
            position: [s.position[0] + s.update[0], s.position[1] + s.update[1]],
            update: s.update,
            epoch_time: s.epoch_time + 1.0,
        })
        .collect();
    let end = drift_from_rows(&moved, gate, grid, bandwidth)?;
    Ok(LinearInTime {
        start: start.with_sigma2(sigma2.clone())?,
        end: end.with_sigma2(sigma2)?,
        t_start: t0,
        t_end: t0 + 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook ADAM written out independently for scalar parameters.
    struct ReferenceAdam {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ReferenceAdam {
        fn step(&mut self, w: f64, g: f64, h: &AdamHyper) -> f64 {
            self.t += 1;
            self.m = h.beta1 * self.m + (1.0 - h.beta1) * g;
            self.v = h.beta2 * self.v + (1.0 - h.beta2) * g * g;
            let mh = self.m / (1.0 - h.beta1.powi(self.t));
            let vh = self.v / (1.0 - h.beta2.powi(self.t));
            w - h.eta * mh / (h.eps + vh.sqrt())
        }
    }

    #[test]
    fn first_step_has_magnitude_eta() {
        let h = AdamHyper::default();
        let st = AdamState::new(3, h).unwrap();
        let (u, next) = adam_direction(&[0.5, -2.0, 1e-3], &st).unwrap();
        // m_hat = g, v_hat = g^2 on the first step: u = -eta g / (eps + |g|).
        for (ui, g) in u.iter().zip([0.5f64, -2.0, 1e-3]) {
            let expected = -1e-3 * g / (1e-8 + g.abs());
            assert!((ui - expected).abs() < 1e-18);
            assert!((ui.abs() - 1e-3).abs() < 1e-7);
        }
        assert_eq!(next.step_count, 1);
        assert_eq!(st.step_count, 0);
    }

    #[test]
    fn zero_gradient_gives_zero_update() {
        let st = AdamState::new(4, AdamHyper::default()).unwrap();
        let (u, _) = adam_direction(&[0.0; 4], &st).unwrap();
        assert!(u.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn rejects_bad_gradients() {
        let st = AdamState::new(2, AdamHyper::default()).unwrap();
        assert!(matches!(adam_direction(&[f64::NAN, 0.0], &st), Err(Error::InvalidInput(_))));
        assert!(matches!(adam_direction(&[0.0], &st), Err(Error::InvalidInput(_))));
    }

    fn trajectories(steps: usize) -> (Vec<f64>, Vec<f64>) {
        let h = AdamHyper::default();
        let mut st = AdamState::new(1, h).unwrap();
        let mut r = ReferenceAdam { m: 0.0, v: 0.0, t: 0 };
        let (mut w, mut wr) = (1.0, 1.0);
        let (mut a, mut b) = (vec![], vec![]);
        for _ in 0..steps {
            let (u, next) = adam_direction(&[2.0 * w], &st).unwrap();
            st = next;
            w += u[0];
            wr = r.step(wr, 2.0 * wr, &h);
            a.push(w);
            b.push(wr);
        }
        (a, b)
    }

    #[test]
    fn matches_reference_on_quadratic() {
        let (a, b) = trajectories(10);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
        let (a, b) = trajectories(100);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-10));
    }

    #[test]
    fn gate_convention() {
        assert!(gate(0.5, 0.4).open);
        assert!(!gate(0.4, 0.4).open);
        assert!(!gate(0.3, 0.9).open);
        assert_eq!(gate(0.3, 0.9).factor(), 0.0);
    }

    fn grid8() -> Grid2D {
        Grid2D::square(-2.0, 2.0, 8).unwrap()
    }

    fn sample(p: [f64; 2], u: [f64; 2]) -> RowUpdateSample {
        RowUpdateSample { position: p, update: u, epoch_time: 0.0 }
    }

    #[test]
    fn single_sample_gives_its_update_everywhere_it_reaches() {
        let g = grid8();
        let c = g.center(3, 4);
        let d = drift_from_rows(&[sample(c, [0.2, -0.1])], &gate(1.0, 0.5), &g, [0.5, 0.5]).unwrap();
        for v in d.vectors() {
            let hit = (v[0] - 0.2).abs() < 1e-15 && (v[1] + 0.1).abs() < 1e-15;
            assert!(hit || *v == [0.0, 0.0]);
        }
        assert_ne!(d.vectors()[g.index(3, 4)], [0.0, 0.0]);
    }

    #[test]
    fn closed_gate_zeroes_drift() {
        let g = grid8();
        let d = drift_from_rows(&[sample([0.0, 0.0], [1.0, 1.0])], &gate(0.5, 0.5), &g, [0.5, 0.5]).unwrap();
        assert!(d.vectors().iter().all(|v| *v == [0.0, 0.0]));
        assert!(drift_from_rows(&[], &gate(1.0, 0.5), &g, [0.5, 0.5]).is_err());
    }

    #[test]
    fn matches_brute_force_weighted_average() {
        let g = grid8();
        let samples = [
            sample([0.3, -0.2], [0.1, 0.0]),
            sample([-1.0, 0.8], [-0.05, 0.2]),
            sample([1.4, 1.1], [0.3, -0.3]),
        ];
        let h = [0.7, 0.9];
        let d = drift_from_rows(&samples, &gate(2.0, 1.0), &g, h).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let [x, y] = g.center(i, j);
                let (mut w, mut a, mut b) = (0.0, 0.0, 0.0);
                for s in &samples {
                    let k = (-((x - s.position[0]) / h[0]).powi(2) / 2.0
                        - ((y - s.position[1]) / h[1]).powi(2) / 2.0)
                        .exp();
                    w += k;
                    a += k * s.update[0];
                    b += k * s.update[1];
                }
                let v = d.vectors()[g.index(i, j)];
                assert!((v[0] - a / w).abs() < 1e-12 && (v[1] - b / w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn diffusion_is_scaled_eps_eta_squared() {
        let g = grid8();
        let s = diffusion_coefficients(&g, 1e-3, 1e-8, 1.0).unwrap();
        assert!(s.iter().all(|v| (v[0] - 1e-22).abs() < 1e-36 && v[0] == v[1]));
        assert!(diffusion_coefficients(&g, 1e-3, 1e-8, 0.0).unwrap().iter().all(|v| *v == [0.0, 0.0]));
        assert!(diffusion_coefficients(&g, 1e-3, 1e-8, -1.0).is_err());
    }

    fn arb_samples() -> impl Strategy<Value = Vec<RowUpdateSample>> {
        prop::collection::vec(
            ((-2.0..2.0f64, -2.0..2.0f64), (-1.0..1.0f64, -1.0..1.0f64)),
            1..12,
        )
        .prop_map(|v| v.into_iter().map(|((x, y), (a, b))| sample([x, y], [a, b])).collect())
    }

    proptest! {
        #[test]
        fn drift_stays_in_update_hull(samples in arb_samples()) {
            let g = grid8();
            let d = drift_from_rows(&samples, &gate(1.0, 0.0), &g, [0.6, 0.6]).unwrap();
            for c in 0..2 {
                let lo = samples.iter().map(|s| s.update[c]).fold(f64::INFINITY, f64::min);
                let hi = samples.iter().map(|s| s.update[c]).fold(f64::NEG_INFINITY, f64::max);
                // Cells beyond the kernel reach are pinned to zero.
                for v in d.vectors().iter().filter(|v| **v != [0.0, 0.0]) {
                    prop_assert!(v[c] >= lo - 1e-12 && v[c] <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn drift_scales_with_updates(samples in arb_samples(), alpha in -3.0..3.0f64) {
            let g = grid8();
            let scaled: Vec<_> = samples
                .iter()
                .map(|s| sample(s.position, [alpha * s.update[0], alpha * s.update[1]]))
                .collect();
            let a = drift_from_rows(&samples, &gate(1.0, 0.0), &g, [0.6, 0.6]).unwrap();
            let b = drift_from_rows(&scaled, &gate(1.0, 0.0), &g, [0.6, 0.6]).unwrap();
            for (u, v) in a.vectors().iter().zip(b.vectors()) {
                prop_assert!((alpha * u[0] - v[0]).abs() <= 1e-12 * (1.0 + v[0].abs()));
                prop_assert!((alpha * u[1] - v[1]).abs() <= 1e-12 * (1.0 + v[1].abs()));
            }
        }
    }
}
