//! Finite-volume reference solvers on the periodic unit interval.
//!
//! * LWR: first-order Godunov with the exact Riemann flux of the concave
//!   flux `rho V(rho)` (demand/supply form).
//! * ARZ: HLL on the conservative variables `(rho, y = rho w)`, with
//!   `w = v + p(rho)`, followed by the relaxation source integrated
//!   exactly at frozen density.
//!
//! In normalized units the fluxes carry the factor `speed_ratio`
//! (`v_max * horizon / road_length`); the relaxation time is in horizon
//! units. These solvers are reference oracles only and take no part in
//! training.

use ndarray::Array2;

use crate::diagram::{VeqSpec, V_MAX};
use crate::error::{Error, Result};
use crate::field::GridField;
use crate::scales::Scales;

/// Densities below this are treated as vacuum in the ARZ velocity recovery.
const VACUUM: f64 = 1e-12;

pub const DEFAULT_CELLS: usize = 400;
pub const DEFAULT_CFL: f64 = 0.45;

#[derive(Debug, Clone, PartialEq)]
pub struct FvGrid {
    /// Cell averages of density.
    pub rho: Vec<f64>,
    /// Cell averages of `rho w` for the ARZ system.
    pub y: Option<Vec<f64>>,
}

impl FvGrid {
    pub fn lwr(rho: Vec<f64>) -> Self {
        Self { rho, y: None }
    }

    /// ARZ grid from density and velocity cell values.
    pub fn arz(rho: Vec<f64>, v: &[f64], veq: &VeqSpec) -> Self {
        let y = rho
            .iter()
            .zip(v)
            .map(|(&r, &vi)| r * (vi + V_MAX - veq.value(r)))
            .collect();
        Self { rho, y: Some(y) }
    }

    /// ARZ grid at equilibrium, `v = V(rho)`.
    pub fn arz_equilibrium(rho: Vec<f64>, veq: &VeqSpec) -> Self {
        let v: Vec<f64> = rho.iter().map(|&r| veq.value(r)).collect();
        Self::arz(rho, &v, veq)
    }

    pub fn n_cells(&self) -> usize {
        self.rho.len()
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.n_cells() as f64
    }

    pub fn mass(&self) -> f64 {
        self.rho.iter().sum::<f64>() * self.dx()
    }

    /// Total variation on the periodic grid.
    pub fn total_variation(&self) -> f64 {
        total_variation(&self.rho)
    }

    /// Velocity per cell: `V(rho)` for LWR, `y / rho - p(rho)` for ARZ.
    pub fn velocity(&self, veq: &VeqSpec) -> Vec<f64> {
        match &self.y {
            None => self.rho.iter().map(|&r| veq.value(r)).collect(),
            Some(y) => self
                .rho
                .iter()
                .zip(y)
                .map(|(&r, &yi)| arz_velocity(r, yi, veq))
                .collect(),
        }
    }

    /// Smooth periodic bump `base + amp sin(2 pi x)` sampled at cell centres.
    pub fn sine_profile(n_cells: usize, base: f64, amp: f64) -> Vec<f64> {
        (0..n_cells)
            .map(|i| {
                let x = (i as f64 + 0.5) / n_cells as f64;
                base + amp * (2.0 * std::f64::consts::PI * x).sin()
            })
            .collect()
    }
}

pub fn total_variation(values: &[f64]) -> f64 {
    let n = values.len();
    (0..n).map(|i| (values[(i + 1) % n] - values[i]).abs()).sum()
}

fn arz_velocity(rho: f64, y: f64, veq: &VeqSpec) -> f64 {
    if rho < VACUUM {
        veq.value(rho)
    } else {
        y / rho - (V_MAX - veq.value(rho))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Model {
    Lwr,
    /// Relaxation time in horizon units.
    Arz { tau: f64 },
}

/// Shared solver settings.
#[derive(Debug, Clone)]
pub struct FvSolver {
    pub veq: VeqSpec,
    pub speed_ratio: f64,
    pub cfl: f64,
    /// Density of maximal flow, where demand and supply meet.
    critical: f64,
}

impl FvSolver {
    pub fn new(veq: VeqSpec, speed_ratio: f64) -> Self {
        let critical = critical_density(&veq);
        Self {
            veq,
            speed_ratio,
            cfl: DEFAULT_CFL,
            critical,
        }
    }

    pub fn for_scales(veq: VeqSpec, scales: &Scales) -> Self {
        Self::new(veq, scales.speed_ratio())
    }

    pub fn with_cfl(mut self, cfl: f64) -> Self {
        self.cfl = cfl;
        self
    }

    fn flux(&self, rho: f64) -> f64 {
        rho * self.veq.value(rho)
    }

    /// Godunov flux of `rho V(rho)` between a left and right state (without
    /// the speed ratio).
    pub fn godunov_flux(&self, left: f64, right: f64) -> f64 {
        let demand = self.flux(left.min(self.critical));
        let supply = self.flux(right.max(self.critical));
        demand.min(supply)
    }

    /// Largest `|f'(rho)|` over the grid, without the speed ratio.
    fn lwr_speed(&self, rho: &[f64]) -> f64 {
        rho.iter()
            .map(|&r| {
                let (v, dv) = self.veq.value_and_slope(r);
                (v + r * dv).abs()
            })
            .fold(0.0, f64::max)
    }

    fn arz_speed(&self, grid: &FvGrid) -> f64 {
        let y = grid.y.as_ref().expect("ARZ grid");
        grid.rho
            .iter()
            .zip(y)
            .map(|(&r, &yi)| {
                let v = arz_velocity(r, yi, &self.veq);
                let (_, dv) = self.veq.value_and_slope(r);
                (v + r * dv).abs().max(v.abs())
            })
            .fold(0.0, f64::max)
    }

    fn check_cfl(&self, speed: f64, dt: f64, dx: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::StepSize(format!("dt = {dt} must be positive")));
        }
        if dt * self.speed_ratio * speed > dx * (1.0 + 1e-12) {
            return Err(Error::StepSize(format!(
                "CFL violated: dt * max wave speed = {} > dx = {dx}",
                dt * self.speed_ratio * speed
            )));
        }
        Ok(())
    }

    pub fn godunov_lwr_step(&self, grid: &FvGrid, dt: f64) -> Result<FvGrid> {
        let n = grid.n_cells();
        let dx = grid.dx();
        self.check_cfl(self.lwr_speed(&grid.rho), dt, dx)?;
        let lambda = dt * self.speed_ratio / dx;
        // flux[i] sits at the interface i - 1/2
        let flux: Vec<f64> = (0..n)
            .map(|i| self.godunov_flux(grid.rho[(i + n - 1) % n], grid.rho[i]))
            .collect();
        let rho = (0..n)
            .map(|i| grid.rho[i] - lambda * (flux[(i + 1) % n] - flux[i]))
            .collect();
        Ok(FvGrid { rho, y: None })
    }

    fn hll(&self, rl: f64, yl: f64, rr: f64, yr: f64) -> (f64, f64) {
        let (vl, vr) = (arz_velocity(rl, yl, &self.veq), arz_velocity(rr, yr, &self.veq));
        let (_, dvl) = self.veq.value_and_slope(rl);
        let (_, dvr) = self.veq.value_and_slope(rr);
        // characteristic speeds v - rho p'(rho) = v + rho V'(rho) and v
        let sl = (vl + rl * dvl).min(vr + rr * dvr);
        let sr = vl.max(vr);
        let fl = (rl * vl, yl * vl);
        let fr = (rr * vr, yr * vr);
        if sl >= 0.0 {
            fl
        } else if sr <= 0.0 {
            fr
        } else {
            let inv = 1.0 / (sr - sl);
            (
                inv * (sr * fl.0 - sl * fr.0 + sl * sr * (rr - rl)),
                inv * (sr * fl.1 - sl * fr.1 + sl * sr * (yr - yl)),
            )
        }
    }

    /// One split step: HLL transport, then exact relaxation of `v` toward
    /// `V(rho)` over `dt`.
    pub fn arz_step(&self, grid: &FvGrid, tau: f64, dt: f64) -> Result<FvGrid> {
        if !(tau > 0.0) {
            return Err(Error::Domain {
                what: "tau",
                value: tau,
                domain: "(0, inf)",
            });
        }
        let y = grid.y.as_ref().ok_or_else(|| Error::config("ARZ step needs a rho*w field"))?;
        let n = grid.n_cells();
        let dx = grid.dx();
        self.check_cfl(self.arz_speed(grid), dt, dx)?;
        let lambda = dt * self.speed_ratio / dx;
        let flux: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let l = (i + n - 1) % n;
                self.hll(grid.rho[l], y[l], grid.rho[i], y[i])
            })
            .collect();
        let decay = (-dt / tau).exp();
        let mut rho = Vec::with_capacity(n);
        let mut y_new = Vec::with_capacity(n);
        for i in 0..n {
            let j = (i + 1) % n;
            let r = grid.rho[i] - lambda * (flux[j].0 - flux[i].0);
            let yt = y[i] - lambda * (flux[j].1 - flux[i].1);
            let veq = self.veq.value(r);
            let v = arz_velocity(r, yt, &self.veq);
            let v_relaxed = veq + (v - veq) * decay;
            rho.push(r);
            y_new.push(r * (v_relaxed + V_MAX - veq));
        }
        Ok(FvGrid { rho, y: Some(y_new) })
    }

    pub fn step(&self, grid: &FvGrid, model: Model, dt: f64) -> Result<FvGrid> {
        match model {
            Model::Lwr => self.godunov_lwr_step(grid, dt),
            Model::Arz { tau } => self.arz_step(grid, tau, dt),
        }
    }

    fn stable_dt(&self, grid: &FvGrid, model: Model) -> f64 {
        let speed = match model {
            Model::Lwr => self.lwr_speed(&grid.rho),
            Model::Arz { .. } => self.arz_speed(grid),
        };
        self.cfl * grid.dx() / (self.speed_ratio * speed).max(1e-12)
    }

    /// Marches `initial` to `horizon` with CFL-limited steps and samples the
    /// state at `n_t` evenly spaced times (including both ends). The field's
    /// time axis spans `[0, horizon]`.
    pub fn solve(&self, initial: &FvGrid, model: Model, horizon: f64, n_t: usize, domain: Scales) -> Result<GridField> {
        Ok(self.solve_with(initial, model, horizon, n_t, domain, |_, _| {})?.0)
    }

    /// As [`Self::solve`], calling `observe(time, grid)` at every sample and
    /// returning the final grid.
    pub fn solve_with<F>(
        &self,
        initial: &FvGrid,
        model: Model,
        horizon: f64,
        n_t: usize,
        domain: Scales,
        mut observe: F,
    ) -> Result<(GridField, FvGrid)>
    where
        F: FnMut(f64, &FvGrid),
    {
        if n_t < 2 || !(horizon > 0.0) {
            return Err(Error::config("solve needs n_t >= 2 and a positive horizon"));
        }
        if matches!(model, Model::Arz { .. }) != initial.y.is_some() {
            return Err(Error::config("initial grid does not match the model"));
        }
        let n = initial.n_cells();
        let mut rho = Array2::zeros((n_t, n));
        let mut vel = Array2::zeros((n_t, n));
        let mut grid = initial.clone();
        let mut t = 0.0;
        for m in 0..n_t {
            let target = horizon * m as f64 / (n_t - 1) as f64;
            while target - t > 1e-14 * horizon {
                let dt = self.stable_dt(&grid, model).min(target - t);
                grid = self.step(&grid, model, dt)?;
                t += dt;
            }
            t = target;
            observe(t, &grid);
            for (c, (r, v)) in grid.rho.iter().zip(grid.velocity(&self.veq)).enumerate() {
                rho[[m, c]] = *r;
                vel[[m, c]] = v;
            }
        }
        Ok((GridField::new(rho, vel, domain)?, grid))
    }
}

/// Argmax of `rho V(rho)` on `[0, 1]`, by dense sampling plus golden-section
/// refinement (exact 1/2 for Greenshields).
pub fn critical_density(veq: &VeqSpec) -> f64 {
    if matches!(veq, VeqSpec::Greenshields) {
        return 0.5;
    }
    let f = |r: f64| r * veq.value(r);
    let samples = 512;
    let best = (0..=samples)
        .map(|k| k as f64 / samples as f64)
        .max_by(|a, b| f(*a).total_cmp(&f(*b)))
        .unwrap_or(0.5);
    let (mut lo, mut hi) = ((best - 1.0 / samples as f64).max(0.0), (best + 1.0 / samples as f64).min(1.0));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if f(a) < f(b) {
            lo = a;
        } else {
            hi = b;
        }
    }
    0.5 * (lo + hi)
}

/// Mean absolute difference of two grids at matching time samples.
pub fn field_l1(a: &GridField, b: &GridField) -> Result<f64> {
    crate::metrics::l1_distance(a.rho.view(), b.rho.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn solver() -> FvSolver {
        FvSolver::new(VeqSpec::Greenshields, 1.0)
    }

    /// Exact self-similar Riemann solution of `rho_t + (rho (1 - rho))_x = 0`
    /// sampled along `x / t = xi`.
    fn riemann_sample(left: f64, right: f64, xi: f64) -> f64 {
        let f = |r: f64| r * (1.0 - r);
        let fp = |r: f64| 1.0 - 2.0 * r;
        if left < right {
            // shock with Rankine-Hugoniot speed
            let s = (f(right) - f(left)) / (right - left);
            if xi < s {
                left
            } else {
                right
            }
        } else if xi <= fp(left) {
            left
        } else if xi >= fp(right) {
            right
        } else {
            // rarefaction: f'(rho) = xi
            0.5 * (1.0 - xi)
        }
    }

    #[test]
    fn flux_at_equal_states_is_consistent() {
        assert!((solver().godunov_flux(0.2, 0.2) - 0.16).abs() < 1e-15);
    }

    #[test]
    fn riemann_fluxes_match_sampled_fan() {
        let s = solver();
        for &(l, r) in &[(0.8, 0.2), (0.2, 0.8), (0.1, 0.3), (0.9, 0.6), (0.3, 0.1), (0.6, 0.9)] {
            let at_interface = riemann_sample(l, r, 0.0);
            let exact = at_interface * (1.0 - at_interface);
            assert!((s.godunov_flux(l, r) - exact).abs() < 1e-15, "({l}, {r})");
        }
        assert!((s.godunov_flux(0.8, 0.2) - 0.25).abs() < 1e-15);
        assert!((s.godunov_flux(0.2, 0.8) - 0.16).abs() < 1e-15);
    }

    #[test]
    fn constant_states_are_preserved() {
        let s = solver();
        let grid = FvGrid::lwr(vec![0.4; 50]);
        let next = s.godunov_lwr_step(&grid, 0.01).unwrap();
        assert!(next.rho.iter().all(|&r| (r - 0.4).abs() < 1e-15));
        let arz = FvGrid::arz_equilibrium(vec![0.4; 50], &VeqSpec::Greenshields);
        let next = s.arz_step(&arz, 0.01, 0.01).unwrap();
        for (r, v) in next.rho.iter().zip(next.velocity(&s.veq)) {
            assert!((r - 0.4).abs() < 1e-15);
            assert!((v - 0.6).abs() < 1e-14);
        }
    }

    #[test]
    fn cfl_and_tau_are_checked() {
        let s = solver();
        let grid = FvGrid::lwr(vec![0.1; 10]);
        assert!(matches!(s.godunov_lwr_step(&grid, 1.0), Err(Error::StepSize(_))));
        let arz = FvGrid::arz_equilibrium(vec![0.1; 10], &VeqSpec::Greenshields);
        assert!(s.arz_step(&arz, 0.0, 0.01).is_err());
        assert!(matches!(s.arz_step(&arz, 1.0, 1.0), Err(Error::StepSize(_))));
    }

    #[test]
    fn relaxation_is_exponential() {
        let s = solver();
        let (rho, tau) = (0.3, 0.05);
        let grid = FvGrid::arz(vec![rho; 20], &[0.5; 20], &s.veq);
        let (field, _) = s
            .solve_with(&grid, Model::Arz { tau }, 0.2, 5, Scales::default(), |_, _| {})
            .unwrap();
        for m in 0..5 {
            let t = 0.2 * m as f64 / 4.0;
            let expect = 0.7 + (0.5 - 0.7) * (-t / tau).exp();
            assert!((field.vel[[m, 7]] - expect).abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn lwr_is_tvd_and_conservative_on_random_profiles() {
        let s = solver();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let rho: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut grid = FvGrid::lwr(rho);
            let m0 = grid.mass();
            let mut tv = grid.total_variation();
            for _ in 0..200 {
                grid = s.godunov_lwr_step(&grid, 0.45 / 64.0).unwrap();
                let tv_new = grid.total_variation();
                assert!(tv_new <= tv + 1e-12);
                tv = tv_new;
                assert!(grid.rho.iter().all(|&r| (-1e-15..=1.0 + 1e-15).contains(&r)));
            }
            assert!((grid.mass() - m0).abs() <= 1e-13 * m0);
        }
    }

    #[test]
    fn learned_critical_density_maximizes_flux() {
        use crate::net::{InitScheme, VeqNet};
        let spec = VeqSpec::learned(VeqNet::new(&[1, 6, 1], 4, InitScheme::FanInUniform));
        let c = critical_density(&spec);
        let f = |r: f64| r * spec.value(r);
        for k in 0..=1000 {
            assert!(f(k as f64 / 1000.0) <= f(c) + 1e-12);
        }
        assert_eq!(critical_density(&VeqSpec::Greenshields), 0.5);
    }
}
