//! First-order follow-the-leader simulation on a ring road.
//!
//! Each vehicle drives at the equilibrium speed of the density implied by
//! its own forward gap, `rho_i = jam_gap / gap_i`, optionally capped inside
//! disturbance zones. Positions, times and speeds are normalized; a vehicle
//! at normalized speed `v` covers `speed_ratio * v` ring lengths per unit
//! of normalized time.
//!
//! Vehicle `i + 1` (mod `N`) leads vehicle `i`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagram::VeqSpec;
use crate::error::{Error, Result};
use crate::field::{space_node, time_node, GridField};
use crate::scales::Scales;

/// Gaps within this relative distance below the jam gap are round-off.
const JAM_SLACK: f64 = 1e-9;

/// Fraction of the explicit-Euler stability bound used when `dt` is not set.
const AUTO_DT_FRACTION: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct RingState {
    /// Normalized positions in `[0, 1)`, cyclically increasing with index.
    pub positions: Vec<f64>,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceZone {
    pub t_start: f64,
    pub t_end: f64,
    /// Zone start on the ring. When `x_start > x_end` the zone wraps past 0.
    pub x_start: f64,
    pub x_end: f64,
    /// Speed limit inside the zone, normalized.
    pub v_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Regime {
    Equilibrium,
    Transient { zones: Vec<DisturbanceZone> },
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Regime::Equilibrium => "equilibrium",
            Regime::Transient { .. } => "transient",
        }
    }

    pub fn zones(&self) -> &[DisturbanceZone] {
        match self {
            Regime::Equilibrium => &[],
            Regime::Transient { zones } => zones,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_vehicles: usize,
    pub mean_density: f64,
    pub regime: Regime,
    pub penetration: f64,
    pub n_mea: usize,
    /// Integration step in horizon units; derived from the stability bound
    /// when absent.
    #[serde(default)]
    pub dt: Option<f64>,
    /// Simulated time discarded before recording (equilibrium only).
    pub warmup: f64,
    /// Relative amplitude of the seeded initial spacing perturbation
    /// (equilibrium only).
    pub perturbation: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn equilibrium() -> Self {
        Self {
            n_vehicles: 100,
            mean_density: 0.4,
            regime: Regime::Equilibrium,
            penetration: 0.02,
            n_mea: 400,
            dt: None,
            warmup: 0.25,
            perturbation: 0.05,
            seed: 2024,
        }
    }

    /// Two speed-cap zones at distinct times and places.
    pub fn transient() -> Self {
        Self {
            regime: Regime::Transient {
                zones: vec![
                    DisturbanceZone {
                        t_start: 0.1,
                        t_end: 0.25,
                        x_start: 0.3,
                        x_end: 0.35,
                        v_cap: 0.1,
                    },
                    DisturbanceZone {
                        t_start: 0.5,
                        t_end: 0.6,
                        x_start: 0.75,
                        x_end: 0.8,
                        v_cap: 0.0,
                    },
                ],
            },
            penetration: 0.05,
            warmup: 0.0,
            perturbation: 0.0,
            ..Self::equilibrium()
        }
    }

    pub fn validate(&self, scales: &Scales) -> Result<()> {
        let jam = scales.jam_gap();
        if self.n_vehicles == 0 {
            return Err(Error::config("n_vehicles must be positive"));
        }
        let occupied = self.n_vehicles as f64 * jam;
        if !(occupied <= self.mean_density * (1.0 + 1e-12) && self.mean_density <= 1.0) {
            return Err(Error::config(format!(
                "mean_density {} must lie in [n_vehicles * s_jam / road_length = {occupied}, 1]",
                self.mean_density
            )));
        }
        if !(self.penetration > 0.0 && self.penetration <= 1.0) {
            return Err(Error::config("penetration must be in (0, 1]"));
        }
        if self.n_mea == 0 {
            return Err(Error::config("n_mea must be positive"));
        }
        if !(self.warmup >= 0.0 && self.warmup.is_finite()) {
            return Err(Error::config("warmup must be non-negative"));
        }
        if !(0.0..0.5).contains(&self.perturbation) {
            return Err(Error::config("perturbation must be in [0, 0.5)"));
        }
        if let Some(dt) = self.dt {
            check_dt(dt, scales)?;
        }
        for z in self.regime.zones() {
            if !(z.t_start < z.t_end) {
                return Err(Error::config("disturbance zone needs t_start < t_end"));
            }
            if !(0.0..1.0).contains(&z.v_cap) {
                return Err(Error::config("disturbance v_cap must be in [0, 1)"));
            }
            if !((0.0..=1.0).contains(&z.x_start) && (0.0..=1.0).contains(&z.x_end)) {
                return Err(Error::config("disturbance zone bounds must be in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn step_size(&self, scales: &Scales) -> f64 {
        self.dt.unwrap_or_else(|| auto_dt(scales))
    }
}

/// Largest stable Euler step: a vehicle may close at most half of the jam
/// gap per step.
pub fn max_stable_dt(scales: &Scales) -> f64 {
    0.5 * scales.jam_gap() / scales.speed_ratio()
}

/// Default step: a whole number of steps per unit horizon, below the bound.
pub fn auto_dt(scales: &Scales) -> f64 {
    let steps = (1.0 / (AUTO_DT_FRACTION * max_stable_dt(scales))).ceil();
    1.0 / steps
}

fn check_dt(dt: f64, scales: &Scales) -> Result<()> {
    let bound = max_stable_dt(scales);
    if !(dt > 0.0 && dt <= bound * (1.0 + 1e-12)) {
        return Err(Error::StepSize(format!("dt = {dt} must be in (0, {bound}]")));
    }
    Ok(())
}

/// `jam_gap / gap`, i.e. 1 for bumper-to-bumper spacing.
pub fn spacing_density(gap: f64, jam_gap: f64) -> Result<f64> {
    if !(gap >= jam_gap * (1.0 - JAM_SLACK)) {
        return Err(Error::ModelViolation(format!("gap {gap} is below the jam gap {jam_gap}")));
    }
    Ok((jam_gap / gap).min(1.0))
}

/// Forward gap of vehicle `i` on the ring.
pub fn forward_gap(positions: &[f64], i: usize) -> f64 {
    let n = positions.len();
    if n == 1 {
        return 1.0;
    }
    (positions[(i + 1) % n] - positions[i]).rem_euclid(1.0)
}

fn zone_contains(z: &DisturbanceZone, t: f64, x: f64) -> bool {
    let in_time = t >= z.t_start && t < z.t_end;
    let in_space = if z.x_start <= z.x_end {
        x >= z.x_start && x < z.x_end
    } else {
        x >= z.x_start || x < z.x_end
    };
    in_time && in_space
}

/// The ring geometry the simulation runs on.
#[derive(Debug, Clone, Copy)]
pub struct Ring {
    pub jam_gap: f64,
    pub speed_ratio: f64,
}

impl Ring {
    pub fn new(scales: &Scales) -> Self {
        Self {
            jam_gap: scales.jam_gap(),
            speed_ratio: scales.speed_ratio(),
        }
    }

    /// Normalized speed of every vehicle in `state`.
    pub fn speeds(&self, state: &RingState, veq: &VeqSpec, zones: &[DisturbanceZone]) -> Result<Vec<f64>> {
        let p = &state.positions;
        (0..p.len())
            .map(|i| {
                let rho = spacing_density(forward_gap(p, i), self.jam_gap)?;
                let mut v = veq.value(rho);
                for z in zones {
                    if zone_contains(z, state.time, p[i]) {
                        v = v.min(z.v_cap);
                    }
                }
                Ok(v.max(0.0))
            })
            .collect()
    }

    /// One explicit Euler step of the follow-the-leader dynamics.
    pub fn step(&self, state: &RingState, veq: &VeqSpec, zones: &[DisturbanceZone], dt: f64) -> Result<RingState> {
        let speeds = self.speeds(state, veq, zones)?;
        self.advance(state, &speeds, dt)
    }

    fn advance(&self, state: &RingState, speeds: &[f64], dt: f64) -> Result<RingState> {
        if !(dt >= 0.0) {
            return Err(Error::StepSize(format!("dt = {dt} must be non-negative")));
        }
        let n = state.positions.len();
        let scale = dt * self.speed_ratio;
        let mut gaps_ok = true;
        let new: Vec<f64> = state
            .positions
            .iter()
            .zip(speeds)
            .map(|(x, v)| (x + scale * v).rem_euclid(1.0))
            .collect();
        if n > 1 {
            for i in 0..n {
                let g = forward_gap(&state.positions, i) + scale * (speeds[(i + 1) % n] - speeds[i]);
                if g < self.jam_gap * (1.0 - JAM_SLACK) {
                    gaps_ok = false;
                    break;
                }
            }
        }
        if !gaps_ok {
            return Err(Error::StepSize(format!(
                "step of {dt} at t = {} would make vehicles overlap; reduce dt",
                state.time
            )));
        }
        Ok(RingState {
            positions: new,
            time: state.time + dt,
        })
    }
}

/// Positions and speeds of every vehicle at every recorded step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectories {
    /// Normalized recording times, starting at 0.
    pub times: Vec<f64>,
    /// Shape `(steps, vehicles)`, normalized positions in `[0, 1)`.
    pub positions: Array2<f64>,
    /// Shape `(steps, vehicles)`, normalized speeds.
    pub speeds: Array2<f64>,
    pub jam_gap: f64,
}

impl Trajectories {
    pub fn n_steps(&self) -> usize {
        self.times.len()
    }

    pub fn n_vehicles(&self) -> usize {
        self.positions.ncols()
    }

    /// Builds a trajectory set from snapshots `(state, speeds)`.
    pub fn from_snapshots(snapshots: &[(RingState, Vec<f64>)], jam_gap: f64) -> Self {
        let n = snapshots.first().map_or(0, |s| s.0.positions.len());
        let mut positions = Array2::zeros((snapshots.len(), n));
        let mut speeds = Array2::zeros((snapshots.len(), n));
        let mut times = Vec::with_capacity(snapshots.len());
        for (k, (s, v)) in snapshots.iter().enumerate() {
            times.push(s.time);
            for i in 0..n {
                positions[[k, i]] = s.positions[i];
                speeds[[k, i]] = v[i];
            }
        }
        Self {
            times,
            positions,
            speeds,
            jam_gap,
        }
    }

    /// `vehicle,t,x,v`, one row per vehicle and step.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(40 * self.positions.len() + 16);
        out.push_str("vehicle,t,x,v\n");
        for i in 0..self.n_vehicles() {
            for k in 0..self.n_steps() {
                let _ = writeln!(out, "{},{},{},{}", i, self.times[k], self.positions[[k, i]], self.speeds[[k, i]]);
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv_string().as_bytes())
    }
}

/// Uniform spacing with vehicle 0 at the origin.
pub fn uniform_ring(n: usize) -> RingState {
    RingState {
        positions: (0..n).map(|i| i as f64 / n as f64).collect(),
        time: 0.0,
    }
}

fn initial_state(config: &SimConfig, jam_gap: f64) -> RingState {
    let n = config.n_vehicles;
    let mut state = uniform_ring(n);
    if matches!(config.regime, Regime::Equilibrium) && config.perturbation > 0.0 && n > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mean_gap = 1.0 / n as f64;
        let amp = config.perturbation * mean_gap;
        let dist = Uniform::new_inclusive(-amp, amp);
        // shifts of at most 5% of the mean gap on both ends of a gap keep it
        // well above jam spacing for any density below 0.9
        for x in state.positions.iter_mut() {
            *x = (*x + dist.sample(&mut rng)).rem_euclid(1.0);
        }
        let min_gap = (0..n).map(|i| forward_gap(&state.positions, i)).fold(f64::INFINITY, f64::min);
        if min_gap < jam_gap {
            state = uniform_ring(n);
        }
    }
    state
}

/// Runs the configured scenario and records every integration step over the
/// unit horizon. The equilibrium regime first simulates `warmup` and then
/// restarts the clock at zero.
pub fn run_simulation(config: &SimConfig, veq: &VeqSpec, scales: &Scales) -> Result<Trajectories> {
    config.validate(scales)?;
    let ring = Ring::new(scales);
    let dt = config.step_size(scales);
    let zones = config.regime.zones();
    let mut state = initial_state(config, ring.jam_gap);

    if matches!(config.regime, Regime::Equilibrium) && config.warmup > 0.0 {
        let warm_steps = (config.warmup / dt).round() as usize;
        for _ in 0..warm_steps {
            state = ring.step(&state, veq, &[], dt)?;
        }
        state.time = 0.0;
    }

    let n_steps = (1.0 / dt).round() as usize;
    let n = config.n_vehicles;
    let mut positions = Array2::zeros((n_steps + 1, n));
    let mut speeds = Array2::zeros((n_steps + 1, n));
    let mut times = Vec::with_capacity(n_steps + 1);
    for k in 0..=n_steps {
        // recompute the time from the index so it does not drift
        state.time = k as f64 * dt;
        let v = ring.speeds(&state, veq, zones)?;
        times.push(state.time);
        for i in 0..n {
            positions[[k, i]] = state.positions[i];
            speeds[[k, i]] = v[i];
        }
        if k < n_steps {
            state = ring.advance(&state, &v, dt)?;
        }
    }
    Ok(Trajectories {
        times,
        positions,
        speeds,
        jam_gap: ring.jam_gap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub probe: usize,
    pub t: f64,
    pub x: f64,
    pub rho: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub records: Vec<ProbeRecord>,
    pub n_probes: usize,
    pub n_mea: usize,
}

impl ProbeDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        self.records.iter().map(|r| [r.t, r.x]).collect()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(48 * self.records.len() + 20);
        out.push_str("probe,t,x,rho,v\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{}", r.probe, r.t, r.x, r.rho, r.v);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv_string().as_bytes())
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["probe", "t", "x", "rho", "v"] {
            return Err(Error::Format("probe csv header must be `probe,t,x,rho,v`".into()));
        }
        let records: Vec<ProbeRecord> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        Self::from_records(records)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    /// Validates records and infers probe and measurement counts.
    pub fn from_records(records: Vec<ProbeRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::config("probe dataset is empty"));
        }
        let mut probes: Vec<usize> = Vec::new();
        let mut last: std::collections::HashMap<usize, f64> = Default::default();
        for r in &records {
            if !(r.rho > 0.0 && r.rho <= 1.0) || !(0.0..=1.0).contains(&r.v) {
                return Err(Error::Domain {
                    what: "probe measurement",
                    value: if r.rho > 0.0 && r.rho <= 1.0 { r.v } else { r.rho },
                    domain: "rho in (0, 1], v in [0, 1]",
                });
            }
            match last.insert(r.probe, r.t) {
                Some(prev) if prev >= r.t => {
                    return Err(Error::config(format!("probe {} timestamps are not increasing", r.probe)));
                }
                None => probes.push(r.probe),
                _ => {}
            }
        }
        let n_probes = probes.len();
        let n_mea = records.len() / n_probes;
        Ok(Self {
            records,
            n_probes,
            n_mea,
        })
    }
}

/// Picks `round(penetration * N)` evenly spaced vehicles (rotated by a
/// seeded offset) and records `n_mea` evenly spaced measurements of each.
pub fn sample_probes(traj: &Trajectories, penetration: f64, n_mea: usize, seed: u64) -> Result<ProbeDataset> {
    let n = traj.n_vehicles();
    let n_probes = (penetration * n as f64).round() as usize;
    if !(penetration > 0.0 && penetration <= 1.0) || n_probes == 0 {
        return Err(Error::config(format!(
            "penetration {penetration} with {n} vehicles selects no probe"
        )));
    }
    let steps = traj.n_steps();
    if n_mea == 0 || n_mea > steps {
        return Err(Error::config(format!(
            "n_mea = {n_mea} must be in [1, {steps}] recorded steps"
        )));
    }
    let offset = ChaCha8Rng::seed_from_u64(seed).gen_range(0..n);
    let mut records = Vec::with_capacity(n_probes * n_mea);
    for p in 0..n_probes {
        let vehicle = (offset + p * n / n_probes) % n;
        for j in 0..n_mea {
            let k = if n_mea == 1 {
                0
            } else {
                ((j * (steps - 1)) as f64 / (n_mea - 1) as f64).round() as usize
            };
            let row = traj.positions.row(k);
            let gap = forward_gap(row.as_slice().expect("contiguous"), vehicle);
            records.push(ProbeRecord {
                probe: vehicle,
                t: traj.times[k],
                x: row[vehicle],
                rho: spacing_density(gap, traj.jam_gap)?,
                v: traj.speeds[[k, vehicle]].clamp(0.0, 1.0),
            });
        }
    }
    Ok(ProbeDataset {
        records,
        n_probes,
        n_mea,
    })
}

/// Piecewise-constant macroscopic field: each node takes the spacing
/// density of the vehicle pair around it and the follower's speed, at the
/// nearest recorded step.
pub fn ground_truth_grid(traj: &Trajectories, n_t: usize, n_x: usize, scales: Scales) -> Result<GridField> {
    if n_t == 0 || n_x == 0 || traj.n_steps() == 0 {
        return Err(Error::config("ground truth grid needs non-empty axes and trajectories"));
    }
    let n = traj.n_vehicles();
    let mut rho = Array2::zeros((n_t, n_x));
    let mut vel = Array2::zeros((n_t, n_x));
    let mut order: Vec<usize> = (0..n).collect();
    for m in 0..n_t {
        let k = nearest_step(&traj.times, time_node(m, n_t));
        let row = traj.positions.row(k);
        let pos = row.as_slice().expect("contiguous");
        order.sort_by(|&a, &b| pos[a].total_cmp(&pos[b]));
        let sorted: Vec<f64> = order.iter().map(|&i| pos[i]).collect();
        for c in 0..n_x {
            let x = space_node(c, n_x);
            // last vehicle at or behind x; wraps to the last one on the ring
            let idx = sorted.partition_point(|&p| p <= x);
            let follower = order[(idx + n - 1) % n];
            rho[[m, c]] = spacing_density(forward_gap(pos, follower), traj.jam_gap)?;
            vel[[m, c]] = traj.speeds[[k, follower]].clamp(0.0, 1.0);
        }
    }
    GridField::new(rho, vel, scales)
}

fn nearest_step(times: &[f64], t: f64) -> usize {
    let idx = times.partition_point(|&s| s < t);
    if idx == 0 {
        0
    } else if idx == times.len() {
        times.len() - 1
    } else if (times[idx] - t) < (t - times[idx - 1]) {
        idx
    } else {
        idx - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scales_with_jam(jam_gap: f64, speed_ratio: f64) -> Scales {
        // L = 1000, T = 1000, so speed_ratio = v_max
        Scales::new(1000.0, 1000.0, speed_ratio, jam_gap * 1000.0).unwrap()
    }

    #[test]
    fn spacing_density_examples() {
        let jam = 0.004;
        assert_eq!(spacing_density(jam, jam).unwrap(), 1.0);
        assert!((spacing_density(2.0 * jam, jam).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(spacing_density(0.5 * jam, jam), Err(Error::ModelViolation(_))));
        // the leader of the last vehicle is vehicle 0, across the origin
        let p = [0.1, 0.5, 0.9];
        assert!((forward_gap(&p, 2) - 0.2).abs() < 1e-15);
        assert!((spacing_density(forward_gap(&p, 2), 0.1).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pair_moves_uniformly() {
        let ring = Ring {
            jam_gap: 0.2,
            speed_ratio: 1.0,
        };
        let s = RingState {
            positions: vec![0.0, 0.5],
            time: 0.0,
        };
        let v = ring.speeds(&s, &VeqSpec::Greenshields, &[]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.6).abs() < 1e-15);
        let next = ring.step(&s, &VeqSpec::Greenshields, &[], 0.01).unwrap();
        assert!((forward_gap(&next.positions, 0) - 0.5).abs() < 1e-14);
        assert!((forward_gap(&next.positions, 1) - 0.5).abs() < 1e-14);
        let same = ring.step(&s, &VeqSpec::Greenshields, &[], 0.0).unwrap();
        assert_eq!(same.positions, s.positions);
    }

    #[test]
    fn stopped_leader_is_approached_without_overlap() {
        let jam = 0.05;
        let ring = Ring {
            jam_gap: jam,
            speed_ratio: 1.0,
        };
        // vehicle 1 sits inside a zone with v_cap = 0 for the whole run
        let zone = DisturbanceZone {
            t_start: 0.0,
            t_end: 100.0,
            x_start: 0.45,
            x_end: 0.55,
            v_cap: 0.0,
        };
        let mut s = RingState {
            positions: vec![0.2, 0.5, 0.8],
            time: 0.0,
        };
        let dt = 0.5 * jam;
        let mut prev_gap = forward_gap(&s.positions, 0);
        let mut last_speed = 1.0;
        for _ in 0..4000 {
            s = ring.step(&s, &VeqSpec::Greenshields, &[zone], dt).unwrap();
            let g = forward_gap(&s.positions, 0);
            assert!(g <= prev_gap + 1e-15, "gap grew");
            assert!(g >= jam * (1.0 - 1e-9), "overlap");
            prev_gap = g;
            last_speed = ring.speeds(&s, &VeqSpec::Greenshields, &[zone]).unwrap()[0];
        }
        assert!(prev_gap - jam < 1e-3);
        assert!(last_speed < 0.02);
        assert!((s.positions[1] - 0.5).abs() < 1e-15, "capped vehicle must not move");
    }

    #[test]
    fn oversized_step_is_rejected() {
        let ring = Ring {
            jam_gap: 0.1,
            speed_ratio: 1.0,
        };
        let zone = DisturbanceZone {
            t_start: 0.0,
            t_end: 1.0,
            x_start: 0.4,
            x_end: 0.6,
            v_cap: 0.0,
        };
        let s = RingState {
            positions: vec![0.2, 0.5],
            time: 0.0,
        };
        assert!(matches!(
            ring.step(&s, &VeqSpec::Greenshields, &[zone], 0.5),
            Err(Error::StepSize(_))
        ));
    }

    #[test]
    fn uniform_flow_is_a_fixed_point() {
        let scales = Scales::default();
        let cfg = SimConfig {
            perturbation: 0.0,
            ..SimConfig::equilibrium()
        };
        let traj = run_simulation(&cfg, &VeqSpec::Greenshields, &scales).unwrap();
        let probes = sample_probes(&traj, 0.02, 50, 1).unwrap();
        assert_eq!(probes.n_probes, 2);
        for r in &probes.records {
            assert!((r.rho - 0.4).abs() < 1e-9, "{}", r.rho);
            assert!((r.v - 0.6).abs() < 1e-9);
        }
        let g = ground_truth_grid(&traj, 16, 32, scales).unwrap();
        assert!(g.rho.iter().all(|&r| (r - 0.4).abs() < 1e-9));
        assert!(g.vel.iter().all(|&v| (v - 0.6).abs() < 1e-9));
    }

    #[test]
    fn simulation_is_deterministic() {
        let scales = Scales::default();
        let cfg = SimConfig::equilibrium();
        let a = run_simulation(&cfg, &VeqSpec::Greenshields, &scales).unwrap();
        let b = run_simulation(&cfg, &VeqSpec::Greenshields, &scales).unwrap();
        assert_eq!(a, b);
        let pa = sample_probes(&a, 0.05, 100, 9).unwrap();
        let pb = sample_probes(&b, 0.05, 100, 9).unwrap();
        assert_eq!(pa.to_csv_string(), pb.to_csv_string());
    }

    #[test]
    fn disturbance_creates_upstream_congestion() {
        let scales = Scales::default();
        let cfg = SimConfig::transient();
        let traj = run_simulation(&cfg, &VeqSpec::Greenshields, &scales).unwrap();
        let g = ground_truth_grid(&traj, 101, 200, scales).unwrap();
        let zone = cfg.regime.zones()[0];
        // shortly after activation, upstream of the zone
        let m = (0.2 * 100.0) as usize;
        let upstream = (0..200)
            .filter(|&c| {
                let x = c as f64 / 200.0;
                x < zone.x_start && x > zone.x_start - 0.1
            })
            .map(|c| g.rho[[m, c]])
            .fold(0.0, f64::max);
        assert!(upstream > cfg.mean_density + 0.1, "upstream max {upstream}");
        let downstream = (0..200)
            .filter(|&c| {
                let x = c as f64 / 200.0;
                x > zone.x_end && x < zone.x_end + 0.05
            })
            .map(|c| g.rho[[m, c]])
            .fold(1.0, f64::min);
        assert!(downstream < cfg.mean_density, "downstream min {downstream}");
    }

    #[test]
    fn probe_selection_and_errors() {
        let scales = scales_with_jam(0.004, 1.0);
        let cfg = SimConfig {
            perturbation: 0.0,
            ..SimConfig::equilibrium()
        };
        let traj = run_simulation(&cfg, &VeqSpec::Greenshields, &scales).unwrap();
        let all = sample_probes(&traj, 1.0, 3, 0).unwrap();
        assert_eq!(all.n_probes, 100);
        assert_eq!(all.len(), 300);
        assert!(sample_probes(&traj, 0.001, 3, 0).is_err());
        assert!(sample_probes(&traj, 0.02, traj.n_steps() + 1, 0).is_err());
        let one = sample_probes(&traj, 0.02, traj.n_steps(), 0).unwrap();
        for w in one.records.windows(2) {
            if w[0].probe == w[1].probe {
                assert!(w[1].t > w[0].t);
            }
        }
    }

    #[test]
    fn grid_mass_matches_vehicle_count() {
        let scales = Scales::default();
        let traj = run_simulation(&SimConfig::transient(), &VeqSpec::Greenshields, &scales).unwrap();
        let n_x = 2000;
        let g = ground_truth_grid(&traj, 21, n_x, scales).unwrap();
        let exact = 100.0 * scales.jam_gap();
        for m in 0..g.n_t() {
            let mean = g.rho.row(m).mean().unwrap();
            // one cell of width 1/n_x per vehicle can be misassigned
            let slack = 100.0 / n_x as f64;
            assert!((mean - exact).abs() <= slack * 1.0, "slice {m}: {mean} vs {exact}");
        }
    }

    #[test]
    fn grid_refinement_is_piecewise_constant() {
        let scales = Scales::default();
        let traj = run_simulation(&SimConfig::equilibrium(), &VeqSpec::Greenshields, &scales).unwrap();
        let coarse = ground_truth_grid(&traj, 5, 100, scales).unwrap();
        let fine = ground_truth_grid(&traj, 5, 200, scales).unwrap();
        for m in 0..5 {
            for c in 0..100 {
                assert_eq!(coarse.rho[[m, c]], fine.rho[[m, 2 * c]]);
            }
        }
    }

    #[test]
    fn config_validation() {
        let s = Scales::default();
        assert!(SimConfig::equilibrium().validate(&s).is_ok());
        assert!(SimConfig::transient().validate(&s).is_ok());
        let too_dense = SimConfig {
            mean_density: 0.3,
            ..SimConfig::equilibrium()
        };
        assert!(too_dense.validate(&s).is_err());
        let big_dt = SimConfig {
            dt: Some(1.0),
            ..SimConfig::equilibrium()
        };
        assert!(matches!(big_dt.validate(&s), Err(Error::StepSize(_))));
    }
}
