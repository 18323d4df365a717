//! Two-stage physics-informed fit.
//!
//! Stage 1 fits the density network and the equilibrium-velocity network
//! under the LWR residual. Stage 2 keeps the equilibrium velocity fixed and
//! fits density and velocity under the conservative ARZ residual.
//!
//! Residuals are written in normalized units: every spatial flux term
//! carries the speed ratio `c = v_max * horizon / road_length`, and the
//! relaxation time is in horizon units.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagram::{VeqChoice, VeqSpec, V_MAX};
use crate::error::{Error, Result};
use crate::microsim::ProbeDataset;
use crate::net::{ensure_finite, Checkpoint, InitScheme, SharedHeadNet, StateJetGrad, VeqNet};
use crate::scales::Scales;

/// Collocation points per parallel work item. Chunks are reduced in order so
/// results do not depend on the thread count.
const CHUNK: usize = 512;

/// Consecutive bad steps tolerated before a run is declared diverged.
const DIVERGENCE_PATIENCE: usize = 100;
const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    pub points: Vec<[f64; 2]>,
    pub seed: u64,
}

impl CollocationSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Seeded i.i.d. uniform points `(t, x)` on the unit square.
pub fn sample_collocation(n_phys: usize, seed: u64) -> Result<CollocationSet> {
    if n_phys == 0 {
        return Err(Error::config("n_phys must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n_phys).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
    Ok(CollocationSet { points, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Weight of the mean squared residual.
    pub lambda: f64,
    /// Weight of the monotonicity penalty on the learned `V_eq` (stage 1).
    pub mu: f64,
    /// Relaxation time in horizon units (stage 2).
    pub tau: f64,
    pub veq: VeqChoice,
    pub n_phys: usize,
    /// Size of the density grid `j / (n_pen - 1)` for the penalty.
    pub n_pen: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// The step is multiplied by `lr_decay` every `lr_decay_every` iterations.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Feature-network widths; the last one is the latent dimension.
    pub hidden: Vec<usize>,
    /// Hidden widths of the `Psi` network.
    pub veq_hidden: Vec<usize>,
    /// Stage 2: start from the stage-1 features and density head.
    pub warm_start: bool,
    /// Stage 2: keep the feature network fixed.
    pub freeze_features: bool,
    /// Stage 2: iterations at the start during which only the velocity head
    /// is updated, so the fresh head can settle near the equilibrium before
    /// the stiff relaxation source reaches the density.
    pub head_warmup: usize,
    pub resample_collocation: bool,
    pub seed: u64,
    pub log_every: usize,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            lambda: 0.1,
            mu: 1.0,
            tau: Scales::default().normalize_duration(10.0),
            veq: VeqChoice::Learned,
            n_phys: 4096,
            n_pen: 101,
            iterations: 20_000,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            lr_decay_every: 1000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            hidden: vec![64, 64, 64],
            veq_hidden: vec![32, 32],
            warm_start: true,
            freeze_features: false,
            head_warmup: 2000,
            resample_collocation: false,
            seed: 0,
            log_every: 500,
        }
    }

    pub fn stage2() -> Self {
        Self {
            iterations: 30_000,
            ..Self::stage1()
        }
    }

    pub fn validate(&self, stage: u8) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return fail(format!("mu must be non-negative, got {}", self.mu));
        }
        if stage == 2 && !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.n_phys == 0 || self.n_pen < 2 {
            return fail("n_phys must be >= 1 and n_pen >= 2".into());
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return fail("learning rate, decay and decay interval must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return fail("Adam needs beta1, beta2 in [0, 1) and epsilon > 0".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.veq_hidden.contains(&0) {
            return fail("network widths must be non-empty and positive".into());
        }
        if self.log_every == 0 {
            return fail("log_every must be positive".into());
        }
        Ok(())
    }

    fn learning_rate_at(&self, iteration: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((iteration / self.lr_decay_every) as i32)
    }

    fn veq_widths(&self) -> Vec<usize> {
        let mut w = vec![1];
        w.extend_from_slice(&self.veq_hidden);
        w.push(1);
        w
    }
}

/// Loss broken into its terms. `penalty` is zero in stage 2.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub data: f64,
    pub physics: f64,
    pub penalty: f64,
}

impl LossTerms {
    fn finish(mut self) -> Self {
        self.total = self.data + self.physics + self.penalty;
        self
    }
}

/// Network values and first input derivatives at one point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PointState {
    pub rho: f64,
    pub rho_t: f64,
    pub rho_x: f64,
    pub v: f64,
    pub v_t: f64,
    pub v_x: f64,
}

impl PointState {
    pub fn of_net(net: &SharedHeadNet, t: f64, x: f64) -> Self {
        let (val, dt, dx) = net.forward_with_input_derivs(t, x);
        Self {
            rho: val[0],
            rho_t: dt[0],
            rho_x: dx[0],
            v: val[1],
            v_t: dt[1],
            v_x: dx[1],
        }
    }
}

/// `rho_t + c (V + rho V') rho_x` given `V` and `V'` at `s.rho`.
pub fn lwr_residual_with(s: &PointState, v: f64, dv: f64, speed_ratio: f64) -> f64 {
    s.rho_t + speed_ratio * (v + s.rho * dv) * s.rho_x
}

pub fn lwr_residual_at(s: &PointState, veq: &VeqSpec, speed_ratio: f64) -> f64 {
    let (v, dv) = veq.value_and_slope(s.rho);
    lwr_residual_with(s, v, dv, speed_ratio)
}

/// Mass and `rho w` residuals of the ARZ system with `w = v + p(rho)`.
pub fn arz_residual_at(s: &PointState, veq: &VeqSpec, tau: f64, speed_ratio: f64) -> (f64, f64) {
    let c = speed_ratio;
    let (ve, dve) = veq.value_and_slope(s.rho);
    let w = s.v + V_MAX - ve;
    let w_t = s.v_t - dve * s.rho_t;
    let w_x = s.v_x - dve * s.rho_x;
    let r1 = s.rho_t + c * (s.rho_x * s.v + s.rho * s.v_x);
    let r2 = s.rho_t * w + s.rho * w_t + c * (s.rho_x * s.v * w + s.rho * s.v_x * w + s.rho * s.v * w_x)
        - s.rho / tau * (ve - s.v);
    (r1, r2)
}

pub fn lwr_residual(net: &SharedHeadNet, veq: &VeqSpec, speed_ratio: f64, t: f64, x: f64) -> f64 {
    lwr_residual_at(&PointState::of_net(net, t, x), veq, speed_ratio)
}

pub fn arz_residual(net: &SharedHeadNet, veq: &VeqSpec, tau: f64, speed_ratio: f64, t: f64, x: f64) -> (f64, f64) {
    arz_residual_at(&PointState::of_net(net, t, x), veq, tau, speed_ratio)
}

/// `V` and `V'` at a batch of densities, keeping what the reverse pass needs.
enum VeqEval {
    Greenshields { value: Vec<f64>, slope: Vec<f64> },
    Learned(crate::net::VeqBatch),
}

impl VeqEval {
    fn new(spec: &VeqSpec, rhos: &[f64]) -> Self {
        match spec {
            VeqSpec::Greenshields => Self::Greenshields {
                value: rhos.iter().map(|r| V_MAX * (1.0 - r)).collect(),
                slope: vec![-V_MAX; rhos.len()],
            },
            VeqSpec::Learned(net) => Self::Learned(net.eval_batch(rhos)),
        }
    }

    fn value(&self) -> &[f64] {
        match self {
            Self::Greenshields { value, .. } => value,
            Self::Learned(b) => &b.value,
        }
    }

    fn slope(&self) -> &[f64] {
        match self {
            Self::Greenshields { slope, .. } => slope,
            Self::Learned(b) => &b.slope,
        }
    }

    /// Density gradient from `(dL/dV, dL/dV')`; accumulates the `Psi`
    /// gradient into `grad_phi` for a learned diagram.
    fn backward(&self, spec: &VeqSpec, g_value: &[f64], g_slope: &[f64], grad_phi: &mut [f64]) -> Vec<f64> {
        match (self, spec) {
            (Self::Learned(b), VeqSpec::Learned(net)) => net.backward(b, g_value, g_slope, grad_phi),
            _ => g_value.iter().map(|g| -V_MAX * g).collect(),
        }
    }
}

fn phi_len(veq: &VeqSpec) -> usize {
    veq.network().map_or(0, |n| n.n_params())
}

/// Partial sums from one chunk of points.
struct Partial {
    loss: f64,
    net: Vec<f64>,
    phi: Vec<f64>,
}

fn reduce(parts: Vec<Result<Partial>>, n_net: usize, n_phi: usize) -> Result<Partial> {
    let mut acc = Partial {
        loss: 0.0,
        net: vec![0.0; n_net],
        phi: vec![0.0; n_phi],
    };
    for p in parts {
        let p = p?;
        acc.loss += p.loss;
        acc.net.iter_mut().zip(&p.net).for_each(|(a, b)| *a += b);
        acc.phi.iter_mut().zip(&p.phi).for_each(|(a, b)| *a += b);
    }
    Ok(acc)
}

fn backprop(net: &SharedHeadNet, tape: &crate::net::StateTape, g: &StateJetGrad, term: &str) -> Result<Vec<f64>> {
    for ch in [&g.rho, &g.rho_t, &g.rho_x, &g.v, &g.v_t, &g.v_x] {
        ensure_finite(term, ch.iter().copied())?;
    }
    let mut grad = vec![0.0; net.n_params()];
    net.backward(tape, g, &mut grad);
    Ok(grad)
}

/// Data term `(1/N) sum (rho - rho_hat)^2 [+ (v - v_hat)^2]`.
fn data_term(net: &SharedHeadNet, probes: &ProbeDataset, with_velocity: bool) -> Result<Partial> {
    let points = probes.points();
    let n = points.len() as f64;
    let (jet, tape) = net.eval_batch(&points, false);
    let mut g = StateJetGrad::zeros(points.len());
    let mut loss = 0.0;
    for (i, rec) in probes.records.iter().enumerate() {
        let er = jet.rho[i] - rec.rho;
        loss += er * er;
        g.rho[i] = 2.0 * er / n;
        if with_velocity {
            let ev = jet.v[i] - rec.v;
            loss += ev * ev;
            g.v[i] = 2.0 * ev / n;
        }
    }
    ensure_finite("data term", std::iter::once(loss))?;
    Ok(Partial {
        loss: loss / n,
        net: backprop(net, &tape, &g, "data term")?,
        phi: Vec::new(),
    })
}

fn lwr_chunk(net: &SharedHeadNet, veq: &VeqSpec, points: &[[f64; 2]], scale: f64, c: f64) -> Result<Partial> {
    let (jet, tape) = net.eval_batch(points, true);
    let ve = VeqEval::new(veq, &jet.rho);
    let (v, dv) = (ve.value(), ve.slope());
    let b = points.len();
    let mut g = StateJetGrad::zeros(b);
    let (mut g_v, mut g_dv) = (vec![0.0; b], vec![0.0; b]);
    let mut loss = 0.0;
    for i in 0..b {
        let (rho, rho_x) = (jet.rho[i], jet.rho_x[i]);
        let r = jet.rho_t[i] + c * (v[i] + rho * dv[i]) * rho_x;
        loss += r * r;
        let gr = 2.0 * scale * r;
        g.rho_t[i] = gr;
        g.rho_x[i] = gr * c * (v[i] + rho * dv[i]);
        g.rho[i] = gr * c * dv[i] * rho_x;
        g_v[i] = gr * c * rho_x;
        g_dv[i] = gr * c * rho * rho_x;
    }
    ensure_finite("LWR residual", std::iter::once(loss))?;
    let mut phi = vec![0.0; phi_len(veq)];
    let g_rho = ve.backward(veq, &g_v, &g_dv, &mut phi);
    g.rho.iter_mut().zip(&g_rho).for_each(|(a, b)| *a += b);
    Ok(Partial {
        loss: scale * loss,
        net: backprop(net, &tape, &g, "LWR residual")?,
        phi,
    })
}

#[allow(clippy::too_many_arguments)]
fn arz_chunk(net: &SharedHeadNet, veq: &VeqSpec, points: &[[f64; 2]], scale: f64, c: f64, tau: f64) -> Result<Partial> {
    let (jet, tape) = net.eval_batch(points, true);
    let ve = VeqEval::new(veq, &jet.rho);
    let (vv, dvv) = (ve.value(), ve.slope());
    let b = points.len();
    let mut g = StateJetGrad::zeros(b);
    let (mut g_ve, mut g_dve) = (vec![0.0; b], vec![0.0; b]);
    let mut loss = 0.0;
    for i in 0..b {
        let (rho, rho_t, rho_x) = (jet.rho[i], jet.rho_t[i], jet.rho_x[i]);
        let (v, v_t, v_x) = (jet.v[i], jet.v_t[i], jet.v_x[i]);
        let (ve_i, dve) = (vv[i], dvv[i]);
        let w = v + V_MAX - ve_i;
        let w_t = v_t - dve * rho_t;
        let w_x = v_x - dve * rho_x;
        let r1 = rho_t + c * (rho_x * v + rho * v_x);
        let r2 = rho_t * w + rho * w_t + c * (rho_x * v * w + rho * v_x * w + rho * v * w_x) - rho / tau * (ve_i - v);
        loss += r1 * r1 + r2 * r2;
        let g1 = 2.0 * scale * r1;
        let g2 = 2.0 * scale * r2;

        // r1
        let mut gr_t = g1;
        let mut gr_x = g1 * c * v;
        let mut gr = g1 * c * v_x;
        let mut gv = g1 * c * rho_x;
        let mut gv_x = g1 * c * rho;
        let mut gv_t = 0.0;

        // r2, direct dependence
        gr_t += g2 * w;
        gr += g2 * (w_t + c * (v_x * w + v * w_x) - (ve_i - v) / tau);
        gr_x += g2 * c * v * w;
        gv += g2 * (c * (rho_x * w + rho * w_x) + rho / tau);
        gv_x += g2 * c * rho * w;
        let mut g_vei = -g2 * rho / tau;

        // r2 through w, w_t, w_x
        let gw = g2 * (rho_t + c * (rho_x * v + rho * v_x));
        let gwt = g2 * rho;
        let gwx = g2 * c * rho * v;
        gv += gw;
        g_vei -= gw;
        gv_t += gwt;
        gr_t -= gwt * dve;
        gv_x += gwx;
        gr_x -= gwx * dve;
        let g_dvei = -gwt * rho_t - gwx * rho_x;

        g.rho[i] = gr;
        g.rho_t[i] = gr_t;
        g.rho_x[i] = gr_x;
        g.v[i] = gv;
        g.v_t[i] = gv_t;
        g.v_x[i] = gv_x;
        g_ve[i] = g_vei;
        g_dve[i] = g_dvei;
    }
    ensure_finite("ARZ residual", std::iter::once(loss))?;
    // the diagram is fixed in stage 2; its parameter gradient is discarded
    let mut scratch = vec![0.0; phi_len(veq)];
    let g_rho = ve.backward(veq, &g_ve, &g_dve, &mut scratch);
    g.rho.iter_mut().zip(&g_rho).for_each(|(a, b)| *a += b);
    Ok(Partial {
        loss: scale * loss,
        net: backprop(net, &tape, &g, "ARZ residual")?,
        phi: Vec::new(),
    })
}

/// `(mu / n_pen) sum_j max(0, V'(rho_j))^2` on `rho_j = j / (n_pen - 1)`.
fn monotonicity_penalty(veq: &VeqSpec, n_pen: usize, mu: f64) -> Result<Partial> {
    let n_phi = phi_len(veq);
    if n_phi == 0 || mu == 0.0 {
        return Ok(Partial {
            loss: 0.0,
            net: Vec::new(),
            phi: vec![0.0; n_phi],
        });
    }
    let grid: Vec<f64> = (0..n_pen).map(|j| j as f64 / (n_pen - 1) as f64).collect();
    let ve = VeqEval::new(veq, &grid);
    let scale = mu / n_pen as f64;
    let mut loss = 0.0;
    let mut g_dv = vec![0.0; n_pen];
    for (g, &s) in g_dv.iter_mut().zip(ve.slope()) {
        let h = s.max(0.0);
        loss += h * h;
        *g = 2.0 * scale * h;
    }
    ensure_finite("monotonicity penalty", std::iter::once(loss))?;
    let mut phi = vec![0.0; n_phi];
    ve.backward(veq, &vec![0.0; n_pen], &g_dv, &mut phi);
    Ok(Partial {
        loss: scale * loss,
        net: Vec::new(),
        phi,
    })
}

fn check_inputs(probes: &ProbeDataset, colloc: &CollocationSet) -> Result<()> {
    if probes.is_empty() || colloc.is_empty() {
        return Err(Error::config("loss needs at least one probe record and one collocation point"));
    }
    Ok(())
}

/// Stage-1 loss and its gradient over `[net params, Psi params]` (the second
/// block is empty for a Greenshields diagram).
pub fn loss_stage1(
    net: &SharedHeadNet,
    veq: &VeqSpec,
    probes: &ProbeDataset,
    colloc: &CollocationSet,
    config: &StageConfig,
    speed_ratio: f64,
) -> Result<(LossTerms, Vec<f64>)> {
    check_inputs(probes, colloc)?;
    let n_net = net.n_params();
    let n_phi = phi_len(veq);
    let data = data_term(net, probes, false)?;
    let scale = config.lambda / colloc.len() as f64;
    let parts: Vec<_> = colloc
        .points
        .par_chunks(CHUNK)
        .map(|pts| lwr_chunk(net, veq, pts, scale, speed_ratio))
        .collect();
    let phys = reduce(parts, n_net, n_phi)?;
    let pen = monotonicity_penalty(veq, config.n_pen, config.mu)?;
    let terms = LossTerms {
        data: data.loss,
        physics: phys.loss,
        penalty: pen.loss,
        ..Default::default()
    }
    .finish();
    let mut grad: Vec<f64> = data.net.iter().zip(&phys.net).map(|(a, b)| a + b).collect();
    grad.extend(phys.phi.iter().zip(&pen.phi).map(|(a, b)| a + b));
    ensure_finite("stage-1 gradient", grad.iter().copied())?;
    Ok((terms, grad))
}

/// Stage-2 loss and its gradient over the state-network parameters.
pub fn loss_stage2(
    net: &SharedHeadNet,
    veq: &VeqSpec,
    probes: &ProbeDataset,
    colloc: &CollocationSet,
    config: &StageConfig,
    speed_ratio: f64,
) -> Result<(LossTerms, Vec<f64>)> {
    check_inputs(probes, colloc)?;
    if !net.has_velocity_head() {
        return Err(Error::config("stage 2 needs a network with a velocity head"));
    }
    if !(config.tau > 0.0) {
        return Err(Error::Domain {
            what: "tau",
            value: config.tau,
            domain: "(0, inf)",
        });
    }
    let n_net = net.n_params();
    let data = data_term(net, probes, true)?;
    let scale = config.lambda / colloc.len() as f64;
    let parts: Vec<_> = colloc
        .points
        .par_chunks(CHUNK)
        .map(|pts| arz_chunk(net, veq, pts, scale, speed_ratio, config.tau))
        .collect();
    let phys = reduce(parts, n_net, 0)?;
    let terms = LossTerms {
        data: data.loss,
        physics: phys.loss,
        ..Default::default()
    }
    .finish();
    let grad: Vec<f64> = data.net.iter().zip(&phys.net).map(|(a, b)| a + b).collect();
    ensure_finite("stage-2 gradient", grad.iter().copied())?;
    Ok((terms, grad))
}

/// Adaptive-moment gradient descent.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainStatus {
    Completed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    #[serde(flatten)]
    pub terms: LossTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: u8,
    pub seed: u64,
    pub status: TrainStatus,
    pub message: Option<String>,
    pub iterations_run: usize,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_iteration: usize,
    pub final_loss: f64,
    pub trace: Vec<LossRecord>,
    /// The only field that varies between identical runs.
    pub wall_time_s: f64,
    pub config: StageConfig,
}

impl TrainReport {
    pub fn diverged(&self) -> bool {
        self.status == TrainStatus::Diverged
    }

    pub fn best_terms(&self) -> Option<&LossTerms> {
        self.trace.iter().find(|r| r.iteration == self.best_iteration).map(|r| &r.terms)
    }
}

/// Trained parameters (best iterate) and the run report.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

fn collocation_seed(seed: u64) -> u64 {
    seed ^ 0xC011_0CA7_1017
}

/// Full-batch optimization loop shared by both stages. `loss` maps a flat
/// parameter vector and the collocation set to terms and gradient.
/// `frozen(it)` is the length of the parameter prefix held fixed at `it`.
fn optimize<Z, F>(mut params: Vec<f64>, config: &StageConfig, stage: u8, frozen: Z, mut loss: F) -> Result<(Vec<f64>, TrainReport)>
where
    Z: Fn(usize) -> usize,
    F: FnMut(&[f64], &CollocationSet) -> Result<(LossTerms, Vec<f64>)>,
{
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(collocation_seed(config.seed));
    let mut colloc = sample_collocation(config.n_phys, collocation_seed(config.seed))?;
    let mut adam = Adam::new(params.len(), config.beta1, config.beta2, config.epsilon);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut trace = Vec::new();
    let mut bad_steps = 0;
    let mut initial_loss = f64::NAN;
    let mut last = LossTerms::default();
    let mut status = TrainStatus::Completed;
    let mut message = None;
    let mut iterations_run = 0;

    // iteration `iterations` only evaluates, so the final iterate competes for best
    for it in 0..=config.iterations {
        if config.resample_collocation && it > 0 {
            colloc = sample_collocation(config.n_phys, rng.gen())?;
        }
        let (terms, grad) = match loss(&params, &colloc) {
            Ok(v) => v,
            Err(Error::Numeric { term }) => {
                message.get_or_insert_with(|| format!("non-finite value in {term} at iteration {it}"));
                let nan = f64::NAN;
                let terms = LossTerms {
                    total: nan,
                    data: nan,
                    physics: nan,
                    penalty: nan,
                };
                (terms, Vec::new())
            }
            Err(e) => return Err(e),
        };
        if it == 0 {
            initial_loss = terms.total;
        }
        last = terms;
        let finite = terms.total.is_finite();
        if finite && best.as_ref().map_or(true, |b| terms.total < b.0) {
            best = Some((terms.total, it, params.clone()));
        }
        if it % config.log_every == 0 || it == config.iterations || !finite {
            trace.push(LossRecord { iteration: it, terms });
            log::info!(
                "stage {stage} it {it}: loss {:.6e} (data {:.3e}, physics {:.3e}, penalty {:.3e})",
                terms.total,
                terms.data,
                terms.physics,
                terms.penalty
            );
        }
        if it == config.iterations {
            break;
        }
        if !finite || terms.total > DIVERGENCE_LOSS {
            bad_steps += 1;
        } else {
            bad_steps = 0;
        }
        // a non-finite loss at fixed collocation repeats identically, so
        // waiting out the patience window cannot change the outcome
        let stuck = !finite && !config.resample_collocation;
        if bad_steps >= DIVERGENCE_PATIENCE || stuck {
            status = TrainStatus::Diverged;
            message.get_or_insert_with(|| format!("loss {} at iteration {it}", terms.total));
            log::error!("stage {stage} diverged at iteration {it}");
            break;
        }
        if finite {
            let mut g = grad;
            g[..frozen(it)].iter_mut().for_each(|x| *x = 0.0);
            adam.update(&mut params, &g, config.learning_rate_at(it));
        }
        iterations_run = it + 1;
    }
    let (best_loss, best_iteration, best_params) = best.unwrap_or((f64::NAN, 0, params));
    let report = TrainReport {
        stage,
        seed: config.seed,
        status,
        message,
        iterations_run,
        initial_loss,
        best_loss,
        best_iteration,
        final_loss: last.total,
        trace,
        wall_time_s: start.elapsed().as_secs_f64(),
        config: config.clone(),
    };
    Ok((best_params, report))
}

/// Stage 1: fits the density network (and `Psi` when the diagram is learned)
/// under the LWR residual.
pub fn train_stage1(probes: &ProbeDataset, config: &StageConfig, scales: &Scales) -> Result<StageOutcome> {
    config.validate(1)?;
    let scheme = InitScheme::FanInUniform;
    let mut net = SharedHeadNet::new(&config.hidden, false, config.seed, scheme);
    let veq0 = match config.veq {
        VeqChoice::Greenshields => None,
        VeqChoice::Learned => Some(VeqNet::new(&config.veq_widths(), config.seed.wrapping_add(1), scheme)),
    };
    let n_net = net.n_params();
    let mut params = net.params();
    if let Some(v) = &veq0 {
        params.extend_from_slice(v.params());
    }
    let c = scales.speed_ratio();
    let mut veq_net = veq0.clone();
    let split = |p: &[f64], net: &mut SharedHeadNet, veq: &mut Option<VeqNet>| -> VeqSpec {
        net.set_params(&p[..n_net]);
        match veq {
            Some(v) => {
                v.set_params(&p[n_net..]);
                VeqSpec::learned(v.clone())
            }
            None => VeqSpec::Greenshields,
        }
    };
    let (best, report) = optimize(std::mem::take(&mut params), config, 1, |_| 0, |p, colloc| {
        let spec = split(p, &mut net, &mut veq_net);
        loss_stage1(&net, &spec, probes, colloc, config, c)
    })?;
    let _ = split(&best, &mut net, &mut veq_net);
    Ok(StageOutcome {
        checkpoint: Checkpoint { net, veq: veq_net },
        report,
    })
}

/// Stage 2: fits density and velocity under the ARZ residual with the
/// diagram `veq` held fixed. With `warm_start` the features and density
/// head come from `warm` and the velocity head is fresh.
pub fn train_stage2(
    probes: &ProbeDataset,
    veq: &VeqSpec,
    warm: Option<&SharedHeadNet>,
    config: &StageConfig,
    scales: &Scales,
) -> Result<StageOutcome> {
    config.validate(2)?;
    let scheme = InitScheme::FanInUniform;
    let mut net = match (config.warm_start, warm) {
        (true, Some(w)) => w.density_only().with_fresh_velocity_head(config.seed.wrapping_add(2), scheme),
        (true, None) => {
            return Err(Error::config("warm start requested but no stage-1 network was given"));
        }
        (false, _) => SharedHeadNet::new(&config.hidden, true, config.seed, scheme),
    };
    let fixed = if config.freeze_features { net.n_feature_params() } else { 0 };
    let head_start = net.velocity_head_range().map_or(0, |r| r.start);
    let frozen = |it: usize| if it < config.head_warmup { head_start } else { fixed };
    let c = scales.speed_ratio();
    let (best, report) = optimize(net.params(), config, 2, frozen, |p, colloc| {
        net.set_params(p);
        loss_stage2(&net, veq, probes, colloc, config, c)
    })?;
    net.set_params(&best);
    Ok(StageOutcome {
        checkpoint: Checkpoint {
            net,
            veq: veq.network().cloned(),
        },
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microsim::ProbeRecord;
    use std::f64::consts::PI;

    fn probes_from(values: &[(f64, f64, f64, f64)]) -> ProbeDataset {
        let records = values
            .iter()
            .enumerate()
            .map(|(k, &(t, x, rho, v))| ProbeRecord {
                probe: k % 3,
                t,
                x,
                rho,
                v,
            })
            .collect();
        ProbeDataset {
            records,
            n_probes: 3,
            n_mea: values.len().div_ceil(3),
        }
    }

    fn random_probes(seed: u64, n: usize) -> ProbeDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<_> = (0..n)
            .map(|_| (rng.gen(), rng.gen(), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)))
            .collect();
        probes_from(&v)
    }

    /// Network whose only nonzero parameters are the head biases.
    fn constant_net(rho: f64, v: Option<f64>) -> SharedHeadNet {
        let mut net = SharedHeadNet::new(&[4, 3], v.is_some(), 0, InitScheme::FanInUniform);
        let mut p = vec![0.0; net.n_params()];
        let nf = net.n_feature_params();
        p[nf + 3] = rho;
        if let Some(v) = v {
            p[nf + 7] = v;
        }
        net.set_params(&p);
        net
    }

    fn small_config() -> StageConfig {
        StageConfig {
            n_phys: 16,
            n_pen: 11,
            hidden: vec![5, 4],
            veq_hidden: vec![4],
            tau: 0.05,
            ..StageConfig::stage1()
        }
    }

    #[test]
    fn collocation_is_seeded_and_uniform() {
        let a = sample_collocation(1, 3).unwrap();
        assert_eq!(a.len(), 1);
        assert!(a.points[0].iter().all(|p| (0.0..1.0).contains(p)));
        assert_eq!(sample_collocation(50, 9).unwrap(), sample_collocation(50, 9).unwrap());
        let big = sample_collocation(10_000, 1).unwrap();
        let sigma = (1.0f64 / 12.0 / 10_000.0).sqrt();
        for k in 0..2 {
            let mean = big.points.iter().map(|p| p[k]).sum::<f64>() / 10_000.0;
            assert!((mean - 0.5).abs() < 3.0 * sigma, "mean {mean}");
        }
        assert!(sample_collocation(0, 1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(StageConfig::stage1().validate(1).is_ok());
        assert!(StageConfig::stage2().validate(2).is_ok());
        let bad = StageConfig {
            lambda: 0.0,
            ..StageConfig::stage1()
        };
        assert!(bad.validate(1).is_err());
        let bad = StageConfig {
            tau: 0.0,
            ..StageConfig::stage2()
        };
        assert!(bad.validate(1).is_ok());
        assert!(bad.validate(2).is_err());
    }

    #[test]
    fn residuals_vanish_on_constant_equilibrium() {
        let g = VeqSpec::Greenshields;
        let net = constant_net(0.3, Some(0.7));
        assert_eq!(lwr_residual(&net, &g, 9.7, 0.2, 0.4), 0.0);
        assert_eq!(arz_residual(&net, &g, 0.01, 9.7, 0.2, 0.4), (0.0, 0.0));
        // off equilibrium only the source survives
        let net = constant_net(0.3, Some(0.5));
        let (r1, r2) = arz_residual(&net, &g, 0.01, 9.7, 0.6, 0.1);
        assert_eq!(r1, 0.0);
        assert!((r2 + 0.3 / 0.01 * (0.7 - 0.5)).abs() < 1e-12);
    }

    /// A constant diagram `V = s` makes the flux linear, so any profile
    /// travels at speed `c s` and `0.4 + 0.1 sin(2 pi (x - c s t))` solves
    /// the conservation law exactly.
    #[test]
    fn lwr_residual_on_manufactured_field() {
        let (c, speed) = (9.68, 0.35);
        for &(t, x) in &[(0.1, 0.2), (0.5, 0.9), (0.77, 0.33)] {
            let k = 2.0 * PI * (x - c * speed * t);
            let st = PointState {
                rho: 0.4 + 0.1 * k.sin(),
                rho_t: -0.1 * 2.0 * PI * c * speed * k.cos(),
                rho_x: 0.1 * 2.0 * PI * k.cos(),
                ..Default::default()
            };
            assert!(lwr_residual_with(&st, speed, 0.0, c).abs() < 1e-8);
            let (vg, dvg) = VeqSpec::Greenshields.value_and_slope(st.rho);
            assert_eq!(lwr_residual_at(&st, &VeqSpec::Greenshields, c), lwr_residual_with(&st, vg, dvg, c));
        }
    }

    /// Residuals evaluated with network derivatives agree with residuals
    /// rebuilt from finite differences of the network output.
    #[test]
    fn residuals_match_finite_differences() {
        let net = SharedHeadNet::new(&[6, 5], true, 17, InitScheme::FanInUniform);
        let veq = VeqSpec::learned(VeqNet::new(&[1, 4, 1], 3, InitScheme::FanInUniform));
        let h = 1e-5;
        for &(t, x) in &[(0.3, 0.7), (0.81, 0.05)] {
            let (val, _, _) = net.forward_with_input_derivs(t, x);
            let d = |dt: f64, dx: f64| {
                let (p, _, _) = net.forward_with_input_derivs(t + dt, x + dx);
                let (m, _, _) = net.forward_with_input_derivs(t - dt, x - dx);
                [(p[0] - m[0]) / (2.0 * (dt + dx)), (p[1] - m[1]) / (2.0 * (dt + dx))]
            };
            let (ft, fx) = (d(h, 0.0), d(0.0, h));
            let fd = PointState {
                rho: val[0],
                rho_t: ft[0],
                rho_x: fx[0],
                v: val[1],
                v_t: ft[1],
                v_x: fx[1],
            };
            let a = lwr_residual(&net, &veq, 9.68, t, x);
            let b = lwr_residual_at(&fd, &veq, 9.68);
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-3), "{a} vs {b}");
            let (a1, a2) = arz_residual(&net, &veq, 0.05, 9.68, t, x);
            let (b1, b2) = arz_residual_at(&fd, &veq, 0.05, 9.68);
            assert!((a1 - b1).abs() <= 1e-6 * a1.abs().max(1e-3));
            assert!((a2 - b2).abs() <= 1e-6 * a2.abs().max(1e-3));
        }
    }

    #[test]
    fn relaxation_limit_leaves_transport_of_w() {
        // with v tied to V(rho) the source vanishes for every tau, so r2 is
        // the transport residual of rho w regardless of tau
        let c = 2.0;
        let st = |t: f64, x: f64| {
            let k = 2.0 * PI * (x - 0.3 * t);
            let rho = 0.4 + 0.1 * k.sin();
            let (rho_t, rho_x) = (-0.3 * 0.1 * 2.0 * PI * k.cos(), 0.1 * 2.0 * PI * k.cos());
            PointState {
                rho,
                rho_t,
                rho_x,
                v: 1.0 - rho,
                v_t: -rho_t,
                v_x: -rho_x,
            }
        };
        let s = st(0.2, 0.3);
        let reference = arz_residual_at(&s, &VeqSpec::Greenshields, 1.0, c).1;
        for tau in [1e-1, 1e-3, 1e-6, 1e-9] {
            let r2 = arz_residual_at(&s, &VeqSpec::Greenshields, tau, c).1;
            assert!((r2 - reference).abs() < 1e-12 * reference.abs().max(1.0));
        }
        // and w = 1 is constant, so r2 equals the mass residual
        let r1 = arz_residual_at(&s, &VeqSpec::Greenshields, 1.0, c).0;
        assert!((reference - r1).abs() < 1e-12);
    }

    fn direct_stage1(net: &SharedHeadNet, veq: &VeqSpec, probes: &ProbeDataset, colloc: &CollocationSet, cfg: &StageConfig, c: f64) -> f64 {
        let data: f64 = probes
            .records
            .iter()
            .map(|r| (net.forward(r.t, r.x).0 - r.rho).powi(2))
            .sum::<f64>()
            / probes.len() as f64;
        let phys: f64 = colloc
            .points
            .iter()
            .map(|&[t, x]| lwr_residual(net, veq, c, t, x).powi(2))
            .sum::<f64>()
            * cfg.lambda
            / colloc.len() as f64;
        let pen: f64 = if veq.network().is_some() {
            (0..cfg.n_pen)
                .map(|j| veq.value_and_slope(j as f64 / (cfg.n_pen - 1) as f64).1.max(0.0).powi(2))
                .sum::<f64>()
                * cfg.mu
                / cfg.n_pen as f64
        } else {
            0.0
        };
        data + phys + pen
    }

    fn direct_stage2(net: &SharedHeadNet, veq: &VeqSpec, probes: &ProbeDataset, colloc: &CollocationSet, cfg: &StageConfig, c: f64) -> f64 {
        let data: f64 = probes
            .records
            .iter()
            .map(|r| {
                let (rho, v) = net.forward(r.t, r.x);
                (rho - r.rho).powi(2) + (v - r.v).powi(2)
            })
            .sum::<f64>()
            / probes.len() as f64;
        let phys: f64 = colloc
            .points
            .iter()
            .map(|&[t, x]| {
                let (a, b) = arz_residual(net, veq, cfg.tau, c, t, x);
                a * a + b * b
            })
            .sum::<f64>()
            * cfg.lambda
            / colloc.len() as f64;
        data + phys
    }

    #[test]
    fn stage1_loss_matches_direct_summation() {
        let probes = random_probes(1, 12);
        let colloc = sample_collocation(20, 2).unwrap();
        let net = SharedHeadNet::new(&[5, 4], false, 3, InitScheme::FanInUniform);
        let mut cfg = small_config();
        cfg.mu = 50.0;
        let mut psi = VeqNet::new(&[1, 4, 1], 8, InitScheme::FanInUniform);
        // make the diagram non-monotone somewhere so the penalty is active
        let p: Vec<f64> = psi.params().iter().map(|x| 30.0 * x).collect();
        psi.set_params(&p);
        for veq in [VeqSpec::Greenshields, VeqSpec::learned(psi)] {
            let (terms, _) = loss_stage1(&net, &veq, &probes, &colloc, &cfg, 3.0).unwrap();
            let direct = direct_stage1(&net, &veq, &probes, &colloc, &cfg, 3.0);
            assert!((terms.total - direct).abs() <= 1e-12 * direct.max(1.0), "{} vs {direct}", terms.total);
            if veq.network().is_some() {
                assert!(terms.penalty > 0.0);
            }
        }
    }

    #[test]
    fn stage2_loss_matches_direct_summation() {
        let probes = random_probes(4, 12);
        let colloc = sample_collocation(20, 5).unwrap();
        let net = SharedHeadNet::new(&[5, 4], true, 6, InitScheme::FanInUniform);
        let cfg = small_config();
        let veq = VeqSpec::learned(VeqNet::new(&[1, 4, 1], 8, InitScheme::FanInUniform));
        let (terms, _) = loss_stage2(&net, &veq, &probes, &colloc, &cfg, 3.0).unwrap();
        let direct = direct_stage2(&net, &veq, &probes, &colloc, &cfg, 3.0);
        assert!((terms.total - direct).abs() <= 1e-12 * direct.max(1.0));
    }

    #[test]
    fn degenerate_weights_give_plain_data_error() {
        let probes = random_probes(7, 9);
        let colloc = sample_collocation(10, 1).unwrap();
        let net = SharedHeadNet::new(&[5, 4], true, 2, InitScheme::FanInUniform);
        let mut cfg = small_config();
        cfg.lambda = 0.0;
        cfg.mu = 0.0;
        let veq = VeqSpec::learned(VeqNet::new(&[1, 4, 1], 8, InitScheme::FanInUniform));
        let (t1, _) = loss_stage1(&net, &veq, &probes, &colloc, &cfg, 9.0).unwrap();
        let mse: f64 = probes.records.iter().map(|r| (net.forward(r.t, r.x).0 - r.rho).powi(2)).sum::<f64>() / 9.0;
        assert!((t1.total - mse).abs() < 1e-15);
        let (t2, _) = loss_stage2(&net, &veq, &probes, &colloc, &cfg, 9.0).unwrap();
        let mse2: f64 = probes
            .records
            .iter()
            .map(|r| {
                let (a, b) = net.forward(r.t, r.x);
                (a - r.rho).powi(2) + (b - r.v).powi(2)
            })
            .sum::<f64>()
            / 9.0;
        assert!((t2.total - mse2).abs() < 1e-15);
    }

    #[test]
    fn equilibrium_fixed_point_has_zero_loss() {
        let probes = probes_from(&[(0.1, 0.2, 0.4, 0.6), (0.5, 0.5, 0.4, 0.6), (0.9, 0.7, 0.4, 0.6)]);
        let colloc = sample_collocation(30, 1).unwrap();
        let cfg = small_config();
        let mut psi = VeqNet::new(&[1, 4, 1], 1, InitScheme::FanInUniform);
        psi.set_params(&vec![0.0; psi.n_params()]);
        let (t1, _) = loss_stage1(&constant_net(0.4, None), &VeqSpec::learned(psi), &probes, &colloc, &cfg, 9.68).unwrap();
        assert_eq!(t1.total, 0.0);
        let (t2, _) = loss_stage2(&constant_net(0.4, Some(0.6)), &VeqSpec::Greenshields, &probes, &colloc, &cfg, 9.68)
            .unwrap();
        assert!(t2.total < 1e-30);
    }

    fn fd_gradient(p0: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..p0.len())
            .map(|i| {
                let mut p = p0.to_vec();
                p[i] += h;
                let a = f(&p);
                p[i] -= 2.0 * h;
                let b = f(&p);
                (a - b) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-12);
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn stage1_gradient_matches_finite_differences() {
        let probes = random_probes(11, 6);
        let colloc = sample_collocation(8, 12).unwrap();
        let mut cfg = small_config();
        cfg.mu = 20.0;
        let net = SharedHeadNet::new(&[5, 4], false, 13, InitScheme::FanInUniform);
        let mut psi = VeqNet::new(&[1, 4, 1], 14, InitScheme::FanInUniform);
        let p: Vec<f64> = psi.params().iter().map(|x| 20.0 * x).collect();
        psi.set_params(&p);
        let n_net = net.n_params();
        let mut p0 = net.params();
        p0.extend_from_slice(psi.params());
        let eval = |p: &[f64]| {
            let mut n = net.clone();
            n.set_params(&p[..n_net]);
            let mut v = psi.clone();
            v.set_params(&p[n_net..]);
            loss_stage1(&n, &VeqSpec::learned(v), &probes, &colloc, &cfg, 2.0).unwrap()
        };
        let (_, grad) = eval(&p0);
        let fd = fd_gradient(&p0, |p| eval(p).0.total);
        assert!(rel_err(&grad, &fd) < 1e-5, "{}", rel_err(&grad, &fd));
    }

    #[test]
    fn stage2_gradient_matches_finite_differences() {
        let probes = random_probes(21, 6);
        let colloc = sample_collocation(8, 22).unwrap();
        let cfg = small_config();
        let net = SharedHeadNet::new(&[5, 4], true, 23, InitScheme::FanInUniform);
        for veq in [
            VeqSpec::Greenshields,
            VeqSpec::learned(VeqNet::new(&[1, 4, 1], 24, InitScheme::FanInUniform)),
        ] {
            let eval = |p: &[f64]| {
                let mut n = net.clone();
                n.set_params(p);
                loss_stage2(&n, &veq, &probes, &colloc, &cfg, 2.0).unwrap()
            };
            let p0 = net.params();
            let (_, grad) = eval(&p0);
            let fd = fd_gradient(&p0, |p| eval(p).0.total);
            assert!(rel_err(&grad, &fd) < 1e-5, "{}", rel_err(&grad, &fd));
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut adam = Adam::new(2, 0.9, 0.999, 1e-8);
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0), 8.0 * (p[1] + 0.5)];
            adam.update(&mut p, &g, 0.05);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    /// Fitting `V` to `(1 - rho)^2` directly reaches sup error below 1e-2.
    #[test]
    fn equilibrium_network_is_expressive() {
        let mut net = VeqNet::new(&[1, 16, 16, 1], 5, InitScheme::FanInUniform);
        let rhos: Vec<f64> = (0..=64).map(|k| k as f64 / 64.0).collect();
        let target: Vec<f64> = rhos.iter().map(|r| (1.0 - r).powi(2)).collect();
        let mut adam = Adam::new(net.n_params(), 0.9, 0.999, 1e-8);
        let mut p = net.params().to_vec();
        for it in 0..4000 {
            net.set_params(&p);
            let b = net.eval_batch(&rhos);
            let gv: Vec<f64> = b.value.iter().zip(&target).map(|(v, t)| 2.0 * (v - t) / rhos.len() as f64).collect();
            let mut grad = vec![0.0; p.len()];
            net.backward(&b, &gv, &vec![0.0; rhos.len()], &mut grad);
            adam.update(&mut p, &grad, if it < 3000 { 1e-2 } else { 1e-3 });
        }
        net.set_params(&p);
        let sup = (0..=1000)
            .map(|k| {
                let r = k as f64 / 1000.0;
                (net.value(r) - (1.0 - r).powi(2)).abs()
            })
            .fold(0.0, f64::max);
        assert!(sup < 1e-2, "sup error {sup}");
    }

    fn uniform_probes(rho: f64) -> ProbeDataset {
        let v: Vec<_> = (0..30).map(|k| (k as f64 / 29.0, (0.37 * k as f64) % 1.0, rho, 1.0 - rho)).collect();
        probes_from(&v)
    }

    fn quick(iterations: usize, seed: u64) -> StageConfig {
        StageConfig {
            n_phys: 128,
            hidden: vec![8, 8],
            veq_hidden: vec![6],
            iterations,
            learning_rate: 5e-3,
            log_every: 50,
            seed,
            ..StageConfig::stage1()
        }
    }

    #[test]
    fn zero_iterations_return_the_initialization() {
        let probes = uniform_probes(0.4);
        let cfg = quick(0, 3);
        let out = train_stage1(&probes, &cfg, &Scales::default()).unwrap();
        assert_eq!(out.checkpoint.net, SharedHeadNet::new(&cfg.hidden, false, 3, InitScheme::FanInUniform));
        assert_eq!(out.report.iterations_run, 0);
        assert_eq!(out.report.best_loss, out.report.initial_loss);
    }

    #[test]
    fn stage1_fits_uniform_flow_deterministically() {
        let probes = uniform_probes(0.4);
        let cfg = quick(600, 5);
        let a = train_stage1(&probes, &cfg, &Scales::default()).unwrap();
        let b = train_stage1(&probes, &cfg, &Scales::default()).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.report.trace, b.report.trace);
        assert_eq!(a.report.status, TrainStatus::Completed);
        let best = a.report.best_terms().map(|t| t.data).unwrap_or_else(|| {
            let (t, _) = loss_stage1(
                &a.checkpoint.net,
                &VeqSpec::learned(a.checkpoint.veq.clone().unwrap()),
                &probes,
                &sample_collocation(128, collocation_seed(5)).unwrap(),
                &cfg,
                Scales::default().speed_ratio(),
            )
            .unwrap();
            t.data
        });
        assert!(best < 1e-4, "data term {best}");
        assert!(a.report.best_loss <= a.report.initial_loss);
    }

    #[test]
    fn stage2_warm_start_improves_and_tau_controls_coupling() {
        let probes = uniform_probes(0.4);
        let scales = Scales::default();
        let s1 = train_stage1(&probes, &quick(300, 1), &scales).unwrap();
        let veq = VeqSpec::learned(s1.checkpoint.veq.clone().unwrap());
        let mut cfg = quick(200, 1);
        cfg.tau = 0.01;
        let s2 = train_stage2(&probes, &veq, Some(&s1.checkpoint.net), &cfg, &scales).unwrap();
        assert!(s2.report.best_loss <= s2.report.initial_loss);
        assert!(s2.checkpoint.net.has_velocity_head());
        let again = train_stage2(&probes, &veq, Some(&s1.checkpoint.net), &cfg, &scales).unwrap();
        assert_eq!(s2.checkpoint, again.checkpoint);

        // the relaxation source of r2 is negligible for a very slow relaxation
        let source = |tau: f64| {
            let pts = sample_collocation(200, 4).unwrap();
            pts.points
                .iter()
                .map(|&[t, x]| {
                    let (rho, v) = s2.checkpoint.net.forward(t, x);
                    (rho / tau * (veq.value(rho) - v)).abs()
                })
                .sum::<f64>()
                / 200.0
        };
        assert!(source(10.0) < 1e-2 * source(0.01));
        assert!(source(10.0) < 1e-3);
        let mut cold = cfg.clone();
        cold.warm_start = true;
        assert!(train_stage2(&probes, &veq, None, &cold, &scales).is_err());
    }

    #[test]
    fn non_finite_loss_is_reported_as_divergence() {
        let mut probes = uniform_probes(0.4);
        probes.records[3].rho = f64::NAN;
        let out = train_stage1(&probes, &quick(50, 1), &Scales::default()).unwrap();
        assert_eq!(out.report.status, TrainStatus::Diverged);
        assert!(out.report.message.as_deref().unwrap().contains("data term"));
    }
}
