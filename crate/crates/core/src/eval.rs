//! Dense reconstruction, error metrics and the multi-seed study.

use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagram::{VeqChoice, VeqSpec};
use crate::error::{Error, Result};
use crate::field::{space_node, time_node, GridField};
use crate::metrics::relative_l2_error;
use crate::microsim::{ground_truth_grid, run_simulation, sample_probes, ProbeDataset, SimConfig};
use crate::net::Checkpoint;
use crate::scales::Scales;
use crate::train::{train_stage1, train_stage2, StageConfig, StageOutcome};

/// Grid points evaluated per network call.
const EVAL_BATCH: usize = 4096;

/// The four model configurations compared by the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelConfig {
    #[serde(rename = "LWR+Greenshields")]
    LwrGreenshields,
    #[serde(rename = "LWR+learned")]
    LwrLearned,
    #[serde(rename = "ARZ+Greenshields")]
    ArzGreenshields,
    #[serde(rename = "ARZ+learned")]
    ArzLearned,
}

impl ModelConfig {
    pub const ALL: [ModelConfig; 4] = [
        ModelConfig::LwrGreenshields,
        ModelConfig::LwrLearned,
        ModelConfig::ArzGreenshields,
        ModelConfig::ArzLearned,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ModelConfig::LwrGreenshields => "LWR+Greenshields",
            ModelConfig::LwrLearned => "LWR+learned",
            ModelConfig::ArzGreenshields => "ARZ+Greenshields",
            ModelConfig::ArzLearned => "ARZ+learned",
        }
    }

    pub fn veq(self) -> VeqChoice {
        match self {
            ModelConfig::LwrGreenshields | ModelConfig::ArzGreenshields => VeqChoice::Greenshields,
            ModelConfig::LwrLearned | ModelConfig::ArzLearned => VeqChoice::Learned,
        }
    }

    pub fn is_second_order(self) -> bool {
        matches!(self, ModelConfig::ArzGreenshields | ModelConfig::ArzLearned)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for ModelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelConfig::ALL
            .into_iter()
            .find(|c| c.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown model configuration {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub regime: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub e_rho: f64,
    pub e_v: f64,
    pub status: RunStatus,
}

impl EvalResult {
    fn failed(regime: &str, config: ModelConfig, seed: u64) -> Self {
        Self {
            regime: regime.to_string(),
            config,
            seed,
            e_rho: f64::NAN,
            e_v: f64::NAN,
            status: RunStatus::Failed,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

/// Reconstruction errors against a ground-truth field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Errors {
    pub e_rho: f64,
    pub e_v: f64,
}

/// Evaluates the network on the uniform grid used by [`GridField`]. Density
/// is clamped to `[0, 1]`. Velocity comes from the velocity head when there
/// is one (clamped the same way), otherwise from the diagram at the clamped
/// density.
pub fn reconstruct_grid(ck: &Checkpoint, n_t: usize, n_x: usize, domain: Scales) -> Result<GridField> {
    if n_t < 2 || n_x == 0 {
        return Err(Error::config("reconstruction grid needs n_t >= 2 and n_x >= 1"));
    }
    let points: Vec<[f64; 2]> = (0..n_t)
        .flat_map(|m| (0..n_x).map(move |c| [time_node(m, n_t), space_node(c, n_x)]))
        .collect();
    let (rho, vel) = reconstruct_points(ck, &points);
    GridField::new(
        Array2::from_shape_vec((n_t, n_x), rho).expect("grid shape"),
        Array2::from_shape_vec((n_t, n_x), vel).expect("grid shape"),
        domain,
    )
}

fn checkpoint_veq(ck: &Checkpoint) -> VeqSpec {
    ck.veq.clone().map_or(VeqSpec::Greenshields, VeqSpec::learned)
}

/// Clamped `(rho_hat, v_hat)` at arbitrary points.
fn reconstruct_points(ck: &Checkpoint, points: &[[f64; 2]]) -> (Vec<f64>, Vec<f64>) {
    let veq = checkpoint_veq(ck);
    let mut rho = Vec::with_capacity(points.len());
    let mut vel = Vec::with_capacity(points.len());
    for chunk in points.chunks(EVAL_BATCH) {
        let (jet, _) = ck.net.eval_batch(chunk, false);
        for i in 0..chunk.len() {
            let r = jet.rho[i].clamp(0.0, 1.0);
            rho.push(r);
            vel.push(if ck.net.has_velocity_head() {
                jet.v[i].clamp(0.0, 1.0)
            } else {
                veq.value(r).clamp(0.0, 1.0)
            });
        }
    }
    (rho, vel)
}

/// Relative L2 errors of the reconstruction on the truth's grid.
pub fn evaluate(ck: &Checkpoint, truth: &GridField) -> Result<Errors> {
    let rec = reconstruct_grid(ck, truth.n_t(), truth.n_x(), truth.domain)?;
    errors_between(&rec, truth)
}

pub fn errors_between(reconstruction: &GridField, truth: &GridField) -> Result<Errors> {
    truth.same_shape(reconstruction)?;
    Ok(Errors {
        e_rho: relative_l2_error(truth.rho.view(), reconstruction.rho.view())?,
        e_v: relative_l2_error(truth.vel.view(), reconstruction.vel.view())?,
    })
}

/// Probe data and ground truth for one simulated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub regime: String,
    pub probes: ProbeDataset,
    pub truth: GridField,
}

/// Simulates `sim` with the Greenshields diagram, samples the probes and
/// builds the `n_t x n_x` ground truth.
pub fn prepare_scenario(sim: &SimConfig, scales: &Scales, n_t: usize, n_x: usize) -> Result<Scenario> {
    let traj = run_simulation(sim, &VeqSpec::Greenshields, scales)?;
    Ok(Scenario {
        regime: sim.regime.label().to_string(),
        probes: sample_probes(&traj, sim.penetration, sim.n_mea, sim.seed)?,
        truth: ground_truth_grid(&traj, n_t, n_x, *scales)?,
    })
}

/// Stage settings for the study; the seed of each row replaces theirs.
#[derive(Debug, Clone)]
pub struct StudyPlan {
    pub scales: Scales,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub seeds: Vec<u64>,
    pub configs: Vec<ModelConfig>,
    /// Worker threads; 0 uses the global pool.
    pub jobs: usize,
}

/// Trains the configurations of one seed and diagram choice: stage 1 always,
/// stage 2 (warm started from it) when an ARZ configuration asks for it.
fn run_family(
    scenario: &Scenario,
    plan: &StudyPlan,
    seed: u64,
    veq: VeqChoice,
    configs: &[ModelConfig],
) -> Vec<EvalResult> {
    let regime = scenario.regime.as_str();
    let s1_cfg = StageConfig {
        seed,
        veq,
        ..plan.stage1.clone()
    };
    let s1 = train_stage1(&scenario.probes, &s1_cfg, &plan.scales);
    let mut rows = Vec::new();
    let score = |out: &StageOutcome, config: ModelConfig| -> EvalResult {
        if out.report.diverged() {
            return EvalResult::failed(regime, config, seed);
        }
        match evaluate(&out.checkpoint, &scenario.truth) {
            Ok(e) => EvalResult {
                regime: regime.to_string(),
                config,
                seed,
                e_rho: e.e_rho,
                e_v: e.e_v,
                status: RunStatus::Ok,
            },
            Err(err) => {
                log::error!("{regime} {config} seed {seed}: {err}");
                EvalResult::failed(regime, config, seed)
            }
        }
    };
    let s1 = match s1 {
        Ok(out) => out,
        Err(err) => {
            log::error!("{regime} stage 1 ({veq}) seed {seed}: {err}");
            return configs.iter().map(|&c| EvalResult::failed(regime, c, seed)).collect();
        }
    };
    for &config in configs {
        if !config.is_second_order() {
            rows.push(score(&s1, config));
            continue;
        }
        if s1.report.diverged() {
            rows.push(EvalResult::failed(regime, config, seed));
            continue;
        }
        let s2_cfg = StageConfig {
            seed,
            veq,
            ..plan.stage2.clone()
        };
        let veq_spec = s1.checkpoint.veq.clone().map_or(VeqSpec::Greenshields, VeqSpec::learned);
        let warm = s2_cfg.warm_start.then_some(&s1.checkpoint.net);
        match train_stage2(&scenario.probes, &veq_spec, warm, &s2_cfg, &plan.scales) {
            Ok(out) => rows.push(score(&out, config)),
            Err(err) => {
                log::error!("{regime} {config} seed {seed}: {err}");
                rows.push(EvalResult::failed(regime, config, seed));
            }
        }
    }
    rows
}

/// Runs every (seed, configuration) pair on `scenario`. Rows come back
/// ordered by seed, then configuration, and failures become `failed` rows.
pub fn seed_study(scenario: &Scenario, plan: &StudyPlan) -> Result<Vec<EvalResult>> {
    if plan.seeds.is_empty() || plan.configs.is_empty() {
        return Err(Error::config("the study needs at least one seed and one configuration"));
    }
    let mut configs = plan.configs.clone();
    configs.sort();
    configs.dedup();
    let mut tasks = Vec::new();
    for &seed in &plan.seeds {
        for veq in [VeqChoice::Greenshields, VeqChoice::Learned] {
            let family: Vec<ModelConfig> = configs.iter().copied().filter(|c| c.veq() == veq).collect();
            if !family.is_empty() {
                tasks.push((seed, veq, family));
            }
        }
    }
    let run = || -> Vec<Vec<EvalResult>> {
        tasks
            .par_iter()
            .map(|(seed, veq, family)| run_family(scenario, plan, *seed, *veq, family))
            .collect()
    };
    let results = if plan.jobs == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(plan.jobs)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(run)
    };
    let mut rows: Vec<EvalResult> = results.into_iter().flatten().collect();
    // stable sort keeps seed order as given
    let seed_rank = |s: u64| plan.seeds.iter().position(|&x| x == s).unwrap_or(usize::MAX);
    rows.sort_by_key(|r| (seed_rank(r.seed), r.config));
    Ok(rows)
}

/// Fraction of rows that failed.
pub fn failure_rate(rows: &[EvalResult]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| !r.is_ok()).count() as f64 / rows.len() as f64
}

pub fn table_csv_string(rows: &[EvalResult]) -> String {
    let mut out = String::from("regime,config,seed,e_rho,e_v,status\n");
    for r in rows {
        let status = match r.status {
            RunStatus::Ok => "ok",
            RunStatus::Failed => "failed",
        };
        out.push_str(&format!("{},{},{},{},{},{}\n", r.regime, r.config, r.seed, r.e_rho, r.e_v, status));
    }
    out
}

pub fn write_table_csv(path: &Path, rows: &[EvalResult]) -> Result<()> {
    crate::io::write_atomic(path, table_csv_string(rows).as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Series {
    Data,
    Model,
    Reconstruction,
}

impl Series {
    fn label(self) -> &'static str {
        match self {
            Series::Data => "data",
            Series::Model => "model",
            Series::Reconstruction => "reconstruction",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterPoint {
    pub series: Series,
    pub rho: f64,
    pub v: f64,
}

/// Density-velocity point sets over the probe records: the measurements,
/// the diagram at the measured densities, and the reconstruction at the
/// measurement points. Each set has one point per record, in record order.
pub fn density_velocity_scatter(probes: &ProbeDataset, ck: &Checkpoint, veq: &VeqSpec) -> Vec<ScatterPoint> {
    let mut out = Vec::with_capacity(3 * probes.len());
    for r in &probes.records {
        out.push(ScatterPoint {
            series: Series::Data,
            rho: r.rho,
            v: r.v,
        });
    }
    for r in &probes.records {
        out.push(ScatterPoint {
            series: Series::Model,
            rho: r.rho,
            v: veq.value(r.rho),
        });
    }
    if !probes.is_empty() {
        let (rho, vel) = reconstruct_points(ck, &probes.points());
        for (r, v) in rho.into_iter().zip(vel) {
            out.push(ScatterPoint {
                series: Series::Reconstruction,
                rho: r,
                v,
            });
        }
    }
    out
}

pub fn scatter_csv_string(points: &[ScatterPoint]) -> String {
    let mut out = String::from("series,rho,v\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.series.label(), p.rho, p.v));
    }
    out
}

pub fn write_scatter_csv(path: &Path, points: &[ScatterPoint]) -> Result<()> {
    crate::io::write_atomic(path, scatter_csv_string(points).as_bytes())
}

/// Largest velocity range within any density bin of width `bin`.
pub fn max_velocity_spread(points: &[ScatterPoint], series: Series, bin: f64) -> f64 {
    let mut bins: std::collections::BTreeMap<i64, (f64, f64)> = std::collections::BTreeMap::new();
    for p in points.iter().filter(|p| p.series == series) {
        let e = bins.entry((p.rho / bin).floor() as i64).or_insert((f64::INFINITY, f64::NEG_INFINITY));
        e.0 = e.0.min(p.v);
        e.1 = e.1.max(p.v);
    }
    bins.values().map(|(lo, hi)| hi - lo).fold(0.0, f64::max)
}

/// Median and interquartile range (linear interpolation between order
/// statistics) of the finite values.
pub fn median_iqr(values: &[f64]) -> Option<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some((q(0.5), q(0.75) - q(0.25)))
}
