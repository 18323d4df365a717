//! `roadstate`: simulate, train, evaluate and study traffic-state
//! reconstruction on a ring road.
//!
//! Exit codes: 1 configuration or usage error, 2 simulation or grid shape
//! error, 3 training divergence, 4 too many failed study rows.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use roadstate::config::RunConfig;
use roadstate::eval::{
    density_velocity_scatter, errors_between, failure_rate, prepare_scenario, reconstruct_grid, seed_study,
    write_scatter_csv, write_table_csv, EvalResult, ModelConfig, RunStatus, StudyPlan,
};
use roadstate::io::{write_atomic, write_json};
use roadstate::microsim::{ground_truth_grid, run_simulation, sample_probes, ProbeDataset};
use roadstate::net::Checkpoint;
use roadstate::train::{train_stage1, train_stage2, StageOutcome, TrainReport};
use roadstate::{Error, GridField, VeqChoice, VeqSpec};
use serde_json::json;

const MAX_FAILURE_RATE: f64 = 0.2;

#[derive(Parser)]
#[command(name = "roadstate", version, about = "Traffic-state reconstruction from probe vehicles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the microsimulation; writes trajectories, probes, ground truth and
    /// a JSON echo of the resolved configuration.
    Simulate(SimulateArgs),
    /// Train stage 1 (LWR) or stage 2 (ARZ) on a probe CSV.
    Train(TrainArgs),
    /// Reconstruct a checkpoint on the evaluation grid and score it against a
    /// ground-truth CSV.
    Evaluate(EvaluateArgs),
    /// Multi-seed study over the configured scenarios and model configurations.
    Study(StudyArgs),
    /// simulate, train and evaluate in one go.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct Common {
    /// JSON configuration; missing fields take the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides `sim.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VeqArg {
    Greenshields,
    Learned,
}

impl From<VeqArg> for VeqChoice {
    fn from(v: VeqArg) -> Self {
        match v {
            VeqArg::Greenshields => VeqChoice::Greenshields,
            VeqArg::Learned => VeqChoice::Learned,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Lwr,
    Arz,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2), default_value_t = 1)]
    stage: u8,
    /// Probe CSV written by `simulate`.
    #[arg(long, default_value = "out/probes.csv")]
    probes: PathBuf,
    /// Stage-1 checkpoint: warm start and learned diagram for stage 2.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Equilibrium velocity; overrides the stage's `veq`.
    #[arg(long, value_enum)]
    veq: Option<VeqArg>,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "out/stage1.ckpt")]
    checkpoint: PathBuf,
    /// Ground-truth grid CSV written by `simulate`.
    #[arg(long, default_value = "out/truth.csv")]
    truth: PathBuf,
    /// Probe CSV; when given, a density-velocity scatter is written too.
    #[arg(long)]
    probes: Option<PathBuf>,
    /// Seed recorded in the result row.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    common: Common,
    /// Worker threads; overrides `study.jobs` (0 uses every core).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides the training seed of both stages.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "learned")]
    veq: VeqArg,
    #[arg(long, value_enum, default_value = "arz")]
    model: ModelArg,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    fn config(msg: String) -> Self {
        Self::new(1, anyhow!(msg))
    }
}

/// Simulation, model and shape errors exit with 2; everything else is
/// treated as bad input.
impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Domain { .. }
            | Error::DegenerateField
            | Error::ShapeMismatch { .. }
            | Error::StepSize(_)
            | Error::ModelViolation(_)
            | Error::Numeric { .. } => 2,
            _ => 1,
        };
        Self::new(code, e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::new(1, anyhow!("{}: {e}", p.display()))),
        None => Ok(RunConfig::default()),
    }
}

fn simulate(config: &RunConfig, out: &Path) -> CliResult<ProbeDataset> {
    let traj = run_simulation(&config.sim, &VeqSpec::Greenshields, &config.scales)?;
    let probes = sample_probes(&traj, config.sim.penetration, config.sim.n_mea, config.sim.seed)?;
    let truth = ground_truth_grid(&traj, config.eval.n_t, config.eval.n_x, config.scales)?;
    traj.write_csv(&out.join("trajectories.csv"))?;
    probes.write_csv(&out.join("probes.csv"))?;
    truth.write_csv(&out.join("truth.csv"))?;
    write_json(
        &out.join("simulate.json"),
        &json!({ "seed": config.sim.seed, "config": config }),
    )?;
    log::info!("simulated {} probe samples into {}", probes.len(), out.display());
    Ok(probes)
}

fn cmd_simulate(args: SimulateArgs) -> CliResult {
    let mut config = load_config(args.common.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.sim.seed = seed;
    }
    simulate(&config, &args.common.out)?;
    Ok(())
}

/// Writes checkpoint and report, prints the summary line and turns a
/// diverged run into exit 3.
fn finish_training(outcome: &StageOutcome, config: &RunConfig, out: &Path) -> CliResult<PathBuf> {
    let stage = outcome.report.stage;
    let ck_path = out.join(format!("stage{stage}.ckpt"));
    write_json(&out.join(format!("stage{stage}_report.json")), &outcome.report)?;
    print_summary(&outcome.report);
    if outcome.report.diverged() {
        let msg = outcome.report.message.clone().unwrap_or_else(|| "training diverged".into());
        return Err(Failure::new(3, anyhow!("stage {stage}: {msg}")));
    }
    outcome.checkpoint.save(&ck_path, config.scales)?;
    Ok(ck_path)
}

fn print_summary(r: &TrainReport) {
    let terms = r.best_terms();
    println!(
        "stage={} status={:?} iterations={} final_loss={:.6e} best_loss={:.6e} best_iteration={} data={:.6e} physics={:.6e}",
        r.stage,
        r.status,
        r.iterations_run,
        r.final_loss,
        r.best_loss,
        r.best_iteration,
        terms.map_or(f64::NAN, |t| t.data),
        terms.map_or(f64::NAN, |t| t.physics),
    );
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| Failure::new(1, anyhow!("{}: {e}", path.display())))
}

fn train_one(
    config: &RunConfig,
    stage: u8,
    probes: &ProbeDataset,
    checkpoint: Option<&Path>,
    out: &Path,
) -> CliResult<PathBuf> {
    if stage == 1 {
        let outcome = train_stage1(probes, &config.stage1, &config.scales)?;
        return finish_training(&outcome, config, out);
    }
    let mut s2 = config.stage2.clone();
    let warm = match checkpoint {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let veq = match (s2.veq, &warm) {
        (VeqChoice::Greenshields, _) => VeqSpec::Greenshields,
        (VeqChoice::Learned, Some(ck)) => match &ck.veq {
            Some(net) => VeqSpec::learned(net.clone()),
            None => {
                return Err(Failure::config(
                    "the stage-1 checkpoint has no learned V_eq; retrain stage 1 with `--veq learned`".into(),
                ))
            }
        },
        (VeqChoice::Learned, None) => {
            return Err(Failure::config(
                "stage 2 with a learned V_eq needs the stage-1 checkpoint: pass `--checkpoint <stage1.ckpt>` \
                 or use `--veq greenshields`"
                    .into(),
            ))
        }
    };
    if warm.is_none() && s2.warm_start {
        log::info!("no stage-1 checkpoint: stage 2 starts from a fresh network");
        s2.warm_start = false;
    }
    let outcome = train_stage2(probes, &veq, warm.as_ref().map(|c| &c.net), &s2, &config.scales)?;
    finish_training(&outcome, config, out)
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let mut config = load_config(args.common.config.as_deref())?;
    if let Some(seed) = args.seed {
        config = config.with_training_seed(seed);
    }
    if let Some(v) = args.veq {
        config.stage1.veq = v.into();
        config.stage2.veq = v.into();
    }
    let probes = ProbeDataset::read_csv(&args.probes).map_err(|e| Failure::new(1, e))?;
    train_one(&config, args.stage, &probes, args.checkpoint.as_deref(), &args.common.out)?;
    Ok(())
}

fn model_of(ck: &Checkpoint) -> ModelConfig {
    match (ck.net.has_velocity_head(), ck.veq.is_some()) {
        (false, false) => ModelConfig::LwrGreenshields,
        (false, true) => ModelConfig::LwrLearned,
        (true, false) => ModelConfig::ArzGreenshields,
        (true, true) => ModelConfig::ArzLearned,
    }
}

fn evaluate(
    config: &RunConfig,
    ck_path: &Path,
    truth_path: &Path,
    probes: Option<&ProbeDataset>,
    seed: u64,
    out: &Path,
) -> CliResult {
    let ck = load_checkpoint(ck_path)?;
    let truth = GridField::read_csv(truth_path, config.scales).map_err(|e| Failure::new(1, e))?;
    let recon = reconstruct_grid(&ck, config.eval.n_t, config.eval.n_x, config.scales)?;
    let errors = errors_between(&recon, &truth)?;
    let row = EvalResult {
        regime: config.sim.regime.label().to_string(),
        config: model_of(&ck),
        seed,
        e_rho: errors.e_rho,
        e_v: errors.e_v,
        status: RunStatus::Ok,
    };
    write_table_csv(&out.join("eval.csv"), &[row])?;
    recon.write_csv(&out.join("reconstruction.csv"))?;
    if let Some(probes) = probes {
        let veq = ck.veq.clone().map_or(VeqSpec::Greenshields, VeqSpec::learned);
        write_scatter_csv(&out.join("scatter.csv"), &density_velocity_scatter(probes, &ck, &veq))?;
    }
    println!("e_rho={} e_v={}", errors.e_rho, errors.e_v);
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> CliResult {
    let config = load_config(args.common.config.as_deref())?;
    let probes = match &args.probes {
        Some(p) => Some(ProbeDataset::read_csv(p).map_err(|e| Failure::new(1, e))?),
        None => None,
    };
    evaluate(&config, &args.checkpoint, &args.truth, probes.as_ref(), args.seed, &args.common.out)
}

fn cmd_study(args: StudyArgs) -> CliResult {
    let config = load_config(args.common.config.as_deref())?;
    let plan = StudyPlan {
        scales: config.scales,
        stage1: config.stage1.clone(),
        stage2: config.stage2.clone(),
        seeds: config.study.seeds.clone(),
        configs: config.study.configs.clone(),
        jobs: args.jobs.unwrap_or(config.study.jobs),
    };
    let scenarios = if config.study.scenarios.is_empty() {
        vec![config.sim.clone()]
    } else {
        config.study.scenarios.clone()
    };
    let mut rows = Vec::new();
    for sim in &scenarios {
        let scenario = prepare_scenario(sim, &config.scales, config.eval.n_t, config.eval.n_x)?;
        log::info!("study: {} regime, {} probe samples", scenario.regime, scenario.probes.len());
        rows.extend(seed_study(&scenario, &plan)?);
    }
    let out = &args.common.out;
    write_table_csv(&out.join("study.csv"), &rows)?;
    write_json(&out.join("study.json"), &json!({ "config": config }))?;
    let rate = failure_rate(&rows);
    println!(
        "rows={} failed={} failure_rate={:.3}",
        rows.len(),
        rows.iter().filter(|r| !r.is_ok()).count(),
        rate
    );
    if rate > MAX_FAILURE_RATE {
        return Err(Failure::new(4, anyhow!("{:.0}% of study rows failed", 100.0 * rate)));
    }
    Ok(())
}

fn cmd_pipeline(args: PipelineArgs) -> CliResult {
    let mut config = load_config(args.common.config.as_deref())?;
    if let Some(seed) = args.seed {
        config = config.with_training_seed(seed);
    }
    config.stage1.veq = args.veq.into();
    config.stage2.veq = args.veq.into();
    let out = &args.common.out;
    let probes = simulate(&config, out)?;
    let mut ck = train_one(&config, 1, &probes, None, out)?;
    let mut seed = config.stage1.seed;
    if let ModelArg::Arz = args.model {
        ck = train_one(&config, 2, &probes, Some(&ck), out)?;
        seed = config.stage2.seed;
    }
    evaluate(&config, &ck, &out.join("truth.csv"), Some(&probes), seed, out)?;
    write_atomic(&out.join("pipeline.json"), config.to_json_string().as_bytes())?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROADSTATE_LOG", "error")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Study(a) => cmd_study(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
