//! Command-line front end. Every subcommand writes its primary output to
//! `--out` and a run summary to `<out>.summary.json` recording the config,
//! seed and content hashes of the inputs.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation or input error, 3
//! numerical, training or verification failure.

mod plot;
mod svg;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::dataset::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::experiments::{
    gen_cycle_dataset, gen_goto_dataset, gen_obstacle_dataset, GoToTaskSpec, MorphingCycleSpec, SceneDistribution,
};
use crate::policy::{parse_vector, sample_ball, ContextDynamics, ConvergenceOptions, Perturbation, StablePolicyModel};
use crate::training::{evaluate, train, TrainConfig};

pub use plot::PlotKind;

#[derive(Debug, Parser)]
#[command(
    name = "stableflow",
    version,
    about = "Stable context-conditioned policies from demonstrations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic demonstration dataset.
    GenData(GenDataArgs),
    /// Fit a model to a dataset by maximum likelihood.
    Train(TrainArgs),
    /// Per-transition log-likelihood of a dataset under a model.
    Eval(EvalArgs),
    /// Simulate the policy, optionally with perturbations.
    Rollout(RolloutArgs),
    /// Run the generator-identity and convergence checks.
    Verify(VerifyArgs),
    /// Render an SVG figure.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Cycle,
    Obstacle,
    Goto,
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trajectories per context (cycle), scenes (obstacle) or motions (goto).
    #[arg(long)]
    pub n_traj: Option<usize>,
    /// JSON file with the task spec; unset fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Cycle contexts, comma separated.
    #[arg(long, default_value = "0,1")]
    pub contexts: String,
    /// Overrides the observation noise of the spec.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Leave out the initial-state density term.
    #[arg(long)]
    pub exclude_initial: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct RolloutArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Start state "x,y,..."; defaults to the training mean.
    #[arg(long)]
    pub start: Option<String>,
    /// Initial context; defaults to the training mean.
    #[arg(long)]
    pub context: Option<String>,
    /// Exponential approach towards a target context, "c1,c2,...:rate".
    #[arg(long)]
    pub context_dyn: Option<String>,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// "step:dx,dy,..."; repeatable.
    #[arg(long)]
    pub perturb: Vec<String>,
    /// Drop the latent noise.
    #[arg(long)]
    pub noiseless: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n_starts: usize,
    /// Start-ball radius around the training mean, in raw units; defaults to
    /// twice the data radius.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Convergence threshold on the latent distance to the attractor.
    #[arg(long, default_value_t = 0.05)]
    pub tol: f64,
    /// Context for both checks; defaults to the training mean.
    #[arg(long)]
    pub context: Option<String>,
    /// Rollout length of the convergence sweep.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Finite-difference step of the generator check.
    #[arg(long, default_value_t = 1e-4)]
    pub h: f64,
    /// Tolerance on |LV - LU|.
    #[arg(long, default_value_t = 1e-3)]
    pub generator_tol: f64,
    /// Required converged fraction.
    #[arg(long, default_value_t = 0.99)]
    pub min_fraction: f64,
    /// Keep the latent noise in the convergence sweep.
    #[arg(long)]
    pub stochastic: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PlotArgs {
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Generated trajectories to overlay (field) or plot (timeseries); repeatable.
    #[arg(long)]
    pub rollout: Vec<PathBuf>,
    /// Demonstrations to overlay on a field plot.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Context for field and grid plots; defaults to the training mean.
    #[arg(long)]
    pub context: Option<String>,
    /// Arrows or grid lines per axis.
    #[arg(long, default_value_t = 20)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Content hash of one input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputHash {
    pub path: String,
    /// SHA-256 of the git blob encoding `"blob <len>\0" + content`.
    pub sha256: String,
}

/// Run summary written beside every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub args: Value,
    pub config: Value,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub ok: bool,
    pub exit_code: i32,
    pub error: Option<String>,
    pub result: Value,
}

pub fn summary_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".summary.json");
    PathBuf::from(s)
}

/// Training history written beside a trained model.
pub fn history_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".history.csv");
    PathBuf::from(s)
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects what a command read and produced.
struct Run {
    summary: Summary,
}

impl Run {
    fn new(command: &str, args: &impl Serialize, seed: Option<u64>) -> Self {
        Self {
            summary: Summary {
                command: command.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                seed,
                args: serde_json::to_value(args).expect("args serialize"),
                config: Value::Null,
                inputs: Vec::new(),
                outputs: Vec::new(),
                ok: false,
                exit_code: 0,
                error: None,
                result: Value::Null,
            },
        }
    }

    fn read(&mut self, path: &Path) -> Result<String> {
        let bytes = std::fs::read(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        self.summary.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256: hash_bytes(&bytes),
        });
        String::from_utf8(bytes).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
    }

    fn write(&mut self, path: &Path, text: &str) -> Result<()> {
        std::fs::write(path, text)?;
        self.summary.outputs.push(path.display().to_string());
        Ok(())
    }

    fn dataset(&mut self, path: &Path) -> Result<TrajectoryDataset> {
        TrajectoryDataset::from_json_str(&self.read(path)?)
    }

    fn model(&mut self, path: &Path) -> Result<StablePolicyModel> {
        StablePolicyModel::from_json_str(&self.read(path)?)
    }
}

fn bad_arg(msg: String) -> Error {
    Error::InvalidInput(msg)
}

fn vector_or(s: &Option<String>, default: &[f64], what: &str, len: usize) -> Result<Vec<f64>> {
    let v = match s {
        Some(s) => parse_vector(s)?,
        None => default.to_vec(),
    };
    if v.len() != len {
        return Err(bad_arg(format!(
            "{what} has {} entries, the model expects {len}",
            v.len()
        )));
    }
    Ok(v)
}

fn spec_file<T: for<'de> Deserialize<'de> + Default>(run: &mut Run, path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => serde_json::from_str(&run.read(p)?).map_err(Error::from_json),
        None => Ok(T::default()),
    }
}

fn gen_data(a: &GenDataArgs, run: &mut Run) -> Result<()> {
    let ds = match a.task {
        Task::Cycle => {
            let mut base: MorphingCycleSpec = spec_file(run, &a.spec)?;
            if let Some(n) = a.noise {
                base.noise = n;
            }
            let specs: Vec<MorphingCycleSpec> = parse_vector(&a.contexts)?
                .into_iter()
                .map(|context| MorphingCycleSpec {
                    context,
                    ..base.clone()
                })
                .collect();
            run.summary.config = json!({ "specs": specs });
            gen_cycle_dataset(&specs, a.n_traj.unwrap_or(5), a.seed)?
        }
        Task::Obstacle => {
            let mut dist: SceneDistribution = spec_file(run, &a.spec)?;
            if let Some(n) = a.noise {
                dist.noise = n;
            }
            run.summary.config = serde_json::to_value(&dist).expect("spec serializes");
            gen_obstacle_dataset(&dist, a.n_traj.unwrap_or(200), a.seed)?
        }
        Task::Goto => {
            let mut spec: GoToTaskSpec = spec_file(run, &a.spec)?;
            if let Some(n) = a.noise {
                spec.noise = n;
            }
            if let Some(n) = a.n_traj {
                spec.n_traj = n;
            }
            run.summary.config = serde_json::to_value(&spec).expect("spec serializes");
            gen_goto_dataset(&spec, a.seed)?
        }
    };
    run.write(&a.out, &ds.to_json_string())?;
    run.summary.result = json!({
        "trajectories": ds.len(),
        "transitions": ds.transition_count(),
        "dim_y": ds.dim_y,
        "dim_c": ds.dim_c,
        "dt": ds.dt,
    });
    println!(
        "wrote {} trajectories ({} transitions) to {}",
        ds.len(),
        ds.transition_count(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs, run: &mut Run) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::from_json_str(&run.read(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    run.summary.seed = Some(config.seed);
    run.summary.config = serde_json::to_value(&config).expect("config serializes");
    let ds = run.dataset(&a.data)?;
    let (model, report) = train(&config, &ds)?;
    run.write(&a.out, &model.to_json_string())?;
    run.write(&history_path(&a.out), &report.to_csv())?;
    println!(
        "best epoch {} of {}: test log-likelihood {:.4} per transition ({:.1}s)",
        report.best_epoch,
        report.history.len(),
        report.best_test_ll,
        report.wall_clock_s
    );
    run.summary.result = serde_json::to_value(&report).expect("report serializes");
    Ok(())
}

fn cmd_eval(a: &EvalArgs, run: &mut Run) -> Result<()> {
    let model = run.model(&a.model)?;
    let ds = run.dataset(&a.data)?;
    let report = evaluate(&model, &ds, !a.exclude_initial)?;
    if !report.mean_ll.is_finite() {
        return Err(Error::Numerical(format!("log-likelihood {}", report.mean_ll)));
    }
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    run.write(&a.out, &text)?;
    println!(
        "log-likelihood {:.4} per transition over {} transitions",
        report.mean_ll, report.transitions
    );
    run.summary.result = json!({ "mean_ll": report.mean_ll, "transitions": report.transitions });
    Ok(())
}

fn cmd_rollout(a: &RolloutArgs, run: &mut Run) -> Result<()> {
    let mut model = run.model(&a.model)?;
    if a.noiseless {
        model = model.noiseless();
    }
    let st = model.standardization().clone();
    let y0 = vector_or(&a.start, &st.state_shift, "--start", model.dim())?;
    let c0 = vector_or(&a.context, &st.context_shift, "--context", model.context_dim())?;
    let dynamics = match &a.context_dyn {
        Some(s) => ContextDynamics::parse_approach(s)?,
        None => ContextDynamics::Constant,
    };
    let perturbations = a
        .perturb
        .iter()
        .map(|s| s.parse::<Perturbation>())
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let r = model.rollout(&y0, &c0, &dynamics, a.steps, &perturbations, &mut rng)?;
    run.write(&a.out, &r.to_json_string())?;
    let end = r.last_state();
    let dist = model.distance_to_attractor(end, r.last_context())?;
    println!(
        "{} steps, final state {:?}, latent distance to attractor {dist:.3e}",
        a.steps, end
    );
    run.summary.config = json!({ "context_dynamics": dynamics, "perturbations": perturbations });
    run.summary.result = json!({ "final_state": end, "final_distance": dist });
    Ok(())
}

fn cmd_verify(a: &VerifyArgs, run: &mut Run) -> Result<bool> {
    let model = run.model(&a.model)?;
    let st = model.standardization().clone();
    let c = vector_or(&a.context, &st.context_shift, "--context", model.context_dim())?;
    let radius = a.radius.unwrap_or(2.0 * st.data_radius);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);

    let mut worst = 0.0f64;
    let mut worst_cond = 0.0f64;
    for _ in 0..a.n_starts {
        let y = sample_ball(&st.state_shift, radius, &mut rng);
        let chk = model.verify_generator_identity(&y, &c, a.h)?;
        worst = worst.max(chk.abs_diff);
        worst_cond = worst_cond.max(chk.condition);
    }
    let generator_pass = worst < a.generator_tol;

    let sweep = if a.stochastic { model.clone() } else { model.noiseless() };
    let opts = ConvergenceOptions {
        n_starts: a.n_starts,
        radius,
        steps: a.steps,
        tol: a.tol,
    };
    let conv = sweep.verify_convergence(&opts, std::slice::from_ref(&c), &mut rng)?;
    let convergence_pass = conv.fraction >= a.min_fraction;

    let report = json!({
        "pass": generator_pass && convergence_pass,
        "context": c,
        "criteria": [
            {
                "name": "generator_identity",
                "pass": generator_pass,
                "max_abs_diff": worst,
                "max_condition": worst_cond,
                "points": a.n_starts,
                "radius": radius,
                "h": a.h,
                "tolerance": a.generator_tol,
            },
            {
                "name": "convergence",
                "pass": convergence_pass,
                "report": conv,
                "min_fraction": a.min_fraction,
            },
        ],
    });
    run.write(
        &a.out,
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    println!(
        "generator identity: {} (max |LV - LU| {worst:.2e}, tolerance {:.1e})",
        if generator_pass { "pass" } else { "FAIL" },
        a.generator_tol
    );
    println!(
        "convergence: {} ({}/{} within {} after {} steps)",
        if convergence_pass { "pass" } else { "FAIL" },
        conv.converged,
        conv.n_starts,
        a.tol,
        a.steps
    );
    run.summary.result = report;
    Ok(generator_pass && convergence_pass)
}

fn cmd_plot(a: &PlotArgs, run: &mut Run) -> Result<()> {
    let model = a.model.as_ref().map(|p| run.model(p)).transpose()?;
    let rollouts = a
        .rollout
        .iter()
        .map(|p| crate::policy::Rollout::from_json_str(&run.read(p)?))
        .collect::<Result<Vec<_>>>()?;
    let data = a.data.as_ref().map(|p| run.dataset(p)).transpose()?;
    let context = match &model {
        Some(m) => Some(vector_or(
            &a.context,
            &m.standardization().context_shift,
            "--context",
            m.context_dim(),
        )?),
        None => None,
    };
    let inputs = plot::PlotInputs {
        model: model.as_ref(),
        context: context.as_deref(),
        rollouts: &rollouts,
        data: data.as_ref(),
        resolution: a.resolution,
    };
    let (svg, counts) = plot::render(a.kind, &inputs)?;
    run.write(&a.out, &svg)?;
    println!("wrote {} plot to {}", a.kind.name(), a.out.display());
    run.summary.result = counts;
    Ok(())
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let (mut run, out) = match &cli.command {
        Command::GenData(a) => (Run::new("gen-data", a, Some(a.seed)), a.out.clone()),
        Command::Train(a) => (Run::new("train", a, a.seed), a.out.clone()),
        Command::Eval(a) => (Run::new("eval", a, None), a.out.clone()),
        Command::Rollout(a) => (Run::new("rollout", a, Some(a.seed)), a.out.clone()),
        Command::Verify(a) => (Run::new("verify", a, Some(a.seed)), a.out.clone()),
        Command::Plot(a) => (Run::new("plot", a, None), a.out.clone()),
    };
    let outcome = match &cli.command {
        Command::GenData(a) => gen_data(a, &mut run).map(|_| true),
        Command::Train(a) => cmd_train(a, &mut run).map(|_| true),
        Command::Eval(a) => cmd_eval(a, &mut run).map(|_| true),
        Command::Rollout(a) => cmd_rollout(a, &mut run).map(|_| true),
        Command::Verify(a) => cmd_verify(a, &mut run),
        Command::Plot(a) => cmd_plot(a, &mut run).map(|_| true),
    };
    let code = match &outcome {
        Ok(true) => 0,
        Ok(false) => 3,
        Err(e) => {
            eprintln!("error: {e}");
            run.summary.error = Some(e.to_string());
            e.exit_code()
        }
    };
    run.summary.ok = code == 0;
    run.summary.exit_code = code;
    let text = serde_json::to_string_pretty(&run.summary).expect("summary serializes");
    if let Err(e) = std::fs::write(summary_path(&out), text) {
        eprintln!("error: cannot write summary: {e}");
        return if code == 0 { 2 } else { code };
    }
    code
}

/// Parses `args` (including the program name) and runs the command. Usage
/// errors print clap's message and return 1; `--help` and `--version` return 0.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                1
            } else {
                0
            }
        }
    }
}
