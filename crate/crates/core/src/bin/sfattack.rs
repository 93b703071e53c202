use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sfattack::attacks::{AttackConfig, AttackKind, RandomMode, StepSize, TargetMask};
use sfattack::estimators::{
    load_weights, save_weights, train_tiny, Estimator, OtEstimator, TinyEstimator, TinyNetWeights,
};
use sfattack::harness::{
    attack_pair, gradcheck_suite, json_string, parse_grid, render_flow_svg, run_experiment,
    write_report, GridEntry, RunOptions, SvgOptions,
};
use sfattack::pointcloud::{FlowField, ScenePair};
use sfattack::seed::derive_seed;
use sfattack::synthgen::{make_dataset, read_dataset, write_dataset, MotionSampler};
use sfattack::{Error, Result};

/// Adversarial attacks on point-cloud scene flow.
#[derive(Parser)]
#[command(name = "sfattack", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of scene pairs.
    Generate(GenerateArgs),
    /// Train the tiny flow network on a dataset.
    Train(TrainArgs),
    /// Attack one scene pair.
    Attack(AttackArgs),
    /// Run an attack grid over a dataset.
    Eval(EvalArgs),
    /// Check analytic gradients of both estimators against finite differences.
    Gradcheck(GradcheckArgs),
    /// Draw a pair and one or two flows as SVG.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Motion {
    Rigid,
    Deform,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    scenes: usize,
    #[arg(long)]
    points: usize,
    #[arg(long, value_enum, default_value = "rigid")]
    motion: Motion,
    /// Give every point an RGB color.
    #[arg(long, overrides_with = "no_color")]
    color: bool,
    #[arg(long = "no-color", overrides_with = "color")]
    no_color: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// `ot`, `tiny:<weights.sftn>`, or `tiny` for freshly initialized weights.
    #[arg(long, default_value = "ot")]
    model: String,
}

#[derive(Args)]
struct AttackFlags {
    #[arg(long, default_value = "fgsm")]
    attack: String,
    #[arg(long)]
    eps: Option<f64>,
    /// Defaults to 10 for pgd and 1 otherwise.
    #[arg(long)]
    iters: Option<usize>,
    /// Defaults to 2.5 * eps / iters.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    random_start: bool,
    #[arg(long, default_value = "all-dims")]
    target: String,
    #[arg(long, value_enum, default_value = "uniform")]
    random_mode: RandomArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum RandomArg {
    Uniform,
    Rademacher,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    flags: AttackFlags,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the pair with its flow slot holding the clean estimate.
    #[arg(long)]
    flow_before: Option<PathBuf>,
    /// Also write the pair with its flow slot holding the estimate on the attacked frame.
    #[arg(long)]
    flow_after: Option<PathBuf>,
    /// Record wall times (makes reports non-reproducible).
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    /// JSON list of attack configurations; without it the inline attack flags form a one-entry grid.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[command(flatten)]
    flags: AttackFlags,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    pairs: usize,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Pair file whose flow slot holds the first flow (red).
    #[arg(long)]
    flow_a: PathBuf,
    /// Pair file whose flow slot holds the second flow (green).
    #[arg(long)]
    flow_b: Option<PathBuf>,
    /// Axis dropped by the projection.
    #[arg(long, default_value_t = 2)]
    axis: usize,
    #[arg(long)]
    out: PathBuf,
}

fn load_model(spec: &str, with_color: bool, seed: u64) -> Result<Box<dyn Estimator>> {
    let in_dim = if with_color { 6 } else { 3 };
    match spec.split_once(':') {
        None if spec == "ot" => Ok(Box::new(OtEstimator::default())),
        None if spec == "tiny" => {
            let w = TinyNetWeights::init(in_dim, derive_seed(seed, &[b"tiny"]))?;
            Ok(Box::new(TinyEstimator::new(w)))
        }
        Some(("tiny", path)) => {
            let w = load_weights(&fs::read(path)?)?;
            Ok(Box::new(TinyEstimator::new(w)))
        }
        _ => Err(Error::Parse(format!("unknown model '{spec}'"))),
    }
}

impl AttackFlags {
    fn entry(&self) -> Result<GridEntry> {
        let attack: AttackKind = self.attack.parse()?;
        let mask: TargetMask = self.target.parse()?;
        let eps = match (attack, self.eps) {
            (AttackKind::None, e) => e.unwrap_or(0.0),
            (_, Some(e)) => e,
            (_, None) => return Err(Error::Validation(format!("--eps is required for {attack}"))),
        };
        let iters = self
            .iters
            .unwrap_or(if attack == AttackKind::Pgd { 10 } else { 1 });
        let mut cfg = AttackConfig::new(eps, iters, mask);
        cfg.alpha = self.alpha.map_or(StepSize::Auto, StepSize::Fixed);
        cfg.random_start = self.random_start;
        cfg.random_mode = match self.random_mode {
            RandomArg::Uniform => RandomMode::Uniform,
            RandomArg::Rademacher => RandomMode::Rademacher,
        };
        let entry = GridEntry::new(attack, cfg);
        entry.validate()?;
        Ok(entry)
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let color = a.color && !a.no_color;
    let sampler = match a.motion {
        Motion::Rigid => MotionSampler::rigid(a.points, color),
        Motion::Deform => MotionSampler::deform(a.points, color),
    };
    let entries = make_dataset(a.scenes, &sampler, a.seed)?;
    write_dataset(&a.out, &entries, &sampler, a.seed)?;
    println!("wrote {} pairs to {}", entries.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let outcome = train_tiny(&data, a.epochs, a.lr, a.seed)?;
    fs::write(&a.out, save_weights(&outcome.weights))?;
    for (i, loss) in outcome.loss_trace.iter().enumerate() {
        println!("epoch {} loss {loss}", i + 1);
    }
    Ok(())
}

fn with_flow(pair: &ScenePair, flow: FlowField) -> ScenePair {
    ScenePair {
        gt_flow: Some(flow),
        ..pair.clone()
    }
}

fn attack(a: AttackArgs) -> Result<()> {
    let pair = ScenePair::read(&a.input)?;
    let entry = a.flags.entry()?;
    let est = load_model(&a.model.model, pair.has_colors(), a.seed)?;
    let opts = RunOptions {
        timings: a.timings,
        ..RunOptions::new(a.seed)
    };
    let (report, result) = attack_pair(&pair, est.as_ref(), &entry, &opts)?;
    let adv = result.adv_pair(&pair);
    adv.write(&a.out)?;
    if let Some(p) = &a.flow_before {
        with_flow(&pair, est.estimate(&pair)?).write(p)?;
    }
    if let Some(p) = &a.flow_after {
        with_flow(&pair, est.estimate(&adv)?).write(p)?;
    }
    match &a.report {
        Some(p) => write_report(&report, Some(p), None)?,
        None => print!("{}", json_string(&report)?),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let grid = match &a.grid {
        Some(p) => parse_grid(&fs::read_to_string(p)?)?,
        None => vec![a.flags.entry()?],
    };
    let color = data.first().is_some_and(|p| p.has_colors());
    let est = load_model(&a.model.model, color, a.seed)?;
    let opts = RunOptions {
        seed: a.seed,
        jobs: a.jobs,
        timings: a.timings,
    };
    let report = run_experiment(&data, est.as_ref(), &grid, &opts)?;
    if a.report.is_none() && a.csv.is_none() {
        print!("{}", json_string(&report)?);
    }
    write_report(&report, a.report.as_deref(), a.csv.as_deref())
}

/// Exit status 2 when any check fails.
fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let suite = gradcheck_suite(a.seed, a.pairs)?;
    println!("{}", serde_json::to_string_pretty(&suite)?);
    Ok(if suite.pass { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn read_flow(path: &Path) -> Result<FlowField> {
    ScenePair::read(path)?
        .gt_flow
        .ok_or_else(|| Error::Validation(format!("{} carries no flow", path.display())))
}

fn plot(a: PlotArgs) -> Result<()> {
    let pair = ScenePair::read(&a.input)?;
    let flow_a = read_flow(&a.flow_a)?;
    let flow_b = a.flow_b.as_deref().map(read_flow).transpose()?;
    let svg = render_flow_svg(&pair, &flow_a, flow_b.as_ref(), SvgOptions { drop_axis: a.axis })?;
    fs::write(&a.out, svg)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Generate(a) => generate(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => train(a).map(|_| ExitCode::SUCCESS),
        Command::Attack(a) => attack(a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => eval(a).map(|_| ExitCode::SUCCESS),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Plot(a) => plot(a).map(|_| ExitCode::SUCCESS),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}
