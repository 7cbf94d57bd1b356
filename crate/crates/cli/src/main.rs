//! `difrint` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use difrint::flow::{save_flow, Fallback};
use difrint::io::{load_frame, load_sequence, save_sequence, write_atomic};
use difrint::metrics::{camera_path, evaluate, FitOptions, StabilityOptions};
use difrint::nn::{load_checkpoint, load_checkpoint_into, save_checkpoint, FusionMode, FusionNets};
use difrint::stabilizer::{stabilize_with_progress, StabilizeConfig};
use difrint::synth::{filter_response_curve, generate_jitter_video, register_trajectory, write_response_csv, JitterSpec};
use difrint::training::{save_loss_csv, train, FeatureExtractor, TrainingConfig, TrainingSet};
use difrint::trajectory::TrajectorySignal;
use difrint::{estimate_flow, AnalyticOracle, ClassicalPyramidal, Error, ExternalAdapter, FlowEstimator, VideoSequence};

#[derive(Parser, Debug)]
#[command(name = "difrint", version, about = "Full-frame video stabilization by iterative frame interpolation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic jittery clip and its ground-truth trajectory.
    Synth(SynthArgs),
    /// Train the fusion networks on pseudo-ground-truth reconstruction.
    Train(TrainArgs),
    /// Stabilize a frame sequence.
    Stabilize(StabilizeArgs),
    /// Compute cropping, distortion and stability of a stabilized sequence.
    Evaluate(EvaluateArgs),
    /// Write the frequency response of the iterated midpoint filter.
    Respond(RespondArgs),
    /// Estimate the flow between two images and dump it.
    Flow(FlowArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EstimatorKind {
    /// Exact flow from known camera poses (needs `--gt`).
    Oracle,
    /// Built-in pyramidal Lucas-Kanade.
    Classical,
    /// External flow model run as a subprocess (needs `--adapter-cmd`).
    Adapter,
}

#[derive(Args, Debug)]
struct EstimatorArgs {
    /// Optical flow estimator.
    #[arg(long, value_enum, default_value_t = EstimatorKind::Classical)]
    estimator: EstimatorKind,
    /// Ground-truth trajectory CSV registering the input frames with the oracle.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Adapter command line; `{a}`, `{b}`, `{out}` and `{weights}` are substituted.
    #[arg(long, allow_hyphen_values = true)]
    adapter_cmd: Option<String>,
    /// Weight file passed to the adapter as `{weights}`.
    #[arg(long)]
    adapter_weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct JobsArg {
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Clip description (TOML); built-in defaults when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output frame directory.
    #[arg(long)]
    out: PathBuf,
    /// Where to write the ground-truth trajectory CSV.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Overrides the seed in the clip file.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    jobs: JobsArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training configuration (TOML); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Start from these weights instead of a fresh initialization.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Per-step loss log (CSV).
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the step limit of the config.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Flow estimator; `oracle` falls back to `classical` for clips without poses.
    #[arg(long, value_enum, default_value_t = EstimatorKind::Oracle)]
    estimator: EstimatorKind,
    #[arg(long, allow_hyphen_values = true)]
    adapter_cmd: Option<String>,
    #[arg(long)]
    adapter_weights: Option<PathBuf>,
    #[command(flatten)]
    jobs: JobsArg,
}

#[derive(Args, Debug)]
struct StabilizeArgs {
    /// Input frame directory.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output frame directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    #[arg(long, default_value_t = 2)]
    skip: usize,
    /// Trained fusion networks.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Replace the networks with a mask-aware average of the warped neighbors.
    #[arg(long, conflicts_with = "checkpoint")]
    bypass_fusion: bool,
    /// Also evaluate input against output and write the metrics here (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[command(flatten)]
    jobs: JobsArg,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Original frame directory.
    #[arg(long = "in")]
    input: PathBuf,
    /// Stabilized frame directory.
    #[arg(long)]
    stab: PathBuf,
    /// Metrics JSON; printed to stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Measured camera path of the stabilized frames (CSV).
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[command(flatten)]
    estimator: EstimatorArgs,
    #[command(flatten)]
    jobs: JobsArg,
}

#[derive(Args, Debug)]
struct RespondArgs {
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    #[arg(long, default_value_t = 2)]
    skip: usize,
    /// Frequencies sampled over `[0, pi]`.
    #[arg(long, default_value_t = 257)]
    samples: usize,
    /// Output CSV with columns `frequency,gain`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FlowArgs {
    /// Reference image.
    #[arg(long)]
    a: PathBuf,
    /// Image sampled by the flow.
    #[arg(long)]
    b: PathBuf,
    /// Flow dump (`.flo` layout).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    estimator: EstimatorArgs,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::Config(_)) => 2,
            Failure::Core(
                Error::Io { .. } | Error::Image { .. } | Error::NoFrames(_) | Error::InconsistentFrame { .. },
            ) => 3,
            Failure::Core(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn usage(m: impl Into<String>) -> Failure {
    Failure::Usage(m.into())
}

fn with_jobs(jobs: &JobsArg, run: impl FnOnce() -> Outcome + Send) -> Outcome {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs.jobs {
        if n == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| usage(format!("thread pool: {e}")))?;
    pool.install(run)
}

fn adapter(cmd: Option<&String>, weights: Option<&PathBuf>) -> Result<ExternalAdapter, Failure> {
    let cmd = cmd.ok_or_else(|| usage("--estimator adapter needs --adapter-cmd"))?;
    Ok(ExternalAdapter::new(
        cmd.split_whitespace().map(String::from).collect(),
        weights.cloned(),
    )?)
}

/// Builds the estimator, registering `video` with the oracle when asked.
fn build_estimator(args: &EstimatorArgs, video: Option<&VideoSequence>) -> Result<Box<dyn FlowEstimator>, Failure> {
    match args.estimator {
        EstimatorKind::Classical => Ok(Box::new(ClassicalPyramidal::default())),
        EstimatorKind::Adapter => Ok(Box::new(adapter(args.adapter_cmd.as_ref(), args.adapter_weights.as_ref())?)),
        EstimatorKind::Oracle => {
            let gt = args.gt.as_ref().ok_or_else(|| usage("--estimator oracle needs --gt"))?;
            let oracle = AnalyticOracle::new();
            if let Some(v) = video {
                register_trajectory(&oracle, v, &TrajectorySignal::load_csv(gt)?, 0)?;
            }
            Ok(Box::new(oracle))
        }
    }
}

fn write_text(path: &Path, text: &str) -> Outcome {
    Ok(write_atomic(path, |w| w.write_all(text.as_bytes()))?)
}

fn synth(args: SynthArgs) -> Outcome {
    let mut spec = match &args.spec {
        Some(p) => JitterSpec::load(p)?,
        None => JitterSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    with_jobs(&args.jobs, || {
        let (video, gt) = generate_jitter_video(&spec)?;
        let n = save_sequence(&video, &args.out)?;
        info!("wrote {n} frames to {}", args.out.display());
        if let Some(path) = &args.gt {
            gt.trajectory.save_csv(path)?;
        }
        Ok(())
    })
}

fn train_command(args: TrainArgs) -> Outcome {
    let mut config = match &args.config {
        Some(p) => TrainingConfig::load(p)?,
        None => TrainingConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.max_steps.is_some() {
        config.max_steps = args.max_steps;
    }
    config.validate()?;
    with_jobs(&args.jobs, || {
        let oracle = AnalyticOracle::new();
        let set = TrainingSet::from_config(&config.data, Some(&oracle))?;
        let estimator: Box<dyn FlowEstimator> = match args.estimator {
            EstimatorKind::Oracle => Box::new(Fallback {
                primary: oracle,
                secondary: ClassicalPyramidal::default(),
            }),
            EstimatorKind::Classical => Box::new(ClassicalPyramidal::default()),
            EstimatorKind::Adapter => Box::new(adapter(args.adapter_cmd.as_ref(), args.adapter_weights.as_ref())?),
        };
        info!("{} clips, {} triplets", set.clips.len(), set.triplets().len());
        let extractor = FeatureExtractor::from_config(&config.extractor)?;
        let mut nets = FusionNets::<f32>::new(config.fusion, config.seed);
        if let Some(init) = &args.checkpoint {
            load_checkpoint_into(&mut nets, init)?;
        }
        let start = Instant::now();
        let records = train(&mut nets, &set, &config, &extractor, estimator.as_ref(), |r| {
            if r.step % 10 == 0 {
                info!(
                    "epoch {} step {} lr {:.2e} loss {:.5} ({:.0}s)",
                    r.epoch,
                    r.step,
                    r.learning_rate,
                    r.loss.total,
                    start.elapsed().as_secs_f64()
                );
            }
        })?;
        save_checkpoint(&nets, records.len() as u64, &args.out)?;
        if let Some(path) = &args.loss_log {
            save_loss_csv(&records, path)?;
        }
        info!("{} steps in {:.1}s", records.len(), start.elapsed().as_secs_f64());
        Ok(())
    })
}

fn stabilize_command(args: StabilizeArgs) -> Outcome {
    if args.skip == 0 {
        return Err(usage("--skip must be at least 1"));
    }
    let fusion = match (&args.checkpoint, args.bypass_fusion) {
        (_, true) => FusionMode::Bypass,
        (Some(path), false) => FusionMode::Learned(Box::new(load_checkpoint::<f32>(path)?.0)),
        (None, false) => return Err(usage("stabilize needs --checkpoint or --bypass-fusion")),
    };
    let video = load_sequence(&args.input)?;
    let estimator = build_estimator(&args.estimator, Some(&video))?;
    let config = StabilizeConfig {
        iterations: args.iterations,
        skip: args.skip,
    };
    with_jobs(&args.jobs, || {
        let start = Instant::now();
        let progress = |pass: usize, total: usize| {
            info!("pass {pass}/{total} ({:.1}s)", start.elapsed().as_secs_f64());
        };
        let output = stabilize_with_progress(&video, &config, &fusion, estimator.as_ref(), &progress)?;
        save_sequence(&output, &args.out)?;
        if let Some(path) = &args.report {
            let report = evaluate(
                &video,
                &output,
                estimator.as_ref(),
                &FitOptions::default(),
                &StabilityOptions::default(),
            )?;
            write_text(path, &report.to_json())?;
        }
        Ok(())
    })
}

fn evaluate_command(args: EvaluateArgs) -> Outcome {
    let input = load_sequence(&args.input)?;
    let stab = load_sequence(&args.stab)?;
    let estimator = build_estimator(&args.estimator, Some(&input))?;
    with_jobs(&args.jobs, || {
        let fit = FitOptions::default();
        let report = evaluate(&input, &stab, estimator.as_ref(), &fit, &StabilityOptions::default())?;
        match &args.report {
            Some(path) => write_text(path, &report.to_json())?,
            None => println!("{}", report.to_json()),
        }
        if let Some(path) = &args.trajectory {
            camera_path(&stab, estimator.as_ref(), &fit)?.save_csv(path)?;
        }
        Ok(())
    })
}

fn respond(args: RespondArgs) -> Outcome {
    if args.skip == 0 {
        return Err(usage("--skip must be at least 1"));
    }
    let curve = filter_response_curve(args.skip, args.iterations, args.samples);
    Ok(write_atomic(&args.out, |w| write_response_csv(&curve, w))?)
}

fn flow_command(args: FlowArgs) -> Outcome {
    let a = load_frame(&args.a)?;
    let b = load_frame(&args.b)?;
    if args.estimator.estimator == EstimatorKind::Oracle {
        return Err(usage("the oracle needs a registered sequence; use classical or adapter"));
    }
    let estimator = build_estimator(&args.estimator, None)?;
    let flow = estimate_flow(estimator.as_ref(), &a, &b)?;
    Ok(save_flow(&flow, &args.out)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_command(a),
        Command::Stabilize(a) => stabilize_command(a),
        Command::Evaluate(a) => evaluate_command(a),
        Command::Respond(a) => respond(a),
        Command::Flow(a) => flow_command(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
