//! Command-line front end: one subcommand per pipeline stage.
//!
//! Exit codes: 0 on full success, 1 when some items failed (or a stage failed
//! at run time), 2 for usage and configuration errors.

// `!(x > 0.0)` is deliberate: it rejects NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod demo;

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use atlantis_core::backends::{BackendRegistry, CheckpointRef};
use atlantis_core::codec::{self, ImageBitDepth};
use atlantis_core::datasetbuild::{self, AssembleOptions, Mapping};
use atlantis_core::evaluate::{self, Aggregation};
use atlantis_core::genpipe::{self, DepthSource, GenerateOptions, TrainConfig};
use atlantis_core::manifest::{manifest_validate, Clock};
use atlantis_core::physics::{self, Attenuation, RecoverOptions};
use atlantis_core::stage::{ItemFailure, StageContext};
use atlantis_core::uncertainty::{self, DuOptions, VarianceKind};
use atlantis_core::{prep, Error};

pub use config::PipelineConfig;
pub use demo::{demo_pipeline, run_demo_pipeline, DemoSummary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// A usage or configuration problem (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

/// Exit code for a failed command.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidConfig(_) | Error::NonPositiveThreshold(_) | Error::CheckpointMismatch { .. } => {
                    EXIT_USAGE
                }
                _ => EXIT_PARTIAL,
            };
        }
    }
    EXIT_PARTIAL
}

#[derive(Debug, Parser)]
#[command(name = "atlantis", version, about = "Underwater metric-depth data pipeline")]
pub struct Cli {
    /// Pipeline config JSON; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pseudo-label and caption a directory of underwater images.
    Prepare(PrepareArgs),
    /// Turn terrestrial images or depth files into conditioning depth.
    IngestDepths(IngestArgs),
    /// Train the generator's conditioning branch on triplets.
    TrainGen(TrainGenArgs),
    /// Generate underwater images from conditioning depth.
    Generate(GenerateArgs),
    /// Compute flip-consistency uncertainty and validity masks.
    Filter(FilterArgs),
    /// Assemble the metric-depth dataset.
    Build(BuildArgs),
    /// Summarize a dataset manifest.
    Stats(StatsArgs),
    /// Train a depth model on a dataset.
    TrainDepth(TrainDepthArgs),
    /// Evaluate a depth model or precomputed predictions.
    Eval(EvalArgs),
    /// Render comparison tables and plots from result files.
    Report(ReportArgs),
    /// Remove water effects from an image given its depth.
    Enhance(EnhanceArgs),
    /// Add water effects to an image given its depth.
    Synth(SynthArgs),
    /// Check a manifest's ids, paths and digests.
    Validate(ValidateArgs),
    /// Run every stage end to end on mock backends.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value = "mock-depth")]
    pub estimator: String,
    #[arg(long, default_value = "mock-caption")]
    pub captioner: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Pseudo-label RGB images with this estimator instead of reading depth files.
    #[arg(long)]
    pub estimator: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainGenArgs {
    #[arg(long)]
    pub triplets: PathBuf,
    #[arg(long, default_value = "mock-generator")]
    pub backend: String,
    /// Checkpoint manifest to append to.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub depths: PathBuf,
    #[arg(long, default_value = "mock-generator")]
    pub backend: String,
    /// Checkpoint manifest; its last checkpoint record is used.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub steps: Option<u32>,
    #[arg(long)]
    pub samples: Option<u32>,
    /// One prompt per line.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many new records.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VarianceArg {
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct DuArgs {
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub variance: Option<VarianceArg>,
    #[arg(long, value_enum)]
    pub normalize: Option<OnOff>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value = "mock-depth")]
    pub estimator: String,
    #[command(flatten)]
    pub du: DuArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MappingArg {
    InverseLinear,
    Linear,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub generated: PathBuf,
    /// Filter-stage manifest whose masks are reused.
    #[arg(long)]
    pub uncertainty: Option<PathBuf>,
    #[arg(long, default_value = "mock-depth")]
    pub estimator: String,
    #[command(flatten)]
    pub du: DuArgs,
    #[arg(long)]
    pub dmin: Option<f64>,
    #[arg(long)]
    pub dmax: Option<f64>,
    #[arg(long, value_enum)]
    pub mapping: Option<MappingArg>,
    #[arg(long)]
    pub split: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Also write the machine-readable report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainDepthArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "green-channel-depth")]
    pub backend: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub backend: Option<String>,
    /// Checkpoint manifest; defaults to an untrained reference.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub testset: Option<PathBuf>,
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub median_scaling: bool,
    #[arg(long)]
    pub gt_max: Option<f64>,
    #[arg(long)]
    pub gt_min: Option<f64>,
    /// Pool pixels across images instead of averaging per image.
    #[arg(long)]
    pub pooled: bool,
    #[arg(long, value_enum)]
    pub si_variance: Option<VarianceArg>,
    /// Row name in reports.
    #[arg(long)]
    pub name: Option<String>,
    /// Rows sharing a group are compared when flagging the best value.
    #[arg(long)]
    pub group: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AttenuationArg {
    Illumination,
    Constant,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Metric depth (16-bit PNG with sidecar).
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = 0.01)]
    pub percentile: f64,
    #[arg(long, value_enum, default_value = "illumination")]
    pub attenuation: AttenuationArg,
    /// Blend weight of the local average.
    #[arg(long, default_value_t = 0.5)]
    pub p: f64,
    #[arg(long)]
    pub no_white_balance: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, required_unless_present = "list_water")]
    pub image: Option<PathBuf>,
    /// Metric depth (16-bit PNG with sidecar).
    #[arg(long, required_unless_present = "list_water")]
    pub depth: Option<PathBuf>,
    /// Print the water presets and exit.
    #[arg(long)]
    pub list_water: bool,
    /// Water type preset.
    #[arg(long, required_unless_present = "list_water")]
    pub water: Option<String>,
    #[arg(long, required_unless_present = "list_water")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub work_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `argv` (including the program name), runs the command and returns
/// its exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code_for(&e)
        }
    }
}

struct Env {
    cfg: PipelineConfig,
    registry: BackendRegistry,
    ctx: StageContext,
}

impl Env {
    fn path(&self, p: &Path) -> PathBuf {
        self.cfg.resolve(p)
    }
}

fn load_env(cli: &Cli) -> anyhow::Result<Env> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| usage(format!("{e:#}")))?,
        None => PipelineConfig::default(),
    };
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    let registry = cfg.validate().map_err(|e| usage(e.to_string()))?;
    let ctx = StageContext::new(Clock::from_env(), cfg.jobs);
    Ok(Env { cfg, registry, ctx })
}

fn lookup<T>(r: atlantis_core::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| usage(e.to_string()))
}

/// Writes to stdout, ignoring a closed pipe (`atlantis ... | head`).
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json<T: Serialize>(value: &T) {
    emit(&(serde_json::to_string_pretty(value).expect("serializable report") + "\n"));
}

fn finish(failures: &[ItemFailure]) -> i32 {
    for f in failures {
        eprintln!("failed: {}: {}", f.item, f.error);
    }
    if failures.is_empty() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    }
}

fn du_options(args: &DuArgs, cfg: &PipelineConfig) -> (f64, DuOptions) {
    let mut opts = cfg.uncertainty.options();
    if let Some(v) = args.variance {
        opts.variance = match v {
            VarianceArg::Population => VarianceKind::Population,
            VarianceArg::Sample => VarianceKind::Sample,
        };
    }
    if let Some(n) = args.normalize {
        opts.normalize = matches!(n, OnOff::On);
    }
    (args.threshold.unwrap_or(cfg.uncertainty.threshold), opts)
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    if let Command::Demo(a) = &cli.command {
        let summary = demo_pipeline(&a.work_dir, a.seed)?;
        print_json(&summary);
        return Ok(EXIT_OK);
    }
    let env = load_env(&cli)?;
    match cli.command {
        Command::Prepare(a) => {
            let est = lookup(env.registry.estimator(&a.estimator))?;
            let cap = lookup(env.registry.captioner(&a.captioner))?;
            let report = prep::build_triplets(&env.path(&a.images), &*est, &*cap, &env.path(&a.out), &env.ctx)?;
            print_json(&report);
            Ok(finish(&report.failures))
        }
        Command::IngestDepths(a) => {
            let est = a.estimator.as_deref().map(|id| lookup(env.registry.estimator(id))).transpose()?;
            let source = match &est {
                Some(e) => DepthSource::Estimator(&**e),
                None => DepthSource::Precomputed,
            };
            let report = genpipe::ingest_depths(&env.path(&a.input), source, &env.path(&a.out), &env.ctx)?;
            print_json(&report);
            Ok(finish(&report.failures))
        }
        Command::TrainGen(a) => {
            let backend = lookup(env.registry.generator(&a.backend))?;
            let mut tc = TrainConfig::new(&a.backend);
            tc.hyperparameters = env.cfg.train.hyperparameters.clone();
            let ckpt = genpipe::train_generator(&env.path(&a.triplets), &tc, &*backend, &env.path(&a.out), &env.ctx)?;
            print_json(&ckpt);
            Ok(EXIT_OK)
        }
        Command::Generate(a) => {
            let backend = lookup(env.registry.generator(&a.backend))?;
            let ckpt = genpipe::load_checkpoint(&env.path(&a.checkpoint))?;
            let mut gc = env.cfg.generation.clone();
            if let Some(v) = a.guidance {
                gc.guidance_scale = v;
            }
            if let Some(v) = a.steps {
                gc.num_steps = v;
            }
            if let Some(v) = a.samples {
                gc.samples_per_condition = v;
            }
            if let Some(v) = a.seed {
                gc.base_seed = v;
            }
            if let Some(p) = &a.prompts {
                let p = env.path(p);
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading prompts {}", p.display()))?;
                gc.prompts = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            }
            gc.validate().map_err(|e| usage(e.to_string()))?;
            let report = genpipe::generate_dataset_samples(
                &env.path(&a.depths),
                &gc,
                &*backend,
                &ckpt,
                &env.path(&a.out),
                GenerateOptions { limit: a.limit },
                &env.ctx,
            )?;
            print_json(&report);
            Ok(finish(&report.failures))
        }
        Command::Filter(a) => {
            let est = lookup(env.registry.estimator(&a.estimator))?;
            let (threshold, opts) = du_options(&a.du, &env.cfg);
            let report =
                uncertainty::filter_images(&env.path(&a.images), &*est, threshold, opts, &env.path(&a.out), &env.ctx)?;
            print_json(&report);
            Ok(finish(&report.failures))
        }
        Command::Build(a) => {
            let est = lookup(env.registry.estimator(&a.estimator))?;
            let (threshold, du) = du_options(&a.du, &env.cfg);
            let mut conversion = env.cfg.conversion;
            if let Some(v) = a.dmin {
                conversion.d_min_m = v;
            }
            if let Some(v) = a.dmax {
                conversion.d_max_m = v;
            }
            if let Some(m) = a.mapping {
                conversion.mapping = match m {
                    MappingArg::InverseLinear => Mapping::InverseLinear,
                    MappingArg::Linear => Mapping::Linear,
                };
            }
            let opts =
                AssembleOptions { conversion, threshold, split_ratio: a.split.unwrap_or(env.cfg.split_ratio), du };
            let unc = a.uncertainty.as_deref().map(|p| env.path(p));
            let report = datasetbuild::assemble_dataset(
                &env.path(&a.generated),
                unc.as_deref(),
                &*est,
                &opts,
                &env.path(&a.out),
                &env.ctx,
            )?;
            print_json(&report);
            Ok(finish(&report.failures))
        }
        Command::Stats(a) => {
            let report = datasetbuild::dataset_stats(&env.path(&a.dataset))?;
            emit(&report.to_table());
            if let Some(j) = &a.json {
                let j = env.path(j);
                std::fs::write(&j, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", j.display()))?;
            }
            Ok(EXIT_OK)
        }
        Command::TrainDepth(a) => {
            let backend = lookup(env.registry.depth_model(&a.backend))?;
            let mut tc = TrainConfig::new(&a.backend);
            tc.hyperparameters = env.cfg.train.hyperparameters.clone();
            let ckpt = evaluate::train_depth_model(&env.path(&a.dataset), &tc, &*backend, &env.path(&a.out), &env.ctx)?;
            print_json(&ckpt);
            Ok(EXIT_OK)
        }
        Command::Eval(a) => run_eval(&env, a),
        Command::Report(a) => {
            let rows = evaluate::load_result_rows(&env.path(&a.results))?;
            let out = evaluate::render_report(&rows, &env.path(&a.out))?;
            emit(&evaluate::render_text_table(&rows));
            eprintln!("wrote {} and {}", out.text.display(), out.csv.display());
            Ok(EXIT_OK)
        }
        Command::Enhance(a) => {
            let img = codec::load_image(env.path(&a.image))?;
            let depth = codec::decode_metric(env.path(&a.depth))?;
            let fit = physics::estimate_backscatter(&img, &depth, a.bins, a.percentile)?;
            let attenuation = match a.attenuation {
                AttenuationArg::Illumination => Attenuation::IlluminationMap { p: a.p, eps: 1e-5 },
                AttenuationArg::Constant => Attenuation::ConstantBeta,
            };
            let opts = RecoverOptions { attenuation, white_balance: !a.no_white_balance };
            let out = physics::recover_scene(&img, &depth, &fit, &opts)?;
            codec::save_image(&out, env.path(&a.out), ImageBitDepth::Eight)?;
            print_json(&fit);
            Ok(EXIT_OK)
        }
        Command::Synth(a) => {
            if a.list_water {
                print_json(&physics::water_type_presets());
                return Ok(EXIT_OK);
            }
            let (Some(image), Some(depth), Some(water), Some(out_path)) = (a.image, a.depth, a.water, a.out) else {
                return Err(usage("synth needs --image, --depth, --water and --out"));
            };
            let preset = physics::water_preset(&water).ok_or_else(|| {
                let names: Vec<String> = physics::water_type_presets().into_iter().map(|p| p.name).collect();
                usage(format!("unknown water type '{water}'; known: {}", names.join(", ")))
            })?;
            let img = codec::load_image(env.path(&image))?;
            let depth = codec::decode_metric(env.path(&depth))?;
            let out = physics::synthesize_underwater(&img, &depth, &preset.water)?;
            codec::save_image(&out, env.path(&out_path), ImageBitDepth::Eight)?;
            Ok(EXIT_OK)
        }
        Command::Validate(a) => {
            let report = manifest_validate(env.path(&a.manifest))?;
            print_json(&report);
            Ok(if report.is_consistent() { EXIT_OK } else { EXIT_PARTIAL })
        }
        Command::Demo(_) => unreachable!("handled above"),
    }
}

fn run_eval(env: &Env, a: EvalArgs) -> anyhow::Result<i32> {
    let mut cfg = env.cfg.eval;
    cfg.median_scaling |= a.median_scaling;
    if a.gt_max.is_some() {
        cfg.gt_max_m = a.gt_max;
    }
    if let Some(v) = a.gt_min {
        cfg.gt_min_m = v;
    }
    if let Some(v) = a.si_variance {
        cfg.si_variance = match v {
            VarianceArg::Population => VarianceKind::Population,
            VarianceArg::Sample => VarianceKind::Sample,
        };
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let aggregation = if a.pooled { Aggregation::Pooled } else { Aggregation::PerImage };
    let (outcome, default_name) = match (&a.backend, &a.testset, &a.pred, &a.gt) {
        (Some(id), Some(testset), None, None) => {
            let backend = lookup(env.registry.depth_model(id))?;
            let ckpt = match &a.checkpoint {
                Some(p) => genpipe::load_checkpoint(&env.path(p))?,
                None => CheckpointRef { backend_id: id.clone(), uri: "untrained".into(), config_hash: String::new() },
            };
            let o = evaluate::evaluate_model(&*backend, &ckpt, &env.path(testset), &cfg, aggregation, &env.ctx)?;
            (o, id.clone())
        }
        (None, None, Some(pred), Some(gt)) => {
            let mask = a.mask.as_deref().map(|m| env.path(m));
            let o = evaluate::evaluate_predictions(&env.path(pred), &env.path(gt), mask.as_deref(), &cfg, aggregation)?;
            let name = pred.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "predictions".into());
            (o, name)
        }
        _ => return Err(usage("eval needs either --backend and --testset, or --pred and --gt")),
    };
    let name = a.name.unwrap_or(default_name);
    let out_dir = env.path(&a.out);
    evaluate::write_eval_outputs(&outcome, &name, a.group.as_deref(), &cfg, &out_dir, &env.ctx)?;
    print_json(&outcome);
    for id in &outcome.excluded {
        eprintln!("excluded (no valid pixels): {id}");
    }
    if outcome.aggregate.is_none() {
        return Err(anyhow!("no image produced metrics"));
    }
    Ok(finish(&outcome.failures))
}
