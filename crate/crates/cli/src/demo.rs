//! End-to-end run on synthetic inputs and mock backends.
//!
//! The mocks are arranged so every check has an exact answer: the generator
//! copies the conditioning depth into the green channel, the flip-invariant
//! estimator gives zero uncertainty, and the green-channel depth model reads
//! the depth back. Any nonzero error therefore means a stage is broken.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use atlantis_core::backends::BackendRegistry;
use atlantis_core::codec::{self, ImageBitDepth};
use atlantis_core::datasetbuild::{self, AssembleOptions, ConversionConfig};
use atlantis_core::evaluate::{self, Aggregation, EvalConfig, MetricsReport};
use atlantis_core::genpipe::{self, DepthSource, GenerateOptions, GenerationConfig, TrainConfig};
use atlantis_core::manifest::{read_manifest, Clock};
use atlantis_core::physics;
use atlantis_core::stage::StageContext;
use atlantis_core::uncertainty::{self, DuOptions, DEFAULT_THRESHOLD};
use atlantis_core::{prep, MetricDepthMap, RgbImage};

const W: usize = 16;
const H: usize = 12;
/// 2024-01-01T00:00:00Z, so two demo runs produce identical bytes.
const DEMO_EPOCH: i64 = 1_704_067_200;

#[derive(Debug, Clone, Serialize)]
pub struct DemoSummary {
    pub work_dir: PathBuf,
    pub triplets: usize,
    pub conditioning_depths: usize,
    pub generated: usize,
    pub max_uncertainty: f64,
    pub pairs: usize,
    pub metrics: MetricsReport,
    pub report: PathBuf,
}

/// Runs the demo and returns a process exit code.
pub fn run_demo_pipeline(work_dir: &Path, seed: u64) -> i32 {
    match demo_pipeline(work_dir, seed) {
        Ok(s) => {
            crate::emit(&(serde_json::to_string_pretty(&s).expect("serializable summary") + "\n"));
            0
        }
        Err(e) => {
            eprintln!("demo failed: {e:#}");
            1
        }
    }
}

/// Smooth scene seen through water: reddish far field fading to blue-green.
fn underwater_input(rng: &mut ChaCha8Rng) -> anyhow::Result<RgbImage> {
    let water = physics::water_preset("jerlov-II").context("missing water preset")?;
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let scene = RgbImage::from_fn(W, H, |x, y| {
        let t = (x as f64 / W as f64 * 3.0 + phase).sin() * 0.5 + 0.5;
        let s = y as f64 / H as f64;
        [0.3 + 0.5 * t, 0.2 + 0.4 * s, 0.6 - 0.3 * t * s]
    })?;
    let z: Vec<f64> = (0..W * H).map(|i| 1.0 + 6.0 * ((i % W) as f64 / W as f64)).collect();
    Ok(physics::synthesize_at(&scene, &z, W, H, &water.water)?)
}

/// Tilted plane with a bump, within [1, 18] m.
fn terrestrial_depth(rng: &mut ChaCha8Rng) -> anyhow::Result<MetricDepthMap> {
    let (cx, cy) = (rng.gen_range(0.0..W as f64), rng.gen_range(0.0..H as f64));
    let tilt: f64 = rng.gen_range(4.0..12.0);
    let data = (0..W * H)
        .map(|i| {
            let (x, y) = ((i % W) as f64, (i / W) as f64);
            let r2 = ((x - cx).powi(2) + (y - cy).powi(2)) / 20.0;
            (2.0 + tilt * y / H as f64 - 1.0 * (-r2).exp()).clamp(1.0, 18.0)
        })
        .collect();
    Ok(MetricDepthMap::with_default_cap(W, H, data)?)
}

pub fn demo_pipeline(work_dir: &Path, seed: u64) -> anyhow::Result<DemoSummary> {
    let ctx = StageContext::new(Clock::Fixed(DEMO_EPOCH), 1);
    let registry = BackendRegistry::with_mocks();
    let estimator = registry.estimator("mock-depth")?;
    let captioner = registry.captioner("mock-caption")?;
    let generator = registry.generator("mock-generator")?;
    let depth_model = registry.depth_model("green-channel-depth")?;

    let uw_dir = work_dir.join("inputs/underwater");
    let terr_dir = work_dir.join("inputs/terrestrial");
    for d in [&uw_dir, &terr_dir] {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..2 {
        codec::save_image(&underwater_input(&mut rng)?, uw_dir.join(format!("uw_{i}.png")), ImageBitDepth::Eight)?;
        codec::encode_metric(&terrestrial_depth(&mut rng)?, terr_dir.join(format!("terr_{i}.png")))?;
    }

    let m = |name: &str| work_dir.join(name).join("manifest.jsonl");

    let prep = prep::build_triplets(&uw_dir, &*estimator, &*captioner, &m("triplets"), &ctx)?;
    ensure!(prep.failures.is_empty(), "prepare failed on {} images", prep.failures.len());

    let ckpt_manifest = work_dir.join("checkpoints/generator.jsonl");
    let ckpt =
        genpipe::train_generator(&m("triplets"), &TrainConfig::new(generator.id()), &*generator, &ckpt_manifest, &ctx)?;

    let ingest = genpipe::ingest_depths(&terr_dir, DepthSource::Precomputed, &m("conditioning"), &ctx)?;
    ensure!(ingest.failures.is_empty(), "ingest failed on {} depths", ingest.failures.len());

    let gen_cfg = GenerationConfig { samples_per_condition: 2, base_seed: seed, ..GenerationConfig::default() };
    let gen = genpipe::generate_dataset_samples(
        &m("conditioning"),
        &gen_cfg,
        &*generator,
        &ckpt,
        &m("generated"),
        GenerateOptions::default(),
        &ctx,
    )?;
    ensure!(gen.failures.is_empty(), "generation failed on {} items", gen.failures.len());
    let generated = read_manifest(m("generated"))?.len();
    let expected = 2 * gen_cfg.prompts.len() * 2;
    ensure!(generated == expected, "expected {expected} generated records, found {generated}");

    let filter = uncertainty::filter_images(
        &m("generated"),
        &*estimator,
        DEFAULT_THRESHOLD,
        DuOptions::default(),
        &m("filtered"),
        &ctx,
    )?;
    ensure!(filter.failures.is_empty(), "filter failed on {} images", filter.failures.len());
    let max_uncertainty = read_manifest(m("filtered"))?
        .iter()
        .filter_map(|r| r.param_f64("max_du"))
        .fold(0.0, f64::max);
    if max_uncertainty != 0.0 {
        bail!("flip-invariant estimator produced uncertainty {max_uncertainty}");
    }

    let opts = AssembleOptions {
        conversion: ConversionConfig::default(),
        threshold: DEFAULT_THRESHOLD,
        split_ratio: 0.75,
        du: DuOptions::default(),
    };
    let data = datasetbuild::assemble_dataset(
        &m("generated"),
        Some(&m("filtered")),
        &*estimator,
        &opts,
        &m("dataset"),
        &ctx,
    )?;
    ensure!(data.failures.is_empty(), "dataset build failed on {} pairs", data.failures.len());
    ensure!(data.pairs == expected, "expected {expected} pairs, found {}", data.pairs);

    let depth_ckpt_manifest = work_dir.join("checkpoints/depth.jsonl");
    let depth_ckpt = evaluate::train_depth_model(
        &m("dataset"),
        &TrainConfig::new(depth_model.id()),
        &*depth_model,
        &depth_ckpt_manifest,
        &ctx,
    )?;

    let eval_cfg = EvalConfig::default();
    let outcome =
        evaluate::evaluate_model(&*depth_model, &depth_ckpt, &m("dataset"), &eval_cfg, Aggregation::PerImage, &ctx)?;
    let eval_dir = work_dir.join("eval/green-channel");
    evaluate::write_eval_outputs(&outcome, depth_model.id(), None, &eval_cfg, &eval_dir, &ctx)?;
    let metrics = outcome.aggregate.context("evaluation produced no metrics")?;
    ensure!(outcome.failures.is_empty(), "evaluation failed on {} images", outcome.failures.len());
    ensure!(metrics.delta1 == 1.0, "delta1 is {}, expected 1", metrics.delta1);
    let errors = [metrics.rmse, metrics.rmse_log, metrics.a_rel, metrics.s_rel, metrics.log10, metrics.si_log];
    ensure!(errors.iter().all(|e| e.abs() < 1e-6), "nonzero round-trip error: {metrics:?}");

    let rows = evaluate::load_result_rows(&work_dir.join("eval"))?;
    let report = evaluate::render_report(&rows, &work_dir.join("report"))?;

    Ok(DemoSummary {
        work_dir: work_dir.to_path_buf(),
        triplets: prep.success,
        conditioning_depths: ingest.written + ingest.skipped,
        generated,
        max_uncertainty,
        pairs: data.pairs,
        metrics,
        report: report.text,
    })
}
