//! Stage contracts exercised through the files they exchange.

use std::path::{Path, PathBuf};

use atlantis_core::backends::{
    BiasedDepthEstimator, CheckpointRef, ConditionedGenerator, MockCaptioner, MockDepthEstimator, MockGenerator,
};
use atlantis_core::codec::{self, ImageBitDepth};
use atlantis_core::datasetbuild::{assemble_dataset, dataset_stats, AssembleOptions};
use atlantis_core::evaluate::{evaluate_predictions, Aggregation, EvalConfig};
use atlantis_core::genpipe::{self, DepthSource, GenerateOptions, GenerationConfig, TrainConfig};
use atlantis_core::manifest::{manifest_validate, read_manifest, Clock, RecordKind};
use atlantis_core::prep::build_triplets;
use atlantis_core::raster::RgbImage;
use atlantis_core::stage::StageContext;
use atlantis_core::uncertainty::{filter_images, DuOptions};
use atlantis_core::{DepthRaster, Error, MetricDepthMap, RawDepth};

fn ctx() -> StageContext {
    StageContext::new(Clock::Fixed(1_700_000_000), 2)
}

fn gradient(w: usize, h: usize, tint: f64) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| [tint, x as f64 / w as f64, y as f64 / h as f64]).unwrap()
}

fn conditioning(dir: &Path, n: usize) -> PathBuf {
    let input = dir.join("terrestrial");
    std::fs::create_dir_all(&input).unwrap();
    for i in 0..n {
        let data = (0..24).map(|k| 1.0 + (k + i) as f64 * 0.5).collect();
        let d = MetricDepthMap::with_default_cap(6, 4, data).unwrap();
        codec::encode_metric(&d, input.join(format!("d{i}.png"))).unwrap();
    }
    let m = dir.join("conditioning/manifest.jsonl");
    genpipe::ingest_depths(&input, DepthSource::Precomputed, &m, &ctx()).unwrap();
    m
}

fn ckpt() -> CheckpointRef {
    CheckpointRef { backend_id: "mock-generator".into(), uri: "mock://mock-generator/t".into(), config_hash: "".into() }
}

fn gen_cfg() -> GenerationConfig {
    GenerationConfig { samples_per_condition: 2, ..GenerationConfig::default() }
}

#[test]
fn prepare_skips_bad_files_and_reuses_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("uw");
    std::fs::create_dir_all(&images).unwrap();
    for i in 0..2 {
        codec::save_image(&gradient(8, 6, 0.2 * i as f64), images.join(format!("{i}.png")), ImageBitDepth::Eight)
            .unwrap();
    }
    std::fs::write(images.join("broken.png"), b"not a png").unwrap();
    let out = dir.path().join("triplets/manifest.jsonl");
    let (est, cap) = (MockDepthEstimator::default(), MockCaptioner::default());

    let first = build_triplets(&images, &est, &cap, &out, &ctx()).unwrap();
    assert_eq!((first.inputs, first.success, first.failed), (3, 2, 1));
    assert!(first.failures[0].item.contains("broken"));
    let second = build_triplets(&images, &est, &cap, &out, &ctx()).unwrap();
    assert_eq!((second.success, second.reused), (2, 2));
    assert_eq!(read_manifest(&out).unwrap().iter().filter(|r| r.kind == RecordKind::Triplet).count(), 2);
    assert!(manifest_validate(&out).unwrap().is_consistent());

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert!(matches!(build_triplets(&empty, &est, &cap, &out, &ctx()), Err(Error::EmptyInputDir(_))));
}

#[test]
fn training_rejects_foreign_backend_and_empty_triplets() {
    let dir = tempfile::tempdir().unwrap();
    let triplets = dir.path().join("t.jsonl");
    std::fs::write(&triplets, "").unwrap();
    let g = MockGenerator::default();
    let out = dir.path().join("ckpt.jsonl");
    let err = genpipe::train_generator(&triplets, &TrainConfig::new("other"), &g, &out, &ctx()).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(_)));
    let err = genpipe::train_generator(&triplets, &TrainConfig::new(g.id()), &g, &out, &ctx()).unwrap_err();
    assert!(matches!(err, Error::EmptyTriplets(_)));
}

#[test]
fn failed_sample_is_reported_and_filled_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cond = conditioning(dir.path(), 2);
    let out = dir.path().join("gen/manifest.jsonl");
    let flaky = MockGenerator::default().failing_on_call(3);
    let serial = StageContext::new(Clock::Fixed(0), 1);
    let r = genpipe::generate_dataset_samples(&cond, &gen_cfg(), &flaky, &ckpt(), &out, GenerateOptions::default(), &serial)
        .unwrap();
    assert_eq!((r.expected, r.written, r.failures.len()), (8, 7, 1));

    let r = genpipe::generate_dataset_samples(
        &cond,
        &gen_cfg(),
        &MockGenerator::default(),
        &ckpt(),
        &out,
        GenerateOptions::default(),
        &serial,
    )
    .unwrap();
    assert_eq!((r.written, r.skipped), (1, 7));
    assert_eq!(read_manifest(&out).unwrap().len(), 8);
}

#[test]
fn parallel_generation_matches_serial() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut digests = Vec::new();
    for (dir, jobs) in [(a.path(), 1), (b.path(), 4)] {
        let cond = conditioning(dir, 3);
        let out = dir.join("gen/manifest.jsonl");
        let c = StageContext::new(Clock::Fixed(0), jobs);
        genpipe::generate_dataset_samples(&cond, &gen_cfg(), &MockGenerator::default(), &ckpt(), &out, Default::default(), &c)
            .unwrap();
        digests.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(digests[0], digests[1]);
}

#[test]
fn foreign_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cond = conditioning(dir.path(), 1);
    let other = CheckpointRef { backend_id: "someone-else".into(), ..ckpt() };
    let out = dir.path().join("gen/manifest.jsonl");
    let err = genpipe::generate_dataset_samples(
        &cond,
        &gen_cfg(),
        &MockGenerator::default(),
        &other,
        &out,
        GenerateOptions::default(),
        &ctx(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::CheckpointMismatch { .. }));
}

#[test]
fn biased_estimator_masks_edges_in_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cond = conditioning(dir.path(), 2);
    let gen = dir.path().join("gen/manifest.jsonl");
    genpipe::generate_dataset_samples(&cond, &gen_cfg(), &MockGenerator::default(), &ckpt(), &gen, Default::default(), &ctx())
        .unwrap();

    let biased = BiasedDepthEstimator::new("biased", 0.8).unwrap();
    let filtered = dir.path().join("filtered/manifest.jsonl");
    let f = filter_images(&gen, &biased, 0.15, DuOptions::default(), &filtered, &ctx()).unwrap();
    assert_eq!(f.written, 8);
    assert!(f.mean_valid_fraction < 1.0);

    let data = dir.path().join("dataset/manifest.jsonl");
    let opts = AssembleOptions { split_ratio: 0.75, ..AssembleOptions::default() };
    let report = assemble_dataset(&gen, Some(&filtered), &biased, &opts, &data, &ctx()).unwrap();
    assert_eq!(report.pairs, 8);
    assert_eq!(report.splits.get("train"), Some(&6));
    assert_eq!(report.splits.get("val"), Some(&2));
    assert!((report.mean_valid_fraction - f.mean_valid_fraction).abs() < 1e-12);
    assert!(manifest_validate(&data).unwrap().is_consistent());

    let stats = dataset_stats(&data).unwrap();
    assert_eq!(stats.pairs, 8);
    assert!(stats.valid_fraction_max <= 1.0 && stats.valid_fraction_min >= 0.0);
    assert_eq!(stats.prompt_frequency.values().sum::<usize>(), 8);
}

#[test]
fn assembling_an_empty_generation_yields_no_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen.jsonl");
    std::fs::write(&gen, "").unwrap();
    let out = dir.path().join("out.jsonl");
    let est = MockDepthEstimator::default();
    let r = assemble_dataset(&gen, None, &est, &AssembleOptions::default(), &out, &ctx()).unwrap();
    assert_eq!(r.pairs, 0);
}

#[test]
fn precomputed_evaluation_excludes_images_without_valid_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    let p = RawDepth::new(2, 1, vec![2.0, 2.0]).unwrap();
    codec::encode_metric_raw(&p, 20.0, pred.join("a.png")).unwrap();
    codec::encode_metric_raw(&p, 20.0, pred.join("b.png")).unwrap();
    codec::encode_metric_raw(&RawDepth::new(2, 1, vec![1.0, 4.0]).unwrap(), 20.0, gt.join("a.png")).unwrap();
    // zeros are holes in stored ground truth
    codec::encode_metric_raw(&RawDepth::new(2, 1, vec![0.0, 0.0]).unwrap(), 20.0, gt.join("b.png")).unwrap();

    let out = evaluate_predictions(&pred, &gt, None, &EvalConfig::default(), Aggregation::PerImage).unwrap();
    assert_eq!(out.excluded, vec!["b.png".to_string()]);
    assert_eq!(out.per_image.len(), 1);
    let m = out.aggregate.unwrap();
    assert!((m.rmse - 2.5f64.sqrt()).abs() < 1e-9);
    assert!((m.si_log - 100.0 * 2f64.ln()).abs() < 1e-9);
}

mod stage_properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn triplet_counts_add_up_and_reruns_are_identical(good in 0usize..5, bad in 0usize..3, seed in any::<u64>()) {
            prop_assume!(good + bad > 0);
            let dir = tempfile::tempdir().unwrap();
            let images = dir.path().join("uw");
            std::fs::create_dir_all(&images).unwrap();
            for i in 0..good {
                let tint = ((seed >> (i * 8)) & 0xff) as f64 / 255.0;
                codec::save_image(&gradient(5 + i, 4, tint), images.join(format!("g{i}.png")), ImageBitDepth::Eight).unwrap();
            }
            for i in 0..bad {
                std::fs::write(images.join(format!("b{i}.jpg")), seed.to_le_bytes()).unwrap();
            }
            let (est, cap) = (MockDepthEstimator::default(), MockCaptioner::default());
            let (a, b) = (dir.path().join("a/m.jsonl"), dir.path().join("b/m.jsonl"));
            let r = build_triplets(&images, &est, &cap, &a, &ctx()).unwrap();
            prop_assert_eq!(r.success + r.failed, r.inputs);
            prop_assert_eq!(r.inputs, good + bad);
            build_triplets(&images, &est, &cap, &b, &ctx()).unwrap();
            let ids = |m: &Path| read_manifest(m).unwrap().into_iter().map(|r| (r.id, r.sha256)).collect::<Vec<_>>();
            prop_assert_eq!(ids(&a), ids(&b));
            for rec in read_manifest(&a).unwrap().iter().filter(|r| r.kind == RecordKind::Triplet) {
                let dir_a = a.parent().unwrap();
                let img = codec::load_image(rec.resolve("image", dir_a).unwrap()).unwrap();
                let depth = codec::decode_inverse(rec.resolve("depth", dir_a).unwrap()).unwrap();
                prop_assert_eq!(img.dims(), (depth.width(), depth.height()));
            }
        }

        #[test]
        fn generated_count_is_the_product(n in 1usize..4, p in 1usize..4, s in 1u32..4, jobs in 1usize..4) {
            let dir = tempfile::tempdir().unwrap();
            let cond = conditioning(dir.path(), n);
            let cfg = GenerationConfig {
                samples_per_condition: s,
                prompts: (0..p).map(|k| format!("prompt {k}")).collect(),
                ..GenerationConfig::default()
            };
            let out = dir.path().join("gen/m.jsonl");
            let c = StageContext::new(Clock::Fixed(0), jobs);
            let r = genpipe::generate_dataset_samples(&cond, &cfg, &MockGenerator::default(), &ckpt(), &out, Default::default(), &c).unwrap();
            prop_assert_eq!(r.expected, n * p * s as usize);
            prop_assert_eq!(read_manifest(&out).unwrap().len(), n * p * s as usize);
        }
    }
}
