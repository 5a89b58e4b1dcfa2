//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line even when everything passes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use atlantis_core::backends::{
    BackendRegistry, BiasedDepthEstimator, CheckpointRef, MockDepthEstimator, MockGenerator,
};
use atlantis_core::codec;
use atlantis_core::datasetbuild::{inverse_to_metric, metric_to_normalized_inverse, ConversionConfig};
use atlantis_core::evaluate::{compute_metrics, load_result_rows, render_report, EvalConfig, MetricsReport};
use atlantis_core::genpipe::{self, DepthSource, GenerateOptions, GenerationConfig};
use atlantis_core::manifest::{read_manifest, sha256_file, Clock};
use atlantis_core::physics::{
    estimate_backscatter, recover_at, synthesize_at, Attenuation, BackscatterFit, RecoverOptions, WaterProperties,
};
use atlantis_core::stage::StageContext;
use atlantis_core::uncertainty::{depth_uncertainty, validity_mask};
use atlantis_core::{DepthRaster, InverseRelativeDepthMap, MetricDepthMap, RgbImage};

type Outcome = Result<String, String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/published")
}

fn ctx() -> StageContext {
    StageContext::new(Clock::Fixed(1_700_000_000), 1)
}

macro_rules! require {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// Brute-force metric definitions, written independently of the library.
fn oracle(p: &[f64], g: &[f64]) -> [f64; 9] {
    let n = p.len() as f64;
    let mut sq = 0.0;
    let mut sq_log = 0.0;
    let mut abs_rel = 0.0;
    let mut sq_rel = 0.0;
    let mut l10 = 0.0;
    let mut d = [0.0; 3];
    let mut errs = Vec::new();
    for i in 0..p.len() {
        let (pi, gi) = (p[i], g[i]);
        sq += (pi - gi) * (pi - gi);
        let el = pi.ln() - gi.ln();
        sq_log += el * el;
        errs.push(el);
        abs_rel += (pi - gi).abs() / gi;
        sq_rel += (pi - gi) * (pi - gi) / gi;
        l10 += (pi.log10() - gi.log10()).abs();
        let ratio = if pi / gi > gi / pi { pi / gi } else { gi / pi };
        for k in 0..3 {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                d[k] += 1.0;
            }
        }
    }
    let mean_e = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|x| (x - mean_e) * (x - mean_e)).sum::<f64>() / n;
    [
        (sq / n).sqrt(),
        (sq_log / n).sqrt(),
        abs_rel / n,
        sq_rel / n,
        l10 / n,
        100.0 * var.sqrt(),
        d[0] / n,
        d[1] / n,
        d[2] / n,
    ]
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = EvalConfig::default();
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let (w, h) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let p: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.1..=20.0)).collect();
        let g: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.1..=20.0)).collect();
        let pm = MetricDepthMap::new(w, h, p.clone(), 20.0).map_err(e)?;
        let gm = MetricDepthMap::new(w, h, g.clone(), 20.0).map_err(e)?;
        let got = compute_metrics(&pm, &gm, None, &cfg).map_err(e)?.values();
        for (k, (a, b)) in got.iter().zip(oracle(&p, &g)).enumerate() {
            let rel = (a - b).abs() / b.abs().max(1e-12);
            let rel = if b == 0.0 && *a == 0.0 { 0.0 } else { rel };
            worst = worst.max(rel);
            require!(rel <= 1e-9, "case {case} metric {k}: {a} vs oracle {b}");
        }
    }
    Ok(format!("1000 random pairs, worst relative error {worst:.1e}"))
}

fn metrics_hand_cases() -> Outcome {
    let cfg = EvalConfig::default();
    let run = |p: Vec<f64>, g: Vec<f64>| -> Result<MetricsReport, String> {
        let n = p.len();
        let pm = MetricDepthMap::with_default_cap(n, 1, p).map_err(e)?;
        let gm = MetricDepthMap::with_default_cap(n, 1, g).map_err(e)?;
        compute_metrics(&pm, &gm, None, &cfg).map_err(e)
    };
    let ln2 = 2f64.ln();
    let one = run(vec![2.0], vec![1.0])?;
    let two = run(vec![2.0, 2.0], vec![1.0, 4.0])?;
    let expect = [
        (one.values(), [1.0, ln2, 1.0, 1.0, 2f64.log10(), 0.0, 0.0, 0.0, 0.0]),
        (two.values(), [2.5f64.sqrt(), ln2, 0.75, 1.0, 2f64.log10(), 100.0 * ln2, 0.0, 0.0, 0.0]),
    ];
    for (case, (got, want)) in expect.iter().enumerate() {
        for (k, (a, b)) in got.iter().zip(want).enumerate() {
            require!((a - b).abs() <= 1e-4, "case {case} metric {k}: {a} vs {b}");
        }
    }
    require!((two.si_log - 69.31).abs() < 5e-3 && (two.rmse - 1.5811).abs() < 1e-4, "two-pixel anchors: {two:?}");
    Ok(format!("single pixel and [2,2] vs [1,4]: SI_log {:.2}, RMSE {:.4}", two.si_log, two.rmse))
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
    let data = (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    RgbImage::new(w, h, data).expect("valid random image")
}

fn du_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let flip_safe = MockDepthEstimator::default();
    let biased = BiasedDepthEstimator::new("biased", 0.8).map_err(e)?;
    for i in 0..100 {
        let (w, h) = (rng.gen_range(2..24), rng.gen_range(1..24));
        let img = random_image(&mut rng, w, h);
        let du = depth_uncertainty(&img, &flip_safe).map_err(e)?;
        require!(du.values().iter().all(|v| *v == 0.0), "image {i}: flip-invariant estimator gave nonzero DU");
        let mask = validity_mask(&du, 0.15).map_err(e)?;
        require!(mask.valid_fraction() == 1.0, "image {i}: valid fraction {}", mask.valid_fraction());

        let du_b = depth_uncertainty(&img, &biased).map_err(e)?;
        require!(du_b.values().iter().all(|v| *v <= 0.25), "image {i}: biased DU above 0.25");

        let mut fractions: Vec<(f64, f64)> = (0..50)
            .map(|_| {
                let t = rng.gen_range(1e-4..0.3);
                (t, validity_mask(&du_b, t).expect("positive threshold").valid_fraction())
            })
            .collect();
        fractions.sort_by(|a, b| a.0.total_cmp(&b.0));
        require!(fractions.windows(2).all(|w| w[0].1 <= w[1].1), "image {i}: valid fraction not monotone");
    }
    // Uniform images keep the ramp unclamped, so the edge columns see the full 0.8 swing.
    for _ in 0..10 {
        let (w, h) = (rng.gen_range(3..20), rng.gen_range(1..10));
        let c = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let img = RgbImage::filled(w, h, c).map_err(e)?;
        let du = depth_uncertainty(&img, &biased).map_err(e)?;
        let mask = validity_mask(&du, 0.15).map_err(e)?;
        for y in 0..h {
            for x in [0, w - 1] {
                let v = du.values()[y * w + x];
                require!((v - 0.16).abs() < 1e-12, "edge DU {v} at ({x},{y}), expected 0.16");
                require!(!mask.bits()[y * w + x], "edge pixel ({x},{y}) should be invalid");
            }
        }
    }
    Ok("100 random images DU = 0, valid 1.0; biased edge DU 0.16 rejected; DU <= 0.25; monotone".into())
}

/// Writes `n` 1x1 metric depth files and ingests them as conditioning depth.
fn conditioning(dir: &Path, n: usize) -> Result<PathBuf, String> {
    let input = dir.join("terrestrial");
    std::fs::create_dir_all(&input).map_err(e)?;
    for i in 0..n {
        let d = MetricDepthMap::with_default_cap(1, 1, vec![1.0 + i as f64 * 0.01]).map_err(e)?;
        codec::encode_metric(&d, input.join(format!("d{i:04}.png"))).map_err(e)?;
    }
    let m = dir.join("conditioning/manifest.jsonl");
    genpipe::ingest_depths(&input, DepthSource::Precomputed, &m, &ctx()).map_err(e)?;
    Ok(m)
}

fn mock_ckpt() -> CheckpointRef {
    CheckpointRef { backend_id: "mock-generator".into(), uri: "mock://mock-generator/acceptance".into(), config_hash: "".into() }
}

fn generate(dir: &Path, n: usize, p: usize, s: u32, limit: Option<usize>) -> Result<(PathBuf, usize), String> {
    let cond = if dir.join("conditioning/manifest.jsonl").exists() {
        dir.join("conditioning/manifest.jsonl")
    } else {
        conditioning(dir, n)?
    };
    let cfg = GenerationConfig {
        samples_per_condition: s,
        prompts: (0..p).map(|k| format!("an underwater scene, variant {k}")).collect(),
        ..GenerationConfig::default()
    };
    let out = dir.join("generated/manifest.jsonl");
    let report = genpipe::generate_dataset_samples(
        &cond,
        &cfg,
        &MockGenerator::default(),
        &mock_ckpt(),
        &out,
        GenerateOptions { limit },
        &ctx(),
    )
    .map_err(e)?;
    require!(report.failures.is_empty(), "generation failures: {:?}", report.failures);
    Ok((out.clone(), read_manifest(&out).map_err(e)?.len()))
}

fn generation_cardinality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let (n, p, s) = (rng.gen_range(1..=6), rng.gen_range(1..=3), rng.gen_range(1..=4u32));
        let tmp = tempfile::tempdir().map_err(e)?;
        let (_, count) = generate(tmp.path(), n, p, s, None)?;
        require!(count == n * p * s as usize, "({n},{p},{s}) produced {count} records");
    }
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(e)?;
    let (_, count) = generate(tmp.path(), 400, 2, 4, None)?;
    let big = start.elapsed();
    require!(count == 3200, "(400, 2, 4) produced {count} records");
    require!(big < Duration::from_secs(30), "(400, 2, 4) took {big:?}");

    let (a, b) = (tempfile::tempdir().map_err(e)?, tempfile::tempdir().map_err(e)?);
    let (full, _) = generate(a.path(), 12, 2, 3, None)?;
    let stop = rng.gen_range(1..72);
    generate(b.path(), 12, 2, 3, Some(stop))?;
    let (resumed, count) = generate(b.path(), 12, 2, 3, None)?;
    require!(count == 72, "resumed run has {count} records");
    let (da, db) = (sha256_file(&full).map_err(e)?, sha256_file(&resumed).map_err(e)?);
    require!(da == db, "resumed digest {db} differs from uninterrupted {da}");
    Ok(format!("20 random triples exact; 3200 records in {:.1}s; resume after {stop} identical", big.as_secs_f64()))
}

fn depth_conversion() -> Outcome {
    let cfg = ConversionConfig::default();
    require!(cfg.d_max_m == 20.0, "default cap is {}", cfg.d_max_m);
    let ends = InverseRelativeDepthMap::new_normalized(2, 1, vec![0.0, 1.0]).map_err(e)?;
    let m = inverse_to_metric(&ends, &cfg).map_err(e)?;
    require!(m.values() == [cfg.d_max_m, cfg.d_min_m], "endpoints map to {:?}", m.values());

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut grid: Vec<f64> = (0..2000).map(|_| rng.gen_range(0.0..1.0)).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let depths: Vec<f64> = grid.iter().map(|n| cfg.depth_at(*n)).collect();
    require!(depths.windows(2).all(|w| w[1] < w[0]), "conversion not strictly decreasing in inverse depth");

    let mut worst = 0.0f64;
    for _ in 0..500 {
        let (w, h) = (rng.gen_range(2..=16), rng.gen_range(1..=16));
        let mut data: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..=1.0)).collect();
        // pin the extremes so re-normalization is the identity
        data[0] = 0.0;
        data[1] = 1.0;
        let n = InverseRelativeDepthMap::new_normalized(w, h, data.clone()).map_err(e)?;
        let metric = inverse_to_metric(&n, &cfg).map_err(e)?;
        require!(metric.cap_m() == 20.0, "cap {}", metric.cap_m());
        require!(metric.values().iter().all(|d| *d <= 20.0 && *d >= cfg.d_min_m), "depth outside range");
        let back = metric_to_normalized_inverse(&metric);
        for (a, b) in back.values().iter().zip(&data) {
            worst = worst.max((a - b).abs());
        }
    }
    require!(worst <= 1e-9, "round-trip error {worst:e}");
    Ok(format!("endpoints exact, monotone, capped at 20 m, round trip {worst:.1e}"))
}

fn smooth_scene(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
    let mut terms = Vec::new();
    for _ in 0..3 {
        terms.push((
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.5..3.0),
            rng.gen_range(0.0..std::f64::consts::TAU),
            [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)],
        ));
    }
    let base = [rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65)];
    RgbImage::from_fn(w, h, |x, y| {
        let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
        let mut px = base;
        for (fx, fy, ph, amp) in &terms {
            let s = (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin();
            for c in 0..3 {
                px[c] += amp[c] * s;
            }
        }
        px
    })
    .expect("smooth scene in range")
}

fn random_water(rng: &mut ChaCha8Rng) -> WaterProperties {
    let mut r = |lo: f64, hi: f64| [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
    WaterProperties { beta_d: r(0.05, 0.6), beta_b: r(0.2, 1.5), b_inf: r(0.1, 0.5) }
}

fn physics_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (w, h) = (64, 64);
    let mut worst_mae = 0.0f64;
    for scene in 0..20 {
        let j = smooth_scene(&mut rng, w, h);
        let z: Vec<f64> = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64 / w as f64, (i / w) as f64 / h as f64);
                1.0 + 6.0 * y + 1.5 * (3.0 * x).sin().abs()
            })
            .collect();
        let water = random_water(&mut rng);
        let img = synthesize_at(&j, &z, w, h, &water).map_err(e)?;
        let opts = RecoverOptions { attenuation: Attenuation::Known { beta_d: water.beta_d }, white_balance: false };
        let rec = recover_at(&img, &z, &BackscatterFit::from_water(&water), &opts).map_err(e)?;
        let (lo, hi) = j.data().iter().fold((f64::MAX, f64::MIN), |(l, u), v| (l.min(*v), u.max(*v)));
        let mae = rec.data().iter().zip(j.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / j.data().len() as f64;
        worst_mae = worst_mae.max(mae / (hi - lo));
        require!(mae <= 0.02 * (hi - lo), "scene {scene}: MAE {mae} over range {}", hi - lo);
    }

    // Model-family data: a black pixel in every 7 shows pure backscatter.
    let mut worst = (0.0f64, 0.0f64);
    for case in 0..5 {
        let water = random_water(&mut rng);
        let data: Vec<f64> = (0..w * h)
            .map(|i| if i % 7 == 0 { 0.0 } else { rng.gen_range(0.2..0.9) })
            .flat_map(|v| [v; 3])
            .collect();
        let j = RgbImage::new(w, h, data).map_err(e)?;
        let zs: Vec<f64> = (0..w * h).map(|i| 0.5 + 14.5 * i as f64 / (w * h - 1) as f64).collect();
        let img = synthesize_at(&j, &zs, w, h, &water).map_err(e)?;
        let depth = MetricDepthMap::with_default_cap(w, h, zs).map_err(e)?;
        let fit = estimate_backscatter(&img, &depth, 10, 0.01).map_err(e)?;
        for c in 0..3 {
            let (db, dbeta) =
                ((fit.channels[c].b_inf - water.b_inf[c]).abs(), (fit.channels[c].beta_b - water.beta_b[c]).abs());
            worst = (worst.0.max(db), worst.1.max(dbeta));
            require!(db <= 1e-4 && dbeta <= 1e-3, "case {case} channel {c}: fit {:?} vs {water:?}", fit.channels[c]);
        }
    }
    Ok(format!(
        "20 scenes, worst MAE {:.2e} of range; backscatter errors B_inf {:.1e}, beta_B {:.1e}",
        worst_mae, worst.0, worst.1
    ))
}

fn tree_digest(root: &Path) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(e)? {
            let p = entry.map_err(e)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).map_err(e)?.to_string_lossy().into_owned();
                out.insert(rel, sha256_file(&p).map_err(e)?);
            }
        }
    }
    Ok(out)
}

fn end_to_end() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(e)?, tempfile::tempdir().map_err(e)?);
    let code = atlantis_cli::run_demo_pipeline(a.path(), 7);
    require!(code == 0, "demo exited {code}");
    let summary = atlantis_cli::demo_pipeline(b.path(), 7).map_err(|err| format!("{err:#}"))?;
    let m = &summary.metrics;
    require!(m.delta1 == 1.0, "delta1 {}", m.delta1);
    let errors = [m.rmse, m.rmse_log, m.a_rel, m.s_rel, m.log10, m.si_log];
    require!(errors.iter().all(|v| v.abs() < 1e-6), "errors {errors:?}");
    let (da, db) = (tree_digest(a.path())?, tree_digest(b.path())?);
    require!(da == db, "demo outputs differ between runs");
    Ok(format!("exit 0, delta1 = 1, max error {:.1e}, {} files identical", errors.iter().fold(0.0f64, |x, y| x.max(y.abs())), da.len()))
}

fn report_fidelity() -> Outcome {
    let mut checked = 0;
    for table in ["seathru", "squid"] {
        let tmp = tempfile::tempdir().map_err(e)?;
        let results = tmp.path().join("results");
        std::fs::create_dir_all(&results).map_err(e)?;
        std::fs::copy(fixtures().join(format!("{table}.json")), results.join("rows.json")).map_err(e)?;
        let rows = load_result_rows(&results).map_err(e)?;
        let rendered = render_report(&rows, &tmp.path().join("report")).map_err(e)?;
        let csv = std::fs::read_to_string(&rendered.csv).map_err(e)?;
        let expected = std::fs::read_to_string(fixtures().join(format!("{table}.expected.csv"))).map_err(e)?;
        let mut lines = csv.lines();
        let header = lines.next().unwrap_or_default();
        require!(
            header == "model,group,RMSE↓,RMSE_log↓,A.Rel↓,S.Rel↓,log10↓,SI_log↓,δ1↑,δ2↑,δ3↑,best",
            "{table}: header {header}"
        );
        let body: Vec<&str> = lines.collect();
        let want: Vec<&str> = expected.lines().collect();
        require!(body == want, "{table}: rendered rows\n{}\nexpected\n{}", body.join("\n"), want.join("\n"));
        for line in body.iter().filter(|l| l.contains("-Atlantis,")) {
            let best = line.rsplit(',').next().unwrap_or_default();
            require!(best.split(';').any(|k| k == "rmse"), "{table}: Atlantis row not best in RMSE: {line}");
        }
        require!(
            body.iter().any(|l| l.starts_with("IDisc-Atlantis,") && l.contains(",1.371,"))
                || body.iter().any(|l| l.starts_with("NewCRFs-Atlantis,") && l.contains(",2.563,")),
            "{table}: anchor values missing"
        );
        checked += body.len();
    }
    Ok(format!("{checked} published rows reproduced with matching best-value flags"))
}

fn main() {
    let registry = BackendRegistry::with_mocks();
    assert!(registry.generator("mock-generator").is_ok());
    let criteria: [(&str, u64, fn() -> Outcome); 8] = [
        ("metrics oracle equivalence", 10, metrics_oracle),
        ("metrics hand cases", 10, metrics_hand_cases),
        ("uncertainty invariants", 10, du_invariants),
        ("generation cardinality and resume", 120, generation_cardinality),
        ("depth conversion", 10, depth_conversion),
        ("physics round trip", 60, physics_round_trip),
        ("end-to-end mock pipeline", 60, end_to_end),
        ("report fidelity", 10, report_fidelity),
    ];
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > Duration::from_secs(limit) => {
                Err(format!("{detail}; took {:.1}s, limit {limit}s", took.as_secs_f64()))
            }
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} ({:.2}s)", took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} ({:.2}s)", took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
