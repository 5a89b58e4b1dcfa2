//! Metric depth conversion and training-set assembly.
//!
//! Conditioning depth is normalized inverse relative depth `n` in [0, 1]
//! (1 = nearest). The default `inverse_linear` mapping interpolates linearly in
//! inverse-depth space between `1/d_max` and `1/d_min` and takes the reciprocal;
//! `linear` interpolates depth directly.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::DepthEstimator;
use crate::codec::{self, decode_inverse, decode_metric, encode_metric};
use crate::depth::{min_max, DepthRaster, InverseRelativeDepthMap, MetricDepthMap};
use crate::error::{Error, Result};
use crate::manifest::{require_valid, sha256_bytes, ContentId, Manifest, ManifestRecord, RecordKind};
use crate::stage::{map_items, ItemFailure, StageContext};
use crate::uncertainty::{depth_uncertainty_with, load_mask, save_mask, validity_mask, DuOptions, ValidityMask};

const OP_VERSION: u32 = 1;
const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mapping {
    #[default]
    InverseLinear,
    Linear,
}

impl std::str::FromStr for Mapping {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse_linear" => Ok(Mapping::InverseLinear),
            "linear" => Ok(Mapping::Linear),
            other => Err(Error::InvalidConfig(format!("unknown mapping '{other}'"))),
        }
    }
}

impl Mapping {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mapping::InverseLinear => "inverse_linear",
            Mapping::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConversionConfig {
    pub d_min_m: f64,
    pub d_max_m: f64,
    pub mapping: Mapping,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self { d_min_m: 0.3, d_max_m: 20.0, mapping: Mapping::InverseLinear }
    }
}

impl ConversionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.d_min_m.is_finite() && self.d_max_m.is_finite();
        if !(ok && 0.0 < self.d_min_m && self.d_min_m < self.d_max_m) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < d_min_m < d_max_m, got d_min_m={} d_max_m={}",
                self.d_min_m, self.d_max_m
            )));
        }
        if self.d_max_m > codec::MAX_METRIC_M {
            return Err(Error::InvalidConfig(format!(
                "d_max_m={} exceeds the storable range of {} m",
                self.d_max_m,
                codec::MAX_METRIC_M
            )));
        }
        Ok(())
    }

    /// Metric depth for one normalized inverse value. Endpoints are exact.
    pub fn depth_at(&self, n: f64) -> f64 {
        let (lo, hi) = (self.d_min_m, self.d_max_m);
        if n <= 0.0 {
            return hi;
        }
        if n >= 1.0 {
            return lo;
        }
        let d = match self.mapping {
            Mapping::InverseLinear => 1.0 / (n * (1.0 / lo - 1.0 / hi) + 1.0 / hi),
            Mapping::Linear => hi - n * (hi - lo),
        };
        d.clamp(lo, hi)
    }
}

pub fn inverse_to_metric(norm_inv: &InverseRelativeDepthMap, cfg: &ConversionConfig) -> Result<MetricDepthMap> {
    cfg.validate()?;
    if let Some(v) = norm_inv.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidValue(format!("normalized inverse depth {v} outside [0, 1]")));
    }
    let data = norm_inv.values().iter().map(|n| cfg.depth_at(*n)).collect();
    MetricDepthMap::new(norm_inv.width(), norm_inv.height(), data, cfg.d_max_m)
}

/// `1/d`, then min-max normalized. Used to ingest metric depth as
/// conditioning and as the inverse of [`inverse_to_metric`].
pub fn metric_to_normalized_inverse(metric: &MetricDepthMap) -> InverseRelativeDepthMap {
    let inv: Vec<f64> = metric.values().iter().map(|d| 1.0 / d).collect();
    InverseRelativeDepthMap::new(metric.width(), metric.height(), inv)
        .expect("reciprocal of positive depth")
        .normalized()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Orders ids by the digest of the id and assigns the first
/// `round(ratio * n)` to train.
pub fn assign_splits(ids: &[String], ratio: f64) -> Result<HashMap<String, Split>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidConfig(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut keyed: Vec<(String, &String)> = ids.iter().map(|id| (sha256_bytes(id.as_bytes()), id)).collect();
    keyed.sort();
    let n_train = (ratio * ids.len() as f64).round() as usize;
    Ok(keyed
        .into_iter()
        .enumerate()
        .map(|(i, (_, id))| (id.clone(), if i < n_train { Split::Train } else { Split::Val }))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssembleOptions {
    pub conversion: ConversionConfig,
    pub threshold: f64,
    pub split_ratio: f64,
    pub du: DuOptions,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        Self {
            conversion: ConversionConfig::default(),
            threshold: crate::uncertainty::DEFAULT_THRESHOLD,
            split_ratio: 0.9,
            du: DuOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self { lo, hi, counts: vec![0; bins] }
    }

    fn add(&mut self, v: f64) {
        let bins = self.counts.len();
        let t = ((v - self.lo) / (self.hi - self.lo) * bins as f64).floor();
        let i = if t.is_nan() { 0 } else { (t.max(0.0) as usize).min(bins - 1) };
        self.counts[i] += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetReport {
    /// Pairs in the output manifest after this run.
    pub pairs: usize,
    pub written: usize,
    pub skipped: usize,
    pub splits: BTreeMap<String, usize>,
    pub mean_valid_fraction: f64,
    pub depth_histogram: Histogram,
    pub failures: Vec<ItemFailure>,
}

struct PairJob {
    pair_id: String,
    gen_id: String,
    image_path: PathBuf,
    depth_path: PathBuf,
    downscale: usize,
    prompt: String,
    seed: Option<u64>,
    mask_path: Option<PathBuf>,
}

/// Builds one dataset pair per generated image in `gen_manifest`.
///
/// Masks are taken from `uncertainty_manifest` when it holds one for the image
/// at the same threshold and estimator, and computed otherwise.
pub fn assemble_dataset(
    gen_manifest: &Path,
    uncertainty_manifest: Option<&Path>,
    estimator: &dyn DepthEstimator,
    opts: &AssembleOptions,
    out_manifest: &Path,
    ctx: &StageContext,
) -> Result<DatasetReport> {
    opts.conversion.validate()?;
    if !(opts.threshold > 0.0) {
        return Err(Error::NonPositiveThreshold(opts.threshold));
    }
    require_valid(gen_manifest)?;
    let generated = Manifest::open_existing(gen_manifest)?;
    let gen_dir = generated.dir();

    let mut masks: HashMap<String, PathBuf> = HashMap::new();
    if let Some(um) = uncertainty_manifest {
        require_valid(um)?;
        let m = Manifest::open_existing(um)?;
        let dir = m.dir();
        for r in m.of_kind(RecordKind::Mask) {
            let same_threshold = r.param_f64("threshold").is_some_and(|t| t == opts.threshold);
            let same_estimator = r.param_str("estimator_id") == Some(estimator.id());
            if let (true, true, Some(src), Some(p)) =
                (same_threshold, same_estimator, r.param_str("source_id"), r.resolve("mask", &dir))
            {
                masks.insert(src.to_string(), p);
            }
        }
    }

    let conv = opts.conversion;
    let mut jobs = Vec::new();
    for r in generated.of_kind(RecordKind::GeneratedImage) {
        let depth_path = r
            .resolve("conditioning_depth", &gen_dir)
            .filter(|p| p.is_file())
            .ok_or_else(|| Error::MissingConditioningDepth(r.id.clone()))?;
        let image_path = r
            .resolve("image", &gen_dir)
            .ok_or_else(|| Error::ManifestInvalid { path: gen_manifest.to_path_buf(), reason: format!("{} has no image", r.id) })?;
        let pair_id = ContentId::new("pair", OP_VERSION)
            .field("generated", &r.id)
            .field("image", r.sha256.get("image").map(String::as_str).unwrap_or(""))
            .field("d_min_m", &conv.d_min_m.to_string())
            .field("d_max_m", &conv.d_max_m.to_string())
            .field("mapping", conv.mapping.as_str())
            .field("threshold", &opts.threshold.to_string())
            .field("estimator", estimator.id())
            .field("du", &serde_json::to_string(&opts.du).expect("plain struct"))
            .finish();
        jobs.push(PairJob {
            pair_id,
            gen_id: r.id.clone(),
            image_path,
            depth_path,
            downscale: r.param_u64("downscale").unwrap_or(1).max(1) as usize,
            prompt: r.param_str("prompt").unwrap_or_default().to_string(),
            seed: r.param_u64("seed"),
            mask_path: masks.get(&r.id).cloned(),
        });
    }

    let ids: Vec<String> = jobs.iter().map(|j| j.pair_id.clone()).collect();
    let splits = assign_splits(&ids, opts.split_ratio)?;

    let mut out = Manifest::create(out_manifest)?;
    let out_dir = out.dir();
    let depth_dir = out_dir.join("depth");
    let mask_dir = out_dir.join("masks");
    for d in [&depth_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let pending: Vec<&PairJob> = jobs.iter().filter(|j| !out.contains(&j.pair_id)).collect();
    let skipped = jobs.len() - pending.len();

    let built = map_items(&pending, ctx.jobs, estimator.reentrant(), |job| {
        build_pair(job, estimator, opts, &depth_dir, &mask_dir)
    });

    let mut failures = Vec::new();
    let mut written = 0;
    for (job, result) in pending.iter().zip(built) {
        let (depth_path, mask_path, valid_fraction) = match result {
            Ok(v) => v,
            Err(e) => {
                failures.push(ItemFailure::new(&job.gen_id, e));
                continue;
            }
        };
        let mut rec = ManifestRecord::new(&job.pair_id, RecordKind::DatasetPair, ctx.clock)
            .with_artifact("image", &job.image_path, &out_dir)?
            .with_artifact("depth", &depth_path, &out_dir)?
            .with_artifact("mask", &mask_path, &out_dir)?
            .with_artifact("source_depth", &job.depth_path, &out_dir)?
            .with_param("generated_id", job.gen_id.as_str())
            .with_param("prompt", job.prompt.as_str())
            .with_param("split", splits[&job.pair_id].as_str())
            .with_param("threshold", opts.threshold)
            .with_param("valid_fraction", valid_fraction)
            .with_param("d_min_m", conv.d_min_m)
            .with_param("d_max_m", conv.d_max_m)
            .with_param("mapping", conv.mapping.as_str())
            .with_param("estimator_id", estimator.id());
        if let Some(seed) = job.seed {
            rec = rec.with_param("seed", seed);
        }
        out.append(rec)?;
        written += 1;
    }

    let mut report = DatasetReport {
        pairs: 0,
        written,
        skipped,
        splits: BTreeMap::new(),
        mean_valid_fraction: 0.0,
        depth_histogram: Histogram::new(0.0, conv.d_max_m, HISTOGRAM_BINS),
        failures,
    };
    let mut fractions = Vec::new();
    for r in out.of_kind(RecordKind::DatasetPair) {
        report.pairs += 1;
        if let Some(s) = r.param_str("split") {
            *report.splits.entry(s.to_string()).or_default() += 1;
        }
        fractions.extend(r.param_f64("valid_fraction"));
        if let Some(p) = r.resolve("depth", &out_dir) {
            for v in decode_metric(&p)?.values() {
                report.depth_histogram.add(*v);
            }
        }
    }
    if !fractions.is_empty() {
        report.mean_valid_fraction = fractions.iter().sum::<f64>() / fractions.len() as f64;
    }
    Ok(report)
}

fn build_pair(
    job: &PairJob,
    estimator: &dyn DepthEstimator,
    opts: &AssembleOptions,
    depth_dir: &Path,
    mask_dir: &Path,
) -> Result<(PathBuf, PathBuf, f64)> {
    let image = codec::load_image(&job.image_path)?;
    let mut cond = decode_inverse(&job.depth_path)?.to_unit_scale();
    if cond.dims() != image.dims() {
        if job.downscale > 1 {
            cond = cond.downsample(job.downscale)?.to_unit_scale();
        }
        if cond.dims() != image.dims() {
            return Err(Error::ShapeMismatch(format!(
                "{}: image {:?} vs conditioning depth {:?}",
                job.gen_id,
                image.dims(),
                cond.dims()
            )));
        }
    }
    // block means of unit-scale values stay in [0, 1] but lose the flag
    let cond = InverseRelativeDepthMap::new_normalized(cond.width(), cond.height(), cond.into_values())?;
    let metric = inverse_to_metric(&cond, &opts.conversion)?;

    let mask: ValidityMask = match &job.mask_path {
        Some(p) => load_mask(p)?,
        None => {
            let du = depth_uncertainty_with(&image, estimator, opts.du).map_err(|e| match e {
                Error::BackendFailure { backend_id, reason, .. } => {
                    Error::BackendFailure { backend_id, item: Some(job.gen_id.clone()), reason }
                }
                other => other,
            })?;
            validity_mask(&du, opts.threshold)?
        }
    };
    if mask.dims() != image.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{}: mask {:?} vs image {:?}",
            job.gen_id,
            mask.dims(),
            image.dims()
        )));
    }

    let depth_path = depth_dir.join(format!("{}.png", job.pair_id));
    let mask_path = mask_dir.join(format!("{}.png", job.pair_id));
    encode_metric(&metric, &depth_path)?;
    save_mask(&mask, &mask_path)?;
    Ok((depth_path, mask_path, mask.valid_fraction()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageDepthStats {
    pub id: String,
    pub min_m: f64,
    pub max_m: f64,
    pub mean_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub pairs: usize,
    pub splits: BTreeMap<String, usize>,
    pub valid_fraction_min: f64,
    pub valid_fraction_mean: f64,
    pub valid_fraction_max: f64,
    /// Ten equal bins over [0, 1].
    pub valid_fraction_histogram: Vec<u64>,
    pub prompt_frequency: BTreeMap<String, usize>,
    pub per_image: Vec<ImageDepthStats>,
}

pub fn dataset_stats(dataset_manifest: &Path) -> Result<StatsReport> {
    require_valid(dataset_manifest)?;
    let m = Manifest::open_existing(dataset_manifest)?;
    let dir = m.dir();
    let mut splits = BTreeMap::new();
    let mut prompts = BTreeMap::new();
    let mut fractions = Vec::new();
    let mut per_image = Vec::new();
    let mut fraction_hist = Histogram::new(0.0, 1.0, 10);
    for r in m.of_kind(RecordKind::DatasetPair) {
        if let Some(s) = r.param_str("split") {
            *splits.entry(s.to_string()).or_insert(0) += 1;
        }
        if let Some(p) = r.param_str("prompt") {
            *prompts.entry(p.to_string()).or_insert(0) += 1;
        }
        if let Some(f) = r.param_f64("valid_fraction") {
            fractions.push(f);
            fraction_hist.add(f);
        }
        if let Some(path) = r.resolve("depth", &dir) {
            let depth: MetricDepthMap = decode_metric(&path)?;
            let (lo, hi) = min_max(depth.values());
            let mean = depth.values().iter().sum::<f64>() / depth.values().len() as f64;
            per_image.push(ImageDepthStats { id: r.id.clone(), min_m: lo, max_m: hi, mean_m: mean });
        }
    }
    let (fmin, fmax) = if fractions.is_empty() { (0.0, 0.0) } else { min_max(&fractions) };
    let fmean = if fractions.is_empty() { 0.0 } else { fractions.iter().sum::<f64>() / fractions.len() as f64 };
    Ok(StatsReport {
        pairs: per_image.len().max(fractions.len()),
        splits,
        valid_fraction_min: fmin,
        valid_fraction_mean: fmean,
        valid_fraction_max: fmax,
        valid_fraction_histogram: fraction_hist.counts,
        prompt_frequency: prompts,
        per_image,
    })
}

impl StatsReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pairs: {}", self.pairs);
        for (k, v) in &self.splits {
            let _ = writeln!(s, "  {k}: {v}");
        }
        let _ = writeln!(
            s,
            "valid fraction: min {:.3}  mean {:.3}  max {:.3}",
            self.valid_fraction_min, self.valid_fraction_mean, self.valid_fraction_max
        );
        let _ = writeln!(s, "prompts:");
        let total: usize = self.prompt_frequency.values().sum();
        for (p, n) in &self.prompt_frequency {
            let share = if total == 0 { 0.0 } else { 100.0 * *n as f64 / total as f64 };
            let _ = writeln!(s, "  {n:>6}  {share:5.1}%  {p}");
        }
        let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>8}", "id", "min_m", "max_m", "mean_m");
        for r in &self.per_image {
            let _ = writeln!(s, "{:<24} {:>8.3} {:>8.3} {:>8.3}", r.id, r.min_m, r.max_m, r.mean_m);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(values: &[f64]) -> InverseRelativeDepthMap {
        InverseRelativeDepthMap::new_normalized(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn endpoints_and_midpoint() {
        let cfg = ConversionConfig::default();
        let m = inverse_to_metric(&norm(&[1.0, 0.0, 0.5]), &cfg).unwrap();
        assert_eq!(m.values()[0], 0.3);
        assert_eq!(m.values()[1], 20.0);
        // q = 0.5 * (1/0.3 - 1/20) + 1/20
        let q = 0.5 * (10.0 / 3.0 - 0.05) + 0.05;
        assert!((m.values()[2] - 1.0 / q).abs() < 1e-12);
        assert!((m.values()[2] - 0.5911).abs() < 1e-3);
    }

    #[test]
    fn linear_mapping() {
        let cfg = ConversionConfig { mapping: Mapping::Linear, ..Default::default() };
        let m = inverse_to_metric(&norm(&[0.5]), &cfg).unwrap();
        assert!((m.values()[0] - (20.0 - 0.5 * 19.7)).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs() {
        for (lo, hi) in [(0.0, 20.0), (5.0, 5.0), (10.0, 1.0), (-1.0, 2.0), (0.3, 100.0)] {
            let cfg = ConversionConfig { d_min_m: lo, d_max_m: hi, ..Default::default() };
            assert!(matches!(inverse_to_metric(&norm(&[0.5]), &cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn split_counts_are_exact() {
        let ids: Vec<String> = (0..8).map(|i| format!("id-{i}")).collect();
        let s = assign_splits(&ids, 0.75).unwrap();
        assert_eq!(s.values().filter(|v| **v == Split::Train).count(), 6);
        assert_eq!(assign_splits(&ids, 0.75).unwrap(), s);
        assert!(assign_splits(&ids, 1.0).unwrap().values().all(|v| *v == Split::Train));
        assert!(assign_splits(&ids, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn strictly_decreasing(a in 0.0f64..=1.0, b in 0.0f64..=1.0, linear in any::<bool>()) {
            prop_assume!((a - b).abs() > 1e-9);
            let cfg = ConversionConfig {
                mapping: if linear { Mapping::Linear } else { Mapping::InverseLinear },
                ..Default::default()
            };
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(cfg.depth_at(lo) > cfg.depth_at(hi));
            prop_assert!((0.3..=20.0).contains(&cfg.depth_at(a)));
        }

        #[test]
        fn roundtrip_recovers_normalized_inverse(
            mut values in proptest::collection::vec(0.0f64..=1.0, 2..40),
            d_min in 0.05f64..2.0,
            span in 0.5f64..60.0,
        ) {
            // force a non-constant map spanning [0, 1]
            values[0] = 0.0;
            values[1] = 1.0;
            let cfg = ConversionConfig { d_min_m: d_min, d_max_m: d_min + span, mapping: Mapping::InverseLinear };
            let metric = inverse_to_metric(&norm(&values), &cfg).unwrap();
            let back = metric_to_normalized_inverse(&metric);
            for (n, r) in values.iter().zip(back.values()) {
                prop_assert!((n - r).abs() < 1e-9, "{} vs {}", n, r);
            }
        }
    }
}
