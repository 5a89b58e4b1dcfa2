//! Conditioned-generator training and bulk generation from depth maps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backends::{CheckpointRef, ConditionedGenerator, DepthEstimator};
use crate::codec::{self, decode_depth, decode_inverse, encode_inverse, save_image, ImageBitDepth};
use crate::datasetbuild::metric_to_normalized_inverse;
use crate::depth::{DepthMap, DepthRaster, InverseRelativeDepthMap};
use crate::error::{Error, Result};
use crate::manifest::{
    require_valid, sha256_file, ContentId, Manifest, ManifestRecord, RecordKind,
};
use crate::prep::pseudo_label_depth;
use crate::raster::RgbImage;
use crate::stage::{map_items, ItemFailure, StageContext};

const OP_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub guidance_scale: f64,
    pub num_steps: u32,
    pub samples_per_condition: u32,
    pub base_seed: u64,
    pub prompts: Vec<String>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            guidance_scale: 5.0,
            num_steps: 20,
            samples_per_condition: 4,
            base_seed: 0,
            prompts: vec!["an underwater view of Atlantis".into(), "a corner of lost Atlantis".into()],
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance_scale > 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("guidance_scale must be > 0, got {}", self.guidance_scale)));
        }
        if self.num_steps == 0 {
            return Err(Error::InvalidConfig("num_steps must be >= 1".into()));
        }
        if self.samples_per_condition == 0 {
            return Err(Error::InvalidConfig("samples_per_condition must be >= 1".into()));
        }
        if self.prompts.is_empty() || self.prompts.iter().any(|p| p.trim().is_empty()) {
            return Err(Error::InvalidConfig("prompts must be a nonempty list of nonempty strings".into()));
        }
        Ok(())
    }
}

/// Only the conditioning branch is ever trained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableScope {
    #[default]
    ConditioningBranchOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backend_id: String,
    /// Passed to the backend untouched.
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, Value>,
    #[serde(default)]
    trainable_scope: TrainableScope,
}

impl TrainConfig {
    pub fn new(backend_id: impl Into<String>) -> Self {
        Self { backend_id: backend_id.into(), hyperparameters: BTreeMap::new(), trainable_scope: TrainableScope::default() }
    }

    pub fn with_hyperparameter(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.hyperparameters.insert(key.to_string(), value.into());
        self
    }

    pub fn trainable_scope(&self) -> TrainableScope {
        self.trainable_scope
    }

    /// sha256 of the canonical JSON (keys sorted).
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable");
        crate::manifest::sha256_bytes(&json)
    }
}

/// Stable 64-bit seed for one (depth, prompt, sample) item.
pub fn seed_schedule(base_seed: u64, depth_id: &str, prompt: &str, sample_index: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(b"seed-schedule/1");
    h.update(base_seed.to_le_bytes());
    for field in [depth_id.as_bytes(), prompt.as_bytes()] {
        h.update((field.len() as u64).to_le_bytes());
        h.update(field);
    }
    h.update(sample_index.to_le_bytes());
    let digest = h.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Trains the conditioning branch and appends a `checkpoint` record linking
/// the returned reference to the triplet manifest digest.
pub fn train_generator(
    triplet_manifest: &Path,
    cfg: &TrainConfig,
    backend: &dyn ConditionedGenerator,
    out_manifest: &Path,
    ctx: &StageContext,
) -> Result<CheckpointRef> {
    if cfg.backend_id != backend.id() {
        return Err(Error::InvalidConfig(format!(
            "train config is for backend '{}', got '{}'",
            cfg.backend_id,
            backend.id()
        )));
    }
    require_valid(triplet_manifest)?;
    let triplets = Manifest::open_existing(triplet_manifest)?;
    if triplets.of_kind(RecordKind::Triplet).next().is_none() {
        return Err(Error::EmptyTriplets(triplet_manifest.to_path_buf()));
    }
    let ckpt = backend.train(triplet_manifest, cfg)?;
    if ckpt.backend_id != backend.id() {
        return Err(Error::backend(backend.id(), None, format!("returned a checkpoint for '{}'", ckpt.backend_id)));
    }
    let id = ContentId::new("ckpt", OP_VERSION)
        .field("backend", &ckpt.backend_id)
        .field("uri", &ckpt.uri)
        .field("config", &ckpt.config_hash)
        .field("triplets", &sha256_file(triplet_manifest)?)
        .finish();
    let mut out = Manifest::create(out_manifest)?;
    if !out.contains(&id) {
        let rec = ManifestRecord::new(&id, RecordKind::Checkpoint, ctx.clock)
            .with_artifact("triplets", triplet_manifest, &out.dir())?
            .with_param("backend_id", ckpt.backend_id.as_str())
            .with_param("uri", ckpt.uri.as_str())
            .with_param("config_hash", ckpt.config_hash.as_str())
            .with_param("trainable_scope", "conditioning_branch_only")
            .with_param("hyperparameters", serde_json::to_value(&cfg.hyperparameters).expect("json"));
        out.append(rec)?;
    }
    Ok(ckpt)
}

/// The last checkpoint recorded in a checkpoint manifest.
pub fn load_checkpoint(manifest_path: &Path) -> Result<CheckpointRef> {
    let m = Manifest::open_existing(manifest_path)?;
    let rec = m.of_kind(RecordKind::Checkpoint).last().ok_or_else(|| Error::ManifestInvalid {
        path: manifest_path.to_path_buf(),
        reason: "no checkpoint record".into(),
    })?;
    let field = |k: &str| {
        rec.param_str(k).map(str::to_string).ok_or_else(|| Error::ManifestInvalid {
            path: manifest_path.to_path_buf(),
            reason: format!("checkpoint record {} lacks {k}", rec.id),
        })
    };
    Ok(CheckpointRef { backend_id: field("backend_id")?, uri: field("uri")?, config_hash: field("config_hash")? })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub prompt: String,
    pub seed: u64,
    pub guidance_scale: f64,
    pub num_steps: u32,
    pub checkpoint: CheckpointRef,
    pub downscale: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub image: RgbImage,
    pub provenance: Provenance,
}

pub fn generate_conditioned(
    depth: &InverseRelativeDepthMap,
    prompt: &str,
    cfg: &GenerationConfig,
    seed: u64,
    backend: &dyn ConditionedGenerator,
    checkpoint: &CheckpointRef,
) -> Result<Generated> {
    cfg.validate()?;
    if !depth.is_normalized() {
        return Err(Error::InvalidValue("conditioning depth must be normalized to [0, 1]".into()));
    }
    checkpoint.ensure_owned_by(backend.id())?;
    let k = backend.downscale_factor().max(1);
    let image = backend.sample(checkpoint, depth, prompt, cfg, seed)?;
    let expected = (depth.width() / k, depth.height() / k);
    if image.dims() != expected {
        return Err(Error::backend(
            backend.id(),
            None,
            format!("sample is {:?}, expected {:?} (downscale {k})", image.dims(), expected),
        ));
    }
    Ok(Generated {
        image,
        provenance: Provenance {
            prompt: prompt.to_string(),
            seed,
            guidance_scale: cfg.guidance_scale,
            num_steps: cfg.num_steps,
            checkpoint: checkpoint.clone(),
            downscale: k,
        },
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenerateOptions {
    /// Stop after writing this many new records.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GenerationReport {
    pub expected: usize,
    pub written: usize,
    pub skipped: usize,
    /// Items not attempted because the limit was reached.
    pub deferred: usize,
    pub failures: Vec<ItemFailure>,
}

struct GenItem {
    id: String,
    depth_id: String,
    depth_path: PathBuf,
    prompt_index: usize,
    sample_index: u32,
    seed: u64,
}

/// One generated image per (depth, prompt, sample). Records already present
/// in `out_manifest` are skipped; per-item backend failures are reported.
pub fn generate_dataset_samples(
    depth_manifest: &Path,
    cfg: &GenerationConfig,
    backend: &dyn ConditionedGenerator,
    checkpoint: &CheckpointRef,
    out_manifest: &Path,
    opts: GenerateOptions,
    ctx: &StageContext,
) -> Result<GenerationReport> {
    cfg.validate()?;
    checkpoint.ensure_owned_by(backend.id())?;
    require_valid(depth_manifest)?;
    let depths = Manifest::open_existing(depth_manifest)?;
    let depth_dir = depths.dir();
    let mut depth_records: Vec<(String, PathBuf)> = depths
        .of_kind(RecordKind::Depth)
        .filter_map(|r| r.resolve("depth", &depth_dir).map(|p| (r.id.clone(), p)))
        .collect();
    if depth_records.is_empty() {
        return Err(Error::InvalidConfig(format!("{} has no depth records", depth_manifest.display())));
    }
    depth_records.sort();

    let k = backend.downscale_factor().max(1);
    let mut items = Vec::new();
    for (depth_id, depth_path) in &depth_records {
        for (pi, prompt) in cfg.prompts.iter().enumerate() {
            for s in 0..cfg.samples_per_condition {
                let seed = seed_schedule(cfg.base_seed, depth_id, prompt, s);
                let id = ContentId::new("gen", OP_VERSION)
                    .field("depth", depth_id)
                    .field("prompt", prompt)
                    .field("sample", &s.to_string())
                    .field("seed", &seed.to_string())
                    .field("backend", backend.id())
                    .field("checkpoint", &checkpoint.uri)
                    .field("config", &checkpoint.config_hash)
                    .field("guidance", &cfg.guidance_scale.to_string())
                    .field("steps", &cfg.num_steps.to_string())
                    .finish();
                items.push(GenItem {
                    id,
                    depth_id: depth_id.clone(),
                    depth_path: depth_path.clone(),
                    prompt_index: pi,
                    sample_index: s,
                    seed,
                });
            }
        }
    }

    let mut out = Manifest::create(out_manifest)?;
    let out_dir = out.dir();
    let img_dir = out_dir.join("generated");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut report = GenerationReport { expected: items.len(), ..Default::default() };
    let pending: Vec<&GenItem> = items.iter().filter(|it| !out.contains(&it.id)).collect();
    report.skipped = items.len() - pending.len();
    let budget = opts.limit.unwrap_or(usize::MAX);
    let chunk = ctx.jobs.max(1) * 4;

    let mut start = 0;
    while start < pending.len() && report.written < budget {
        let take = chunk.min(budget - report.written).min(pending.len() - start);
        let batch = &pending[start..start + take];
        start += take;
        let produced = map_items(batch, ctx.jobs, backend.reentrant(), |it| {
            let depth = decode_inverse(&it.depth_path)?.to_unit_scale();
            let depth = InverseRelativeDepthMap::new_normalized(depth.width(), depth.height(), depth.into_values())?;
            let prompt = &cfg.prompts[it.prompt_index];
            let g = generate_conditioned(&depth, prompt, cfg, it.seed, backend, checkpoint).map_err(|e| match e {
                Error::BackendFailure { backend_id, reason, .. } => {
                    Error::BackendFailure { backend_id, item: Some(it.id.clone()), reason }
                }
                other => other,
            })?;
            let path = img_dir.join(format!("{}.png", it.id));
            save_image(&g.image, &path, ImageBitDepth::Sixteen)?;
            Ok::<_, Error>(path)
        });
        for (it, result) in batch.iter().zip(produced) {
            match result {
                Err(e) => report.failures.push(ItemFailure::new(&it.id, e)),
                Ok(path) => {
                    let rec = ManifestRecord::new(&it.id, RecordKind::GeneratedImage, ctx.clock)
                        .with_artifact("image", &path, &out_dir)?
                        .with_artifact("conditioning_depth", &it.depth_path, &out_dir)?
                        .with_param("depth_id", it.depth_id.as_str())
                        .with_param("prompt", cfg.prompts[it.prompt_index].as_str())
                        .with_param("prompt_index", it.prompt_index as u64)
                        .with_param("sample_index", it.sample_index as u64)
                        .with_param("seed", it.seed)
                        .with_param("base_seed", cfg.base_seed)
                        .with_param("guidance_scale", cfg.guidance_scale)
                        .with_param("num_steps", cfg.num_steps as u64)
                        .with_param("backend_id", backend.id())
                        .with_param("checkpoint_uri", checkpoint.uri.as_str())
                        .with_param("config_hash", checkpoint.config_hash.as_str())
                        .with_param("downscale", k as u64);
                    out.append(rec)?;
                    report.written += 1;
                }
            }
        }
    }
    report.deferred = pending.len() - start;
    Ok(report)
}

/// Where conditioning depth comes from.
pub enum DepthSource<'a> {
    /// Pseudo-label RGB images with an estimator.
    Estimator(&'a dyn DepthEstimator),
    /// Stored depth files (16-bit PNG with sidecar). Metric maps are converted
    /// by reciprocal then min-max normalization.
    Precomputed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub inputs: usize,
    pub written: usize,
    pub skipped: usize,
    pub failures: Vec<ItemFailure>,
}

/// Turns a directory of terrestrial images or depth files into a manifest of
/// normalized conditioning depth maps.
pub fn ingest_depths(
    input_dir: &Path,
    source: DepthSource<'_>,
    out_manifest: &Path,
    ctx: &StageContext,
) -> Result<IngestReport> {
    let files = crate::prep::list_input_files(input_dir, |p| match source {
        // sidecars sit next to the depth PNGs
        DepthSource::Precomputed => p.extension().is_some_and(|e| e == "png"),
        DepthSource::Estimator(_) => true,
    })?;
    let mut out = Manifest::create(out_manifest)?;
    let out_dir = out.dir();
    let depth_dir = out_dir.join("conditioning");
    std::fs::create_dir_all(&depth_dir).map_err(|e| Error::io(&depth_dir, e))?;

    let reentrant = match &source {
        DepthSource::Estimator(e) => e.reentrant(),
        DepthSource::Precomputed => true,
    };
    let converted = map_items(&files, ctx.jobs, reentrant, |path| {
        let digest = sha256_file(path)?;
        let (map, conversion, origin) = match &source {
            DepthSource::Estimator(est) => {
                let img = codec::load_image(path)?;
                (pseudo_label_depth(&img, *est)?, "estimator_minmax".to_string(), est.id().to_string())
            }
            DepthSource::Precomputed => match decode_depth(path)? {
                DepthMap::Metric(m) => (metric_to_normalized_inverse(&m), "reciprocal_minmax".into(), "metric".into()),
                DepthMap::Inverse(m) => (m.to_unit_scale(), "minmax".into(), "inverse_relative".into()),
            },
        };
        let id = ContentId::new("cond", OP_VERSION).field("source", &digest).field("origin", &origin).finish();
        Ok::<_, Error>((id, map, conversion, origin))
    });

    let mut report = IngestReport { inputs: files.len(), ..Default::default() };
    for (path, result) in files.iter().zip(converted) {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match result {
            Err(e) => report.failures.push(ItemFailure::new(name, e)),
            Ok((id, _, _, _)) if out.contains(&id) => report.skipped += 1,
            Ok((id, map, conversion, origin)) => {
                let dest = depth_dir.join(format!("{id}.png"));
                encode_inverse(&map, &dest)?;
                let rec = ManifestRecord::new(&id, RecordKind::Depth, ctx.clock)
                    .with_artifact("depth", &dest, &out_dir)?
                    .with_artifact("source", path, &out_dir)?
                    .with_param("file_name", name.as_str())
                    .with_param("convention", "normalized_inverse_relative")
                    .with_param("conversion", conversion.as_str())
                    .with_param("origin", origin.as_str())
                    .with_param("width", map.width() as u64)
                    .with_param("height", map.height() as u64);
                out.append(rec)?;
                report.written += 1;
            }
        }
    }
    Ok(report)
}
