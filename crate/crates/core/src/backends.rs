//! Interfaces to the external models the pipeline drives, plus deterministic
//! mock implementations and an id-keyed registry.
//!
//! Real adapters (monocular depth estimators, captioners, latent-diffusion
//! generators with a trainable conditioning branch, supervised depth
//! networks) implement the same traits out of tree. The mocks make every stage
//! runnable and testable without model weights:
//!
//! * [`MockDepthEstimator`] returns normalized luminance, which commutes with
//!   horizontal flips exactly.
//! * [`BiasedDepthEstimator`] adds a left-to-right ramp, breaking that symmetry.
//! * [`MockGenerator`] writes the conditioning depth into the green channel, so
//!   [`GreenChannelDepthModel`] recovers it bit-exactly.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::datasetbuild::{inverse_to_metric, ConversionConfig};
use crate::depth::{DepthRaster, InverseRelativeDepthMap, MetricDepthMap};
use crate::error::{Error, Result};
use crate::genpipe::{GenerationConfig, TrainConfig};
use crate::manifest::{sha256_bytes, sha256_file, ContentId};
use crate::raster::RgbImage;

/// Env var that prefixes relative checkpoint URIs.
pub const BACKEND_DIR_ENV: &str = "ATLANTIS_BACKEND_DIR";

/// Nonempty (after trimming) image description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Caption(String);

impl Caption {
    pub fn new(text: impl Into<String>) -> Option<Self> {
        let text = text.into();
        (!text.trim().is_empty()).then_some(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Caption {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        Caption::new(s).ok_or_else(|| "caption must not be empty".to_string())
    }
}

impl From<Caption> for String {
    fn from(c: Caption) -> String {
        c.0
    }
}

impl fmt::Display for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Locator for a trained model state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub backend_id: String,
    pub uri: String,
    pub config_hash: String,
}

impl CheckpointRef {
    /// The URI, prefixed by `ATLANTIS_BACKEND_DIR` when it is a relative path.
    pub fn resolved_uri(&self) -> String {
        if self.uri.contains("://") || Path::new(&self.uri).is_absolute() {
            return self.uri.clone();
        }
        match std::env::var_os(BACKEND_DIR_ENV) {
            Some(dir) => PathBuf::from(dir).join(&self.uri).to_string_lossy().into_owned(),
            None => self.uri.clone(),
        }
    }

    pub fn ensure_owned_by(&self, backend_id: &str) -> Result<()> {
        if self.backend_id != backend_id {
            return Err(Error::CheckpointMismatch {
                backend: backend_id.to_string(),
                checkpoint_backend: self.backend_id.clone(),
            });
        }
        Ok(())
    }
}

/// Monocular estimator producing inverse relative depth with the input's
/// dimensions. Must be deterministic.
pub trait DepthEstimator: Send + Sync {
    fn id(&self) -> &str;
    fn estimate(&self, image: &RgbImage) -> Result<InverseRelativeDepthMap>;
    /// Whether concurrent calls on one instance are allowed.
    fn reentrant(&self) -> bool {
        true
    }
}

/// Image captioner. Must be deterministic; an empty return violates the
/// contract and is surfaced by the caller.
pub trait Captioner: Send + Sync {
    fn id(&self) -> &str;
    fn caption(&self, image: &RgbImage) -> Result<String>;
    fn reentrant(&self) -> bool {
        true
    }
}

/// Text-to-image generator steered by a depth-conditioning branch.
///
/// `train` may only update the conditioning branch; the base generator stays
/// frozen. At most one `train` call may be in flight per instance. `sample`
/// is deterministic in (checkpoint, depth, prompt, config, seed) and returns an
/// image of the depth map's size divided by [`downscale_factor`].
///
/// [`downscale_factor`]: ConditionedGenerator::downscale_factor
pub trait ConditionedGenerator: Send + Sync {
    fn id(&self) -> &str;
    fn downscale_factor(&self) -> usize {
        1
    }
    fn train(&self, triplet_manifest: &Path, cfg: &TrainConfig) -> Result<CheckpointRef>;
    fn sample(
        &self,
        checkpoint: &CheckpointRef,
        depth: &InverseRelativeDepthMap,
        prompt: &str,
        cfg: &GenerationConfig,
        seed: u64,
    ) -> Result<RgbImage>;
    fn reentrant(&self) -> bool {
        true
    }
}

/// Supervised metric depth network.
pub trait DepthModel: Send + Sync {
    fn id(&self) -> &str;
    fn train(&self, dataset_manifest: &Path, cfg: &TrainConfig) -> Result<CheckpointRef>;
    /// Metric depth within `(0, cap]`, deterministic for a checkpoint.
    fn predict(&self, checkpoint: &CheckpointRef, image: &RgbImage) -> Result<MetricDepthMap>;
    fn reentrant(&self) -> bool {
        true
    }
}

/// Normalized luminance as inverse depth.
#[derive(Debug, Clone)]
pub struct MockDepthEstimator {
    id: String,
}

impl MockDepthEstimator {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into() }
    }
}

impl Default for MockDepthEstimator {
    fn default() -> Self {
        Self::new("mock-depth")
    }
}

pub fn mock_depth_estimate(image: &RgbImage) -> InverseRelativeDepthMap {
    InverseRelativeDepthMap::new(image.width(), image.height(), image.luminance())
        .expect("luminance of a valid image is finite and nonnegative")
        .normalized()
}

impl DepthEstimator for MockDepthEstimator {
    fn id(&self) -> &str {
        &self.id
    }
    fn estimate(&self, image: &RgbImage) -> Result<InverseRelativeDepthMap> {
        Ok(mock_depth_estimate(image))
    }
}

/// [`mock_depth_estimate`] plus `amplitude * x / (width - 1)`, clamped back
/// onto `[0, 1]`.
pub fn mock_depth_estimate_biased(image: &RgbImage, ramp_amplitude: f64) -> InverseRelativeDepthMap {
    let base = mock_depth_estimate(image);
    if ramp_amplitude == 0.0 {
        return base;
    }
    let w = image.width();
    let denom = (w.max(2) - 1) as f64;
    let data = base
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| (v + ramp_amplitude * (i % w) as f64 / denom).clamp(0.0, 1.0))
        .collect();
    InverseRelativeDepthMap::new_normalized(w, image.height(), data).expect("clamped to unit range")
}

#[derive(Debug, Clone)]
pub struct BiasedDepthEstimator {
    id: String,
    ramp_amplitude: f64,
}

impl BiasedDepthEstimator {
    pub fn new(id: impl Into<String>, ramp_amplitude: f64) -> Result<Self> {
        if !(ramp_amplitude.is_finite() && ramp_amplitude >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "ramp amplitude must be >= 0, got {ramp_amplitude}"
            )));
        }
        Ok(Self { id: id.into(), ramp_amplitude })
    }
}

impl DepthEstimator for BiasedDepthEstimator {
    fn id(&self) -> &str {
        &self.id
    }
    fn estimate(&self, image: &RgbImage) -> Result<InverseRelativeDepthMap> {
        Ok(mock_depth_estimate_biased(image, self.ramp_amplitude))
    }
}

pub fn mock_caption(image: &RgbImage) -> Caption {
    Caption::new(format!("a scene with mean luminance {:.2}", image.mean_luminance()))
        .expect("nonempty")
}

#[derive(Debug, Clone)]
pub struct MockCaptioner {
    id: String,
}

impl MockCaptioner {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into() }
    }
}

impl Default for MockCaptioner {
    fn default() -> Self {
        Self::new("mock-caption")
    }
}

impl Captioner for MockCaptioner {
    fn id(&self) -> &str {
        &self.id
    }
    fn caption(&self, image: &RgbImage) -> Result<String> {
        Ok(mock_caption(image).into())
    }
}

/// Returns the same text for every image.
#[derive(Debug, Clone)]
pub struct StaticCaptioner {
    id: String,
    text: String,
}

impl StaticCaptioner {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into() }
    }
}

impl Captioner for StaticCaptioner {
    fn id(&self) -> &str {
        &self.id
    }
    fn caption(&self, _image: &RgbImage) -> Result<String> {
        Ok(self.text.clone())
    }
}

/// Green channel carries the conditioning depth; red and blue are a texture
/// keyed by (prompt, seed).
#[derive(Debug)]
pub struct MockGenerator {
    id: String,
    downscale: usize,
    fail_on_call: Option<u64>,
    calls: AtomicU64,
    training: Mutex<()>,
}

impl MockGenerator {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            downscale: 1,
            fail_on_call: None,
            calls: AtomicU64::new(0),
            training: Mutex::new(()),
        }
    }

    pub fn with_downscale(mut self, factor: usize) -> Self {
        self.downscale = factor.max(1);
        self
    }

    /// Makes the `n`-th `sample` call (1-based) fail.
    pub fn failing_on_call(mut self, n: u64) -> Self {
        self.fail_on_call = Some(n);
        self
    }
}

impl Default for MockGenerator {
    fn default() -> Self {
        Self::new("mock-generator")
    }
}

pub fn mock_generate(depth: &InverseRelativeDepthMap, prompt: &str, seed: u64) -> RgbImage {
    let mut key = Sha256::new();
    key.update(prompt.as_bytes());
    key.update(seed.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key.finalize().into());
    let unit = depth.to_unit_scale();
    let mut data = Vec::with_capacity(unit.values().len() * 3);
    for g in unit.values() {
        let r: f64 = rng.gen();
        let b: f64 = rng.gen();
        data.extend_from_slice(&[r, *g, b]);
    }
    RgbImage::new(depth.width(), depth.height(), data).expect("unit-range channels")
}

impl ConditionedGenerator for MockGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn downscale_factor(&self) -> usize {
        self.downscale
    }

    fn train(&self, triplet_manifest: &Path, cfg: &TrainConfig) -> Result<CheckpointRef> {
        let _guard = self.training.lock().map_err(|_| Error::backend(&self.id, None, "poisoned"))?;
        let config_hash = cfg.config_hash();
        let data = sha256_file(triplet_manifest)?;
        let tag = ContentId::new("ckpt", 1)
            .field("backend", &self.id)
            .field("config", &config_hash)
            .field("triplets", &data)
            .finish();
        Ok(CheckpointRef { backend_id: self.id.clone(), uri: format!("mock://{}/{tag}", self.id), config_hash })
    }

    fn sample(
        &self,
        checkpoint: &CheckpointRef,
        depth: &InverseRelativeDepthMap,
        prompt: &str,
        _cfg: &GenerationConfig,
        seed: u64,
    ) -> Result<RgbImage> {
        checkpoint.ensure_owned_by(&self.id)?;
        let call = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        if self.fail_on_call == Some(call) {
            return Err(Error::backend(&self.id, None, format!("injected failure on call {call}")));
        }
        let depth = depth.downsample(self.downscale)?;
        Ok(mock_generate(&depth, prompt, seed))
    }
}

/// Reads inverse depth from the green channel and converts it to metric depth
/// with the dataset's conversion, rounded to the millimeter like stored depth.
#[derive(Debug, Clone)]
pub struct GreenChannelDepthModel {
    id: String,
    conversion: ConversionConfig,
}

impl GreenChannelDepthModel {
    pub fn new(id: impl Into<String>, conversion: ConversionConfig) -> Self {
        Self { id: id.into(), conversion }
    }
}

impl Default for GreenChannelDepthModel {
    fn default() -> Self {
        Self::new("green-channel-depth", ConversionConfig::default())
    }
}

impl DepthModel for GreenChannelDepthModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn train(&self, dataset_manifest: &Path, cfg: &TrainConfig) -> Result<CheckpointRef> {
        mock_train_ref(&self.id, dataset_manifest, cfg)
    }

    fn predict(&self, checkpoint: &CheckpointRef, image: &RgbImage) -> Result<MetricDepthMap> {
        checkpoint.ensure_owned_by(&self.id)?;
        let green = InverseRelativeDepthMap::new_normalized(image.width(), image.height(), image.channel(1))?;
        Ok(inverse_to_metric(&green, &self.conversion)?.quantized_mm())
    }
}

/// Returns stored ground truth for images it has seen, keyed by pixel content.
#[derive(Debug, Default)]
pub struct LookupDepthModel {
    id: String,
    table: HashMap<String, MetricDepthMap>,
}

impl LookupDepthModel {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into(), table: HashMap::new() }
    }

    pub fn insert(&mut self, image: &RgbImage, depth: MetricDepthMap) {
        self.table.insert(image_key(image), depth);
    }
}

fn image_key(image: &RgbImage) -> String {
    let bytes: Vec<u8> = image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_bytes(&bytes)
}

impl DepthModel for LookupDepthModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn train(&self, dataset_manifest: &Path, cfg: &TrainConfig) -> Result<CheckpointRef> {
        mock_train_ref(&self.id, dataset_manifest, cfg)
    }

    fn predict(&self, checkpoint: &CheckpointRef, image: &RgbImage) -> Result<MetricDepthMap> {
        checkpoint.ensure_owned_by(&self.id)?;
        self.table
            .get(&image_key(image))
            .cloned()
            .ok_or_else(|| Error::backend(&self.id, None, "image not in lookup table"))
    }
}

fn mock_train_ref(id: &str, manifest: &Path, cfg: &TrainConfig) -> Result<CheckpointRef> {
    let config_hash = cfg.config_hash();
    let tag = ContentId::new("ckpt", 1)
        .field("backend", id)
        .field("config", &config_hash)
        .field("data", &sha256_file(manifest)?)
        .finish();
    Ok(CheckpointRef { backend_id: id.to_string(), uri: format!("mock://{id}/{tag}"), config_hash })
}

/// One registry entry as it appears in a pipeline config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub adapter: String,
    #[serde(default)]
    pub params: Map<String, Value>,
}

/// Adapter names of neural backends that live outside this crate.
const EXTERNAL_ADAPTERS: &[&str] =
    &["midas", "blip2", "controlnet", "stable_diffusion_controlnet", "idisc", "newcrfs", "iebins", "va_depthnet"];

/// Backends by id, one namespace per role.
#[derive(Default, Clone)]
pub struct BackendRegistry {
    estimators: BTreeMap<String, Arc<dyn DepthEstimator>>,
    captioners: BTreeMap<String, Arc<dyn Captioner>>,
    generators: BTreeMap<String, Arc<dyn ConditionedGenerator>>,
    depth_models: BTreeMap<String, Arc<dyn DepthModel>>,
}

impl fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendRegistry")
            .field("estimators", &self.estimators.keys().collect::<Vec<_>>())
            .field("captioners", &self.captioners.keys().collect::<Vec<_>>())
            .field("generators", &self.generators.keys().collect::<Vec<_>>())
            .field("depth_models", &self.depth_models.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The built-in mocks under their default ids.
    pub fn with_mocks() -> Self {
        let mut r = Self::new();
        r.register_estimator(Arc::new(MockDepthEstimator::default()));
        r.register_estimator(Arc::new(
            BiasedDepthEstimator::new("mock-depth-biased", 0.8).expect("valid amplitude"),
        ));
        r.register_captioner(Arc::new(MockCaptioner::default()));
        r.register_generator(Arc::new(MockGenerator::default()));
        r.register_depth_model(Arc::new(GreenChannelDepthModel::default()));
        r
    }

    pub fn register_estimator(&mut self, b: Arc<dyn DepthEstimator>) {
        self.estimators.insert(b.id().to_string(), b);
    }
    pub fn register_captioner(&mut self, b: Arc<dyn Captioner>) {
        self.captioners.insert(b.id().to_string(), b);
    }
    pub fn register_generator(&mut self, b: Arc<dyn ConditionedGenerator>) {
        self.generators.insert(b.id().to_string(), b);
    }
    pub fn register_depth_model(&mut self, b: Arc<dyn DepthModel>) {
        self.depth_models.insert(b.id().to_string(), b);
    }

    pub fn estimator(&self, id: &str) -> Result<Arc<dyn DepthEstimator>> {
        lookup(&self.estimators, id, "depth estimator")
    }
    pub fn captioner(&self, id: &str) -> Result<Arc<dyn Captioner>> {
        lookup(&self.captioners, id, "captioner")
    }
    pub fn generator(&self, id: &str) -> Result<Arc<dyn ConditionedGenerator>> {
        lookup(&self.generators, id, "generator")
    }
    pub fn depth_model(&self, id: &str) -> Result<Arc<dyn DepthModel>> {
        lookup(&self.depth_models, id, "depth model")
    }

    /// Instantiates and registers one configured backend.
    pub fn register_spec(&mut self, id: &str, spec: &BackendSpec) -> Result<()> {
        let p = &spec.params;
        match spec.adapter.as_str() {
            "mock_depth" => self.register_estimator(Arc::new(MockDepthEstimator::new(id))),
            "mock_depth_biased" => {
                let amp = param_f64(p, "ramp_amplitude")?.unwrap_or(0.8);
                self.register_estimator(Arc::new(BiasedDepthEstimator::new(id, amp)?))
            }
            "mock_caption" => self.register_captioner(Arc::new(MockCaptioner::new(id))),
            "static_caption" => {
                let text = p.get("text").and_then(Value::as_str).unwrap_or_default();
                self.register_captioner(Arc::new(StaticCaptioner::new(id, text)))
            }
            "mock_generator" => {
                let mut g = MockGenerator::new(id);
                if let Some(k) = param_u64(p, "downscale")? {
                    g = g.with_downscale(k as usize);
                }
                if let Some(n) = param_u64(p, "fail_on_call")? {
                    g = g.failing_on_call(n);
                }
                self.register_generator(Arc::new(g))
            }
            "green_channel_depth" => {
                let mut conv = ConversionConfig::default();
                if let Some(v) = param_f64(p, "d_min_m")? {
                    conv.d_min_m = v;
                }
                if let Some(v) = param_f64(p, "d_max_m")? {
                    conv.d_max_m = v;
                }
                if let Some(v) = p.get("mapping") {
                    conv.mapping = serde_json::from_value(v.clone())
                        .map_err(|e| Error::InvalidConfig(format!("backend {id}: mapping: {e}")))?;
                }
                conv.validate()?;
                self.register_depth_model(Arc::new(GreenChannelDepthModel::new(id, conv)))
            }
            other if EXTERNAL_ADAPTERS.contains(&other) => {
                return Err(Error::InvalidConfig(format!(
                    "backend {id}: adapter '{other}' is an external neural adapter not built into this binary"
                )))
            }
            other => {
                return Err(Error::InvalidConfig(format!("backend {id}: unknown adapter '{other}'")))
            }
        }
        Ok(())
    }
}

fn lookup<T: ?Sized>(map: &BTreeMap<String, Arc<T>>, id: &str, role: &str) -> Result<Arc<T>> {
    map.get(id).cloned().ok_or_else(|| {
        Error::backend(
            id,
            None,
            format!("no {role} registered under this id (known: {:?})", map.keys().collect::<Vec<_>>()),
        )
    })
}

fn param_f64(p: &Map<String, Value>, key: &str) -> Result<Option<f64>> {
    match p.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| Error::InvalidConfig(format!("parameter {key} must be a number"))),
    }
}

fn param_u64(p: &Map<String, Value>, key: &str) -> Result<Option<u64>> {
    match p.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_u64()
            .map(Some)
            .ok_or_else(|| Error::InvalidConfig(format!("parameter {key} must be a nonnegative integer"))),
    }
}
