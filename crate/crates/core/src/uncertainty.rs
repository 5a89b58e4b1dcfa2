//! Flip-consistency depth uncertainty and the validity mask derived from it.
//!
//! For an image `I` and estimator `F`, with `A = norm(F(I))` and
//! `B = hflip(norm(F(hflip(I))))`, the per-pixel uncertainty is the variance of
//! the two values `{A_p, B_p}`. Population variance gives `((A_p - B_p) / 2)^2`,
//! bounded by 0.25 on unit-scale maps; sample variance doubles it. Pixels with
//! uncertainty strictly below the threshold are kept.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::DepthEstimator;
use crate::codec::{self, read_bitmask, read_json, sidecar_path, write_bitmask, write_json};
use crate::depth::{DepthRaster, InverseRelativeDepthMap};
use crate::error::{Error, Result};
use crate::manifest::{require_valid, ContentId, Manifest, ManifestRecord, RecordKind};
use crate::raster::{hflip_interleaved, RgbImage};
use crate::stage::{map_items, ItemFailure, StageContext};

pub const DEFAULT_THRESHOLD: f64 = 0.15;
const OP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    /// Divide by n.
    #[default]
    Population,
    /// Divide by n - 1.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuOptions {
    pub variance: VarianceKind,
    /// Bring each estimate onto the unit scale before differencing. Estimates
    /// already flagged as unit-scale are used as-is; others are min-max
    /// normalized.
    pub normalize: bool,
}

impl Default for DuOptions {
    fn default() -> Self {
        Self { variance: VarianceKind::Population, normalize: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl UncertaintyMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height} uncertainty map with {} values",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidValue(format!("uncertainty {v} must be finite and >= 0")));
        }
        Ok(Self { width, height, data })
    }

    pub fn hflip(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: hflip_interleaved(&self.data, self.width, self.height, 1),
        }
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

impl DepthRaster for UncertaintyMap {
    fn width(&self) -> usize {
        self.width
    }
    fn height(&self) -> usize {
        self.height
    }
    fn values(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
    threshold: f64,
    valid_fraction: f64,
}

impl ValidityMask {
    pub fn from_bits(width: usize, height: usize, data: Vec<bool>, threshold: f64) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(Error::ShapeMismatch(format!("{width}x{height} mask with {} bits", data.len())));
        }
        let valid_fraction = data.iter().filter(|b| **b).count() as f64 / data.len() as f64;
        Ok(Self { width, height, data, threshold, valid_fraction })
    }

    /// Every pixel valid.
    pub fn all_valid(width: usize, height: usize, threshold: f64) -> Result<Self> {
        Self::from_bits(width, height, vec![true; width * height], threshold)
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    pub fn bits(&self) -> &[bool] {
        &self.data
    }
    pub fn threshold(&self) -> f64 {
        self.threshold
    }
    pub fn valid_fraction(&self) -> f64 {
        self.valid_fraction
    }
}

pub fn normalize_inverse_depth(map: &InverseRelativeDepthMap) -> InverseRelativeDepthMap {
    map.normalized()
}

/// Variance of the two-sample set `{a, b}`.
pub fn two_point_variance(a: f64, b: f64, kind: VarianceKind) -> f64 {
    let half = (a - b) / 2.0;
    match kind {
        VarianceKind::Population => half * half,
        VarianceKind::Sample => 2.0 * half * half,
    }
}

/// Per-pixel variance between two aligned estimates.
pub fn uncertainty_from_estimates(
    original: &InverseRelativeDepthMap,
    flipped_back: &InverseRelativeDepthMap,
    kind: VarianceKind,
) -> Result<UncertaintyMap> {
    if original.dims() != flipped_back.dims() {
        return Err(Error::ShapeMismatch(format!(
            "estimates differ in size: {:?} vs {:?}",
            original.dims(),
            flipped_back.dims()
        )));
    }
    let data = original
        .values()
        .iter()
        .zip(flipped_back.values())
        .map(|(a, b)| two_point_variance(*a, *b, kind))
        .collect();
    UncertaintyMap::new(original.width(), original.height(), data)
}

pub fn depth_uncertainty(image: &RgbImage, backend: &dyn DepthEstimator) -> Result<UncertaintyMap> {
    depth_uncertainty_with(image, backend, DuOptions::default())
}

pub fn depth_uncertainty_with(
    image: &RgbImage,
    backend: &dyn DepthEstimator,
    opts: DuOptions,
) -> Result<UncertaintyMap> {
    let estimate = |img: &RgbImage| -> Result<InverseRelativeDepthMap> {
        let d = backend.estimate(img)?;
        if d.dims() != img.dims() {
            return Err(Error::backend(
                backend.id(),
                None,
                format!("estimate is {:?}, image is {:?}", d.dims(), img.dims()),
            ));
        }
        Ok(if opts.normalize { d.to_unit_scale() } else { d })
    };
    let original = estimate(image)?;
    let flipped_back = estimate(&image.hflip())?.hflip();
    uncertainty_from_estimates(&original, &flipped_back, opts.variance)
}

pub fn validity_mask(du: &UncertaintyMap, threshold: f64) -> Result<ValidityMask> {
    if !(threshold > 0.0) {
        return Err(Error::NonPositiveThreshold(threshold));
    }
    let bits = du.data.iter().map(|v| *v < threshold).collect();
    ValidityMask::from_bits(du.width, du.height, bits, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub width: usize,
    pub height: usize,
    pub threshold: f64,
    pub valid_fraction: f64,
}

/// 1-bit PNG plus a sidecar with threshold and valid fraction.
pub fn save_mask(mask: &ValidityMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_bitmask(path, mask.width, mask.height, &mask.data)?;
    write_json(
        &sidecar_path(path),
        &MaskSidecar {
            width: mask.width,
            height: mask.height,
            threshold: mask.threshold,
            valid_fraction: mask.valid_fraction,
        },
    )
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<ValidityMask> {
    let path = path.as_ref();
    let side_path = sidecar_path(path);
    if !side_path.is_file() {
        return Err(Error::MissingSidecar(side_path));
    }
    let side: MaskSidecar = read_json(&side_path)?;
    let (w, h, bits) = read_bitmask(path)?;
    if (w, h) != (side.width, side.height) {
        return Err(Error::CorruptSidecar { path: side_path, reason: "mask size mismatch".into() });
    }
    ValidityMask::from_bits(w, h, bits, side.threshold)
}

/// Unit-scale u16 quantization of an uncertainty map; the sidecar records the
/// scale (steps per unit of variance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySidecar {
    pub encoding: String,
    pub width: usize,
    pub height: usize,
    pub scale: f64,
    pub max: f64,
}

pub fn save_uncertainty(map: &UncertaintyMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // sample variance of unit-scale values is at most 0.5
    let bound = map.max().max(0.5);
    let scale = u16::MAX as f64 / bound;
    let stored: Vec<u16> = map.data.iter().map(|v| (v * scale).round() as u16).collect();
    codec::write_gray16(path, map.width, map.height, &stored)?;
    write_json(
        &sidecar_path(path),
        &UncertaintySidecar {
            encoding: "uncertainty_u16".into(),
            width: map.width,
            height: map.height,
            scale,
            max: map.max(),
        },
    )
}

pub fn load_uncertainty(path: impl AsRef<Path>) -> Result<UncertaintyMap> {
    let path = path.as_ref();
    let side_path = sidecar_path(path);
    if !side_path.is_file() {
        return Err(Error::MissingSidecar(side_path));
    }
    let side: UncertaintySidecar = read_json(&side_path)?;
    let (w, h, stored) = codec::read_gray16(path)?;
    UncertaintyMap::new(w, h, stored.iter().map(|k| *k as f64 / side.scale).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FilterReport {
    pub inputs: usize,
    pub written: usize,
    pub skipped: usize,
    pub mean_valid_fraction: f64,
    pub failures: Vec<ItemFailure>,
}

/// Computes uncertainty and validity masks for every record carrying an
/// `image` artifact. Writes one `uncertainty` and one `mask` record per image;
/// both carry `source_id` pointing at the image record.
pub fn filter_images(
    images_manifest: &Path,
    estimator: &dyn DepthEstimator,
    threshold: f64,
    opts: DuOptions,
    out_manifest: &Path,
    ctx: &StageContext,
) -> Result<FilterReport> {
    if !(threshold > 0.0) {
        return Err(Error::NonPositiveThreshold(threshold));
    }
    require_valid(images_manifest)?;
    let input = Manifest::open_existing(images_manifest)?;
    let in_dir = input.dir();
    let mut out = Manifest::create(out_manifest)?;
    let out_dir = out.dir();
    let unc_dir = out_dir.join("uncertainty");
    let mask_dir = out_dir.join("masks");
    for d in [&unc_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    struct Item {
        source_id: String,
        image_path: PathBuf,
        image_digest: String,
        unc_id: String,
        mask_id: String,
    }
    let items: Vec<Item> = input
        .records()
        .iter()
        .filter(|r| r.paths.contains_key("image") && r.kind != RecordKind::Triplet)
        .map(|r| {
            let digest = r.sha256.get("image").cloned().unwrap_or_default();
            let base = ContentId::new("du", OP_VERSION)
                .field("image", &digest)
                .field("estimator", estimator.id())
                .field("variance", &format!("{:?}", opts.variance))
                .field("normalize", &opts.normalize.to_string());
            Item {
                source_id: r.id.clone(),
                image_path: r.resolve("image", &in_dir).expect("filtered on image role"),
                image_digest: digest,
                unc_id: base.clone().finish(),
                mask_id: ContentId::new("mask", OP_VERSION)
                    .field("du", &base.finish())
                    .field("threshold", &threshold.to_string())
                    .finish(),
            }
        })
        .collect();

    let mut report = FilterReport { inputs: items.len(), ..Default::default() };
    let pending: Vec<&Item> = items
        .iter()
        .filter(|it| !(out.contains(&it.unc_id) && out.contains(&it.mask_id)))
        .collect();
    report.skipped = items.len() - pending.len();

    let computed = map_items(&pending, ctx.jobs, estimator.reentrant(), |it| {
        let image = codec::load_image(&it.image_path)?;
        let du = depth_uncertainty_with(&image, estimator, opts).map_err(|e| match e {
            Error::BackendFailure { backend_id, reason, .. } => {
                Error::BackendFailure { backend_id, item: Some(it.source_id.clone()), reason }
            }
            other => other,
        })?;
        let mask = validity_mask(&du, threshold)?;
        let unc_path = unc_dir.join(format!("{}.png", it.unc_id));
        let mask_path = mask_dir.join(format!("{}.png", it.mask_id));
        save_uncertainty(&du, &unc_path)?;
        save_mask(&mask, &mask_path)?;
        Ok::<_, Error>((mask.valid_fraction(), du.max(), unc_path, mask_path))
    });

    for (it, result) in pending.iter().zip(computed) {
        match result {
            Err(e) => report.failures.push(ItemFailure::new(&it.source_id, e)),
            Ok((valid_fraction, max_du, unc_path, mask_path)) => {
                if !out.contains(&it.unc_id) {
                    let rec = ManifestRecord::new(&it.unc_id, RecordKind::Uncertainty, ctx.clock)
                        .with_artifact("uncertainty", &unc_path, &out_dir)?
                        .with_param("source_id", it.source_id.as_str())
                        .with_param("image_sha256", it.image_digest.as_str())
                        .with_param("estimator_id", estimator.id())
                        .with_param("variance", serde_json::to_value(opts.variance).expect("enum"))
                        .with_param("normalize", opts.normalize)
                        .with_param("max_du", max_du);
                    out.append(rec)?;
                }
                if !out.contains(&it.mask_id) {
                    let rec = ManifestRecord::new(&it.mask_id, RecordKind::Mask, ctx.clock)
                        .with_artifact("mask", &mask_path, &out_dir)?
                        .with_param("source_id", it.source_id.as_str())
                        .with_param("uncertainty_id", it.unc_id.as_str())
                        .with_param("estimator_id", estimator.id())
                        .with_param("threshold", threshold)
                        .with_param("valid_fraction", valid_fraction);
                    out.append(rec)?;
                }
                report.written += 1;
            }
        }
    }

    let fractions: Vec<f64> = out
        .of_kind(RecordKind::Mask)
        .filter_map(|r| r.param_f64("valid_fraction"))
        .collect();
    if !fractions.is_empty() {
        report.mean_valid_fraction = fractions.iter().sum::<f64>() / fractions.len() as f64;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BiasedDepthEstimator, MockDepthEstimator};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap()
    }

    fn inv(values: &[f64]) -> InverseRelativeDepthMap {
        InverseRelativeDepthMap::new(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_inverse_depth(&inv(&[0.2, 0.7])).values(), &[0.0, 1.0]);
        assert_eq!(normalize_inverse_depth(&inv(&[5.0, 5.0])).values(), &[0.0, 0.0]);
        assert_eq!(normalize_inverse_depth(&inv(&[1.0, 2.0, 3.0])).values(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn hand_evaluated_variances() {
        assert!((two_point_variance(0.4, 0.6, VarianceKind::Population) - 0.01).abs() < 1e-15);
        assert!((two_point_variance(0.0, 0.8, VarianceKind::Population) - 0.16).abs() < 1e-15);
        assert!((two_point_variance(0.0, 0.8, VarianceKind::Sample) - 0.32).abs() < 1e-15);
    }

    #[test]
    fn equivariant_estimator_has_zero_uncertainty() {
        let du = depth_uncertainty(&random_image(7, 5, 1), &MockDepthEstimator::default()).unwrap();
        assert!(du.values().iter().all(|v| *v == 0.0));
        let mask = validity_mask(&du, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(mask.valid_fraction(), 1.0);
    }

    #[test]
    fn ramp_bias_invalidates_edge_columns() {
        let img = RgbImage::filled(2, 3, [0.3; 3]).unwrap();
        let est = BiasedDepthEstimator::new("b", 0.8).unwrap();
        let du = depth_uncertainty(&img, &est).unwrap();
        for v in du.values() {
            assert!((v - 0.16).abs() < 1e-12);
        }
        let mask = validity_mask(&du, 0.15).unwrap();
        assert_eq!(mask.valid_fraction(), 0.0);
    }

    #[test]
    fn mask_examples() {
        let du = UncertaintyMap::new(2, 1, vec![0.01, 0.16]).unwrap();
        let m = validity_mask(&du, 0.15).unwrap();
        assert_eq!(m.bits(), &[true, false]);
        assert_eq!(m.valid_fraction(), 0.5);
        assert!(matches!(validity_mask(&du, 0.0), Err(Error::NonPositiveThreshold(_))));
        assert!(matches!(validity_mask(&du, -1.0), Err(Error::NonPositiveThreshold(_))));
    }

    #[test]
    fn threshold_is_strict() {
        let du = UncertaintyMap::new(1, 1, vec![0.15]).unwrap();
        assert_eq!(validity_mask(&du, 0.15).unwrap().bits(), &[false]);
    }

    #[test]
    fn mask_and_uncertainty_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let du = UncertaintyMap::new(3, 2, vec![0.0, 0.01, 0.16, 0.25, 0.1, 0.2]).unwrap();
        let mask = validity_mask(&du, 0.15).unwrap();
        save_mask(&mask, dir.path().join("m.png")).unwrap();
        assert_eq!(load_mask(dir.path().join("m.png")).unwrap(), mask);
        save_uncertainty(&du, dir.path().join("u.png")).unwrap();
        let back = load_uncertainty(dir.path().join("u.png")).unwrap();
        for (a, b) in du.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 0.5 / 65535.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn symmetric_and_bounded(a in proptest::collection::vec(0.0f64..=1.0, 1..40), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.gen()).collect();
            let (ma, mb) = (inv(&a), inv(&b));
            let ab = uncertainty_from_estimates(&ma, &mb, VarianceKind::Population).unwrap();
            let ba = uncertainty_from_estimates(&mb, &ma, VarianceKind::Population).unwrap();
            prop_assert_eq!(&ab, &ba);
            prop_assert!(ab.values().iter().all(|v| (0.0..=0.25).contains(v)));
        }

        #[test]
        fn flip_symmetry_of_construction(w in 1usize..9, h in 1usize..6, seed in any::<u64>(), amp in 0.0f64..1.0) {
            let img = random_image(w, h, seed);
            let est = BiasedDepthEstimator::new("b", amp).unwrap();
            let du = depth_uncertainty(&img, &est).unwrap();
            let flipped = depth_uncertainty(&img.hflip(), &est).unwrap();
            prop_assert_eq!(flipped, du.hflip());
        }

        #[test]
        fn mask_monotone_in_threshold(
            values in proptest::collection::vec(0.0f64..=0.25, 1..50),
            t1 in 0.001f64..0.3,
            dt in 0.0f64..0.3,
        ) {
            let du = UncertaintyMap::new(values.len(), 1, values).unwrap();
            let low = validity_mask(&du, t1).unwrap();
            let high = validity_mask(&du, t1 + dt).unwrap();
            for (l, h) in low.bits().iter().zip(high.bits()) {
                prop_assert!(!*l || *h);
            }
        }
    }
}
