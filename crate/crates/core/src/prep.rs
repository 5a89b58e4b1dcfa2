//! Pseudo-labelling and captioning a directory of underwater images into
//! {image, depth, caption} triplets.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::backends::{Caption, Captioner, DepthEstimator};
use crate::codec::{self, encode_inverse};
use crate::depth::{DepthRaster, InverseRelativeDepthMap};
use crate::error::{Error, Result};
use crate::manifest::{sha256_file, ContentId, Manifest, ManifestRecord, RecordKind};
use crate::raster::RgbImage;
use crate::stage::{map_items, ItemFailure, StageContext};

const OP_VERSION: u32 = 1;

/// Normalized estimator output with the image's dimensions.
pub fn pseudo_label_depth(image: &RgbImage, backend: &dyn DepthEstimator) -> Result<InverseRelativeDepthMap> {
    let raw = backend.estimate(image)?;
    if raw.dims() != image.dims() {
        return Err(Error::backend(
            backend.id(),
            None,
            format!("estimate is {:?}, image is {:?}", raw.dims(), image.dims()),
        ));
    }
    Ok(raw.normalized())
}

pub fn caption_image(image: &RgbImage, backend: &dyn Captioner) -> Result<Caption> {
    let text = backend.caption(image)?;
    Caption::new(text).ok_or_else(|| Error::EmptyCaption(backend.id().to_string()))
}

/// Regular, non-hidden files directly inside `dir` accepted by `keep`, sorted
/// by file name.
pub fn list_input_files(dir: &Path, keep: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let hidden = path.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'));
        if path.is_file() && !hidden && keep(&path) {
            files.push(path);
        }
    }
    if files.is_empty() {
        return Err(Error::EmptyInputDir(dir.to_path_buf()));
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TripletBuildReport {
    pub inputs: usize,
    pub success: usize,
    pub failed: usize,
    /// Successes whose records were already in the manifest.
    pub reused: usize,
    pub failures: Vec<ItemFailure>,
}

struct Labelled {
    src_id: String,
    depth_id: String,
    caption_id: String,
    triplet_id: String,
    image: RgbImage,
    depth: InverseRelativeDepthMap,
    caption: Caption,
}

pub fn build_triplets(
    image_dir: &Path,
    estimator: &dyn DepthEstimator,
    captioner: &dyn Captioner,
    out_manifest: &Path,
    ctx: &StageContext,
) -> Result<TripletBuildReport> {
    let files = list_input_files(image_dir, |_| true)?;
    let mut out = Manifest::create(out_manifest)?;
    let out_dir = out.dir();
    let depth_dir = out_dir.join("depth");
    let caption_dir = out_dir.join("captions");
    for d in [&depth_dir, &caption_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let parallel = estimator.reentrant() && captioner.reentrant();
    let labelled = map_items(&files, ctx.jobs, parallel, |path| {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let with_item = |e: Error| match e {
            Error::BackendFailure { backend_id, reason, .. } => {
                Error::BackendFailure { backend_id, item: Some(name.clone()), reason }
            }
            other => other,
        };
        let image = codec::load_image(path)?;
        let digest = sha256_file(path)?;
        let src_id = ContentId::new("src", OP_VERSION).field("sha256", &digest).finish();
        let depth = pseudo_label_depth(&image, estimator).map_err(with_item)?;
        let caption = caption_image(&image, captioner).map_err(with_item)?;
        let depth_id = ContentId::new("depth", OP_VERSION)
            .field("source", &src_id)
            .field("estimator", estimator.id())
            .finish();
        let caption_id = ContentId::new("caption", OP_VERSION)
            .field("source", &src_id)
            .field("captioner", captioner.id())
            .finish();
        let triplet_id = ContentId::new("triplet", OP_VERSION)
            .field("image", &src_id)
            .field("depth", &depth_id)
            .field("caption", &caption_id)
            .finish();
        Ok::<_, Error>(Labelled { src_id, depth_id, caption_id, triplet_id, image, depth, caption })
    });

    let mut report = TripletBuildReport { inputs: files.len(), ..Default::default() };
    for (path, result) in files.iter().zip(labelled) {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let l = match result {
            Ok(l) => l,
            Err(e) => {
                report.failed += 1;
                report.failures.push(ItemFailure::new(name, e));
                continue;
            }
        };
        report.success += 1;
        if out.contains(&l.triplet_id) {
            report.reused += 1;
            continue;
        }
        let (w, h) = l.image.dims();
        let depth_path = depth_dir.join(format!("{}.png", l.depth_id));
        let caption_path = caption_dir.join(format!("{}.txt", l.caption_id));
        if !out.contains(&l.src_id) {
            out.append(
                ManifestRecord::new(&l.src_id, RecordKind::SourceImage, ctx.clock)
                    .with_artifact("image", path, &out_dir)?
                    .with_param("file_name", name.as_str())
                    .with_param("width", w as u64)
                    .with_param("height", h as u64),
            )?;
        }
        if !out.contains(&l.depth_id) {
            encode_inverse(&l.depth, &depth_path)?;
            out.append(
                ManifestRecord::new(&l.depth_id, RecordKind::Depth, ctx.clock)
                    .with_artifact("depth", &depth_path, &out_dir)?
                    .with_param("source_id", l.src_id.as_str())
                    .with_param("estimator_id", estimator.id())
                    .with_param("convention", "normalized_inverse_relative")
                    .with_param("width", w as u64)
                    .with_param("height", h as u64),
            )?;
        }
        if !out.contains(&l.caption_id) {
            std::fs::write(&caption_path, l.caption.as_str()).map_err(|e| Error::io(&caption_path, e))?;
            out.append(
                ManifestRecord::new(&l.caption_id, RecordKind::Caption, ctx.clock)
                    .with_artifact("caption", &caption_path, &out_dir)?
                    .with_param("source_id", l.src_id.as_str())
                    .with_param("captioner_id", captioner.id())
                    .with_param("text", l.caption.as_str()),
            )?;
        }
        out.append(
            ManifestRecord::new(&l.triplet_id, RecordKind::Triplet, ctx.clock)
                .with_artifact("image", path, &out_dir)?
                .with_artifact("depth", &depth_path, &out_dir)?
                .with_artifact("caption", &caption_path, &out_dir)?
                .with_param("image_ref", l.src_id.as_str())
                .with_param("depth_ref", l.depth_id.as_str())
                .with_param("caption_ref", l.caption_id.as_str())
                .with_param("estimator_id", estimator.id())
                .with_param("captioner_id", captioner.id()),
        )?;
    }
    Ok(report)
}
