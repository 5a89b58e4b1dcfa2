//! Raster and depth file codecs.
//!
//! Color images load from 8/16-bit PNG or JPEG into linear `[0, 1]` floats.
//! Depth maps are written as 16-bit grayscale PNG next to a JSON sidecar
//! (`<stem>.json`) describing how the integers map back to depth:
//!
//! * inverse relative depth: `round(n * 65535)` of the unit-scale map; maps that
//!   were not already normalized are min-max normalized first and the sidecar
//!   keeps the original range so decoding restores it.
//! * metric depth: millimeters, `round(d * 1000)`, which bounds values to
//!   65.535 m.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageError, Rgb};
use serde::{Deserialize, Serialize};

use crate::depth::{min_max, DepthMap, DepthRaster, InverseRelativeDepthMap, MetricDepthMap, RawDepth};
use crate::error::{Error, Result};
use crate::raster::RgbImage;

pub const INVERSE_SCALE: f64 = 65535.0;
pub const METRIC_SCALE: f64 = 1000.0;
pub const MAX_METRIC_M: f64 = u16::MAX as f64 / METRIC_SCALE;

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Accept single-channel rasters by copying luma into R, G and B.
    pub replicate_gray: bool,
}

pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    load_image_with(path, LoadOptions::default())
}

pub fn load_image_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<RgbImage> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageRgb8(b) => b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageRgba8(_) => img
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
        DynamicImage::ImageRgb16(b) => {
            b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
        }
        DynamicImage::ImageRgba16(_) => img
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            if !opts.replicate_gray {
                return Err(Error::NonRgb(path.to_path_buf()));
            }
            img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
        }
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            if !opts.replicate_gray {
                return Err(Error::NonRgb(path.to_path_buf()));
            }
            img.to_rgb16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
        }
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("pixel layout {:?}", other.color()),
            })
        }
    };
    RgbImage::new(w, h, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageBitDepth {
    Eight,
    Sixteen,
}

/// Writes an RGB raster; the container is picked from the file extension.
pub fn save_image(img: &RgbImage, path: impl AsRef<Path>, depth: ImageBitDepth) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let result = match depth {
        ImageBitDepth::Eight => {
            let raw = img.data().iter().map(|v| (v * 255.0).round() as u8).collect();
            ImageBuffer::<Rgb<u8>, Vec<u8>>::from_raw(w, h, raw)
                .expect("buffer length matches dimensions")
                .save(path)
        }
        ImageBitDepth::Sixteen => {
            let raw = img.data().iter().map(|v| (v * 65535.0).round() as u16).collect();
            ImageBuffer::<Rgb<u16>, Vec<u16>>::from_raw(w, h, raw)
                .expect("buffer length matches dimensions")
                .save(path)
        }
    };
    result.map_err(|e| image_error(path, e))
}

fn image_error(path: &Path, e: ImageError) -> Error {
    match e {
        ImageError::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedFormat { path: path.to_path_buf(), reason: other.to_string() },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthEncoding {
    InverseRelativeU16,
    MetricMmU16,
}

/// Metadata written next to every depth PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSidecar {
    pub encoding: DepthEncoding,
    pub width: usize,
    pub height: usize,
    /// Integer steps per unit (65535 per unit inverse depth, 1000 per meter).
    pub scale: f64,
    pub cap_m: Option<f64>,
    /// Range of the map that was encoded, before quantization.
    pub min: f64,
    pub max: f64,
    /// Whether the encoded inverse map was on the unit scale already.
    pub normalized: bool,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode_depth(map: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (width, height) = map.dims();
    let (stored, sidecar): (Vec<u16>, DepthSidecar) = match map {
        DepthMap::Inverse(m) => {
            let (lo, hi) = min_max(m.values());
            let unit = m.to_unit_scale();
            let stored = unit.values().iter().map(|v| (v * INVERSE_SCALE).round() as u16).collect();
            let sidecar = DepthSidecar {
                encoding: DepthEncoding::InverseRelativeU16,
                width,
                height,
                scale: INVERSE_SCALE,
                cap_m: None,
                min: lo,
                max: hi,
                normalized: m.is_normalized(),
            };
            (stored, sidecar)
        }
        DepthMap::Metric(m) => {
            let (lo, hi) = min_max(m.values());
            if hi > MAX_METRIC_M {
                return Err(Error::RangeOverflow { value: hi });
            }
            let stored = m
                .values()
                .iter()
                .map(|v| ((v * METRIC_SCALE).round() as u16).max(1))
                .collect();
            let sidecar = DepthSidecar {
                encoding: DepthEncoding::MetricMmU16,
                width,
                height,
                scale: METRIC_SCALE,
                cap_m: Some(m.cap_m()),
                min: lo,
                max: hi,
                normalized: false,
            };
            (stored, sidecar)
        }
    };
    write_gray16(path, width, height, &stored)?;
    write_json(&sidecar_path(path), &sidecar)
}

pub fn encode_inverse(map: &InverseRelativeDepthMap, path: impl AsRef<Path>) -> Result<()> {
    encode_depth(&DepthMap::Inverse(map.clone()), path)
}

pub fn encode_metric(map: &MetricDepthMap, path: impl AsRef<Path>) -> Result<()> {
    encode_depth(&DepthMap::Metric(map.clone()), path)
}

pub fn read_depth_sidecar(path: impl AsRef<Path>) -> Result<DepthSidecar> {
    let side = sidecar_path(path.as_ref());
    if !side.is_file() {
        return Err(Error::MissingSidecar(side));
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::CorruptSidecar { path: side, reason: e.to_string() })
}

pub fn decode_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let sidecar = read_depth_sidecar(path)?;
    let (w, h, stored) = read_gray16(path)?;
    let corrupt = |reason: String| Error::CorruptSidecar { path: sidecar_path(path), reason };
    if (w, h) != (sidecar.width, sidecar.height) {
        return Err(corrupt(format!(
            "sidecar says {}x{}, image is {w}x{h}",
            sidecar.width, sidecar.height
        )));
    }
    match sidecar.encoding {
        DepthEncoding::InverseRelativeU16 => {
            let unit: Vec<f64> = stored.iter().map(|k| *k as f64 / INVERSE_SCALE).collect();
            if sidecar.normalized {
                Ok(DepthMap::Inverse(InverseRelativeDepthMap::new_normalized(w, h, unit)?))
            } else {
                let (lo, hi) = (sidecar.min, sidecar.max);
                if !(lo.is_finite() && hi.is_finite() && hi >= lo && lo >= 0.0) {
                    return Err(corrupt(format!("invalid range [{lo}, {hi}]")));
                }
                let data = unit.into_iter().map(|n| lo + n * (hi - lo)).collect();
                Ok(DepthMap::Inverse(InverseRelativeDepthMap::new(w, h, data)?))
            }
        }
        DepthEncoding::MetricMmU16 => {
            let cap = sidecar.cap_m.ok_or_else(|| corrupt("metric sidecar without cap_m".into()))?;
            let data = stored.iter().map(|k| (*k as f64 / METRIC_SCALE).min(cap)).collect();
            MetricDepthMap::new(w, h, data, cap)
                .map(DepthMap::Metric)
                .map_err(|e| corrupt(e.to_string()))
        }
    }
}

pub fn decode_inverse(path: impl AsRef<Path>) -> Result<InverseRelativeDepthMap> {
    let path = path.as_ref();
    decode_depth(path)?.into_inverse().ok_or_else(|| Error::CorruptSidecar {
        path: sidecar_path(path),
        reason: "expected an inverse relative depth map".into(),
    })
}

pub fn decode_metric(path: impl AsRef<Path>) -> Result<MetricDepthMap> {
    let path = path.as_ref();
    decode_depth(path)?.into_metric().ok_or_else(|| Error::CorruptSidecar {
        path: sidecar_path(path),
        reason: "expected a metric depth map".into(),
    })
}

/// Ground-truth depth with holes: non-finite or non-positive values are stored
/// as 0 and read back as 0.
pub fn encode_metric_raw(map: &RawDepth, cap_m: f64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let valid: Vec<f64> = map.data.iter().copied().filter(|v| v.is_finite() && *v > 0.0).collect();
    let (lo, hi) = if valid.is_empty() { (0.0, 0.0) } else { min_max(&valid) };
    if hi > MAX_METRIC_M {
        return Err(Error::RangeOverflow { value: hi });
    }
    let stored: Vec<u16> = map
        .data
        .iter()
        .map(|v| if v.is_finite() && *v > 0.0 { ((v * METRIC_SCALE).round() as u16).max(1) } else { 0 })
        .collect();
    let sidecar = DepthSidecar {
        encoding: DepthEncoding::MetricMmU16,
        width: map.width,
        height: map.height,
        scale: METRIC_SCALE,
        cap_m: Some(cap_m),
        min: lo,
        max: hi,
        normalized: false,
    };
    write_gray16(path, map.width, map.height, &stored)?;
    write_json(&sidecar_path(path), &sidecar)
}

/// Reads a metric depth file without validation; stored zeros stay 0.
pub fn decode_metric_raw(path: impl AsRef<Path>) -> Result<RawDepth> {
    let path = path.as_ref();
    let sidecar = read_depth_sidecar(path)?;
    if sidecar.encoding != DepthEncoding::MetricMmU16 {
        return Err(Error::CorruptSidecar {
            path: sidecar_path(path),
            reason: "expected a metric depth map".into(),
        });
    }
    let (w, h, stored) = read_gray16(path)?;
    if (w, h) != (sidecar.width, sidecar.height) {
        return Err(Error::CorruptSidecar { path: sidecar_path(path), reason: "size mismatch".into() });
    }
    RawDepth::new(w, h, stored.iter().map(|k| *k as f64 / sidecar.scale).collect())
}

pub(crate) fn write_gray16(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

pub(crate) fn read_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let (info, buf) = read_png(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("expected 16-bit grayscale, got {:?} {:?}", info.color_type, info.bit_depth),
        });
    }
    let values = buf.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    Ok((info.width as usize, info.height as usize, values))
}

/// 1-bit grayscale PNG; `true` is stored as white.
pub fn write_bitmask(path: impl AsRef<Path>, width: usize, height: usize, bits: &[bool]) -> Result<()> {
    let row_bytes = width.div_ceil(8);
    let mut bytes = vec![0u8; row_bytes * height];
    for y in 0..height {
        for x in 0..width {
            if bits[y * width + x] {
                bytes[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    write_png(path.as_ref(), width, height, png::ColorType::Grayscale, png::BitDepth::One, &bytes)
}

pub fn read_bitmask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<bool>)> {
    let path = path.as_ref();
    let (info, buf) = read_png(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::One {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "expected a 1-bit grayscale mask".into(),
        });
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let row_bytes = info.line_size;
    let bits = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| buf[y * row_bytes + x / 8] & (0x80 >> (x % 8)) != 0)
        .collect();
    Ok((w, h, bits))
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let png_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedFormat { path: path.to_path_buf(), reason: other.to_string() },
    };
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

fn read_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let bad = |e: png::DecodingError| match e {
        png::DecodingError::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedFormat { path: path.to_path_buf(), reason: other.to_string() },
    };
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        reason: "image too large".into(),
    })?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable sidecar");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::CorruptSidecar { path: path.to_path_buf(), reason: e.to_string() })
}
