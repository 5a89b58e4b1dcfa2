//! Depth representations: arbitrary-scale inverse relative depth (larger is
//! nearer) and capped metric depth in meters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{check_dims, hflip_interleaved};

/// Default metric cap in meters.
pub const DEFAULT_CAP_M: f64 = 20.0;

/// Read access shared by every single-channel depth raster.
pub trait DepthRaster {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn values(&self) -> &[f64];

    fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseRelativeDepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl InverseRelativeDepthMap {
    /// Raw estimator output: finite and nonnegative, any scale.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len())?;
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidValue(format!("inverse depth {v} is not finite and >= 0")));
        }
        Ok(Self { width, height, data, normalized: false })
    }

    /// A map already on the unit scale. Values must lie in `[0, 1]`.
    pub fn new_normalized(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let mut map = Self::new(width, height, data)?;
        if let Some(v) = map.data.iter().find(|v| **v > 1.0) {
            return Err(Error::InvalidValue(format!("normalized inverse depth {v} exceeds 1")));
        }
        map.normalized = true;
        Ok(map)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    /// Min-max rescale onto `[0, 1]`. A constant map becomes all zeros (farthest).
    pub fn normalized(&self) -> Self {
        let (lo, hi) = min_max(&self.data);
        let data = if hi > lo {
            let span = hi - lo;
            self.data.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Self { width: self.width, height: self.height, data, normalized: true }
    }

    /// Returns `self` unchanged when it is already on the unit scale, otherwise
    /// its min-max normalization.
    pub fn to_unit_scale(&self) -> Self {
        if self.normalized {
            self.clone()
        } else {
            self.normalized()
        }
    }

    pub fn hflip(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: hflip_interleaved(&self.data, self.width, self.height, 1),
            normalized: self.normalized,
        }
    }

    /// Block-mean downsampling by an integer factor; trailing rows/columns that
    /// do not fill a block are dropped.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let data = downsample_mean(&self.data, self.width, self.height, factor)?;
        Ok(Self {
            width: self.width / factor,
            height: self.height / factor,
            data,
            normalized: self.normalized,
        })
    }
}

impl DepthRaster for InverseRelativeDepthMap {
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

/// Depth in meters, every value in `(0, cap_m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricDepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
    cap_m: f64,
}

impl MetricDepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>, cap_m: f64) -> Result<Self> {
        check_len(width, height, data.len())?;
        if !(cap_m.is_finite() && cap_m > 0.0) {
            return Err(Error::InvalidValue(format!("depth cap {cap_m} must be positive")));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v > 0.0 && **v <= cap_m)) {
            return Err(Error::InvalidValue(format!(
                "metric depth {v} outside (0, {cap_m}]"
            )));
        }
        Ok(Self { width, height, data, cap_m })
    }

    pub fn with_default_cap(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(width, height, data, DEFAULT_CAP_M)
    }

    pub fn filled(width: usize, height: usize, depth_m: f64, cap_m: f64) -> Result<Self> {
        Self::new(width, height, vec![depth_m; width * height], cap_m)
    }

    pub fn cap_m(&self) -> f64 {
        self.cap_m
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    pub fn hflip(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: hflip_interleaved(&self.data, self.width, self.height, 1),
            cap_m: self.cap_m,
        }
    }

    /// Rounds every value to the nearest millimeter (never below 1 mm).
    pub fn quantized_mm(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|v| ((v * 1000.0).round().max(1.0) / 1000.0).min(self.cap_m))
            .collect();
        Self { data, ..self.clone() }
    }
}

impl DepthRaster for MetricDepthMap {
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

/// Unvalidated depth, e.g. ground truth with holes encoded as zero or NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDepth {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RawDepth {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len())?;
        Ok(Self { width, height, data })
    }
}

impl DepthRaster for RawDepth {
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

impl From<MetricDepthMap> for RawDepth {
    fn from(m: MetricDepthMap) -> Self {
        Self { width: m.width, height: m.height, data: m.data }
    }
}

/// Either depth representation, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum DepthMap {
    Inverse(InverseRelativeDepthMap),
    Metric(MetricDepthMap),
}

impl DepthMap {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            DepthMap::Inverse(m) => m.dims(),
            DepthMap::Metric(m) => m.dims(),
        }
    }

    pub fn into_inverse(self) -> Option<InverseRelativeDepthMap> {
        match self {
            DepthMap::Inverse(m) => Some(m),
            DepthMap::Metric(_) => None,
        }
    }

    pub fn into_metric(self) -> Option<MetricDepthMap> {
        match self {
            DepthMap::Metric(m) => Some(m),
            DepthMap::Inverse(_) => None,
        }
    }
}

/// How a depth map encodes distance, recorded in provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthKind {
    InverseRelative,
    Metric,
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    check_dims(width, height)?;
    if len != width * height {
        return Err(Error::ShapeMismatch(format!(
            "{width}x{height} depth map needs {} values, got {len}",
            width * height
        )));
    }
    Ok(())
}

pub(crate) fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
}

pub(crate) fn downsample_mean(
    data: &[f64],
    width: usize,
    height: usize,
    factor: usize,
) -> Result<Vec<f64>> {
    if factor == 0 || width / factor == 0 || height / factor == 0 {
        return Err(Error::ShapeMismatch(format!(
            "cannot downsample {width}x{height} by {factor}"
        )));
    }
    if factor == 1 {
        return Ok(data.to_vec());
    }
    let (w, h) = (width / factor, height / factor);
    let norm = (factor * factor) as f64;
    let mut out = Vec::with_capacity(w * h);
    for by in 0..h {
        for bx in 0..w {
            let mut acc = 0.0;
            for y in by * factor..(by + 1) * factor {
                for x in bx * factor..(bx + 1) * factor {
                    acc += data[y * width + x];
                }
            }
            out.push(acc / norm);
        }
    }
    Ok(out)
}
