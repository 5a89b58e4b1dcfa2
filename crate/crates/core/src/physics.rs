//! Underwater image formation and depth-driven dewatering.
//!
//! Per channel `c` at range `z` (meters):
//!
//! ```text
//! I_c = J_c * exp(-beta_d_c * z) + b_inf_c * (1 - exp(-beta_b_c * z))
//! ```
//!
//! Dewatering fits the backscatter curve to the darkest pixels in each depth
//! bin, subtracts it, estimates the remaining attenuation and divides it out.

use serde::{Deserialize, Serialize};

use crate::depth::{DepthRaster, MetricDepthMap};
use crate::error::{Error, Result};
use crate::raster::RgbImage;

pub const BETA_MAX: f64 = 5.0;
const BETA_START_MIN: f64 = 0.05;
const N_STARTS: usize = 8;
const ILLUMINATION_GAIN: f64 = 2.0;
const ILLUMINATION_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaterProperties {
    pub beta_d: [f64; 3],
    pub beta_b: [f64; 3],
    pub b_inf: [f64; 3],
}

impl WaterProperties {
    pub fn validate(&self) -> Result<()> {
        let betas = self.beta_d.iter().chain(&self.beta_b);
        if let Some(b) = betas.clone().find(|b| !(b.is_finite() && **b >= 0.0)) {
            return Err(Error::InvalidValue(format!("attenuation coefficient {b} must be finite and >= 0")));
        }
        if let Some(b) = self.b_inf.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::InvalidValue(format!("veiling light {b} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaterPreset {
    pub name: String,
    /// "blue" or "green": the least attenuated channel.
    pub dominant: String,
    #[serde(flatten)]
    pub water: WaterProperties,
}

#[derive(Deserialize)]
struct PresetFile {
    presets: Vec<WaterPreset>,
}

/// The bundled water types, from clear oceanic to turbid coastal. The
/// coefficients are illustrative, not measured.
pub fn water_type_presets() -> Vec<WaterPreset> {
    let file: PresetFile =
        serde_json::from_str(include_str!("water_types.json")).expect("bundled presets parse");
    file.presets
}

pub fn water_preset(name: &str) -> Option<WaterPreset> {
    water_type_presets().into_iter().find(|p| p.name.eq_ignore_ascii_case(name))
}

fn check_same_dims(img: &RgbImage, depth: &dyn DepthRaster) -> Result<()> {
    if img.dims() != depth.dims() {
        return Err(Error::ShapeMismatch(format!("image {:?} vs depth {:?}", img.dims(), depth.dims())));
    }
    Ok(())
}

pub fn synthesize_underwater(j: &RgbImage, depth: &MetricDepthMap, water: &WaterProperties) -> Result<RgbImage> {
    synthesize_at(j, depth.values(), depth.width(), depth.height(), water)
}

/// Like [`synthesize_underwater`] for arbitrary non-negative ranges (no cap).
pub fn synthesize_at(j: &RgbImage, z: &[f64], width: usize, height: usize, water: &WaterProperties) -> Result<RgbImage> {
    water.validate()?;
    if j.dims() != (width, height) || z.len() != width * height {
        return Err(Error::ShapeMismatch(format!("image {:?} vs depth {width}x{height}", j.dims())));
    }
    let mut out = Vec::with_capacity(j.data().len());
    for (px, z) in j.data().chunks_exact(3).zip(z) {
        for c in 0..3 {
            let direct = px[c] * (-water.beta_d[c] * z).exp();
            let back = water.b_inf[c] * (1.0 - (-water.beta_b[c] * z).exp());
            out.push((direct + back).clamp(0.0, 1.0));
        }
    }
    RgbImage::new(width, height, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelFit {
    pub b_inf: f64,
    pub beta_b: f64,
    pub j_prime: f64,
    pub beta_d_prime: f64,
    pub rms_residual: f64,
    pub n_points: usize,
}

impl ChannelFit {
    /// Full fitted curve, including the residual direct term.
    pub fn eval(&self, z: f64) -> f64 {
        self.backscatter(z) + self.j_prime * (-self.beta_d_prime * z).exp()
    }

    /// The backscatter part alone, `b_inf * (1 - exp(-beta_b * z))`.
    pub fn backscatter(&self, z: f64) -> f64 {
        self.b_inf * (1.0 - (-self.beta_b * z).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackscatterFit {
    pub channels: [ChannelFit; 3],
    pub rms_residual: f64,
    pub n_points: usize,
}

impl BackscatterFit {
    /// Exact backscatter of known water (no residual direct term).
    pub fn from_water(water: &WaterProperties) -> Self {
        let ch = |c: usize| ChannelFit {
            b_inf: water.b_inf[c],
            beta_b: water.beta_b[c],
            j_prime: 0.0,
            beta_d_prime: 0.0,
            rms_residual: 0.0,
            n_points: 0,
        };
        Self { channels: [ch(0), ch(1), ch(2)], rms_residual: 0.0, n_points: 0 }
    }
}

/// Darkest `percentile` fraction of each channel within each of `n_bins`
/// equal-width depth bins, as `(z, value)` samples per channel.
pub fn backscatter_samples(
    image: &RgbImage,
    depth: &MetricDepthMap,
    n_bins: usize,
    percentile: f64,
) -> Result<[Vec<(f64, f64)>; 3]> {
    check_same_dims(image, depth)?;
    if n_bins < 2 {
        return Err(Error::InvalidConfig(format!("n_bins must be >= 2, got {n_bins}")));
    }
    if !(percentile > 0.0 && percentile <= 0.5) {
        return Err(Error::InvalidConfig(format!("percentile must be in (0, 0.5], got {percentile}")));
    }
    let z = depth.values();
    let (lo, hi) = crate::depth::min_max(z);
    if !(hi - lo > 1e-9 * hi.max(1.0)) {
        return Err(Error::DegenerateDepth(format!("depth range [{lo}, {hi}] is degenerate")));
    }
    let width = (hi - lo) / n_bins as f64;
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (i, zi) in z.iter().enumerate() {
        let b = (((zi - lo) / width) as usize).min(n_bins - 1);
        bins[b].push(i);
    }
    let occupied = bins.iter().filter(|b| !b.is_empty()).count();
    if occupied < 2 {
        return Err(Error::DegenerateDepth("a single depth bin is occupied".into()));
    }
    let data = image.data();
    let mut out: [Vec<(f64, f64)>; 3] = Default::default();
    for members in bins.iter().filter(|b| !b.is_empty()) {
        let take = ((percentile * members.len() as f64).ceil() as usize).max(1);
        for (c, samples) in out.iter_mut().enumerate() {
            let mut vals: Vec<(f64, f64)> = members.iter().map(|i| (data[i * 3 + c], z[*i])).collect();
            vals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            samples.extend(vals.into_iter().take(take).map(|(v, zi)| (zi, v)));
        }
    }
    Ok(out)
}

pub fn estimate_backscatter(
    image: &RgbImage,
    depth: &MetricDepthMap,
    n_bins: usize,
    percentile: f64,
) -> Result<BackscatterFit> {
    let samples = backscatter_samples(image, depth, n_bins, percentile)?;
    let fits = [
        fit_backscatter_curve(&samples[0])?,
        fit_backscatter_curve(&samples[1])?,
        fit_backscatter_curve(&samples[2])?,
    ];
    let n: usize = fits.iter().map(|f| f.n_points).sum();
    let sse: f64 = fits.iter().map(|f| f.rms_residual.powi(2) * f.n_points as f64).sum();
    Ok(BackscatterFit { channels: fits, rms_residual: (sse / n as f64).sqrt(), n_points: n })
}

const LOWER: [f64; 4] = [0.0, 0.0, 0.0, 0.0];
const UPPER: [f64; 4] = [1.0, BETA_MAX, 1.0, BETA_MAX];

fn model(t: &[f64; 4], z: f64) -> f64 {
    t[0] * (1.0 - (-t[1] * z).exp()) + t[2] * (-t[3] * z).exp()
}

fn sse(t: &[f64; 4], pts: &[(f64, f64)]) -> f64 {
    pts.iter().map(|(z, y)| (model(t, *z) - y).powi(2)).sum()
}

fn clamp_params(t: [f64; 4]) -> [f64; 4] {
    let mut out = t;
    for i in 0..4 {
        out[i] = if out[i].is_nan() { LOWER[i] } else { out[i].clamp(LOWER[i], UPPER[i]) };
    }
    out
}

/// Solves `a x = b` for a small dense system by Gaussian elimination with
/// partial pivoting.
fn solve<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    for col in 0..N {
        let piv = (col..N).max_by(|i, j| a[*i][col].abs().total_cmp(&a[*j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..N {
            let f = a[row][col] / a[col][col];
            for k in col..N {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let s: f64 = (row + 1..N).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Linear least squares for `b_inf` and `j_prime` with both betas fixed.
fn linear_start(beta_b: f64, beta_d: f64, pts: &[(f64, f64)]) -> [f64; 4] {
    let (mut aa, mut ab, mut bb, mut ay, mut by) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (z, y) in pts {
        let u = 1.0 - (-beta_b * z).exp();
        let v = (-beta_d * z).exp();
        aa += u * u;
        ab += u * v;
        bb += v * v;
        ay += u * y;
        by += v * y;
    }
    let (b_inf, j) = match solve([[aa, ab], [ab, bb]], [ay, by]) {
        Some([x, y]) => (x, y),
        None => (pts.iter().map(|p| p.1).fold(0.0, f64::max), 0.0),
    };
    clamp_params([b_inf, beta_b, j, beta_d])
}

fn levenberg_marquardt(start: [f64; 4], pts: &[(f64, f64)]) -> ([f64; 4], f64) {
    let mut t = start;
    let mut cost = sse(&t, pts);
    let mut lambda = 1e-3;
    for _ in 0..2000 {
        if cost < 1e-30 {
            break;
        }
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (z, y) in pts {
            let eb = (-t[1] * z).exp();
            let ed = (-t[3] * z).exp();
            let g = [1.0 - eb, t[0] * z * eb, ed, -t[2] * z * ed];
            let r = model(&t, *z) - y;
            for i in 0..4 {
                jtr[i] += g[i] * r;
                for k in 0..4 {
                    jtj[i][k] += g[i] * g[k];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e16 {
            let mut a = jtj;
            for (i, row) in a.iter_mut().enumerate() {
                row[i] += lambda * (jtj[i][i] + 1e-12);
            }
            let neg: [f64; 4] = jtr.map(|v| -v);
            let Some(step) = solve(a, neg) else {
                lambda *= 4.0;
                continue;
            };
            let cand = clamp_params([t[0] + step[0], t[1] + step[1], t[2] + step[2], t[3] + step[3]]);
            let c = sse(&cand, pts);
            if c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                let moved = cand.iter().zip(&t).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                t = cand;
                cost = c;
                lambda = (lambda / 3.0).max(1e-15);
                improved = rel > 1e-16 && moved > 1e-15;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    (t, cost)
}

/// Bounded least-squares fit of `b_inf (1 - e^{-beta_b z}) + j' e^{-beta_d' z}`
/// from 8 starts on a log-spaced beta grid; the lowest residual wins.
pub fn fit_backscatter_curve(samples: &[(f64, f64)]) -> Result<ChannelFit> {
    if samples.is_empty() {
        return Err(Error::FitFailure("no samples".into()));
    }
    if samples.iter().any(|(z, y)| !(z.is_finite() && y.is_finite())) {
        return Err(Error::FitFailure("non-finite sample".into()));
    }
    let mut best: Option<([f64; 4], f64)> = None;
    for k in 0..N_STARTS {
        let beta = BETA_START_MIN * (BETA_MAX / BETA_START_MIN).powf(k as f64 / (N_STARTS - 1) as f64);
        let (t, cost) = levenberg_marquardt(linear_start(beta, beta, samples), samples);
        if cost.is_finite() && best.is_none_or(|(_, c)| cost < c) {
            best = Some((t, cost));
        }
    }
    let (t, cost) = best.ok_or_else(|| Error::FitFailure("no start converged".into()))?;
    Ok(ChannelFit {
        b_inf: t[0],
        beta_b: t[1],
        j_prime: t[2],
        beta_d_prime: t[3],
        rms_residual: (cost / samples.len() as f64).sqrt(),
        n_points: samples.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IlluminationMap {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB illuminant estimate (gain applied).
    pub data: Vec<f64>,
    pub iterations: usize,
    /// Largest per-pixel change in the final iteration.
    pub residual: f64,
}

/// Local space average color of `direct` (interleaved RGB, any non-negative
/// values), times 2. Iterates 4-neighbor averaging blended with the input
/// until the largest change drops below `eps`.
pub fn local_space_average_color(
    direct: &[f64],
    width: usize,
    height: usize,
    p: f64,
    eps: f64,
) -> Result<IlluminationMap> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidConfig(format!("p must be in (0, 1], got {p}")));
    }
    if direct.len() != width * height * 3 {
        return Err(Error::ShapeMismatch(format!("{width}x{height} RGB needs {} values", width * height * 3)));
    }
    let mut a = direct.to_vec();
    let mut next = vec![0.0; a.len()];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let idx = |x: usize, y: usize, c: usize| (y * width + x) * 3 + c;
    while residual >= eps {
        iterations += 1;
        residual = 0.0;
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    let mut sum = 0.0;
                    let mut n = 0.0;
                    if x > 0 {
                        sum += a[idx(x - 1, y, c)];
                        n += 1.0;
                    }
                    if x + 1 < width {
                        sum += a[idx(x + 1, y, c)];
                        n += 1.0;
                    }
                    if y > 0 {
                        sum += a[idx(x, y - 1, c)];
                        n += 1.0;
                    }
                    if y + 1 < height {
                        sum += a[idx(x, y + 1, c)];
                        n += 1.0;
                    }
                    let i = idx(x, y, c);
                    let avg = if n > 0.0 { sum / n } else { a[i] };
                    let v = direct[i] * p + avg * (1.0 - p);
                    residual = f64::max(residual, (v - a[i]).abs());
                    next[i] = v;
                }
            }
        }
        std::mem::swap(&mut a, &mut next);
    }
    Ok(IlluminationMap {
        width,
        height,
        data: a.into_iter().map(|v| v * ILLUMINATION_GAIN).collect(),
        iterations,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Attenuation {
    /// Divide by the local space average color illuminant.
    IlluminationMap { p: f64, eps: f64 },
    /// Per-channel constant coefficient from a least-squares line through
    /// `ln D` against `z`.
    ConstantBeta,
    /// Known per-channel coefficients.
    Known { beta_d: [f64; 3] },
}

impl Default for Attenuation {
    fn default() -> Self {
        Attenuation::IlluminationMap { p: 0.5, eps: 1e-5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoverOptions {
    pub attenuation: Attenuation,
    pub white_balance: bool,
}

impl Default for RecoverOptions {
    fn default() -> Self {
        Self { attenuation: Attenuation::default(), white_balance: true }
    }
}

/// Gray-world balance: scales each channel so its mean equals the mean over
/// channels. Channels with zero mean are left alone.
pub fn gray_world(data: &mut [f64]) {
    let n = (data.len() / 3).max(1) as f64;
    let mut means = [0.0; 3];
    for px in data.chunks_exact(3) {
        for c in 0..3 {
            means[c] += px[c] / n;
        }
    }
    let target = (means[0] + means[1] + means[2]) / 3.0;
    for px in data.chunks_exact_mut(3) {
        for c in 0..3 {
            if means[c] > 0.0 {
                px[c] *= target / means[c];
            }
        }
    }
}

pub fn white_balanced(img: &RgbImage) -> RgbImage {
    let mut data = img.data().to_vec();
    gray_world(&mut data);
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let i = (y * img.width() + x) * 3;
        [data[i], data[i + 1], data[i + 2]]
    })
    .expect("same dims")
}

fn constant_beta(direct: &[f64], z: &[f64], c: usize) -> f64 {
    let pts: Vec<(f64, f64)> = direct
        .chunks_exact(3)
        .zip(z)
        .filter(|(px, z)| px[c] > ILLUMINATION_FLOOR && **z > 0.0)
        .map(|(px, z)| (*z, px[c].ln()))
        .collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mz = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pts.iter().map(|(z, l)| (z - mz) * (l - ml)).sum();
    let var: f64 = pts.iter().map(|(z, _)| (z - mz).powi(2)).sum();
    if var <= 0.0 {
        return 0.0;
    }
    (-cov / var).clamp(0.0, BETA_MAX)
}

pub fn recover_scene(
    image: &RgbImage,
    depth: &MetricDepthMap,
    fit: &BackscatterFit,
    opts: &RecoverOptions,
) -> Result<RgbImage> {
    recover_at(image, depth.values(), fit, opts)
}

/// Like [`recover_scene`] for arbitrary non-negative ranges, e.g. zero.
pub fn recover_at(image: &RgbImage, z: &[f64], fit: &BackscatterFit, opts: &RecoverOptions) -> Result<RgbImage> {
    let (w, h) = image.dims();
    if z.len() != w * h {
        return Err(Error::ShapeMismatch(format!("image {:?} vs {} depth values", image.dims(), z.len())));
    }
    let mut direct = Vec::with_capacity(w * h * 3);
    for (px, zi) in image.data().chunks_exact(3).zip(z) {
        for c in 0..3 {
            direct.push((px[c] - fit.channels[c].backscatter(*zi)).max(0.0));
        }
    }
    let mut out = match opts.attenuation {
        Attenuation::IlluminationMap { p, eps } => {
            let illum = local_space_average_color(&direct, w, h, p, eps)?;
            direct
                .iter()
                .zip(&illum.data)
                .enumerate()
                .map(|(i, (d, e))| if z[i / 3] > 0.0 { d / e.max(ILLUMINATION_FLOOR) } else { *d })
                .collect::<Vec<f64>>()
        }
        Attenuation::ConstantBeta => {
            let beta = [0, 1, 2].map(|c| constant_beta(&direct, z, c));
            direct.iter().enumerate().map(|(i, d)| d * (beta[i % 3] * z[i / 3]).exp()).collect()
        }
        Attenuation::Known { beta_d } => {
            direct.iter().enumerate().map(|(i, d)| d * (beta_d[i % 3] * z[i / 3]).exp()).collect()
        }
    };
    for v in &mut out {
        if !v.is_finite() {
            *v = if v.is_nan() { 0.0 } else { 1.0 };
        }
    }
    if opts.white_balance {
        gray_world(&mut out);
    }
    RgbImage::from_fn(w, h, |x, y| {
        let i = (y * w + x) * 3;
        [out[i], out[i + 1], out[i + 2]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn water(bd: f64, bb: f64, binf: f64) -> WaterProperties {
        WaterProperties { beta_d: [bd; 3], beta_b: [bb; 3], b_inf: [binf; 3] }
    }

    #[test]
    fn forward_model_by_hand() {
        let j = RgbImage::filled(1, 1, [0.8; 3]).unwrap();
        let d = MetricDepthMap::filled(1, 1, 2.0, 20.0).unwrap();
        let i = synthesize_underwater(&j, &d, &water(0.5, 0.5, 0.2)).unwrap();
        let e = (-1.0f64).exp();
        assert!((i.data()[0] - (0.8 * e + 0.2 * (1.0 - e))).abs() < 1e-12);
        assert!((i.data()[0] - 0.4207).abs() < 1e-4);
    }

    #[test]
    fn forward_model_limits() {
        let j = RgbImage::new(2, 1, vec![0.1, 0.5, 0.9, 0.3, 0.7, 0.2]).unwrap();
        let w = WaterProperties { beta_d: [1.0; 3], beta_b: [1.0; 3], b_inf: [0.1, 0.4, 0.6] };
        assert_eq!(synthesize_at(&j, &[0.0, 0.0], 2, 1, &w).unwrap(), j);
        let far = synthesize_at(&j, &[1e6, 1e6], 2, 1, &w).unwrap();
        assert_eq!(far.pixel(0, 0), [0.1, 0.4, 0.6]);
        let d = MetricDepthMap::filled(3, 1, 1.0, 20.0).unwrap();
        assert!(matches!(synthesize_underwater(&j, &d, &w), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn presets_are_well_formed() {
        let presets = water_type_presets();
        assert_eq!(presets.len(), 10);
        for p in &presets {
            p.water.validate().unwrap();
            if p.dominant == "blue" {
                let b = p.water.beta_d;
                assert!(b[0] > b[1] && b[1] > b[2], "{}", p.name);
            }
        }
        let white = RgbImage::filled(1, 1, [1.0; 3]).unwrap();
        for p in presets.iter().filter(|p| p.dominant == "blue") {
            let out = synthesize_at(&white, &[5.0], 1, 1, &p.water).unwrap();
            assert!(out.data()[2] > out.data()[0], "{}", p.name);
        }
    }

    #[test]
    fn fit_recovers_saturating_curve() {
        let pts: Vec<(f64, f64)> = (0..40).map(|i| {
            let z = 0.25 + i as f64 * 0.4;
            (z, 0.2 * (1.0 - (-0.5 * z).exp()))
        }).collect();
        let f = fit_backscatter_curve(&pts).unwrap();
        assert!((f.b_inf - 0.2).abs() < 1e-4, "{f:?}");
        assert!((f.beta_b - 0.5).abs() < 1e-3, "{f:?}");
        assert!(f.rms_residual < 1e-6);
    }

    #[test]
    fn degenerate_and_black_inputs() {
        let img = RgbImage::filled(4, 4, [0.3; 3]).unwrap();
        let flat = MetricDepthMap::filled(4, 4, 3.0, 20.0).unwrap();
        assert!(matches!(estimate_backscatter(&img, &flat, 10, 0.01), Err(Error::DegenerateDepth(_))));
        let black = RgbImage::filled(4, 4, [0.0; 3]).unwrap();
        let ramp = MetricDepthMap::with_default_cap(4, 4, (0..16).map(|i| 1.0 + i as f64).collect()).unwrap();
        let fit = estimate_backscatter(&black, &ramp, 10, 0.01).unwrap();
        for c in fit.channels {
            assert!(c.b_inf.abs() < 1e-9);
        }
        assert!(fit.rms_residual < 1e-9);
    }

    #[test]
    fn illumination_fixed_points() {
        let v = vec![0.3; 5 * 4 * 3];
        let m = local_space_average_color(&v, 5, 4, 0.5, 1e-5).unwrap();
        assert!(m.data.iter().all(|e| (e - 0.6).abs() < 1e-12));
        let d: Vec<f64> = (0..60).map(|i| (i % 7) as f64 / 7.0).collect();
        let m = local_space_average_color(&d, 5, 4, 1.0, 1e-5).unwrap();
        for (e, x) in m.data.iter().zip(&d) {
            assert!((e - 2.0 * x).abs() < 1e-12);
        }
        assert!(local_space_average_color(&d, 5, 4, 0.0, 1e-5).is_err());
    }

    #[test]
    fn zero_range_recovers_input_up_to_balance() {
        let img = RgbImage::new(2, 1, vec![0.2, 0.4, 0.6, 0.1, 0.3, 0.5]).unwrap();
        let fit = BackscatterFit::from_water(&water(0.5, 0.5, 0.3));
        let plain = RecoverOptions { white_balance: false, ..Default::default() };
        assert_eq!(recover_at(&img, &[0.0, 0.0], &fit, &plain).unwrap(), img);
        let balanced = recover_at(&img, &[0.0, 0.0], &fit, &RecoverOptions::default()).unwrap();
        assert_eq!(balanced, white_balanced(&img));
    }

    #[test]
    fn backscatter_above_signal_clamps() {
        let img = RgbImage::filled(2, 2, [0.05; 3]).unwrap();
        let depth = MetricDepthMap::filled(2, 2, 10.0, 20.0).unwrap();
        let fit = BackscatterFit::from_water(&water(0.5, 0.5, 0.9));
        for mode in [Attenuation::default(), Attenuation::ConstantBeta, Attenuation::Known { beta_d: [0.5; 3] }] {
            let out = recover_scene(&img, &depth, &fit, &RecoverOptions { attenuation: mode, white_balance: true }).unwrap();
            assert!(out.data().iter().all(|v| *v == 0.0));
        }
    }
}
