//! Depth metrics, model evaluation over a manifest, and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::{CheckpointRef, DepthModel};
use crate::codec::{self, decode_metric_raw};
use crate::depth::{DepthRaster, RawDepth};
use crate::error::{Error, Result};
use crate::genpipe::TrainConfig;
use crate::manifest::{require_valid, ContentId, Manifest, ManifestRecord, RecordKind};
use crate::stage::{map_items, ItemFailure, StageContext};
use crate::uncertainty::{load_mask, ValidityMask, VarianceKind};

const OP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub rmse_log: f64,
    pub a_rel: f64,
    pub s_rel: f64,
    pub log10: f64,
    pub si_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    #[serde(default)]
    pub n_valid: u64,
}

/// Column key, display label, and whether larger is better.
pub const METRIC_COLUMNS: [(&str, &str, bool); 9] = [
    ("rmse", "RMSE↓", false),
    ("rmse_log", "RMSE_log↓", false),
    ("a_rel", "A.Rel↓", false),
    ("s_rel", "S.Rel↓", false),
    ("log10", "log10↓", false),
    ("si_log", "SI_log↓", false),
    ("delta1", "δ1↑", true),
    ("delta2", "δ2↑", true),
    ("delta3", "δ3↑", true),
];

impl MetricsReport {
    pub fn values(&self) -> [f64; 9] {
        [
            self.rmse,
            self.rmse_log,
            self.a_rel,
            self.s_rel,
            self.log10,
            self.si_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        METRIC_COLUMNS.iter().position(|(k, _, _)| *k == key).map(|i| self.values()[i])
    }

    /// Field-wise mean; `n_valid` is summed.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricsReport {
            rmse: avg(|r| r.rmse),
            rmse_log: avg(|r| r.rmse_log),
            a_rel: avg(|r| r.a_rel),
            s_rel: avg(|r| r.s_rel),
            log10: avg(|r| r.log10),
            si_log: avg(|r| r.si_log),
            delta1: avg(|r| r.delta1),
            delta2: avg(|r| r.delta2),
            delta3: avg(|r| r.delta3),
            n_valid: reports.iter().map(|r| r.n_valid).sum(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub gt_min_m: f64,
    pub gt_max_m: Option<f64>,
    pub median_scaling: bool,
    pub si_variance: VarianceKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { gt_min_m: 1e-3, gt_max_m: None, median_scaling: false, si_variance: VarianceKind::Population }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gt_min_m > 0.0) {
            return Err(Error::InvalidConfig(format!("gt_min_m must be > 0, got {}", self.gt_min_m)));
        }
        if let Some(hi) = self.gt_max_m {
            if !(hi > self.gt_min_m) {
                return Err(Error::InvalidConfig(format!("gt_max_m {hi} must exceed gt_min_m")));
            }
        }
        Ok(())
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// (prediction, ground truth) over the valid set, median-scaled if asked.
fn valid_pairs(
    pred: &dyn DepthRaster,
    gt: &dyn DepthRaster,
    mask: Option<&ValidityMask>,
    cfg: &EvalConfig,
) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    if let Some(m) = mask {
        if m.dims() != gt.dims() {
            return Err(Error::ShapeMismatch(format!("mask {:?} vs ground truth {:?}", m.dims(), gt.dims())));
        }
    }
    let mut pairs = Vec::new();
    for (i, (p, g)) in pred.values().iter().zip(gt.values()).enumerate() {
        let in_range = g.is_finite() && *g >= cfg.gt_min_m && cfg.gt_max_m.is_none_or(|hi| *g <= hi);
        let unmasked = mask.is_none_or(|m| m.bits()[i]);
        if in_range && unmasked {
            if !(p.is_finite() && *p > 0.0) {
                return Err(Error::NonPositivePrediction(*p));
            }
            pairs.push((*p, *g));
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyValidSet);
    }
    if cfg.median_scaling {
        let mut ps: Vec<f64> = pairs.iter().map(|x| x.0).collect();
        let mut gs: Vec<f64> = pairs.iter().map(|x| x.1).collect();
        let s = median(&mut gs) / median(&mut ps);
        for x in &mut pairs {
            x.0 *= s;
        }
    }
    Ok(pairs)
}

fn metrics_from_pairs(pairs: &[(f64, f64)], variance: VarianceKind) -> MetricsReport {
    let n = pairs.len() as f64;
    let (mut se, mut sel, mut ar, mut sr, mut l10) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut hits = [0u64; 3];
    let mut e_sum = 0.0;
    for &(p, g) in pairs {
        let d = p - g;
        let e = p.ln() - g.ln();
        se += d * d;
        sel += e * e;
        ar += d.abs() / g;
        sr += d * d / g;
        l10 += (p.log10() - g.log10()).abs();
        e_sum += e;
        let ratio = (p / g).max(g / p);
        for (i, h) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(i as i32 + 1) {
                *h += 1;
            }
        }
    }
    let e_mean = e_sum / n;
    let ss: f64 = pairs.iter().map(|(p, g)| (p.ln() - g.ln() - e_mean).powi(2)).sum();
    let var = match variance {
        VarianceKind::Population => ss / n,
        VarianceKind::Sample if pairs.len() > 1 => ss / (n - 1.0),
        VarianceKind::Sample => 0.0,
    };
    MetricsReport {
        rmse: (se / n).sqrt(),
        rmse_log: (sel / n).sqrt(),
        a_rel: ar / n,
        s_rel: sr / n,
        log10: l10 / n,
        si_log: 100.0 * var.sqrt(),
        delta1: hits[0] as f64 / n,
        delta2: hits[1] as f64 / n,
        delta3: hits[2] as f64 / n,
        n_valid: pairs.len() as u64,
    }
}

pub fn compute_metrics(
    pred: &dyn DepthRaster,
    gt: &dyn DepthRaster,
    mask: Option<&ValidityMask>,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    Ok(metrics_from_pairs(&valid_pairs(pred, gt, mask, cfg)?, cfg.si_variance))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of per-image metrics.
    #[default]
    PerImage,
    /// Metrics over all valid pixels of all images at once.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub id: String,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalOutcome {
    pub aggregate: Option<MetricsReport>,
    pub aggregation: Aggregation,
    pub per_image: Vec<ImageResult>,
    /// Images with an empty valid set.
    pub excluded: Vec<String>,
    pub failures: Vec<ItemFailure>,
}

struct Scored {
    metrics: MetricsReport,
    pairs: Vec<(f64, f64)>,
}

fn score(pred: &dyn DepthRaster, gt: &dyn DepthRaster, mask: Option<&ValidityMask>, cfg: &EvalConfig) -> Result<Scored> {
    let pairs = valid_pairs(pred, gt, mask, cfg)?;
    Ok(Scored { metrics: metrics_from_pairs(&pairs, cfg.si_variance), pairs })
}

fn collect_outcome(
    ids: Vec<String>,
    results: Vec<Result<Scored>>,
    cfg: &EvalConfig,
    aggregation: Aggregation,
) -> EvalOutcome {
    let mut out = EvalOutcome { aggregation, ..Default::default() };
    let mut pooled = Vec::new();
    for (id, r) in ids.into_iter().zip(results) {
        match r {
            Ok(s) => {
                pooled.extend(s.pairs);
                out.per_image.push(ImageResult { id, metrics: s.metrics });
            }
            Err(Error::EmptyValidSet) => out.excluded.push(id),
            Err(e) => out.failures.push(ItemFailure::new(id, e)),
        }
    }
    out.aggregate = match aggregation {
        Aggregation::PerImage => {
            MetricsReport::mean(&out.per_image.iter().map(|r| r.metrics).collect::<Vec<_>>())
        }
        Aggregation::Pooled => (!pooled.is_empty()).then(|| metrics_from_pairs(&pooled, cfg.si_variance)),
    };
    out
}

/// Runs `backend` on every record in `eval_manifest` that carries `image` and
/// metric `depth` artifacts (and optionally `mask`), then aggregates.
pub fn evaluate_model(
    backend: &dyn DepthModel,
    checkpoint: &CheckpointRef,
    eval_manifest: &Path,
    cfg: &EvalConfig,
    aggregation: Aggregation,
    ctx: &StageContext,
) -> Result<EvalOutcome> {
    cfg.validate()?;
    checkpoint.ensure_owned_by(backend.id())?;
    require_valid(eval_manifest)?;
    let m = Manifest::open_existing(eval_manifest)?;
    let dir = m.dir();
    let items: Vec<&ManifestRecord> = m
        .records()
        .iter()
        .filter(|r| r.kind != RecordKind::Triplet && r.paths.contains_key("image") && r.paths.contains_key("depth"))
        .collect();
    let results = map_items(&items, ctx.jobs, backend.reentrant(), |r| {
        let image = codec::load_image(r.resolve("image", &dir).expect("filtered"))?;
        let gt = decode_metric_raw(r.resolve("depth", &dir).expect("filtered"))?;
        let mask = r.resolve("mask", &dir).map(load_mask).transpose()?;
        let pred = backend.predict(checkpoint, &image).map_err(|e| match e {
            Error::BackendFailure { backend_id, reason, .. } => {
                Error::BackendFailure { backend_id, item: Some(r.id.clone()), reason }
            }
            other => other,
        })?;
        score(&pred, &gt, mask.as_ref(), cfg)
    });
    let ids = items.iter().map(|r| r.id.clone()).collect();
    Ok(collect_outcome(ids, results, cfg, aggregation))
}

/// Trains a depth model on a dataset manifest and appends a `checkpoint`
/// record linking the reference to the dataset digest.
pub fn train_depth_model(
    dataset_manifest: &Path,
    cfg: &TrainConfig,
    backend: &dyn DepthModel,
    out_manifest: &Path,
    ctx: &StageContext,
) -> Result<CheckpointRef> {
    require_valid(dataset_manifest)?;
    let data = Manifest::open_existing(dataset_manifest)?;
    if data.of_kind(RecordKind::DatasetPair).next().is_none() {
        return Err(Error::InvalidConfig(format!("{} has no dataset pairs", dataset_manifest.display())));
    }
    let ckpt = backend.train(dataset_manifest, cfg)?;
    ckpt.ensure_owned_by(backend.id())?;
    let id = ContentId::new("ckpt", OP_VERSION)
        .field("backend", &ckpt.backend_id)
        .field("uri", &ckpt.uri)
        .field("config", &ckpt.config_hash)
        .field("dataset", &crate::manifest::sha256_file(dataset_manifest)?)
        .finish();
    let mut out = Manifest::create(out_manifest)?;
    if !out.contains(&id) {
        let rec = ManifestRecord::new(&id, RecordKind::Checkpoint, ctx.clock)
            .with_artifact("dataset", dataset_manifest, &out.dir())?
            .with_param("backend_id", ckpt.backend_id.as_str())
            .with_param("uri", ckpt.uri.as_str())
            .with_param("config_hash", ckpt.config_hash.as_str())
            .with_param("hyperparameters", serde_json::to_value(&cfg.hyperparameters).expect("json"));
        out.append(rec)?;
    }
    Ok(ckpt)
}

/// Scores precomputed metric depth files in `pred_dir` against files of the
/// same name in `gt_dir`, with optional same-named masks in `mask_dir`.
pub fn evaluate_predictions(
    pred_dir: &Path,
    gt_dir: &Path,
    mask_dir: Option<&Path>,
    cfg: &EvalConfig,
    aggregation: Aggregation,
) -> Result<EvalOutcome> {
    cfg.validate()?;
    let preds = crate::prep::list_input_files(pred_dir, |p| p.extension().is_some_and(|e| e == "png"))?;
    let mut ids = Vec::new();
    let mut results = Vec::new();
    for p in preds {
        let name = p.file_name().expect("file").to_owned();
        ids.push(name.to_string_lossy().into_owned());
        let gt_path = gt_dir.join(&name);
        results.push((|| {
            let pred = decode_metric_raw(&p)?;
            let gt = decode_metric_raw(&gt_path)?;
            let mask = match mask_dir.map(|d| d.join(&name)).filter(|m| m.is_file()) {
                Some(m) => Some(load_mask(m)?),
                None => None,
            };
            score(&pred, &gt, mask.as_ref(), cfg)
        })());
    }
    Ok(collect_outcome(ids, results, cfg, aggregation))
}

/// One named row of a comparison table. `group` rows are compared among
/// themselves when flagging the best value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub name: String,
    #[serde(default)]
    pub group: Option<String>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResultFile<'a> {
    pub name: &'a str,
    pub group: Option<&'a str>,
    pub metrics: Option<MetricsReport>,
    pub config: EvalConfig,
    #[serde(flatten)]
    pub outcome: &'a EvalOutcome,
}

/// Writes `results.json` and `per_image.csv` under `out_dir` and appends an
/// `eval_result` record to `out_dir/manifest.jsonl`.
pub fn write_eval_outputs(
    outcome: &EvalOutcome,
    name: &str,
    group: Option<&str>,
    cfg: &EvalConfig,
    out_dir: &Path,
    ctx: &StageContext,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results = out_dir.join("results.json");
    let file = EvalResultFile { name, group, metrics: outcome.aggregate, config: *cfg, outcome };
    codec::write_json(&results, &file)?;

    let mut csv = String::from("id");
    for (k, _, _) in METRIC_COLUMNS {
        csv.push(',');
        csv.push_str(k);
    }
    csv.push_str(",n_valid\n");
    for r in &outcome.per_image {
        csv.push_str(&r.id);
        for v in r.metrics.values() {
            let _ = write!(csv, ",{v}");
        }
        let _ = writeln!(csv, ",{}", r.metrics.n_valid);
    }
    let per_image = out_dir.join("per_image.csv");
    std::fs::write(&per_image, csv).map_err(|e| Error::io(&per_image, e))?;

    let id = ContentId::new("eval", OP_VERSION)
        .field("name", name)
        .field("results", &crate::manifest::sha256_file(&results)?)
        .finish();
    let mut m = Manifest::create(out_dir.join("manifest.jsonl"))?;
    if !m.contains(&id) {
        let mut rec = ManifestRecord::new(&id, RecordKind::EvalResult, ctx.clock)
            .with_artifact("results", &results, out_dir)?
            .with_artifact("per_image", &per_image, out_dir)?
            .with_param("name", name)
            .with_param("images", outcome.per_image.len() as u64)
            .with_param("excluded", outcome.excluded.len() as u64)
            .with_param("failures", outcome.failures.len() as u64);
        if let Some(g) = group {
            rec = rec.with_param("group", g);
        }
        m.append(rec)?;
    }
    Ok(results)
}

/// Reads result rows from every `*.json` in `dir` and `dir/*/results.json`.
/// A file may hold one row object or an array of rows; files without a
/// `metrics` object are skipped.
pub fn load_result_rows(dir: &Path) -> Result<Vec<ResultRow>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == "json") {
            files.push(p);
        } else if p.join("results.json").is_file() {
            files.push(p.join("results.json"));
        }
    }
    files.sort();
    let mut rows = Vec::new();
    for f in files {
        let v: serde_json::Value = codec::read_json(&f)?;
        let candidates = match v {
            serde_json::Value::Array(a) => a,
            other => vec![other],
        };
        for c in candidates {
            if c.get("metrics").is_some_and(|m| m.is_object()) {
                let row: ResultRow = serde_json::from_value(c).map_err(|e| Error::ParseFailure {
                    path: f.clone(),
                    line: 0,
                    reason: e.to_string(),
                })?;
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Per row and column, whether the value is the best within the row's group
/// (rows without a group form one group). Ties are all flagged.
pub fn best_flags(rows: &[ResultRow]) -> Vec<[bool; 9]> {
    let mut groups: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        groups.entry(r.group.as_deref()).or_default().push(i);
    }
    let mut flags = vec![[false; 9]; rows.len()];
    for members in groups.values() {
        for (c, (_, _, higher)) in METRIC_COLUMNS.iter().enumerate() {
            let vals = members.iter().map(|i| rows[*i].metrics.values()[c]);
            let best = if *higher {
                vals.fold(f64::NEG_INFINITY, f64::max)
            } else {
                vals.fold(f64::INFINITY, f64::min)
            };
            for i in members {
                flags[*i][c] = rows[*i].metrics.values()[c] == best;
            }
        }
    }
    flags
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub text: PathBuf,
    pub csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

pub fn format_value(v: f64) -> String {
    format!("{v:.3}")
}

pub fn render_text_table(rows: &[ResultRow]) -> String {
    let flags = best_flags(rows);
    let name_w = rows.iter().map(|r| r.name.chars().count()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<name_w$}", "model");
    for (_, label, _) in METRIC_COLUMNS {
        let _ = write!(s, " {label:>10}");
    }
    s.push('\n');
    for (r, f) in rows.iter().zip(&flags) {
        let _ = write!(s, "{:<name_w$}", r.name);
        for (v, best) in r.metrics.values().iter().zip(f) {
            let cell = format!("{}{}", format_value(*v), if *best { "*" } else { " " });
            let _ = write!(s, " {cell:>10}");
        }
        s.push('\n');
    }
    s.push_str("* best in group\n");
    s
}

pub fn render_csv_table(rows: &[ResultRow]) -> String {
    let flags = best_flags(rows);
    let mut s = String::from("model,group");
    for (_, label, _) in METRIC_COLUMNS {
        s.push(',');
        s.push_str(label);
    }
    s.push_str(",best\n");
    for (r, f) in rows.iter().zip(&flags) {
        let _ = write!(s, "{},{}", csv_field(&r.name), csv_field(r.group.as_deref().unwrap_or("")));
        for v in r.metrics.values() {
            let _ = write!(s, ",{}", format_value(v));
        }
        let best: Vec<&str> =
            METRIC_COLUMNS.iter().zip(f).filter(|(_, b)| **b).map(|((k, _, _), _)| *k).collect();
        let _ = writeln!(s, ",{}", best.join(";"));
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Horizontal bar chart of one metric across rows.
pub fn render_bar_svg(rows: &[ResultRow], column: usize) -> String {
    let (key, label, _) = METRIC_COLUMNS[column];
    let flags = best_flags(rows);
    let (bar_h, gap, left, width) = (18.0, 6.0, 180.0, 320.0);
    let top = 30.0;
    let height = top + rows.len() as f64 * (bar_h + gap) + 10.0;
    let max = rows.iter().map(|r| r.metrics.values()[column]).fold(0.0, f64::max);
    let scale = if max > 0.0 { width / max } else { 0.0 };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="11">"#,
        left + width + 70.0
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, xml_escape(key));
    let _ = writeln!(s, r#"<text x="{left}" y="18" font-size="13">{}</text>"#, xml_escape(label));
    for (i, r) in rows.iter().enumerate() {
        let v = r.metrics.values()[column];
        let y = top + i as f64 * (bar_h + gap);
        let fill = if flags[i][column] { "#1f77b4" } else { "#9ecae1" };
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + bar_h * 0.75,
            xml_escape(&r.name)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{y}" width="{:.2}" height="{bar_h}" fill="{fill}"/>"#,
            (v * scale).max(0.0)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}">{}</text>"#,
            left + (v * scale).max(0.0) + 4.0,
            y + bar_h * 0.75,
            format_value(v)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.txt`, `report.csv` and `plots/<metric>.svg` under `out_dir`.
pub fn render_report(rows: &[ResultRow], out_dir: &Path) -> Result<RenderedReport> {
    if rows.is_empty() {
        return Err(Error::EmptyResults);
    }
    let plot_dir = out_dir.join("plots");
    std::fs::create_dir_all(&plot_dir).map_err(|e| Error::io(&plot_dir, e))?;
    let text = out_dir.join("report.txt");
    let csv = out_dir.join("report.csv");
    std::fs::write(&text, render_text_table(rows)).map_err(|e| Error::io(&text, e))?;
    std::fs::write(&csv, render_csv_table(rows)).map_err(|e| Error::io(&csv, e))?;
    let mut plots = Vec::new();
    for (c, (key, _, _)) in METRIC_COLUMNS.iter().enumerate() {
        let p = plot_dir.join(format!("{key}.svg"));
        std::fs::write(&p, render_bar_svg(rows, c)).map_err(|e| Error::io(&p, e))?;
        plots.push(p);
    }
    Ok(RenderedReport { text, csv, plots })
}

/// Wraps a slice as a 1-row raster for quick metric calls.
pub fn row_depth(values: &[f64]) -> RawDepth {
    RawDepth::new(values.len(), 1, values.to_vec()).expect("nonempty row")
}
