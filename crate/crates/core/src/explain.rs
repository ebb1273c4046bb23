//! Prototype heatmaps, percentile boxes, cross-domain matching and the
//! on-disk explanation report.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use ndarray::{Array2, Array3, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_model::FeatureVolume;
use crate::datasets::{Domain, ImageSample};
use crate::error::{Error, Result};
use crate::protolayer::{similarity_with_eps, PrototypeBank};
use crate::scalar::Scalar;
use crate::trainer::{InterpretiveModel, TrainingContext};

pub const DEFAULT_PERCENTILE: f64 = 95.0;
pub const DEFAULT_MISMATCH_TAU: f64 = 0.1;
pub const MATCHES_FILE: &str = "matches.json";
pub const INDEX_FILE: &str = "index.html";
pub const CARD_FILE: &str = "card.png";
pub const PANEL_FILE: &str = "panel.png";

/// Similarity of one prototype at every latent position, plus its
/// bilinear upsampling to image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap<T> {
    pub grid: Array2<T>,
    pub upsampled: Array2<T>,
}

impl<T: Scalar> HeatMap<T> {
    pub fn max(&self) -> T {
        self.grid.iter().fold(T::neg_infinity(), |m, &v| m.max(v))
    }
}

/// Inclusive pixel rectangle in the `S x S` image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
    pub peak_value: f64,
}

impl PatchBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..=self.bottom).contains(&y) && (self.left..=self.right).contains(&x)
    }
}

/// Bilinear resize with half-pixel centers (`align_corners = false`),
/// clamping source coordinates at the borders.
pub fn upsample_bilinear<T: Scalar>(grid: ArrayView2<'_, T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = grid.dim();
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let (fy, fx) = (T::lit(fy), T::lit(fx));
        let top = grid[[y0, x0]] * (T::one() - fx) + grid[[y0, x1]] * fx;
        let bot = grid[[y1, x0]] * (T::one() - fx) + grid[[y1, x1]] * fx;
        top * (T::one() - fy) + bot * fy
    })
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Similarity grid of prototype `j` over a volume, upsampled to `side x side`.
pub fn heatmap_from_volume<T: Scalar>(
    volume: &FeatureVolume<T>,
    bank: &PrototypeBank<T>,
    j: usize,
    eps: T,
    side: usize,
) -> Result<HeatMap<T>> {
    if j >= bank.len() {
        return Err(Error::IndexError { index: j, len: bank.len() });
    }
    if volume.depth() != bank.dim() {
        return Err(Error::ShapeError(format!(
            "feature depth {} differs from prototype depth {}",
            volume.depth(),
            bank.dim()
        )));
    }
    let p = bank.vector(j);
    let mut grid = Array2::zeros((volume.height(), volume.width()));
    for ((r, c), g) in grid.indexed_iter_mut() {
        let d = volume
            .patch(r, c)
            .iter()
            .zip(p.iter())
            .fold(T::zero(), |acc, (&z, &q)| acc + (z - q) * (z - q));
        *g = similarity_with_eps(d, eps)?;
    }
    let upsampled = upsample_bilinear(grid.view(), side, side);
    Ok(HeatMap { grid, upsampled })
}

pub fn heatmap<T: Scalar>(model: &InterpretiveModel<T>, image: &ImageSample, prototype_id: usize) -> Result<HeatMap<T>> {
    if prototype_id >= model.bank().len() {
        return Err(Error::IndexError { index: prototype_id, len: model.bank().len() });
    }
    let volume = model.volume(image)?;
    heatmap_from_volume(&volume, model.bank(), prototype_id, T::lit(model.config().similarity_eps), image.side())
}

/// Smallest rectangle holding every pixel at or above the `q`-th percentile.
pub fn bbox_at<T: Scalar>(upsampled: ArrayView2<'_, T>, q: f64) -> PatchBox {
    let values: Vec<f64> = upsampled.iter().map(|v| v.as_f64()).collect();
    let threshold = percentile(&values, q);
    let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
    let mut peak = f64::NEG_INFINITY;
    for ((y, x), v) in upsampled.indexed_iter() {
        let v = v.as_f64();
        peak = peak.max(v);
        if v >= threshold {
            top = top.min(y);
            left = left.min(x);
            bottom = bottom.max(y);
            right = right.max(x);
        }
    }
    PatchBox {
        top,
        left,
        bottom,
        right,
        peak_value: peak,
    }
}

pub fn bbox<T: Scalar>(heat: &HeatMap<T>) -> PatchBox {
    bbox_at(heat.upsampled.view(), DEFAULT_PERCENTILE)
}

/// Intersection over union of a box and a foreground mask.
pub fn mask_iou(b: &PatchBox, mask: ArrayView2<'_, bool>) -> f64 {
    let mut inter = 0usize;
    let mut fg = 0usize;
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            fg += 1;
            if b.contains(y, x) {
                inter += 1;
            }
        }
    }
    let union = fg + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Options for matching and report rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    /// Examples per domain and prototype.
    pub m: usize,
    pub percentile: f64,
    /// Mask-IoU below which a target example is flagged.
    pub tau: f64,
    /// Side of each tile in the rendered panels.
    pub tile: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            m: 3,
            percentile: DEFAULT_PERCENTILE,
            tau: DEFAULT_MISMATCH_TAU,
            tile: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedExample {
    pub sample_index: usize,
    pub sample_id: String,
    pub patch_box: PatchBox,
    pub score: f64,
    /// Box/foreground IoU; only for images that carry a mask.
    pub mask_iou: Option<f64>,
    /// Target examples with a mask only.
    pub mismatch: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub sample_index: usize,
    pub sample_id: String,
    pub row: usize,
    pub col: usize,
    pub distance: f64,
    pub patch_box: PatchBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainMatch {
    pub prototype_id: usize,
    pub category: usize,
    pub anchor: Option<Anchor>,
    pub source: Vec<MatchedExample>,
    pub target: Vec<MatchedExample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMatches {
    pub matches: Vec<CrossDomainMatch>,
    pub warnings: Vec<String>,
}

fn sample_volume<T: Scalar>(
    model: &InterpretiveModel<T>,
    ctx: &TrainingContext<'_, T>,
    domain: Domain,
    index: usize,
) -> Result<FeatureVolume<T>> {
    model.volume_from_backbone(ctx.cache.get(domain, index, false)?, ctx.cache.grid())
}

fn examine<T: Scalar>(
    model: &InterpretiveModel<T>,
    ctx: &TrainingContext<'_, T>,
    domain: Domain,
    index: usize,
    j: usize,
    cfg: &ExplainConfig,
) -> Result<MatchedExample> {
    let sample = &ctx.pair.domain(domain)[index];
    let volume = sample_volume(model, ctx, domain, index)?;
    let heat = heatmap_from_volume(&volume, model.bank(), j, T::lit(model.config().similarity_eps), sample.side())?;
    let patch_box = bbox_at(heat.upsampled.view(), cfg.percentile);
    let mask_iou = sample.mask.as_ref().map(|m| mask_iou(&patch_box, m.view()));
    let mismatch = match domain {
        Domain::Target => mask_iou.map(|v| v < cfg.tau),
        Domain::Source => None,
    };
    Ok(MatchedExample {
        sample_index: index,
        sample_id: sample.id.clone(),
        patch_box,
        score: heat.max().as_f64(),
        mask_iou,
        mismatch,
    })
}

/// Top-`m` members of `pool` by prototype-`j` similarity; ties keep the lower index.
fn top_m(scored: &[(usize, Vec<f64>)], j: usize, m: usize) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = scored.iter().map(|(i, s)| (*i, s[j])).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().take(m).map(|(i, _)| i).collect()
}

/// For each prototype of `category`: the `m` most similar source images of the
/// category and the `m` most similar target images pseudo-labeled as it.
pub fn match_cross_domain<T: Scalar>(
    model: &InterpretiveModel<T>,
    ctx: &TrainingContext<'_, T>,
    category: usize,
    cfg: &ExplainConfig,
) -> Result<CategoryMatches> {
    let n_classes = model.bank().n_classes();
    if category >= n_classes {
        return Err(Error::IndexError { index: category, len: n_classes });
    }
    let source_pool: Vec<usize> = ctx.pair.source_indices_by_class()[category].clone();
    let target_pool: Vec<usize> = ctx
        .pseudo
        .labels(Domain::Target)
        .iter()
        .enumerate()
        .filter(|(_, &y)| y == category)
        .map(|(i, _)| i)
        .collect();
    let mut warnings = Vec::new();
    if target_pool.is_empty() {
        let msg = format!("category {category} has no target samples pseudo-labeled as it");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let scored = |domain: Domain, pool: &[usize]| -> Result<Vec<(usize, Vec<f64>)>> {
        pool.par_iter()
            .map(|&i| {
                let s = model.scores(&sample_volume(model, ctx, domain, i)?)?;
                Ok((i, s.similarity.iter().map(|v| v.as_f64()).collect()))
            })
            .collect()
    };
    let src_scores = scored(Domain::Source, &source_pool)?;
    let tgt_scores = scored(Domain::Target, &target_pool)?;
    let eps = T::lit(model.config().similarity_eps);

    let matches = model
        .bank()
        .prototypes_of(category)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|j| {
            let pick = |domain: Domain, scored: &[(usize, Vec<f64>)]| -> Result<Vec<MatchedExample>> {
                top_m(scored, j, cfg.m)
                    .into_iter()
                    .map(|i| examine(model, ctx, domain, i, j, cfg))
                    .collect()
            };
            let anchor = match &model.bank().provenance()[j] {
                Some(p) => {
                    let sample = &ctx.pair.source[p.sample_index];
                    let volume = sample_volume(model, ctx, Domain::Source, p.sample_index)?;
                    let heat = heatmap_from_volume(&volume, model.bank(), j, eps, sample.side())?;
                    Some(Anchor {
                        sample_index: p.sample_index,
                        sample_id: p.sample_id.clone(),
                        row: p.row,
                        col: p.col,
                        distance: p.distance,
                        patch_box: bbox_at(heat.upsampled.view(), cfg.percentile),
                    })
                }
                None => None,
            };
            Ok(CrossDomainMatch {
                prototype_id: j,
                category,
                anchor,
                source: pick(Domain::Source, &src_scores)?,
                target: pick(Domain::Target, &tgt_scores)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CategoryMatches { matches, warnings })
}

const RED: [u8; 3] = [220, 30, 30];
const YELLOW: [u8; 3] = [255, 220, 0];

fn to_rgb(pixels: &Array3<u8>) -> RgbImage {
    let (h, w, _) = pixels.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        image::Rgb([pixels[[y, x, 0]], pixels[[y, x, 1]], pixels[[y, x, 2]]])
    })
}

fn outline(img: &mut RgbImage, b: &PatchBox, color: [u8; 3]) {
    for y in b.top..=b.bottom {
        for x in b.left..=b.right {
            if y == b.top || y == b.bottom || x == b.left || x == b.right {
                img.put_pixel(x as u32, y as u32, image::Rgb(color));
            }
        }
    }
}

/// Crop of the image under `b`, outlined in red when flagged.
pub fn crop(pixels: &Array3<u8>, b: &PatchBox, flagged: bool) -> RgbImage {
    let full = to_rgb(pixels);
    let mut out = image::imageops::crop_imm(&full, b.left as u32, b.top as u32, b.width() as u32, b.height() as u32).to_image();
    if flagged {
        let local = PatchBox {
            top: 0,
            left: 0,
            bottom: b.height() - 1,
            right: b.width() - 1,
            peak_value: b.peak_value,
        };
        outline(&mut out, &local, RED);
    }
    out
}

fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Writes through a sibling temporary file so readers never see partial output.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile_in(dir, path)?;
    tmp.1.write_all(bytes)?;
    tmp.1.sync_all()?;
    drop(tmp.1);
    fs::rename(&tmp.0, path)?;
    Ok(())
}

fn tempfile_in(dir: &Path, path: &Path) -> Result<(PathBuf, fs::File)> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    Ok((tmp.clone(), fs::File::create(tmp)?))
}

/// Directory-safe form of a category name.
pub fn category_dir(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "_".into()
    } else {
        s
    }
}

fn example_file(domain: Domain, rank: usize) -> String {
    format!("{}_{rank}.png", domain.as_str())
}

fn prototype_dir(category: &str, j: usize) -> PathBuf {
    PathBuf::from(category_dir(category)).join(format!("proto_{j}"))
}

/// Relative paths of everything a match renders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardFiles {
    pub card: PathBuf,
    pub source: Vec<PathBuf>,
    pub target: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    #[serde(flatten)]
    pub matched: CrossDomainMatch,
    pub category_name: String,
    pub files: CardFiles,
}

/// Contents of `matches.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub base_hash: String,
    pub percentile: f64,
    pub tau: f64,
    pub m: usize,
    pub categories: Vec<String>,
    pub prototypes: Vec<ReportEntry>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub metadata: ReportMetadata,
    pub cards: usize,
    pub panels: usize,
    pub files: Vec<PathBuf>,
}

fn tile(img: &RgbImage, side: u32) -> RgbImage {
    image::imageops::resize(img, side, side, image::imageops::FilterType::Nearest)
}

fn render_card<T: Scalar>(ctx: &TrainingContext<'_, T>, entry: &ReportEntry, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = out_dir.join(prototype_dir(&entry.category_name, entry.matched.prototype_id));
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    let mut card = match &entry.matched.anchor {
        Some(a) => to_rgb(&ctx.pair.source[a.sample_index].pixels),
        None => RgbImage::new(1, 1),
    };
    if let Some(a) = &entry.matched.anchor {
        outline(&mut card, &a.patch_box, YELLOW);
    }
    write_atomic(&out_dir.join(&entry.files.card), &png_bytes(&card)?)?;
    written.push(entry.files.card.clone());
    for (domain, examples, files) in [
        (Domain::Source, &entry.matched.source, &entry.files.source),
        (Domain::Target, &entry.matched.target, &entry.files.target),
    ] {
        for (ex, rel) in examples.iter().zip(files) {
            let img = crop(&ctx.pair.domain(domain)[ex.sample_index].pixels, &ex.patch_box, ex.mismatch == Some(true));
            write_atomic(&out_dir.join(rel), &png_bytes(&img)?)?;
            written.push(rel.clone());
        }
    }
    Ok(written)
}

/// Rows are prototypes; columns are the anchor image, `m` source crops and `m` target crops.
fn render_panel<T: Scalar>(ctx: &TrainingContext<'_, T>, entries: &[&ReportEntry], cfg: &ExplainConfig) -> Result<RgbImage> {
    let t = cfg.tile.max(1) as u32;
    let gap = 4u32;
    let cols = 1 + 2 * cfg.m as u32;
    let rows = entries.len().max(1) as u32;
    let mut panel = RgbImage::from_pixel(cols * (t + gap) + gap, rows * (t + gap) + gap, image::Rgb([255, 255, 255]));
    for (r, e) in entries.iter().enumerate() {
        let y = gap + r as u32 * (t + gap);
        let mut place = |col: u32, img: &RgbImage| {
            image::imageops::overlay(&mut panel, &tile(img, t), (gap + col * (t + gap)) as i64, y as i64);
        };
        if let Some(a) = &e.matched.anchor {
            let mut img = to_rgb(&ctx.pair.source[a.sample_index].pixels);
            outline(&mut img, &a.patch_box, YELLOW);
            place(0, &img);
        }
        for (k, ex) in e.matched.source.iter().enumerate() {
            place(1 + k as u32, &crop(&ctx.pair.source[ex.sample_index].pixels, &ex.patch_box, false));
        }
        for (k, ex) in e.matched.target.iter().enumerate() {
            let img = crop(&ctx.pair.target[ex.sample_index].pixels, &ex.patch_box, ex.mismatch == Some(true));
            place(1 + cfg.m as u32 + k as u32, &img);
        }
    }
    Ok(panel)
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn render_index(meta: &ReportMetadata) -> String {
    let mut h = String::from("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Prototype index</title>\n");
    h.push_str("<style>body{font-family:sans-serif}img{image-rendering:pixelated;width:64px;margin:2px}.bad{border:3px solid #d00}td{vertical-align:top;padding:4px}</style></head><body>\n");
    h.push_str(&format!("<h1>Prototype index</h1>\n<p>base model {}</p>\n", html_escape(&meta.base_hash)));
    for w in &meta.warnings {
        h.push_str(&format!("<p><b>warning:</b> {}</p>\n", html_escape(w)));
    }
    for (k, name) in meta.categories.iter().enumerate() {
        let dir = category_dir(name);
        h.push_str(&format!("<h2>{}</h2>\n<p><img style=\"width:auto\" src=\"{dir}/{PANEL_FILE}\"></p>\n<table>\n", html_escape(name)));
        for e in meta.prototypes.iter().filter(|e| e.matched.category == k) {
            h.push_str(&format!("<tr><td>prototype {}<br><img src=\"{}\"></td><td>", e.matched.prototype_id, e.files.card.display()));
            for (ex, f) in e.matched.source.iter().zip(&e.files.source) {
                h.push_str(&format!("<img src=\"{}\" title=\"{} {:.4}\">", f.display(), html_escape(&ex.sample_id), ex.score));
            }
            h.push_str("</td><td>");
            for (ex, f) in e.matched.target.iter().zip(&e.files.target) {
                let class = if ex.mismatch == Some(true) { " class=\"bad\"" } else { "" };
                h.push_str(&format!("<img{class} src=\"{}\" title=\"{} {:.4}\">", f.display(), html_escape(&ex.sample_id), ex.score));
            }
            h.push_str("</td><td>");
            let scores: Vec<String> = e.matched.target.iter().map(|ex| format!("{:.4}", ex.score)).collect();
            h.push_str(&format!("source {}<br>target {}", e.matched.source.iter().map(|ex| format!("{:.4}", ex.score)).collect::<Vec<_>>().join(" "), scores.join(" ")));
            h.push_str("</td></tr>\n");
        }
        h.push_str("</table>\n");
    }
    h.push_str("</body></html>\n");
    h
}

/// Writes per-prototype cards and crops, per-category panels, `matches.json`
/// and `index.html` under `out_dir`.
pub fn emit_report<T: Scalar>(
    model: &InterpretiveModel<T>,
    ctx: &TrainingContext<'_, T>,
    out_dir: &Path,
    cfg: &ExplainConfig,
) -> Result<ReportSummary> {
    fs::create_dir_all(out_dir)?;
    let categories = model.base().categories().to_vec();
    let mut prototypes = Vec::new();
    let mut warnings = Vec::new();
    for (k, name) in categories.iter().enumerate() {
        let cm = match_cross_domain(model, ctx, k, cfg)?;
        warnings.extend(cm.warnings);
        for matched in cm.matches {
            let dir = prototype_dir(name, matched.prototype_id);
            let files = CardFiles {
                card: dir.join(CARD_FILE),
                source: (0..matched.source.len()).map(|r| dir.join(example_file(Domain::Source, r))).collect(),
                target: (0..matched.target.len()).map(|r| dir.join(example_file(Domain::Target, r))).collect(),
            };
            prototypes.push(ReportEntry {
                matched,
                category_name: name.clone(),
                files,
            });
        }
    }
    let metadata = ReportMetadata {
        base_hash: model.base().content_hash(),
        percentile: cfg.percentile,
        tau: cfg.tau,
        m: cfg.m,
        categories: categories.clone(),
        prototypes,
        warnings,
    };

    let mut files: Vec<PathBuf> = metadata
        .prototypes
        .par_iter()
        .map(|e| render_card(ctx, e, out_dir))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    for (k, name) in categories.iter().enumerate() {
        let entries: Vec<&ReportEntry> = metadata.prototypes.iter().filter(|e| e.matched.category == k).collect();
        let rel = PathBuf::from(category_dir(name)).join(PANEL_FILE);
        write_atomic(&out_dir.join(&rel), &png_bytes(&render_panel(ctx, &entries, cfg)?)?)?;
        files.push(rel);
    }
    let json = serde_json::to_string_pretty(&metadata)?;
    write_atomic(&out_dir.join(MATCHES_FILE), json.as_bytes())?;
    write_atomic(&out_dir.join(INDEX_FILE), render_index(&metadata).as_bytes())?;
    files.push(MATCHES_FILE.into());
    files.push(INDEX_FILE.into());
    Ok(ReportSummary {
        cards: metadata.prototypes.len(),
        panels: categories.len(),
        metadata,
        files,
    })
}
