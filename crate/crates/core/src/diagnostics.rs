//! Visual diagnostics: class activation maps, branch-score scatter plots and
//! ROC figures.
//!
//! Figures are drawn by a small rasteriser into PNG and written as SVG text
//! with fixed number formatting, so the same input always produces the same
//! bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{AttackKind, AttackType};
use crate::error::{Error, Result};
use crate::evalmetrics::{RocPoint, ScoreRecord};
use crate::imaging::GrayImage;
use crate::mixnet::MixNetModel;
use crate::nn::Tensor;

/// Which head row weights the feature maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamClass {
    #[default]
    Attack,
    Genuine,
}

impl CamClass {
    fn index(self) -> usize {
        match self {
            CamClass::Genuine => 0,
            CamClass::Attack => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, in `[0, 1]`.
    pub values: Vec<f64>,
    pub branch: AttackType,
    pub source_sample: String,
}

impl ActivationMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Share of the map's mass inside `(x0, y0, x1, y1)` (half-open) divided
    /// by the region's share of the area. 1 means no preference; 0 for an
    /// all-zero map.
    pub fn region_mass_ratio(&self, region: (usize, usize, usize, usize)) -> f64 {
        let (x0, y0, x1, y1) = region;
        let total: f64 = self.values.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let inside: f64 = (y0..y1.min(self.height))
            .flat_map(|y| (x0..x1.min(self.width)).map(move |x| (x, y)))
            .map(|(x, y)| self.get(x, y))
            .sum();
        let area = ((x1.min(self.width) - x0) * (y1.min(self.height) - y0)) as f64;
        (inside / total) / (area / (self.width * self.height) as f64)
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.values.iter().map(|v| (v * 255.0).round()).collect(),
        }
    }

    /// Heat-coloured PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut c = Canvas::new(self.width, self.height, WHITE);
        for y in 0..self.height {
            for x in 0..self.width {
                c.put(x as i64, y as i64, heat(self.get(x, y)));
            }
        }
        c.save_png(path)
    }
}

fn heat(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (3.0 * v).min(1.0);
    let g = (3.0 * v - 1.0).clamp(0.0, 1.0);
    let b = (3.0 * v - 2.0).clamp(0.0, 1.0);
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Class activation map of one branch for one input.
pub fn cam(
    model: &MixNetModel,
    image: &Tensor,
    branch: AttackType,
    class: CamClass,
    source_sample: impl Into<String>,
) -> Result<ActivationMap> {
    let net = model
        .branch(branch)
        .ok_or_else(|| Error::InvalidInput(format!("model has no `{branch}` branch")))?;
    let (out, _) = net.forward(image)?;
    let values = cam_from_features(&out.features, net.head_class_weights(class.index()), image.height, image.width)?;
    Ok(ActivationMap {
        width: image.width,
        height: image.height,
        values,
        branch,
        source_sample: source_sample.into(),
    })
}

/// Weighted channel sum, rectified, bilinearly resized to `height x width`
/// and min-max normalized.
pub fn cam_from_features(features: &Tensor, weights: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
    if weights.len() != features.channels {
        return Err(Error::Shape(format!(
            "{} head weights for {} feature channels",
            weights.len(),
            features.channels
        )));
    }
    let plane = features.height * features.width;
    let mut map = vec![0.0; plane];
    for (c, w) in weights.iter().enumerate() {
        for (m, f) in map.iter_mut().zip(features.plane(c)) {
            *m += w * f;
        }
    }
    map.iter_mut().for_each(|v| *v = v.max(0.0));
    let up = bilinear_resize(&map, features.height, features.width, height, width);
    Ok(min_max(up))
}

/// Half-pixel-centre bilinear resampling with edge clamping.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |o: usize, n_out: usize, n_in: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

fn min_max(mut v: Vec<f64>) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        v.iter_mut().for_each(|x| *x = 0.0);
    } else {
        v.iter_mut().for_each(|x| *x = (*x - lo) / (hi - lo));
    }
    v
}

/// One row of the branch-score table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub sample_id: String,
    pub print_score: f64,
    pub replay_score: f64,
    pub mask_score: f64,
    pub class: AttackKind,
}

impl ScatterRow {
    pub fn coords(&self) -> [f64; 3] {
        [self.print_score, self.replay_score, self.mask_score]
    }
}

pub fn scatter_rows(records: &[ScoreRecord]) -> Result<Vec<ScatterRow>> {
    records
        .iter()
        .map(|r| match (r.print_score, r.replay_score, r.mask_score) {
            (Some(p), Some(rp), Some(m)) => Ok(ScatterRow {
                sample_id: r.sample_id.clone(),
                print_score: p,
                replay_score: rp,
                mask_score: m,
                class: r.attack_class,
            }),
            _ => Err(Error::InvalidInput(format!(
                "sample `{}` lacks one of the three branch scores; use the 2D scatter for two-branch models",
                r.sample_id
            ))),
        })
        .collect()
}

pub fn write_scatter_csv(path: &Path, rows: &[ScatterRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scatter_csv(path: &Path) -> Result<Vec<ScatterRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

/// Mean branch scores per class.
pub fn class_centroids(rows: &[ScatterRow]) -> BTreeMap<AttackKind, [f64; 3]> {
    let mut acc: BTreeMap<AttackKind, ([f64; 3], usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.class).or_insert(([0.0; 3], 0));
        for (a, v) in e.0.iter_mut().zip(r.coords()) {
            *a += v;
        }
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s.map(|v| v / n as f64)))
        .collect()
}

/// Paths written by an export.
#[derive(Clone, Debug, PartialEq)]
pub struct FigureFiles {
    pub table: Option<PathBuf>,
    pub png: PathBuf,
    pub svg: PathBuf,
}

/// Writes `<stem>.csv`, `<stem>.png` and `<stem>.svg` for three-branch scores.
pub fn score_scatter_export(records: &[ScoreRecord], stem: &Path) -> Result<(Vec<ScatterRow>, FigureFiles)> {
    let rows = scatter_rows(records)?;
    if rows.is_empty() {
        return Err(Error::InvalidInput("no scores to plot".into()));
    }
    let files = FigureFiles {
        table: Some(stem.with_extension("csv")),
        png: stem.with_extension("png"),
        svg: stem.with_extension("svg"),
    };
    write_scatter_csv(files.table.as_ref().expect("set above"), &rows)?;
    let fig = scatter_figure(&rows);
    fig.save(&files.png, &files.svg)?;
    Ok((rows, files))
}

/// Two-branch variant: CSV with the two present branch scores and a 2D plot.
pub fn score_scatter_export_2d(records: &[ScoreRecord], stem: &Path) -> Result<FigureFiles> {
    let pick = |r: &ScoreRecord| -> Vec<(&'static str, f64)> {
        [("print", r.print_score), ("replay", r.replay_score), ("mask", r.mask_score)]
            .into_iter()
            .filter_map(|(n, s)| s.map(|v| (n, v)))
            .collect()
    };
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidInput("no scores to plot".into()))?;
    let names: Vec<&str> = pick(first).iter().map(|p| p.0).collect();
    if names.len() != 2 {
        return Err(Error::InvalidInput(format!(
            "the 2D scatter needs exactly two branch scores, found {}",
            names.len()
        )));
    }
    let table = stem.with_extension("csv");
    let mut w = csv::Writer::from_path(&table).map_err(|e| csv_err(&table, e))?;
    w.write_record(["sample_id", &format!("{}_score", names[0]), &format!("{}_score", names[1]), "class"])
        .map_err(|e| csv_err(&table, e))?;
    let mut pts = Vec::with_capacity(records.len());
    for r in records {
        let p = pick(r);
        if p.iter().map(|q| q.0).collect::<Vec<_>>() != names {
            return Err(Error::InvalidInput(format!("sample `{}` has different branches", r.sample_id)));
        }
        w.write_record([r.sample_id.clone(), p[0].1.to_string(), p[1].1.to_string(), r.attack_class.to_string()])
            .map_err(|e| csv_err(&table, e))?;
        pts.push(((p[0].1, p[1].1), r.attack_class));
    }
    w.flush().map_err(|e| Error::io(&table, e))?;

    let mut fig = Figure::new(FIG_W, FIG_H);
    let (ox, oy, side) = (60.0, 40.0, 300.0);
    fig.axes_box(ox, oy, side, names[0], names[1]);
    for ((x, y), class) in pts {
        fig.dot(ox + x * side, oy + side - y * side, 3.0, class_colour(class));
    }
    fig.legend(&class_legend(), ox + side + 20.0, oy);
    let files = FigureFiles {
        table: Some(table),
        png: stem.with_extension("png"),
        svg: stem.with_extension("svg"),
    };
    fig.save(&files.png, &files.svg)?;
    Ok(files)
}

const FIG_W: usize = 480;
const FIG_H: usize = 400;

fn class_colour(c: AttackKind) -> [u8; 3] {
    match c {
        AttackKind::Genuine => [44, 160, 44],
        AttackKind::Print => [31, 119, 180],
        AttackKind::Replay => [255, 127, 14],
        AttackKind::Mask => [214, 39, 40],
    }
}

fn class_legend() -> Vec<(String, [u8; 3])> {
    [AttackKind::Genuine, AttackKind::Print, AttackKind::Replay, AttackKind::Mask]
        .into_iter()
        .map(|k| (k.to_string(), class_colour(k)))
        .collect()
}

/// Fixed oblique view of the unit cube.
fn project(p: [f64; 3]) -> (f64, f64, f64) {
    let (az, el) = (-50f64.to_radians(), 25f64.to_radians());
    let (x, y, z) = (p[0] - 0.5, p[1] - 0.5, p[2] - 0.5);
    let sx = x * az.cos() - y * az.sin();
    let depth = x * az.sin() + y * az.cos();
    let sy = z * el.cos() - depth * el.sin();
    let scale = 190.0;
    (200.0 + sx * scale, 200.0 - sy * scale, depth)
}

fn scatter_figure(rows: &[ScatterRow]) -> Figure {
    let mut fig = Figure::new(FIG_W, FIG_H);
    let corners = |i: usize| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64];
    for a in 0..8usize {
        for bit in [1, 2, 4] {
            let b = a | bit;
            if b != a {
                let (x0, y0, _) = project(corners(a));
                let (x1, y1, _) = project(corners(b));
                let axis = a == 0;
                fig.line(x0, y0, x1, y1, if axis { BLACK } else { GREY });
            }
        }
    }
    for (label, p) in [("print", [1.08, 0.0, 0.0]), ("replay", [0.0, 1.08, 0.0]), ("mask", [0.0, 0.0, 1.06])] {
        let (x, y, _) = project(p);
        fig.text(x - 12.0, y - 4.0, label, BLACK);
    }
    // Painter's order: far points first, ties by row order.
    let mut pts: Vec<(f64, f64, f64, AttackKind)> = rows
        .iter()
        .map(|r| {
            let (x, y, d) = project(r.coords());
            (x, y, d, r.class)
        })
        .collect();
    pts.sort_by(|a, b| b.2.total_cmp(&a.2));
    for (x, y, _, c) in pts {
        fig.dot(x, y, 3.0, class_colour(c));
    }
    fig.legend(&class_legend(), 390.0, 20.0);
    fig
}

/// A labelled ROC curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocSeries {
    pub label: String,
    pub points: Vec<RocPoint>,
}

const SERIES_COLOURS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

/// Draws one curve per series (FPR on x, TPR on y) with a legend. Returns
/// the number of curves drawn.
pub fn roc_plot(series: &[RocSeries], png: &Path, svg: &Path) -> Result<usize> {
    if series.is_empty() {
        return Err(Error::InvalidInput("no ROC series to plot".into()));
    }
    if let Some(s) = series.iter().find(|s| s.points.is_empty()) {
        return Err(Error::InvalidInput(format!("ROC series `{}` has no points", s.label)));
    }
    let mut fig = Figure::new(FIG_W, FIG_H);
    let (ox, oy, side) = (60.0, 40.0, 300.0);
    fig.axes_box(ox, oy, side, "FPR", "TPR");
    let mut legend = Vec::new();
    for (i, s) in series.iter().enumerate() {
        let colour = SERIES_COLOURS[i % SERIES_COLOURS.len()];
        let pts: Vec<(f64, f64)> = s
            .points
            .iter()
            .map(|p| (ox + p.fpr.clamp(0.0, 1.0) * side, oy + side - p.tpr.clamp(0.0, 1.0) * side))
            .collect();
        fig.polyline(&pts, colour);
        legend.push((s.label.clone(), colour));
    }
    fig.legend(&legend, ox + side + 12.0, oy);
    fig.save(png, svg)?;
    Ok(series.len())
}

const WHITE: [u8; 3] = [255, 255, 255];
const BLACK: [u8; 3] = [0, 0, 0];
const GREY: [u8; 3] = [170, 170, 170];

/// Raster and SVG drawn in lockstep.
struct Figure {
    canvas: Canvas,
    svg: String,
}

impl Figure {
    fn new(w: usize, h: usize) -> Self {
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        Figure {
            canvas: Canvas::new(w, h, WHITE),
            svg,
        }
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: [u8; 3]) {
        self.canvas.line(x0, y0, x1, y1, c);
        let _ = writeln!(
            self.svg,
            r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y1:.2}" stroke="{}" stroke-width="1"/>"#,
            hex(c)
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], c: [u8; 3]) {
        for w in pts.windows(2) {
            self.canvas.line(w[0].0, w[0].1, w[1].0, w[1].1, c);
            self.canvas.line(w[0].0 + 0.7, w[0].1, w[1].0 + 0.7, w[1].1, c);
        }
        if pts.len() == 1 {
            self.canvas.disc(pts[0].0, pts[0].1, 2.0, c);
        }
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.svg,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            coords.join(" "),
            hex(c)
        );
    }

    fn dot(&mut self, x: f64, y: f64, r: f64, c: [u8; 3]) {
        self.canvas.disc(x, y, r, c);
        let _ = writeln!(self.svg, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.1}" fill="{}"/>"#, hex(c));
    }

    fn text(&mut self, x: f64, y: f64, s: &str, c: [u8; 3]) {
        self.canvas.text(x.round() as i64, y.round() as i64, s, c);
        let _ = writeln!(
            self.svg,
            r#"<text x="{x:.2}" y="{:.2}" font-family="monospace" font-size="10" fill="{}">{}</text>"#,
            y + 8.0,
            hex(c),
            escape(s)
        );
    }

    fn axes_box(&mut self, ox: f64, oy: f64, side: f64, xlabel: &str, ylabel: &str) {
        for k in 0..=4 {
            let t = k as f64 / 4.0;
            let gx = ox + t * side;
            let gy = oy + side - t * side;
            self.line(gx, oy, gx, oy + side, GREY);
            self.line(ox, gy, ox + side, gy, GREY);
            let label = format!("{t:.2}");
            self.text(gx - 16.0, oy + side + 6.0, &label, BLACK);
            self.text(ox - 40.0, gy - 4.0, &label, BLACK);
        }
        self.line(ox, oy + side, ox + side, oy + side, BLACK);
        self.line(ox, oy, ox, oy + side, BLACK);
        self.text(ox + side / 2.0 - 12.0, oy + side + 20.0, xlabel, BLACK);
        self.text(ox - 4.0, oy - 16.0, ylabel, BLACK);
    }

    fn legend(&mut self, entries: &[(String, [u8; 3])], x: f64, y: f64) {
        for (i, (label, c)) in entries.iter().enumerate() {
            let yy = y + 14.0 * i as f64;
            self.canvas.fill_rect(x as i64, yy as i64, 8, 8, *c);
            let _ = writeln!(
                self.svg,
                r#"<rect x="{x:.2}" y="{yy:.2}" width="8" height="8" fill="{}"/>"#,
                hex(*c)
            );
            self.text(x + 12.0, yy, label, BLACK);
        }
    }

    fn save(mut self, png: &Path, svg: &Path) -> Result<()> {
        self.svg.push_str("</svg>\n");
        self.canvas.save_png(png)?;
        std::fs::write(svg, &self.svg).map_err(|e| Error::io(svg, e))
    }
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize, bg: [u8; 3]) -> Self {
        Canvas {
            w,
            h,
            px: bg.iter().copied().cycle().take(w * h * 3).collect(),
        }
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = (y as usize * self.w + x as usize) * 3;
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: [u8; 3]) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            self.put(
                (x0 + (x1 - x0) * t).round() as i64,
                (y0 + (y1 - y0) * t).round() as i64,
                c,
            );
        }
    }

    fn disc(&mut self, cx: f64, cy: f64, r: f64, c: [u8; 3]) {
        let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
        let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= r * r {
                    self.put(x, y, c);
                }
            }
        }
    }

    fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: [u8; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, c);
            }
        }
    }

    /// 8x8 bitmap glyphs, printable ASCII only.
    fn text(&mut self, x: i64, y: i64, s: &str, c: [u8; 3]) {
        for (i, ch) in s.chars().enumerate() {
            let code = ch as usize;
            let glyph = if code < 128 { font8x8::legacy::BASIC_LEGACY[code] } else { [0; 8] };
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..8 {
                    if bits & (1 << col) != 0 {
                        self.put(x + 8 * i as i64 + col, y + row as i64, c);
                    }
                }
            }
        }
    }

    fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.w as u32, self.h as u32, self.px.clone()).expect("buffer matches size");
        img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_identity_and_constant() {
        let src: Vec<f64> = (0..12).map(f64::from).collect();
        assert_eq!(bilinear_resize(&src, 3, 4, 3, 4), src);
        let up = bilinear_resize(&[2.0; 4], 2, 2, 7, 5);
        assert!(up.iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn equal_head_weights_give_normalized_channel_sum() {
        let f = Tensor::from_vec(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 0.0, 5.0]).unwrap();
        let m = cam_from_features(&f, &[0.7, 0.7], 2, 2).unwrap();
        // Sum = [1, 3, 3, 9] -> min-max.
        let want = [0.0, 0.25, 0.25, 1.0];
        for (a, b) in m.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{m:?}");
        }
    }

    #[test]
    fn constant_map_is_all_zero() {
        let f = Tensor::from_vec(1, 2, 2, vec![-1.0; 4]).unwrap();
        let m = cam_from_features(&f, &[1.0], 8, 8).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heat_endpoints() {
        assert_eq!(heat(0.0), [0, 0, 0]);
        assert_eq!(heat(1.0), [255, 255, 255]);
    }
}
