//! Synthetic pill scenes standing in for the Pillbox corpus at desk scale:
//! a catalog of pill records, a deterministic scene renderer with exact
//! mask-derived boxes, label files, and split generation.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{Image, LabeledBox};

pub const GENERATOR_VERSION: u32 = 1;

/// 12 palette colors with pairwise RGB distance >= 0.25, so brightness
/// jitter of +-0.2 cannot collapse two classes.
pub const PALETTE: [([f32; 3], &str); 12] = [
    ([0.95, 0.95, 0.95], "white"),
    ([0.85, 0.15, 0.15], "red"),
    ([0.20, 0.30, 0.85], "blue"),
    ([0.15, 0.65, 0.25], "green"),
    ([0.95, 0.85, 0.15], "yellow"),
    ([0.95, 0.55, 0.10], "orange"),
    ([0.95, 0.60, 0.70], "pink"),
    ([0.55, 0.25, 0.70], "purple"),
    ([0.55, 0.35, 0.15], "brown"),
    ([0.60, 0.60, 0.60], "gray"),
    ([0.10, 0.65, 0.65], "teal"),
    ([0.10, 0.15, 0.45], "navy"),
];

pub const SHAPE_COUNT: usize = 3;
pub const GLYPH_COUNT: usize = 10;
/// shape x color x imprint capacity of the catalog.
pub const CATALOG_CAPACITY: usize = SHAPE_COUNT * PALETTE.len() * GLYPH_COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PillShape {
    Round,
    Oval,
    Capsule,
}

impl PillShape {
    pub fn from_index(i: usize) -> Self {
        match i % 3 {
            0 => PillShape::Round,
            1 => PillShape::Oval,
            _ => PillShape::Capsule,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PillShape::Round => "round",
            PillShape::Oval => "oval",
            PillShape::Capsule => "capsule",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "round" => Some(PillShape::Round),
            "oval" => Some(PillShape::Oval),
            "capsule" => Some(PillShape::Capsule),
            _ => None,
        }
    }
}

impl fmt::Display for PillShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pillbox-style record: appearance triple plus drug metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PillRecord {
    pub class_id: usize,
    pub shape: PillShape,
    pub color: [f32; 3],
    pub color_name: &'static str,
    /// glyph id 0..9, rendered as a seven-segment stroke pattern
    pub imprint: u8,
    pub size_mm: f64,
    pub active_ingredient: String,
    pub manufacturer: String,
}

#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub image: Image,
    pub boxes: Vec<LabeledBox>,
    pub image_id: String,
}

/// Builds `c` records with pairwise-distinct appearance. Distinct
/// (shape, color) pairs are exhausted first so classes stay visually
/// separable; imprint only disambiguates beyond 36 classes.
pub fn make_catalog(c: usize, seed: u64) -> Result<Vec<PillRecord>> {
    if c == 0 {
        return Err(Error::Config("catalog needs at least one class".into()));
    }
    if c > CATALOG_CAPACITY {
        return Err(Error::Config(format!(
            "catalog capacity is {CATALOG_CAPACITY} appearance triples, asked for {c}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca7a106);
    // seed-dependent color visitation order
    let mut color_order: Vec<usize> = (0..PALETTE.len()).collect();
    for i in (1..color_order.len()).rev() {
        color_order.swap(i, rng.gen_range(0..=i));
    }
    let mut records = Vec::with_capacity(c);
    for k in 0..c {
        let shape = PillShape::from_index(k);
        let color_idx = color_order[(k / SHAPE_COUNT) % PALETTE.len()];
        let imprint = ((k / (SHAPE_COUNT * PALETTE.len())) * 3 + k) % GLYPH_COUNT;
        let (color, color_name) = PALETTE[color_idx];
        records.push(PillRecord {
            class_id: k,
            shape,
            color,
            color_name,
            imprint: imprint as u8,
            size_mm: 11.0 + rng.gen_range(0.0..5.0),
            active_ingredient: format!("ingredient-{k}"),
            manufacturer: format!("maker-{k}"),
        });
    }
    // catalog invariant: appearance triples pairwise distinct
    for i in 0..records.len() {
        for j in i + 1..records.len() {
            let a = &records[i];
            let b = &records[j];
            debug_assert!(
                !(a.shape == b.shape && a.color == b.color && a.imprint == b.imprint),
                "duplicate appearance triple at classes {i}/{j}"
            );
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundKind {
    Flat,
    Gradient,
    Noise,
}

impl BackgroundKind {
    pub fn sample(rng: &mut impl Rng) -> Self {
        match rng.gen_range(0..3) {
            0 => BackgroundKind::Flat,
            1 => BackgroundKind::Gradient,
            _ => BackgroundKind::Noise,
        }
    }
}

/// One placed pill: everything needed to reproduce its alpha mask.
#[derive(Debug, Clone, Copy)]
pub struct PillInstance {
    pub class_id: usize,
    pub shape: PillShape,
    /// center in pixels
    pub cx: f64,
    pub cy: f64,
    /// long semi-axis in pixels
    pub a: f64,
    /// short semi-axis in pixels
    pub b: f64,
    /// orientation in radians
    pub phi: f64,
    pub imprint: u8,
}

impl PillInstance {
    /// Signed distance (pixels) from point to the pill outline; negative inside.
    pub fn sdf(&self, x: f64, y: f64) -> f64 {
        let (sin, cos) = self.phi.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let lx = cos * dx + sin * dy;
        let ly = -sin * dx + cos * dy;
        match self.shape {
            PillShape::Round => (lx * lx + ly * ly).sqrt() - self.a,
            PillShape::Oval => {
                let k = ((lx / self.a).powi(2) + (ly / self.b).powi(2)).sqrt();
                (k - 1.0) * self.b
            }
            PillShape::Capsule => {
                let half = self.a - self.b;
                let qx = lx.abs().min(half).max(-half);
                let ex = lx - qx.clamp(-half, half);
                (ex * ex + ly * ly).sqrt() - self.b
            }
        }
    }

    /// Anti-aliased coverage in [0,1].
    pub fn alpha(&self, x: f64, y: f64) -> f64 {
        (0.5 - self.sdf(x, y)).clamp(0.0, 1.0)
    }

    /// True on the cap half of a capsule (rendered in a darker tone, the
    /// usual two-part capsule look); false elsewhere and for other shapes.
    pub fn cap_half(&self, x: f64, y: f64) -> bool {
        if self.shape != PillShape::Capsule {
            return false;
        }
        let (sin, cos) = self.phi.sin_cos();
        cos * (x - self.cx) + sin * (y - self.cy) > 0.0
    }

    /// Coverage of the imprint strokes, in pill-local glyph coordinates.
    pub fn imprint_alpha(&self, x: f64, y: f64) -> f64 {
        let (sin, cos) = self.phi.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let lx = cos * dx + sin * dy;
        let ly = -sin * dx + cos * dy;
        let gs = self.b * 0.45;
        let stroke = (self.b * 0.12).max(0.6);
        let gx = lx / gs;
        let gy = ly / gs;
        let mut d = f64::INFINITY;
        for seg in glyph_segments(self.imprint) {
            d = d.min(segment_distance(gx, gy, &seg));
        }
        (0.5 - (d * gs - stroke)).clamp(0.0, 1.0)
    }

    /// Conservative pixel window containing the whole pill.
    pub fn window(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let r = self.a + 2.0;
        let x0 = (self.cx - r).floor().max(0.0) as usize;
        let y0 = (self.cy - r).floor().max(0.0) as usize;
        let x1 = ((self.cx + r).ceil() as usize).min(width);
        let y1 = ((self.cy + r).ceil() as usize).min(height);
        (x0, y0, x1, y1)
    }
}

/// Seven-segment stroke endpoints in glyph coordinates ([-1,1] box, y down).
fn glyph_segments(digit: u8) -> Vec<[f64; 4]> {
    const A: [f64; 4] = [-0.6, -1.0, 0.6, -1.0];
    const B: [f64; 4] = [0.6, -1.0, 0.6, 0.0];
    const C: [f64; 4] = [0.6, 0.0, 0.6, 1.0];
    const D: [f64; 4] = [-0.6, 1.0, 0.6, 1.0];
    const E: [f64; 4] = [-0.6, 0.0, -0.6, 1.0];
    const F: [f64; 4] = [-0.6, -1.0, -0.6, 0.0];
    const G: [f64; 4] = [-0.6, 0.0, 0.6, 0.0];
    match digit % 10 {
        0 => vec![A, B, C, D, E, F],
        1 => vec![B, C],
        2 => vec![A, B, G, E, D],
        3 => vec![A, B, G, C, D],
        4 => vec![F, G, B, C],
        5 => vec![A, F, G, C, D],
        6 => vec![A, F, G, E, C, D],
        7 => vec![A, B, C],
        8 => vec![A, B, C, D, E, F, G],
        _ => vec![A, B, C, F, G, D],
    }
}

fn segment_distance(px: f64, py: f64, seg: &[f64; 4]) -> f64 {
    let (ax, ay, bx, by) = (seg[0], seg[1], seg[2], seg[3]);
    let abx = bx - ax;
    let aby = by - ay;
    let apx = px - ax;
    let apy = py - ay;
    let len2 = abx * abx + aby * aby;
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0)
    };
    let dx = apx - t * abx;
    let dy = apy - t * aby;
    (dx * dx + dy * dy).sqrt()
}

/// Outcome counters attached to a rendered scene.
#[derive(Debug, Clone, Default)]
pub struct SceneStats {
    pub placement_failures: usize,
}

fn pill_box_iou(a: &(f64, f64, f64, f64), b: &(f64, f64, f64, f64)) -> f64 {
    let ix = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let iy = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = ix * iy;
    let ua = (a.2 - a.0) * (a.3 - a.1) + (b.2 - b.0) * (b.3 - b.1) - inter;
    if ua <= 0.0 {
        0.0
    } else {
        inter / ua
    }
}

/// Renders a scene onto a `canvas`x`canvas` frame. Boxes are the tight
/// bounds of each pill's rendered mask (alpha >= 0.5).
pub fn render_scene(
    catalog: &[PillRecord],
    rng: &mut impl Rng,
    n_pills: usize,
    bg: BackgroundKind,
    canvas: usize,
) -> (AnnotatedImage, SceneStats) {
    render_scene_with(catalog, rng, n_pills, bg, canvas, None)
}

/// Like [`render_scene`] but forces the first pill's class, used for
/// stratified class coverage during split generation.
pub fn render_scene_with(
    catalog: &[PillRecord],
    rng: &mut impl Rng,
    n_pills: usize,
    bg: BackgroundKind,
    canvas: usize,
    forced_class: Option<usize>,
) -> (AnnotatedImage, SceneStats) {
    let (scene, stats, _) = render_scene_parts(catalog, rng, n_pills, bg, canvas, forced_class);
    (scene, stats)
}

/// Full renderer output including the placed pill geometry (the labels are
/// derived from it; tests scan the geometry independently).
pub fn render_scene_parts(
    catalog: &[PillRecord],
    rng: &mut impl Rng,
    n_pills: usize,
    bg: BackgroundKind,
    canvas: usize,
    forced_class: Option<usize>,
) -> (AnnotatedImage, SceneStats, Vec<PillInstance>) {
    let mut img = render_background(rng, bg, canvas);
    let mut stats = SceneStats::default();
    let mut placed: Vec<PillInstance> = Vec::new();
    let mut boxes_px: Vec<(f64, f64, f64, f64)> = Vec::new();

    let px_per_mm = canvas as f64 / 58.0;
    for k in 0..n_pills {
        let class_id = match (k, forced_class) {
            (0, Some(c)) => c,
            _ => rng.gen_range(0..catalog.len()),
        };
        let rec = &catalog[class_id];
        let half = rec.size_mm * px_per_mm / 2.0;
        // capsules are longer than they are wide at the same nominal size
        let (a, b) = match rec.shape {
            PillShape::Round => (half, half),
            PillShape::Oval => (half, half * 0.72),
            PillShape::Capsule => (half * 1.1, half * 0.65),
        };
        let mut ok = false;
        for _attempt in 0..100 {
            let margin = a + 2.0;
            let cx = rng.gen_range(margin..canvas as f64 - margin);
            let cy = rng.gen_range(margin..canvas as f64 - margin);
            let phi = if rec.shape == PillShape::Round {
                0.0
            } else {
                rng.gen_range(0.0..std::f64::consts::PI)
            };
            let cand = PillInstance {
                class_id,
                shape: rec.shape,
                cx,
                cy,
                a,
                b,
                phi,
                imprint: rec.imprint,
            };
            let cand_box = (cx - a, cy - a, cx + a, cy + a);
            if boxes_px.iter().all(|bx| pill_box_iou(bx, &cand_box) <= 0.1) {
                placed.push(cand);
                boxes_px.push(cand_box);
                ok = true;
                break;
            }
        }
        if !ok {
            stats.placement_failures += 1;
        }
    }

    let mut labels = Vec::with_capacity(placed.len());
    for pill in &placed {
        let rec = &catalog[pill.class_id];
        let ink = [rec.color[0] * 0.3, rec.color[1] * 0.3, rec.color[2] * 0.3];
        let (x0, y0, x1, y1) = pill.window(canvas, canvas);
        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for y in y0..y1 {
            for x in x0..x1 {
                let fx = x as f64 + 0.5;
                let fy = y as f64 + 0.5;
                let alpha = pill.alpha(fx, fy) as f32;
                if alpha <= 0.0 {
                    continue;
                }
                let ia = pill.imprint_alpha(fx, fy) as f32;
                // capsules get the classic two-part look: a darker cap half
                let tone = if pill.cap_half(fx, fy) { 0.45 } else { 1.0 };
                for c in 0..3 {
                    let body = rec.color[c] * tone * (1.0 - ia) + ink[c] * ia;
                    let cur = img.get(y, x, c);
                    img.set(y, x, c, cur * (1.0 - alpha) + body * alpha);
                }
                if alpha >= 0.5 {
                    bx0 = bx0.min(x);
                    by0 = by0.min(y);
                    bx1 = bx1.max(x + 1);
                    by1 = by1.max(y + 1);
                }
            }
        }
        if bx0 == usize::MAX {
            continue;
        }
        labels.push(LabeledBox {
            class_id: pill.class_id,
            cx: (bx0 + bx1) as f64 / 2.0 / canvas as f64,
            cy: (by0 + by1) as f64 / 2.0 / canvas as f64,
            w: (bx1 - bx0) as f64 / canvas as f64,
            h: (by1 - by0) as f64 / canvas as f64,
        });
    }

    // global illumination factor, mild so colors stay diagnostic
    let brightness = rng.gen_range(0.9..1.1) as f32;
    for v in &mut img.data {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }

    (
        AnnotatedImage {
            image: img,
            boxes: labels,
            image_id: String::new(),
        },
        stats,
        placed,
    )
}

fn render_background(rng: &mut impl Rng, bg: BackgroundKind, canvas: usize) -> Image {
    let mut img = Image::new(canvas, canvas);
    match bg {
        BackgroundKind::Flat => {
            // near-neutral desk surface so pill colors stay identifiable
            let base = rng.gen_range(0.15f32..0.45);
            let col: [f32; 3] = [
                base + rng.gen_range(-0.04f32..0.04),
                base + rng.gen_range(-0.04f32..0.04),
                base + rng.gen_range(-0.04f32..0.04),
            ];
            for px in img.data.chunks_mut(3) {
                px.copy_from_slice(&col);
            }
        }
        BackgroundKind::Gradient => {
            let g0 = rng.gen_range(0.12f32..0.4);
            let g1 = rng.gen_range(0.2f32..0.5);
            let c0: [f32; 3] = [
                g0 + rng.gen_range(-0.04f32..0.04),
                g0 + rng.gen_range(-0.04f32..0.04),
                g0 + rng.gen_range(-0.04f32..0.04),
            ];
            let c1: [f32; 3] = [
                g1 + rng.gen_range(-0.04f32..0.04),
                g1 + rng.gen_range(-0.04f32..0.04),
                g1 + rng.gen_range(-0.04f32..0.04),
            ];
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let (sin, cos) = angle.sin_cos();
            for y in 0..canvas {
                for x in 0..canvas {
                    let t = (((x as f64 / canvas as f64 - 0.5) * cos
                        + (y as f64 / canvas as f64 - 0.5) * sin)
                        + 0.5)
                        .clamp(0.0, 1.0) as f32;
                    for c in 0..3 {
                        img.set(y, x, c, c0[c] * (1.0 - t) + c1[c] * t);
                    }
                }
            }
        }
        BackgroundKind::Noise => {
            let g = rng.gen_range(0.18f32..0.45);
            let base: [f32; 3] = [
                g + rng.gen_range(-0.04f32..0.04),
                g + rng.gen_range(-0.04f32..0.04),
                g + rng.gen_range(-0.04f32..0.04),
            ];
            for px in img.data.chunks_mut(3) {
                let n: f32 = rng.gen_range(-0.08..0.08);
                for c in 0..3 {
                    px[c] = (base[c] + n).clamp(0.0, 1.0);
                }
            }
        }
    }
    img
}

/// Writes one "class_id cx cy w h" line per box, 6 decimals.
pub fn save_labels(boxes: &[LabeledBox], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for b in boxes {
        writeln!(
            f,
            "{} {:.6} {:.6} {:.6} {:.6}",
            b.class_id, b.cx, b.cy, b.w, b.h
        )?;
    }
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<Vec<LabeledBox>> {
    let text = std::fs::read_to_string(path)?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad number {s:?}"),
            })
        };
        if parts.len() != 5 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 5 fields, got {}", parts.len()),
            });
        }
        boxes.push(LabeledBox {
            class_id: parts[0].parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad class id {:?}", parts[0]),
            })?,
            cx: parse(parts[1])?,
            cy: parse(parts[2])?,
            w: parse(parts[3])?,
            h: parse(parts[4])?,
        });
    }
    Ok(boxes)
}

pub fn save_catalog(catalog: &[PillRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "class_id,shape,r,g,b,imprint,size_mm,active_ingredient,manufacturer"
    )?;
    for r in catalog {
        writeln!(
            f,
            "{},{},{:.4},{:.4},{:.4},{},{:.3},{},{}",
            r.class_id,
            r.shape,
            r.color[0],
            r.color[1],
            r.color[2],
            r.imprint,
            r.size_mm,
            r.active_ingredient,
            r.manufacturer
        )?;
    }
    Ok(())
}

pub fn load_catalog(path: &Path) -> Result<Vec<PillRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let p: Vec<&str> = line.split(',').collect();
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        if p.len() != 9 {
            return Err(err(format!("expected 9 fields, got {}", p.len())));
        }
        let color = [
            p[2].parse().map_err(|_| err("bad r".into()))?,
            p[3].parse().map_err(|_| err("bad g".into()))?,
            p[4].parse().map_err(|_| err("bad b".into()))?,
        ];
        let color_name = nearest_color_name(&color);
        out.push(PillRecord {
            class_id: p[0].parse().map_err(|_| err("bad class id".into()))?,
            shape: PillShape::parse(p[1]).ok_or_else(|| err(format!("bad shape {:?}", p[1])))?,
            color,
            color_name,
            imprint: p[5].parse().map_err(|_| err("bad imprint".into()))?,
            size_mm: p[6].parse().map_err(|_| err("bad size".into()))?,
            active_ingredient: p[7].to_string(),
            manufacturer: p[8].to_string(),
        });
    }
    Ok(out)
}

pub fn nearest_color_name(color: &[f32; 3]) -> &'static str {
    PALETTE
        .iter()
        .min_by(|a, b| {
            let da: f32 = (0..3).map(|i| (a.0[i] - color[i]).powi(2)).sum();
            let db: f32 = (0..3).map(|i| (b.0[i] - color[i]).powi(2)).sum();
            da.partial_cmp(&db).unwrap()
        })
        .map(|p| p.1)
        .unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub catalog_path: PathBuf,
    pub seed: u64,
    pub version: u32,
    pub canvas: usize,
    /// (split, image path, label path), paths relative to root
    pub pairs: Vec<(Split, PathBuf, PathBuf)>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "catalog\t{}", self.catalog_path.display())?;
        writeln!(f, "seed\t{}", self.seed)?;
        writeln!(f, "version\t{}", self.version)?;
        writeln!(f, "canvas\t{}", self.canvas)?;
        for (split, img, lbl) in &self.pairs {
            writeln!(f, "{}\t{}\t{}", split, img.display(), lbl.display())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let text = std::fs::read_to_string(path)?;
        let mut catalog_path = PathBuf::new();
        let mut seed = 0;
        let mut version = 0;
        let mut canvas = 0;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let p: Vec<&str> = line.split('\t').collect();
            match p.as_slice() {
                ["catalog", v] => catalog_path = PathBuf::from(v),
                ["seed", v] => seed = v.parse().map_err(|_| err("bad seed".into()))?,
                ["version", v] => version = v.parse().map_err(|_| err("bad version".into()))?,
                ["canvas", v] => canvas = v.parse().map_err(|_| err("bad canvas".into()))?,
                ["train", img, lbl] => {
                    pairs.push((Split::Train, PathBuf::from(img), PathBuf::from(lbl)))
                }
                ["val", img, lbl] => {
                    pairs.push((Split::Val, PathBuf::from(img), PathBuf::from(lbl)))
                }
                [""] => {}
                _ => return Err(err(format!("unrecognized manifest line {line:?}"))),
            }
        }
        Ok(DatasetManifest {
            root,
            catalog_path,
            seed,
            version,
            canvas,
            pairs,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<AnnotatedImage>> {
        let mut out = Vec::new();
        for (s, img, lbl) in &self.pairs {
            if *s != split {
                continue;
            }
            let image = Image::read_ppm(&self.root.join(img))?;
            let boxes = load_labels(&self.root.join(lbl))?;
            out.push(AnnotatedImage {
                image,
                boxes,
                image_id: img
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
            });
        }
        Ok(out)
    }

    pub fn load_catalog(&self) -> Result<Vec<PillRecord>> {
        load_catalog(&self.root.join(&self.catalog_path))
    }
}

/// Generates a train/val dataset on disk. Deterministic per seed; each class
/// is forced into both splits while counts permit.
pub fn generate_split(
    catalog: &[PillRecord],
    n_train: usize,
    n_val: usize,
    seed: u64,
    canvas: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::Config("split counts must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("labels"))?;
    let catalog_rel = PathBuf::from("catalog.csv");
    save_catalog(catalog, &out_dir.join(&catalog_rel))?;

    let mut pairs = Vec::new();
    for (split, count) in [(Split::Train, n_train), (Split::Val, n_val)] {
        for i in 0..count {
            // independent per-scene stream so scenes are order-insensitive
            let stream = match split {
                Split::Train => i as u64,
                Split::Val => 1_000_000 + i as u64,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(stream.wrapping_mul(0x9e3779b97f4a7c15)));
            let n_pills = rng.gen_range(4..=7);
            let bg = BackgroundKind::sample(&mut rng);
            let forced = if i < catalog.len() {
                Some(i % catalog.len())
            } else {
                None
            };
            let (mut scene, _) =
                render_scene_with(catalog, &mut rng, n_pills, bg, canvas, forced);
            let stem = format!("{split}_{i:05}");
            scene.image_id = stem.clone();
            let img_rel = PathBuf::from(format!("images/{stem}.ppm"));
            let lbl_rel = PathBuf::from(format!("labels/{stem}.txt"));
            scene.image.write_ppm(&out_dir.join(&img_rel))?;
            save_labels(&scene.boxes, &out_dir.join(&lbl_rel))?;
            pairs.push((split, img_rel, lbl_rel));
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        catalog_path: catalog_rel,
        seed,
        version: GENERATOR_VERSION,
        canvas,
        pairs,
    };
    manifest.save(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_spread() {
        for i in 0..PALETTE.len() {
            for j in i + 1..PALETTE.len() {
                let d: f32 = (0..3)
                    .map(|c| (PALETTE[i].0[c] - PALETTE[j].0[c]).powi(2))
                    .sum::<f32>()
                    .sqrt();
                assert!(d >= 0.25, "{} vs {} only {}", PALETTE[i].1, PALETTE[j].1, d);
            }
        }
    }

    #[test]
    fn catalog_32_distinct() {
        let cat = make_catalog(32, 9).unwrap();
        assert_eq!(cat.len(), 32);
        for i in 0..32 {
            for j in i + 1..32 {
                let (a, b) = (&cat[i], &cat[j]);
                assert!(
                    !(a.shape == b.shape && a.color == b.color && a.imprint == b.imprint),
                    "classes {i}/{j} share appearance"
                );
            }
        }
    }

    #[test]
    fn catalog_single_and_determinism() {
        assert_eq!(make_catalog(1, 0).unwrap().len(), 1);
        let a = make_catalog(32, 5).unwrap();
        let b = make_catalog(32, 5).unwrap();
        assert_eq!(a, b);
        assert!(make_catalog(CATALOG_CAPACITY + 1, 0).is_err());
        assert!(make_catalog(0, 0).is_err());
    }

    #[test]
    fn empty_scene() {
        let cat = make_catalog(4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (scene, _) = render_scene(&cat, &mut rng, 0, BackgroundKind::Flat, 64);
        assert!(scene.boxes.is_empty());
        assert_eq!(scene.image.height, 64);
    }

    #[test]
    fn round_pill_box_geometry() {
        let mut cat = make_catalog(1, 0).unwrap();
        cat[0].shape = PillShape::Round;
        cat[0].size_mm = 12.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (scene, _) = render_scene(&cat, &mut rng, 1, BackgroundKind::Flat, 160);
        assert_eq!(scene.boxes.len(), 1);
        let b = scene.boxes[0];
        // diameter 12mm * (160/58) px/mm ~= 33.1 px on a 160 canvas
        let expect = 12.0 * (160.0 / 58.0) / 160.0;
        assert!((b.w - expect).abs() <= 2.0 / 160.0, "w {}", b.w);
        assert!((b.h - expect).abs() <= 2.0 / 160.0, "h {}", b.h);
    }

    #[test]
    fn labels_roundtrip_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.txt");
        let p2 = dir.path().join("b.txt");
        let boxes = vec![
            LabeledBox {
                class_id: 3,
                cx: 0.5,
                cy: 0.5,
                w: 0.25,
                h: 0.125,
            },
            LabeledBox {
                class_id: 0,
                cx: 0.123456789,
                cy: 0.9,
                w: 0.0501,
                h: 0.04,
            },
        ];
        save_labels(&boxes, &p1).unwrap();
        let text = std::fs::read_to_string(&p1).unwrap();
        assert!(text.starts_with("3 0.500000 0.500000 0.250000 0.125000\n"));
        let loaded = load_labels(&p1).unwrap();
        save_labels(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn empty_labels_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        save_labels(&[], &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 0);
        assert!(load_labels(&p).unwrap().is_empty());
    }

    #[test]
    fn malformed_label_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        std::fs::write(&p, "1 0.5 0.5 0.1\n").unwrap();
        match load_labels(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn catalog_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cat.csv");
        let cat = make_catalog(8, 2).unwrap();
        save_catalog(&cat, &p).unwrap();
        let back = load_catalog(&p).unwrap();
        assert_eq!(back.len(), 8);
        for (a, b) in cat.iter().zip(&back) {
            assert_eq!(a.class_id, b.class_id);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.imprint, b.imprint);
            assert_eq!(a.color_name, b.color_name);
        }
    }
}
