//! Region-proposal plumbing. The recognition engine is detector-agnostic:
//! candidate boxes arrive through a JSON-lines detections file (see
//! [`load_proposals`]), and desk-scale end-to-end runs can fabricate shelf
//! photos with exact ground truth ([`gen_shelf`]) plus detector-like
//! proposals with controllable noise ([`stub_detect`]).

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::img::{image_dims, paste, resize_bilinear, Rect};
use crate::tensor::Tensor;

/// One candidate product region in a scene image, top-left pixel origin.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionProposal {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    /// Detector trust score in `[0, 1]`.
    pub confidence: f32,
    /// True when clamping to image bounds altered the raw box.
    pub clamped: bool,
}

impl RegionProposal {
    pub fn new(x: i64, y: i64, w: i64, h: i64, confidence: f32) -> Self {
        RegionProposal { x, y, w, h, confidence, clamped: false }
    }

    /// `(x, y, w, h)` tuple for geometry helpers.
    pub fn bounds(&self) -> (i64, i64, i64, i64) {
        (self.x, self.y, self.w, self.h)
    }

    /// Pixel rectangle of the box. Requires a non-negative origin and
    /// positive size, which [`clamp_proposals`] guarantees.
    pub fn rect(&self) -> Result<Rect> {
        if self.x < 0 || self.y < 0 || self.w <= 0 || self.h <= 0 {
            return Err(Error::Validation(format!(
                "box at ({}, {}) size {}x{} cannot be cropped; clamp it to the image first",
                self.x, self.y, self.w, self.h
            )));
        }
        Ok(Rect::new(self.x as u32, self.y as u32, self.w as u32, self.h as u32))
    }
}

/// Pixel overlap between two `(x, y, w, h)` boxes; zero when disjoint.
pub fn intersection_area(a: (i64, i64, i64, i64), b: (i64, i64, i64, i64)) -> i64 {
    let ix = (a.0 + a.2).min(b.0 + b.2) - a.0.max(b.0);
    let iy = (a.1 + a.3).min(b.1 + b.3) - a.1.max(b.1);
    ix.max(0) * iy.max(0)
}

#[derive(Serialize, Deserialize)]
struct DetectionLine {
    image: String,
    x: i64,
    y: i64,
    w: i64,
    h: i64,
    conf: f32,
}

fn validate_box_fields(w: i64, h: i64, conf: f32, lineno: usize) -> Result<()> {
    if w <= 0 || h <= 0 {
        return Err(Error::Validation(format!(
            "line {lineno}: box size {w}x{h} must be positive"
        )));
    }
    if !(0.0..=1.0).contains(&conf) {
        return Err(Error::Validation(format!(
            "line {lineno}: confidence {conf} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Stable sort by descending confidence; equal scores keep their order.
pub fn sort_by_confidence(props: &mut [RegionProposal]) {
    props.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
}

/// Reads a detections file — one JSON object per line with schema
/// `{"image", "x", "y", "w", "h", "conf"}` — and groups the proposals by
/// image name, each group sorted by descending confidence. Unknown extra
/// keys are ignored, so a ground-truth file doubles as a perfect-detector
/// input. Boxes are not yet clamped; pair with [`clamp_proposals`] once the
/// image dimensions are known.
pub fn load_proposals(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<RegionProposal>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut by_image: BTreeMap<String, Vec<RegionProposal>> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let det: DetectionLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        validate_box_fields(det.w, det.h, det.conf, lineno)?;
        by_image
            .entry(det.image)
            .or_default()
            .push(RegionProposal::new(det.x, det.y, det.w, det.h, det.conf));
    }
    for props in by_image.values_mut() {
        sort_by_confidence(props);
    }
    Ok(by_image)
}

/// Writes proposals grouped by image in the JSON-lines detections format.
/// Inverse of [`load_proposals`].
pub fn write_detections(
    path: impl AsRef<Path>,
    by_image: &BTreeMap<String, Vec<RegionProposal>>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (image, props) in by_image {
        for p in props {
            let line = DetectionLine {
                image: image.clone(),
                x: p.x,
                y: p.y,
                w: p.w,
                h: p.h,
                conf: p.confidence,
            };
            serde_json::to_writer(&mut out, &line)
                .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Clamps every proposal to a `width` x `height` image. Boxes entirely
/// outside the image are dropped; boxes that had to be cut keep their
/// surviving part and are flagged. Order is preserved.
pub fn clamp_proposals(props: Vec<RegionProposal>, width: u32, height: u32) -> Vec<RegionProposal> {
    let (iw, ih) = (width as i64, height as i64);
    let mut kept = Vec::with_capacity(props.len());
    for mut p in props {
        let x0 = p.x.max(0);
        let y0 = p.y.max(0);
        let x1 = (p.x + p.w).min(iw);
        let y1 = (p.y + p.h).min(ih);
        if x1 <= x0 || y1 <= y0 {
            continue;
        }
        let altered = x0 != p.x || y0 != p.y || x1 != p.x + p.w || y1 != p.y + p.h;
        p.x = x0;
        p.y = y0;
        p.w = x1 - x0;
        p.h = y1 - y0;
        p.clamped = p.clamped || altered;
        kept.push(p);
    }
    kept
}

/// How ground truth annotates a scene: one box per placed instance
/// (`Management`), or one box per spatial cluster of same-product instances
/// (`Customer`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMode {
    Customer,
    Management,
}

impl fmt::Display for AnnotationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnnotationMode::Customer => "customer",
            AnnotationMode::Management => "management",
        })
    }
}

impl FromStr for AnnotationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "customer" => Ok(AnnotationMode::Customer),
            "management" => Ok(AnnotationMode::Management),
            other => Err(Error::Validation(format!(
                "unknown annotation mode '{other}' (expected 'customer' or 'management')"
            ))),
        }
    }
}

/// Ground-truth box with its product label.
#[derive(Clone, Debug, PartialEq)]
pub struct GtBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    pub product_id: String,
    pub category_id: String,
}

impl GtBox {
    pub fn bounds(&self) -> (i64, i64, i64, i64) {
        (self.x, self.y, self.w, self.h)
    }
}

/// A synthetic shelf photo with exact annotations.
#[derive(Clone, Debug)]
pub struct ShelfScene {
    pub image: Tensor,
    pub ground_truth: Vec<GtBox>,
    pub mode: AnnotationMode,
}

/// Reference product image used to populate scenes.
#[derive(Clone, Debug)]
pub struct ShelfRef {
    pub product_id: String,
    pub category_id: String,
    pub image: Tensor,
}

/// Builds a `rows` x `cols` shelf image by pasting one randomly chosen
/// (with repetition), optionally distorted reference product into each
/// `cell`-pixel grid cell, offset by a uniform integer jitter of at most
/// `jitter_frac` (≤ 0.1) of the cell size. Items are sized to 80% of the
/// cell, so the paste margin absorbs the jitter and every placement stays
/// inside its own cell — which is what makes management-mode boxes
/// non-overlapping by construction (asserted).
///
/// Management-mode ground truth records each placement; customer mode
/// merges 4-adjacent cells holding the same product into one cluster box.
/// The result is a pure function of the inputs and the RNG state.
#[allow(clippy::too_many_arguments)]
pub fn gen_shelf(
    refs: &[ShelfRef],
    rows: usize,
    cols: usize,
    cell: usize,
    distortion: &AugmentConfig,
    jitter_frac: f64,
    mode: AnnotationMode,
    rng: &mut impl Rng,
) -> Result<ShelfScene> {
    if refs.is_empty() {
        return Err(Error::InsufficientData(
            "scene generation needs at least one reference image".into(),
        ));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Config("shelf layout needs at least one row and column".into()));
    }
    if cell < 8 {
        return Err(Error::Config(format!(
            "cell size {cell} px is below the 8 px minimum"
        )));
    }
    if !(0.0..=0.1).contains(&jitter_frac) {
        return Err(Error::Config(format!(
            "cell jitter fraction {jitter_frac} outside [0, 0.1]"
        )));
    }

    // Neutral shelf background: light gray with a faint speckle.
    let (h, w) = (rows * cell, cols * cell);
    let mut data = Vec::with_capacity(h * w * 3);
    for _ in 0..h * w {
        let v = (0.82f32 + rng.random_range(-0.03f32..=0.03)).clamp(0.0, 1.0);
        data.extend_from_slice(&[v, v, v]);
    }
    let mut canvas = Tensor::new(vec![h, w, 3], data)?;

    let item = ((cell as f64) * 0.8).round() as usize;
    let margin = (cell - item) / 2;
    let jmax = (((cell as f64) * jitter_frac).floor() as i64)
        .min(margin as i64)
        .min((cell - item - margin) as i64);

    let mut placements: Vec<GtBox> = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let pick = &refs[rng.random_range(0..refs.len())];
            let distorted = augment(&pick.image, rng, distortion)?;
            let sized = resize_bilinear(&distorted, item, item)?;
            let (dx, dy) = if jmax > 0 {
                (rng.random_range(-jmax..=jmax), rng.random_range(-jmax..=jmax))
            } else {
                (0, 0)
            };
            let x0 = (c * cell + margin) as i64 + dx;
            let y0 = (r * cell + margin) as i64 + dy;
            paste(&mut canvas, &sized, x0 as u32, y0 as u32)?;
            placements.push(GtBox {
                x: x0,
                y: y0,
                w: item as i64,
                h: item as i64,
                product_id: pick.product_id.clone(),
                category_id: pick.category_id.clone(),
            });
        }
    }

    for (i, a) in placements.iter().enumerate() {
        for b in placements.iter().skip(i + 1) {
            assert_eq!(
                intersection_area(a.bounds(), b.bounds()),
                0,
                "instance boxes must not overlap by construction"
            );
        }
    }

    let ground_truth = match mode {
        AnnotationMode::Management => placements,
        AnnotationMode::Customer => merge_product_clusters(&placements, rows, cols),
    };
    Ok(ShelfScene { image: canvas, ground_truth, mode })
}

/// Merges 4-adjacent grid cells holding the same product into one bounding
/// box per connected cluster. `placements` is in row-major cell order.
fn merge_product_clusters(placements: &[GtBox], rows: usize, cols: usize) -> Vec<GtBox> {
    debug_assert_eq!(placements.len(), rows * cols);
    let mut visited = vec![false; placements.len()];
    let mut clusters = Vec::new();
    for start in 0..placements.len() {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let product = placements[start].product_id.as_str();
        let mut stack = vec![start];
        let mut members = vec![start];
        while let Some(i) = stack.pop() {
            let (r, c) = (i / cols, i % cols);
            let mut neighbors = Vec::with_capacity(4);
            if r > 0 {
                neighbors.push(i - cols);
            }
            if r + 1 < rows {
                neighbors.push(i + cols);
            }
            if c > 0 {
                neighbors.push(i - 1);
            }
            if c + 1 < cols {
                neighbors.push(i + 1);
            }
            for n in neighbors {
                if !visited[n] && placements[n].product_id == product {
                    visited[n] = true;
                    stack.push(n);
                    members.push(n);
                }
            }
        }
        let x0 = members.iter().map(|&i| placements[i].x).min().unwrap();
        let y0 = members.iter().map(|&i| placements[i].y).min().unwrap();
        let x1 = members.iter().map(|&i| placements[i].x + placements[i].w).max().unwrap();
        let y1 = members.iter().map(|&i| placements[i].y + placements[i].h).max().unwrap();
        clusters.push(GtBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
            product_id: placements[start].product_id.clone(),
            category_id: placements[start].category_id.clone(),
        });
    }
    clusters
}

/// Noise knobs for the detector stand-in.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubNoise {
    /// Per-axis box perturbation as a fraction of the box's own size.
    pub jitter_frac: f64,
    /// Probability of losing each true box.
    pub drop_prob: f64,
    /// Probability of adding one spurious box per ground-truth box.
    pub fp_rate: f64,
}

impl StubNoise {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.jitter_frac) {
            return Err(Error::Validation(format!(
                "detector jitter fraction {} outside [0, 1)",
                self.jitter_frac
            )));
        }
        for (name, p) in [("drop_prob", self.drop_prob), ("fp_rate", self.fp_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("{name} {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn jitter_px(rng: &mut impl Rng, mag: f64) -> i64 {
    if mag <= 0.0 {
        return 0;
    }
    rng.random_range(-mag..=mag).round() as i64
}

/// Emits detector-like proposals for a scene: each ground-truth box is
/// dropped with `drop_prob` or perturbed per `jitter_frac` (every
/// coordinate moves by at most that fraction of the box size) and given a
/// confidence in U(0.3, 1.0); spurious boxes with confidences in
/// U(0.0, 0.4) appear with probability `fp_rate` per ground-truth box.
/// With all noise zero the output boxes equal the ground truth exactly.
/// Output is sorted by descending confidence and stays inside the image.
pub fn stub_detect(
    scene: &ShelfScene,
    noise: &StubNoise,
    rng: &mut impl Rng,
) -> Result<Vec<RegionProposal>> {
    noise.validate()?;
    let (iw, ih) = image_dims(&scene.image)?;
    let (iw, ih) = (iw as i64, ih as i64);
    let mut props = Vec::new();
    for gt in &scene.ground_truth {
        if rng.random::<f64>() < noise.drop_prob {
            continue;
        }
        let jx = jitter_px(rng, noise.jitter_frac * gt.w as f64);
        let jy = jitter_px(rng, noise.jitter_frac * gt.h as f64);
        let jw = jitter_px(rng, noise.jitter_frac * gt.w as f64);
        let jh = jitter_px(rng, noise.jitter_frac * gt.h as f64);
        let confidence = rng.random_range(0.3..1.0);
        let w = (gt.w + jw).clamp(1, iw);
        let h = (gt.h + jh).clamp(1, ih);
        let x = (gt.x + jx).clamp(0, iw - w);
        let y = (gt.y + jy).clamp(0, ih - h);
        props.push(RegionProposal::new(x, y, w, h, confidence));
    }
    for _ in &scene.ground_truth {
        if rng.random::<f64>() < noise.fp_rate {
            let max_side = (iw.min(ih) / 2).max(8);
            let w = rng.random_range(8..=max_side).min(iw);
            let h = rng.random_range(8..=max_side).min(ih);
            let x = rng.random_range(0..=(iw - w));
            let y = rng.random_range(0..=(ih - h));
            props.push(RegionProposal::new(x, y, w, h, rng.random_range(0.0..0.4)));
        }
    }
    sort_by_confidence(&mut props);
    Ok(props)
}

#[derive(Serialize, Deserialize)]
struct GroundTruthLine {
    image: String,
    x: i64,
    y: i64,
    w: i64,
    h: i64,
    conf: f32,
    product_id: String,
    category_id: String,
    mode: AnnotationMode,
}

/// Ground truth for one image, as read back from an annotations file.
#[derive(Clone, Debug)]
pub struct GtImage {
    pub boxes: Vec<GtBox>,
    pub mode: AnnotationMode,
}

/// Writes a scene's annotations as JSON lines: the detections schema plus
/// `product_id`, `category_id` and `mode`, with `conf` fixed at 1.0.
pub fn write_ground_truth(
    path: impl AsRef<Path>,
    image_name: &str,
    scene: &ShelfScene,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for gt in &scene.ground_truth {
        let line = GroundTruthLine {
            image: image_name.to_string(),
            x: gt.x,
            y: gt.y,
            w: gt.w,
            h: gt.h,
            conf: 1.0,
            product_id: gt.product_id.clone(),
            category_id: gt.category_id.clone(),
            mode: scene.mode,
        };
        serde_json::to_writer(&mut out, &line)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a ground-truth file and groups the boxes by image name. Every line
/// of one image must agree on the annotation mode.
pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<BTreeMap<String, GtImage>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut by_image: BTreeMap<String, GtImage> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let gt: GroundTruthLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        validate_box_fields(gt.w, gt.h, gt.conf, lineno)?;
        let entry = by_image.entry(gt.image).or_insert_with(|| GtImage {
            boxes: Vec::new(),
            mode: gt.mode,
        });
        if entry.mode != gt.mode {
            return Err(Error::Validation(format!(
                "line {lineno}: conflicting annotation modes within one image"
            )));
        }
        entry.boxes.push(GtBox {
            x: gt.x,
            y: gt.y,
            w: gt.w,
            h: gt.h,
            product_id: gt.product_id,
            category_id: gt.category_id,
        });
    }
    Ok(by_image)
}
