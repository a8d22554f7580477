//! Ground truth: polygon annotations to per-class NEG/UNK/POS/EDG masks,
//! corpus class statistics, median-frequency weights and perspective-warp
//! augmentation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{apply_homography, homography_from_points, sample_bilinear, to_rgb8, Homography};
use crate::tensor::IGNORE_LABEL;

/// The 11 CMP element classes (background excluded).
pub const CMP_CLASSES: [&str; 11] = [
    "facade", "molding", "cornice", "pillar", "window", "door", "sill", "blind", "balcony", "shop", "deco",
];

/// Extra outputs used when refining on ECP-style data.
pub const ECP_EXTRA_CLASSES: [&str; 4] = ["sky", "roof", "chimney", "facade-composite"];

pub const BACKGROUND: &str = "background";

/// Class whose edge band uses the wider, vertical-only rule by default.
pub const FACADE_CLASS: &str = "facade";

pub fn cmp_vocabulary() -> Vec<String> {
    CMP_CLASSES.iter().map(|s| s.to_string()).collect()
}

pub fn ecp_vocabulary() -> Vec<String> {
    CMP_CLASSES.iter().chain(&ECP_EXTRA_CLASSES).map(|s| s.to_string()).collect()
}

/// Per-class pixel state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Neg = 0,
    Unk = 1,
    Pos = 2,
    Edg = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Neg, Label::Unk, Label::Pos, Label::Edg];

    pub fn from_u8(v: u8) -> Option<Label> {
        Label::ALL.get(v as usize).copied()
    }
}

/// One label image per class, all of the same size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiLabelMask {
    width: usize,
    height: usize,
    classes: Vec<String>,
    planes: Vec<Vec<u8>>,
}

impl MultiLabelMask {
    pub fn new(width: usize, height: usize, classes: Vec<String>) -> Result<Self> {
        Self::filled(width, height, classes, Label::Neg)
    }

    pub fn filled(width: usize, height: usize, classes: Vec<String>, label: Label) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::invalid("mask vocabulary must be non-empty"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("mask size {width}x{height} is empty")));
        }
        let planes = vec![vec![label as u8; width * height]; classes.len()];
        Ok(MultiLabelMask {
            width,
            height,
            classes,
            planes,
        })
    }

    /// Build from raw planes, validating every value.
    pub fn from_planes(width: usize, height: usize, classes: Vec<String>, planes: Vec<Vec<u8>>) -> Result<Self> {
        let mut m = Self::new(width, height, classes)?;
        if planes.len() != m.classes.len() {
            return Err(Error::invalid(format!(
                "{} planes for {} classes",
                planes.len(),
                m.classes.len()
            )));
        }
        for (ci, p) in planes.iter().enumerate() {
            if p.len() != width * height {
                return Err(Error::invalid(format!(
                    "class '{}': {} pixels, expected {}x{}",
                    m.classes[ci],
                    p.len(),
                    width,
                    height
                )));
            }
            if let Some(i) = p.iter().position(|&v| v > Label::Edg as u8) {
                return Err(Error::invalid(format!(
                    "class '{}': value {} at pixel ({}, {}) is not a label",
                    m.classes[ci],
                    p[i],
                    i % width,
                    i / width
                )));
            }
        }
        m.planes = planes;
        Ok(m)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn plane(&self, class: usize) -> &[u8] {
        &self.planes[class]
    }

    pub fn plane_mut(&mut self, class: usize) -> &mut [u8] {
        &mut self.planes[class]
    }

    pub fn get(&self, class: usize, x: usize, y: usize) -> Label {
        Label::from_u8(self.planes[class][y * self.width + x]).expect("validated")
    }

    pub fn set(&mut self, class: usize, x: usize, y: usize, label: Label) {
        self.planes[class][y * self.width + x] = label as u8;
    }

    /// Mark a pixel UNK in every class.
    pub fn set_unknown(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        for p in &mut self.planes {
            p[i] = Label::Unk as u8;
        }
    }

    /// Crop a window (must lie inside the mask).
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<MultiLabelMask> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid("crop window exceeds mask"));
        }
        let planes = self
            .planes
            .iter()
            .map(|p| (y0..y0 + h).flat_map(|y| p[y * self.width + x0..y * self.width + x0 + w].to_vec()).collect())
            .collect();
        MultiLabelMask::from_planes(w, h, self.classes.clone(), planes)
    }

    /// Nearest-neighbour rescale; bands burned at source resolution survive.
    pub fn resize_nearest(&self, new_w: usize, new_h: usize) -> MultiLabelMask {
        MultiLabelMask {
            width: new_w,
            height: new_h,
            classes: self.classes.clone(),
            planes: self
                .planes
                .iter()
                .map(|p| crate::raster::resize_nearest(p, self.width, self.height, new_w, new_h))
                .collect(),
        }
    }
}

/// A polygon in pixel coordinates; (0, 0) is the top-left image corner.
pub type Ring = Vec<[f64; 2]>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub class: String,
    pub ring: Ring,
}

/// Per-image annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub mpp: f64,
    #[serde(default)]
    pub shapes: Vec<Shape>,
    #[serde(default)]
    pub unknown_regions: Vec<Ring>,
}

impl AnnotationSet {
    pub fn validate(&self, vocabulary: &[String]) -> Result<()> {
        if !(self.mpp > 0.0) {
            return Err(Error::invalid(format!("{}: mpp must be positive", self.image_id)));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if !vocabulary.contains(&s.class) {
                return Err(Error::invalid(format!(
                    "{}: shape {i} has class '{}' outside the vocabulary",
                    self.image_id, s.class
                )));
            }
            if s.ring.len() < 3 {
                return Err(Error::invalid(format!("{}: shape {i} has fewer than 3 vertices", self.image_id)));
            }
        }
        if let Some(i) = self.unknown_regions.iter().position(|r| r.len() < 3) {
            return Err(Error::invalid(format!(
                "{}: unknown region {i} has fewer than 3 vertices",
                self.image_id
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeBandRule {
    /// Band half-width in meters.
    pub width_m: f64,
    /// Only band edges steeper than 45°.
    pub vertical_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeBandRules {
    pub default: EdgeBandRule,
    #[serde(default)]
    pub overrides: BTreeMap<String, EdgeBandRule>,
}

impl Default for EdgeBandRules {
    fn default() -> Self {
        let mut overrides = BTreeMap::new();
        overrides.insert(
            FACADE_CLASS.to_string(),
            EdgeBandRule {
                width_m: 0.3048,
                vertical_only: true,
            },
        );
        EdgeBandRules {
            default: EdgeBandRule {
                width_m: 0.10,
                vertical_only: false,
            },
            overrides,
        }
    }
}

impl EdgeBandRules {
    pub fn rule(&self, class: &str) -> EdgeBandRule {
        self.overrides.get(class).copied().unwrap_or(self.default)
    }

    /// Band width in whole pixels at the given resolution.
    pub fn band_px(&self, class: &str, mpp: f64) -> usize {
        (self.rule(class).width_m / mpp).round() as usize
    }
}

/// Fill a polygon by pixel-center inclusion (even-odd), clipped to the image.
fn fill_ring(ring: &Ring, width: usize, height: usize, mut put: impl FnMut(usize)) {
    let n = ring.len();
    let ymin = ring.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let ymax = ring.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let y0 = (ymin - 0.5).ceil().max(0.0) as isize;
    let y1 = ((ymax - 0.5).floor() as isize).min(height as isize - 1);
    let mut xs = Vec::new();
    for y in y0..=y1 {
        let y = y as usize;
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let [ax, ay] = ring[i];
            let [bx, by] = ring[(i + 1) % n];
            if (ay <= yc) != (by <= yc) {
                xs.push(ax + (yc - ay) / (by - ay) * (bx - ax));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let x0 = (pair[0] - 0.5).ceil().max(0.0);
            let x1 = (pair[1] - 0.5).ceil().min(width as f64);
            let mut x = x0 as usize;
            while (x as f64) < x1 {
                put(y * width + x);
                x += 1;
            }
        }
    }
}

fn point_segment_distance(px: f64, py: f64, a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Mark pixels whose centers lie within `band` px of the ring's edges.
fn band_ring(ring: &Ring, band: f64, vertical_only: bool, width: usize, height: usize, mut put: impl FnMut(usize)) {
    let n = ring.len();
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        if vertical_only && (b[1] - a[1]).abs() <= (b[0] - a[0]).abs() {
            continue;
        }
        let xlo = (a[0].min(b[0]) - band - 0.5).floor().max(0.0) as usize;
        let ylo = (a[1].min(b[1]) - band - 0.5).floor().max(0.0) as usize;
        let xhi = ((a[0].max(b[0]) + band).ceil() as isize).min(width as isize - 1);
        let yhi = ((a[1].max(b[1]) + band).ceil() as isize).min(height as isize - 1);
        if xhi < 0 || yhi < 0 {
            continue;
        }
        for y in ylo..=yhi as usize {
            for x in xlo..=xhi as usize {
                if point_segment_distance(x as f64 + 0.5, y as f64 + 0.5, a, b) <= band + 1e-9 {
                    put(y * width + x);
                }
            }
        }
    }
}

/// Rasterize polygon annotations into a multi-label mask.
///
/// Per class: pixel centers inside any polygon become POS; centers within
/// the class's band width of a polygon edge become EDG; unknown regions are
/// UNK in every class; everything else is NEG. Precedence UNK > EDG > POS.
pub fn rasterize_multilabel(
    ann: &AnnotationSet,
    size: (usize, usize),
    mpp: f64,
    vocabulary: &[String],
    rules: &EdgeBandRules,
) -> Result<MultiLabelMask> {
    if !(mpp > 0.0) {
        return Err(Error::invalid("mpp must be positive"));
    }
    if size != (ann.width, ann.height) {
        return Err(Error::invalid(format!(
            "{}: annotation is {}x{}, image is {}x{}",
            ann.image_id, ann.width, ann.height, size.0, size.1
        )));
    }
    ann.validate(vocabulary)?;
    let (w, h) = size;
    let mut mask = MultiLabelMask::new(w, h, vocabulary.to_vec())?;
    for (ci, class) in vocabulary.iter().enumerate() {
        let rule = rules.rule(class);
        let band = rules.band_px(class, mpp) as f64;
        let plane = mask.plane_mut(ci);
        let shapes = ann.shapes.iter().filter(|s| &s.class == class);
        for s in shapes.clone() {
            fill_ring(&s.ring, w, h, |i| plane[i] = Label::Pos as u8);
        }
        if band > 0.0 {
            for s in shapes {
                band_ring(&s.ring, band, rule.vertical_only, w, h, |i| plane[i] = Label::Edg as u8);
            }
        }
    }
    for ring in &ann.unknown_regions {
        let mut idx = Vec::new();
        fill_ring(ring, w, h, |i| idx.push(i));
        for i in idx {
            mask.set_unknown(i % w, i / w);
        }
    }
    Ok(mask)
}

/// Corpus-level label counts per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub classes: Vec<String>,
    /// `counts[class][label]` in NEG, UNK, POS, EDG order.
    pub counts: Vec<[u64; 4]>,
    pub pixels: u64,
}

impl ClassStats {
    pub fn empty(classes: Vec<String>) -> Self {
        let n = classes.len();
        ClassStats {
            classes,
            counts: vec![[0; 4]; n],
            pixels: 0,
        }
    }

    pub fn from_mask(mask: &MultiLabelMask) -> Self {
        let mut s = Self::empty(mask.classes().to_vec());
        for (ci, c) in s.counts.iter_mut().enumerate() {
            for &v in mask.plane(ci) {
                c[v as usize] += 1;
            }
        }
        s.pixels = (mask.width() * mask.height()) as u64;
        s
    }

    /// Stats of a single-label image: each label is a class that is POS where
    /// present, NEG elsewhere, UNK on ignored pixels.
    pub fn from_joint(labels: &[u8], vocabulary: &[String]) -> Self {
        let mut s = Self::empty(vocabulary.to_vec());
        for &l in labels {
            for (ci, c) in s.counts.iter_mut().enumerate() {
                let k = if l == IGNORE_LABEL {
                    Label::Unk
                } else if l as usize == ci {
                    Label::Pos
                } else {
                    Label::Neg
                };
                c[k as usize] += 1;
            }
        }
        s.pixels = labels.len() as u64;
        s
    }

    /// Associative, commutative merge.
    pub fn merge(&mut self, other: &ClassStats) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::invalid("cannot merge statistics over different vocabularies"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for k in 0..4 {
                a[k] += b[k];
            }
        }
        self.pixels += other.pixels;
        Ok(())
    }

    /// Share of labelled (non-UNK) pixels that are POS.
    pub fn frequency(&self, class: usize) -> f64 {
        let c = &self.counts[class];
        let labelled = c[0] + c[2] + c[3];
        if labelled == 0 {
            0.0
        } else {
            c[Label::Pos as usize] as f64 / labelled as f64
        }
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.classes.len()).map(|c| self.frequency(c)).collect()
    }
}

/// Median of a non-empty list; an even count takes the midpoint of the two central values.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `weight_c = median(frequencies) / frequency_c`.
pub fn median_frequency_weights(classes: &[String], frequencies: &[f64]) -> Result<Vec<f64>> {
    if classes.len() != frequencies.len() || classes.is_empty() {
        return Err(Error::invalid("one frequency per class required"));
    }
    if let Some(i) = frequencies.iter().position(|f| !(*f > 0.0)) {
        return Err(Error::invalid(format!(
            "class '{}' has frequency {}; its median-frequency weight is undefined",
            classes[i], frequencies[i]
        )));
    }
    let m = median(frequencies);
    Ok(frequencies.iter().map(|f| m / f).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeight {
    pub frequency: f64,
    pub weight: f64,
}

/// JSON form: class → {frequency, weight}.
pub fn weights_report(stats: &ClassStats) -> Result<BTreeMap<String, ClassWeight>> {
    let f = stats.frequencies();
    let w = median_frequency_weights(&stats.classes, &f)?;
    Ok(stats
        .classes
        .iter()
        .zip(f.iter().zip(w))
        .map(|(c, (&frequency, weight))| (c.clone(), ClassWeight { frequency, weight }))
        .collect())
}

/// Painter's order for the single-label composite used by the baseline network.
pub const CMP_PAINT_ORDER: [&str; 11] = [
    "facade", "molding", "cornice", "pillar", "shop", "deco", "blind", "balcony", "sill", "window", "door",
];

/// Collapse a multi-label mask to one label per pixel.
///
/// Starts from `background` (index of [`BACKGROUND`] in `joint_vocab`), then
/// paints each class of `order` present in `joint_vocab` over its POS pixels.
/// Pixels that are UNK or EDG in any painted class become [`IGNORE_LABEL`].
pub fn joint_labels(mask: &MultiLabelMask, joint_vocab: &[String], order: &[&str]) -> Result<Vec<u8>> {
    let bg = joint_vocab
        .iter()
        .position(|c| c == BACKGROUND)
        .ok_or_else(|| Error::invalid("joint vocabulary needs a background label"))?;
    if joint_vocab.len() >= IGNORE_LABEL as usize {
        return Err(Error::invalid("joint vocabulary too large"));
    }
    let mut out = vec![bg as u8; mask.width() * mask.height()];
    let mut ignore = vec![false; out.len()];
    for name in order {
        let (Some(j), Some(ci)) = (
            joint_vocab.iter().position(|c| c == name),
            mask.class_index(name),
        ) else {
            continue;
        };
        for (i, &v) in mask.plane(ci).iter().enumerate() {
            match Label::from_u8(v) {
                Some(Label::Pos) => out[i] = j as u8,
                Some(Label::Unk) | Some(Label::Edg) => ignore[i] = true,
                _ => {}
            }
        }
    }
    for (o, ig) in out.iter_mut().zip(ignore) {
        if ig {
            *o = IGNORE_LABEL;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpSample {
    /// Maps source pixel coordinates to augmented coordinates.
    pub homography: [[f64; 3]; 3],
    pub seed: u64,
    /// Corner displacements actually applied, in pixels.
    pub displacements: [[f64; 2]; 4],
}

const MAX_WARP_RETRIES: usize = 16;

fn convex(q: &[(f64, f64); 4]) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let (a, b, c) = (q[i], q[(i + 1) % 4], q[(i + 2) % 4]);
        let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
        if cross.abs() < 1e-9 || (sign != 0.0 && cross.signum() != sign) {
            return false;
        }
        sign = cross.signum();
    }
    true
}

/// Random perspective warp moving each image corner by up to
/// `max_disp_frac · width` along each axis. The image is resampled
/// bilinearly, labels by nearest neighbour; pixels pulled from outside the
/// source become black / UNK in every class.
pub fn augment_perspective(
    image: &RgbImage,
    mask: &MultiLabelMask,
    max_disp_frac: f64,
    seed: u64,
) -> Result<(RgbImage, MultiLabelMask, WarpSample)> {
    if !(max_disp_frac >= 0.0) {
        return Err(Error::invalid("max_disp_frac must be non-negative"));
    }
    if (image.width() as usize, image.height() as usize) != (mask.width(), mask.height()) {
        return Err(Error::invalid("image and mask sizes differ"));
    }
    let identity = WarpSample {
        homography: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        seed,
        displacements: [[0.0; 2]; 4],
    };
    if max_disp_frac == 0.0 {
        return Ok((image.clone(), mask.clone(), identity));
    }
    let (w, h) = (image.width() as f64, image.height() as f64);
    let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let limit = max_disp_frac * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = None;
    for _ in 0..MAX_WARP_RETRIES {
        let disp: [[f64; 2]; 4] =
            std::array::from_fn(|_| [rng.random_range(-limit..=limit), rng.random_range(-limit..=limit)]);
        let moved: [(f64, f64); 4] = std::array::from_fn(|i| (corners[i].0 + disp[i][0], corners[i].1 + disp[i][1]));
        if !convex(&moved) {
            continue;
        }
        if let Some(hm) = homography_from_points(&corners, &moved) {
            if let Some(inv) = hm.try_inverse() {
                chosen = Some((hm, inv, disp));
                break;
            }
        }
    }
    let Some((hm, inv, disp)) = chosen else {
        log::warn!("perspective augmentation fell back to identity after {MAX_WARP_RETRIES} draws");
        return Ok((image.clone(), mask.clone(), identity));
    };
    let (out_img, out_mask) = warp_pair(image, mask, &inv);
    Ok((
        out_img,
        out_mask,
        WarpSample {
            homography: std::array::from_fn(|r| std::array::from_fn(|c| hm[(r, c)])),
            seed,
            displacements: disp,
        },
    ))
}

/// Warp with corner coordinates (pixel edges at integers) on both sides.
fn warp_pair(image: &RgbImage, mask: &MultiLabelMask, inv: &Homography) -> (RgbImage, MultiLabelMask) {
    let (w, h) = (mask.width(), mask.height());
    let mut out_img = RgbImage::new(w as u32, h as u32);
    let mut out_mask = mask.clone();
    for y in 0..h {
        for x in 0..w {
            let src = apply_homography(inv, x as f64 + 0.5, y as f64 + 0.5);
            let inside = src.filter(|&(sx, sy)| sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64);
            match inside {
                Some((sx, sy)) => {
                    let (nx, ny) = (sx.floor() as usize, sy.floor() as usize);
                    for ci in 0..mask.classes().len() {
                        out_mask.set(ci, x, y, mask.get(ci, nx, ny));
                    }
                    let v = sample_bilinear(image, (sx - 0.5).clamp(0.0, w as f64 - 1.0), (sy - 0.5).clamp(0.0, h as f64 - 1.0))
                        .expect("clamped into range");
                    out_img.put_pixel(x as u32, y as u32, to_rgb8(v));
                }
                None => out_mask.set_unknown(x, y),
            }
        }
    }
    (out_img, out_mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskManifest {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub classes: Vec<String>,
}

pub fn mask_manifest_name(image_id: &str) -> String {
    format!("{image_id}.mask.json")
}

pub fn mask_plane_name(image_id: &str, class: &str) -> String {
    format!("{image_id}.{class}.png")
}

/// 8-bit grayscale PNG of one class plane.
pub fn encode_plane_png(plane: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::invalid(format!("png: {e}")))?;
        writer
            .write_image_data(plane)
            .map_err(|e| Error::invalid(format!("png: {e}")))?;
    }
    Ok(out)
}

fn decode_plane_png(bytes: &[u8], origin: &str) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |reason: String| Error::Format {
        path: origin.to_string(),
        reason,
    };
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| bad(e.to_string()))?;
    if !matches!(img.color(), image::ColorType::L8) {
        return Err(bad(format!("expected 8-bit grayscale, found {:?}", img.color())));
    }
    let g = img.into_luma8();
    Ok((g.width() as usize, g.height() as usize, g.into_raw()))
}

/// Serialize a mask as `(file name, bytes)` pairs: the manifest and one PNG per class.
pub fn encode_mask(mask: &MultiLabelMask, image_id: &str) -> Result<Vec<(String, Vec<u8>)>> {
    let manifest = MaskManifest {
        image_id: image_id.to_string(),
        width: mask.width(),
        height: mask.height(),
        classes: mask.classes().to_vec(),
    };
    let mut files = vec![(mask_manifest_name(image_id), serde_json::to_vec_pretty(&manifest)?)];
    for (ci, c) in mask.classes().iter().enumerate() {
        files.push((mask_plane_name(image_id, c), encode_plane_png(mask.plane(ci), mask.width(), mask.height())?));
    }
    Ok(files)
}

/// Inverse of [`encode_mask`]. `lookup` fetches a file's bytes by name;
/// `vocabulary`, when given, restricts the accepted class names.
pub fn decode_mask<F>(image_id: &str, mut lookup: F, vocabulary: Option<&[String]>) -> Result<MultiLabelMask>
where
    F: FnMut(&str) -> Result<Vec<u8>>,
{
    let mname = mask_manifest_name(image_id);
    let manifest: MaskManifest = serde_json::from_slice(&lookup(&mname)?)?;
    if manifest.classes.is_empty() {
        return Err(Error::Format {
            path: mname,
            reason: "vocabulary must be non-empty".into(),
        });
    }
    if let Some(v) = vocabulary {
        if let Some(c) = manifest.classes.iter().find(|c| !v.contains(c)) {
            return Err(Error::Format {
                path: mname,
                reason: format!("unknown class '{c}'"),
            });
        }
    }
    let mut planes = Vec::with_capacity(manifest.classes.len());
    for c in &manifest.classes {
        let name = mask_plane_name(image_id, c);
        let (w, h, data) = decode_plane_png(&lookup(&name)?, &name)?;
        if (w, h) != (manifest.width, manifest.height) {
            return Err(Error::Format {
                path: name,
                reason: format!("{w}x{h}, manifest says {}x{}", manifest.width, manifest.height),
            });
        }
        if let Some(i) = data.iter().position(|&v| v > Label::Edg as u8) {
            return Err(Error::Format {
                path: name,
                reason: format!("class '{c}': value {} at pixel ({}, {})", data[i], i % w, i / w),
            });
        }
        planes.push(data);
    }
    MultiLabelMask::from_planes(manifest.width, manifest.height, manifest.classes, planes)
}

pub fn write_mask(dir: &Path, image_id: &str, mask: &MultiLabelMask) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in encode_mask(mask, image_id)? {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn read_mask(dir: &Path, image_id: &str, vocabulary: Option<&[String]>) -> Result<MultiLabelMask> {
    decode_mask(
        image_id,
        |name| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(&p, e))
        },
        vocabulary,
    )
}

#[cfg(test)]
mod tests;
