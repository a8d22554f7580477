//! Boundary-excluded pixel metrics and object-level matching metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Label, MultiLabelMask};
use crate::error::{Error, Result};
use crate::tensor::IGNORE_LABEL;

pub const DEFAULT_BOUNDARY_PX: usize = 5;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// EDG pixels take the label of the nearest NEG or POS pixel (8-connected
/// steps), POS winning ties. Used when edges are evaluated rather than ignored.
pub fn resolve_edges(plane: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = plane.to_vec();
    let mut frontier: Vec<usize> = (0..plane.len())
        .filter(|&i| plane[i] == Label::Pos as u8 || plane[i] == Label::Neg as u8)
        .collect();
    // one shell per round; sorting puts POS claims first for each pixel
    while !frontier.is_empty() {
        let mut claims: Vec<(usize, u8)> = Vec::new();
        for &i in &frontier {
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            for (dx, dy) in NEIGHBORS {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if out[j] == Label::Edg as u8 {
                    claims.push((j, out[i]));
                }
            }
        }
        claims.sort_unstable_by_key(|&(j, l)| (j, l != Label::Pos as u8));
        let mut next = Vec::new();
        for (j, l) in claims {
            if out[j] == Label::Edg as u8 {
                out[j] = l;
                next.push(j);
            }
        }
        frontier = next;
    }
    out
}

const NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// Pixels that are evaluated for one class plane.
///
/// Excludes every UNK and EDG pixel and every pixel within `boundary_px`
/// (Chebyshev) of a POS pixel that touches a NEG or EDG pixel.
pub fn exclusion_mask_plane(plane: &[u8], width: usize, height: usize, boundary_px: usize) -> Vec<bool> {
    let is = |i: usize, l: Label| plane[i] == l as u8;
    let mut eval: Vec<bool> = (0..plane.len()).map(|i| is(i, Label::Pos) || is(i, Label::Neg)).collect();
    if boundary_px == 0 {
        return eval;
    }
    let mut boundary = vec![false; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !is(i, Label::Pos) {
                continue;
            }
            boundary[i] = NEIGHBORS.iter().any(|&(dx, dy)| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                nx >= 0
                    && ny >= 0
                    && nx < width as isize
                    && ny < height as isize
                    && matches!(
                        Label::from_u8(plane[ny as usize * width + nx as usize]),
                        Some(Label::Neg) | Some(Label::Edg)
                    )
            });
        }
    }
    let near = dilate_square(&boundary, width, height, boundary_px);
    for (e, n) in eval.iter_mut().zip(near) {
        *e &= !n;
    }
    eval
}

pub fn exclusion_mask(gt: &MultiLabelMask, class: usize, boundary_px: usize) -> Vec<bool> {
    exclusion_mask_plane(gt.plane(class), gt.width(), gt.height(), boundary_px)
}

/// Dilation by a (2r+1)² square, separably.
fn dilate_square(img: &[bool], width: usize, height: usize, r: usize) -> Vec<bool> {
    let mut rows = vec![false; img.len()];
    for y in 0..height {
        for x in 0..width {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(width - 1);
            rows[y * width + x] = img[y * width + lo..=y * width + hi].iter().any(|&v| v);
        }
    }
    let mut out = vec![false; img.len()];
    for y in 0..height {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(height - 1);
        for x in 0..width {
            out[y * width + x] = (lo..=hi).any(|yy| rows[yy * width + x]);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, o: &ConfusionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// `num / den`, or 0 and a flag when `den` is zero.
fn ratio(num: u64, den: u64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub counts: ConfusionCounts,
    pub acc: f64,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    /// Metrics whose denominator was zero and were reported as 0.
    pub undefined: Vec<String>,
}

impl PixelMetrics {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let mut undefined = Vec::new();
        let acc = ratio(counts.tp + counts.tn, counts.total(), "acc", &mut undefined);
        let p = ratio(counts.tp, counts.tp + counts.fp, "p", &mut undefined);
        let r = ratio(counts.tp, counts.tp + counts.fn_, "r", &mut undefined);
        if p + r == 0.0 {
            undefined.push("f1".into());
        }
        PixelMetrics {
            counts,
            acc,
            p,
            r,
            f1: f1(p, r),
            undefined,
        }
    }
}

/// Binary counts over evaluated pixels; prediction is POS' > 0.5 and the
/// ground truth is POS (positive) or NEG (negative).
pub fn pixel_counts(pred_pos: &[f32], gt_plane: &[u8], evaluated: &[bool]) -> Result<ConfusionCounts> {
    if pred_pos.len() != gt_plane.len() || evaluated.len() != gt_plane.len() {
        return Err(Error::shape(
            "pixel_metrics",
            format!(
                "prediction {}, ground truth {}, mask {}",
                pred_pos.len(),
                gt_plane.len(),
                evaluated.len()
            ),
        ));
    }
    let mut c = ConfusionCounts::default();
    for ((&p, &g), &e) in pred_pos.iter().zip(gt_plane).zip(evaluated) {
        if !e {
            continue;
        }
        let gt = match Label::from_u8(g) {
            Some(Label::Pos) => true,
            Some(Label::Neg) => false,
            _ => continue,
        };
        match (p > 0.5, gt) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn pixel_metrics(pred_pos: &[f32], gt_plane: &[u8], evaluated: &[bool]) -> Result<PixelMetrics> {
    Ok(PixelMetrics::from_counts(pixel_counts(pred_pos, gt_plane, evaluated)?))
}

/// Erosion then dilation with a full 3×3 element. Out-of-image pixels are
/// ignored by both steps.
pub fn open_3x3(img: &[bool], width: usize, height: usize) -> Vec<bool> {
    let step = |src: &[bool], erode: bool| -> Vec<bool> {
        let mut out = vec![false; src.len()];
        for y in 0..height {
            for x in 0..width {
                let mut acc = erode;
                'n: for yy in y.saturating_sub(1)..=(y + 1).min(height - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(width - 1) {
                        if src[yy * width + xx] != erode {
                            acc = !erode;
                            break 'n;
                        }
                    }
                }
                out[y * width + x] = acc;
            }
        }
        out
    };
    if img.is_empty() {
        return Vec::new();
    }
    step(&step(img, true), false)
}

/// Inclusive pixel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 > x1 || y0 > y1 {
            return Err(Error::invalid(format!("box ({x0},{y0})-({x1},{y1}) has min > max")));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> u64 {
        ((self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)) as u64
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x1.min(b.x1) + 1).saturating_sub(a.x0.max(b.x0));
    let h = (a.y1.min(b.y1) + 1).saturating_sub(a.y0.max(b.y0));
    let inter = (w * h) as u64;
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Bounding boxes of 8-connected components, in raster order of their first pixel.
pub fn components_and_boxes(img: &[bool], width: usize, height: usize) -> Vec<BBox> {
    let mut seen = vec![false; img.len()];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..img.len() {
        if !img[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (sx, sy) = (start % width, start / width);
        let mut b = BBox {
            x0: sx,
            y0: sy,
            x1: sx,
            y1: sy,
        };
        while let Some(i) = stack.pop() {
            let (x, y) = (i % width, i / width);
            b.x0 = b.x0.min(x);
            b.x1 = b.x1.max(x);
            b.y0 = b.y0.min(y);
            b.y1 = b.y1.max(y);
            for (dx, dy) in NEIGHBORS {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if img[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        boxes.push(b);
    }
    boxes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectMatchResult {
    pub matched: Vec<MatchedPair>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

impl ObjectMatchResult {
    pub fn total_weight(&self) -> f64 {
        self.matched.iter().map(|m| m.iou).sum()
    }
}

/// Maximum-weight one-to-one matching over pairs with IoU above `threshold`.
pub fn match_objects(pred: &[BBox], gt: &[BBox], threshold: f64) -> ObjectMatchResult {
    let weights: Vec<Vec<f64>> = pred
        .iter()
        .map(|p| {
            gt.iter()
                .map(|g| {
                    let v = iou(p, g);
                    if v > threshold {
                        v
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let assignment = max_weight_assignment(&weights, pred.len(), gt.len());
    let mut res = ObjectMatchResult::default();
    let mut gt_used = vec![false; gt.len()];
    for (pi, a) in assignment.iter().enumerate() {
        match *a {
            Some(gi) if weights[pi][gi] > 0.0 => {
                gt_used[gi] = true;
                res.matched.push(MatchedPair {
                    pred: pi,
                    gt: gi,
                    iou: weights[pi][gi],
                });
            }
            _ => res.unmatched_pred.push(pi),
        }
    }
    res.unmatched_gt = (0..gt.len()).filter(|&g| !gt_used[g]).collect();
    res
}

/// Hungarian algorithm (shortest augmenting paths with potentials) on the
/// square zero-padded matrix, minimizing negated weights. Returns, per row,
/// the assigned column if it is a real one.
fn max_weight_assignment(w: &[Vec<f64>], rows: usize, cols: usize) -> Vec<Option<usize>> {
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -w[i][j]
        } else {
            0.0
        }
    };
    // 1-based arrays; p[j] is the row matched to column j
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        if p[j] >= 1 && p[j] <= rows && j <= cols {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ObjectCounts {
    pub fn from_result(r: &ObjectMatchResult) -> Self {
        ObjectCounts {
            tp: r.matched.len() as u64,
            fp: r.unmatched_pred.len() as u64,
            fn_: r.unmatched_gt.len() as u64,
        }
    }

    pub fn add(&mut self, o: &ObjectCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub counts: ObjectCounts,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub undefined: Vec<String>,
}

impl ObjectMetrics {
    pub fn from_counts(counts: ObjectCounts) -> Self {
        let mut undefined = Vec::new();
        let p = ratio(counts.tp, counts.tp + counts.fp, "p_ob", &mut undefined);
        let r = ratio(counts.tp, counts.tp + counts.fn_, "r_ob", &mut undefined);
        if p + r == 0.0 {
            undefined.push("f1_ob".into());
        }
        ObjectMetrics {
            counts,
            p,
            r,
            f1: f1(p, r),
            undefined,
        }
    }
}

pub fn object_metrics(result: &ObjectMatchResult) -> ObjectMetrics {
    ObjectMetrics::from_counts(ObjectCounts::from_result(result))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub boundary_px: usize,
    pub iou_threshold: f64,
    /// Evaluate EDG ground truth as its nearest resolved label instead of ignoring it.
    pub include_edges: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            boundary_px: DEFAULT_BOUNDARY_PX,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            include_edges: false,
        }
    }
}

/// Counts for one class of one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub pixel: ConfusionCounts,
    pub object: ObjectCounts,
}

/// Pixel and object counts for one class plane.
pub fn evaluate_plane(
    pred_pos: &[f32],
    gt_plane: &[u8],
    width: usize,
    height: usize,
    cfg: &EvalConfig,
) -> Result<ClassCounts> {
    if pred_pos.len() != width * height || gt_plane.len() != width * height {
        return Err(Error::shape(
            "evaluate",
            format!("prediction {} and ground truth {} for {width}x{height}", pred_pos.len(), gt_plane.len()),
        ));
    }
    let resolved;
    let gt = if cfg.include_edges {
        resolved = resolve_edges(gt_plane, width, height);
        &resolved[..]
    } else {
        gt_plane
    };
    let evaluated = exclusion_mask_plane(gt, width, height, cfg.boundary_px);
    let pixel = pixel_counts(pred_pos, gt, &evaluated)?;
    let pred_bin: Vec<bool> = pred_pos.iter().map(|&p| p > 0.5).collect();
    let pred_boxes = components_and_boxes(&open_3x3(&pred_bin, width, height), width, height);
    let gt_bin: Vec<bool> = gt.iter().map(|&g| g == Label::Pos as u8).collect();
    let gt_boxes = components_and_boxes(&gt_bin, width, height);
    let object = ObjectCounts::from_result(&match_objects(&pred_boxes, &gt_boxes, cfg.iou_threshold));
    Ok(ClassCounts { pixel, object })
}

/// Share of non-ignored pixels whose labels agree.
pub fn label_accuracy(pred: &[u8], gt: &[u8]) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::shape("label_accuracy", format!("{} vs {}", pred.len(), gt.len())));
    }
    let (mut hit, mut total) = (0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        if g == IGNORE_LABEL {
            continue;
        }
        total += 1;
        hit += (p == g) as u64;
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub pixel: PixelMetrics,
    pub object: ObjectMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub config: EvalConfig,
    pub classes: Vec<ClassReport>,
    /// Pixel and object metrics over the summed counts of all classes.
    pub overall: ClassReport,
    /// Single-label composite accuracy, when computed.
    #[serde(default)]
    pub composite_accuracy: Option<f64>,
}

/// Accumulates per-class counts over a corpus.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    pub classes: Vec<String>,
    pub config: EvalConfig,
    counts: Vec<ClassCounts>,
    images: usize,
    composite: (u64, u64),
}

impl MetricsAccumulator {
    pub fn new(classes: Vec<String>, config: EvalConfig) -> Self {
        let counts = vec![ClassCounts::default(); classes.len()];
        MetricsAccumulator {
            classes,
            config,
            counts,
            images: 0,
            composite: (0, 0),
        }
    }

    /// Add one image: `pred_pos[c]` is the POS' map of `self.classes[c]`.
    pub fn add_image(&mut self, pred_pos: &[Vec<f32>], gt: &MultiLabelMask) -> Result<()> {
        if pred_pos.len() != self.classes.len() {
            return Err(Error::invalid(format!(
                "{} prediction maps for {} classes",
                pred_pos.len(),
                self.classes.len()
            )));
        }
        let mut image_counts = Vec::with_capacity(self.classes.len());
        for (c, name) in self.classes.iter().enumerate() {
            let gi = gt
                .class_index(name)
                .ok_or_else(|| Error::invalid(format!("ground truth has no class '{name}'")))?;
            image_counts.push(evaluate_plane(&pred_pos[c], gt.plane(gi), gt.width(), gt.height(), &self.config)?);
        }
        for (acc, c) in self.counts.iter_mut().zip(image_counts) {
            acc.pixel.add(&c.pixel);
            acc.object.add(&c.object);
        }
        self.images += 1;
        Ok(())
    }

    /// Fold in one composite label comparison (see [`label_accuracy`]).
    pub fn add_composite(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("composite", format!("{} vs {}", pred.len(), gt.len())));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != IGNORE_LABEL {
                self.composite.1 += 1;
                self.composite.0 += (p == g) as u64;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let mut all = ClassCounts::default();
        let classes = self
            .classes
            .iter()
            .zip(&self.counts)
            .map(|(name, c)| {
                all.pixel.add(&c.pixel);
                all.object.add(&c.object);
                ClassReport {
                    class: name.clone(),
                    pixel: PixelMetrics::from_counts(c.pixel),
                    object: ObjectMetrics::from_counts(c.object),
                }
            })
            .collect();
        MetricsReport {
            images: self.images,
            config: self.config.clone(),
            classes,
            overall: ClassReport {
                class: "all".into(),
                pixel: PixelMetrics::from_counts(all.pixel),
                object: ObjectMetrics::from_counts(all.object),
            },
            composite_accuracy: (self.composite.1 > 0).then(|| self.composite.0 as f64 / self.composite.1 as f64),
        }
    }
}

impl MetricsReport {
    pub fn class(&self, name: &str) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class == name)
    }

    /// One row per class plus the overall row: Acc, P, R, F1, P_ob, R_ob, F1_ob.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,Acc,P,R,F1,P_ob,R_ob,F1_ob\n");
        for c in self.classes.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                c.class, c.pixel.acc, c.pixel.p, c.pixel.r, c.pixel.f1, c.object.p, c.object.r, c.object.f1
            );
        }
        s
    }

    /// Writes `metrics.json` and `metrics.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("metrics.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("metrics.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
