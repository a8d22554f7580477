//! Facade candidate extraction from building footprints and equirectangular
//! photospheres.
//!
//! All coordinates live in a local planar CRS measured in meters, with `z`
//! pointing up. Footprint rings are simplified, split into wall pieces of at
//! most `max_len` meters, and each piece is extruded into a vertical quad whose
//! pixel grid is filled by casting one ray per pixel center into a panorama.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use geojson::{FeatureCollection, GeometryValue};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{apply_homography, sample_bilinear_wrap_x, to_rgb8, warp_rgb, Homography};

pub type Point2 = [f64; 2];
pub type Point3 = [f64; 3];

pub const DEFAULT_WALL_HEIGHT: f64 = 40.0;
pub const DEFAULT_MPP: f64 = 0.025;
pub const DEFAULT_SIMPLIFY_TOLERANCE: f64 = 2.0;
pub const DEFAULT_MAX_WALL_LEN: f64 = 40.0;
pub const DEFAULT_EXTENSION: f64 = 2.0;
pub const DEFAULT_CAMERA_HEIGHT: f64 = 2.5;
pub const COLLINEAR_ANGLE_DEG: f64 = 2.0;

fn sub(a: Point2, b: Point2) -> Point2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn dist(a: Point2, b: Point2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Distance from `p` to the closed segment `a`-`b`.
pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = sub(b, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    if len2 == 0.0 {
        return dist(p, a);
    }
    let ap = sub(p, a);
    let t = ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0);
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintPolygon {
    pub id: String,
    pub ring: Vec<Point2>,
}

impl FootprintPolygon {
    pub fn new(id: impl Into<String>, ring: Vec<Point2>) -> Result<Self> {
        let p = FootprintPolygon { id: id.into(), ring };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ring.len();
        if n < 3 {
            return Err(Error::invalid(format!("footprint '{}' has {n} vertices, need at least 3", self.id)));
        }
        for i in 0..n {
            let (a, b) = (self.ring[i], self.ring[(i + 1) % n]);
            if !a.iter().chain(&b).all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("footprint '{}' has a non-finite vertex", self.id)));
            }
            if dist(a, b) == 0.0 {
                return Err(Error::invalid(format!(
                    "footprint '{}' repeats vertex {i} ({}, {})",
                    self.id, a[0], a[1]
                )));
            }
        }
        Ok(())
    }

    /// The ring's boundary edges in order, closing edge last.
    pub fn edges(&self) -> Vec<WallSegment> {
        ring_edges(&self.ring, &self.id)
    }
}

fn ring_edges(ring: &[Point2], id: &str) -> Vec<WallSegment> {
    (0..ring.len())
        .map(|i| WallSegment {
            p0: ring[i],
            p1: ring[(i + 1) % ring.len()],
            source_footprint: id.to_string(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallSegment {
    pub p0: Point2,
    pub p1: Point2,
    pub source_footprint: String,
}

impl WallSegment {
    pub fn length(&self) -> f64 {
        dist(self.p0, self.p1)
    }

    pub fn direction(&self) -> Point2 {
        let l = self.length();
        [(self.p1[0] - self.p0[0]) / l, (self.p1[1] - self.p0[1]) / l]
    }

    pub fn midpoint(&self) -> Point2 {
        [(self.p0[0] + self.p1[0]) / 2.0, (self.p0[1] + self.p1[1]) / 2.0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallQuad {
    pub id: String,
    pub base: WallSegment,
    pub height: f64,
    pub mpp: f64,
}

impl WallQuad {
    pub fn new(id: impl Into<String>, base: WallSegment, height: f64, mpp: f64) -> Result<Self> {
        let q = WallQuad {
            id: id.into(),
            base,
            height,
            mpp,
        };
        if !(q.height > 0.0 && q.height.is_finite()) {
            return Err(Error::invalid(format!("wall height must be positive, got {}", q.height)));
        }
        if !(q.mpp > 0.0 && q.mpp.is_finite()) {
            return Err(Error::invalid(format!("meters per pixel must be positive, got {}", q.mpp)));
        }
        if !(q.base.length() > 0.0) {
            return Err(Error::invalid(format!("wall '{}' has zero length", q.id)));
        }
        Ok(q)
    }

    /// Pixel grid as `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        let rows = (self.height / self.mpp).round().max(1.0) as usize;
        let cols = (self.base.length() / self.mpp).round().max(1.0) as usize;
        (rows, cols)
    }

    /// World position of the center of pixel `(row, col)`. Row 0 is the top of
    /// the wall and column 0 starts at `p0`.
    pub fn sample_point(&self, row: usize, col: usize) -> Point3 {
        let (rows, cols) = self.grid();
        let t = (col as f64 + 0.5) / cols as f64;
        let b = &self.base;
        [
            b.p0[0] + t * (b.p1[0] - b.p0[0]),
            b.p0[1] + t * (b.p1[1] - b.p0[1]),
            self.height * (1.0 - (row as f64 + 0.5) / rows as f64),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Photosphere {
    pub id: String,
    pub center: Point3,
    /// Azimuth of the panorama's center column, radians in `[0, 2π)`.
    pub heading: f64,
    pub image: RgbImage,
}

impl Photosphere {
    pub fn new(id: impl Into<String>, center: Point3, heading: f64, image: RgbImage) -> Result<Self> {
        if image.width() < 2 || image.height() < 1 {
            return Err(Error::invalid(format!(
                "panorama must be at least 2x1, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        if !center.iter().all(|v| v.is_finite()) || !heading.is_finite() {
            return Err(Error::invalid("photosphere pose must be finite"));
        }
        Ok(Photosphere {
            id: id.into(),
            center,
            heading: heading.rem_euclid(TAU),
            image,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FacadeImage {
    pub pixels: RgbImage,
    pub mpp: f64,
    pub quad_id: String,
    pub photosphere_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacadeSidecar {
    pub quad_id: String,
    pub photosphere_id: String,
    pub mpp: f64,
    pub width: u32,
    pub height: u32,
}

impl FacadeImage {
    pub fn sidecar(&self) -> FacadeSidecar {
        FacadeSidecar {
            quad_id: self.quad_id.clone(),
            photosphere_id: self.photosphere_id.clone(),
            mpp: self.mpp,
            width: self.pixels.width(),
            height: self.pixels.height(),
        }
    }

    /// Writes `<stem>.png` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let png = dir.join(format!("{stem}.png"));
        self.pixels.save(&png)?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_vec_pretty(&self.sidecar())?).map_err(|e| Error::io(&json, e))?;
        Ok(png)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Simplified {
    pub segments: Vec<WallSegment>,
    pub warnings: Vec<String>,
}

fn rdp(points: &[Point2], tolerance: f64, keep: &mut Vec<bool>, offset: usize) {
    if points.len() < 3 {
        return;
    }
    let (a, b) = (points[0], points[points.len() - 1]);
    let mut worst = (0.0, 0);
    for (i, &p) in points.iter().enumerate().take(points.len() - 1).skip(1) {
        let d = point_segment_distance(p, a, b);
        if d > worst.0 {
            worst = (d, i);
        }
    }
    if worst.0 > tolerance {
        keep[offset + worst.1] = true;
        rdp(&points[..=worst.1], tolerance, keep, offset);
        rdp(&points[worst.1..], tolerance, keep, offset + worst.1);
    }
}

fn most_distant_pair(ring: &[Point2]) -> (usize, usize) {
    let mut best = (0.0, 0, 1);
    for i in 0..ring.len() {
        for j in i + 1..ring.len() {
            let d = dist(ring[i], ring[j]);
            if d > best.0 {
                best = (d, i, j);
            }
        }
    }
    (best.1, best.2)
}

/// Ramer–Douglas–Peucker on a closed ring, anchored at its two most distant
/// vertices. Returns the surviving vertex indices in ring order.
pub fn simplify_ring(ring: &[Point2], tolerance: f64) -> Vec<usize> {
    let n = ring.len();
    let (i, j) = most_distant_pair(ring);
    let mut keep = vec![false; n];
    keep[i] = true;
    keep[j] = true;
    let first: Vec<Point2> = ring[i..=j].to_vec();
    let mut first_keep = vec![false; first.len()];
    rdp(&first, tolerance, &mut first_keep, 0);
    for (k, &kept) in first_keep.iter().enumerate() {
        keep[i + k] |= kept;
    }
    let second: Vec<Point2> = (j..=n + i).map(|k| ring[k % n]).collect();
    let mut second_keep = vec![false; second.len()];
    rdp(&second, tolerance, &mut second_keep, 0);
    for (k, &kept) in second_keep.iter().enumerate() {
        keep[(j + k) % n] |= kept;
    }
    (0..n).filter(|&k| keep[k]).collect()
}

fn turn_angle(a: Point2, b: Point2, c: Point2) -> f64 {
    let u = sub(b, a);
    let v = sub(c, b);
    let cross = u[0] * v[1] - u[1] * v[0];
    let dot = u[0] * v[0] + u[1] * v[1];
    cross.atan2(dot).abs()
}

/// Drops vertices where the outline turns by less than `max_angle` radians.
/// A vertex only goes if every original vertex it stood for stays within
/// `tolerance` of the merged chord.
fn merge_collinear(ring: &[Point2], kept: Vec<usize>, max_angle: f64, tolerance: f64) -> Vec<usize> {
    let n = ring.len();
    let mut kept = kept;
    let covered = |a: usize, b: usize| {
        let mut k = (a + 1) % n;
        while k != b {
            if point_segment_distance(ring[k], ring[a], ring[b]) > tolerance {
                return false;
            }
            k = (k + 1) % n;
        }
        true
    };
    loop {
        let m = kept.len();
        if m < 3 {
            return kept;
        }
        let pos = (0..m).find(|&k| {
            let (a, b, c) = (kept[(k + m - 1) % m], kept[k], kept[(k + 1) % m]);
            turn_angle(ring[a], ring[b], ring[c]) < max_angle && covered(a, c)
        });
        match pos {
            Some(k) => {
                kept.remove(k);
            }
            None => return kept,
        }
    }
}

/// Simplifies each footprint ring and returns the resulting wall edges.
///
/// A tolerance of zero returns every polygon's own edges untouched.
pub fn simplify_and_merge(polygons: &[FootprintPolygon], tolerance: f64) -> Result<Simplified> {
    if !(tolerance >= 0.0) || !tolerance.is_finite() {
        return Err(Error::invalid(format!("simplification tolerance must be >= 0, got {tolerance}")));
    }
    let mut out = Simplified::default();
    for poly in polygons {
        poly.validate()?;
        if tolerance == 0.0 {
            out.segments.extend(poly.edges());
            continue;
        }
        let kept = simplify_ring(&poly.ring, tolerance);
        let kept = merge_collinear(&poly.ring, kept, COLLINEAR_ANGLE_DEG.to_radians(), tolerance);
        if kept.len() < 3 {
            let (i, j) = most_distant_pair(&poly.ring);
            let msg = format!(
                "footprint '{}' collapsed below 3 vertices at tolerance {tolerance} m; using its longest chord",
                poly.id
            );
            log::warn!("{msg}");
            out.warnings.push(msg);
            out.segments.push(WallSegment {
                p0: poly.ring[i],
                p1: poly.ring[j],
                source_footprint: poly.id.clone(),
            });
            continue;
        }
        let ring: Vec<Point2> = kept.iter().map(|&k| poly.ring[k]).collect();
        out.segments.extend(ring_edges(&ring, &poly.id));
    }
    Ok(out)
}

/// Splits a segment into `ceil(length / max_len)` equal pieces and pushes each
/// piece's endpoints outward by `extension` meters.
pub fn subdivide_and_extend(segment: &WallSegment, max_len: f64, extension: f64) -> Result<Vec<WallSegment>> {
    if !(max_len > 0.0) || !max_len.is_finite() {
        return Err(Error::invalid(format!("max wall length must be positive, got {max_len}")));
    }
    if !(extension >= 0.0) || !extension.is_finite() {
        return Err(Error::invalid(format!("extension must be >= 0, got {extension}")));
    }
    let len = segment.length();
    if !(len > 0.0) {
        return Err(Error::invalid("cannot subdivide a zero-length segment"));
    }
    let n = (len / max_len).ceil().max(1.0) as usize;
    let dir = segment.direction();
    let (p0, p1) = (segment.p0, segment.p1);
    let at = |i: usize| -> Point2 {
        if i == 0 {
            p0
        } else if i == n {
            p1
        } else {
            let t = i as f64 / n as f64;
            [p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])]
        }
    };
    Ok((0..n)
        .map(|i| {
            let (a, b) = (at(i), at(i + 1));
            WallSegment {
                p0: [a[0] - extension * dir[0], a[1] - extension * dir[1]],
                p1: [b[0] + extension * dir[0], b[1] + extension * dir[1]],
                source_footprint: segment.source_footprint.clone(),
            }
        })
        .collect())
}

/// Continuous equirectangular coordinates `(u, v)` of the ray from `center`
/// through `point`, for a `width` x `height` panorama whose center column
/// faces `heading`.
pub fn project_to_panorama(center: Point3, heading: f64, width: u32, height: u32, point: Point3) -> Option<(f64, f64)> {
    let d = [point[0] - center[0], point[1] - center[1], point[2] - center[2]];
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if !(norm > 0.0) {
        return None;
    }
    let mut lon = d[0].atan2(d[1]) - heading;
    while lon <= -PI {
        lon += TAU;
    }
    while lon > PI {
        lon -= TAU;
    }
    let lat = (d[2] / norm).clamp(-1.0, 1.0).asin();
    Some((
        width as f64 * (lon + PI) / TAU,
        height as f64 * (FRAC_PI_2 - lat) / PI,
    ))
}

/// Casts one ray per facade pixel and samples the panorama bilinearly.
pub fn extract_facade_image(quad: &WallQuad, sphere: &Photosphere) -> Result<FacadeImage> {
    let b = &quad.base;
    let dir = b.direction();
    let rel = sub([sphere.center[0], sphere.center[1]], b.p0);
    let off_plane = (dir[0] * rel[1] - dir[1] * rel[0]).abs();
    if off_plane < 1e-9 {
        return Err(Error::invalid(format!(
            "photosphere '{}' lies on the plane of wall '{}'",
            sphere.id, quad.id
        )));
    }
    let (rows, cols) = quad.grid();
    let (w, h) = sphere.image.dimensions();
    let mut pixels = RgbImage::new(cols as u32, rows as u32);
    for row in 0..rows {
        for col in 0..cols {
            let p = quad.sample_point(row, col);
            let (u, v) = project_to_panorama(sphere.center, sphere.heading, w, h, p)
                .ok_or_else(|| Error::invalid("facade sample coincides with the photosphere center"))?;
            let rgb = sample_bilinear_wrap_x(&sphere.image, u - 0.5, v - 0.5);
            pixels.put_pixel(col as u32, row as u32, to_rgb8(rgb));
        }
    }
    Ok(FacadeImage {
        pixels,
        mpp: quad.mpp,
        quad_id: quad.id.clone(),
        photosphere_id: sphere.id.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rectified {
    pub image: FacadeImage,
    /// Row-major, `false` where the source had no pixel to sample.
    pub valid: Vec<bool>,
}

/// Inverse-warps `image` through `homography` (source to destination pixel
/// coordinates, pixel centers at integers).
pub fn apply_rectification(image: &FacadeImage, homography: &Homography) -> Result<Rectified> {
    let det = homography.determinant();
    if !(det.abs() > 1e-12) {
        return Err(Error::invalid(format!("rectification homography is singular (det = {det:e})")));
    }
    let inv = homography
        .try_inverse()
        .ok_or_else(|| Error::invalid("rectification homography could not be inverted"))?;
    let (w, h) = image.pixels.dimensions();
    let (pixels, valid) = warp_rgb(&image.pixels, w, h, |x, y| apply_homography(&inv, x, y));
    Ok(Rectified {
        image: FacadeImage {
            pixels,
            ..image.clone()
        },
        valid,
    })
}

/// Reads a GeoJSON `FeatureCollection` of `Polygon`/`MultiPolygon` features.
/// Holes are ignored; a multipolygon's parts get ids `<id>#<k>`.
pub fn parse_footprints(text: &str, origin: &str) -> Result<Vec<FootprintPolygon>> {
    let fmt = |reason: String| Error::Format {
        path: origin.to_string(),
        reason,
    };
    let fc: FeatureCollection = serde_json::from_str(text).map_err(|e| fmt(format!("not a FeatureCollection: {e}")))?;
    let mut out = Vec::new();
    for (k, feature) in fc.features.iter().enumerate() {
        let id = match &feature.id {
            Some(geojson::feature::Id::String(s)) => s.clone(),
            Some(geojson::feature::Id::Number(n)) => n.to_string(),
            None => return Err(fmt(format!("feature {k} has no id"))),
        };
        let Some(geometry) = &feature.geometry else {
            return Err(fmt(format!("feature '{id}' has no geometry")));
        };
        let polygons = match &geometry.value {
            GeometryValue::Polygon { coordinates } => vec![(id.clone(), coordinates)],
            GeometryValue::MultiPolygon { coordinates } => coordinates
                .iter()
                .enumerate()
                .map(|(i, c)| (format!("{id}#{i}"), c))
                .collect(),
            _ => return Err(fmt(format!("feature '{id}' is not a polygon"))),
        };
        for (pid, rings) in polygons {
            let Some(exterior) = rings.first() else {
                return Err(fmt(format!("feature '{pid}' has no exterior ring")));
            };
            let mut ring: Vec<Point2> = Vec::with_capacity(exterior.len());
            for pos in exterior {
                let s = pos.as_slice();
                if s.len() < 2 {
                    return Err(fmt(format!("feature '{pid}' has a position with {} coordinates", s.len())));
                }
                ring.push([s[0], s[1]]);
            }
            if ring.len() > 1 && ring.first() == ring.last() {
                ring.pop();
            }
            out.push(FootprintPolygon::new(pid, ring).map_err(|e| fmt(e.to_string()))?);
        }
    }
    Ok(out)
}

pub fn load_footprints(path: &Path) -> Result<Vec<FootprintPolygon>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_footprints(&text, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotosphereEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub x: f64,
    pub y: f64,
    #[serde(default = "default_camera_height")]
    pub z: f64,
    pub heading_deg: f64,
}

fn default_camera_height() -> f64 {
    DEFAULT_CAMERA_HEIGHT
}

/// Parses a photosphere manifest: one entry object or an array of them.
pub fn parse_photosphere_manifest(text: &str) -> Result<Vec<PhotosphereEntry>> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    Ok(if value.is_array() {
        serde_json::from_value(value)?
    } else {
        vec![serde_json::from_value(value)?]
    })
}

impl PhotosphereEntry {
    /// Loads the panorama; relative image paths resolve against `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<Photosphere> {
        let path = if self.image_path.is_absolute() {
            self.image_path.clone()
        } else {
            base_dir.join(&self.image_path)
        };
        let image = image::open(&path)
            .map_err(|e| Error::Format {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        Photosphere::new(self.id.clone(), [self.x, self.y, self.z], self.heading_deg.to_radians(), image)
    }
}
