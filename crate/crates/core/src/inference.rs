//! Full-image prediction by overlapping tiles.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::arch::Graph;
use crate::dataset::{Label, BACKGROUND};
use crate::error::{Error, Result};
use crate::raster::{mirror_index, Planes};
use crate::tensor::{BnMode, ParamStore, Shape, Tape, Tensor};

pub const TILE_SIZE: usize = 512;
pub const MIN_OVERLAP: usize = 16;

/// Composite order for ECP-style label images; later entries paint over earlier ones.
/// The ECP "wall" label is the facade class.
pub const ECP_COMPOSITE_ORDER: [&str; 8] = ["facade", "roof", "sky", "shop", "balcony", "window", "door", "chimney"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileLayout {
    /// Scaled image width covered by the tiles.
    pub width: usize,
    pub tile: usize,
    /// Resize factor from the source image to the tiled one.
    pub scale: f64,
    pub offsets: Vec<usize>,
    /// Mirrored columns appended on the right when the image is narrower than a tile.
    pub pad: usize,
}

/// Tiles of width 512 with at least 16 px overlap.
pub fn plan_tiles(width: usize) -> TileLayout {
    plan_tiles_with(width, TILE_SIZE, MIN_OVERLAP).expect("default tiling is valid")
}

/// Smallest number of `tile`-wide windows covering `width` with overlaps of at
/// least `min_overlap`, evenly spaced.
pub fn plan_tiles_with(width: usize, tile: usize, min_overlap: usize) -> Result<TileLayout> {
    if width == 0 {
        return Err(Error::invalid("cannot tile an empty image"));
    }
    if tile <= min_overlap {
        return Err(Error::invalid(format!("tile {tile} must exceed the overlap {min_overlap}")));
    }
    if width <= tile {
        return Ok(TileLayout {
            width,
            tile,
            scale: 1.0,
            offsets: vec![0],
            pad: tile - width,
        });
    }
    let step = tile - min_overlap;
    let n = 1 + (width - tile).div_ceil(step);
    let span = (width - tile) as f64;
    let offsets = (0..n)
        .map(|i| (span * i as f64 / (n - 1) as f64).round() as usize)
        .collect();
    Ok(TileLayout {
        width,
        tile,
        scale: 1.0,
        offsets,
        pad: 0,
    })
}

impl TileLayout {
    /// Number of tiles covering each column.
    pub fn coverage(&self) -> Vec<usize> {
        let mut cov = vec![0; self.width];
        for &o in &self.offsets {
            for c in cov.iter_mut().skip(o).take(self.tile) {
                *c += 1;
            }
        }
        cov
    }

    /// Cut `planes` (of width `self.width`) into tiles, mirror-padding narrow images.
    pub fn split(&self, planes: &Planes) -> Result<Vec<Planes>> {
        if planes.width != self.width {
            return Err(Error::shape(
                "split",
                format!("image width {} but layout width {}", planes.width, self.width),
            ));
        }
        let (h, t) = (planes.height, self.tile);
        let mut tiles = Vec::with_capacity(self.offsets.len());
        for &o in &self.offsets {
            let cols: Vec<usize> = (0..t).map(|x| mirror_index((o + x) as isize, self.width)).collect();
            let mut data = Vec::with_capacity(planes.channels * h * t);
            for c in 0..planes.channels {
                for y in 0..h {
                    let row = &planes.data[(c * h + y) * planes.width..(c * h + y + 1) * planes.width];
                    data.extend(cols.iter().map(|&x| row[x]));
                }
            }
            tiles.push(Planes {
                channels: planes.channels,
                width: t,
                height: h,
                data,
            });
        }
        Ok(tiles)
    }

    /// Average per-tile outputs back onto the full width. Padding columns are dropped.
    pub fn merge(&self, tiles: &[Planes]) -> Result<Planes> {
        let first = tiles.first().ok_or_else(|| Error::invalid("no tiles to merge"))?;
        if tiles.len() != self.offsets.len() {
            return Err(Error::invalid(format!(
                "{} tiles for a layout of {}",
                tiles.len(),
                self.offsets.len()
            )));
        }
        let (ch, h) = (first.channels, first.height);
        if tiles.iter().any(|t| (t.channels, t.width, t.height) != (ch, self.tile, h)) {
            return Err(Error::shape("merge", "tiles differ in shape from the layout"));
        }
        let w = self.width;
        let mut acc = vec![0.0f64; ch * h * w];
        for (tile, &o) in tiles.iter().zip(&self.offsets) {
            let cols = self.tile.min(w - o);
            for c in 0..ch {
                for y in 0..h {
                    let src = &tile.data[(c * h + y) * self.tile..][..cols];
                    let dst = &mut acc[(c * h + y) * w + o..][..cols];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s as f64;
                    }
                }
            }
        }
        let cov = self.coverage();
        let data = acc
            .chunks(w)
            .flat_map(|row| row.iter().zip(&cov).map(|(&v, &n)| (v / n as f64) as f32))
            .collect();
        Ok(Planes {
            channels: ch,
            width: w,
            height: h,
            data,
        })
    }
}

/// Anything that maps an RGB tile to per-class label probabilities.
pub trait Segmenter {
    fn classes(&self) -> &[String];

    /// Input tile as (height, width).
    fn tile_size(&self) -> (usize, usize);

    /// Output channel `4 * class + label` holds P(label) in the order NEG, UNK, POS, EDG.
    fn predict_tile(&self, tile: &Planes) -> Result<Planes>;
}

/// A trained network with its weights.
pub struct NetworkSegmenter {
    pub graph: Graph,
    pub store: ParamStore<f32>,
}

impl NetworkSegmenter {
    pub fn new(graph: Graph, store: ParamStore<f32>) -> Self {
        NetworkSegmenter { graph, store }
    }
}

impl Segmenter for NetworkSegmenter {
    fn classes(&self) -> &[String] {
        self.graph.classes()
    }

    fn tile_size(&self) -> (usize, usize) {
        self.graph.spec().input_size
    }

    fn predict_tile(&self, tile: &Planes) -> Result<Planes> {
        let (h, w) = (tile.height, tile.width);
        let x = Tensor::from_vec(
            Shape::new(1, tile.channels, h, w),
            tile.data.iter().map(|v| v - 0.5).collect(),
        )?;
        let mut tape = Tape::new();
        let xi = tape.input(x)?;
        let out = self.graph.forward(&mut tape, &self.store, xi, BnMode::Eval)?;
        let p = h * w;
        let classes = self.graph.classes();
        let mut data = Vec::with_capacity(4 * classes.len() * p);
        if let Some(joint) = out.joint {
            // a joint-label net says P(class) for its own labels and nothing else
            let labels = self.graph.spec().output_labels();
            let probs = tape.value(joint).data();
            for c in classes {
                match labels.iter().position(|l| l == c) {
                    Some(j) => {
                        let pc = &probs[j * p..(j + 1) * p];
                        data.extend(pc.iter().map(|v| 1.0 - v));
                        data.extend(std::iter::repeat_n(0.0, p));
                        data.extend_from_slice(pc);
                        data.extend(std::iter::repeat_n(0.0, p));
                    }
                    None => {
                        data.extend(std::iter::repeat_n(1.0, p));
                        data.extend(std::iter::repeat_n(0.0, 3 * p));
                    }
                }
            }
        } else {
            for &v in out.final_stage().ok_or_else(|| Error::invalid("network produced no per-class stage"))? {
                data.extend_from_slice(tape.value(v).data());
            }
        }
        Ok(Planes {
            channels: 4 * classes.len(),
            width: w,
            height: h,
            data,
        })
    }
}

/// Averaged per-class label probabilities over the scaled image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMaps {
    pub classes: Vec<String>,
    /// Scale from the source image to these maps.
    pub scale: f64,
    /// Channel `4 * class + label`, each 4-tuple summing to 1.
    pub raw: Planes,
}

impl ProbabilityMaps {
    pub fn width(&self) -> usize {
        self.raw.width
    }

    pub fn height(&self) -> usize {
        self.raw.height
    }

    pub fn plane(&self, class: usize, label: Label) -> &[f32] {
        let p = self.raw.width * self.raw.height;
        let ch = 4 * class + label as usize;
        &self.raw.data[ch * p..(ch + 1) * p]
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }
}

/// Resize to the segmenter's tile height (width `round(W·h/H)`), tile, predict
/// and average overlapping scores, then rescale each 4-tuple to sum to one.
pub fn predict_image<S: Segmenter + ?Sized>(image: &RgbImage, net: &S) -> Result<ProbabilityMaps> {
    if net.classes().is_empty() {
        return Err(Error::invalid("segmenter has an empty class vocabulary"));
    }
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::invalid("cannot predict on an empty image"));
    }
    let (th, tw) = net.tile_size();
    let scale = th as f64 / image.height() as f64;
    let w = ((image.width() as f64 * scale).round() as usize).max(1);
    let scaled = Planes::from_rgb(image).resize_bilinear(w, th);
    let mut layout = plan_tiles_with(w, tw, MIN_OVERLAP)?;
    layout.scale = scale;
    let tiles = layout.split(&scaled)?;
    let mut outs = Vec::with_capacity(tiles.len());
    for t in &tiles {
        let o = net.predict_tile(t)?;
        if o.channels != 4 * net.classes().len() || (o.width, o.height) != (t.width, t.height) {
            return Err(Error::shape("predict_tile", "output does not match tile and vocabulary"));
        }
        outs.push(o);
    }
    let mut raw = layout.merge(&outs)?;
    normalize_tuples(&mut raw);
    Ok(ProbabilityMaps {
        classes: net.classes().to_vec(),
        scale,
        raw,
    })
}

fn normalize_tuples(raw: &mut Planes) {
    let p = raw.width * raw.height;
    for k in 0..raw.channels / 4 {
        let block = &mut raw.data[4 * k * p..4 * (k + 1) * p];
        for i in 0..p {
            let s: f64 = (0..4).map(|l| block[l * p + i] as f64).sum();
            if s > 0.0 {
                for l in 0..4 {
                    block[l * p + i] = (block[l * p + i] as f64 / s) as f32;
                }
            }
        }
    }
}

/// POS/(POS+NEG) per class; NEG' is stored as `1 - POS'` so the pair sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct PosNegMaps {
    pub classes: Vec<String>,
    pub width: usize,
    pub height: usize,
    pub pos: Vec<Vec<f32>>,
    pub neg: Vec<Vec<f32>>,
    /// Pixels where POS + NEG was zero and POS' was set to 0.5.
    pub flagged: Vec<Vec<bool>>,
}

impl PosNegMaps {
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().flatten().filter(|&&f| f).count()
    }
}

pub fn renormalize_pos_neg(maps: &ProbabilityMaps) -> PosNegMaps {
    let (mut pos, mut neg, mut flagged) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..maps.classes.len() {
        let (p, n) = (maps.plane(c, Label::Pos), maps.plane(c, Label::Neg));
        let mut pc = Vec::with_capacity(p.len());
        let mut fc = Vec::with_capacity(p.len());
        for (&a, &b) in p.iter().zip(n) {
            let (v, f) = renormalize_one(a, b);
            pc.push(v);
            fc.push(f);
        }
        neg.push(pc.iter().map(|v| 1.0 - v).collect());
        pos.push(pc);
        flagged.push(fc);
    }
    PosNegMaps {
        classes: maps.classes.clone(),
        width: maps.width(),
        height: maps.height(),
        pos,
        neg,
        flagged,
    }
}

/// POS' for one pixel and whether it was degenerate.
pub fn renormalize_one(pos: f32, neg: f32) -> (f32, bool) {
    let s = pos as f64 + neg as f64;
    if s <= 0.0 {
        (0.5, true)
    } else {
        ((pos as f64 / s) as f32, false)
    }
}

/// One label per pixel; index 0 is [`BACKGROUND`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<String>,
    pub data: Vec<u8>,
}

/// Paint classes in `order` over a background base wherever POS' > 0.5.
pub fn composite_single_label(maps: &PosNegMaps, order: &[&str]) -> Result<LabelImage> {
    if order.is_empty() {
        return Err(Error::invalid("composite order is empty"));
    }
    let mut labels = vec![BACKGROUND.to_string()];
    let mut data = vec![0u8; maps.width * maps.height];
    for (k, name) in order.iter().enumerate() {
        if order[..k].contains(name) {
            return Err(Error::invalid(format!("class '{name}' repeats in the composite order")));
        }
        let ci = maps
            .class_index(name)
            .ok_or_else(|| Error::invalid(format!("composite class '{name}' is not in the vocabulary")))?;
        labels.push(name.to_string());
        let idx = (labels.len() - 1) as u8;
        for (d, &p) in data.iter_mut().zip(&maps.pos[ci]) {
            if p > 0.5 {
                *d = idx;
            }
        }
    }
    Ok(LabelImage {
        width: maps.width,
        height: maps.height,
        labels,
        data,
    })
}

const PALETTE: [[u8; 3]; 16] = [
    [0, 0, 0],
    [0, 0, 170],
    [255, 85, 0],
    [0, 170, 255],
    [170, 0, 0],
    [255, 255, 0],
    [0, 255, 0],
    [170, 255, 85],
    [85, 0, 255],
    [255, 0, 170],
    [0, 170, 85],
    [170, 170, 170],
    [255, 170, 170],
    [85, 85, 0],
    [0, 85, 85],
    [255, 255, 255],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub index: u8,
    pub label: String,
    pub rgb: [u8; 3],
}

impl LabelImage {
    pub fn legend(&self) -> Vec<LegendEntry> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| LegendEntry {
                index: i as u8,
                label: l.clone(),
                rgb: PALETTE[i % PALETTE.len()],
            })
            .collect()
    }

    /// Indexed-colour PNG.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let palette: Vec<u8> = self.legend().iter().flat_map(|e| e.rgb).collect();
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Indexed);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_palette(palette);
            let mut writer = enc.write_header().map_err(|e| Error::invalid(format!("png: {e}")))?;
            writer
                .write_image_data(&self.data)
                .map_err(|e| Error::invalid(format!("png: {e}")))?;
        }
        Ok(out)
    }

    /// Writes `<stem>.png` and `<stem>.legend.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let png_path = dir.join(format!("{stem}.png"));
        fs::write(&png_path, self.encode_png()?).map_err(|e| Error::io(&png_path, e))?;
        let legend_path = dir.join(format!("{stem}.legend.json"));
        let json = serde_json::to_string_pretty(&self.legend())?;
        fs::write(&legend_path, json).map_err(|e| Error::io(&legend_path, e))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobHeader {
    pub width: usize,
    pub height: usize,
    pub scale: f64,
    pub dtype: String,
    /// class → label name → file
    pub files: BTreeMap<String, BTreeMap<String, String>>,
}

const LABEL_NAMES: [&str; 4] = ["neg", "unk", "pos", "edg"];

/// Raw little-endian f32 planes, one file per class and label, plus the
/// renormalized POS' as label "pos_renorm", described by `<stem>.probs.json`.
pub fn save_probability_maps(dir: &Path, stem: &str, maps: &ProbabilityMaps, pn: &PosNegMaps) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for (c, class) in maps.classes.iter().enumerate() {
        let mut per = BTreeMap::new();
        let planes = Label::ALL
            .iter()
            .zip(LABEL_NAMES)
            .map(|(&l, n)| (n, maps.plane(c, l)))
            .chain(std::iter::once(("pos_renorm", pn.pos[c].as_slice())));
        for (name, plane) in planes {
            let file = format!("{stem}.{class}.{name}.f32");
            let bytes: Vec<u8> = plane.iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            per.insert(name.to_string(), file);
        }
        files.insert(class.clone(), per);
    }
    let header = BlobHeader {
        width: maps.width(),
        height: maps.height(),
        scale: maps.scale,
        dtype: "f32le".into(),
        files,
    };
    let path = dir.join(probs_header_name(stem));
    fs::write(&path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn probs_header_name(stem: &str) -> String {
    format!("{stem}.probs.json")
}

/// Read one plane written by [`save_probability_maps`].
pub fn load_blob(path: &Path, width: usize, height: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * width * height {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("{} bytes for a {width}x{height} plane", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}
