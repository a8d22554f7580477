//! Procedural facades with matching polygon annotations.
//!
//! Each image is a wall under an optional sky strip, a jittered grid of
//! windows, a sill directly below every window, balconies over the lower part
//! of some upper-floor windows, and a door on the ground floor. Annotations
//! are axis-aligned rectangles on integer pixel corners, so rasterizing them
//! reproduces the painted regions exactly.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotationSet, Ring, Shape};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Meters per pixel recorded in the annotations.
    pub mpp: f64,
    pub balconies: bool,
    pub doors: bool,
    /// Standard deviation of per-pixel color noise, in intensity levels.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            mpp: 0.1,
            balconies: true,
            doors: true,
            noise: 6.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthFacade {
    pub image: RgbImage,
    pub annotation: AnnotationSet,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Rect {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
}

impl Rect {
    fn clip(self, w: usize, h: usize) -> Option<Rect> {
        let r = Rect {
            x0: self.x0.max(0),
            y0: self.y0.max(0),
            x1: self.x1.min(w as i64),
            y1: self.y1.min(h as i64),
        };
        (r.x0 < r.x1 && r.y0 < r.y1).then_some(r)
    }

    fn ring(self) -> Ring {
        let (x0, y0, x1, y1) = (self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64);
        vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
    }
}

fn jitter_color(rng: &mut ChaCha8Rng, base: [i32; 3], spread: i32) -> [i32; 3] {
    base.map(|c| (c + rng.random_range(-spread..=spread)).clamp(0, 255))
}

struct Canvas {
    w: usize,
    px: Vec<[i32; 3]>,
}

impl Canvas {
    fn fill(&mut self, r: Rect, color: [i32; 3]) {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                self.px[y as usize * self.w + x as usize] = color;
            }
        }
    }
}

/// Generates `n` facades; image `i` depends only on `(seed, i)`.
pub fn generate(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Vec<SynthFacade>> {
    if n == 0 {
        return Err(Error::invalid("synthetic corpus size must be at least 1"));
    }
    if cfg.width < 16 || cfg.height < 16 {
        return Err(Error::invalid(format!(
            "synthetic facades need at least 16x16 pixels, got {}x{}",
            cfg.width, cfg.height
        )));
    }
    if !(cfg.mpp > 0.0) || !(cfg.noise >= 0.0) {
        return Err(Error::invalid("mpp must be positive and noise non-negative"));
    }
    let mut out: Vec<SynthFacade> = (0..n).map(|i| one(cfg, seed, i)).collect();
    if cfg.balconies && !out.iter().any(has_window_balcony_overlap) {
        out[0] = one_with_balcony(cfg, seed);
    }
    Ok(out)
}

fn has_window_balcony_overlap(f: &SynthFacade) -> bool {
    let rects = |class: &str| -> Vec<(f64, f64, f64, f64)> {
        f.annotation
            .shapes
            .iter()
            .filter(|s| s.class == class)
            .map(|s| (s.ring[0][0], s.ring[0][1], s.ring[2][0], s.ring[2][1]))
            .collect()
    };
    let windows = rects("window");
    rects("balcony").iter().any(|b| {
        windows
            .iter()
            .any(|w| w.0.max(b.0) < w.2.min(b.2) && w.1.max(b.1) < w.3.min(b.3))
    })
}

fn one_with_balcony(cfg: &SynthConfig, seed: u64) -> SynthFacade {
    (1u64..)
        .map(|k| one(cfg, seed ^ k.wrapping_mul(0xA076_1D64_78BD_642F), 0))
        .find(has_window_balcony_overlap)
        .expect("balcony layout eventually drawn")
}

fn one(cfg: &SynthConfig, seed: u64, index: usize) -> SynthFacade {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    let (w, h) = (cfg.width, cfg.height);
    let (wi, hi) = (w as i64, h as i64);
    let mut shapes = Vec::new();
    let add = |class: &str, r: Rect, shapes: &mut Vec<Shape>| {
        shapes.push(Shape {
            class: class.to_string(),
            ring: r.ring(),
        });
    };

    let sky_h = rng.random_range(0..=hi / 8);
    let sky = jitter_color(&mut rng, [150, 190, 235], 20);
    let wall = jitter_color(&mut rng, [190, 140, 100], 50);
    let glass = jitter_color(&mut rng, [40, 55, 80], 20);
    let sill_c = jitter_color(&mut rng, [225, 225, 215], 15);
    let door_c = jitter_color(&mut rng, [95, 60, 35], 15);
    let rail = jitter_color(&mut rng, [30, 30, 30], 10);
    let mut canvas = Canvas {
        w,
        px: vec![wall; w * h],
    };
    if sky_h > 0 {
        canvas.fill(Rect { x0: 0, y0: 0, x1: wi, y1: sky_h }, sky);
    }
    let facade = Rect {
        x0: 0,
        y0: sky_h,
        x1: wi,
        y1: hi,
    };
    add("facade", facade, &mut shapes);

    let floors = rng.random_range(2..=3i64);
    let cols = rng.random_range(2..=4i64);
    let floor_h = (hi - sky_h) / floors;
    let col_w = wi / cols;
    let door_col = cfg.doors.then(|| rng.random_range(0..cols));
    let win_w = (col_w * rng.random_range(45..=65) / 100).max(3);
    let win_h = (floor_h * rng.random_range(45..=60) / 100).max(4);
    let mut windows = Vec::new();
    let mut doors = Vec::new();
    for f in 0..floors {
        let top = sky_h + f * floor_h;
        let ground = f == floors - 1;
        for c in 0..cols {
            let cx = c * col_w + col_w / 2;
            if ground && door_col == Some(c) {
                let dw = (win_w + 2).min(col_w - 2);
                let dh = (floor_h * 7 / 10).max(win_h + 2);
                let r = Rect {
                    x0: cx - dw / 2,
                    y0: hi - dh,
                    x1: cx - dw / 2 + dw,
                    y1: hi,
                };
                doors.push(r);
                continue;
            }
            let jx = rng.random_range(-1..=1i64);
            let jy = rng.random_range(-1..=1i64);
            let x0 = cx - win_w / 2 + jx;
            let y0 = top + (floor_h - win_h) / 3 + jy;
            windows.push(
                Rect {
                    x0,
                    y0,
                    x1: x0 + win_w,
                    y1: y0 + win_h,
                }
                .clip(w, h)
                .expect("window inside image"),
            );
        }
    }
    let mut balconies = Vec::new();
    if cfg.balconies {
        let upper: Vec<Rect> = windows.iter().copied().filter(|r| r.y1 + 3 < hi - floor_h / 2).collect();
        for r in &upper {
            if rng.random_bool(0.4) {
                balconies.push(*r);
            }
        }
        if balconies.is_empty() && !upper.is_empty() {
            balconies.push(upper[rng.random_range(0..upper.len())]);
        }
    }
    let sills: Vec<Rect> = windows
        .iter()
        .filter_map(|r| {
            Rect {
                x0: r.x0 - 1,
                y0: r.y1,
                x1: r.x1 + 1,
                y1: r.y1 + 2,
            }
            .clip(w, h)
        })
        .collect();
    let balcony_rects: Vec<Rect> = balconies
        .iter()
        .filter_map(|r| {
            let depth = (r.y1 - r.y0) / 3;
            Rect {
                x0: r.x0 - 3,
                y0: r.y1 - depth.max(4),
                x1: r.x1 + 3,
                y1: r.y1 + 3,
            }
            .clip(w, h)
        })
        .collect();

    for r in &windows {
        canvas.fill(*r, glass);
        add("window", *r, &mut shapes);
    }
    for r in &sills {
        canvas.fill(*r, sill_c);
        add("sill", *r, &mut shapes);
    }
    for r in &doors {
        canvas.fill(*r, door_c);
        add("door", *r, &mut shapes);
    }
    for r in &balcony_rects {
        for y in r.y0..r.y1 {
            let bar = (y - r.y0) % 2 == 0 || y == r.y1 - 1;
            for x in r.x0..r.x1 {
                if bar || (x - r.x0) % 3 == 0 {
                    canvas.px[y as usize * w + x as usize] = rail;
                }
            }
        }
        add("balcony", *r, &mut shapes);
    }

    let mut image = RgbImage::new(w as u32, h as u32);
    for (i, p) in canvas.px.iter().enumerate() {
        let mut c = [0u8; 3];
        for k in 0..3 {
            let n = if cfg.noise > 0.0 {
                let u: f64 = rng.random_range(-1.0..1.0);
                u * cfg.noise * 3f64.sqrt()
            } else {
                0.0
            };
            c[k] = (p[k] as f64 + n).round().clamp(0.0, 255.0) as u8;
        }
        image.put_pixel((i % w) as u32, (i / w) as u32, Rgb(c));
    }
    SynthFacade {
        image,
        annotation: AnnotationSet {
            image_id: format!("synth_{index:05}"),
            width: w,
            height: h,
            mpp: cfg.mpp,
            shapes,
            unknown_regions: Vec::new(),
        },
    }
}

/// Writes `<id>.png` and `<id>.json` per facade.
pub fn write_corpus(dir: &Path, facades: &[SynthFacade]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in facades {
        let id = &f.annotation.image_id;
        f.image.save(dir.join(format!("{id}.png")))?;
        let json = dir.join(format!("{id}.json"));
        fs::write(&json, serde_json::to_vec_pretty(&f.annotation)?).map_err(|e| Error::io(&json, e))?;
    }
    Ok(())
}
