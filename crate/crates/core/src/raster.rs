//! Raster helpers shared by extraction, augmentation and inference.
//!
//! Continuous pixel coordinates put pixel centers on integers: pixel (x, y)
//! covers [x - 0.5, x + 0.5) × [y - 0.5, y + 0.5).

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, SMatrix, SVector, Vector3};

pub type Homography = Matrix3<f64>;

/// Map a point through a homography; `None` at the line at infinity.
pub fn apply_homography(h: &Homography, x: f64, y: f64) -> Option<(f64, f64)> {
    let p = h * Vector3::new(x, y, 1.0);
    if p.z.abs() < 1e-12 {
        return None;
    }
    Some((p.x / p.z, p.y / p.z))
}

/// Homography mapping each `src[i]` onto `dst[i]`, normalized so h33 = 1.
pub fn homography_from_points(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Option<Homography> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = src[i];
        let (u, v) = dst[i];
        let r = 2 * i;
        a.set_row(r, &SMatrix::<f64, 1, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
        a.set_row(r + 1, &SMatrix::<f64, 1, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]));
        b[r] = u;
        b[r + 1] = v;
    }
    let sol = a.lu().solve(&b)?;
    let h = Matrix3::new(sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0);
    h.iter().all(|v| v.is_finite()).then_some(h)
}

/// Bilinear sample; `None` outside the convex hull of pixel centers.
pub fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> Option<[f64; 3]> {
    const SLACK: f64 = 1e-9;
    let (w, h) = (img.width() as f64, img.height() as f64);
    if !(x >= -SLACK && y >= -SLACK && x <= w - 1.0 + SLACK && y <= h - 1.0 + SLACK) {
        return None;
    }
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    Some(bilinear_clamped(img, x, y))
}

/// Bilinear sample with `x` wrapping around horizontally and `y` clamped.
pub fn sample_bilinear_wrap_x(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let w = img.width() as usize;
    let h = img.height() as f64;
    let y = y.clamp(0.0, h - 1.0);
    let xf = x.floor();
    let fx = x - xf;
    let x0 = (xf as i64).rem_euclid(w as i64) as usize;
    let x1 = (x0 + 1) % w;
    let y0 = y.floor() as usize;
    let y1 = (y0 + 1).min(img.height() as usize - 1);
    let fy = y - y0 as f64;
    lerp4(img, x0, x1, y0, y1, fx, fy)
}

fn bilinear_clamped(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width() as usize - 1);
    let y1 = (y0 + 1).min(img.height() as usize - 1);
    lerp4(img, x0, x1, y0, y1, x - x0 as f64, y - y0 as f64)
}

fn lerp4(img: &RgbImage, x0: usize, x1: usize, y0: usize, y1: usize, fx: f64, fy: f64) -> [f64; 3] {
    let p = |x: usize, y: usize| img.get_pixel(x as u32, y as u32).0;
    let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
    let mut out = [0.0; 3];
    for k in 0..3 {
        let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
        let bot = c[k] as f64 * (1.0 - fx) + d[k] as f64 * fx;
        out[k] = top * (1.0 - fy) + bot * fy;
    }
    out
}

pub fn to_rgb8(v: [f64; 3]) -> Rgb<u8> {
    Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8))
}

/// Inverse-warp: every output pixel pulls from `inverse(x, y)` in `src`.
/// Pixels whose source falls outside `src` are black and marked invalid.
pub fn warp_rgb<F>(src: &RgbImage, out_w: u32, out_h: u32, inverse: F) -> (RgbImage, Vec<bool>)
where
    F: Fn(f64, f64) -> Option<(f64, f64)>,
{
    let mut out = RgbImage::new(out_w, out_h);
    let mut valid = vec![false; (out_w * out_h) as usize];
    for y in 0..out_h {
        for x in 0..out_w {
            if let Some(v) = inverse(x as f64, y as f64).and_then(|(sx, sy)| sample_bilinear(src, sx, sy)) {
                out.put_pixel(x, y, to_rgb8(v));
                valid[(y * out_w + x) as usize] = true;
            }
        }
    }
    (out, valid)
}

/// Planar float image with values in [0, 1], channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Planes {
    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * w * h];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * w * h + y as usize * w + x as usize] = p.0[c] as f32 / 255.0;
            }
        }
        Planes {
            channels: 3,
            width: w,
            height: h,
            data,
        }
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Bilinear resize using half-pixel centers.
    pub fn resize_bilinear(&self, new_w: usize, new_h: usize) -> Planes {
        if (new_w, new_h) == (self.width, self.height) {
            return self.clone();
        }
        let sx = self.width as f64 / new_w as f64;
        let sy = self.height as f64 / new_h as f64;
        let axis = |i: usize, scale: f64, len: usize| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(len - 1), (s - i0 as f64) as f32)
        };
        let xs: Vec<_> = (0..new_w).map(|x| axis(x, sx, self.width)).collect();
        let mut data = vec![0.0f32; self.channels * new_w * new_h];
        for c in 0..self.channels {
            for y in 0..new_h {
                let (y0, y1, fy) = axis(y, sy, self.height);
                for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = self.get(c, x0, y0) * (1.0 - fx) + self.get(c, x1, y0) * fx;
                    let bot = self.get(c, x0, y1) * (1.0 - fx) + self.get(c, x1, y1) * fx;
                    data[(c * new_h + y) * new_w + x] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Planes {
            channels: self.channels,
            width: new_w,
            height: new_h,
            data,
        }
    }
}

/// Nearest-neighbour resize of a categorical plane (labels are never blended).
pub fn resize_nearest<T: Copy>(src: &[T], w: usize, h: usize, new_w: usize, new_h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(new_w * new_h);
    for y in 0..new_h {
        let sy = (((y as f64 + 0.5) * h as f64 / new_h as f64) as usize).min(h - 1);
        for x in 0..new_w {
            let sx = (((x as f64 + 0.5) * w as f64 / new_w as f64) as usize).min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}

/// Reflect an index into [0, len) (edge pixel not repeated), periodically.
pub fn mirror_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}
