//! Same-padded 2D cross-correlation via im2col + GEMM.

use super::{Real, Shape, Tensor};

/// Patch matrix of one sample: rows are (channel, ky, kx), columns pixels.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, col: &mut [T]) {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let p = h * w;
    for ci in 0..c {
        let plane = &x[ci * p..(ci + 1) * p];
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ci * kh + i) * kw + j) * p;
                let dst = &mut col[row..row + p];
                // output x range whose source column sx = x + j - pw is in bounds
                let x0 = pw.saturating_sub(j);
                let x1 = (w + pw).saturating_sub(j).min(w);
                for y in 0..h {
                    let d = &mut dst[y * w..(y + 1) * w];
                    let sy = y + i;
                    if sy < ph || sy - ph >= h || x0 >= x1 {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(sy - ph) * w..(sy - ph + 1) * w];
                    d[..x0].fill(T::zero());
                    d[x1..].fill(T::zero());
                    let sx0 = x0 + j - pw;
                    d[x0..x1].copy_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back into image layout.
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize, dx: &mut [T]) {
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let p = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * p..(ci + 1) * p];
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ci * kh + i) * kw + j) * p;
                let src = &col[row..row + p];
                let x0 = pw.saturating_sub(j);
                let x1 = (w + pw).saturating_sub(j).min(w);
                if x0 >= x1 {
                    continue;
                }
                let sx0 = x0 + j - pw;
                for y in 0..h {
                    let sy = y + i;
                    if sy < ph || sy - ph >= h {
                        continue;
                    }
                    let d = &mut plane[(sy - ph) * w + sx0..(sy - ph) * w + sx0 + (x1 - x0)];
                    for (a, &g) in d.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *a += g;
                    }
                }
            }
        }
    }
}

/// Forward pass. `weight` is (cout, cin, kh, kw); `bias` is (1, cout, 1, 1).
pub(crate) fn conv2d_forward<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let xs = x.shape();
    let ws = weight.shape();
    let (cout, kh, kw) = (ws.n, ws.h, ws.w);
    let k = xs.c * kh * kw;
    let p = xs.plane();
    let mut out = Tensor::zeros(Shape::new(xs.n, cout, xs.h, xs.w));
    let mut col = vec![T::zero(); k * p];
    for n in 0..xs.n {
        im2col(x.sample(n), xs.c, xs.h, xs.w, kh, kw, &mut col);
        let o = &mut out.data_mut()[n * cout * p..(n + 1) * cout * p];
        for (co, chunk) in o.chunks_mut(p).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        T::gemm(
            cout,
            k,
            p,
            T::one(),
            weight.data(),
            k as isize,
            1,
            &col,
            p as isize,
            1,
            T::one(),
            o,
            p as isize,
            1,
        );
    }
    out
}

/// Backward pass; accumulates into `dw`/`db` and returns dx when requested.
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    let (cout, kh, kw) = (ws.n, ws.h, ws.w);
    let k = xs.c * kh * kw;
    let p = xs.plane();
    let mut col = vec![T::zero(); k * p];
    let mut dcol = if need_dx { vec![T::zero(); k * p] } else { Vec::new() };
    let mut dx = need_dx.then(|| Tensor::zeros(xs));
    for n in 0..xs.n {
        let g = &gy.data()[n * cout * p..(n + 1) * cout * p];
        for (co, chunk) in g.chunks(p).enumerate() {
            let s: T = chunk.iter().copied().sum();
            db.data_mut()[co] += s;
        }
        im2col(x.sample(n), xs.c, xs.h, xs.w, kh, kw, &mut col);
        T::gemm(
            cout,
            p,
            k,
            T::one(),
            g,
            p as isize,
            1,
            &col,
            1,
            p as isize,
            T::one(),
            dw.data_mut(),
            k as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                k,
                cout,
                p,
                T::one(),
                weight.data(),
                1,
                k as isize,
                g,
                p as isize,
                1,
                T::zero(),
                &mut dcol,
                p as isize,
                1,
            );
            let s = xs.c * p;
            col2im(&dcol, xs.c, xs.h, xs.w, kh, kw, &mut dx.data_mut()[n * s..(n + 1) * s]);
        }
    }
    dx
}
