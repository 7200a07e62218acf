//! Differentiable bilinear inverse warping.
//!
//! `warp_image(src, flow)(p) = src(p + flow(p))`. Samples outside
//! `[0, W−1]×[0, H−1]` are zeroed and masked out. At lattice points the
//! bilinear kernel uses the cell to the right/below, so the derivative there
//! is the right-sided one.

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::raster::{FlowField, Image, ValidityMask};

/// The four taps of a bilinear lookup.
#[derive(Debug, Clone, Copy)]
struct Taps {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

#[inline]
fn axis_taps(q: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let fl = q.floor();
    let mut i0 = fl as usize;
    let mut f = q - fl;
    if i0 >= n - 1 {
        // q == n − 1 exactly: use the last cell with full weight on its right tap.
        i0 = n - 2;
        f = 1.0;
    }
    (i0, i0 + 1, f)
}

#[inline]
fn taps(width: usize, height: usize, qx: f64, qy: f64) -> Option<Taps> {
    let max_x = (width - 1) as f64;
    let max_y = (height - 1) as f64;
    if !(qx >= 0.0 && qx <= max_x && qy >= 0.0 && qy <= max_y) {
        return None;
    }
    let (x0, x1, fx) = axis_taps(qx, width);
    let (y0, y1, fy) = axis_taps(qy, height);
    Some(Taps {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
    })
}

#[inline]
fn interp(img: &Image, t: &Taps, c: usize) -> f64 {
    let a = img.get(t.x0, t.y0, c);
    let b = img.get(t.x1, t.y0, c);
    let d = img.get(t.x0, t.y1, c);
    let e = img.get(t.x1, t.y1, c);
    let top = a + t.fx * (b - a);
    let bottom = d + t.fx * (e - d);
    top + t.fy * (bottom - top)
}

/// Partial derivatives of the interpolated value w.r.t. `(qx, qy)`.
#[inline]
fn interp_grad(img: &Image, t: &Taps, c: usize) -> [f64; 2] {
    let a = img.get(t.x0, t.y0, c);
    let b = img.get(t.x1, t.y0, c);
    let d = img.get(t.x0, t.y1, c);
    let e = img.get(t.x1, t.y1, c);
    let (dx_scale, dy_scale) = (
        if t.x0 == t.x1 { 0.0 } else { 1.0 },
        if t.y0 == t.y1 { 0.0 } else { 1.0 },
    );
    let gx = (1.0 - t.fy) * (b - a) + t.fy * (e - d);
    let gy = (1.0 - t.fx) * (d - a) + t.fx * (e - b);
    [gx * dx_scale, gy * dy_scale]
}

/// Bilinear lookup of every channel at continuous coordinate `q`.
///
/// Returns zeros and `false` when `q` lies outside the pixel-center hull.
pub fn sample_bilinear(img: &Image, q: Vector2<f64>) -> (Vec<f64>, bool) {
    match taps(img.width(), img.height(), q.x, q.y) {
        Some(t) => (
            (0..img.channels()).map(|c| interp(img, &t, c)).collect(),
            true,
        ),
        None => (vec![0.0; img.channels()], false),
    }
}

fn check_dims(src: &Image, flow: &FlowField) -> Result<()> {
    if src.dims() != flow.dims() {
        return Err(Error::dims(src.dims(), flow.dims()));
    }
    if src.width() == 0 || src.height() == 0 {
        return Err(Error::InvalidInput("empty image".into()));
    }
    Ok(())
}

/// Synthesizes `src(p + flow(p))` for every pixel.
pub fn warp_image(src: &Image, flow: &FlowField) -> Result<(Image, ValidityMask)> {
    check_dims(src, flow)?;
    let (w, h, ch) = (src.width(), src.height(), src.channels());
    let mut out = Image::constant(w, h, ch, 0.0);
    let mut mask = ValidityMask::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let f = flow.get(x, y);
            if let Some(t) = taps(w, h, x as f64 + f[0], y as f64 + f[1]) {
                mask.set(x, y, true);
                for c in 0..ch {
                    out.set(x, y, c, interp(src, &t, c));
                }
            }
        }
    }
    Ok((out, mask))
}

/// Chain rule of [`warp_image`] w.r.t. the flow.
///
/// `upstream` holds `∂L/∂out` laid out like the warped image. Pixels whose
/// sample fell outside the source get zero gradient.
pub fn warp_gradient(src: &Image, flow: &FlowField, upstream: &[f64]) -> Result<FlowField> {
    check_dims(src, flow)?;
    let (w, h, ch) = (src.width(), src.height(), src.channels());
    if upstream.len() != w * h * ch {
        return Err(Error::InvalidInput(format!(
            "upstream adjoint has {} values, expected {}",
            upstream.len(),
            w * h * ch
        )));
    }
    let mut grad = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let f = flow.get(x, y);
            let Some(t) = taps(w, h, x as f64 + f[0], y as f64 + f[1]) else {
                continue;
            };
            let base = (y * w + x) * ch;
            let mut g = [0.0, 0.0];
            for c in 0..ch {
                let d = interp_grad(src, &t, c);
                g[0] += upstream[base + c] * d[0];
                g[1] += upstream[base + c] * d[1];
            }
            grad.set(x, y, g);
        }
    }
    Ok(grad)
}
