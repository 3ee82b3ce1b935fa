//! Small bilinear image kernels shared by the rasterizer, the patch sampler
//! and the fusion network.
//!
//! Coordinate convention: pixel `(row i, col j)` covers the unit square with
//! corners `(j, i)` and `(j+1, i+1)`, so its center sits at `(j+0.5, i+0.5)`.
//! Sampling functions take `(x, y)` in this corner-origin frame. Resizing
//! uses the half-pixel-center mapping (`align_corners=false` in the usual
//! deep-learning framing) with edge clamping; geometric warps (rotation,
//! fractional crops) use zero padding because there is genuinely nothing
//! outside the rasterized area.

use ndarray::{Array2, ArrayView2};

/// Bilinear sample with zero padding outside the image.
pub fn sample_zero(img: &ArrayView2<f32>, x: f64, y: f64) -> f32 {
    let (h, w) = img.dim();
    let u = x - 0.5;
    let v = y - 0.5;
    let j0 = u.floor();
    let i0 = v.floor();
    let fx = (u - j0) as f32;
    let fy = (v - i0) as f32;
    let (j0, i0) = (j0 as i64, i0 as i64);
    let at = |i: i64, j: i64| -> f32 {
        if i < 0 || j < 0 || i >= h as i64 || j >= w as i64 {
            0.0
        } else {
            img[(i as usize, j as usize)]
        }
    };
    let top = at(i0, j0) * (1.0 - fx) + at(i0, j0 + 1) * fx;
    let bot = at(i0 + 1, j0) * (1.0 - fx) + at(i0 + 1, j0 + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0, "resize needs non-empty shapes");
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;

    // Precompute per-axis taps; the kernel is separable.
    let taps = |n_out: usize, n_in: usize, s: f64| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|o| {
                let c = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = c.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (c - lo as f64) as f32)
            })
            .collect()
    };
    let ty = taps(out_h, h, sy);
    let tx = taps(out_w, w, sx);

    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (i0, i1, fy) = ty[i];
        let (j0, j1, fx) = tx[j];
        let top = img[(i0, j0)] * (1.0 - fx) + img[(i0, j1)] * fx;
        let bot = img[(i1, j0)] * (1.0 - fx) + img[(i1, j1)] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Rotate an image about its center so that the compass direction
/// `heading_deg` points up in the output.
///
/// Inverse mapping: each output pixel samples the source at its own
/// center offset rotated by the heading, `[x', y'] = [cos h * x - sin h * y,
/// sin h * x + cos h * y]` in the x-east / y-south pixel frame, with zero
/// padding outside the source.
pub fn rotate_heading_up(img: &ArrayView2<f32>, heading_deg: f64) -> Array2<f32> {
    let (h, w) = img.dim();
    let th = heading_deg.to_radians();
    let (sin, cos) = th.sin_cos();
    let cx = w as f64 / 2.0;
    let cy = h as f64 / 2.0;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let ux = j as f64 + 0.5 - cx;
        let uy = i as f64 + 0.5 - cy;
        let sx = cx + cos * ux - sin * uy;
        let sy = cy + sin * ux + cos * uy;
        sample_zero(img, sx, sy)
    })
}

/// Crop a `side x side` window whose center is the (possibly fractional)
/// source position `(cx, cy)`, sampling bilinearly with zero padding.
pub fn crop_centered(img: &ArrayView2<f32>, cx: f64, cy: f64, side: usize) -> Array2<f32> {
    let half = side as f64 / 2.0;
    Array2::from_shape_fn((side, side), |(i, j)| {
        sample_zero(img, cx - half + j as f64 + 0.5, cy - half + i as f64 + 0.5)
    })
}

/// Integer center crop; panics if the request does not fit.
pub fn crop_center_exact(img: &ArrayView2<f32>, side: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    assert!(side <= h && side <= w, "center crop {side} does not fit in {h}x{w}");
    let y0 = (h - side) / 2;
    let x0 = (w - side) / 2;
    img.slice(ndarray::s![y0..y0 + side, x0..x0 + side]).to_owned()
}

/// 1-D linear resample with half-pixel centers and edge clamping; used for
/// temporal alignment of feature tensors.
pub fn resize_linear_1d(src: &[f32], out_len: usize) -> Vec<f32> {
    assert!(!src.is_empty() && out_len > 0);
    let s = src.len() as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let c = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (src.len() - 1) as f64);
            let lo = c.floor() as usize;
            let hi = (lo + 1).min(src.len() - 1);
            let f = (c - lo as f64) as f32;
            src[lo] * (1.0 - f) + src[hi] * f
        })
        .collect()
}
