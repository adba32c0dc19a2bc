//! Structural similarity with a 7x7 Gaussian window (sigma 1.5), averaged
//! over valid window positions.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const WINDOW: usize = 7;
pub const SIGMA: f64 = 1.5;
/// Dynamic range of pixel values.
pub const L: f64 = 1.0;
pub const C1: f64 = (0.01 * L) * (0.01 * L);
pub const C2: f64 = (0.03 * L) * (0.03 * L);

/// Normalised 2-D window, row-major.
pub fn gaussian_window() -> [[f64; WINDOW]; WINDOW] {
    let r = (WINDOW / 2) as f64;
    let g: Vec<f64> = (0..WINDOW)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * SIGMA * SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = [[0.0; WINDOW]; WINDOW];
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = g[i] * g[j] / (s * s);
        }
    }
    w
}

/// SSIM of two `[H, W]` images with values in `[0, 1]`.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b)?;
    let &[h, w] = a.shape() else {
        return Err(Error::shape(format!("ssim expects [H, W] images, got {:?}", a.shape())));
    };
    if h < WINDOW || w < WINDOW {
        return Err(Error::shape(format!("ssim needs at least {WINDOW}x{WINDOW} pixels, got {h}x{w}")));
    }
    let (x, y) = (a.to_f64_vec(), b.to_f64_vec());
    let win = gaussian_window();
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (di, row) in win.iter().enumerate() {
                let base = (i + di) * w + j;
                for (dj, &g) in row.iter().enumerate() {
                    let (p, q) = (x[base + dj], y[base + dj]);
                    mx += g * p;
                    my += g * q;
                    sxx += g * (p * p);
                    syy += g * (q * q);
                    sxy += g * (p * q); // same grouping as sxx/syy: exact symmetry and self-similarity
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            total += ((2.0 * mx * my + C1) * (2.0 * cxy + C2))
                / ((mx * mx + my * my + C1) * (vx + vy + C2));
        }
    }
    Ok(total / (oh * ow) as f64)
}
