//! Fixed orthonormal 2x2-patch map between grayscale pixels and 4-channel
//! latents.
//!
//! Pixels are `[n, 1, H, W]`; latents are `[n, 4, H/2, W/2]`. Each 2x2 patch
//! `[a b; c d]` is projected onto the Haar basis, so the map is orthonormal
//! and its transpose is its inverse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LATENT_CHANNELS: usize = 4;
pub const PATCH: usize = 2;

/// Axis sizes of a latent video batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub b: usize,
    pub c: usize,
    pub f: usize,
    pub h: usize,
    pub w: usize,
}

impl Default for ShapeSpec {
    fn default() -> Self {
        Self {
            b: 1,
            c: LATENT_CHANNELS,
            f: 8,
            h: 16,
            w: 16,
        }
    }
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if [self.b, self.c, self.f, self.h, self.w].contains(&0) {
            return Err(Error::Config(format!("all shape axes must be positive: {self:?}")));
        }
        if self.c != LATENT_CHANNELS {
            return Err(Error::Config(format!(
                "latent channel count is fixed at {LATENT_CHANNELS}, got {}",
                self.c
            )));
        }
        if self.h % 2 != 0 || self.w % 2 != 0 {
            return Err(Error::Config(format!(
                "latent size must be even for the bottleneck: {}x{}",
                self.h, self.w
            )));
        }
        Ok(())
    }

    pub fn pixel_size(&self) -> (usize, usize) {
        (self.h * PATCH, self.w * PATCH)
    }
}

// Rows of the Haar basis; each row has norm 1.
const BASIS: [[f64; 4]; 4] = [
    [0.5, 0.5, 0.5, 0.5],
    [0.5, -0.5, 0.5, -0.5],
    [0.5, 0.5, -0.5, -0.5],
    [0.5, -0.5, -0.5, 0.5],
];

pub fn encode_latent<T: Scalar>(pixels: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, h, w] = pixels.shape() else {
        return Err(Error::shape(format!("pixels must be [n,1,H,W], got {:?}", pixels.shape())));
    };
    if c != 1 || h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::shape(format!(
            "pixels {:?}: need one channel and sizes divisible by {PATCH}",
            pixels.shape()
        )));
    }
    let (lh, lw) = (h / 2, w / 2);
    let basis = BASIS.map(|r| r.map(T::cst));
    let src = pixels.data();
    let mut out = vec![T::zero(); n * 4 * lh * lw];
    for ni in 0..n {
        let img = &src[ni * h * w..(ni + 1) * h * w];
        for y in 0..lh {
            for x in 0..lw {
                let p = [
                    img[2 * y * w + 2 * x],
                    img[2 * y * w + 2 * x + 1],
                    img[(2 * y + 1) * w + 2 * x],
                    img[(2 * y + 1) * w + 2 * x + 1],
                ];
                for (ch, row) in basis.iter().enumerate() {
                    let v = row[0] * p[0] + row[1] * p[1] + row[2] * p[2] + row[3] * p[3];
                    out[((ni * 4 + ch) * lh + y) * lw + x] = v;
                }
            }
        }
    }
    Tensor::new(&[n, 4, lh, lw], out)
}

pub fn decode_latent<T: Scalar>(latent: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, lh, lw] = latent.shape() else {
        return Err(Error::shape(format!("latent must be [n,4,h,w], got {:?}", latent.shape())));
    };
    if c != LATENT_CHANNELS {
        return Err(Error::shape(format!("latent needs 4 channels, got {c}")));
    }
    let (h, w) = (lh * 2, lw * 2);
    let basis = BASIS.map(|r| r.map(T::cst));
    let src = latent.data();
    let mut out = vec![T::zero(); n * h * w];
    for ni in 0..n {
        for y in 0..lh {
            for x in 0..lw {
                let mut p = [T::zero(); 4];
                for (ch, row) in basis.iter().enumerate() {
                    let v = src[((ni * 4 + ch) * lh + y) * lw + x];
                    for k in 0..4 {
                        p[k] += row[k] * v;
                    }
                }
                let img = &mut out[ni * h * w..(ni + 1) * h * w];
                img[2 * y * w + 2 * x] = p[0];
                img[2 * y * w + 2 * x + 1] = p[1];
                img[(2 * y + 1) * w + 2 * x] = p[2];
                img[(2 * y + 1) * w + 2 * x + 1] = p[3];
            }
        }
    }
    Tensor::new(&[n, 1, h, w], out)
}

/// Pixel video `[f, H, W]` in `[0, 1]` to latents `[f, 4, H/2, W/2]` of the
/// centred image `2x - 1`.
pub fn video_to_latent<T: Scalar>(video: &Tensor<T>) -> Result<Tensor<T>> {
    let &[f, h, w] = video.shape() else {
        return Err(Error::shape(format!("video must be [f, H, W], got {:?}", video.shape())));
    };
    let two = T::cst(2.0);
    encode_latent(&video.map(|v| v * two - T::one()).into_reshape(&[f, 1, h, w])?)
}

/// Inverse of [`video_to_latent`], clamped to `[0, 1]`.
pub fn latent_to_video<T: Scalar>(latent: &Tensor<T>) -> Result<Tensor<T>> {
    let px = decode_latent(latent)?;
    let (f, h, w) = (px.dim(0), px.dim(2), px.dim(3));
    let half = T::cst(0.5);
    px.map(|v| ((v + T::one()) * half).max(T::zero()).min(T::one())).into_reshape(&[f, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn round_trip_is_exact_to_rounding() {
        let mut r = rng::from_seed(1);
        let x = Tensor::<f64>::uniform(&[3, 1, 8, 12], 0.0, 1.0, &mut r);
        let z = encode_latent(&x).unwrap();
        assert_eq!(z.shape(), &[3, 4, 4, 6]);
        assert!(decode_latent(&z).unwrap().max_abs_diff(&x) < 1e-6);
        let xf = x.cast::<f32>();
        assert!(decode_latent(&encode_latent(&xf).unwrap()).unwrap().max_abs_diff(&xf) < 1e-6);
    }

    #[test]
    fn constant_image_maps_to_first_channel() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 4], 0.3);
        let z = encode_latent(&x).unwrap();
        for ch in 0..4 {
            for y in 0..2 {
                for xx in 0..2 {
                    let want = if ch == 0 { 0.6 } else { 0.0 };
                    assert!((z.at(&[0, ch, y, xx]) - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn energy_is_preserved() {
        let mut r = rng::from_seed(2);
        let x = Tensor::<f64>::randn(&[2, 1, 6, 6], 1.0, &mut r);
        let direct: f64 = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((encode_latent(&x).unwrap().norm() - direct).abs() < 1e-6);
    }

    #[test]
    fn indivisible_sizes_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 5, 4]);
        assert!(matches!(encode_latent(&x), Err(Error::Shape(_))));
        assert!(encode_latent(&Tensor::<f32>::zeros(&[1, 3, 4, 4])).is_err());
        assert!(decode_latent(&Tensor::<f32>::zeros(&[1, 3, 4, 4])).is_err());
    }

    #[test]
    fn pixel_video_round_trip() {
        let v = Tensor::<f64>::uniform(&[2, 4, 6], 0.0, 1.0, &mut rng::from_seed(5));
        let z = video_to_latent(&v).unwrap();
        assert_eq!(z.shape(), &[2, 4, 2, 3]);
        assert!(latent_to_video(&z).unwrap().max_abs_diff(&v) < 1e-12);
        let big = z.map(|x| x * 10.0);
        let px = latent_to_video(&big).unwrap();
        assert!(px.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn shape_spec_validation() {
        assert!(ShapeSpec::default().validate().is_ok());
        let bad = ShapeSpec { c: 3, ..ShapeSpec::default() };
        assert!(bad.validate().is_err());
        let bad = ShapeSpec { f: 0, ..ShapeSpec::default() };
        assert!(bad.validate().is_err());
    }
}
