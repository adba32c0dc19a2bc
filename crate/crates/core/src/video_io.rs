//! Lossless frame-stack container for pixel videos `[f, H, W]`:
//! magic, version, dtype, frame count, height, width, raw little-endian
//! frames, then a SHA-256 of everything before it.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::binio::{put_str, put_tensor, put_u32, Reader};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VEDSTACK";
const VERSION: u32 = 1;

pub fn video_to_bytes<T: Scalar>(video: &Tensor<T>) -> Result<Vec<u8>> {
    if video.rank() != 3 {
        return Err(Error::shape(format!("frame stack must be [f, H, W], got {:?}", video.shape())));
    }
    let mut out = Vec::with_capacity(64 + video.len() * 8);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_str(&mut out, T::DTYPE);
    put_tensor(&mut out, video);
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    Ok(out)
}

pub fn video_from_bytes<T: Scalar>(buf: &[u8]) -> Result<Tensor<T>> {
    if buf.len() < MAGIC.len() + 32 {
        return Err(Error::corrupt("frame stack", "file too short"));
    }
    let (body, sum) = buf.split_at(buf.len() - 32);
    let mut r = Reader::new(body, "frame stack");
    r.expect_magic(MAGIC)?;
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::corrupt("frame stack", "checksum mismatch"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::corrupt("frame stack", format!("unsupported version {version}")));
    }
    let dtype = r.str()?;
    let t: Tensor<T> = r.tensor(&dtype)?;
    if t.rank() != 3 || r.remaining() != 0 {
        return Err(Error::corrupt("frame stack", format!("bad layout {:?}", t.shape())));
    }
    Ok(t)
}

pub fn write_video<T: Scalar>(path: &Path, video: &Tensor<T>) -> Result<()> {
    write_atomic(path, &video_to_bytes(video)?)
}

pub fn read_video<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    video_from_bytes(&std::fs::read(path)?)
}

/// Imports a sequence of 8-bit grayscale PNG frames of equal size.
pub fn import_png_frames<T: Scalar>(paths: &[impl AsRef<Path>]) -> Result<Tensor<T>> {
    let mut dims = None;
    let mut data = Vec::new();
    for p in paths {
        let img = image::open(p.as_ref())
            .map_err(|e| Error::Image(format!("{}: {e}", p.as_ref().display())))?
            .to_luma8();
        let d = (img.height() as usize, img.width() as usize);
        if *dims.get_or_insert(d) != d {
            return Err(Error::shape(format!("frame {} is {d:?}, expected {dims:?}", p.as_ref().display())));
        }
        data.extend(img.pixels().map(|px| T::cst(px.0[0] as f64 / 255.0)));
    }
    let (h, w) = dims.ok_or_else(|| Error::Argument("no frames to import".into()))?;
    Tensor::new(&[paths.len(), h, w], data)
}
