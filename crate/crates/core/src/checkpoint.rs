//! Versioned binary checkpoint: model config, named parameter arrays, the
//! topology digest, and a trailing SHA-256 of everything before it.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::binio::{put_str, put_tensor, put_u32, Reader};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::fsutil::{hex, write_atomic};
use crate::params::ParamStore;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"VEDCKPT\0";
const VERSION: u32 = 1;

pub fn checkpoint_to_bytes<T: Scalar>(model: &Denoiser<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_str(&mut out, T::DTYPE);
    put_str(&mut out, &serde_json::to_string(&model.config)?);
    put_str(&mut out, &model.digest());
    put_u32(&mut out, model.params.len() as u32);
    for (name, t) in model.params.iter() {
        put_str(&mut out, name);
        put_tensor(&mut out, t);
    }
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    Ok(out)
}

pub fn checkpoint_from_bytes<T: Scalar>(buf: &[u8]) -> Result<Denoiser<T>> {
    if buf.len() < 32 + MAGIC.len() {
        return Err(Error::corrupt("checkpoint", "file too short"));
    }
    let (body, sum) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::corrupt("checkpoint", "checksum mismatch"));
    }
    let mut r = Reader::new(body, "checkpoint");
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::corrupt("checkpoint", format!("unsupported version {version}")));
    }
    let dtype = r.str()?;
    let config: DenoiserConfig = serde_json::from_str(&r.str()?)
        .map_err(|e| Error::corrupt("checkpoint", format!("config: {e}")))?;
    let digest = r.str()?;
    let n = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = r.str()?;
        params.insert(name, r.tensor(&dtype)?);
    }
    if r.remaining() != 0 {
        return Err(Error::corrupt("checkpoint", "trailing bytes"));
    }
    let model = Denoiser::from_parts(config, params)?;
    let found = model.digest();
    if found != digest {
        return Err(Error::Topology {
            expected: digest,
            found,
        });
    }
    Ok(model)
}

/// Short content identifier of a checkpoint.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes)[..8])
}

/// Writes the checkpoint and returns its id.
pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Denoiser<T>) -> Result<String> {
    let b = checkpoint_to_bytes(model)?;
    write_atomic(path, &b)?;
    Ok(checkpoint_id(&b))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Denoiser<T>, String)> {
    let b = std::fs::read(path)?;
    Ok((checkpoint_from_bytes(&b)?, checkpoint_id(&b)))
}
