//! Editing trajectories: the first frame's per-(step, layer) attention keys
//! and values captured while its edit is sampled, plus the latent after every
//! step. Replayed as extra attention context when the whole video is edited.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::binio::{put_str, put_tensor, put_u32, put_u64, put_u8, Reader};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Guidance branches evaluated per step: unconditional, image-only, full.
pub const CFG_BRANCHES: usize = 3;

const MAGIC: &[u8; 8] = b"VEDTRAJ\0";
const VERSION: u32 = 1;
const KIND_KV: u8 = 0;
const KIND_LATENT: u8 = 1;

/// Keys and values of one (step, layer): `[CFG_BRANCHES, L, d]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct KvEntry<T> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
}

impl<T: Scalar> KvEntry<T> {
    pub fn branch(&self, i: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        if i >= CFG_BRANCHES || self.keys.rank() != 3 {
            return Err(Error::Trajectory(format!("no branch {i} in entry {:?}", self.keys.shape())));
        }
        let (l, d) = (self.keys.dim(1), self.keys.dim(2));
        let dv = self.values.dim(2);
        Ok((
            self.keys.narrow(0, i, 1)?.into_reshape(&[l, d])?,
            self.values.narrow(0, i, 1)?.into_reshape(&[l, dv])?,
        ))
    }
}

/// Header fields shared by in-memory and on-disk trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryMeta {
    pub digest: String,
    pub guidance: GuidanceConfig,
    pub steps: usize,
    pub layer_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditingTrajectory<T> {
    pub meta: TrajectoryMeta,
    pub entries: BTreeMap<(usize, usize), KvEntry<T>>,
    /// Initial noise followed by the latent after each step (`steps + 1`).
    pub latents: Vec<Tensor<T>>,
}

impl<T: Scalar> EditingTrajectory<T> {
    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if self.entries.len() != m.steps * m.layer_ids.len() {
            return Err(Error::Trajectory(format!(
                "{} entries for {} steps x {} layers",
                self.entries.len(),
                m.steps,
                m.layer_ids.len()
            )));
        }
        let mut seq_len = None;
        for step in 0..m.steps {
            for &layer in &m.layer_ids {
                let e = self.entries.get(&(step, layer)).ok_or_else(|| {
                    Error::Trajectory(format!("missing entry (step {step}, layer {layer})"))
                })?;
                let (ks, vs) = (e.keys.shape(), e.values.shape());
                if ks.len() != 3 || vs.len() != 3 || ks[0] != CFG_BRANCHES || vs[0] != CFG_BRANCHES || ks[1] != vs[1] {
                    return Err(Error::Trajectory(format!(
                        "entry (step {step}, layer {layer}) has keys {ks:?}, values {vs:?}"
                    )));
                }
                if *seq_len.get_or_insert(ks[1]) != ks[1] {
                    return Err(Error::Trajectory("entries disagree on sequence length".into()));
                }
            }
        }
        if self.latents.len() != m.steps + 1 {
            return Err(Error::Trajectory(format!(
                "{} latents for {} steps",
                self.latents.len(),
                m.steps
            )));
        }
        Ok(())
    }

    pub fn final_latent(&self) -> &Tensor<T> {
        self.latents.last().expect("validated trajectory has latents")
    }
}

/// Random access to trajectory entries, in memory or lazily from disk.
pub trait TrajectoryStore<T: Scalar>: Sync {
    fn meta(&self) -> &TrajectoryMeta;
    fn entry(&self, step: usize, layer: usize) -> Result<Arc<KvEntry<T>>>;
}

impl<T: Scalar> TrajectoryStore<T> for EditingTrajectory<T> {
    fn meta(&self) -> &TrajectoryMeta {
        &self.meta
    }

    fn entry(&self, step: usize, layer: usize) -> Result<Arc<KvEntry<T>>> {
        self.entries
            .get(&(step, layer))
            .cloned()
            .map(Arc::new)
            .ok_or_else(|| Error::Trajectory(format!("no entry for (step {step}, layer {layer})")))
    }
}

/// One forward pass worth of captured `(layer, K [L, d], V [L, d])`.
pub type KvCapture<T> = RefCell<Vec<(usize, Tensor<T>, Tensor<T>)>>;

/// Assembles a trajectory from per-branch captures during sampling.
pub struct TrajectoryRecorder<T> {
    meta: TrajectoryMeta,
    entries: BTreeMap<(usize, usize), KvEntry<T>>,
    latents: Vec<Tensor<T>>,
}

impl<T: Scalar> TrajectoryRecorder<T> {
    pub fn new(digest: String, guidance: GuidanceConfig, layer_ids: Vec<usize>) -> Self {
        Self {
            meta: TrajectoryMeta {
                digest,
                steps: guidance.steps,
                guidance,
                layer_ids,
            },
            entries: BTreeMap::new(),
            latents: Vec::new(),
        }
    }

    pub fn push_latent(&mut self, z: &Tensor<T>) {
        self.latents.push(z.clone());
    }

    /// Stores the three branch captures of `step`.
    pub fn push_step(&mut self, step: usize, branches: [Vec<(usize, Tensor<T>, Tensor<T>)>; CFG_BRANCHES]) -> Result<()> {
        for (bi, cap) in branches.iter().enumerate() {
            let layers: Vec<usize> = cap.iter().map(|c| c.0).collect();
            if layers != self.meta.layer_ids {
                return Err(Error::Trajectory(format!(
                    "branch {bi} of step {step} captured layers {layers:?}, recorder expects {:?}",
                    self.meta.layer_ids
                )));
            }
        }
        for (li, &layer) in self.meta.layer_ids.iter().enumerate() {
            let ks: Vec<&Tensor<T>> = branches.iter().map(|c| &c[li].1).collect();
            let vs: Vec<&Tensor<T>> = branches.iter().map(|c| &c[li].2).collect();
            let stack = |parts: &[&Tensor<T>]| -> Result<Tensor<T>> {
                let lifted: Vec<Tensor<T>> = parts
                    .iter()
                    .map(|t| {
                        let mut s = vec![1];
                        s.extend_from_slice(t.shape());
                        t.reshape(&s)
                    })
                    .collect::<Result<_>>()?;
                Tensor::concat(&lifted.iter().collect::<Vec<_>>(), 0)
            };
            self.entries.insert(
                (step, layer),
                KvEntry {
                    keys: stack(&ks)?,
                    values: stack(&vs)?,
                },
            );
        }
        Ok(())
    }

    pub fn finish(self) -> Result<EditingTrajectory<T>> {
        let t = EditingTrajectory {
            meta: self.meta,
            entries: self.entries,
            latents: self.latents,
        };
        t.validate()?;
        Ok(t)
    }
}

/// Serves trajectory entries to the sampler and audits what was consumed.
pub struct Replayer<'a, T: Scalar> {
    store: &'a dyn TrajectoryStore<T>,
    cursor: Cell<(usize, usize)>,
    consumed: RefCell<BTreeMap<(usize, usize), [u32; CFG_BRANCHES]>>,
}

impl<'a, T: Scalar> Replayer<'a, T> {
    pub fn new(store: &'a dyn TrajectoryStore<T>) -> Self {
        Self {
            store,
            cursor: Cell::new((0, 0)),
            consumed: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn meta(&self) -> &TrajectoryMeta {
        self.store.meta()
    }

    /// Selects the step and guidance branch for subsequent lookups.
    pub fn seek(&self, step: usize, branch: usize) {
        self.cursor.set((step, branch));
    }

    /// `(K1c, V1c)` for `layer` at the current cursor.
    pub fn kv(&self, layer: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let (step, branch) = self.cursor.get();
        let entry = self.store.entry(step, layer)?;
        let kv = entry.branch(branch)?;
        self.consumed.borrow_mut().entry((step, layer)).or_insert([0; CFG_BRANCHES])[branch] += 1;
        Ok(kv)
    }

    pub fn consumed(&self) -> BTreeMap<(usize, usize), [u32; CFG_BRANCHES]> {
        self.consumed.borrow().clone()
    }

    /// Every recorded (step, layer) consumed exactly once per branch.
    pub fn verify_exact(&self) -> Result<()> {
        let m = self.meta();
        let consumed = self.consumed.borrow();
        for step in 0..m.steps {
            for &layer in &m.layer_ids {
                match consumed.get(&(step, layer)) {
                    Some(c) if c.iter().all(|&n| n == 1) => {}
                    other => {
                        return Err(Error::Trajectory(format!(
                            "(step {step}, layer {layer}) consumed {other:?} times"
                        )))
                    }
                }
            }
        }
        let expected = m.steps * m.layer_ids.len();
        if consumed.len() != expected {
            return Err(Error::Trajectory(format!(
                "{} distinct keys consumed, {expected} recorded",
                consumed.len()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Container: magic, version, dtype, digest, steps, layer ids, guidance JSON,
// an index of (kind, step, layer, offset, length), then the deflated blobs.

struct IndexEntry {
    kind: u8,
    step: u32,
    layer: u32,
    offset: u64,
    len: u64,
}

fn deflate(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes)?;
    Ok(enc.finish()?)
}

fn inflate(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    DeflateDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| Error::corrupt("trajectory", format!("inflate: {e}")))?;
    Ok(out)
}

pub fn trajectory_to_bytes<T: Scalar>(traj: &EditingTrajectory<T>) -> Result<Vec<u8>> {
    traj.validate()?;
    let m = &traj.meta;
    let mut blobs: Vec<(u8, u32, u32, Vec<u8>)> = Vec::new();
    for (&(step, layer), e) in &traj.entries {
        let mut raw = Vec::new();
        put_tensor(&mut raw, &e.keys);
        put_tensor(&mut raw, &e.values);
        blobs.push((KIND_KV, step as u32, layer as u32, deflate(&raw)?));
    }
    for (i, z) in traj.latents.iter().enumerate() {
        let mut raw = Vec::new();
        put_tensor(&mut raw, z);
        blobs.push((KIND_LATENT, i as u32, 0, deflate(&raw)?));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_str(&mut out, T::DTYPE);
    put_str(&mut out, &m.digest);
    put_u32(&mut out, m.steps as u32);
    put_u32(&mut out, m.layer_ids.len() as u32);
    for &l in &m.layer_ids {
        put_u32(&mut out, l as u32);
    }
    put_str(&mut out, &serde_json::to_string(&m.guidance)?);
    put_u32(&mut out, blobs.len() as u32);
    let mut offset = 0u64;
    for (kind, step, layer, blob) in &blobs {
        put_u8(&mut out, *kind);
        put_u32(&mut out, *step);
        put_u32(&mut out, *layer);
        put_u64(&mut out, offset);
        put_u64(&mut out, blob.len() as u64);
        offset += blob.len() as u64;
    }
    for (.., blob) in blobs {
        out.extend_from_slice(&blob);
    }
    Ok(out)
}

struct Header {
    dtype: String,
    meta: TrajectoryMeta,
    index: Vec<IndexEntry>,
    /// Absolute offset of the first blob.
    data_start: u64,
}

fn parse_header(buf: &[u8]) -> Result<Header> {
    let mut r = Reader::new(buf, "trajectory");
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::corrupt("trajectory", format!("unsupported version {version}")));
    }
    let dtype = r.str()?;
    let digest = r.str()?;
    let steps = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let mut layer_ids = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        layer_ids.push(r.u32()? as usize);
    }
    let guidance: GuidanceConfig = serde_json::from_str(&r.str()?)
        .map_err(|e| Error::corrupt("trajectory", format!("guidance header: {e}")))?;
    let n = r.u32()? as usize;
    let mut index = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        index.push(IndexEntry {
            kind: r.u8()?,
            step: r.u32()?,
            layer: r.u32()?,
            offset: r.u64()?,
            len: r.u64()?,
        });
    }
    Ok(Header {
        dtype,
        meta: TrajectoryMeta {
            digest,
            guidance,
            steps,
            layer_ids,
        },
        index,
        data_start: r.pos() as u64,
    })
}

fn decode_kv<T: Scalar>(raw: &[u8], dtype: &str) -> Result<KvEntry<T>> {
    let mut r = Reader::new(raw, "trajectory entry");
    let keys = r.tensor(dtype)?;
    let values = r.tensor(dtype)?;
    Ok(KvEntry { keys, values })
}

fn decode_latent<T: Scalar>(raw: &[u8], dtype: &str) -> Result<Tensor<T>> {
    Reader::new(raw, "trajectory latent").tensor(dtype)
}

pub fn trajectory_from_bytes<T: Scalar>(buf: &[u8]) -> Result<EditingTrajectory<T>> {
    let h = parse_header(buf)?;
    let blob = |e: &IndexEntry| -> Result<&[u8]> {
        let start = h.data_start + e.offset;
        let end = start + e.len;
        if end > buf.len() as u64 {
            return Err(Error::corrupt("trajectory", "entry extends past end of file"));
        }
        Ok(&buf[start as usize..end as usize])
    };
    let mut entries = BTreeMap::new();
    let mut latents = BTreeMap::new();
    for e in &h.index {
        let raw = inflate(blob(e)?)?;
        match e.kind {
            KIND_KV => {
                entries.insert((e.step as usize, e.layer as usize), decode_kv(&raw, &h.dtype)?);
            }
            KIND_LATENT => {
                latents.insert(e.step as usize, decode_latent(&raw, &h.dtype)?);
            }
            k => return Err(Error::corrupt("trajectory", format!("unknown entry kind {k}"))),
        }
    }
    let t = EditingTrajectory {
        meta: h.meta,
        entries,
        latents: latents.into_values().collect(),
    };
    t.validate().map_err(|e| Error::corrupt("trajectory", e.to_string()))?;
    Ok(t)
}

pub fn write_trajectory<T: Scalar>(path: &Path, traj: &EditingTrajectory<T>) -> Result<()> {
    crate::fsutil::write_atomic(path, &trajectory_to_bytes(traj)?)
}

pub fn read_trajectory<T: Scalar>(path: &Path) -> Result<EditingTrajectory<T>> {
    trajectory_from_bytes(&std::fs::read(path)?)
}

/// Trajectory container opened for lazy, per-entry reads.
pub struct TrajectoryFile<T> {
    path: PathBuf,
    dtype: String,
    meta: TrajectoryMeta,
    data_start: u64,
    index: BTreeMap<(u8, usize, usize), (u64, u64)>,
    cache: Mutex<BTreeMap<(usize, usize), Arc<KvEntry<T>>>>,
}

impl<T: Scalar> TrajectoryFile<T> {
    /// Reads only the header and index.
    pub fn open(path: &Path) -> Result<Self> {
        let mut f = File::open(path)?;
        // The header is small; read a growing prefix until it parses.
        let total = f.metadata()?.len();
        let mut want = 4096u64.min(total);
        let header = loop {
            let mut buf = vec![0; want as usize];
            f.seek(SeekFrom::Start(0))?;
            f.read_exact(&mut buf)?;
            match parse_header(&buf) {
                Ok(h) => break h,
                Err(e) if want >= total => return Err(e),
                Err(_) => want = (want * 4).min(total),
            }
        };
        let index = header
            .index
            .iter()
            .map(|e| ((e.kind, e.step as usize, e.layer as usize), (e.offset, e.len)))
            .collect();
        Ok(Self {
            path: path.to_path_buf(),
            dtype: header.dtype,
            meta: header.meta,
            data_start: header.data_start,
            index,
            cache: Mutex::new(BTreeMap::new()),
        })
    }

    fn read_blob(&self, key: (u8, usize, usize)) -> Result<Vec<u8>> {
        let &(off, len) = self
            .index
            .get(&key)
            .ok_or_else(|| Error::Trajectory(format!("no entry {key:?} in {}", self.path.display())))?;
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(self.data_start + off))?;
        let mut buf = vec![0; len as usize];
        f.read_exact(&mut buf)
            .map_err(|e| Error::corrupt("trajectory", format!("entry {key:?}: {e}")))?;
        inflate(&buf)
    }

    pub fn latent(&self, i: usize) -> Result<Tensor<T>> {
        decode_latent(&self.read_blob((KIND_LATENT, i, 0))?, &self.dtype)
    }

    pub fn load(&self) -> Result<EditingTrajectory<T>> {
        read_trajectory(&self.path)
    }
}

impl<T: Scalar> TrajectoryStore<T> for TrajectoryFile<T> {
    fn meta(&self) -> &TrajectoryMeta {
        &self.meta
    }

    fn entry(&self, step: usize, layer: usize) -> Result<Arc<KvEntry<T>>> {
        if let Some(e) = self.cache.lock().expect("cache lock").get(&(step, layer)) {
            return Ok(e.clone());
        }
        let e = Arc::new(decode_kv(&self.read_blob((KIND_KV, step, layer))?, &self.dtype)?);
        self.cache.lock().expect("cache lock").insert((step, layer), e.clone());
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    pub(crate) fn synthetic(steps: usize, layers: usize, seed: u64) -> EditingTrajectory<f32> {
        let mut r = rng::from_seed(seed);
        let mut rec = TrajectoryRecorder::new(
            "abc".into(),
            GuidanceConfig {
                steps,
                ..Default::default()
            },
            (0..layers).collect(),
        );
        rec.push_latent(&Tensor::randn(&[1, 4, 2, 2], 1.0, &mut r));
        for s in 0..steps {
            let cap = || -> Vec<(usize, Tensor<f32>, Tensor<f32>)> {
                (0..layers)
                    .map(|l| (l, Tensor::zeros(&[4, 3]), Tensor::zeros(&[4, 3])))
                    .collect()
            };
            let mut branches = [cap(), cap(), cap()];
            for b in branches.iter_mut() {
                for c in b.iter_mut() {
                    c.1 = Tensor::randn(&[4, 3], 1.0, &mut r);
                    c.2 = Tensor::randn(&[4, 3], 1.0, &mut r);
                }
            }
            rec.push_step(s, branches).unwrap();
            rec.push_latent(&Tensor::randn(&[1, 4, 2, 2], 1.0, &mut r));
        }
        rec.finish().unwrap()
    }

    #[test]
    fn recorder_counts_entries() {
        let t = synthetic(3, 2, 1);
        assert_eq!(t.entries.len(), 6);
        assert_eq!(t.latents.len(), 4);
    }

    #[test]
    fn recorder_rejects_wrong_layers() {
        let mut rec = TrajectoryRecorder::<f32>::new("x".into(), GuidanceConfig::default(), vec![0, 1]);
        let cap = vec![(0, Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1]))];
        assert!(matches!(
            rec.push_step(0, [cap.clone(), cap.clone(), cap]),
            Err(Error::Trajectory(_))
        ));
    }

    #[test]
    fn bytes_round_trip_is_exact() {
        let t = synthetic(4, 2, 2);
        let b = trajectory_to_bytes(&t).unwrap();
        let back: EditingTrajectory<f32> = trajectory_from_bytes(&b).unwrap();
        assert_eq!(back, t);
        assert_eq!(trajectory_to_bytes(&back).unwrap(), b);
    }

    #[test]
    fn truncation_detected() {
        let b = trajectory_to_bytes(&synthetic(2, 1, 3)).unwrap();
        for cut in [4, 20, b.len() - 1] {
            assert!(matches!(
                trajectory_from_bytes::<f32>(&b[..cut]),
                Err(Error::Corruption { .. })
            ));
        }
    }

    #[test]
    fn lazy_file_matches_memory() {
        let t = synthetic(3, 2, 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.traj");
        write_trajectory(&p, &t).unwrap();
        let f = TrajectoryFile::<f32>::open(&p).unwrap();
        assert_eq!(f.meta(), &t.meta);
        for (&(s, l), e) in &t.entries {
            assert_eq!(f.entry(s, l).unwrap().as_ref(), e);
        }
        assert_eq!(&f.latent(3).unwrap(), t.final_latent());
    }

    #[test]
    fn replay_audit() {
        let t = synthetic(2, 2, 5);
        let r = Replayer::new(&t);
        for s in 0..2 {
            for b in 0..CFG_BRANCHES {
                r.seek(s, b);
                for l in 0..2 {
                    let (k, _) = r.kv(l).unwrap();
                    assert_eq!(k, t.entries[&(s, l)].branch(b).unwrap().0);
                }
            }
        }
        r.verify_exact().unwrap();
        r.seek(0, 0);
        r.kv(0).unwrap();
        assert!(r.verify_exact().is_err());
    }
}
