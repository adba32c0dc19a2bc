//! Video editing triples and their on-disk dataset layout: an index of JSON
//! lines plus one directory per sample holding lossless frame stacks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::TrainSample;
use crate::error::{Error, Result};
use crate::fsutil::{hex, write_atomic};
use crate::latent::video_to_latent;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::TextEmbedding;
use crate::video_io::{read_video, write_video};

/// Source and target pixel videos `[f, H, W]` with the instruction linking
/// them. `provenance` names where the pair came from (`synthetic:...` or
/// `real:...`).
#[derive(Clone, Debug, PartialEq)]
pub struct EditTriple<T> {
    pub id: String,
    pub source: Tensor<T>,
    pub target: Tensor<T>,
    pub instruction: String,
    pub source_caption: String,
    pub target_caption: String,
    pub provenance: String,
}

impl<T: Scalar> EditTriple<T> {
    pub fn validate(&self) -> Result<()> {
        if self.source.rank() != 3 || self.source.shape() != self.target.shape() {
            return Err(Error::shape(format!(
                "triple {}: source {:?} and target {:?} must share an [f, H, W] shape",
                self.id,
                self.source.shape(),
                self.target.shape()
            )));
        }
        if self.instruction.trim().is_empty() {
            return Err(Error::Argument(format!("triple {} has an empty instruction", self.id)));
        }
        Ok(())
    }

    pub fn to_train_sample(&self) -> Result<TrainSample<T>> {
        self.validate()?;
        Ok(TrainSample {
            source: video_to_latent(&self.source)?,
            target: video_to_latent(&self.target)?,
            text: TextEmbedding::encode(&self.instruction),
            provenance: self.provenance.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexLine {
    id: String,
    instruction: String,
    source_caption: String,
    target_caption: String,
    provenance: String,
    source: String,
    target: String,
}

pub const INDEX_FILE: &str = "dataset.jsonl";

/// Writes `dir/INDEX_FILE` and `dir/<id>/{source,target}.stack`.
pub fn write_dataset<T: Scalar>(dir: &Path, triples: &[EditTriple<T>]) -> Result<()> {
    let mut index = Vec::new();
    for t in triples {
        t.validate()?;
        let (src, tgt) = (format!("{}/source.stack", t.id), format!("{}/target.stack", t.id));
        write_video(&dir.join(&src), &t.source)?;
        write_video(&dir.join(&tgt), &t.target)?;
        serde_json::to_writer(
            &mut index,
            &IndexLine {
                id: t.id.clone(),
                instruction: t.instruction.clone(),
                source_caption: t.source_caption.clone(),
                target_caption: t.target_caption.clone(),
                provenance: t.provenance.clone(),
                source: src,
                target: tgt,
            },
        )?;
        index.push(b'\n');
    }
    write_atomic(&dir.join(INDEX_FILE), &index)
}

pub fn read_dataset<T: Scalar>(dir: &Path) -> Result<Vec<EditTriple<T>>> {
    let text = std::fs::read_to_string(dir.join(INDEX_FILE))?;
    text.lines()
        .enumerate()
        .map(|(k, l)| {
            let e: IndexLine = serde_json::from_str(l)
                .map_err(|e| Error::corrupt("dataset index", format!("line {}: {e}", k + 1)))?;
            let t = EditTriple {
                source: read_video(&dir.join(&e.source))?,
                target: read_video(&dir.join(&e.target))?,
                id: e.id,
                instruction: e.instruction,
                source_caption: e.source_caption,
                target_caption: e.target_caption,
                provenance: e.provenance,
            };
            t.validate()?;
            Ok(t)
        })
        .collect()
}

/// Content digest over ids and exact tensor bytes.
pub fn digest_items<'a, T: Scalar>(items: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> String {
    let mut h = Sha256::new();
    for (id, t) in items {
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    hex(&h.finalize())
}
