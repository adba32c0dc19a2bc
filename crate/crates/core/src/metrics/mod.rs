//! Candidate scoring: exact SSIM, embedding-based image and video metrics,
//! and the normalise–weight–select rule used by curation.
//!
//! Images are `[H, W]` and videos `[f, H, W]`, values in `[0, 1]`.

mod embed;
mod select;
mod ssim;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use embed::{frames_of, normalized, Embedder, PreferenceScorer, ToyEmbedder, ToyPreferenceScorer};
pub use select::{
    normalize_and_select, threshold_filter, ScoreVector, Selection, Stage, IMAGE_METRICS, VIDEO_METRICS,
};
pub use ssim::{gaussian_window, ssim, C1, C2, SIGMA, WINDOW};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Below this norm a vector counts as zero and its cosine is 0.
const ZERO_NORM: f64 = 1e-12;

/// Plain cosine, clamped to `[-1, 1]`; 0 when either side is (near) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < ZERO_NORM || nb < ZERO_NORM {
        return 0.0;
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (d / (na * nb)).clamp(-1.0, 1.0)
}

fn delta(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn image64<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<f64>> {
    if t.rank() != 2 {
        return Err(Error::shape(format!("image must be [H, W], got {:?}", t.shape())));
    }
    Ok(t.cast())
}

fn video64<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<f64>> {
    if t.rank() != 3 || t.dim(0) == 0 {
        return Err(Error::shape(format!("video must be nonempty [f, H, W], got {:?}", t.shape())));
    }
    Ok(t.cast())
}

/// Alignment of the image change with the caption change.
pub fn clip_dir<T: Scalar>(
    src_img: &Tensor<T>,
    tgt_img: &Tensor<T>,
    src_cap: &str,
    tgt_cap: &str,
    e: &dyn Embedder,
) -> Result<f64> {
    let di = delta(&e.embed_image(&image64(tgt_img)?), &e.embed_image(&image64(src_img)?));
    let dt = delta(&e.embed_text(tgt_cap), &e.embed_text(src_cap));
    Ok(cosine(&dt, &di))
}

/// Image–image cosine under `e` (DINO and CLIP image similarity).
pub fn image_similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, e: &dyn Embedder) -> Result<f64> {
    Ok(cosine(&e.embed_image(&image64(a)?), &e.embed_image(&image64(b)?)))
}

pub fn dino_sim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, e: &dyn Embedder) -> Result<f64> {
    image_similarity(a, b, e)
}

pub fn clip_img_sim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, e: &dyn Embedder) -> Result<f64> {
    image_similarity(a, b, e)
}

/// Image–text cosine.
pub fn clip_sim<T: Scalar>(img: &Tensor<T>, caption: &str, e: &dyn Embedder) -> Result<f64> {
    Ok(cosine(&e.embed_image(&image64(img)?), &e.embed_text(caption)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum FramePairs {
    #[default]
    All,
    Consecutive,
}

/// Mean cosine between frame embeddings; 1 for a single frame.
pub fn clip_frame<T: Scalar>(video: &Tensor<T>, e: &dyn Embedder, pairs: FramePairs) -> Result<f64> {
    let embs: Vec<Vec<f64>> = frames_of(&video64(video)?).iter().map(|f| e.embed_image(f)).collect();
    let n = embs.len();
    if n == 1 {
        return Ok(1.0);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let js: Vec<usize> = match pairs {
            FramePairs::All => (i + 1..n).collect(),
            FramePairs::Consecutive => (i + 1..(i + 2).min(n)).collect(),
        };
        for j in js {
            sum += cosine(&embs[i], &embs[j]);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Mean over frames of the frame–caption cosine.
pub fn clip_text<T: Scalar>(video: &Tensor<T>, caption: &str, e: &dyn Embedder) -> Result<f64> {
    let t = e.embed_text(caption);
    let frames = frames_of(&video64(video)?);
    Ok(frames.iter().map(|f| cosine(&e.embed_image(f), &t)).sum::<f64>() / frames.len() as f64)
}

pub fn viclip_out<T: Scalar>(video: &Tensor<T>, caption: &str, e: &dyn Embedder) -> Result<f64> {
    Ok(cosine(&e.embed_video(&video64(video)?), &e.embed_text(caption)))
}

/// Alignment of the video change with the caption change.
pub fn viclip_dir<T: Scalar>(
    v_in: &Tensor<T>,
    v_out: &Tensor<T>,
    c_in: &str,
    c_out: &str,
    e: &dyn Embedder,
) -> Result<f64> {
    let dv = delta(&e.embed_video(&video64(v_out)?), &e.embed_video(&video64(v_in)?));
    let dt = delta(&e.embed_text(c_out), &e.embed_text(c_in));
    Ok(cosine(&dt, &dv))
}

/// Mean preference score over frames.
pub fn pick_score<T: Scalar>(video: &Tensor<T>, caption: &str, scorer: &dyn PreferenceScorer) -> Result<f64> {
    let frames = frames_of(&video64(video)?);
    Ok(frames.iter().map(|f| scorer.score_image(f, caption)).sum::<f64>() / frames.len() as f64)
}

/// Inputs to the image-stage metrics for one candidate edit.
pub struct ImageEdit<'a, T> {
    pub source: &'a Tensor<T>,
    pub edited: &'a Tensor<T>,
    pub source_caption: &'a str,
    pub target_caption: &'a str,
    pub instruction: &'a str,
}

/// The sixth image-stage slot. The default is the cosine between the
/// edited image and the instruction text.
pub trait ExtraImageMetric: Send + Sync {
    fn tag(&self) -> String;
    fn score(&self, edit: &ImageEdit<'_, f64>) -> Result<f64>;
}

pub struct InstructionCosine(pub Arc<dyn Embedder>);

impl ExtraImageMetric for InstructionCosine {
    fn tag(&self) -> String {
        format!("instruction-cosine[{}]", self.0.tag())
    }

    fn score(&self, edit: &ImageEdit<'_, f64>) -> Result<f64> {
        clip_sim(edit.edited, edit.instruction, self.0.as_ref())
    }
}

/// Backbones behind every metric, plus the frame-pair rule.
#[derive(Clone)]
pub struct MetricSuite {
    pub clip: Arc<dyn Embedder>,
    pub dino: Arc<dyn Embedder>,
    pub video: Arc<dyn Embedder>,
    pub scorer: Arc<dyn PreferenceScorer>,
    pub aesthetic: Arc<dyn ExtraImageMetric>,
    pub frame_pairs: FramePairs,
}

impl MetricSuite {
    /// Offline stand-ins, all derived from `seed`.
    pub fn toy(seed: u64) -> Self {
        let clip: Arc<dyn Embedder> = Arc::new(ToyEmbedder::new("clip", seed, 32));
        Self {
            dino: Arc::new(ToyEmbedder::new("dino", seed, 32)),
            video: Arc::new(ToyEmbedder::new("viclip", seed, 32)),
            scorer: Arc::new(ToyPreferenceScorer::new(ToyEmbedder::new("pick", seed, 32))),
            aesthetic: Arc::new(InstructionCosine(clip.clone())),
            clip,
            frame_pairs: FramePairs::All,
        }
    }

    pub fn tag(&self) -> String {
        format!(
            "clip={};dino={};video={};pick={};aesthetic={};pairs={:?}",
            self.clip.tag(),
            self.dino.tag(),
            self.video.tag(),
            self.scorer.tag(),
            self.aesthetic.tag(),
            self.frame_pairs
        )
    }

    pub fn image_scores<T: Scalar>(&self, edit: &ImageEdit<'_, T>) -> Result<ScoreVector> {
        let (src, tgt) = (image64(edit.source)?, image64(edit.edited)?);
        let e = ImageEdit {
            source: &src,
            edited: &tgt,
            source_caption: edit.source_caption,
            target_caption: edit.target_caption,
            instruction: edit.instruction,
        };
        let scores = BTreeMap::from([
            ("dino_sim".to_string(), dino_sim(&src, &tgt, self.dino.as_ref())?),
            ("clip_img_sim".to_string(), clip_img_sim(&src, &tgt, self.clip.as_ref())?),
            ("ssim".to_string(), ssim(&src, &tgt)?),
            (
                "clip_dir".to_string(),
                clip_dir(&src, &tgt, e.source_caption, e.target_caption, self.clip.as_ref())?,
            ),
            ("clip_sim".to_string(), clip_sim(&tgt, e.target_caption, self.clip.as_ref())?),
            ("aesthetic".to_string(), self.aesthetic.score(&e)?),
        ]);
        ScoreVector::new(Stage::Image, scores)
    }

    pub fn video_scores<T: Scalar>(
        &self,
        v_in: &Tensor<T>,
        v_out: &Tensor<T>,
        c_in: &str,
        c_out: &str,
    ) -> Result<ScoreVector> {
        let (vi, vo) = (video64(v_in)?, video64(v_out)?);
        let scores = BTreeMap::from([
            ("viclip_out".to_string(), viclip_out(&vo, c_out, self.video.as_ref())?),
            ("viclip_dir".to_string(), viclip_dir(&vi, &vo, c_in, c_out, self.video.as_ref())?),
            ("pick_score".to_string(), pick_score(&vo, c_out, self.scorer.as_ref())?),
            ("clip_frame".to_string(), clip_frame(&vo, self.clip.as_ref(), self.frame_pairs)?),
            ("clip_text".to_string(), clip_text(&vo, c_out, self.clip.as_ref())?),
        ]);
        ScoreVector::new(Stage::Video, scores)
    }
}
