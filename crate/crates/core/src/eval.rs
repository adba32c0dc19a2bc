//! Evaluation harness: sliding-window editing of long clips, the five-metric
//! benchmark, and the SMA/EPM ablation grid.

use std::collections::BTreeMap;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{real_corpus, InstructionTemplate};
use crate::denoiser::{Denoiser, EpmMode};
use crate::error::{Error, Result};
use crate::ffg::{first_frame_guided_edit, VideoOptions};
use crate::guidance::GuidanceConfig;
use crate::latent::{latent_to_video, video_to_latent};
use crate::metrics::{MetricSuite, Stage, VIDEO_METRICS};
use crate::refine::generate_instructions;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::TextEmbedding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub window: usize,
    /// Defaults to half the window.
    #[serde(default)]
    pub stride: Option<usize>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { window: 8, stride: None }
    }
}

impl WindowConfig {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or((self.window / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stride();
        if self.window == 0 || s == 0 || s > self.window {
            return Err(Error::Config(format!(
                "need window >= 1 and stride in [1, window], got window {} stride {s}",
                self.window
            )));
        }
        Ok(())
    }
}

/// Window spans over `len` frames. Starts advance by `stride`; the last
/// window is pinned to the end so every frame is covered. A window longer
/// than the clip collapses to the whole clip.
pub fn window_spans(len: usize, cfg: WindowConfig) -> Result<Vec<Range<usize>>> {
    cfg.validate()?;
    if len == 0 {
        return Err(Error::Argument("cannot window an empty video".into()));
    }
    if cfg.window >= len {
        return Ok(vec![0..len]);
    }
    let mut out = Vec::new();
    let mut s = 0;
    loop {
        out.push(s..s + cfg.window);
        if s + cfg.window >= len {
            break;
        }
        s = (s + cfg.stride()).min(len - cfg.window);
    }
    Ok(out)
}

/// Per-window blend weights, `[windows][len]`. Inside an overlap each
/// window's weight ramps linearly with its distance to its own interior
/// edge; edges on the clip boundary do not ramp. Weights are normalised so
/// they sum to 1 at every frame, and a frame covered once gets exactly 1.
pub fn blend_weights(len: usize, spans: &[Range<usize>]) -> Vec<Vec<f64>> {
    let raw: Vec<Vec<f64>> = spans
        .iter()
        .map(|r| {
            (0..len)
                .map(|t| {
                    if !r.contains(&t) {
                        return 0.0;
                    }
                    let lead = if r.start == 0 { f64::INFINITY } else { (t - r.start + 1) as f64 };
                    let tail = if r.end == len { f64::INFINITY } else { (r.end - t) as f64 };
                    lead.min(tail)
                })
                .collect()
        })
        .collect();
    let mut out = vec![vec![0.0; len]; spans.len()];
    for t in 0..len {
        let inf = raw.iter().filter(|w| w[t].is_infinite()).count();
        let sum: f64 = raw.iter().map(|w| w[t]).filter(|v| v.is_finite()).sum();
        for (k, w) in raw.iter().enumerate() {
            out[k][t] = match (inf, w[t]) {
                (0, v) => v / sum,
                (n, v) if v.is_infinite() => 1.0 / n as f64,
                _ => 0.0,
            };
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct WindowedEdit<T> {
    /// Edited pixels `[f, H, W]`.
    pub video: Tensor<T>,
    pub spans: Vec<Range<usize>>,
    pub weights: Vec<Vec<f64>>,
    /// Per window, the final-step relationship scores of every site.
    pub scores: Vec<Vec<Tensor<T>>>,
}

/// Edits `video: [f, H, W]` window by window, each window under its own
/// first-frame trajectory and a seed derived from the window index, then
/// crossfades the overlaps.
pub fn sliding_window_edit<T: Scalar>(
    model: &Denoiser<T>,
    video: &Tensor<T>,
    instruction: &str,
    g: &GuidanceConfig,
    opts: VideoOptions,
    cfg: WindowConfig,
) -> Result<WindowedEdit<T>> {
    if video.rank() != 3 {
        return Err(Error::shape(format!("video must be [f, H, W], got {:?}", video.shape())));
    }
    let len = video.dim(0);
    let spans = window_spans(len, cfg)?;
    let weights = blend_weights(len, &spans);
    let text = TextEmbedding::encode(instruction);
    let edits = spans
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let src = video_to_latent(&video.narrow(0, r.start, r.len())?)?;
            let gk = g.with_seed(rng::derive_seed(g.seed, &["window", &k.to_string()]));
            let (edit, _) = first_frame_guided_edit(model, &src, &text, &gk, opts)?;
            Ok((latent_to_video(&edit.latents)?, edit.scores))
        })
        .collect::<Result<Vec<_>>>()?;
    let plane = video.dim(1) * video.dim(2);
    let mut out = vec![T::zero(); video.len()];
    for ((r, (v, _)), w) in spans.iter().zip(&edits).zip(&weights) {
        for t in r.clone() {
            let wt = T::cst(w[t]);
            let src = &v.data()[(t - r.start) * plane..(t - r.start + 1) * plane];
            if w[t] == 1.0 {
                out[t * plane..(t + 1) * plane].copy_from_slice(src);
            } else {
                for (o, &x) in out[t * plane..(t + 1) * plane].iter_mut().zip(src) {
                    *o += wt * x;
                }
            }
        }
    }
    Ok(WindowedEdit {
        video: Tensor::new(video.shape(), out)?,
        spans,
        weights,
        scores: edits.into_iter().map(|(_, s)| s).collect(),
    })
}

/// A reference clip with its edit request.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample<T> {
    pub id: String,
    pub source: Tensor<T>,
    pub source_caption: String,
    pub instruction: String,
    pub target_caption: String,
}

/// Held-out toy benchmark: tagged clips with template instructions.
pub fn benchmark_set<T: Scalar>(
    n: usize,
    frames: usize,
    side: usize,
    seed: u64,
    templates: &[InstructionTemplate],
) -> Result<Vec<EvalSample<T>>> {
    let clips = real_corpus::<T>(n, frames, side, rng::derive_seed(seed, &["benchmark"]));
    let sources: Vec<_> = clips.iter().map(|c| (c.id.clone(), c.tags.clone())).collect();
    let batch = generate_instructions(&sources, templates, rng::derive_seed(seed, &["benchmark-instructions"]))?;
    let by_id: BTreeMap<_, _> = clips.into_iter().map(|c| (c.id.clone(), c)).collect();
    Ok(batch
        .instructions
        .into_iter()
        .map(|gi| {
            let c = &by_id[&gi.source_id];
            EvalSample {
                id: c.id.replacen("real", "bench", 1),
                source: c.video.clone(),
                source_caption: c.caption.clone(),
                instruction: gi.instruction,
                target_caption: gi.target_caption,
            }
        })
        .collect())
}

/// Edits every sample; per-sample seeds come from `(g.seed, id)`.
pub fn edit_set<T: Scalar>(
    model: &Denoiser<T>,
    samples: &[EvalSample<T>],
    g: &GuidanceConfig,
    opts: VideoOptions,
    window: WindowConfig,
) -> Result<BTreeMap<String, Tensor<T>>> {
    samples
        .par_iter()
        .map(|s| {
            let gs = g.with_seed(rng::derive_seed(g.seed, &["eval", &s.id]));
            let e = sliding_window_edit(model, &s.source, &s.instruction, &gs, opts, window)?;
            Ok((s.id.clone(), e.video))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleScores {
    pub id: String,
    /// Absent when the sample was skipped.
    pub scores: Option<BTreeMap<String, f64>>,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRow {
    pub method: String,
    pub dataset: String,
    pub evaluated: usize,
    /// Means of the five video metrics over evaluated samples.
    pub means: BTreeMap<String, f64>,
    pub samples: Vec<SampleScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub config_digest: String,
    pub embedder_tag: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn new(config_digest: impl Into<String>, embedder_tag: impl Into<String>) -> Self {
        Self {
            config_digest: config_digest.into(),
            embedder_tag: embedder_tag.into(),
            rows: Vec::new(),
        }
    }

    /// Appends another report's rows; both must come from the same embedders.
    pub fn extend(&mut self, other: EvalReport) -> Result<()> {
        if other.embedder_tag != self.embedder_tag {
            return Err(Error::Argument(format!(
                "cannot merge reports from embedders {} and {}",
                self.embedder_tag, other.embedder_tag
            )));
        }
        self.rows.extend(other.rows);
        Ok(())
    }

    pub fn row(&self, method: &str, dataset: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method && r.dataset == dataset)
    }
}

/// Scores `edited` against `references` on the five video metrics. Ids
/// present on only one side become skipped sample rows.
pub fn eval_benchmark<T: Scalar>(
    method: &str,
    dataset: &str,
    edited: &BTreeMap<String, Tensor<T>>,
    references: &[EvalSample<T>],
    suite: &MetricSuite,
    config_digest: &str,
) -> Result<EvalReport> {
    let mut samples: Vec<SampleScores> = references
        .par_iter()
        .map(|r| match edited.get(&r.id) {
            None => Ok(SampleScores {
                id: r.id.clone(),
                scores: None,
                skipped: Some("no edited video".into()),
            }),
            Some(v) => {
                let s = suite.video_scores(&r.source, v, &r.source_caption, &r.target_caption)?;
                Ok(SampleScores {
                    id: r.id.clone(),
                    scores: Some(s.scores),
                    skipped: None,
                })
            }
        })
        .collect::<Result<_>>()?;
    for id in edited.keys() {
        if !references.iter().any(|r| &r.id == id) {
            samples.push(SampleScores {
                id: id.clone(),
                scores: None,
                skipped: Some("no reference".into()),
            });
        }
    }
    let scored: Vec<&BTreeMap<String, f64>> = samples.iter().filter_map(|s| s.scores.as_ref()).collect();
    let means = VIDEO_METRICS
        .iter()
        .map(|m| {
            let v = if scored.is_empty() {
                f64::NAN
            } else {
                scored.iter().map(|s| s[*m]).sum::<f64>() / scored.len() as f64
            };
            (m.to_string(), v)
        })
        .filter(|(_, v)| v.is_finite())
        .collect();
    debug_assert_eq!(Stage::Video.metric_names(), VIDEO_METRICS);
    let mut report = EvalReport::new(config_digest, suite.tag());
    report.rows.push(EvalRow {
        method: method.into(),
        dataset: dataset.into(),
        evaluated: scored.len(),
        means,
        samples,
    });
    Ok(report)
}

/// The four SMA × EPM settings, labelled for the ablation table.
pub fn ablation_settings() -> Vec<(String, VideoOptions)> {
    let mut out = Vec::new();
    for sma in [false, true] {
        for epm in [EpmMode::Off, EpmMode::Learned] {
            let label = format!("sma={},epm={}", on_off(sma), on_off(epm == EpmMode::Learned));
            out.push((label, VideoOptions { sma, epm }));
        }
    }
    out
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Benchmarks one model under every ablation setting.
pub fn ablation_grid<T: Scalar>(
    model: &Denoiser<T>,
    dataset: &str,
    samples: &[EvalSample<T>],
    g: &GuidanceConfig,
    window: WindowConfig,
    suite: &MetricSuite,
    config_digest: &str,
) -> Result<EvalReport> {
    let mut report = EvalReport::new(config_digest, suite.tag());
    for (label, opts) in ablation_settings() {
        let edited = edit_set(model, samples, g, opts, window)?;
        report.extend(eval_benchmark(&label, dataset, &edited, samples, suite, config_digest)?)?;
    }
    Ok(report)
}
