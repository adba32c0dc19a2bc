//! Synthetic video-triple curation in four stages: train the image editor,
//! sample and filter first-frame edits while recording their trajectories,
//! expand each source image into a clip, then edit the clip under the
//! first frame's trajectory and filter again.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::corpus::{edit_requests, image_corpus, EditRequest, ImageTriple};
use crate::dataset::{digest_items, write_dataset, EditTriple};
use crate::denoiser::{Denoiser, DenoiserConfig, TrainSample, VideoTraining};
use crate::error::{Error, Result};
use crate::ffg::{edit_video, VideoOptions};
use crate::fsutil::{sha256_hex, write_atomic};
use crate::guidance::{GuidanceConfig, GuidanceGrid};
use crate::latent::{latent_to_video, video_to_latent};
use crate::manifest::{CandidateRecord, ManifestHeader, RoundManifest, SampleRecord};
use crate::metrics::{normalize_and_select, threshold_filter, FramePairs, ImageEdit, MetricSuite, ScoreVector, Stage};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::TextEmbedding;
use crate::train::{evaluate_loss, train, TrainConfig, TrainLog};
use crate::trajectory::{trajectory_to_bytes, EditingTrajectory};
use crate::video_io::write_video;

/// Thresholds (`score >= value` to survive) and ranking weights for one
/// filtering stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default)]
    pub thresholds: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

impl FilterConfig {
    pub fn uniform(stage: Stage) -> Self {
        Self {
            thresholds: BTreeMap::new(),
            weights: stage.uniform_weights(),
        }
    }

    pub fn validate(&self, stage: Stage) -> Result<()> {
        for k in self.thresholds.keys().chain(self.weights.keys()) {
            if !stage.metric_names().contains(&k.as_str()) {
                return Err(Error::Config(format!("{stage:?} filter names unknown metric {k}")));
            }
        }
        Ok(())
    }
}

/// Per-frame global motion used to turn a still into a clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    /// Largest integer pixel shift per frame along each axis.
    pub max_shift: i32,
    /// Largest per-frame zoom rate.
    pub zoom: f64,
    /// Largest per-frame brightness drift.
    pub brightness: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            max_shift: 1,
            zoom: 0.02,
            brightness: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    /// `(dy, dx)` pixels per frame, applied with wrap-around.
    pub shift: (i32, i32),
    /// Frame `k` is scaled by `(1 + zoom)^k` about the centre.
    pub zoom: f64,
    /// Frame `k` is offset by `k * brightness`.
    pub brightness: f64,
}

impl MotionParams {
    pub fn draw(cfg: &MotionConfig, seed: u64, id: &str) -> Self {
        let mut r = rng::stream(seed, &["motion", id]);
        let m = cfg.max_shift.max(0);
        let mut shift = (0, 0);
        if m > 0 {
            while shift == (0, 0) {
                shift = (r.random_range(-m..=m), r.random_range(-m..=m));
            }
        }
        let sym = |r: &mut rng::Rng, a: f64| if a > 0.0 { r.random_range(-a..a) } else { 0.0 };
        Self {
            shift,
            zoom: sym(&mut r, cfg.zoom),
            brightness: sym(&mut r, cfg.brightness),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub seed: u64,
    /// Pixel side of every image and frame.
    pub side: usize,
    pub frames: usize,
    /// Training triples for the image editor.
    pub train_images: usize,
    /// First-frame sources entering candidate generation.
    pub sources: usize,
    /// Sampling iterations per source, each at a seeded grid point.
    pub iters: usize,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub grid: GuidanceGrid,
    pub image_filter: FilterConfig,
    pub video_filter: FilterConfig,
    pub motion: MotionConfig,
    pub video: VideoOptions,
    pub frame_pairs: FramePairs,
    pub embedder_seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            side: 32,
            frames: 8,
            train_images: 64,
            sources: 64,
            iters: 3,
            model: DenoiserConfig::default(),
            train: TrainConfig::default(),
            grid: GuidanceGrid::default(),
            image_filter: FilterConfig {
                thresholds: BTreeMap::from([("ssim".to_string(), 0.2)]),
                ..FilterConfig::uniform(Stage::Image)
            },
            video_filter: FilterConfig {
                thresholds: BTreeMap::from([("clip_frame".to_string(), 0.92)]),
                ..FilterConfig::uniform(Stage::Video)
            },
            motion: MotionConfig::default(),
            video: VideoOptions::default(),
            frame_pairs: FramePairs::All,
            embedder_seed: 0,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.side < 8 || self.side % 4 != 0 {
            return Err(Error::Config(format!("side must be a multiple of 4 and at least 8, got {}", self.side)));
        }
        if self.frames == 0 || self.iters == 0 {
            return Err(Error::Config("frames and iters must be positive".into()));
        }
        if self.frames > 1 && self.video.epm == crate::denoiser::EpmMode::Learned && self.model.epm_frames != self.frames {
            return Err(Error::Config(format!(
                "model.epm_frames ({}) must equal frames ({}) for learned relationship scores",
                self.model.epm_frames, self.frames
            )));
        }
        self.image_filter.validate(Stage::Image)?;
        self.video_filter.validate(Stage::Video)
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }

    pub fn suite(&self) -> MetricSuite {
        MetricSuite {
            frame_pairs: self.frame_pairs,
            ..MetricSuite::toy(self.embedder_seed)
        }
    }
}

/// Provenance of a curated sample.
pub fn synthetic_tag(id: &str) -> String {
    format!("synthetic:curation:{id}")
}

/// A manifest record plus the payload of its selected candidate, if any.
#[derive(Clone, Debug)]
pub struct SampleOutcome<R> {
    pub record: SampleRecord,
    pub result: Option<R>,
}

/// Selected first-frame edit and the trajectory recorded while sampling it.
#[derive(Clone, Debug)]
pub struct FirstFrameTriple<T> {
    pub request: EditRequest<T>,
    /// `[H, W]` pixels.
    pub edited: Tensor<T>,
    pub trajectory: EditingTrajectory<T>,
    pub trajectory_id: String,
    pub candidates: Vec<ScoreVector>,
}

pub fn image_train_samples<T: Scalar>(triples: &[ImageTriple<T>]) -> Result<Vec<TrainSample<T>>> {
    triples
        .iter()
        .map(|t| {
            EditTriple {
                id: t.request.id.clone(),
                source: as_clip(&t.request.source)?,
                target: as_clip(&t.target)?,
                instruction: t.request.instruction.clone(),
                source_caption: t.request.source_caption.clone(),
                target_caption: t.request.target_caption.clone(),
                provenance: format!("image:{}", t.request.id),
            }
            .to_train_sample()
        })
        .collect()
}

fn as_clip<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = (image.dim(0), image.dim(1));
    image.reshape(&[1, h, w])
}

#[derive(Clone, Debug)]
pub struct Step1Output<T> {
    pub model: Denoiser<T>,
    pub log: TrainLog,
    /// Fixed-draw loss over the corpus before and after training.
    pub eval_before: f64,
    pub eval_after: f64,
}

pub fn step1_train_image_editor<T: Scalar>(
    triples: &[ImageTriple<T>],
    model: DenoiserConfig,
    cfg: &TrainConfig,
) -> Result<Step1Output<T>> {
    if triples.is_empty() {
        return Err(Error::Argument("image editor needs a nonempty corpus".into()));
    }
    let data = image_train_samples(triples)?;
    let mut m = Denoiser::new(model)?;
    let eval_seed = rng::derive_seed(cfg.seed, &["step1-eval"]);
    let eval_before = evaluate_loss(&m, &data, VideoTraining::default(), 2, eval_seed)?;
    let log = train(&mut m, &data, cfg)?;
    let eval_after = evaluate_loss(&m, &data, VideoTraining::default(), 2, eval_seed)?;
    Ok(Step1Output {
        model: m,
        log,
        eval_before,
        eval_after,
    })
}

/// Survivors of the thresholds and the min–max ranking among them.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub passed: Vec<bool>,
    pub normalized: Vec<Option<BTreeMap<String, f64>>>,
    pub totals: Vec<Option<f64>>,
    pub best: Option<usize>,
}

pub fn rank_candidates(scores: &[ScoreVector], filter: &FilterConfig) -> Result<Ranking> {
    let n = scores.len();
    let survivors = threshold_filter(scores, &filter.thresholds);
    let mut r = Ranking {
        passed: vec![false; n],
        normalized: vec![None; n],
        totals: vec![None; n],
        best: None,
    };
    for &i in &survivors {
        r.passed[i] = true;
    }
    if survivors.is_empty() {
        return Ok(r);
    }
    let subset: Vec<ScoreVector> = survivors.iter().map(|&i| scores[i].clone()).collect();
    let sel = normalize_and_select(&subset, &filter.weights)?;
    for (k, &i) in survivors.iter().enumerate() {
        r.normalized[i] = Some(sel.normalized[k].clone());
        r.totals[i] = Some(sel.totals[k]);
    }
    r.best = Some(survivors[sel.best]);
    Ok(r)
}

fn candidate_records(sample: &str, guidance: &[GuidanceConfig], scores: &[ScoreVector], r: &Ranking) -> Vec<CandidateRecord> {
    (0..scores.len())
        .map(|k| CandidateRecord {
            candidate_id: format!("{sample}/c{k}"),
            guidance: guidance[k].clone(),
            raw: scores[k].scores.clone(),
            passed: r.passed[k],
            normalized: r.normalized[k].clone(),
            total: r.totals[k],
            selected: r.best == Some(k),
        })
        .collect()
}

/// Guidance of candidate `k` for `sample`: a seeded grid point and seed.
pub fn candidate_guidance(grid: &GuidanceGrid, seed: u64, stage: &str, sample: &str, k: usize) -> Result<GuidanceConfig> {
    let ks = k.to_string();
    let n = grid.points().len().max(1) as u64;
    let idx = rng::derive_seed(seed, &[stage, "grid", sample, &ks]) % n;
    grid.point(idx as usize, rng::derive_seed(seed, &[stage, "sampler", sample, &ks]))
}

fn failed<R>(sample_id: &str, stage: Stage, provenance: &str, instruction: &str, seed: u64, e: Error) -> SampleOutcome<R> {
    SampleOutcome {
        record: SampleRecord {
            sample_id: sample_id.to_string(),
            stage,
            provenance: provenance.to_string(),
            instruction: instruction.to_string(),
            seed,
            candidates: Vec::new(),
            selected: None,
            artifacts: BTreeMap::new(),
            error: Some(e.to_string()),
        },
        result: None,
    }
}

/// Samples `iters` recorded candidates per request, filters and ranks them
/// on the image metrics, and keeps only the winner's trajectory.
pub fn step2_generate_triples<T: Scalar>(
    model: &Denoiser<T>,
    requests: &[EditRequest<T>],
    grid: &GuidanceGrid,
    iters: usize,
    suite: &MetricSuite,
    filter: &FilterConfig,
    seed: u64,
) -> Vec<SampleOutcome<FirstFrameTriple<T>>> {
    requests
        .par_iter()
        .map(|req| {
            let sseed = rng::derive_seed(seed, &["step2", &req.id]);
            step2_one(model, req, grid, iters, suite, filter, seed)
                .unwrap_or_else(|e| failed(&req.id, Stage::Image, &synthetic_tag(&req.id), &req.instruction, sseed, e))
        })
        .collect()
}

fn step2_one<T: Scalar>(
    model: &Denoiser<T>,
    req: &EditRequest<T>,
    grid: &GuidanceGrid,
    iters: usize,
    suite: &MetricSuite,
    filter: &FilterConfig,
    seed: u64,
) -> Result<SampleOutcome<FirstFrameTriple<T>>> {
    let src = video_to_latent(&as_clip(&req.source)?)?;
    let text = TextEmbedding::encode(&req.instruction);
    let mut guidance = Vec::new();
    let mut scores = Vec::new();
    let mut outputs = Vec::new();
    for k in 0..iters {
        let g = candidate_guidance(grid, seed, "step2", &req.id, k)?;
        let (z, traj) = model.sample_edit(&src, &text, &g, true)?;
        let px = latent_to_video(&z)?;
        let edited = px.reshape(&[px.dim(1), px.dim(2)])?;
        scores.push(suite.image_scores(&ImageEdit {
            source: &req.source,
            edited: &edited,
            source_caption: &req.source_caption,
            target_caption: &req.target_caption,
            instruction: &req.instruction,
        })?);
        guidance.push(g);
        outputs.push(Some((edited, traj.expect("recording requested"))));
    }
    let ranking = rank_candidates(&scores, filter)?;
    let result = match ranking.best {
        Some(b) => {
            let (edited, trajectory) = outputs[b].take().expect("each candidate taken once");
            let trajectory_id = sha256_hex(&trajectory_to_bytes(&trajectory)?)[..16].to_string();
            Some(FirstFrameTriple {
                request: req.clone(),
                edited,
                trajectory,
                trajectory_id,
                candidates: scores.clone(),
            })
        }
        None => None,
    };
    Ok(SampleOutcome {
        record: SampleRecord {
            sample_id: req.id.clone(),
            stage: Stage::Image,
            provenance: synthetic_tag(&req.id),
            instruction: req.instruction.clone(),
            seed: rng::derive_seed(seed, &["step2", &req.id]),
            candidates: candidate_records(&req.id, &guidance, &scores, &ranking),
            selected: ranking.best,
            artifacts: BTreeMap::new(),
            error: None,
        },
        result,
    })
}

/// Turns a still `[H, W]` into `[f, H, W]` by per-frame wrap-around shift,
/// zoom about the centre and brightness drift. Frame 0 is the input itself.
pub fn step3_expand_source<T: Scalar>(image: &Tensor<T>, frames: usize, motion: &MotionParams) -> Result<Tensor<T>> {
    let &[h, w] = image.shape() else {
        return Err(Error::shape(format!("source image must be [H, W], got {:?}", image.shape())));
    };
    if frames == 0 {
        return Err(Error::shape("expansion needs at least one frame"));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(frames * h * w);
    out.extend_from_slice(src);
    for k in 1..frames {
        let (dy, dx) = (motion.shift.0 as i64 * k as i64, motion.shift.1 as i64 * k as i64);
        let mut f: Vec<T> = (0..h * w)
            .map(|p| {
                let (i, j) = ((p / w) as i64, (p % w) as i64);
                let si = (i - dy).rem_euclid(h as i64) as usize;
                let sj = (j - dx).rem_euclid(w as i64) as usize;
                src[si * w + sj]
            })
            .collect();
        if motion.zoom != 0.0 {
            f = zoom(&f, h, w, (1.0 + motion.zoom).powi(k as i32));
        }
        if motion.brightness != 0.0 {
            let b = motion.brightness * k as f64;
            f.iter_mut().for_each(|v| *v = T::cst((v.as_f64() + b).clamp(0.0, 1.0)));
        }
        out.extend(f);
    }
    Tensor::new(&[frames, h, w], out)
}

/// Bilinear resample scaled by `s` about the image centre, clamped at the
/// border.
fn zoom<T: Scalar>(img: &[T], h: usize, w: usize, s: f64) -> Vec<T> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let px = |i: i64, j: i64| img[i.clamp(0, h as i64 - 1) as usize * w + j.clamp(0, w as i64 - 1) as usize].as_f64();
    (0..h * w)
        .map(|p| {
            let y = cy + ((p / w) as f64 - cy) / s;
            let x = cx + ((p % w) as f64 - cx) / s;
            let (y0, x0) = (y.floor(), x.floor());
            let (fy, fx) = (y - y0, x - x0);
            let (y0, x0) = (y0 as i64, x0 as i64);
            let v = (1.0 - fy) * ((1.0 - fx) * px(y0, x0) + fx * px(y0, x0 + 1))
                + fy * ((1.0 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
            T::cst(v)
        })
        .collect()
}

/// Edits the expanded clip under the first frame's trajectory at `iters`
/// seeded grid points, then filters and ranks on the video metrics.
#[allow(clippy::too_many_arguments)]
pub fn step4_generate_target<T: Scalar>(
    model: &Denoiser<T>,
    triple: &FirstFrameTriple<T>,
    source: &Tensor<T>,
    grid: &GuidanceGrid,
    iters: usize,
    suite: &MetricSuite,
    filter: &FilterConfig,
    opts: VideoOptions,
    seed: u64,
) -> SampleOutcome<EditTriple<T>> {
    let id = &triple.request.id;
    let sseed = rng::derive_seed(seed, &["step4", id]);
    step4_one(model, triple, source, grid, iters, suite, filter, opts, seed)
        .unwrap_or_else(|e| failed(id, Stage::Video, &synthetic_tag(id), &triple.request.instruction, sseed, e))
}

#[allow(clippy::too_many_arguments)]
fn step4_one<T: Scalar>(
    model: &Denoiser<T>,
    triple: &FirstFrameTriple<T>,
    source: &Tensor<T>,
    grid: &GuidanceGrid,
    iters: usize,
    suite: &MetricSuite,
    filter: &FilterConfig,
    opts: VideoOptions,
    seed: u64,
) -> Result<SampleOutcome<EditTriple<T>>> {
    let req = &triple.request;
    let src = video_to_latent(source)?;
    let text = TextEmbedding::encode(&req.instruction);
    let mut guidance = Vec::new();
    let mut scores = Vec::new();
    let mut outputs = Vec::new();
    for k in 0..iters {
        let g = candidate_guidance(grid, seed, "step4", &req.id, k)?;
        let edit = edit_video(model, &src, &text, Some(&triple.trajectory), &g, opts)?;
        let target = latent_to_video(&edit.latents)?;
        scores.push(suite.video_scores(source, &target, &req.source_caption, &req.target_caption)?);
        guidance.push(g);
        outputs.push(Some(target));
    }
    let ranking = rank_candidates(&scores, filter)?;
    let result = ranking.best.map(|b| EditTriple {
        id: req.id.clone(),
        source: source.clone(),
        target: outputs[b].take().expect("each candidate taken once"),
        instruction: req.instruction.clone(),
        source_caption: req.source_caption.clone(),
        target_caption: req.target_caption.clone(),
        provenance: synthetic_tag(&req.id),
    });
    Ok(SampleOutcome {
        record: SampleRecord {
            sample_id: req.id.clone(),
            stage: Stage::Video,
            provenance: synthetic_tag(&req.id),
            instruction: req.instruction.clone(),
            seed: rng::derive_seed(seed, &["step4", &req.id]),
            candidates: candidate_records(&req.id, &guidance, &scores, &ranking),
            selected: ranking.best,
            artifacts: BTreeMap::new(),
            error: None,
        },
        result,
    })
}

#[derive(Clone, Debug)]
pub struct CurationOutput<T> {
    pub model: Denoiser<T>,
    pub checkpoint_id: String,
    pub step1: Step1Output<T>,
    pub step2: RoundManifest,
    pub step4: RoundManifest,
    pub dataset: Vec<EditTriple<T>>,
}

#[derive(Serialize)]
struct Step1Report<'a> {
    losses: &'a [f64],
    eval_before: f64,
    eval_after: f64,
    checkpoint_id: &'a str,
}

/// Runs all four stages under `run_dir`:
///
/// ```text
/// checkpoints/image-editor.ckpt
/// curation/step1.json
/// curation/step2.jsonl, curation/step4.jsonl
/// curation/samples/<id>/{first_frame.stack, trajectory.vtraj, source.stack, target.stack, scores.json}
/// dataset/dataset.jsonl, dataset/<id>/{source,target}.stack
/// ```
pub fn run_curation<T: Scalar>(cfg: &CurationConfig, run_dir: &Path) -> Result<CurationOutput<T>> {
    cfg.validate()?;
    let suite = cfg.suite();
    let cur = run_dir.join("curation");

    let corpus: Vec<ImageTriple<T>> = image_corpus(cfg.train_images, cfg.side, cfg.seed);
    let step1 = step1_train_image_editor(&corpus, cfg.model.clone(), &cfg.train)?;
    let model = step1.model.clone();
    let checkpoint_id = save_checkpoint(&run_dir.join("checkpoints/image-editor.ckpt"), &model)?;
    write_atomic(
        &cur.join("step1.json"),
        &serde_json::to_vec_pretty(&Step1Report {
            losses: &step1.log.losses,
            eval_before: step1.eval_before,
            eval_after: step1.eval_after,
            checkpoint_id: &checkpoint_id,
        })?,
    )?;

    let requests: Vec<EditRequest<T>> = edit_requests(cfg.sources, cfg.side, cfg.seed);
    let header = |stage: &str| ManifestHeader {
        round: 0,
        stage: stage.to_string(),
        corpus_digest: digest_items(requests.iter().map(|r| (r.id.as_str(), &r.source))),
        config_digest: cfg.digest(),
        checkpoint_id: checkpoint_id.clone(),
        embedder_tag: suite.tag(),
        seed: cfg.seed,
    };

    let outcomes = step2_generate_triples(&model, &requests, &cfg.grid, cfg.iters, &suite, &cfg.image_filter, cfg.seed);
    let mut records = Vec::new();
    let mut firsts = Vec::new();
    for mut o in outcomes {
        if let Some(t) = o.result {
            let dir = format!("samples/{}", t.request.id);
            write_video(&cur.join(format!("{dir}/first_frame.stack")), &as_clip(&t.edited)?)?;
            write_atomic(&cur.join(format!("{dir}/trajectory.vtraj")), &trajectory_to_bytes(&t.trajectory)?)?;
            o.record.artifacts.insert("first_frame".into(), format!("{dir}/first_frame.stack"));
            o.record.artifacts.insert("trajectory".into(), format!("{dir}/trajectory.vtraj"));
            o.record.artifacts.insert("trajectory_id".into(), t.trajectory_id.clone());
            firsts.push(t);
        }
        records.push(o.record);
    }
    let step2 = RoundManifest::new(header("step2"), records);
    step2.write(&cur.join("step2.jsonl"))?;

    let jobs: Vec<(FirstFrameTriple<T>, Tensor<T>)> = firsts
        .into_iter()
        .map(|t| {
            let m = MotionParams::draw(&cfg.motion, cfg.seed, &t.request.id);
            let v = step3_expand_source(&t.request.source, cfg.frames, &m)?;
            Ok((t, v))
        })
        .collect::<Result<_>>()?;
    let outcomes: Vec<SampleOutcome<EditTriple<T>>> = jobs
        .par_iter()
        .map(|(t, v)| {
            step4_generate_target(&model, t, v, &cfg.grid, cfg.iters, &suite, &cfg.video_filter, cfg.video, cfg.seed)
        })
        .collect();
    let mut records = Vec::new();
    let mut dataset = Vec::new();
    for (mut o, (first, _)) in outcomes.into_iter().zip(&jobs) {
        let dir = format!("samples/{}", o.record.sample_id);
        o.record.artifacts.insert("trajectory".into(), format!("{dir}/trajectory.vtraj"));
        o.record.artifacts.insert("trajectory_id".into(), first.trajectory_id.clone());
        if let Some(t) = o.result {
            write_video(&cur.join(format!("{dir}/source.stack")), &t.source)?;
            write_video(&cur.join(format!("{dir}/target.stack")), &t.target)?;
            o.record.artifacts.insert("source_video".into(), format!("{dir}/source.stack"));
            o.record.artifacts.insert("target_video".into(), format!("{dir}/target.stack"));
            o.record.artifacts.insert("scores".into(), format!("{dir}/scores.json"));
            write_atomic(&cur.join(format!("{dir}/scores.json")), &serde_json::to_vec_pretty(&o.record)?)?;
            dataset.push(t);
        }
        records.push(o.record);
    }
    let step4 = RoundManifest::new(header("step4"), records);
    step4.write(&cur.join("step4.jsonl"))?;
    write_dataset(&run_dir.join("dataset"), &dataset)?;

    Ok(CurationOutput {
        model,
        checkpoint_id,
        step1,
        step2,
        step4,
        dataset,
    })
}
