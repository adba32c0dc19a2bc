//! Multi-round refinement: edit real-source clips with the previous round's
//! model, filter the edits on the video metrics, retrain, repeat.
//!
//! Each round lives in its own directory and advances through
//! `init → edit → filter → train → done`; the state file is rewritten
//! atomically at every boundary so an interrupted round resumes where it
//! stopped and produces the same bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::corpus::{default_templates, fill_template, real_corpus, Clip, InstructionTemplate};
use crate::curation::{candidate_guidance, rank_candidates, FilterConfig};
use crate::dataset::{digest_items, read_dataset, write_dataset, EditTriple};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::ffg::{first_frame_guided_edit, VideoOptions};
use crate::fsutil::{sha256_hex, write_atomic};
use crate::guidance::{GuidanceConfig, GuidanceGrid};
use crate::latent::{latent_to_video, video_to_latent};
use crate::manifest::{CandidateRecord, ManifestHeader, RoundManifest, SampleRecord};
use crate::metrics::{FramePairs, MetricSuite, Stage};
use crate::rng;
use crate::scalar::Scalar;
use crate::text::TextEmbedding;
use crate::train::{train, TrainConfig, TrainLog};
use crate::trajectory::trajectory_to_bytes;
use crate::video_io::read_video;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedInstruction {
    pub source_id: String,
    pub template: usize,
    pub instruction: String,
    pub target_caption: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionBatch {
    pub instructions: Vec<GeneratedInstruction>,
    /// `(source id, reason)` for sources that could not be instructed.
    pub skipped: Vec<(String, String)>,
}

/// Picks a template per source from a stream keyed by `(seed, source id)`
/// and fills its tag slots.
pub fn generate_instructions(
    sources: &[(String, BTreeMap<String, String>)],
    templates: &[InstructionTemplate],
    seed: u64,
) -> Result<InstructionBatch> {
    if templates.is_empty() {
        return Err(Error::Argument("no instruction templates".into()));
    }
    let mut out = InstructionBatch::default();
    for (id, tags) in sources {
        if tags.is_empty() {
            out.skipped.push((id.clone(), "source has no content tags".into()));
            continue;
        }
        let k = (rng::derive_seed(seed, &["instruction", id]) % templates.len() as u64) as usize;
        let t = &templates[k];
        match (fill_template(&t.instruction, tags), fill_template(&t.caption, tags)) {
            (Some(instruction), Some(target_caption)) => out.instructions.push(GeneratedInstruction {
                source_id: id.clone(),
                template: k,
                instruction,
                target_caption,
            }),
            _ => out.skipped.push((id.clone(), format!("template {k} needs a tag the source lacks"))),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Edit,
    Filter,
    Train,
    Done,
}

impl Phase {
    pub fn next(self) -> Option<Phase> {
        match self {
            Phase::Init => Some(Phase::Edit),
            Phase::Edit => Some(Phase::Filter),
            Phase::Filter => Some(Phase::Train),
            Phase::Train => Some(Phase::Done),
            Phase::Done => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Curated synthetic triples plus every real round so far.
    #[default]
    Mixed,
    /// Real-source rounds only.
    RealOnly,
}

/// Persisted progress of one round. `phase` is the last completed phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundState {
    pub round: usize,
    pub phase: Phase,
    pub corpus_digest: String,
    pub mode: TrainingMode,
    pub checkpoint_in: String,
    pub dataset_id: Option<String>,
    pub selected: Option<usize>,
    pub checkpoint_out: Option<String>,
    /// Set when a phase failed; cleared when the round is resumed.
    pub error: Option<String>,
}

impl RoundState {
    fn advance(&mut self, to: Phase) -> Result<()> {
        if self.phase.next() != Some(to) {
            return Err(Error::Phase {
                phase: format!("{to:?}"),
                detail: format!("cannot advance from {:?}", self.phase),
            });
        }
        self.phase = to;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub seed: u64,
    /// Round budget; the default two rounds mirror the reference schedule.
    pub rounds: usize,
    /// Stop early when selections grow by no more than this factor.
    #[serde(default)]
    pub growth_ratio: Option<f64>,
    pub clips: usize,
    pub frames: usize,
    pub side: usize,
    pub templates: Vec<InstructionTemplate>,
    pub grid: GuidanceGrid,
    pub iters: usize,
    pub video_filter: FilterConfig,
    pub video: VideoOptions,
    pub frame_pairs: FramePairs,
    pub embedder_seed: u64,
    pub train: TrainConfig,
    pub mode: TrainingMode,
    /// Retrain each round from a fresh initialisation instead of the
    /// previous checkpoint.
    #[serde(default)]
    pub from_scratch: bool,
    /// Curated dataset directory mixed in under [`TrainingMode::Mixed`].
    #[serde(default)]
    pub synthetic_dataset: Option<PathBuf>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 2,
            growth_ratio: None,
            clips: 16,
            frames: 8,
            side: 32,
            templates: default_templates(),
            grid: GuidanceGrid::default(),
            iters: 2,
            video_filter: FilterConfig::uniform(Stage::Video),
            video: VideoOptions::default(),
            frame_pairs: FramePairs::All,
            embedder_seed: 0,
            train: TrainConfig {
                steps: 100,
                batch_size: 4,
                ..TrainConfig::default()
            },
            mode: TrainingMode::Mixed,
            from_scratch: false,
            synthetic_dataset: None,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.iters == 0 || self.frames == 0 {
            return Err(Error::Config("rounds, iters and frames must be positive".into()));
        }
        if self.side < 8 || self.side % 4 != 0 {
            return Err(Error::Config(format!("side must be a multiple of 4 and at least 8, got {}", self.side)));
        }
        if let Some(g) = self.growth_ratio {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::Config(format!("growth_ratio must be positive, got {g}")));
            }
        }
        self.video_filter.validate(Stage::Video)
    }

    /// Digest of the settings, leaving out where the curated set lives so
    /// relocated runs agree; the set's content is digested in `train.json`.
    pub fn digest(&self) -> String {
        let portable = Self {
            synthetic_dataset: None,
            ..self.clone()
        };
        sha256_hex(serde_json::to_string(&portable).expect("config serialises").as_bytes())
    }

    pub fn suite(&self) -> MetricSuite {
        MetricSuite {
            frame_pairs: self.frame_pairs,
            ..MetricSuite::toy(self.embedder_seed)
        }
    }

    pub fn corpus<T: Scalar>(&self) -> Vec<Clip<T>> {
        real_corpus(self.clips, self.frames, self.side, rng::derive_seed(self.seed, &["real-corpus"]))
    }
}

/// True once the round budget is spent, or when the latest round's
/// selection count is not more than `growth_ratio` times the previous one.
pub fn stop_criterion(states: &[RoundState], cfg: &RefineConfig) -> bool {
    let done: Vec<&RoundState> = states.iter().filter(|s| s.phase == Phase::Done).collect();
    if done.len() >= cfg.rounds {
        return true;
    }
    if let (Some(g), [.., prev, last]) = (cfg.growth_ratio, done.as_slice()) {
        let (p, l) = (prev.selected.unwrap_or(0) as f64, last.selected.unwrap_or(0) as f64);
        if l <= g * p || l == 0.0 {
            return true;
        }
    }
    false
}

pub fn round_dir(run_dir: &Path, round: usize) -> PathBuf {
    run_dir.join("refine").join(format!("round-{round:02}"))
}

pub fn real_tag(round: usize, clip: &str) -> String {
    format!("real:r{round}:{clip}")
}

/// Test hook: stop cleanly after a phase, as if the process had died there.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunControl {
    pub halt_after: Option<Phase>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditCandidate {
    guidance: GuidanceConfig,
    target: String,
    trajectory: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipEdits {
    clip_id: String,
    instruction: String,
    source_caption: String,
    target_caption: String,
    seed: u64,
    candidates: Vec<EditCandidate>,
    error: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRecord {
    provenance: Vec<String>,
    dataset_digest: String,
    losses: Vec<f64>,
    skipped: bool,
}

const STATE: &str = "state.json";

fn write_state(dir: &Path, s: &RoundState) -> Result<()> {
    write_atomic(&dir.join(STATE), &serde_json::to_vec_pretty(s)?)
}

pub fn read_state(dir: &Path) -> Result<Option<RoundState>> {
    let p = dir.join(STATE);
    if !p.exists() {
        return Ok(None);
    }
    let s = serde_json::from_slice(&std::fs::read(&p)?)
        .map_err(|e| Error::corrupt("round state", e.to_string()))?;
    Ok(Some(s))
}

/// Runs (or resumes) round `round` starting from the checkpoint at `prev`.
pub fn run_round<T: Scalar>(
    prev: &Path,
    round: usize,
    cfg: &RefineConfig,
    run_dir: &Path,
    ctl: RunControl,
) -> Result<RoundState> {
    cfg.validate()?;
    let dir = round_dir(run_dir, round);
    let clips: Vec<Clip<T>> = cfg.corpus();
    let corpus_digest = digest_items(clips.iter().map(|c| (c.id.as_str(), &c.video)));
    let (model, checkpoint_in) = load_checkpoint::<T>(prev)?;

    let mut state = match read_state(&dir)? {
        Some(s) => {
            if s.round != round || s.corpus_digest != corpus_digest || s.checkpoint_in != checkpoint_in {
                return Err(Error::Phase {
                    phase: format!("{:?}", s.phase),
                    detail: format!("state in {} belongs to a different round, corpus or checkpoint", dir.display()),
                });
            }
            s
        }
        None => {
            let s = RoundState {
                round,
                phase: Phase::Init,
                corpus_digest,
                mode: cfg.mode,
                checkpoint_in,
                dataset_id: None,
                selected: None,
                checkpoint_out: None,
                error: None,
            };
            write_state(&dir, &s)?;
            s
        }
    };
    state.error = None;

    while let Some(next) = state.phase.next() {
        if ctl.halt_after.is_some_and(|h| state.phase >= h) {
            break;
        }
        let res = match next {
            Phase::Edit => edit_phase(&model, &clips, round, cfg, &dir),
            Phase::Filter => filter_phase(&clips, round, cfg, &dir, &state).map(|(id, n)| {
                state.dataset_id = Some(id);
                state.selected = Some(n);
            }),
            Phase::Train => train_phase(&model, round, cfg, run_dir, &dir),
            Phase::Done => Ok(()),
            Phase::Init => unreachable!("init is never a successor"),
        };
        if let Err(e) = res {
            state.error = Some(e.to_string());
            write_state(&dir, &state)?;
            return Err(Error::Phase {
                phase: format!("{next:?}"),
                detail: e.to_string(),
            });
        }
        if next == Phase::Done {
            let b = std::fs::read(dir.join("checkpoint.ckpt"))?;
            state.checkpoint_out = Some(crate::checkpoint::checkpoint_id(&b));
        }
        state.advance(next)?;
        write_state(&dir, &state)?;
    }
    Ok(state)
}

fn edit_phase<T: Scalar>(model: &Denoiser<T>, clips: &[Clip<T>], round: usize, cfg: &RefineConfig, dir: &Path) -> Result<()> {
    let rs = round.to_string();
    let sources: Vec<(String, BTreeMap<String, String>)> = clips.iter().map(|c| (c.id.clone(), c.tags.clone())).collect();
    let batch = generate_instructions(&sources, &cfg.templates, rng::derive_seed(cfg.seed, &["round", &rs]))?;
    let by_id: BTreeMap<&str, &Clip<T>> = clips.iter().map(|c| (c.id.as_str(), c)).collect();
    let edits: Vec<(ClipEdits, Vec<(Vec<u8>, Vec<u8>)>)> = batch
        .instructions
        .par_iter()
        .map(|gi| {
            let clip = by_id[gi.source_id.as_str()];
            let seed = rng::derive_seed(cfg.seed, &["refine", &rs, &clip.id]);
            let mut rec = ClipEdits {
                clip_id: clip.id.clone(),
                instruction: gi.instruction.clone(),
                source_caption: clip.caption.clone(),
                target_caption: gi.target_caption.clone(),
                seed,
                candidates: Vec::new(),
                error: None,
            };
            let mut blobs = Vec::new();
            let res: Result<()> = (|| {
                let src = video_to_latent(&clip.video)?;
                let text = TextEmbedding::encode(&gi.instruction);
                for k in 0..cfg.iters {
                    let g = candidate_guidance(&cfg.grid, seed, "refine", &clip.id, k)?;
                    let (edit, traj) = first_frame_guided_edit(model, &src, &text, &g, cfg.video)?;
                    let target = latent_to_video(&edit.latents)?;
                    blobs.push((crate::video_io::video_to_bytes(&target)?, trajectory_to_bytes(&traj)?));
                    rec.candidates.push(EditCandidate {
                        guidance: g,
                        target: format!("edits/{}/c{k}.stack", clip.id),
                        trajectory: format!("edits/{}/c{k}.vtraj", clip.id),
                    });
                }
                Ok(())
            })();
            if let Err(e) = res {
                rec.error = Some(e.to_string());
                rec.candidates.clear();
                blobs.clear();
            }
            (rec, blobs)
        })
        .collect();
    let mut index = Vec::new();
    for (rec, blobs) in &edits {
        for (c, (v, t)) in rec.candidates.iter().zip(blobs) {
            write_atomic(&dir.join(&c.target), v)?;
            write_atomic(&dir.join(&c.trajectory), t)?;
        }
        index.push(rec.clone());
    }
    write_atomic(&dir.join("edits/edits.json"), &serde_json::to_vec_pretty(&index)?)?;
    write_atomic(&dir.join("edits/skipped.json"), &serde_json::to_vec_pretty(&batch.skipped)?)
}

fn filter_phase<T: Scalar>(
    clips: &[Clip<T>],
    round: usize,
    cfg: &RefineConfig,
    dir: &Path,
    state: &RoundState,
) -> Result<(String, usize)> {
    let index: Vec<ClipEdits> = serde_json::from_slice(&std::fs::read(dir.join("edits/edits.json"))?)?;
    let by_id: BTreeMap<&str, &Clip<T>> = clips.iter().map(|c| (c.id.as_str(), c)).collect();
    let suite = cfg.suite();
    let scored: Vec<Result<(SampleRecord, Option<EditTriple<T>>)>> = index
        .par_iter()
        .map(|e| {
            let tag = real_tag(round, &e.clip_id);
            let mut record = SampleRecord {
                sample_id: format!("{}-r{round}", e.clip_id),
                stage: Stage::Video,
                provenance: tag.clone(),
                instruction: e.instruction.clone(),
                seed: e.seed,
                candidates: Vec::new(),
                selected: None,
                artifacts: BTreeMap::new(),
                error: e.error.clone(),
            };
            if e.error.is_some() {
                return Ok((record, None));
            }
            let clip = by_id[e.clip_id.as_str()];
            let targets = e
                .candidates
                .iter()
                .map(|c| read_video::<T>(&dir.join(&c.target)))
                .collect::<Result<Vec<_>>>()?;
            let scores = targets
                .iter()
                .map(|t| suite.video_scores(&clip.video, t, &e.source_caption, &e.target_caption))
                .collect::<Result<Vec<_>>>()?;
            let ranking = rank_candidates(&scores, &cfg.video_filter)?;
            record.candidates = (0..scores.len())
                .map(|k| CandidateRecord {
                    candidate_id: format!("{}/c{k}", record.sample_id),
                    guidance: e.candidates[k].guidance.clone(),
                    raw: scores[k].scores.clone(),
                    passed: ranking.passed[k],
                    normalized: ranking.normalized[k].clone(),
                    total: ranking.totals[k],
                    selected: ranking.best == Some(k),
                })
                .collect();
            record.selected = ranking.best;
            let triple = ranking.best.map(|b| EditTriple {
                id: record.sample_id.clone(),
                source: clip.video.clone(),
                target: targets[b].clone(),
                instruction: e.instruction.clone(),
                source_caption: e.source_caption.clone(),
                target_caption: e.target_caption.clone(),
                provenance: tag,
            });
            if let Some(b) = ranking.best {
                let id = &record.sample_id;
                record.artifacts = BTreeMap::from([
                    ("source_video".to_string(), format!("dataset/{id}/source.stack")),
                    ("target_video".to_string(), format!("dataset/{id}/target.stack")),
                    ("trajectory".to_string(), format!("dataset/{id}/trajectory.vtraj")),
                    ("edit".to_string(), e.candidates[b].target.clone()),
                ]);
            }
            Ok((record, triple))
        })
        .collect();
    let mut records = Vec::new();
    let mut dataset = Vec::new();
    for r in scored {
        let (rec, triple) = r?;
        if let (Some(t), Some(b)) = (&triple, rec.selected) {
            let src = &index.iter().find(|e| rec.sample_id == format!("{}-r{round}", e.clip_id)).expect("indexed").candidates[b];
            std::fs::create_dir_all(dir.join("dataset").join(&t.id))?;
            std::fs::copy(dir.join(&src.trajectory), dir.join(format!("dataset/{}/trajectory.vtraj", t.id)))?;
            write_atomic(&dir.join(format!("dataset/{}/scores.json", t.id)), &serde_json::to_vec_pretty(&rec)?)?;
        }
        records.push(rec);
        dataset.extend(triple);
    }
    write_dataset(&dir.join("dataset"), &dataset)?;
    let header = ManifestHeader {
        round,
        stage: "refine".into(),
        corpus_digest: state.corpus_digest.clone(),
        config_digest: cfg.digest(),
        checkpoint_id: state.checkpoint_in.clone(),
        embedder_tag: suite.tag(),
        seed: cfg.seed,
    };
    RoundManifest::new(header, records).write(&dir.join("manifest.jsonl"))?;
    let id = digest_items(dataset.iter().flat_map(|t| [(t.id.as_str(), &t.source), (t.id.as_str(), &t.target)]));
    Ok((id[..16].to_string(), dataset.len()))
}

/// Training set of round `round` under `cfg.mode`.
pub fn training_set<T: Scalar>(round: usize, cfg: &RefineConfig, run_dir: &Path) -> Result<Vec<EditTriple<T>>> {
    let mut data = Vec::new();
    if cfg.mode == TrainingMode::Mixed {
        let dir = cfg.synthetic_dataset.as_ref().ok_or_else(|| {
            Error::Config("mixed training needs synthetic_dataset pointing at a curated dataset".into())
        })?;
        data.extend(read_dataset::<T>(dir)?);
    }
    for r in 0..=round {
        data.extend(read_dataset::<T>(&round_dir(run_dir, r).join("dataset"))?);
    }
    Ok(data)
}

fn train_phase<T: Scalar>(model: &Denoiser<T>, round: usize, cfg: &RefineConfig, run_dir: &Path, dir: &Path) -> Result<()> {
    let triples = training_set::<T>(round, cfg, run_dir)?;
    let samples = triples.iter().map(|t| t.to_train_sample()).collect::<Result<Vec<_>>>()?;
    let mut m = if cfg.from_scratch {
        Denoiser::new(model.config.clone())?
    } else {
        model.clone()
    };
    let has_real = triples.iter().any(|t| t.provenance.starts_with("real:"));
    let log = if has_real {
        let tc = TrainConfig {
            seed: rng::derive_seed(cfg.seed, &["refine-train", &round.to_string()]),
            ..cfg.train.clone()
        };
        train(&mut m, &samples, &tc)?
    } else {
        TrainLog::default()
    };
    let mut provenance: Vec<String> = triples.iter().map(|t| t.provenance.clone()).collect();
    provenance.sort();
    let rec = TrainRecord {
        provenance,
        dataset_digest: digest_items(triples.iter().flat_map(|t| [(t.id.as_str(), &t.source), (t.id.as_str(), &t.target)])),
        losses: log.losses,
        skipped: !has_real,
    };
    write_atomic(&dir.join("train.json"), &serde_json::to_vec_pretty(&rec)?)?;
    save_checkpoint(&dir.join("checkpoint.ckpt"), if has_real { &m } else { model })?;
    Ok(())
}

/// Provenance tags the round trained on, as recorded in its directory.
pub fn training_provenance(run_dir: &Path, round: usize) -> Result<Vec<String>> {
    let rec: TrainRecord = serde_json::from_slice(&std::fs::read(round_dir(run_dir, round).join("train.json"))?)?;
    Ok(rec.provenance)
}

/// Rounds until [`stop_criterion`] holds; each round starts from the
/// previous round's output checkpoint.
pub fn run_refine<T: Scalar>(start: &Path, cfg: &RefineConfig, run_dir: &Path) -> Result<Vec<RoundState>> {
    let mut states: Vec<RoundState> = Vec::new();
    let mut prev = start.to_path_buf();
    while !stop_criterion(&states, cfg) {
        let r = states.len();
        let s = run_round::<T>(&prev, r, cfg, run_dir, RunControl::default())?;
        prev = round_dir(run_dir, r).join("checkpoint.ckpt");
        states.push(s);
    }
    Ok(states)
}
