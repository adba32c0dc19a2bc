//! First-frame-guided video editing: every frame is sampled jointly while
//! its self-attention also sees the first frame's recorded keys/values for
//! the same (step, layer).

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, EpmMode, VideoCtx};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::TextEmbedding;
use crate::trajectory::{EditingTrajectory, Replayer, TrajectoryStore, CFG_BRANCHES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct VideoOptions {
    pub sma: bool,
    pub epm: EpmMode,
}

impl Default for VideoOptions {
    fn default() -> Self {
        Self {
            sma: true,
            epm: EpmMode::Learned,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VideoEdit<T> {
    /// Edited latents `[f, 4, h, w]`.
    pub latents: Tensor<T>,
    /// Relationship scores per attention site from the final step (empty
    /// unless joint attention ran).
    pub scores: Vec<Tensor<T>>,
    /// Per (step, layer) replay counts for each guidance branch.
    pub consumed: BTreeMap<(usize, usize), [u32; CFG_BRANCHES]>,
}

/// Edits `source: [f, 4, h, w]`. With `traj`, the recording model must
/// share this model's topology and the guidance must use the recorded step
/// count.
pub fn edit_video<T: Scalar>(
    model: &Denoiser<T>,
    source: &Tensor<T>,
    text: &TextEmbedding<T>,
    traj: Option<&dyn TrajectoryStore<T>>,
    g: &GuidanceConfig,
    opts: VideoOptions,
) -> Result<VideoEdit<T>> {
    if source.rank() != 4 || source.dim(0) == 0 {
        return Err(Error::shape(format!("video latents must be [f, 4, h, w], got {:?}", source.shape())));
    }
    let frames = source.dim(0);
    let replayer = match traj {
        Some(store) => {
            let m = store.meta();
            let digest = model.digest();
            if m.digest != digest {
                return Err(Error::Topology {
                    expected: digest,
                    found: m.digest.clone(),
                });
            }
            if m.steps != g.steps {
                return Err(Error::Trajectory(format!(
                    "trajectory has {} steps, sampler configured for {}",
                    m.steps, g.steps
                )));
            }
            if m.layer_ids != model.layer_ids() {
                return Err(Error::Trajectory(format!(
                    "trajectory layers {:?} vs model layers {:?}",
                    m.layer_ids,
                    model.layer_ids()
                )));
            }
            Some(Replayer::new(store))
        }
        None => None,
    };
    let video = VideoCtx {
        frames,
        sma: opts.sma,
        epm: opts.epm,
    };
    let scores = RefCell::new(Vec::new());
    let latents = model.sample(source, text, g, Some(video), None, replayer.as_ref(), Some(&scores))?;
    let consumed = match &replayer {
        Some(r) => {
            r.verify_exact()?;
            r.consumed()
        }
        None => BTreeMap::new(),
    };
    Ok(VideoEdit {
        latents,
        scores: scores.into_inner(),
        consumed,
    })
}

/// Records the first frame's image edit, then edits the whole video under
/// its trajectory.
pub fn first_frame_guided_edit<T: Scalar>(
    model: &Denoiser<T>,
    source: &Tensor<T>,
    text: &TextEmbedding<T>,
    g: &GuidanceConfig,
    opts: VideoOptions,
) -> Result<(VideoEdit<T>, EditingTrajectory<T>)> {
    let first = source.narrow(0, 0, 1)?;
    let (_, traj) = model.sample_edit(&first, text, g, true)?;
    let traj = traj.expect("recording requested");
    let edit = edit_video(model, source, text, Some(&traj), g, opts)?;
    Ok((edit, traj))
}
