//! Score vectors, min–max weighted selection and threshold filtering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Image,
    Video,
}

pub const IMAGE_METRICS: [&str; 6] = ["dino_sim", "clip_img_sim", "ssim", "clip_dir", "clip_sim", "aesthetic"];
pub const VIDEO_METRICS: [&str; 5] = ["viclip_out", "viclip_dir", "pick_score", "clip_frame", "clip_text"];

impl Stage {
    pub fn metric_names(self) -> &'static [&'static str] {
        match self {
            Stage::Image => &IMAGE_METRICS,
            Stage::Video => &VIDEO_METRICS,
        }
    }

    /// Uniform weights over the stage's metrics.
    pub fn uniform_weights(self) -> BTreeMap<String, f64> {
        self.metric_names().iter().map(|m| (m.to_string(), 1.0)).collect()
    }
}

/// Named raw scores for one candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub stage: Stage,
    pub scores: BTreeMap<String, f64>,
}

impl ScoreVector {
    /// Requires exactly the stage's metric names, all finite.
    pub fn new(stage: Stage, scores: BTreeMap<String, f64>) -> Result<Self> {
        let names = stage.metric_names();
        if scores.len() != names.len() || names.iter().any(|n| !scores.contains_key(*n)) {
            return Err(Error::Argument(format!(
                "{stage:?} scores must name exactly {names:?}, got {:?}",
                scores.keys().collect::<Vec<_>>()
            )));
        }
        if let Some((k, v)) = scores.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Argument(format!("score {k} is not finite: {v}")));
        }
        Ok(Self { stage, scores })
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.scores.get(metric).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub normalized: Vec<BTreeMap<String, f64>>,
    pub totals: Vec<f64>,
    pub best: usize,
}

/// Min–max normalises each metric across candidates (a constant metric maps
/// to 0.5), sums with `weights`, and picks the argmax; ties go to the lowest
/// index. Metrics without a weight contribute nothing.
pub fn normalize_and_select(candidates: &[ScoreVector], weights: &BTreeMap<String, f64>) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Argument("no candidates to select from".into()));
    }
    if weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Argument(format!("weights must be finite and nonnegative: {weights:?}")));
    }
    if weights.values().all(|w| *w == 0.0) {
        return Err(Error::Argument("weights are all zero".into()));
    }
    for name in weights.keys() {
        if let Some(i) = candidates.iter().position(|c| !c.scores.contains_key(name)) {
            return Err(Error::Argument(format!("candidate {i} has no score for weighted metric {name}")));
        }
    }
    let metrics: Vec<&String> = candidates[0].scores.keys().collect();
    let mut normalized = vec![BTreeMap::new(); candidates.len()];
    let mut totals = vec![0.0; candidates.len()];
    for m in metrics {
        let vals: Vec<f64> = candidates
            .iter()
            .map(|c| c.get(m).ok_or_else(|| Error::Argument(format!("candidate missing metric {m}"))))
            .collect::<Result<_>>()?;
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w = weights.get(m).copied().unwrap_or(0.0);
        for (i, v) in vals.into_iter().enumerate() {
            let n = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            normalized[i].insert(m.clone(), n);
            totals[i] += w * n;
        }
    }
    let mut best = 0;
    for (i, &t) in totals.iter().enumerate() {
        if t > totals[best] {
            best = i;
        }
    }
    Ok(Selection {
        normalized,
        totals,
        best,
    })
}

/// Indices of candidates meeting every threshold (`score >= threshold`), in
/// order. A candidate lacking a thresholded metric fails.
pub fn threshold_filter(candidates: &[ScoreVector], thresholds: &BTreeMap<String, f64>) -> Vec<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| thresholds.iter().all(|(m, t)| c.get(m).is_some_and(|v| v >= *t)))
        .map(|(i, _)| i)
        .collect()
}
