use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classifier-free guidance settings for one sampling run.
///
/// The scale ranges are stored under the names the source method uses
/// (text 1.2..2.0, image 5.0..12.5). `swap_scales` exchanges them at use
/// time for callers who read the ranges the other way round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub text_scale: f64,
    pub image_scale: f64,
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub swap_scales: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            text_scale: 1.6,
            image_scale: 8.75,
            steps: 20,
            seed: 0,
            swap_scales: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.text_scale >= 0.0 && self.image_scale >= 0.0) {
            return Err(Error::Config(format!(
                "guidance scales must be >= 0: text {}, image {}",
                self.text_scale, self.image_scale
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("guidance needs at least one step".into()));
        }
        Ok(())
    }

    /// `(s_T, s_I)` after applying `swap_scales`.
    pub fn effective_scales(&self) -> (f64, f64) {
        if self.swap_scales {
            (self.image_scale, self.text_scale)
        } else {
            (self.text_scale, self.image_scale)
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Cartesian grid of guidance scales explored during candidate generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceGrid {
    pub text_scales: Vec<f64>,
    pub image_scales: Vec<f64>,
    pub steps: usize,
    #[serde(default)]
    pub swap_scales: bool,
}

impl Default for GuidanceGrid {
    fn default() -> Self {
        Self {
            text_scales: vec![1.2, 1.6, 2.0],
            image_scales: vec![5.0, 8.75, 12.5],
            steps: 20,
            swap_scales: false,
        }
    }
}

impl GuidanceGrid {
    pub fn points(&self) -> Vec<GuidanceConfig> {
        let mut out = Vec::new();
        for &t in &self.text_scales {
            for &i in &self.image_scales {
                out.push(GuidanceConfig {
                    text_scale: t,
                    image_scale: i,
                    steps: self.steps,
                    seed: 0,
                    swap_scales: self.swap_scales,
                });
            }
        }
        out
    }

    /// Guidance for iteration `i`, cycling through the grid.
    pub fn point(&self, i: usize, seed: u64) -> Result<GuidanceConfig> {
        let pts = self.points();
        if pts.is_empty() {
            return Err(Error::Config("empty guidance grid".into()));
        }
        let g = pts[i % pts.len()].with_seed(seed);
        g.validate()?;
        Ok(g)
    }
}
