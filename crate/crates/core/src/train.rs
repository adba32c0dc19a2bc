//! Training driver: minibatch Adam on noise-prediction loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, TrainSample, VideoTraining, COND_DROPOUT};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub cond_dropout: f64,
    pub adam: AdamConfig,
    pub video: VideoTraining,
    /// Train only the adapter gains, keeping temporal projection weights fixed.
    #[serde(default)]
    pub freeze_temporal_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            seed: 0,
            cond_dropout: COND_DROPOUT,
            adam: AdamConfig::default(),
            video: VideoTraining::default(),
            freeze_temporal_weights: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn first(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// One optimisation step on `batch`; returns the pre-update loss.
pub fn train_step<T: Scalar>(
    model: &mut Denoiser<T>,
    opt: &mut Adam<T>,
    batch: &[TrainSample<T>],
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    let mut r = rng::stream(cfg.seed, &["train-noise", &step.to_string()]);
    let draws = model.draw_noise(batch, cfg.cond_dropout, &mut r)?;
    let (loss, grads) = model.loss_and_grads(batch, &draws, cfg.video)?;
    let loss = loss.as_f64();
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step,
            loss,
            detail: divergence_detail(&grads),
        });
    }
    opt.apply(&mut model.params, &grads)?;
    if !model.params.all_finite() {
        let bad: Vec<&str> = model
            .params
            .iter()
            .filter(|(_, v)| !v.all_finite())
            .map(|(k, _)| k)
            .collect();
        return Err(Error::Divergence {
            step,
            loss,
            detail: format!("non-finite parameters after update: {bad:?}"),
        });
    }
    Ok(loss)
}

fn divergence_detail<T: Scalar>(grads: &std::collections::BTreeMap<String, crate::tensor::Tensor<T>>) -> String {
    let bad: Vec<&str> = grads
        .iter()
        .filter(|(_, g)| !g.all_finite())
        .map(|(k, _)| k.as_str())
        .collect();
    let largest = grads
        .iter()
        .filter(|(_, g)| g.all_finite())
        .map(|(k, g)| (k.as_str(), g.norm().as_f64()))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    format!(
        "non-finite gradients in {bad:?}; largest finite gradient norm {:.3e} ({})",
        largest.1, largest.0
    )
}

pub fn make_optimizer<T: Scalar>(model: &Denoiser<T>, cfg: &TrainConfig) -> Adam<T> {
    let mut opt = Adam::new(cfg.adam.clone());
    if cfg.freeze_temporal_weights {
        opt.frozen = (0..model.config.layers)
            .flat_map(|l| ["wq", "wk", "wv", "wo"].map(|w| format!("sma.{l}.{w}")))
            .collect();
    }
    opt
}

/// Mean loss over every sample under fixed noise (no condition dropout),
/// repeated for `passes` independent draws. Comparable before and after
/// training because the draws depend only on `seed`.
pub fn evaluate_loss<T: Scalar>(
    model: &Denoiser<T>,
    data: &[TrainSample<T>],
    video: crate::denoiser::VideoTraining,
    passes: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() || passes == 0 {
        return Err(Error::Argument("loss evaluation needs samples and at least one pass".into()));
    }
    let mut total = 0.0;
    for p in 0..passes {
        let mut r = rng::stream(seed, &["eval-noise", &p.to_string()]);
        let draws = model.draw_noise(data, 0.0, &mut r)?;
        for (s, d) in data.iter().zip(draws) {
            total += model.loss_and_grads(std::slice::from_ref(s), &[d], video)?.0.as_f64();
        }
    }
    Ok(total / (passes * data.len()) as f64)
}

/// `cfg.steps` minibatch steps; each batch is drawn with replacement from
/// a per-step seeded stream.
pub fn train<T: Scalar>(
    model: &mut Denoiser<T>,
    data: &[TrainSample<T>],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if cfg.steps > 0 && data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut opt = make_optimizer(model, cfg);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let mut r = rng::stream(cfg.seed, &["train-batch", &step.to_string()]);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| r.random_range(0..data.len())).collect();
        let batch: Vec<TrainSample<T>> = idx.iter().map(|&i| data[i].clone()).collect();
        log.losses.push(train_step(model, &mut opt, &batch, cfg, step)?);
    }
    Ok(log)
}
