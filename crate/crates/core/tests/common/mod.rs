#![allow(dead_code)]

use vedit::denoiser::{Denoiser, DenoiserConfig, TrainSample};
use vedit::rng;
use vedit::scalar::Scalar;
use vedit::tensor::Tensor;
use vedit::text::TextEmbedding;

/// Small enough for finite differences, big enough to exercise every path.
pub fn tiny_config(frames: usize) -> DenoiserConfig {
    DenoiserConfig {
        hidden: 8,
        layers: 2,
        time_dim: 8,
        ffn_mult: 2,
        epm_frames: frames,
        epm_hidden: 8,
        init_seed: 11,
        ..Default::default()
    }
}

pub fn tiny<T: Scalar>(frames: usize) -> Denoiser<T> {
    Denoiser::new(tiny_config(frames)).unwrap()
}

/// Perturbs every parameter so zero-initialised pieces carry signal.
pub fn jitter<T: Scalar>(m: &mut Denoiser<T>, std: f64, seed: u64) {
    let mut r = rng::from_seed(seed);
    let names: Vec<String> = m.params.names().map(String::from).collect();
    for n in names {
        let p = m.params.get_mut(&n).unwrap();
        let noise = Tensor::<T>::randn(p.shape(), std, &mut r);
        *p = p.add(&noise).unwrap();
    }
}

pub fn randn<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::randn(shape, 1.0, &mut rng::from_seed(seed))
}

/// Source/target pairs where the target is a fixed transform of the source.
pub fn toy_samples<T: Scalar>(n: usize, frames: usize, hw: usize, seed: u64) -> Vec<TrainSample<T>> {
    (0..n)
        .map(|i| {
            let src: Tensor<T> = randn(&[frames, 4, hw, hw], seed + i as u64);
            let tgt = src.map(|v| -v * T::cst(0.5) + T::cst(0.25));
            TrainSample {
                source: src,
                target: tgt,
                text: TextEmbedding::encode("invert the colors"),
                provenance: format!("toy:{i}"),
            }
        })
        .collect()
}

/// Curation settings small enough for integration tests.
pub fn tiny_curation(seed: u64) -> vedit::curation::CurationConfig {
    use vedit::curation::CurationConfig;
    use vedit::guidance::GuidanceGrid;
    use vedit::train::TrainConfig;
    let mut c = CurationConfig {
        seed,
        side: 16,
        frames: 3,
        train_images: 8,
        sources: 6,
        iters: 2,
        model: tiny_config(3),
        train: TrainConfig {
            steps: 40,
            seed,
            ..TrainConfig::default()
        },
        grid: GuidanceGrid {
            steps: 4,
            ..GuidanceGrid::default()
        },
        ..CurationConfig::default()
    };
    c.image_filter.thresholds.clear();
    c.video_filter.thresholds.clear();
    c
}

/// Refinement settings for a 3-frame tiny model.
pub fn tiny_refine(seed: u64, clips: usize) -> vedit::refine::RefineConfig {
    use vedit::guidance::GuidanceGrid;
    use vedit::refine::{RefineConfig, TrainingMode};
    use vedit::train::TrainConfig;
    let mut c = RefineConfig {
        seed,
        clips,
        frames: 3,
        side: 16,
        iters: 2,
        grid: GuidanceGrid {
            steps: 3,
            ..GuidanceGrid::default()
        },
        train: TrainConfig {
            steps: 10,
            batch_size: 2,
            seed,
            ..TrainConfig::default()
        },
        mode: TrainingMode::RealOnly,
        ..RefineConfig::default()
    };
    c.video_filter.thresholds.clear();
    c
}
