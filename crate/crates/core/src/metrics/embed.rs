//! Pluggable embedders and the deterministic offline stand-ins.

use rand_distr::{Distribution, StandardNormal};

use crate::rng;
use crate::tensor::Tensor;
use crate::text::{token_id, token_vector, tokenize, TEXT_DIM};

/// Maps images (`[H, W]`), videos (`[f, H, W]`) and text into one unit-norm
/// space. Real backbones plug in behind the same trait.
pub trait Embedder: Send + Sync {
    /// Identity of the backbone; written into every report.
    fn tag(&self) -> String;

    fn embed_image(&self, image: &Tensor<f64>) -> Vec<f64>;

    fn embed_text(&self, text: &str) -> Vec<f64>;

    /// Mean of the frame embeddings, renormalised.
    fn embed_video(&self, video: &Tensor<f64>) -> Vec<f64> {
        let frames = frames_of(video);
        let mut acc: Vec<f64> = Vec::new();
        for f in &frames {
            let e = self.embed_image(f);
            if acc.is_empty() {
                acc = e;
            } else {
                acc.iter_mut().zip(e).for_each(|(a, b)| *a += b);
            }
        }
        normalized(acc)
    }
}

/// Scores image–caption preference; the toy default maps a cosine affinely.
pub trait PreferenceScorer: Send + Sync {
    fn tag(&self) -> String;

    fn score_image(&self, image: &Tensor<f64>, caption: &str) -> f64;
}

/// Splits `[f, H, W]` into `[H, W]` frames.
pub fn frames_of(video: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let s = video.shape();
    assert_eq!(s.len(), 3, "video must be [f, H, W]");
    let (h, w) = (s[1], s[2]);
    video
        .data()
        .chunks(h * w)
        .map(|c| Tensor::new(&[h, w], c.to_vec()).expect("frame shape"))
        .collect()
}

pub fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

const GRID: usize = 4;
const IMAGE_FEATURES: usize = 6 + GRID * GRID;

/// Fixed-seed random projection of simple image statistics (intensity,
/// contrast, a 4x4 grid of block means, edge energy) or of summed hashed
/// token vectors.
#[derive(Clone, Debug)]
pub struct ToyEmbedder {
    name: String,
    seed: u64,
    dim: usize,
    image_proj: Vec<f64>,
    text_proj: Vec<f64>,
}

impl ToyEmbedder {
    pub fn new(name: &str, seed: u64, dim: usize) -> Self {
        let mut r = rng::stream(seed, &["toy-embedder", name, "image"]);
        let image_proj = (0..dim * IMAGE_FEATURES).map(|_| StandardNormal.sample(&mut r)).collect();
        let mut r = rng::stream(seed, &["toy-embedder", name, "text"]);
        let text_proj = (0..dim * (TEXT_DIM + 1)).map(|_| StandardNormal.sample(&mut r)).collect();
        Self {
            name: name.to_string(),
            seed,
            dim,
            image_proj,
            text_proj,
        }
    }

    fn project(&self, proj: &[f64], feats: &[f64]) -> Vec<f64> {
        let k = feats.len();
        let out = (0..self.dim)
            .map(|i| proj[i * k..(i + 1) * k].iter().zip(feats).map(|(p, f)| p * f).sum())
            .collect();
        normalized(out)
    }

    pub fn image_features(image: &Tensor<f64>) -> Vec<f64> {
        let &[h, w] = image.shape() else {
            panic!("image must be [H, W], got {:?}", image.shape());
        };
        let x = image.data();
        let n = (h * w) as f64;
        let mean = x.iter().sum::<f64>() / n;
        let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let mut gx = 0.0;
        let mut gy = 0.0;
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w {
                    gx += (x[i * w + j + 1] - x[i * w + j]).abs();
                }
                if i + 1 < h {
                    gy += (x[(i + 1) * w + j] - x[i * w + j]).abs();
                }
            }
        }
        let bright = x.iter().filter(|&&v| v > 0.5).count() as f64 / n;
        let mut grid = [0.0; GRID * GRID];
        let mut count = [0usize; GRID * GRID];
        for i in 0..h {
            for j in 0..w {
                let cell = (i * GRID / h) * GRID + j * GRID / w;
                grid[cell] += x[i * w + j] - 0.5;
                count[cell] += 1;
            }
        }
        // The leading constant keeps blank images off the origin.
        let mut f = vec![1.0, mean - 0.5, std, gx / n, gy / n, bright - 0.5];
        f.extend(grid.iter().zip(count).map(|(s, c)| if c > 0 { 2.0 * s / c as f64 } else { 0.0 }));
        f
    }
}

impl Embedder for ToyEmbedder {
    fn tag(&self) -> String {
        format!("toy:{}:seed{}:d{}", self.name, self.seed, self.dim)
    }

    fn embed_image(&self, image: &Tensor<f64>) -> Vec<f64> {
        self.project(&self.image_proj, &Self::image_features(image))
    }

    fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut f = vec![0.0; TEXT_DIM + 1];
        f[0] = 0.25;
        for tok in tokenize(text) {
            for (a, b) in f[1..].iter_mut().zip(token_vector(token_id(&tok))) {
                *a += b;
            }
        }
        self.project(&self.text_proj, &f)
    }
}

/// `offset + scale * cos(image, caption)` under a wrapped embedder.
pub struct ToyPreferenceScorer<E> {
    pub embedder: E,
    pub offset: f64,
    pub scale: f64,
}

impl<E: Embedder> ToyPreferenceScorer<E> {
    pub fn new(embedder: E) -> Self {
        Self {
            embedder,
            offset: 20.0,
            scale: 5.0,
        }
    }
}

impl<E: Embedder> PreferenceScorer for ToyPreferenceScorer<E> {
    fn tag(&self) -> String {
        format!("affine({},{})[{}]", self.offset, self.scale, self.embedder.tag())
    }

    fn score_image(&self, image: &Tensor<f64>, caption: &str) -> f64 {
        let c = super::cosine(&self.embedder.embed_image(image), &self.embedder.embed_text(caption));
        self.offset + self.scale * c
    }
}
