use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vedit::metrics::*;
use vedit::tensor::Tensor;

/// Looks embeddings up by the image's top-left pixel (as a key in hundredths)
/// or by caption; every output is multiplied by `scale`.
struct Stub {
    images: HashMap<i64, Vec<f64>>,
    texts: HashMap<String, Vec<f64>>,
    scale: f64,
}

impl Stub {
    fn key(img: &Tensor<f64>) -> i64 {
        (img.data()[0] * 100.0).round() as i64
    }
}

impl Embedder for Stub {
    fn tag(&self) -> String {
        "stub".into()
    }
    fn embed_image(&self, image: &Tensor<f64>) -> Vec<f64> {
        self.images[&Self::key(image)].iter().map(|x| x * self.scale).collect()
    }
    fn embed_text(&self, text: &str) -> Vec<f64> {
        self.texts[text].iter().map(|x| x * self.scale).collect()
    }
}

fn flat(v: f64, h: usize, w: usize) -> Tensor<f64> {
    Tensor::full(&[h, w], v)
}

fn video(vals: &[f64]) -> Tensor<f64> {
    let mut d = Vec::new();
    for &v in vals {
        d.extend(std::iter::repeat_n(v, 64));
    }
    Tensor::new(&[vals.len(), 8, 8], d).unwrap()
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    normalized((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rand_image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[h, w], |_| r.random_range(0.0..1.0))
}

/// Window statistics computed in two passes with explicit window copies.
fn naive_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (h, w) = (a.dim(0), a.dim(1));
    let r = 3i64;
    let mut g = vec![vec![0.0; 7]; 7];
    let mut gs = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as i64 - r, j as i64 - r);
            *v = (-((di * di + dj * dj) as f64) / (2.0 * 1.5 * 1.5)).exp();
            gs += *v;
        }
    }
    let mut acc = Vec::new();
    for i in 0..=h - 7 {
        for j in 0..=w - 7 {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            let mut ws = Vec::new();
            for di in 0..7 {
                for dj in 0..7 {
                    xs.push(a.at(&[i + di, j + dj]));
                    ys.push(b.at(&[i + di, j + dj]));
                    ws.push(g[di][dj] / gs);
                }
            }
            let mx: f64 = xs.iter().zip(&ws).map(|(x, w)| x * w).sum();
            let my: f64 = ys.iter().zip(&ws).map(|(y, w)| y * w).sum();
            let vx: f64 = xs.iter().zip(&ws).map(|(x, w)| w * (x - mx) * (x - mx)).sum();
            let vy: f64 = ys.iter().zip(&ws).map(|(y, w)| w * (y - my) * (y - my)).sum();
            let cxy: f64 = xs.iter().zip(&ys).zip(&ws).map(|((x, y), w)| w * (x - mx) * (y - my)).sum();
            acc.push(((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2)));
        }
    }
    acc.iter().sum::<f64>() / acc.len() as f64
}

#[test]
fn ssim_self_similarity_and_shape_errors() {
    let x = rand_image(1, 16, 12);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
    assert!(ssim(&x, &rand_image(2, 12, 16)).is_err());
    assert!(ssim(&flat(0.1, 6, 6), &flat(0.1, 6, 6)).is_err());
}

#[test]
fn ssim_of_inverted_half_image_matches_naive_and_is_low() {
    let x = Tensor::from_fn(&[16, 16], |i| if i % 16 < 8 { 0.0 } else { 1.0 });
    let inv = x.map(|v| 1.0 - v);
    let s = ssim(&x, &inv).unwrap();
    assert!((s - naive_ssim(&x, &inv)).abs() < 1e-9, "{s}");
    assert!(s < 0.1, "{s}");
    let (a, b) = (rand_image(3, 11, 13), rand_image(4, 11, 13));
    assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-9);
}

#[test]
fn ssim_of_constant_images_reduces_to_luminance() {
    let s = ssim(&flat(0.2, 10, 10), &flat(0.8, 10, 10)).unwrap();
    let expect = ((2.0 * 0.16 + C1) * C2) / ((0.04 + 0.64 + C1) * C2);
    assert!((s - expect).abs() < 1e-9, "{s} vs {expect}");
}

#[test]
fn gaussian_window_is_normalised() {
    let w = gaussian_window();
    let s: f64 = w.iter().flatten().sum();
    assert!((s - 1.0).abs() < 1e-12);
    assert_eq!(w[0][3], w[3][0]);
}

proptest! {
    #[test]
    fn ssim_is_symmetric(sa in 0u64..1000, sb in 0u64..1000) {
        let (a, b) = (rand_image(sa, 9, 10), rand_image(sb, 9, 10));
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn cosine_metrics_stay_in_range_and_ignore_positive_scale(seed in 0u64..500, scale in 0.01f64..100.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mk = |scale: f64, r: &mut ChaCha8Rng| Stub {
            images: (0..4).map(|k| (k * 10, (0..6).map(|_| r.random_range(-1.0..1.0)).collect())).collect(),
            texts: ["a", "b"].iter().map(|t| (t.to_string(), (0..6).map(|_| r.random_range(-1.0..1.0)).collect())).collect(),
            scale,
        };
        let e1 = mk(1.0, &mut r);
        let e2 = Stub { images: e1.images.clone(), texts: e1.texts.clone(), scale };
        let v_in = video(&[0.0, 0.1]);
        let v_out = video(&[0.2, 0.3, 0.1]);
        let (a, b) = (flat(0.0, 8, 8), flat(0.3, 8, 8));
        let pairs = [
            (clip_dir(&a, &b, "a", "b", &e1).unwrap(), clip_dir(&a, &b, "a", "b", &e2).unwrap()),
            (clip_frame(&v_out, &e1, FramePairs::All).unwrap(), clip_frame(&v_out, &e2, FramePairs::All).unwrap()),
            (clip_text(&v_out, "b", &e1).unwrap(), clip_text(&v_out, "b", &e2).unwrap()),
            (viclip_out(&v_out, "b", &e1).unwrap(), viclip_out(&v_out, "b", &e2).unwrap()),
            (viclip_dir(&v_in, &v_out, "a", "b", &e1).unwrap(), viclip_dir(&v_in, &v_out, "a", "b", &e2).unwrap()),
            (dino_sim(&a, &b, &e1).unwrap(), dino_sim(&a, &b, &e2).unwrap()),
            (clip_img_sim(&a, &b, &e1).unwrap(), clip_img_sim(&a, &b, &e2).unwrap()),
        ];
        for (x, y) in pairs {
            prop_assert!((-1.0..=1.0).contains(&x));
            prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }
}

#[test]
fn clip_dir_conventions_and_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let (i0, i1, t0, t1) = (unit(&mut r, 8), unit(&mut r, 8), unit(&mut r, 8), unit(&mut r, 8));
    let e = Stub {
        images: HashMap::from([(10, i0.clone()), (20, i1.clone())]),
        texts: HashMap::from([("src".to_string(), t0.clone()), ("tgt".to_string(), t1.clone())]),
        scale: 1.0,
    };
    let (a, b) = (flat(0.1, 8, 8), flat(0.2, 8, 8));
    assert_eq!(clip_dir(&a, &a, "src", "src", &e).unwrap(), 0.0);

    let di: Vec<f64> = i1.iter().zip(&i0).map(|(x, y)| x - y).collect();
    let dt: Vec<f64> = t1.iter().zip(&t0).map(|(x, y)| x - y).collect();
    let expect = dot(&di, &dt) / (dot(&di, &di).sqrt() * dot(&dt, &dt).sqrt());
    assert!((clip_dir(&a, &b, "src", "tgt", &e).unwrap() - expect).abs() < 1e-12);

    // Image delta identical to the text delta.
    let e = Stub {
        images: HashMap::from([(10, t0.clone()), (20, t1.clone())]),
        texts: e.texts,
        scale: 1.0,
    };
    assert!((clip_dir(&a, &b, "src", "tgt", &e).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn clip_frame_pairs() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let es: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut r, 5)).collect();
    let e = Stub {
        images: HashMap::from([(0, es[0].clone()), (10, es[1].clone()), (20, es[2].clone())]),
        texts: HashMap::new(),
        scale: 1.0,
    };
    let v = video(&[0.0, 0.1, 0.2]);
    let all = (dot(&es[0], &es[1]) + dot(&es[0], &es[2]) + dot(&es[1], &es[2])) / 3.0;
    assert!((clip_frame(&v, &e, FramePairs::All).unwrap() - all).abs() < 1e-12);
    let cons = (dot(&es[0], &es[1]) + dot(&es[1], &es[2])) / 2.0;
    assert!((clip_frame(&v, &e, FramePairs::Consecutive).unwrap() - cons).abs() < 1e-12);
    assert!((clip_frame(&video(&[0.1; 4]), &e, FramePairs::All).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(clip_frame(&video(&[0.2]), &e, FramePairs::All).unwrap(), 1.0);
}

#[test]
fn video_metrics_follow_definitions() {
    let toy = ToyEmbedder::new("clip", 3, 16);
    let v = Tensor::from_fn(&[3, 8, 8], |i| ((i * 7) % 11) as f64 / 10.0);
    assert_eq!(viclip_dir(&v, &v, "a cat", "a cat", &toy).unwrap(), 0.0);
    assert_eq!(viclip_dir(&v, &v, "a cat", "a dog", &toy).unwrap(), 0.0);

    let frames = frames_of(&v);
    let t = toy.embed_text("a dog");
    let ct: f64 = frames.iter().map(|f| dot(&toy.embed_image(f), &t)).sum::<f64>() / 3.0;
    assert!((clip_text(&v, "a dog", &toy).unwrap() - ct).abs() < 1e-12);

    let scorer = ToyPreferenceScorer::new(toy.clone());
    assert!((pick_score(&v, "a dog", &scorer).unwrap() - (20.0 + 5.0 * ct)).abs() < 1e-9);

    let mut mean = vec![0.0; 16];
    for f in &frames {
        mean.iter_mut().zip(toy.embed_image(f)).for_each(|(a, b)| *a += b);
    }
    let mean = normalized(mean);
    assert!((viclip_out(&v, "a dog", &toy).unwrap() - dot(&mean, &t)).abs() < 1e-12);
    assert!(clip_frame(&Tensor::<f64>::zeros(&[0, 8, 8]), &toy, FramePairs::All).is_err());
}

#[test]
fn toy_embedder_is_deterministic_and_unit_norm() {
    let a = ToyEmbedder::new("clip", 1, 32);
    let b = ToyEmbedder::new("clip", 1, 32);
    for img in [rand_image(1, 8, 8), flat(0.0, 8, 8), flat(1.0, 5, 7)] {
        let (x, y) = (a.embed_image(&img), b.embed_image(&img));
        assert_eq!(x, y);
        assert!((dot(&x, &x) - 1.0).abs() < 1e-9);
    }
    for t in ["make it snow", ""] {
        let x = a.embed_text(t);
        assert_eq!(x, b.embed_text(t));
        assert!((dot(&x, &x) - 1.0).abs() < 1e-9);
    }
    assert_ne!(a.embed_text("a"), ToyEmbedder::new("clip", 2, 32).embed_text("a"));
    assert_eq!(a.tag(), b.tag());
}

#[test]
fn suite_produces_full_score_vectors() {
    let suite = MetricSuite::toy(0);
    let (s, t) = (rand_image(1, 16, 16), rand_image(2, 16, 16));
    let sv = suite
        .image_scores(&ImageEdit {
            source: &s,
            edited: &t,
            source_caption: "a bright circle",
            target_caption: "a dark circle",
            instruction: "invert the colors",
        })
        .unwrap();
    assert_eq!(sv.scores.len(), 6);
    let v = Tensor::from_fn(&[2, 8, 8], |i| (i % 5) as f64 / 4.0);
    let vv = suite.video_scores(&v, &v, "x", "y").unwrap();
    assert_eq!(vv.scores.keys().collect::<Vec<_>>().len(), 5);
    assert_eq!(vv.get("viclip_dir"), Some(0.0));
    assert!(suite.tag().contains("toy:clip"));
}

fn sv(vals: &[f64]) -> ScoreVector {
    ScoreVector::new(Stage::Video, VIDEO_METRICS.iter().map(|m| m.to_string()).zip(vals.iter().copied()).collect()).unwrap()
}

/// Exhaustive recomputation: explicit normalisation and a first-maximum scan.
fn oracle_best(c: &[ScoreVector], w: &BTreeMap<String, f64>) -> (Vec<f64>, usize) {
    let mut totals = vec![0.0; c.len()];
    for m in VIDEO_METRICS {
        let col: Vec<f64> = c.iter().map(|x| x.scores[m]).collect();
        let lo = col.iter().cloned().fold(f64::MAX, f64::min);
        let hi = col.iter().cloned().fold(f64::MIN, f64::max);
        for i in 0..c.len() {
            let n = if hi == lo { 0.5 } else { (col[i] - lo) / (hi - lo) };
            totals[i] += w[m] * n;
        }
    }
    let best = (0..c.len()).find(|&i| (0..c.len()).all(|j| totals[j] <= totals[i])).unwrap();
    (totals, best)
}

#[test]
fn selection_degenerate_dominant_and_errors() {
    let w = Stage::Video.uniform_weights();
    let one = normalize_and_select(&[sv(&[0.1, 0.2, 20.0, 0.9, 0.3])], &w).unwrap();
    assert_eq!(one.best, 0);
    assert!(one.normalized[0].values().all(|&v| v == 0.5));

    let cands = vec![sv(&[0.1, 0.1, 19.0, 0.5, 0.2]), sv(&[0.3, 0.2, 21.0, 0.9, 0.3]), sv(&[0.2, 0.0, 20.0, 0.6, 0.1])];
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let w: BTreeMap<String, f64> = VIDEO_METRICS.iter().map(|m| (m.to_string(), r.random_range(0.01..1.0))).collect();
        assert_eq!(normalize_and_select(&cands, &w).unwrap().best, 1);
    }
    let tie = normalize_and_select(&[sv(&[1.0; 5]), sv(&[1.0; 5])], &w).unwrap();
    assert_eq!(tie.best, 0);

    assert!(normalize_and_select(&[], &w).is_err());
    let zero: BTreeMap<String, f64> = VIDEO_METRICS.iter().map(|m| (m.to_string(), 0.0)).collect();
    assert!(normalize_and_select(&cands, &zero).is_err());
    let neg = BTreeMap::from([("pick_score".to_string(), -1.0)]);
    assert!(normalize_and_select(&cands, &neg).is_err());
    let unknown = BTreeMap::from([("ssim".to_string(), 1.0)]);
    assert!(normalize_and_select(&cands, &unknown).is_err());
    assert!(ScoreVector::new(Stage::Video, BTreeMap::new()).is_err());
}

#[test]
fn selection_matches_exhaustive_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let cands: Vec<ScoreVector> =
            (0..30).map(|_| sv(&(0..5).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<_>>())).collect();
        let w: BTreeMap<String, f64> = VIDEO_METRICS.iter().map(|m| (m.to_string(), r.random_range(0.0..1.0))).collect();
        let sel = normalize_and_select(&cands, &w).unwrap();
        let (totals, best) = oracle_best(&cands, &w);
        assert_eq!(sel.best, best);
        for (a, b) in sel.totals.iter().zip(&totals) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn selection_ignores_increasing_affine_rescaling(
        raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 2..12),
        gains in prop::collection::vec(0.1f64..10.0, 5),
        shifts in prop::collection::vec(-5.0f64..5.0, 5),
    ) {
        let w = Stage::Video.uniform_weights();
        let a: Vec<ScoreVector> = raw.iter().map(|r| sv(r)).collect();
        let b: Vec<ScoreVector> = raw
            .iter()
            .map(|r| sv(&r.iter().enumerate().map(|(k, v)| gains[k] * v + shifts[k]).collect::<Vec<_>>()))
            .collect();
        let (sa, sb) = (normalize_and_select(&a, &w).unwrap(), normalize_and_select(&b, &w).unwrap());
        // Rescaling perturbs totals by rounding only; compare picks where the win is clear.
        let mut sorted = sa.totals.clone();
        sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
        if sorted[0] - sorted[1] > 1e-9 {
            prop_assert_eq!(sa.best, sb.best);
        }
    }
}

#[test]
fn threshold_filter_cases() {
    let cands: Vec<ScoreVector> = (0..10).map(|i| sv(&[i as f64 / 10.0, 0.5, 20.0 + i as f64, 1.0 - i as f64 / 10.0, 0.0])).collect();
    assert_eq!(threshold_filter(&cands, &BTreeMap::new()), (0..10).collect::<Vec<_>>());
    assert!(threshold_filter(&cands, &BTreeMap::from([("viclip_out".to_string(), 5.0)])).is_empty());
    let th = BTreeMap::from([("viclip_out".to_string(), 0.25), ("clip_frame".to_string(), 0.35)]);
    let oracle: Vec<usize> = (0..10)
        .filter(|&i| cands[i].scores["viclip_out"] >= 0.25 && cands[i].scores["clip_frame"] >= 0.35)
        .collect();
    assert_eq!(threshold_filter(&cands, &th), oracle);
    assert_eq!(oracle, vec![3, 4, 5, 6]);
}
