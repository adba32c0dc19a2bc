mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use vedit::corpus::default_templates;
use vedit::denoiser::EpmMode;
use vedit::eval::*;
use vedit::ffg::{first_frame_guided_edit, VideoOptions};
use vedit::guidance::GuidanceConfig;
use vedit::latent::{latent_to_video, video_to_latent};
use vedit::metrics::{MetricSuite, VIDEO_METRICS};
use vedit::report::*;
use vedit::rng;
use vedit::tensor::Tensor;
use vedit::text::TextEmbedding;

use common::{jitter, tiny};

fn g() -> GuidanceConfig {
    GuidanceConfig { steps: 3, seed: 5, ..GuidanceConfig::default() }
}

#[test]
fn window_spans_examples() {
    let w = |window, stride| WindowConfig { window, stride: Some(stride) };
    assert_eq!(window_spans(48, w(32, 16)).unwrap(), vec![0..32, 16..48]);
    assert_eq!(window_spans(48, WindowConfig { window: 32, stride: None }).unwrap(), vec![0..32, 16..48]);
    assert_eq!(window_spans(12, w(4, 4)).unwrap(), vec![0..4, 4..8, 8..12]);
    // The last window is pinned to the end.
    assert_eq!(window_spans(10, w(4, 4)).unwrap(), vec![0..4, 4..8, 6..10]);
    assert_eq!(window_spans(5, w(8, 4)).unwrap(), vec![0..5]);
    assert!(window_spans(8, w(4, 5)).is_err());
    assert!(window_spans(8, w(0, 1)).is_err());
    assert!(window_spans(0, w(4, 2)).is_err());
}

#[test]
fn overlap_is_a_linear_crossfade() {
    let spans = window_spans(48, WindowConfig { window: 32, stride: Some(16) }).unwrap();
    let w = blend_weights(48, &spans);
    for t in 0..16 {
        assert_eq!((w[0][t], w[1][t]), (1.0, 0.0));
        assert_eq!((w[0][t + 32], w[1][t + 32]), (0.0, 1.0));
    }
    // Inside the overlap the first window fades out in equal steps.
    let d: Vec<f64> = (16..31).map(|t| w[0][t] - w[0][t + 1]).collect();
    for x in &d {
        assert!((x - d[0]).abs() < 1e-12 && *x > 0.0);
    }
}

proptest! {
    #[test]
    fn blend_weights_partition_unity(len in 1usize..80, window in 1usize..40, stride_frac in 0.0f64..1.0) {
        let stride = 1 + ((window - 1) as f64 * stride_frac) as usize;
        let spans = window_spans(len, WindowConfig { window, stride: Some(stride) }).unwrap();
        let w = blend_weights(len, &spans);
        // Exhaustive accounting: every frame covered, weights sum to one,
        // weights vanish outside spans, single coverage means weight 1.
        for t in 0..len {
            let covering: Vec<usize> = (0..spans.len()).filter(|&k| spans[k].contains(&t)).collect();
            prop_assert!(!covering.is_empty());
            let sum: f64 = w.iter().map(|wk| wk[t]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "frame {} sums to {}", t, sum);
            for (k, wk) in w.iter().enumerate() {
                prop_assert!(wk[t] >= 0.0);
                if !covering.contains(&k) { prop_assert_eq!(wk[t], 0.0); }
            }
            if covering.len() == 1 { prop_assert_eq!(w[covering[0]][t], 1.0); }
        }
        for r in &spans { prop_assert_eq!(r.len(), window.min(len)); }
    }
}

fn clip(frames: usize, seed: u64) -> Tensor<f64> {
    Tensor::uniform(&[frames, 8, 8], 0.0, 1.0, &mut rng::from_seed(seed))
}

#[test]
fn disjoint_windows_concatenate_independent_edits() {
    let mut m = tiny::<f64>(4);
    jitter(&mut m, 0.05, 3);
    let v = clip(8, 1);
    let opts = VideoOptions::default();
    let cfg = WindowConfig { window: 4, stride: Some(4) };
    let out = sliding_window_edit(&m, &v, "invert the colors", &g(), opts, cfg).unwrap();
    assert_eq!(out.video.shape(), v.shape());
    let text = TextEmbedding::encode("invert the colors");
    for (k, r) in out.spans.iter().enumerate() {
        let gk = g().with_seed(rng::derive_seed(g().seed, &["window", &k.to_string()]));
        let src = video_to_latent(&v.narrow(0, r.start, 4).unwrap()).unwrap();
        let (e, _) = first_frame_guided_edit(&m, &src, &text, &gk, opts).unwrap();
        assert_eq!(latent_to_video(&e.latents).unwrap(), out.video.narrow(0, r.start, 4).unwrap());
    }
    assert_eq!(out.scores.len(), 2);
}

#[test]
fn overlapping_windows_keep_length_and_range() {
    let mut m = tiny::<f64>(4);
    jitter(&mut m, 0.05, 4);
    let v = clip(10, 2);
    let cfg = WindowConfig { window: 4, stride: None };
    let out = sliding_window_edit(&m, &v, "make it snow", &g(), VideoOptions::default(), cfg).unwrap();
    assert_eq!(out.spans.len(), 4);
    assert_eq!(out.video.shape(), &[10, 8, 8]);
    assert!(out.video.data().iter().all(|x| (0.0..=1.0).contains(x)));
    // A window longer than the clip is one whole-clip window.
    let m3 = tiny::<f64>(3);
    let short = sliding_window_edit(&m3, &clip(3, 3), "x", &g(), VideoOptions::default(), WindowConfig { window: 8, stride: None }).unwrap();
    assert_eq!(short.spans, vec![0..3]);
}

fn suite() -> MetricSuite {
    MetricSuite::toy(1)
}

fn sample(id: &str, seed: u64) -> EvalSample<f64> {
    EvalSample {
        id: id.into(),
        source: clip(3, seed),
        source_caption: "a white circle on the left".into(),
        instruction: "make the circle bigger".into(),
        target_caption: "a big white circle on the left".into(),
    }
}

#[test]
fn unchanged_video_with_unchanged_caption_has_zero_direction() {
    let mut s = sample("a", 1);
    s.target_caption = s.source_caption.clone();
    let edited = BTreeMap::from([("a".to_string(), s.source.clone())]);
    let r = eval_benchmark("identity", "toy", &edited, &[s], &suite(), "cfg").unwrap();
    assert_eq!(r.rows[0].means["viclip_dir"], 0.0);
    assert_eq!(r.embedder_tag, suite().tag());
}

#[test]
fn means_are_hand_averages_and_missing_pairs_are_skipped() {
    let refs = vec![sample("a", 1), sample("b", 2), sample("c", 3)];
    let edited = BTreeMap::from([
        ("a".to_string(), clip(3, 11)),
        ("b".to_string(), clip(3, 12)),
        ("z".to_string(), clip(3, 13)),
    ]);
    let r = eval_benchmark("m", "toy", &edited, &refs, &suite(), "cfg").unwrap();
    let row = &r.rows[0];
    assert_eq!(row.evaluated, 2);
    for m in VIDEO_METRICS {
        let a = suite().video_scores(&refs[0].source, &edited["a"], &refs[0].source_caption, &refs[0].target_caption).unwrap();
        let b = suite().video_scores(&refs[1].source, &edited["b"], &refs[1].source_caption, &refs[1].target_caption).unwrap();
        let hand = (a.get(m).unwrap() + b.get(m).unwrap()) / 2.0;
        assert!((row.means[m] - hand).abs() < 1e-15, "{m}");
        assert!(row.means[m].is_finite());
    }
    let skipped: Vec<&str> = row.samples.iter().filter(|s| s.skipped.is_some()).map(|s| s.id.as_str()).collect();
    assert_eq!(skipped, ["c", "z"]);
    let csv = String::from_utf8(samples_csv(&r).unwrap()).unwrap();
    assert!(csv.contains("skipped: no edited video") && csv.contains("skipped: no reference"));
}

#[test]
fn toy_benchmark_and_ablation_reproduce_bit_exact() {
    let mut m = tiny::<f32>(4);
    jitter(&mut m, 0.05, 6);
    let set = benchmark_set::<f32>(12, 6, 8, 9, &default_templates()).unwrap();
    assert_eq!(set.len(), 12);
    let win = WindowConfig { window: 4, stride: None };
    let run = || {
        let edited = edit_set(&m, &set, &g(), VideoOptions::default(), win).unwrap();
        eval_benchmark("tiny", "toy", &edited, &set, &suite(), "cfg").unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(summary_csv(&a).unwrap(), summary_csv(&b).unwrap());

    let small = &set[..2];
    let grid = ablation_grid(&m, "toy", small, &g(), win, &suite(), "cfg").unwrap();
    assert_eq!(grid.rows.len(), 4);
    assert!(grid.rows.iter().all(|r| r.evaluated == 2 && r.means.len() == 5));
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&grid, dir.path()).unwrap();
    assert_eq!(files.len(), 4 + VIDEO_METRICS.len());
    let table = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(table.lines().nth(4).unwrap().starts_with("toy,on,on,"));
    let svg = std::fs::read_to_string(dir.path().join("plots/clip_frame.svg")).unwrap();
    assert_eq!(svg.matches("<rect").count(), 4);
    assert!(ablation_csv(&a).unwrap().is_none());
}

#[test]
fn heatmap_of_learned_scores() {
    let mut m = tiny::<f64>(4);
    jitter(&mut m, 0.05, 7);
    let out = sliding_window_edit(&m, &clip(4, 5), "x", &g(), VideoOptions { sma: true, epm: EpmMode::Learned }, WindowConfig { window: 4, stride: None }).unwrap();
    let (mat, imp) = mean_scores(&out.scores[0]).unwrap();
    assert_eq!((mat.len(), imp.len()), (4, 4));
    for j in 0..4 {
        let col = (0..4).map(|i| mat[i][j]).sum::<f64>() / 4.0;
        assert!((col - imp[j]).abs() < 1e-12);
    }
    let png = heatmap_png(&mat, &imp, 5).unwrap();
    let img = image::load_from_memory(&png).unwrap();
    assert_eq!((img.width(), img.height()), (20, 30));
    assert!(heatmap_png(&[], &[], 5).is_err());
}
