use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

fn vedit(run: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vedit"))
        .args(args)
        .env("VEDIT_RUN_ROOT", run)
        .output()
        .expect("binary runs")
}

fn ok(run: &Path, args: &[&str]) -> String {
    let o = vedit(run, args);
    assert!(o.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// Everything shrunk to a 3-frame, 16-pixel model.
fn tiny_config(dir: &Path) -> PathBuf {
    let model = json!({"hidden": 8, "layers": 2, "time_dim": 8, "ffn_mult": 2, "epm_frames": 3, "epm_hidden": 8, "init_seed": 11});
    let grid = json!({"steps": 3});
    let cfg = json!({
        "curation": {
            "seed": 3, "side": 16, "frames": 3, "train_images": 8, "sources": 4, "iters": 2,
            "model": model, "train": {"steps": 30}, "grid": grid,
            "image_filter": {"weights": {"dino_sim": 1, "clip_img_sim": 1, "ssim": 1, "clip_dir": 1, "clip_sim": 1, "aesthetic": 1}},
            "video_filter": {"weights": {"viclip_out": 1, "viclip_dir": 1, "pick_score": 1, "clip_frame": 1, "clip_text": 1}}
        },
        "train": {"train": {"steps": 10, "batch_size": 2}},
        "refine": {
            "clips": 3, "frames": 3, "side": 16, "iters": 2, "grid": grid, "train": {"steps": 10, "batch_size": 2},
            "video_filter": {"weights": {"viclip_out": 1, "viclip_dir": 1, "pick_score": 1, "clip_frame": 1, "clip_text": 1}}
        },
        "edit": {"guidance": {"steps": 3}, "window": {"window": 3}},
        "eval": {"clips": 3, "frames": 5, "side": 16, "guidance": {"steps": 3}, "window": {"window": 3}}
    });
    let p = dir.join("tiny.json");
    std::fs::write(&p, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn eval_without_edited_set_prints_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vedit(tmp.path(), &["eval"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("--edited") && err.contains("Usage"), "{err}");
}

#[test]
fn unknown_config_keys_are_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"refine": {"roundz": 2}}"#).unwrap();
    let o = vedit(tmp.path(), &["--config", bad.to_str().unwrap(), "curate"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field"));
    let o = vedit(tmp.path(), &["--set", "eval.bogus=1", "eval", "--edited", "x"]);
    assert!(!o.status.success());
    let o = vedit(tmp.path(), &["edit", "--in", "missing.stack", "--instr", "x", "--out", "o.stack"]);
    assert!(!o.status.success());
}

#[test]
fn schema_document_is_current() {
    let tmp = tempfile::tempdir().unwrap();
    let live: serde_json::Value = serde_json::from_str(&ok(tmp.path(), &["schema"])).unwrap();
    let doc = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/config.schema.json");
    let checked_in: serde_json::Value = serde_json::from_slice(&std::fs::read(doc).unwrap()).unwrap();
    assert_eq!(live, checked_in, "regenerate with `vedit schema > docs/config.schema.json`");
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = tiny_config(tmp.path());
    let c = cfg.to_str().unwrap();

    ok(&run, &["--config", c, "curate"]);
    assert!(run.join("checkpoints/image-editor.ckpt").exists());
    assert!(run.join("invocations/curate.json").exists());
    ok(&run, &["--config", c, "train"]);
    assert!(run.join("checkpoints/video-editor.ckpt").exists());

    // Same clip, instruction and seed: identical bytes.
    let clip = std::fs::read_dir(run.join("dataset")).unwrap().map(|e| e.unwrap().path()).find(|p| p.is_dir()).unwrap();
    let src = clip.join("source.stack");
    let out = |n: &str| tmp.path().join(n).to_str().unwrap().to_string();
    for name in ["a.stack", "b.stack"] {
        ok(&run, &["--config", c, "edit", "--in", src.to_str().unwrap(), "--instr", "make it snow", "--seed", "7", "--out", &out(name)]);
    }
    assert_eq!(std::fs::read(out("a.stack")).unwrap(), std::fs::read(out("b.stack")).unwrap());
    ok(&run, &["--config", c, "edit", "--in", src.to_str().unwrap(), "--instr", "make it snow", "--seed", "8", "--out", &out("c.stack"), "--heatmap", &out("h.png")]);
    assert_ne!(std::fs::read(out("a.stack")).unwrap(), std::fs::read(out("c.stack")).unwrap());
    assert!(std::fs::read(out("h.png")).unwrap().starts_with(b"\x89PNG"));

    let log = ok(&run, &["--config", c, "refine", "--rounds", "2"]);
    assert_eq!(log.matches(": Done,").count(), 2, "{log}");
    for r in 0..2 {
        let s: serde_json::Value =
            serde_json::from_slice(&std::fs::read(run.join(format!("refine/round-{r:02}/state.json"))).unwrap()).unwrap();
        assert_eq!(s["phase"], "done");
    }

    ok(&run, &["--config", c, "edit", "--benchmark", "--out", &out("bench")]);
    ok(&run, &["--config", c, "eval", "--edited", &out("bench"), "--method", "tiny"]);
    let summary = std::fs::read_to_string(run.join("eval/tiny/summary.csv")).unwrap();
    assert!(summary.starts_with("method,dataset,evaluated,viclip_out"));
    assert!(summary.lines().nth(1).unwrap().starts_with("tiny,toy,3,"));
    ok(&run, &["--config", c, "eval", "--ablation"]);
    assert_eq!(std::fs::read_to_string(run.join("eval/ablation/ablation.csv")).unwrap().lines().count(), 5);
    let merged = out("merged");
    ok(&run, &["report", run.join("eval/tiny/report.json").to_str().unwrap(), run.join("eval/ablation/report.json").to_str().unwrap(), "--out", &merged]);
    assert_eq!(std::fs::read_to_string(tmp.path().join("merged/summary.csv")).unwrap().lines().count(), 6);

    let traj = std::fs::read_dir(run.join("curation/samples")).unwrap().map(|e| e.unwrap().path().join("trajectory.vtraj")).find(|p| p.exists()).unwrap();
    let info = ok(&run, &["inspect-trajectory", traj.to_str().unwrap(), "--ckpt", run.join("checkpoints/image-editor.ckpt").to_str().unwrap()]);
    assert!(info.contains("\"steps\": 3") && info.contains("topology matches"), "{info}");
}
