use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use vedit::checkpoint::{load_checkpoint, save_checkpoint};
use vedit::config::RunConfig;
use vedit::corpus::default_templates;
use vedit::curation::run_curation;
use vedit::dataset::read_dataset;
use vedit::eval::{ablation_grid, benchmark_set, edit_set, eval_benchmark, sliding_window_edit, EvalReport, EvalSample};
use vedit::fsutil::write_atomic;
use vedit::metrics::MetricSuite;
use vedit::refine::{round_dir, run_refine, TrainingMode};
use vedit::report::{emit_report, heatmap_png, mean_scores};
use vedit::train::train;
use vedit::trajectory::read_trajectory;
use vedit::video_io::{import_png_frames, read_video, write_video};
use vedit::Real;

#[derive(Parser)]
#[command(name = "vedit", version, about = "Instruction-guided video editing at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run directory holding every artifact.
    #[arg(long, global = true, env = "VEDIT_RUN_ROOT", default_value = "runs/default")]
    run_dir: PathBuf,
    /// JSON configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set refine.rounds=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=JSON")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the image editor and curate synthetic video edit triples.
    Curate {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune the editor on a curated dataset as a video model.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Edit one clip, or the whole benchmark set with `--benchmark`.
    Edit {
        /// Frame-stack video to edit.
        #[arg(long = "in", conflicts_with_all = ["png", "benchmark"])]
        input: Option<PathBuf>,
        /// Import greyscale PNG frames instead of a frame stack.
        #[arg(long, num_args = 1.., conflicts_with = "benchmark")]
        png: Vec<PathBuf>,
        #[arg(long, required_unless_present = "benchmark")]
        instr: Option<String>,
        #[arg(long)]
        benchmark: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Output stack, or output directory with `--benchmark`.
        #[arg(long)]
        out: PathBuf,
        /// Also write a PNG heatmap of the first window's frame-relationship scores.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Iterative refinement on real-source clips.
    Refine {
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        real_only: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score an edited benchmark set (directory of `{id}.stack`).
    Eval {
        #[arg(long, required_unless_present = "ablation")]
        edited: Option<PathBuf>,
        #[arg(long, default_value = "model")]
        method: String,
        #[arg(long, default_value = "toy")]
        dataset: String,
        /// Run the SMA × EPM grid on `--ckpt` instead of scoring a set.
        #[arg(long)]
        ablation: bool,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge report.json files and emit CSV tables and plots.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a trajectory container, optionally against a checkpoint.
    InspectTrajectory {
        path: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Print the configuration JSON schema.
    Schema,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let Common { run_dir, config, overrides } = cli.common;
    let mut overrides = overrides;
    let mut seed_override = |section: &str, seed: Option<u64>| {
        if let Some(s) = seed {
            overrides.push(format!("{section}.seed={s}"));
        }
    };
    match &cli.cmd {
        Cmd::Curate { seed } => seed_override("curation", *seed),
        Cmd::Train { seed, .. } => seed_override("train.train", *seed),
        Cmd::Edit { seed, .. } => seed_override("edit.guidance", *seed),
        Cmd::Refine { seed, rounds, real_only, .. } => {
            seed_override("refine", *seed);
            if let Some(r) = rounds {
                overrides.push(format!("refine.rounds={r}"));
            }
            if *real_only {
                overrides.push("refine.mode=\"real_only\"".into());
            }
        }
        _ => {}
    }
    if matches!(cli.cmd, Cmd::Schema) {
        println!("{}", serde_json::to_string_pretty(&RunConfig::schema())?);
        return Ok(());
    }
    let cfg = RunConfig::load(config.as_deref(), &overrides)?;
    let name = command_name(&cli.cmd);
    record_invocation(&run_dir, name, &cfg)?;
    let ckpts = run_dir.join("checkpoints");

    match cli.cmd {
        Cmd::Curate { .. } => {
            let out = run_curation::<Real>(&cfg.curation, &run_dir)?;
            println!(
                "curated {} triples; image editor {} ({} step-2 selections)",
                out.dataset.len(),
                out.checkpoint_id,
                out.step2.summary.selected
            );
        }
        Cmd::Train { dataset, from, out, .. } => {
            let dataset = dataset.unwrap_or_else(|| run_dir.join("dataset"));
            let from = from.unwrap_or_else(|| ckpts.join("image-editor.ckpt"));
            let out = out.unwrap_or_else(|| ckpts.join("video-editor.ckpt"));
            let (mut model, _) = load_checkpoint::<Real>(&from).with_context(|| format!("loading {}", from.display()))?;
            let triples = read_dataset::<Real>(&dataset).with_context(|| format!("reading {}", dataset.display()))?;
            let samples = triples.iter().map(|t| t.to_train_sample()).collect::<vedit::Result<Vec<_>>>()?;
            let log = train(&mut model, &samples, &cfg.train.train)?;
            let id = save_checkpoint(&out, &model)?;
            write_atomic(&out.with_extension("train.json"), &serde_json::to_vec_pretty(&json!({
                "from": from, "dataset": dataset, "samples": samples.len(), "losses": log.losses,
            }))?)?;
            println!("trained on {} triples -> {} ({id})", samples.len(), out.display());
        }
        Cmd::Edit { input, png, instr, benchmark, ckpt, out, heatmap, .. } => {
            let ckpt = ckpt.unwrap_or_else(|| default_model(&ckpts));
            let (model, _) = load_checkpoint::<Real>(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let e = &cfg.edit;
            if benchmark {
                let set = benchmark_samples(&cfg)?;
                let edited = edit_set(&model, &set, &e.guidance, e.video, e.window)?;
                for (id, v) in &edited {
                    write_video(&out.join(format!("{id}.stack")), v)?;
                }
                println!("edited {} benchmark clips into {}", edited.len(), out.display());
            } else {
                let video = match (input, png.is_empty()) {
                    (Some(p), true) => read_video::<Real>(&p)?,
                    (None, false) => import_png_frames::<Real>(&png)?,
                    _ => bail!("edit needs --in <stack> or --png <frames...>"),
                };
                let instr = instr.expect("clap enforces --instr");
                let r = sliding_window_edit(&model, &video, &instr, &e.guidance, e.video, e.window)?;
                write_video(&out, &r.video)?;
                if let Some(h) = heatmap {
                    let sites = r.scores.first().filter(|s| !s.is_empty()).context(
                        "no relationship scores were produced (single frame or relationship scores off)",
                    )?;
                    let (m, imp) = mean_scores(sites)?;
                    write_atomic(&h, &heatmap_png(&m, &imp, 16)?)?;
                }
                println!("{} frames in {} window(s) -> {}", r.video.dim(0), r.spans.len(), out.display());
            }
        }
        Cmd::Refine { from, .. } => {
            let from = from.unwrap_or_else(|| default_model(&ckpts));
            let mut rc = cfg.refine.clone();
            if rc.mode == TrainingMode::Mixed && rc.synthetic_dataset.is_none() {
                rc.synthetic_dataset = Some(run_dir.join("dataset"));
            }
            let states = run_refine::<Real>(&from, &rc, &run_dir)?;
            for s in &states {
                println!(
                    "round {}: {:?}, {} selected, checkpoint {}",
                    s.round,
                    s.phase,
                    s.selected.unwrap_or(0),
                    s.checkpoint_out.as_deref().unwrap_or("-")
                );
            }
            if let Some(last) = states.last() {
                println!("final checkpoint: {}", round_dir(&run_dir, last.round).join("checkpoint.ckpt").display());
            }
        }
        Cmd::Eval { edited, method, dataset, ablation, ckpt, out } => {
            let set = benchmark_samples(&cfg)?;
            let suite = MetricSuite { frame_pairs: cfg.eval.frame_pairs, ..MetricSuite::toy(cfg.eval.embedder_seed) };
            let digest = cfg.digest();
            let report = if ablation {
                let ckpt = ckpt.unwrap_or_else(|| default_model(&ckpts));
                let (model, _) = load_checkpoint::<Real>(&ckpt)?;
                ablation_grid(&model, &dataset, &set, &cfg.eval.guidance, cfg.eval.window, &suite, &digest)?
            } else {
                let dir = edited.expect("clap enforces --edited");
                let edited = read_edited(&dir)?;
                eval_benchmark(&method, &dataset, &edited, &set, &suite, &digest)?
            };
            let out = out.unwrap_or_else(|| run_dir.join("eval").join(if ablation { "ablation" } else { method.as_str() }));
            emit_report(&report, &out)?;
            for r in &report.rows {
                println!("{} / {}: {} evaluated {:?}", r.method, r.dataset, r.evaluated, r.means);
            }
            println!("report written to {}", out.display());
        }
        Cmd::Report { inputs, out } => {
            let mut merged: Option<EvalReport> = None;
            for p in &inputs {
                let r: EvalReport = serde_json::from_slice(&std::fs::read(p).with_context(|| p.display().to_string())?)?;
                match &mut merged {
                    None => merged = Some(r),
                    Some(m) => m.extend(r)?,
                }
            }
            let files = emit_report(&merged.expect("at least one input"), &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Cmd::InspectTrajectory { path, ckpt } => {
            let t = read_trajectory::<Real>(&path)?;
            let shapes: BTreeMap<String, Vec<usize>> = t
                .entries
                .iter()
                .take(t.meta.layer_ids.len())
                .map(|((s, l), e)| (format!("step{s}/layer{l}"), e.keys.shape().to_vec()))
                .collect();
            println!("{}", serde_json::to_string_pretty(&json!({
                "digest": t.meta.digest,
                "steps": t.meta.steps,
                "layers": t.meta.layer_ids,
                "entries": t.entries.len(),
                "latents": t.latents.len(),
                "guidance": t.meta.guidance,
                "first_step_kv_shapes": shapes,
            }))?);
            if let Some(c) = ckpt {
                let (m, _) = load_checkpoint::<Real>(&c)?;
                if m.digest() != t.meta.digest {
                    bail!("trajectory was recorded by a different topology ({} vs {})", t.meta.digest, m.digest());
                }
                println!("topology matches {}", c.display());
            }
        }
        Cmd::Schema => unreachable!("handled above"),
    }
    Ok(())
}

fn command_name(c: &Cmd) -> &'static str {
    match c {
        Cmd::Curate { .. } => "curate",
        Cmd::Train { .. } => "train",
        Cmd::Edit { .. } => "edit",
        Cmd::Refine { .. } => "refine",
        Cmd::Eval { .. } => "eval",
        Cmd::Report { .. } => "report",
        Cmd::InspectTrajectory { .. } => "inspect-trajectory",
        Cmd::Schema => "schema",
    }
}

/// Records the resolved configuration and its digest; re-running a command
/// with that file as `--config` reproduces it.
fn record_invocation(run_dir: &Path, name: &str, cfg: &RunConfig) -> Result<()> {
    let body = json!({ "command": name, "config_digest": cfg.digest(), "config": cfg });
    write_atomic(&run_dir.join("invocations").join(format!("{name}.json")), &serde_json::to_vec_pretty(&body)?)?;
    Ok(())
}

fn default_model(ckpts: &Path) -> PathBuf {
    let video = ckpts.join("video-editor.ckpt");
    if video.exists() {
        video
    } else {
        ckpts.join("image-editor.ckpt")
    }
}

fn benchmark_samples(cfg: &RunConfig) -> Result<Vec<EvalSample<Real>>> {
    let e = &cfg.eval;
    Ok(benchmark_set(e.clips, e.frames, e.side, e.seed, &default_templates())?)
}

fn read_edited(dir: &Path) -> Result<BTreeMap<String, vedit::Tensor>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading edited set {}", dir.display()))? {
        let p = entry?.path();
        if p.extension().is_some_and(|x| x == "stack") {
            let id = p.file_stem().expect("has stem").to_string_lossy().into_owned();
            out.insert(id, read_video::<Real>(&p)?);
        }
    }
    Ok(out)
}
