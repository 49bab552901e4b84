//! `lbt`: dataset generation, training, evaluation, sweeps and plots.
//!
//! Relative output paths resolve against `LBT_RUN_ROOT` when it is set.

mod plot;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lbt_core::data::{generate_dataset, read_dataset, write_dataset, write_json, ShapesConfig};
use lbt_core::detector::DetectorParams;
use lbt_core::eval::{evaluate, evaluate_detections, EvalSettings};
use lbt_core::experiment::{run_sweep, SweepSpec};
use lbt_core::trainer::{latest_checkpoint, train, TrainConfig, TrainOptions};
use lbt_core::{Annotation, Detection};

pub const RUN_ROOT_VAR: &str = "LBT_RUN_ROOT";

#[derive(Debug, Parser)]
#[command(name = "lbt", version, about = "Semi-supervised detection on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic shapes dataset
    GenData {
        /// Generator config (JSON); defaults when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector (burn-in, then mutual learning)
    Train {
        /// Training config (JSON); defaults when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the newest checkpoint in --out
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint or a detection dump on the test split
    Eval {
        /// A .safetensors file, a checkpoint directory or a run directory
        #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
        checkpoint: Option<PathBuf>,
        /// JSON list of {image_id, detections: [{x1, y1, x2, y2, class, score}]}
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Report path (JSON)
        #[arg(long)]
        out: PathBuf,
        /// Evaluation settings (JSON); defaults when omitted
        #[arg(long)]
        settings: Option<PathBuf>,
    },
    /// Run a methods x fractions x seeds grid
    Sweep {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Runs trained concurrently
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Draw loss and AP curves of a run, or the bar chart of a sweep
    Plot {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv`, runs the command and returns the process exit code:
/// 0 on success, 1 on usage errors, 2 on runtime failures.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(RUN_ROOT_VAR) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn execute(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData { config, seed, out } => {
            let cfg: ShapesConfig = read_config(config.as_deref())?;
            let out = out_path(&out);
            let ds = generate_dataset(&cfg, seed)?;
            write_dataset(&out, &ds)?;
            println!(
                "wrote {} train and {} test images to {}",
                ds.train.len(),
                ds.test.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg: TrainConfig = read_config(config.as_deref())?;
            let ds = read_dataset(&data)?;
            let out = out_path(&out);
            let opts = TrainOptions {
                resume,
                stop_after: None,
            };
            let r = train(&cfg, &ds, &out, &opts)?;
            for (name, rep) in [("teacher", &r.teacher_eval), ("student", &r.student_eval)] {
                if let Some(rep) = rep {
                    println!("{name} AP50={:.4} mAP={:.4}", rep.ap50, rep.map);
                }
            }
            println!("metrics: {}", r.metrics_path.display());
        }
        Command::Eval {
            checkpoint,
            detections,
            data,
            out,
            settings,
        } => {
            let settings: EvalSettings = read_config(settings.as_deref())?;
            let ds = read_dataset(&data)?;
            let names = &ds.manifest.class_names;
            let report = match (checkpoint, detections) {
                (Some(ck), _) => {
                    let params = load_params(&ck)?;
                    evaluate(&params, &ds.test, names, &settings)?
                }
                (None, Some(d)) => {
                    let dump = read_detection_dump(&d)?;
                    let gts: Vec<Vec<Annotation>> = ds.test.iter().map(|a| a.annotations.clone()).collect();
                    let dets: Vec<Vec<Detection>> = ds
                        .test
                        .iter()
                        .map(|a| {
                            dump.iter()
                                .find(|e| e.image_id == a.image_id)
                                .map(|e| e.detections.clone())
                                .unwrap_or_default()
                        })
                        .collect();
                    evaluate_detections(&dets, &gts, names)?
                }
                (None, None) => bail!("one of --checkpoint or --detections is required"),
            };
            let out = out_path(&out);
            write_json(&out, &report)?;
            println!("AP50={:.4} mAP={:.4}", report.ap50, report.map);
        }
        Command::Sweep { spec, data, out, jobs } => {
            let spec: SweepSpec = read_config(spec.as_deref())?;
            let ds = read_dataset(&data)?;
            let out = out_path(&out);
            let result = run_sweep(&spec, &ds, &out, jobs)?;
            print!("{}", lbt_core::experiment::summary_table(&result.summary));
        }
        Command::Plot { run_dir, out } => {
            let out = out_path(&out);
            let written = plot::plot_dir(&run_dir, &out)?;
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Entry of a detection dump accepted by `eval --detections`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

fn read_detection_dump(path: &Path) -> anyhow::Result<Vec<ImageDetections>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Detector weights from a file, a checkpoint directory (teacher preferred)
/// or a run directory (newest checkpoint).
fn load_params(path: &Path) -> anyhow::Result<DetectorParams> {
    if path.is_file() {
        return Ok(DetectorParams::load(path)?);
    }
    let dir = if path.join("state.json").exists() {
        path.to_path_buf()
    } else {
        match latest_checkpoint(path)? {
            Some(d) => d,
            None => bail!("no checkpoint found under {}", path.display()),
        }
    };
    for name in ["teacher.safetensors", "student.safetensors"] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(DetectorParams::load(&p)?);
        }
    }
    bail!("{} holds no detector weights", dir.display())
}
