//! The training loop, its run directory, checkpoints and resume.
//!
//! ```text
//! <run>/config.json
//! <run>/split.json
//! <run>/metrics.jsonl        deterministic given config and seed
//! <run>/timing.jsonl         wall-clock per logged iteration
//! <run>/checkpoints/iter_N/{student,teacher,momentum}.safetensors, state.json
//! <run>/pseudo_dumps/iter_N.jsonl
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{burn_in_step, init_teacher, mutual_step, Stage, TrainConfig, TrainState};
use crate::data::{split_labeled, write_json, AnnotatedImage, Dataset};
use crate::detector::DetectorParams;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::losses::LossBreakdown;
use crate::pseudolabel::{append_jsonl, PseudoLabelStats};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        EvalSummary {
            ap50: r.ap50,
            map: r.map,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub stage: Stage,
    pub loss: LossBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo: Option<PseudoLabelStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<EvalSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student: Option<EvalSummary>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the newest checkpoint in the run directory.
    pub resume: bool,
    /// Stop (with a checkpoint) once this iteration is reached.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics_path: PathBuf,
    /// Reports of the last evaluation, if one ran.
    pub teacher_eval: Option<EvalReport>,
    pub student_eval: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateFile {
    iteration: u64,
    stage: Stage,
    seed: u64,
    has_teacher: bool,
}

/// Indices of the batch at `iteration`: consecutive slices of per-epoch
/// shuffles of `0..n`, so every item is seen once per epoch.
pub(crate) fn epoch_batch(n: usize, batch: usize, seed: u64, stream: &str, iteration: u64) -> Vec<usize> {
    let mut perms: HashMap<u64, Vec<usize>> = HashMap::new();
    let start = iteration * batch as u64;
    (start..start + batch as u64)
        .map(|p| {
            let epoch = p / n as u64;
            let perm = perms.entry(epoch).or_insert_with(|| {
                let mut v: Vec<usize> = (0..n).collect();
                v.shuffle(&mut stream_rng(seed, stream, &[epoch]));
                v
            });
            perm[(p % n as u64) as usize]
        })
        .collect()
}

fn checkpoint_dir(run: &Path, iteration: u64) -> PathBuf {
    run.join("checkpoints").join(format!("iter_{iteration}"))
}

pub fn save_checkpoint(run: &Path, state: &TrainState) -> Result<PathBuf> {
    let dir = checkpoint_dir(run, state.iteration);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    state.student.save(&dir.join("student.safetensors"))?;
    state.momentum.save(&dir.join("momentum.safetensors"))?;
    if let Some(t) = &state.teacher {
        t.save(&dir.join("teacher.safetensors"))?;
    }
    write_json(
        &dir.join("state.json"),
        &StateFile {
            iteration: state.iteration,
            stage: state.stage,
            seed: state.seed,
            has_teacher: state.teacher.is_some(),
        },
    )?;
    Ok(dir)
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let path = dir.join("state.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sf: StateFile = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let student = DetectorParams::load(&dir.join("student.safetensors"))?;
    let momentum = DetectorParams::load(&dir.join("momentum.safetensors"))?;
    let teacher = if sf.has_teacher {
        Some(DetectorParams::load(&dir.join("teacher.safetensors"))?)
    } else {
        None
    };
    let state = TrainState {
        iteration: sf.iteration,
        stage: sf.stage,
        student,
        teacher,
        momentum,
        seed: sf.seed,
    };
    state.check_invariants()?;
    Ok(state)
}

/// Newest `checkpoints/iter_N` directory holding a state file.
pub fn latest_checkpoint(run: &Path) -> Result<Option<PathBuf>> {
    let root = run.join("checkpoints");
    if !root.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
        let entry = entry.map_err(|e| Error::io(&root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(n) = name.strip_prefix("iter_").and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if entry.path().join("state.json").exists() && best.as_ref().is_none_or(|(m, _)| n > *m) {
            best = Some((n, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Drops log lines past `iteration`, so a resumed run appends exactly what an
/// uninterrupted run would have.
fn truncate_log(path: &Path, iteration: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::json(path, e))?;
        if v.get("iteration").and_then(|i| i.as_u64()).is_some_and(|i| i <= iteration) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn select<'a>(ds: &'a Dataset, ids: &[String]) -> Result<Vec<&'a AnnotatedImage>> {
    let by_id: HashMap<&str, &AnnotatedImage> = ds.train.iter().map(|a| (a.image_id.as_str(), a)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Config(format!("image {id} missing from the training split")))
        })
        .collect()
}

/// Runs burn-in and then mutual learning as configured, writing everything
/// into `run_dir`.
pub fn train(cfg: &TrainConfig, ds: &Dataset, run_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.manifest.image_size != cfg.arch.image_size {
        return Err(Error::Config(format!(
            "dataset images are {} px, detector expects {}",
            ds.manifest.image_size, cfg.arch.image_size
        )));
    }
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let config_path = run_dir.join("config.json");
    let metrics_path = run_dir.join("metrics.jsonl");
    let timing_path = run_dir.join("timing.jsonl");

    let resume_from = if opts.resume { latest_checkpoint(run_dir)? } else { None };
    if opts.resume && config_path.exists() {
        let text = std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        let saved: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::json(&config_path, e))?;
        if &saved != cfg {
            return Err(Error::Config("resume config differs from the run's config.json".into()));
        }
    } else if !opts.resume && (config_path.exists() || metrics_path.exists()) {
        return Err(Error::Config(format!(
            "{} already holds a run; resume it or choose a new directory",
            run_dir.display()
        )));
    }

    let split = split_labeled(&ds.manifest, cfg.labeled_fraction, cfg.split_seed())?;
    let provenance = split.labeled.as_ref().expect("split sets provenance");
    let labeled = select(ds, &provenance.labeled_ids)?;
    let unlabeled = select(ds, &provenance.unlabeled_ids)?;
    let test: &[AnnotatedImage] = match cfg.eval_max_images {
        Some(n) => &ds.test[..n.min(ds.test.len())],
        None => &ds.test,
    };
    if test.is_empty() {
        return Err(Error::Empty("test split"));
    }

    let mut state = match &resume_from {
        Some(dir) => {
            let s = load_checkpoint(dir)?;
            if s.seed != cfg.seed {
                return Err(Error::Config("checkpoint seed differs from config seed".into()));
            }
            truncate_log(&metrics_path, s.iteration)?;
            truncate_log(&timing_path, s.iteration)?;
            log::info!("resuming from iteration {}", s.iteration);
            s
        }
        None => {
            for p in [&metrics_path, &timing_path] {
                if p.exists() {
                    std::fs::remove_file(p).map_err(|e| Error::io(p, e))?;
                }
            }
            TrainState::new(&cfg.arch, cfg.seed)?
        }
    };
    write_json(&config_path, cfg)?;
    write_json(&run_dir.join("split.json"), &split)?;

    let class_names = &ds.manifest.class_names;
    let started = Instant::now();
    let mut teacher_eval = None;
    let mut student_eval = None;
    let end = opts.stop_after.map_or(cfg.total_iterations, |s| s.min(cfg.total_iterations));

    while state.iteration < end {
        if state.stage == Stage::BurnIn && state.iteration >= cfg.burn_in_iterations && !cfg.disable_mutual {
            init_teacher(&mut state)?;
        }
        let t = state.iteration;
        let lab: Vec<&AnnotatedImage> = epoch_batch(labeled.len(), cfg.batch_labeled, cfg.seed, "labeled-order", t)
            .into_iter()
            .map(|i| labeled[i])
            .collect();
        let (loss, pseudo, sets) = match state.stage {
            Stage::BurnIn => (burn_in_step(&mut state, cfg, &lab), None, Vec::new()),
            Stage::Mutual => {
                if unlabeled.is_empty() {
                    return Err(Error::Empty("unlabeled split"));
                }
                let unl: Vec<&AnnotatedImage> =
                    epoch_batch(unlabeled.len(), cfg.batch_unlabeled, cfg.seed, "unlabeled-order", t)
                        .into_iter()
                        .map(|i| unlabeled[i])
                        .collect();
                match mutual_step(&mut state, cfg, &lab, &unl) {
                    Ok(r) => (Ok(r.loss), Some(r.pseudo_stats), r.pseudo_labels),
                    Err(e) => (Err(e), None, Vec::new()),
                }
            }
        };
        let loss = match loss {
            Ok(l) => l,
            Err(e) => {
                if let Error::NonFiniteLoss { iteration, detail } = &e {
                    let dump = serde_json::json!({"iteration": iteration, "detail": detail});
                    write_json(&run_dir.join("nonfinite.json"), &dump)?;
                    let dir = run_dir.join("nonfinite_params");
                    std::fs::create_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
                    state.student.save(&dir.join("student.safetensors"))?;
                }
                return Err(e);
            }
        };

        let i = state.iteration;
        let eval_now = i % cfg.eval_interval == 0 || i == cfg.total_iterations;
        let log_now = eval_now || i % cfg.log_interval == 0;
        if eval_now && cfg.dump_pseudo_labels && !sets.is_empty() {
            let path = run_dir.join("pseudo_dumps").join(format!("iter_{i}.jsonl"));
            if path.exists() {
                std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
            append_jsonl(&path, &sets)?;
        }
        if log_now {
            let mut record = MetricsRecord {
                iteration: i,
                stage: state.stage,
                loss,
                pseudo,
                teacher: None,
                student: None,
            };
            if eval_now {
                let s = evaluate(&state.student, test, class_names, &cfg.eval)?;
                record.student = Some((&s).into());
                student_eval = Some(s);
                teacher_eval = match &state.teacher {
                    Some(tp) => Some(evaluate(tp, test, class_names, &cfg.eval)?),
                    None => None,
                };
                record.teacher = teacher_eval.as_ref().map(Into::into);
            }
            let line = serde_json::to_string(&record).map_err(|e| Error::json(&metrics_path, e))?;
            append_line(&metrics_path, &line)?;
            let timing = serde_json::json!({"iteration": i, "wall_clock_s": started.elapsed().as_secs_f64()});
            append_line(&timing_path, &timing.to_string())?;
            log::info!(
                "iter {i} {:?} total {:.4}{}",
                state.stage,
                loss.total,
                record
                    .teacher
                    .or(record.student)
                    .map_or(String::new(), |e| format!(" AP50 {:.4} mAP {:.4}", e.ap50, e.map))
            );
        }
        if i % cfg.checkpoint_interval == 0 || i == end {
            save_checkpoint(run_dir, &state)?;
        }
    }

    Ok(TrainOutcome {
        state,
        metrics_path,
        teacher_eval,
        student_eval,
    })
}
