//! Method × labeled-fraction × seed sweeps with mean ± std summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{write_json, Dataset};
use crate::error::{Error, Result};
use crate::trainer::{read_metrics, train, EvalSummary, TrainConfig, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Labeled images only, plain supervised losses.
    SupervisedOnly,
    /// Supervised losses plus flip consistency, no pseudo-labels.
    BurnInPlusConloc,
    /// Burn-in with consistency, then mutual learning with focal loss.
    FullLowerBiased,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::SupervisedOnly, Method::BurnInPlusConloc, Method::FullLowerBiased];

    pub fn name(self) -> &'static str {
        match self {
            Method::SupervisedOnly => "supervised_only",
            Method::BurnInPlusConloc => "burn_in_plus_conloc",
            Method::FullLowerBiased => "full_lower_biased",
        }
    }

    /// The run configuration this method uses on top of `base`.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Method::SupervisedOnly => {
                c.disable_mutual = true;
                c.disable_con_loc = true;
            }
            Method::BurnInPlusConloc => {
                c.disable_mutual = true;
                c.disable_con_loc = false;
            }
            Method::FullLowerBiased => {
                c.disable_mutual = false;
                c.disable_con_loc = false;
                c.disable_focal = false;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub fractions: Vec<f64>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub base: TrainConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            fractions: vec![0.01, 0.02, 0.05, 0.10, 0.20],
            methods: Method::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            base: TrainConfig::default(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one fraction, method and seed".into()));
        }
        for job in self.jobs() {
            job.config.validate()?;
        }
        Ok(())
    }

    /// Every run of the sweep, ordered by fraction, method, seed.
    pub fn jobs(&self) -> Vec<SweepJob> {
        let mut out = Vec::new();
        for &fraction in &self.fractions {
            for &method in &self.methods {
                for &seed in &self.seeds {
                    let mut config = method.configure(&self.base);
                    config.labeled_fraction = fraction;
                    config.seed = seed;
                    out.push(SweepJob {
                        method,
                        fraction,
                        seed,
                        config,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepJob {
    pub method: Method,
    pub fraction: f64,
    pub seed: u64,
    pub config: TrainConfig,
}

impl SweepJob {
    pub fn dir_name(&self) -> String {
        format!("{}_f{}_s{}", self.method.name(), self.fraction, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub fraction: f64,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub teacher: Option<EvalSummary>,
    pub student: EvalSummary,
}

impl RunResult {
    /// The reported model: the teacher when one exists, else the student.
    pub fn reported(&self) -> EvalSummary {
        self.teacher.unwrap_or(self.student)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub fraction: f64,
    pub runs: usize,
    pub ap50_mean: f64,
    pub ap50_std: f64,
    pub map_mean: f64,
    pub map_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub runs: Vec<RunResult>,
    pub summary: Vec<SummaryRow>,
}

/// Sample mean and standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Final evaluation of a finished run, read back from its metrics log.
pub fn final_evaluation(run_dir: &Path) -> Result<(Option<EvalSummary>, EvalSummary)> {
    let recs = read_metrics(&run_dir.join("metrics.jsonl"))?;
    let last = recs
        .iter()
        .rev()
        .find(|r| r.student.is_some())
        .ok_or(Error::Empty("evaluated metrics records"))?;
    Ok((last.teacher, last.student.expect("filtered")))
}

/// Runs one sweep job, resuming it if its directory holds a partial run.
pub fn run_job(job: &SweepJob, ds: &Dataset, out: &Path) -> Result<RunResult> {
    let dir = out.join("runs").join(job.dir_name());
    let opts = TrainOptions {
        resume: true,
        stop_after: None,
    };
    train(&job.config, ds, &dir, &opts)?;
    let (teacher, student) = final_evaluation(&dir)?;
    Ok(RunResult {
        method: job.method,
        fraction: job.fraction,
        seed: job.seed,
        run_dir: dir,
        teacher,
        student,
    })
}

pub fn summarize(runs: &[RunResult]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(u64, Method), Vec<&RunResult>> = BTreeMap::new();
    for r in runs {
        groups.entry((r.fraction.to_bits(), r.method)).or_default().push(r);
    }
    let mut rows: Vec<SummaryRow> = groups
        .into_values()
        .map(|g| {
            let ap50: Vec<f64> = g.iter().map(|r| r.reported().ap50).collect();
            let map: Vec<f64> = g.iter().map(|r| r.reported().map).collect();
            let (ap50_mean, ap50_std) = mean_std(&ap50);
            let (map_mean, map_std) = mean_std(&map);
            SummaryRow {
                method: g[0].method,
                fraction: g[0].fraction,
                runs: g.len(),
                ap50_mean,
                ap50_std,
                map_mean,
                map_std,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.fraction.total_cmp(&b.fraction).then(a.method.cmp(&b.method)));
    rows
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("method,fraction,runs,ap50_mean,ap50_std,map_mean,map_std\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.method.name(),
            r.fraction,
            r.runs,
            r.ap50_mean,
            r.ap50_std,
            r.map_mean,
            r.map_std
        );
    }
    s
}

/// Methods × fractions table of reported mAP (and AP50), in percent.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut fractions: Vec<f64> = rows.iter().map(|r| r.fraction).collect();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let mut s = String::from("| method |");
    for f in &fractions {
        let _ = write!(s, " {}% |", f * 100.0);
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(fractions.len()));
    s.push('\n');
    for m in methods {
        let _ = write!(s, "| {} |", m.name());
        for f in &fractions {
            match rows.iter().find(|r| r.method == m && r.fraction == *f) {
                Some(r) => {
                    let _ = write!(
                        s,
                        " {:.2}±{:.2} ({:.2}) |",
                        100.0 * r.map_mean,
                        100.0 * r.map_std,
                        100.0 * r.ap50_mean
                    );
                }
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    s
}

/// Runs every job (up to `jobs` at a time) and writes `results.json`,
/// `summary.csv` and `table.md` into `out`.
pub fn run_sweep(spec: &SweepSpec, ds: &Dataset, out: &Path, jobs: usize) -> Result<SweepResult> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("sweep_spec.json"), spec)?;
    let work = spec.jobs();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunResult>>>> = Mutex::new((0..work.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(work.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = work.get(i) else { break };
                log::info!("sweep run {}/{}: {}", i + 1, work.len(), job.dir_name());
                let r = run_job(job, ds, out);
                results.lock().expect("no poisoned lock")[i] = Some(r);
            });
        }
    });
    let runs = results
        .into_inner()
        .expect("no poisoned lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&runs);
    let result = SweepResult { runs, summary };
    write_json(&out.join("results.json"), &result)?;
    std::fs::write(out.join("summary.csv"), summary_csv(&result.summary)).map_err(|e| Error::io(out, e))?;
    std::fs::write(out.join("table.md"), summary_table(&result.summary)).map_err(|e| Error::io(out, e))?;
    Ok(result)
}
