//! Command-line surface of the `vcrl` binary.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
//! 3 verification failure. `VCRL_OUT_DIR` sets the default output root.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{load_kv_file, TrainConfig};
use crate::env::{gen_corpus, save_corpus, ClusterSpec, World};
use crate::error::{Error, Result};
use crate::metrics::{moving_average, read_metrics, rolling_std, StepMetrics, DEFAULT_WINDOW};
use crate::trainer::{self, RunManifest, RunRequest, ARTIFACT_VERSION, MANIFEST_FILE, METRICS_FILE};
use crate::verify::{run_suites, Suite, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const OUT_DIR_ENV: &str = "VCRL_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "vcrl", version, about = "Variance-based curriculum RL on a synthetic verifiable-reward world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task corpus.
    GenCorpus(GenCorpusArgs),
    /// Train one run and write its metrics stream, checkpoints and manifest.
    Run(RunArgs),
    /// Align and summarise completed runs.
    Compare(CompareArgs),
    /// Run the oracle and invariant suites.
    Verify(VerifyArgs),
    /// Write smoothed plot-ready series of one run.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated `LEN:COUNT` or `MIN-MAX:COUNT` entries, one per cluster.
    #[arg(long, default_value = "2:100,5:100,9:100")]
    pub clusters: String,
    #[arg(long, default_value_t = 8)]
    pub vocab: usize,
    #[arg(long, default_value_t = 12)]
    pub lmax: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Flat `key = value` config file; flags given here override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Sets the data, rollout and init seeds together.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub shortfall: Option<String>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Any config key, `KEY=VALUE`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Run directory; defaults to `<out-root>/<run-id>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = OUT_DIR_ENV, default_value = "runs")]
    pub out_root: PathBuf,
    #[arg(long)]
    pub run_id: Option<String>,
    /// Continue from a checkpoint file written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// Output directory; defaults to `<out-root>/compare`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = OUT_DIR_ENV, default_value = "runs")]
    pub out_root: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Restrict to these suites; repeatable.
    #[arg(long = "suite")]
    pub suites: Vec<String>,
    /// Negative control: perturb the named suite so it must fail.
    #[arg(long)]
    pub inject_fault: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub run: PathBuf,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    /// Output CSV; defaults to `<run>/series_w<window>.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenCorpus(a) => cmd_gen_corpus(&a).map(|_| EXIT_OK),
        Command::Run(a) => cmd_run(&a).map(|_| EXIT_OK),
        Command::Compare(a) => cmd_compare(&a).map(|_| EXIT_OK),
        Command::Verify(a) => cmd_verify(&a),
        Command::Export(a) => cmd_export(&a).map(|_| EXIT_OK),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

/// `<file>.manifest.json` next to a single-file output.
fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub artifact_version: String,
    pub seed: u64,
    pub clusters: Vec<ClusterSpec>,
    pub world: World,
    pub tasks: usize,
    pub corpus_path: PathBuf,
}

pub fn cmd_gen_corpus(a: &GenCorpusArgs) -> Result<CorpusManifest> {
    let clusters = ClusterSpec::parse_list(&a.clusters)?;
    let world = World {
        vocab: a.vocab,
        l_max: a.lmax,
    };
    let tasks = gen_corpus(a.seed, &clusters, &world)?;
    create_parent(&a.out)?;
    save_corpus(&a.out, &tasks)?;
    let manifest = CorpusManifest {
        artifact_version: ARTIFACT_VERSION.to_string(),
        seed: a.seed,
        clusters,
        world,
        tasks: tasks.len(),
        corpus_path: a.out.clone(),
    };
    write_json(&sidecar(&a.out), &manifest)?;
    println!("wrote {} tasks to {}", tasks.len(), a.out.display());
    Ok(manifest)
}

/// Merges config layers: built-in defaults, then the file, then `--set`
/// pairs, then named flags. The last `method` given anywhere wins and is
/// applied before every other key.
pub fn resolve_config(layers: &[Vec<(String, String)>]) -> Result<TrainConfig> {
    let all: Vec<&(String, String)> = layers.iter().flatten().collect();
    let method = all.iter().rev().find(|(k, _)| k == "method").map(|(_, v)| v.as_str());
    let mut config = TrainConfig::default();
    if let Some(m) = method {
        config.set("method", m)?;
    }
    for (k, v) in all.iter().filter(|(k, _)| k != "method") {
        config.set(k, v)?;
    }
    config.validate()?;
    Ok(config)
}

fn split_pair(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn run_config(a: &RunArgs) -> Result<TrainConfig> {
    let file = match &a.config {
        Some(p) => load_kv_file(p)?,
        None => Vec::new(),
    };
    let sets = a.sets.iter().map(|s| split_pair(s)).collect::<Result<Vec<_>>>()?;
    let mut flags = Vec::new();
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k.to_string(), v));
        }
    };
    flag("method", a.method.clone());
    flag("steps", a.steps.map(|x| x.to_string()));
    flag("seed", a.seed.map(|x| x.to_string()));
    flag("batch_size", a.batch_size.map(|x| x.to_string()));
    flag("group_size", a.group_size.map(|x| x.to_string()));
    flag("lr", a.lr.map(|x| format!("{x:?}")));
    flag("shortfall", a.shortfall.clone());
    flag("checkpoint_every", a.checkpoint_every.map(|x| x.to_string()));
    resolve_config(&[file, sets, flags])
}

pub fn cmd_run(a: &RunArgs) -> Result<trainer::RunSummary> {
    let config = run_config(a)?;
    let run_id = a.run_id.clone().unwrap_or_else(|| trainer::default_run_id(&config));
    let out_dir = a.out.clone().unwrap_or_else(|| a.out_root.join(&run_id));
    let summary = trainer::run(RunRequest {
        config,
        corpus_path: &a.corpus,
        out_dir: &out_dir,
        run_id: Some(run_id),
        resume: a.resume.as_deref(),
    })?;
    match &summary.last {
        Some(m) => println!(
            "{}: {} steps to step {}, mean_reward {:.4}, grad_norm {:.4e}; output in {}",
            summary.manifest.run_id,
            summary.steps_run,
            m.step,
            m.mean_reward,
            m.grad_norm,
            out_dir.display()
        ),
        None => println!("{}: nothing to do; output in {}", summary.manifest.run_id, out_dir.display()),
    }
    Ok(summary)
}

/// A completed (or in-progress) run read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub metrics: Vec<StepMetrics>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| Error::parse(&path, 1, e.to_string()))?;
    let metrics = read_metrics(&dir.join(METRICS_FILE))?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        manifest,
        metrics,
    })
}

fn seed_label(m: &RunManifest) -> String {
    let s = m.seeds;
    if s.data == s.rollout && s.rollout == s.init {
        s.data.to_string()
    } else {
        format!("{}/{}/{}", s.data, s.rollout, s.init)
    }
}

pub const SERIES: [&str; 4] = ["mean_reward", "mean_entropy", "mean_response_length", "grad_norm"];

pub fn series_of(metrics: &[StepMetrics], field: &str) -> Vec<f64> {
    metrics
        .iter()
        .map(|m| match field {
            "mean_reward" => m.mean_reward,
            "mean_entropy" => m.mean_entropy,
            "mean_response_length" => m.mean_response_length,
            "grad_norm" => m.grad_norm,
            "objective_value" => m.objective_value,
            other => panic!("no numeric series '{other}'"),
        })
        .collect()
}

/// One summary row per run.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub run_id: String,
    pub method: String,
    pub seed: String,
    pub steps: usize,
    pub final_reward_ma: f64,
    pub final_reward_std: f64,
    pub mean_grad_norm: f64,
    pub mean_entropy: f64,
    /// Mean over steps of the rolling standard deviation of `grad_norm`.
    pub grad_norm_rolling_std: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn summarize(run: &LoadedRun, steps: usize, window: usize) -> SummaryRow {
    let metrics = &run.metrics[..steps];
    let reward = series_of(metrics, "mean_reward");
    let grad = series_of(metrics, "grad_norm");
    SummaryRow {
        run_id: run.manifest.run_id.clone(),
        method: run.manifest.config.method.to_string(),
        seed: seed_label(&run.manifest),
        steps,
        final_reward_ma: moving_average(&reward, window).last().copied().unwrap_or(0.0),
        final_reward_std: rolling_std(&reward, window).last().copied().unwrap_or(0.0),
        mean_grad_norm: mean(&grad),
        mean_entropy: mean(&series_of(metrics, "mean_entropy")),
        grad_norm_rolling_std: mean(&rolling_std(&grad, window)),
    }
}

pub fn summary_csv(rows: &[SummaryRow], window: usize) -> String {
    let mut out = format!(
        "method,seed,final_reward_ma{window},final_reward_std{window},mean_grad_norm,mean_entropy,run_id,steps,grad_norm_rolling_std{window}\n"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?},{:?},{},{},{:?}",
            r.method,
            r.seed,
            r.final_reward_ma,
            r.final_reward_std,
            r.mean_grad_norm,
            r.mean_entropy,
            r.run_id,
            r.steps,
            r.grad_norm_rolling_std
        );
    }
    out
}

/// Smoothed series of several runs side by side, truncated to `steps`.
pub fn aligned_csv(runs: &[LoadedRun], steps: usize, window: usize) -> String {
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    for run in runs {
        for field in SERIES {
            let raw = series_of(&run.metrics[..steps], field);
            columns.push((format!("{}:{field}_ma{window}", run.manifest.run_id), moving_average(&raw, window)));
        }
    }
    let mut out = String::from("step");
    for (name, _) in &columns {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for i in 0..steps {
        let _ = write!(out, "{}", runs[0].metrics[i].step);
        for (_, col) in &columns {
            let _ = write!(out, ",{:?}", col[i]);
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize)]
struct CompareManifest {
    artifact_version: String,
    runs: Vec<PathBuf>,
    window: usize,
    aligned_steps: usize,
    summary: PathBuf,
    series: PathBuf,
}

pub fn cmd_compare(a: &CompareArgs) -> Result<Vec<SummaryRow>> {
    if a.runs.len() < 2 {
        return Err(Error::Config("compare needs at least two run directories".into()));
    }
    if a.window == 0 {
        return Err(Error::Config("window must be >= 1".into()));
    }
    let runs = a.runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let corpora: Vec<&Path> = runs.iter().map(|r| r.manifest.corpus_path.as_path()).collect();
    if corpora.windows(2).any(|w| w[0] != w[1]) {
        log::warn!("runs were trained on different corpus paths: {corpora:?}");
    }
    let steps = runs.iter().map(|r| r.metrics.len()).min().unwrap_or(0);
    if runs.iter().any(|r| r.metrics.len() != steps) {
        let msg = format!("runs have different lengths; aligning to the shortest ({steps} steps)");
        log::warn!("{msg}");
        eprintln!("warning: {msg}");
    }
    let rows: Vec<SummaryRow> = runs.iter().map(|r| summarize(r, steps, a.window)).collect();
    let out_dir = a.out.clone().unwrap_or_else(|| a.out_root.join("compare"));
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let summary_path = out_dir.join("summary.csv");
    let series_path = out_dir.join("series.csv");
    let table = summary_csv(&rows, a.window);
    fs::write(&summary_path, &table).map_err(|e| Error::io(&summary_path, e))?;
    fs::write(&series_path, aligned_csv(&runs, steps, a.window)).map_err(|e| Error::io(&series_path, e))?;
    write_json(
        &out_dir.join(MANIFEST_FILE),
        &CompareManifest {
            artifact_version: ARTIFACT_VERSION.to_string(),
            runs: a.runs.clone(),
            window: a.window,
            aligned_steps: steps,
            summary: summary_path,
            series: series_path,
        },
    )?;
    print!("{table}");
    Ok(rows)
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    let suites = a.suites.iter().map(|s| s.parse()).collect::<Result<Vec<Suite>>>()?;
    let inject_fault = a.inject_fault.as_deref().map(str::parse).transpose()?;
    let reports = run_suites(&VerifyOptions {
        suites,
        inject_fault,
        seed: a.seed,
    });
    let mut all = true;
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<10} {} checks", r.suite.as_str(), r.checks);
        for f in &r.failures {
            println!("    {f}");
        }
        all &= r.passed();
    }
    Ok(if all { EXIT_OK } else { EXIT_VERIFY })
}

/// Raw, smoothed and rolling-std columns for each plotted series.
pub fn export_csv(metrics: &[StepMetrics], window: usize) -> String {
    let cols: Vec<(String, Vec<f64>)> = SERIES
        .iter()
        .flat_map(|&f| {
            let raw = series_of(metrics, f);
            let ma = moving_average(&raw, window);
            let sd = rolling_std(&raw, window);
            [(f.to_string(), raw), (format!("{f}_ma{window}"), ma), (format!("{f}_std{window}"), sd)]
        })
        .collect();
    let mut out = String::from("step");
    for (name, _) in &cols {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, m) in metrics.iter().enumerate() {
        let _ = write!(out, "{}", m.step);
        for (_, c) in &cols {
            let _ = write!(out, ",{:?}", c[i]);
        }
        out.push('\n');
    }
    out
}

pub fn cmd_export(a: &ExportArgs) -> Result<PathBuf> {
    if a.window == 0 {
        return Err(Error::Config("window must be >= 1".into()));
    }
    let run = load_run(&a.run)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.join(format!("series_w{}.csv", a.window)));
    create_parent(&out)?;
    fs::write(&out, export_csv(&run.metrics, a.window)).map_err(|e| Error::io(&out, e))?;
    write_json(
        &sidecar(&out),
        &serde_json::json!({
            "artifact_version": ARTIFACT_VERSION,
            "run": a.run,
            "run_id": run.manifest.run_id,
            "window": a.window,
            "steps": run.metrics.len(),
        }),
    )?;
    println!("wrote {} rows to {}", run.metrics.len(), out.display());
    Ok(out)
}
