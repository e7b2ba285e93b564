//! Release acceptance: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Tolerances and thresholds are pinned here.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use vcrl_core::cli::{export_csv, load_run};
use vcrl_core::config::{KappaSchedule, Seeds};
use vcrl_core::env::{default_clusters, gen_corpus, save_corpus, SyntheticTask, World};
use vcrl_core::metrics::{read_metrics, StepMetrics};
use vcrl_core::trainer::{checkpoint_path, run, RunRequest, Trainer, METRICS_FILE};
use vcrl_core::verify::{run_suite, Suite, SuiteReport};
use vcrl_core::{Method, TrainConfig};

const SEEDS: u64 = 5;
const WINDOW: usize = 20;

struct Outcome {
    id: &'static str,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn suite(s: Suite) -> (SuiteReport, Duration) {
    let t = Instant::now();
    let r = run_suite(s, 0, 0.0);
    (r, t.elapsed())
}

fn suite_detail(r: &SuiteReport, took: Duration) -> String {
    let mut d = format!("{} checks in {:.2?}", r.checks, took);
    if let Some(f) = r.failures.first() {
        d.push_str(&format!("; first failure: {f}"));
    }
    d
}

fn corpus() -> Vec<SyntheticTask> {
    gen_corpus(1, &default_clusters(100), &World::default()).expect("default corpus")
}

fn train(config: TrainConfig, tasks: &[SyntheticTask]) -> Vec<StepMetrics> {
    let mut t = Trainer::new(config.clone(), tasks.to_vec()).expect("valid trainer");
    (0..config.steps).map(|_| t.train_step().expect("step")).collect()
}

fn series(ms: &[StepMetrics], f: impl Fn(&StepMetrics) -> f64) -> Vec<f64> {
    ms.iter().map(f).collect()
}

/// Trailing window mean/std computed directly, without the library helpers.
fn window_stats(xs: &[f64], i: usize, w: usize) -> (f64, f64) {
    let lo = (i + 1).saturating_sub(w);
    let win = &xs[lo..=i];
    let n = win.len() as f64;
    let mean = win.iter().sum::<f64>() / n;
    if win.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = win.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn mean_rolling_std(xs: &[f64]) -> f64 {
    (0..xs.len()).map(|i| window_stats(xs, i, WINDOW).1).sum::<f64>() / xs.len() as f64
}

fn binomial_tail(n: usize, s: f64, ks: std::ops::RangeInclusive<usize>) -> f64 {
    ks.map(|k| {
        let mut c = 1.0;
        for i in 0..k {
            c = c * (n - i) as f64 / (i + 1) as f64;
        }
        c * s.powi(k as i32) * (1.0 - s).powi((n - k) as i32)
    })
    .sum()
}

fn criterion_suite(id: &'static str, title: &'static str, s: Suite, budget: Duration) -> Outcome {
    let (r, took) = suite(s);
    Outcome {
        id,
        title,
        passed: r.passed() && took < budget,
        detail: suite_detail(&r, took),
    }
}

/// Paired default-config GRPO and VCRL runs, one pair per seed.
struct MethodRuns {
    grpo: Vec<Vec<StepMetrics>>,
    vcrl: Vec<Vec<StepMetrics>>,
    took: Duration,
}

fn method_runs(tasks: &[SyntheticTask]) -> MethodRuns {
    let t = Instant::now();
    let mut out = MethodRuns {
        grpo: Vec::new(),
        vcrl: Vec::new(),
        took: Duration::ZERO,
    };
    for seed in 0..SEEDS {
        for method in [Method::Grpo, Method::Vcrl] {
            let mut c = TrainConfig::for_method(method);
            c.seeds = Seeds::all(seed);
            let ms = train(c, tasks);
            match method {
                Method::Grpo => out.grpo.push(ms),
                _ => out.vcrl.push(ms),
            }
        }
    }
    out.took = t.elapsed();
    out
}

fn criterion_gradient_norms(runs: &MethodRuns) -> Outcome {
    let (r, took) = suite(Suite::TermNorms);
    let mut wins = 0;
    let mut pairs = Vec::new();
    for (g, v) in runs.grpo.iter().zip(&runs.vcrl) {
        let gs = mean_rolling_std(&series(g, |m| m.grad_norm));
        let vs = mean_rolling_std(&series(v, |m| m.grad_norm));
        if vs <= gs {
            wins += 1;
        }
        pairs.push(format!("{vs:.4}/{gs:.4}"));
    }
    let echo = wins >= 4;
    let budget = Duration::from_secs(300);
    Outcome {
        id: "4",
        title: "per-term gradient-norm inequality; VCRL grad-norm rolling std <= GRPO",
        passed: r.passed() && echo && took + runs.took < budget,
        detail: format!(
            "term check {} ({} batches); rolling-std VCRL/GRPO per seed [{}]: VCRL lower in {wins}/{SEEDS} (need 4)",
            if r.passed() { "ok" } else { "FAILED" },
            r.checks,
            pairs.join(", ")
        ),
    }
}

fn criterion_curriculum(tasks: &[SyntheticTask]) -> Outcome {
    let t = Instant::now();
    // Retention probability of a kappa = 0.8 filter at G = 16 is P[5 <= k <= 11].
    let tails: Vec<f64> = [0.5, 0.1, 0.9, 0.05, 0.95].iter().map(|&s| binomial_tail(16, s, 5..=11)).collect();
    let oracle_ok = (tails[0] - 0.9232).abs() < 1e-4 && tails[3] < 1e-3 && (tails[3] - tails[4]).abs() < 1e-15;
    let mut shares = Vec::new();
    for seed in 0..SEEDS {
        let mut c = TrainConfig::for_method(Method::Vcrl);
        c.seeds = Seeds::all(seed);
        c.kappa = KappaSchedule::constant(0.8);
        c.steps = 50;
        let ms = train(c, tasks);
        let mut by = [0u64; 3];
        for m in &ms {
            for (i, x) in m.retained_by_cluster.iter().enumerate() {
                by[i] += x;
            }
        }
        shares.push(by[1] as f64 / by.iter().sum::<u64>().max(1) as f64);
    }
    let took = t.elapsed();
    Outcome {
        id: "5",
        title: "curriculum concentrates kappa=0.8 retention on the medium cluster",
        passed: oracle_ok && shares.iter().all(|&s| s >= 0.8) && took < Duration::from_secs(120),
        detail: format!(
            "tails P[5..11] at s=0.5 {:.4}, 0.1 {:.4}, 0.05 {:.5}; medium share per seed {:?} (need >= 0.80)",
            tails[0],
            tails[1],
            tails[3],
            shares.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>()
        ),
    }
}

fn criterion_ordering(runs: &MethodRuns) -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for (g, v) in runs.grpo.iter().zip(&runs.vcrl) {
        let last = |ms: &[StepMetrics]| {
            let r = series(ms, |m| m.mean_reward);
            window_stats(&r, r.len() - 1, WINDOW).0
        };
        let (gr, vr) = (last(g), last(v));
        if vr >= gr {
            wins += 1;
        }
        pairs.push(format!("{vr:.4}/{gr:.4}"));
    }
    Outcome {
        id: "6",
        title: "final window-20 reward VCRL >= GRPO",
        passed: wins >= 4 && runs.took < Duration::from_secs(600),
        detail: format!(
            "VCRL/GRPO per seed [{}]: VCRL ahead in {wins}/{SEEDS} (need 4); {:.2?} for all runs",
            pairs.join(", "),
            runs.took
        ),
    }
}

fn criterion_bank(runs: &MethodRuns) -> Outcome {
    let (r, took) = suite(Suite::Bank);
    let max_replays = runs.vcrl.iter().flatten().map(|m| m.max_replay_count).max().unwrap_or(0);
    Outcome {
        id: "7",
        title: "memory-bank recurrence, pop order, replay cap",
        passed: r.passed() && max_replays <= 2,
        detail: format!("{}; max replays in training runs {max_replays}", suite_detail(&r, took)),
    }
}

fn run_dir(dir: &Path, corpus: &Path, steps: u64, checkpoint_every: u64, resume: Option<&Path>) -> Vec<u8> {
    let mut c = TrainConfig::for_method(Method::Vcrl);
    c.steps = steps;
    c.checkpoint_every = checkpoint_every;
    c.seeds = Seeds::all(9);
    run(RunRequest {
        config: c,
        corpus_path: corpus,
        out_dir: dir,
        run_id: None,
        resume,
    })
    .expect("run");
    std::fs::read(dir.join(METRICS_FILE)).expect("metrics stream")
}

fn criterion_determinism(tmp: &Path, corpus: &Path) -> Outcome {
    let a = run_dir(&tmp.join("a"), corpus, 100, 0, None);
    let b = run_dir(&tmp.join("b"), corpus, 100, 0, None);
    run_dir(&tmp.join("c"), corpus, 50, 25, None);
    let resumed = run_dir(&tmp.join("c"), corpus, 100, 0, Some(&checkpoint_path(&tmp.join("c"), 50)));
    let lines = a.iter().filter(|&&c| c == b'\n').count();
    Outcome {
        id: "9",
        title: "determinism and checkpoint resume",
        passed: a == b && a == resumed && lines == 100,
        detail: format!(
            "repeat identical: {}; resume from step 50 identical: {}; {lines} records",
            a == b,
            a == resumed
        ),
    }
}

fn criterion_smoothing(tmp: &Path) -> Outcome {
    let (r, took) = suite(Suite::Smoothing);
    // Recompute the exported smoothing of an emitted stream from scratch.
    let dir = tmp.join("a");
    let ms = read_metrics(&dir.join(METRICS_FILE)).expect("stream");
    let run = load_run(&dir).expect("run dir");
    let csv = export_csv(&run.metrics, WINDOW);
    let header: Vec<&str> = csv.lines().next().unwrap_or("").split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).expect("export column");
    let (ma_c, sd_c) = (col("mean_reward_ma20"), col("mean_reward_std20"));
    let (gma_c, gsd_c) = (col("grad_norm_ma20"), col("grad_norm_std20"));
    let reward = series(&ms, |m| m.mean_reward);
    let grad = series(&ms, |m| m.grad_norm);
    let mut worst = 0.0f64;
    for (i, line) in csv.lines().skip(1).enumerate() {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().expect("number")).collect();
        let (rm, rs) = window_stats(&reward, i, WINDOW);
        let (gm, gs) = window_stats(&grad, i, WINDOW);
        for (got, want) in [(cells[ma_c], rm), (cells[sd_c], rs), (cells[gma_c], gm), (cells[gsd_c], gs)] {
            worst = worst.max((got - want).abs());
        }
    }
    Outcome {
        id: "10",
        title: "window-20 smoothing matches independent recomputation",
        passed: r.passed() && worst <= 1e-12 && ms.len() == 100,
        detail: format!("{}; emitted-stream max deviation {worst:.1e}", suite_detail(&r, took)),
    }
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let tasks = corpus();
    let corpus_path = tmp.path().join("corpus.jsonl");
    save_corpus(&corpus_path, &tasks).expect("corpus file");

    let mut outcomes = vec![
        criterion_suite("1", "group variance closed form and maximum", Suite::Variance, Duration::from_secs(1)),
        criterion_suite("2", "normalised-variance curve shape", Suite::Pcurve, Duration::from_secs(1)),
        criterion_suite("3", "analytic gradients vs central differences", Suite::Gradients, Duration::from_secs(30)),
    ];
    let runs = method_runs(&tasks);
    outcomes.push(criterion_gradient_norms(&runs));
    outcomes.push(criterion_curriculum(&tasks));
    outcomes.push(criterion_ordering(&runs));
    outcomes.push(criterion_bank(&runs));
    outcomes.push(criterion_suite("8", "threshold filters reduce to DAPO and GRPO", Suite::Filters, Duration::from_secs(30)));
    outcomes.push(criterion_determinism(tmp.path(), &corpus_path));
    outcomes.push(criterion_smoothing(tmp.path()));

    println!();
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {status}  {}", o.id, o.title);
        println!("              {}", o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("\nacceptance: {}/{} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
