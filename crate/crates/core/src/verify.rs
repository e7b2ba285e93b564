//! Oracle and invariant suites behind `vcrl verify`.
//!
//! Each suite compares the library against an independent computation
//! (brute-force sums, closed forms, central finite differences, naive window
//! recomputation) and reports the number of checks and any failures.
//!
//! Negative control: [`VerifyOptions::inject_fault`] adds a small offset
//! ([`FAULT`]) to the library-side value inside the named suite, so a healthy
//! build must report that suite as failed. The CLI exposes this as
//! `vcrl verify --inject-fault <suite>`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::Method;
use crate::env::{
    sample_group, stream_rng, success_probability, PolicyParams, Rollout, SyntheticTask, World,
};
use crate::error::{Error, Result};
use crate::group_stats::{binary_p, binary_variance, max_group_variance, RewardGroup};
use crate::memory_bank::{BankConfig, MemoryBank};
use crate::metrics::{moving_average, rolling_std};
use crate::objectives::{
    dapo_objective, grpo_objective, gspo_objective, per_term_gradnorm_check, term_gradnorms,
    vcrl_mask, vcrl_objective, ClipConfig, Group, ObjectiveOutput, RolloutBatch,
};

/// Offset injected by the negative-control hook.
pub const FAULT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    Variance,
    Pcurve,
    Gradients,
    Bank,
    TermNorms,
    Filters,
    Smoothing,
    Env,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Variance,
        Suite::Pcurve,
        Suite::Gradients,
        Suite::Bank,
        Suite::TermNorms,
        Suite::Filters,
        Suite::Smoothing,
        Suite::Env,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Suite::Variance => "variance",
            Suite::Pcurve => "pcurve",
            Suite::Gradients => "gradients",
            Suite::Bank => "bank",
            Suite::TermNorms => "term-norms",
            Suite::Filters => "filters",
            Suite::Smoothing => "smoothing",
            Suite::Env => "env",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s.trim())
            .ok_or_else(|| {
                let names: Vec<_> = Suite::ALL.iter().map(Suite::as_str).collect();
                Error::Config(format!("unknown suite '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(suite: Suite) -> Self {
        Self {
            suite,
            checks: 0,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        // Keep reports readable when a whole sweep fails.
        if !ok && self.failures.len() < 20 {
            self.failures.push(what());
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Suites to run; empty means all.
    pub suites: Vec<Suite>,
    pub inject_fault: Option<Suite>,
    pub seed: u64,
}

pub fn run_suites(opts: &VerifyOptions) -> Vec<SuiteReport> {
    let selected: Vec<Suite> = if opts.suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        opts.suites.clone()
    };
    selected
        .into_iter()
        .map(|s| {
            let fault = if opts.inject_fault == Some(s) { FAULT } else { 0.0 };
            run_suite(s, opts.seed, fault)
        })
        .collect()
}

pub fn run_suite(suite: Suite, seed: u64, fault: f64) -> SuiteReport {
    match suite {
        Suite::Variance => variance_suite(fault),
        Suite::Pcurve => pcurve_suite(fault),
        Suite::Gradients => gradients_suite(seed, 50, fault),
        Suite::Bank => bank_suite(seed, fault),
        Suite::TermNorms => term_norms_suite(seed, 100, fault),
        Suite::Filters => filters_suite(seed, 1000, fault),
        Suite::Smoothing => smoothing_suite(seed, fault),
        Suite::Env => env_suite(fault),
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Two-pass sample variance of an explicit 0/1 vector.
fn brute_variance(g: usize, k: usize) -> f64 {
    let xs: Vec<f64> = (0..g).map(|i| if i < k { 1.0 } else { 0.0 }).collect();
    let mean = xs.iter().sum::<f64>() / g as f64;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (g as f64 - 1.0)
}

pub fn variance_suite(fault: f64) -> SuiteReport {
    let mut r = SuiteReport::new(Suite::Variance);
    for g in 2..=32usize {
        let mut sweep_max = 0.0f64;
        for k in 0..=g {
            let closed = binary_variance(g, k) + fault;
            let via_group = crate::group_stats::unbiased_group_variance(
                &RewardGroup::binary(g, k).expect("valid binary group"),
            );
            let brute = brute_variance(g, k);
            sweep_max = sweep_max.max(brute);
            r.check(close(closed, brute, 1e-12), || format!("G={g} k={k}: {closed} vs {brute}"));
            r.check(close(via_group, brute, 1e-12), || format!("G={g} k={k}: group {via_group}"));
        }
        let n = g as f64;
        let formula = if g % 2 == 0 { n / (4.0 * (n - 1.0)) } else { (n + 1.0) / (4.0 * n) };
        let got = max_group_variance(g).expect("G >= 2") + fault;
        r.check(close(got, formula, 1e-12), || format!("G={g}: max {got} vs formula {formula}"));
        r.check(close(got, sweep_max, 1e-12), || format!("G={g}: max {got} vs sweep {sweep_max}"));
    }
    r.check(max_group_variance(1).is_err(), || "G=1 accepted".into());
    r
}

pub fn pcurve_suite(fault: f64) -> SuiteReport {
    let mut r = SuiteReport::new(Suite::Pcurve);
    for g in 2..=32usize {
        let p = |k| binary_p(g, k) + fault;
        r.check(close(p(0), 0.0, 1e-12) && close(p(g), 0.0, 1e-12), || format!("G={g}: endpoints"));
        r.check(close(p(g / 2), 1.0, 1e-12), || format!("G={g}: p(floor(G/2)) = {}", p(g / 2)));
        for k in 0..=g {
            r.check(close(p(k), p(g - k), 1e-12), || format!("G={g} k={k}: asymmetric"));
            r.check(p(k) <= 1.0 + 1e-12, || format!("G={g} k={k}: p above 1"));
            if g % 2 == 0 {
                let gap = 2.0 * k as f64 / g as f64 - 1.0;
                let want = 1.0 - gap * gap;
                r.check(close(p(k), want, 1e-12), || format!("G={g} k={k}: {} vs {want}", p(k)));
            }
            if k > 0 && k <= g / 2 {
                r.check(p(k) > p(k - 1), || format!("G={g} k={k}: not rising toward the centre"));
            }
        }
    }
    r
}

/// Small random batch for derivative checks: 2 to 4 groups, `G = 4`, targets
/// of length 1 or 2 in a world with at most 4 emitted positions.
///
/// Returns the batch, the snapshot the rollouts came from, and a nearby
/// parameter point at which objectives are evaluated.
pub fn random_small_batch(rng: &mut ChaCha8Rng, require_mixed: bool) -> (RolloutBatch, PolicyParams, PolicyParams) {
    let world = World { vocab: 2, l_max: 3 };
    loop {
        let n = rng.gen_range(2..=4usize);
        let tasks: Vec<SyntheticTask> = (0..n)
            .map(|i| SyntheticTask {
                query_id: i as u32,
                cluster_id: 0,
                target: (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(0..2)).collect(),
            })
            .collect();
        let mut old = PolicyParams::calibrated(world, &tasks, &[0.5]).expect("valid tasks");
        old.jitter(rng.gen(), 0.5);
        let groups: Vec<Group> = tasks
            .iter()
            .map(|t| Group::new(t.clone(), sample_group(&old, t, 4, rng.gen())).expect("valid group"))
            .collect();
        if require_mixed && !groups.iter().any(Group::is_mixed) {
            continue;
        }
        let mut new = old.clone();
        new.jitter(rng.gen(), 0.05);
        let batch = RolloutBatch::new(groups, 0.0).expect("uniform G");
        return (batch, old, new);
    }
}

/// Smallest distance from any ratio the objective clips to a clip bound.
fn clip_margin(method: Method, batch: &RolloutBatch, params: &PolicyParams, clip: &ClipConfig) -> f64 {
    let (lo, hi) = clip.bounds();
    let mut margin = f64::INFINITY;
    for g in &batch.groups {
        for r in &g.rollouts {
            let ratios: Vec<f64> = if method == Method::Gspo {
                vec![crate::objectives::sequence_ratio(params, &g.task, r)]
            } else {
                r.tokens
                    .iter()
                    .zip(&r.logprobs_old)
                    .enumerate()
                    .map(|(pos, (&tok, &old))| (params.token_logprob(&g.task, pos, tok) - old).exp())
                    .collect()
            };
            for x in ratios {
                margin = margin.min((x - lo).abs()).min((x - hi).abs());
            }
        }
    }
    margin
}

pub fn evaluate(
    method: Method,
    batch: &RolloutBatch,
    params: &PolicyParams,
    clip: &ClipConfig,
    kappa: f64,
) -> Result<ObjectiveOutput> {
    match method {
        Method::Grpo => grpo_objective(batch, params, clip),
        Method::Dapo => dapo_objective(batch, params, clip),
        Method::Gspo => gspo_objective(batch, params, clip),
        Method::Vcrl => vcrl_objective(batch, params, clip, kappa),
    }
}

/// Largest `|fd - analytic|` over all logits, relative to the largest
/// analytic entry, using central differences with step `h`.
pub fn fd_relative_error(
    method: Method,
    batch: &RolloutBatch,
    params: &PolicyParams,
    clip: &ClipConfig,
    kappa: f64,
    h: f64,
    fault: f64,
) -> Result<f64> {
    let mut analytic = evaluate(method, batch, params, clip, kappa)?.gradient.data;
    analytic[0] += fault;
    let scale = analytic.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (i, a) in analytic.iter().enumerate() {
        let base = probe.logits[i];
        probe.logits[i] = base + h;
        let fp = evaluate(method, batch, &probe, clip, kappa)?.value;
        probe.logits[i] = base - h;
        let fm = evaluate(method, batch, &probe, clip, kappa)?.value;
        probe.logits[i] = base;
        worst = worst.max(((fp - fm) / (2.0 * h) - a).abs());
    }
    Ok(worst / scale)
}

pub fn gradients_suite(seed: u64, batches: usize, fault: f64) -> SuiteReport {
    let mut r = SuiteReport::new(Suite::Gradients);
    for method in Method::ALL {
        let clip = method.default_clip();
        let mut rng = stream_rng(&[seed, 0x6772_6164, method as u64]);
        let mut done = 0;
        while done < batches {
            let (batch, _, params) = random_small_batch(&mut rng, method == Method::Dapo);
            if clip_margin(method, &batch, &params, &clip) < 1e-4 {
                continue;
            }
            done += 1;
            match fd_relative_error(method, &batch, &params, &clip, 0.8, 1e-5, fault) {
                Ok(err) => r.check(err <= 1e-6, || format!("{method} batch {done}: rel err {err:.3e}")),
                Err(e) => r.check(false, || format!("{method} batch {done}: {e}")),
            }
        }
    }
    r
}

/// `P(n) = a^n P0 + (1 - a) sum_{j=1..n} a^(n-j) j`.
pub fn priority_closed_form(p0: f64, alpha: f64, n: u32) -> f64 {
    let decay = alpha.powi(n as i32) * p0;
    let drift: f64 = (1..=n).map(|j| alpha.powi((n - j) as i32) * f64::from(j)).sum();
    decay + (1.0 - alpha) * drift
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

pub fn bank_suite(seed: u64, fault: f64) -> SuiteReport {
    let mut r = SuiteReport::new(Suite::Bank);
    let mut rng = stream_rng(&[seed, 0x6261_6e6b]);

    for trial in 0..200 {
        let alpha = rng.gen_range(0.0..0.99);
        let p0 = rng.gen_range(0.0..1.0);
        let n = rng.gen_range(0..60u32);
        let mut bank = MemoryBank::new(BankConfig {
            momentum: alpha,
            ..BankConfig::default()
        })
        .expect("valid config");
        bank.push(7, p0);
        for _ in 0..n {
            bank.tick(alpha);
        }
        let got = bank.snapshot()[0].priority + fault;
        let want = priority_closed_form(p0, alpha, n);
        r.check(close(got, want, 1e-12 * want.abs().max(1.0)), || {
            format!("trial {trial}: a={alpha} P0={p0} n={n}: {got} vs {want}")
        });
    }

    // Pop order: priority descending, earlier insertion first on ties.
    let priorities = [0.5, 0.9, 0.5, 0.1, 0.9];
    for perm in permutations(&[0, 1, 2, 3, 4]) {
        let mut bank = MemoryBank::new(BankConfig::default()).expect("default config");
        for &q in &perm {
            bank.push(q as u32, priorities[q]);
        }
        let mut want: Vec<(usize, usize)> = perm.iter().enumerate().map(|(seq, &q)| (q, seq)).collect();
        want.sort_by(|a, b| priorities[b.0].total_cmp(&priorities[a.0]).then(a.1.cmp(&b.1)));
        let want: Vec<u32> = want.into_iter().map(|(q, _)| q as u32).collect();
        let snap: Vec<u32> = bank.snapshot().iter().map(|e| e.query_id).collect();
        let mut first = bank.pop_batch(2);
        first.extend(bank.pop_batch(10));
        r.check(snap == want && first == want, || format!("order {perm:?}: {first:?} vs {want:?}"));
    }

    // Lifetime replay cap under an adversarial push/pop loop.
    let mut bank = MemoryBank::new(BankConfig::default()).expect("default config");
    let mut pops = std::collections::BTreeMap::<u32, u32>::new();
    for _ in 0..500 {
        for q in 0..8u32 {
            bank.push(q, rng.gen());
        }
        bank.tick(0.9);
        for q in bank.pop_batch(rng.gen_range(0..6)) {
            *pops.entry(q).or_insert(0) += 1;
        }
    }
    r.check(pops.values().all(|&c| c <= 2), || format!("replay cap exceeded: {pops:?}"));
    r.check(pops.values().any(|&c| c == 2), || "cap never reached; fixture too weak".into());
    r
}

pub fn term_norms_suite(seed: u64, batches: usize, fault: f64) -> SuiteReport {
    let mut r = SuiteReport::new(Suite::TermNorms);
    for kappa in [0.0f64, 0.3, 0.8] {
        let mut rng = stream_rng(&[seed, 0x7468_6d31, kappa.to_bits()]);
        for i in 0..batches {
            let (batch, _, params) = random_small_batch(&mut rng, false);
            let ok = if fault == 0.0 {
                per_term_gradnorm_check(&batch, &params, kappa)
            } else {
                term_gradnorms(&batch, &params, kappa)
                    .iter()
                    .all(|&(m, full)| m * (1.0 + fault) + fault <= full)
            };
            r.check(ok, || format!("kappa={kappa} batch {i}: a masked term exceeds its unmasked norm"));
        }
    }
    r
}

fn fake_group(query_id: u32, g: usize, k: usize) -> Group {
    let world = World::default();
    let task = SyntheticTask {
        query_id,
        cluster_id: 0,
        target: vec![0],
    };
    let rollouts = (0..g)
        .map(|i| Rollout {
            query_id,
            tokens: vec![world.eos()],
            logprobs_old: vec![0.0],
            reward: if i < k { 1.0 } else { 0.0 },
        })
        .collect();
    Group::new(task, rollouts).expect("valid group")
}

pub fn filters_suite(seed: u64, groups: usize, fault: f64) -> SuiteReport {
    let mut r = SuiteReport::new(Suite::Filters);
    let mut rng = stream_rng(&[seed, 0x6669_6c74]);
    for i in 0..groups {
        let g = rng.gen_range(2..=32usize);
        let k = rng.gen_range(0..=g);
        let batch = RolloutBatch::new(vec![fake_group(0, g, k)], 1e-9).expect("single group");
        let mask = vcrl_mask(&batch, 1e-9 + fault)[0];
        let dapo_keeps = 0 < k && k < g;
        r.check(mask == dapo_keeps, || format!("group {i} G={g} k={k}: mask {mask}, dapo {dapo_keeps}"));
    }

    // kappa = 0: the masked objective is the plain group objective.
    let clip = Method::Vcrl.default_clip();
    for i in 0..100 {
        let (batch, _, params) = random_small_batch(&mut rng, false);
        let v = vcrl_objective(&batch, &params, &clip, 0.0).expect("non-empty batch");
        let g = grpo_objective(&batch, &params, &clip).expect("non-empty batch");
        let dv = (v.value + fault - g.value).abs();
        let dg = v
            .gradient
            .data
            .iter()
            .zip(&g.gradient.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        r.check(dv <= 1e-12 && dg <= 1e-12, || format!("batch {i}: value diff {dv:e}, grad diff {dg:e}"));
    }

    // kappa = 0.8 at G = 16 keeps exactly k in 5..=11.
    let kept: Vec<usize> = (0..=16)
        .filter(|&k| {
            let batch = RolloutBatch::new(vec![fake_group(0, 16, k)], 0.8).expect("single group");
            vcrl_mask(&batch, 0.8 + fault)[0]
        })
        .collect();
    r.check(kept == (5..=11).collect::<Vec<_>>(), || format!("kappa 0.8 keeps {kept:?}"));
    r
}

fn naive_window(series: &[f64], i: usize, window: usize) -> Vec<f64> {
    let start = (i + 1).saturating_sub(window);
    let mut out = Vec::new();
    let mut j = start;
    while j <= i {
        out.push(series[j]);
        j += 1;
    }
    out
}

pub fn smoothing_suite(seed: u64, fault: f64) -> SuiteReport {
    let mut r = SuiteReport::new(Suite::Smoothing);
    let mut rng = stream_rng(&[seed, 0x736d_6f6f]);
    for trial in 0..50 {
        let n = rng.gen_range(1..200usize);
        let series: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        for window in [1usize, 5, 20] {
            let ma = moving_average(&series, window);
            let sd = rolling_std(&series, window);
            for i in 0..n {
                let w = naive_window(&series, i, window);
                let m = w.len() as f64;
                let mean = w.iter().sum::<f64>() / m;
                // Textbook sum-of-squares form, independent of the two-pass code.
                let sq: f64 = w.iter().map(|x| x * x).sum();
                let var = if w.len() < 2 { 0.0 } else { ((sq - m * mean * mean) / (m - 1.0)).max(0.0) };
                let (got_m, got_s) = (ma[i] + fault, sd[i]);
                r.check(close(got_m, mean, 1e-12), || format!("trial {trial} w={window} i={i}: mean"));
                r.check(close(got_s, var.sqrt(), 1e-9), || format!("trial {trial} w={window} i={i}: std"));
            }
        }
        r.check(moving_average(&series, 1) == series, || format!("trial {trial}: window 1 not identity"));
    }
    let ones: Vec<f64> = (1..=20).map(f64::from).collect();
    r.check(close(moving_average(&ones, 20)[19], 10.5, 1e-12), || "mean of 1..20".into());
    let alt: Vec<f64> = (0..20).map(|i| f64::from(i % 2)).collect();
    r.check(close(rolling_std(&alt, 20)[19], (5.0f64 / 19.0).sqrt(), 1e-12), || "alternating std".into());
    r.check(close(rolling_std(&[0.0, 1.0], 20)[1], 0.5f64.sqrt(), 1e-12), || "two-point std".into());
    r
}

/// Success probability by enumerating the product of correct-path token
/// probabilities, written independently of the library oracle.
fn path_probability(params: &PolicyParams, task: &SyntheticTask) -> f64 {
    let ctx = params.context_of(task);
    let mut prob = 1.0;
    for (pos, &tok) in task.target.iter().chain([params.world.eos()].iter()).enumerate() {
        let row = params.row(ctx, pos);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        prob *= row[tok as usize].exp() / z;
    }
    prob
}

pub fn env_suite(fault: f64) -> SuiteReport {
    let mut r = SuiteReport::new(Suite::Env);
    let world = World::default();
    let tasks = crate::env::gen_corpus(11, &crate::env::default_clusters(20), &world).expect("valid corpus");
    let levels = crate::config::DEFAULT_LEVELS;
    let mut params = PolicyParams::calibrated(world, &tasks, &levels).expect("valid calibration");
    for t in &tasks {
        let got = success_probability(&params, t) + fault;
        let want = levels[t.cluster_id as usize];
        r.check(close(got, want, 1e-12), || format!("query {}: {got} vs level {want}", t.query_id));
    }
    params.jitter(5, 0.7);
    for t in &tasks {
        let got = success_probability(&params, t) + fault;
        let want = path_probability(&params, t);
        r.check(close(got, want, 1e-12), || format!("jittered query {}: {got} vs {want}", t.query_id));
    }
    // Empirical success rate over many rollouts agrees with the oracle.
    let t = &tasks[tasks.len() / 2];
    let s = success_probability(&params, t);
    let n = 20_000;
    let wins: f64 = sample_group(&params, t, n, 99).iter().map(|x| x.reward).sum();
    let se = (s * (1.0 - s) / n as f64).sqrt();
    r.check((wins / n as f64 - s).abs() <= 4.0 * se + fault, || {
        format!("empirical {} vs oracle {s}", wins / n as f64)
    });
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.as_str().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn closed_form_priority() {
        assert_eq!(priority_closed_form(0.5, 0.9, 0), 0.5);
        assert!((priority_closed_form(0.5, 0.9, 1) - 0.55).abs() < 1e-15);
        assert!((priority_closed_form(0.5, 0.9, 2) - 0.695).abs() < 1e-15);
    }

    #[test]
    fn cheap_suites_pass_and_faults_are_caught() {
        for s in [Suite::Variance, Suite::Pcurve, Suite::Bank, Suite::Smoothing, Suite::Filters] {
            assert!(run_suite(s, 0, 0.0).passed(), "{s}");
            assert!(!run_suite(s, 0, FAULT).passed(), "{s} missed the injected fault");
        }
    }
}
