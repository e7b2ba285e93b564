//! Sampling statistics of the synthetic world against exact Binomial oracles.

use vcrl_core::env::{sample_group, success_probability, PolicyParams, SyntheticTask, World};
use vcrl_core::group_stats::{binary_p, max_group_variance};

fn binomial_pmf(n: usize, k: usize, s: f64) -> f64 {
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c * s.powi(k as i32) * (1.0 - s).powi((n - k) as i32)
}

fn calibrated(level: f64, target: Vec<u32>) -> (PolicyParams, SyntheticTask) {
    let task = SyntheticTask {
        query_id: 0,
        cluster_id: 0,
        target,
    };
    let params = PolicyParams::calibrated(World::default(), std::slice::from_ref(&task), &[level]).unwrap();
    (params, task)
}

/// Success counts `k` of `groups` independent groups of size `g`.
fn success_counts(params: &PolicyParams, task: &SyntheticTask, g: usize, groups: usize) -> Vec<usize> {
    (0..groups as u64)
        .map(|i| {
            sample_group(params, task, g, 1_000_003 * i + 17)
                .iter()
                .filter(|r| r.reward == 1.0)
                .count()
        })
        .collect()
}

#[test]
fn success_count_histogram_is_binomial() {
    let (g, groups) = (16, 10_000);
    let (params, task) = calibrated(0.3, vec![1, 4, 2]);
    let s = success_probability(&params, &task);
    assert!((s - 0.3).abs() < 1e-12);
    let mut hist = vec![0usize; g + 1];
    for k in success_counts(&params, &task, g, groups) {
        hist[k] += 1;
    }
    for (k, &c) in hist.iter().enumerate() {
        let pmf = binomial_pmf(g, k, s);
        let se = (pmf * (1.0 - pmf) / groups as f64).sqrt();
        let freq = c as f64 / groups as f64;
        assert!((freq - pmf).abs() <= 3.0 * se + 1e-12, "k={k}: {freq} vs {pmf} (se {se})");
    }
}

#[test]
fn expected_p_matches_exact_value() {
    // E[unbiased variance] = s(1 - s), so E[p] = s(1 - s) / max variance.
    let (g, groups) = (16, 10_000);
    for level in [0.5, 0.2] {
        let (params, task) = calibrated(level, vec![3, 3, 0, 7]);
        let ks = success_counts(&params, &task, g, groups);
        let mc = ks.iter().map(|&k| binary_p(g, k)).sum::<f64>() / groups as f64;
        let exact_from_pmf: f64 = (0..=g).map(|k| binomial_pmf(g, k, level) * binary_p(g, k)).sum();
        let exact = level * (1.0 - level) / max_group_variance(g).unwrap();
        assert!((exact - exact_from_pmf).abs() < 1e-12);
        assert!((mc - exact).abs() < 0.01, "level {level}: MC {mc} vs {exact}");
    }
}

#[test]
fn half_success_mean_rate() {
    let (g, groups) = (16, 10_000);
    let (params, task) = calibrated(0.5, vec![5; 9]);
    let ks = success_counts(&params, &task, g, groups);
    let rate = ks.iter().sum::<usize>() as f64 / (g * groups) as f64;
    assert!((rate - 0.5).abs() < 0.02, "{rate}");
}
