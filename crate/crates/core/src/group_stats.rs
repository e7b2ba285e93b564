//! Statistics of one rollout group's rewards.
//!
//! For binary rewards with `k` successes out of `G` the unbiased group
//! variance is `k(G-k) / (G(G-1))`, maximised at `k = floor(G/2)`. The
//! normalised score `p = variance / variance_max` is zero for groups that are
//! all-correct or all-wrong and one for the most balanced groups.

use crate::error::{Error, Result};

/// The `G` rewards of one query's rollout group.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardGroup {
    rewards: Vec<f64>,
}

impl RewardGroup {
    pub fn new(rewards: Vec<f64>) -> Result<Self> {
        if rewards.len() < 2 {
            return Err(Error::InvalidGroup(format!(
                "group size {} < 2",
                rewards.len()
            )));
        }
        if let Some(r) = rewards.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::InvalidGroup(format!("reward {r} outside [0, 1]")));
        }
        Ok(Self { rewards })
    }

    /// Binary group with `k` ones followed by `g - k` zeros.
    pub fn binary(g: usize, k: usize) -> Result<Self> {
        if k > g {
            return Err(Error::InvalidGroup(format!("k = {k} exceeds G = {g}")));
        }
        let mut rewards = vec![1.0; k];
        rewards.resize(g, 0.0);
        Self::new(rewards)
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.rewards.iter().all(|&r| r == 0.0 || r == 1.0)
    }

    /// Number of rewards exactly equal to 1, when every reward is 0 or 1.
    pub fn k(&self) -> Option<usize> {
        self.is_binary()
            .then(|| self.rewards.iter().filter(|&&r| r == 1.0).count())
    }
}

/// Derived difficulty statistics of a group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupDifficulty {
    pub variance: f64,
    pub variance_max: f64,
    pub p: f64,
    /// Only defined for binary rewards.
    pub outcome_gap: Option<f64>,
}

impl GroupDifficulty {
    pub fn of(group: &RewardGroup) -> Self {
        Self {
            variance: unbiased_group_variance(group),
            variance_max: max_variance_for(group.len()),
            p: normalized_p(group),
            outcome_gap: outcome_gap(group).ok(),
        }
    }
}

/// Unbiased sample variance (divisor `G - 1`).
///
/// Binary groups take the closed form `k(G-k) / (G(G-1))`; anything else
/// goes through the general sum of squared deviations.
pub fn unbiased_group_variance(group: &RewardGroup) -> f64 {
    let g = group.len();
    if let Some(k) = group.k() {
        return binary_variance(g, k);
    }
    let n = g as f64;
    let mean = group.rewards.iter().sum::<f64>() / n;
    group.rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// `k(G-k) / (G(G-1))`. Callers guarantee `G >= 2` and `k <= G`.
pub fn binary_variance(g: usize, k: usize) -> f64 {
    let (g, k) = (g as f64, k as f64);
    k * (g - k) / (g * (g - 1.0))
}

/// Largest value the unbiased estimator can take for binary rewards.
pub fn max_group_variance(g: usize) -> Result<f64> {
    if g < 2 {
        return Err(Error::InvalidGroup(format!("group size {g} < 2")));
    }
    Ok(max_variance_for(g))
}

fn max_variance_for(g: usize) -> f64 {
    let n = g as f64;
    if g.is_multiple_of(2) {
        n / (4.0 * (n - 1.0))
    } else {
        (n + 1.0) / (4.0 * n)
    }
}

/// Normalised group variance `p` in `[0, 1]`.
pub fn normalized_p(group: &RewardGroup) -> f64 {
    (unbiased_group_variance(group) / max_variance_for(group.len())).clamp(0.0, 1.0)
}

/// `p` for a binary group described only by its counts.
pub fn binary_p(g: usize, k: usize) -> f64 {
    (binary_variance(g, k) / max_variance_for(g)).clamp(0.0, 1.0)
}

/// Empirical `|P[r=1] - P[r=0]| = |2k/G - 1|`.
pub fn outcome_gap(group: &RewardGroup) -> Result<f64> {
    let k = group.k().ok_or_else(|| {
        Error::UnsupportedReward("outcome gap needs rewards in {0, 1}".to_string())
    })?;
    Ok((2.0 * k as f64 / group.len() as f64 - 1.0).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    // Sample variance straight from the definition, never the closed form.
    fn brute_variance(r: &[f64]) -> f64 {
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    }

    #[test]
    fn variance_examples() {
        let g = RewardGroup::binary(16, 8).unwrap();
        assert!((unbiased_group_variance(&g) - 4.0 / 15.0).abs() < 1e-12);
        assert!((brute_variance(g.rewards()) - 4.0 / 15.0).abs() < 1e-12);
        assert_eq!(unbiased_group_variance(&RewardGroup::binary(16, 0).unwrap()), 0.0);
        let g5 = RewardGroup::new(vec![1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((brute_variance(g5.rewards()) - 0.3).abs() < 1e-12);
        assert!((unbiased_group_variance(&g5) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn max_variance_examples() {
        assert!((max_group_variance(16).unwrap() - 4.0 / 15.0).abs() < 1e-12);
        assert_eq!(max_group_variance(2).unwrap(), 0.5);
        assert!((max_group_variance(5).unwrap() - 0.3).abs() < 1e-12);
        for g in 2..=32 {
            let sweep = (0..=g)
                .map(|k| {
                    let kf = k as f64;
                    let gf = g as f64;
                    kf * (gf - kf) / (gf * (gf - 1.0))
                })
                .fold(0.0, f64::max);
            assert!((max_group_variance(g).unwrap() - sweep).abs() < 1e-12, "G={g}");
        }
    }

    #[test]
    fn small_groups_rejected() {
        assert!(matches!(max_group_variance(1), Err(Error::InvalidGroup(_))));
        assert!(matches!(RewardGroup::new(vec![1.0]), Err(Error::InvalidGroup(_))));
        assert!(RewardGroup::new(vec![0.5, 1.5]).is_err());
    }

    #[test]
    fn p_examples() {
        let p = |k| normalized_p(&RewardGroup::binary(16, k).unwrap());
        assert!((p(8) - 1.0).abs() < 1e-12);
        assert_eq!(p(0), 0.0);
        assert!((p(4) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn gap_examples() {
        let gap = |k| outcome_gap(&RewardGroup::binary(16, k).unwrap()).unwrap();
        assert_eq!(gap(8), 0.0);
        assert_eq!(gap(16), 1.0);
        assert!((gap(4) - 0.5).abs() < 1e-12);
        let shaped = RewardGroup::new(vec![0.5, 1.0, 0.0]).unwrap();
        assert!(matches!(outcome_gap(&shaped), Err(Error::UnsupportedReward(_))));
    }

    #[test]
    fn shaped_rewards_use_general_path() {
        let g = RewardGroup::new(vec![0.25, 0.75, 0.5, 1.0]).unwrap();
        assert_eq!(g.k(), None);
        assert!((unbiased_group_variance(&g) - brute_variance(g.rewards())).abs() < 1e-15);
        let p = normalized_p(&g);
        assert!((0.0..=1.0).contains(&p));
        let d = GroupDifficulty::of(&g);
        assert!(d.outcome_gap.is_none());
    }

    #[test]
    fn p_curve_is_u_shaped() {
        for g in 2..=32usize {
            let ps: Vec<f64> = (0..=g).map(|k| binary_p(g, k)).collect();
            assert_eq!(ps[0], 0.0);
            assert_eq!(ps[g], 0.0);
            assert!((ps[g / 2] - 1.0).abs() < 1e-12);
            for k in 0..=g {
                assert!((ps[k] - ps[g - k]).abs() < 1e-12);
            }
            for k in 1..=g / 2 {
                assert!(ps[k] >= ps[k - 1]);
            }
            for k in g / 2 + 1..=g {
                assert!(ps[k] <= ps[k - 1]);
            }
            if g % 2 == 0 {
                for k in 0..=g {
                    let gap = (2.0 * k as f64 / g as f64 - 1.0).abs();
                    assert!((ps[k] - (1.0 - gap * gap)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn difficulty_bundle() {
        let d = GroupDifficulty::of(&RewardGroup::binary(16, 4).unwrap());
        assert!(d.variance <= d.variance_max);
        assert!((d.p - 0.75).abs() < 1e-12);
        assert_eq!(d.outcome_gap, Some(0.5));
    }
}
