//! Synthetic verifiable-reward world.
//!
//! A task asks the policy to emit an exact token sequence followed by the
//! end-of-sequence token. The policy is tabular: one row of logits per
//! (query, position), with `V + 1` categories where index `V` is EOS. Because
//! the per-position distributions do not depend on earlier tokens, the
//! probability that a sampled response is verified correct has a closed form
//! ([`success_probability`]), which the tests use as the ground truth for
//! every group statistic.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory_bank::QueryId;

pub type Token = u32;

/// Vocabulary size and maximum target length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    pub vocab: usize,
    pub l_max: usize,
}

impl Default for World {
    fn default() -> Self {
        Self { vocab: 8, l_max: 12 }
    }
}

impl World {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config(format!("vocab {} < 2", self.vocab)));
        }
        if self.l_max < 1 {
            return Err(Error::Config("l_max must be >= 1".into()));
        }
        Ok(())
    }

    pub fn eos(&self) -> Token {
        self.vocab as Token
    }

    /// Categories per position, EOS included.
    pub fn categories(&self) -> usize {
        self.vocab + 1
    }

    /// Positions with their own logits: `0..=l_max`.
    pub fn positions(&self) -> usize {
        self.l_max + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub query_id: QueryId,
    pub cluster_id: u32,
    pub target: Vec<Token>,
}

impl SyntheticTask {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn validate(&self, world: &World) -> Result<()> {
        if self.target.is_empty() || self.target.len() > world.l_max {
            return Err(Error::Config(format!(
                "query {}: target length {} outside [1, {}]",
                self.query_id,
                self.target.len(),
                world.l_max
            )));
        }
        if let Some(t) = self.target.iter().find(|&&t| t >= world.eos()) {
            return Err(Error::Config(format!(
                "query {}: target token {t} not below vocab {}",
                self.query_id, world.vocab
            )));
        }
        Ok(())
    }
}

/// Target-length range and task count of one cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub min_len: usize,
    pub max_len: usize,
    pub count: usize,
}

impl ClusterSpec {
    /// Parses `LEN:COUNT` or `MIN-MAX:COUNT`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cluster spec '{s}': expected LEN:COUNT or MIN-MAX:COUNT"));
        let (lens, count) = s.trim().split_once(':').ok_or_else(bad)?;
        let count = count.trim().parse().map_err(|_| bad())?;
        let (min_len, max_len) = match lens.split_once('-') {
            Some((a, b)) => (
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            ),
            None => {
                let l = lens.trim().parse().map_err(|_| bad())?;
                (l, l)
            }
        };
        Ok(Self {
            min_len,
            max_len,
            count,
        })
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').map(Self::parse).collect()
    }
}

/// The default three-cluster world: easy, medium and hard by target length.
pub fn default_clusters(per_cluster: usize) -> Vec<ClusterSpec> {
    [2, 5, 9]
        .into_iter()
        .map(|l| ClusterSpec {
            min_len: l,
            max_len: l,
            count: per_cluster,
        })
        .collect()
}

/// Generates tasks cluster by cluster; query ids are dense from zero.
pub fn gen_corpus(seed: u64, clusters: &[ClusterSpec], world: &World) -> Result<Vec<SyntheticTask>> {
    world.validate()?;
    for (c, spec) in clusters.iter().enumerate() {
        if spec.min_len < 1 || spec.min_len > spec.max_len || spec.max_len > world.l_max {
            return Err(Error::Config(format!(
                "cluster {c}: length range {}-{} not within [1, {}]",
                spec.min_len, spec.max_len, world.l_max
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::new();
    for (c, spec) in clusters.iter().enumerate() {
        for _ in 0..spec.count {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let target = (0..len).map(|_| rng.gen_range(0..world.eos())).collect();
            tasks.push(SyntheticTask {
                query_id: tasks.len() as QueryId,
                cluster_id: c as u32,
                target,
            });
        }
    }
    Ok(tasks)
}

pub fn save_corpus(path: &Path, tasks: &[SyntheticTask]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in tasks {
        let line = serde_json::to_string(t).expect("task serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a corpus and checks that query ids are dense `0..n` in file order.
pub fn load_corpus(path: &Path) -> Result<Vec<SyntheticTask>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tasks = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let task: SyntheticTask =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        if task.query_id as usize != tasks.len() {
            return Err(Error::parse(
                path,
                i + 1,
                format!("query_id {} out of sequence (expected {})", task.query_id, tasks.len()),
            ));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

/// Index layout shared by logits and gradients: `(context, position, category)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub contexts: usize,
    pub positions: usize,
    pub categories: usize,
}

impl Shape {
    pub fn new(contexts: usize, world: &World) -> Self {
        Self {
            contexts,
            positions: world.positions(),
            categories: world.categories(),
        }
    }

    pub fn len(&self) -> usize {
        self.contexts * self.positions * self.categories
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row_start(&self, context: usize, position: usize) -> usize {
        (context * self.positions + position) * self.categories
    }

    pub fn index(&self, context: usize, position: usize, category: usize) -> usize {
        self.row_start(context, position) + category
    }
}

/// Dense tensor shaped like the policy logits; used for gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Gradient {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn row(&self, context: usize, position: usize) -> &[f64] {
        let s = self.shape.row_start(context, position);
        &self.data[s..s + self.shape.categories]
    }
}

/// Tabular autoregressive policy: one logit row per (query, position).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub world: World,
    pub shape: Shape,
    pub logits: Vec<f64>,
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

fn entropy_of(row: &[f64]) -> f64 {
    log_softmax(row)
        .into_iter()
        .map(|lp| if lp == f64::NEG_INFINITY { 0.0 } else { -lp.exp() * lp })
        .sum()
}

impl PolicyParams {
    /// All-zero logits (uniform over `V + 1` categories) for `contexts` queries.
    pub fn uniform(world: World, contexts: usize) -> Self {
        let shape = Shape::new(contexts, &world);
        Self {
            world,
            shape,
            logits: vec![0.0; shape.len()],
        }
    }

    /// Logits whose exact success probability on each task equals the level
    /// assigned to its cluster.
    ///
    /// Every position on the correct path (target tokens, then EOS at
    /// position `L`) gets probability `q = s^(1/(L+1))` by adding a bias
    /// `ln(qV / (1 - q))` to the correct category; all other logits stay 0.
    pub fn calibrated(world: World, tasks: &[SyntheticTask], levels: &[f64]) -> Result<Self> {
        let mut params = Self::uniform(world, tasks.len());
        for task in tasks {
            task.validate(&world)?;
            let s = *levels.get(task.cluster_id as usize).ok_or_else(|| {
                Error::Config(format!(
                    "no calibration level for cluster {} ({} given)",
                    task.cluster_id,
                    levels.len()
                ))
            })?;
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::Config(format!("calibration level {s} outside (0, 1)")));
            }
            let q = s.powf(1.0 / (task.len() + 1) as f64);
            let bias = (q * world.vocab as f64 / (1.0 - q)).ln();
            let ctx = params.context_of(task);
            for (pos, tok) in task.target.iter().chain(std::iter::once(&world.eos())).enumerate() {
                let idx = params.shape.index(ctx, pos, *tok as usize);
                params.logits[idx] = bias;
            }
        }
        Ok(params)
    }

    /// Adds uniform noise in `[-scale, scale]` to every logit.
    pub fn jitter(&mut self, seed: u64, scale: f64) {
        if scale == 0.0 {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for x in &mut self.logits {
            *x += rng.gen_range(-scale..=scale);
        }
    }

    pub fn context_of(&self, task: &SyntheticTask) -> usize {
        task.query_id as usize
    }

    pub fn row(&self, context: usize, position: usize) -> &[f64] {
        let s = self.shape.row_start(context, position);
        &self.logits[s..s + self.shape.categories]
    }

    pub fn row_mut(&mut self, context: usize, position: usize) -> &mut [f64] {
        let s = self.shape.row_start(context, position);
        let c = self.shape.categories;
        &mut self.logits[s..s + c]
    }

    pub fn token_logprob(&self, task: &SyntheticTask, position: usize, token: Token) -> f64 {
        log_softmax(self.row(self.context_of(task), position))[token as usize]
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().all(|x| x.is_finite())
    }

    fn check_task(&self, task: &SyntheticTask) -> Result<()> {
        if self.context_of(task) >= self.shape.contexts {
            return Err(Error::InvalidRollout(format!(
                "query {} has no logit row ({} rows)",
                task.query_id, self.shape.contexts
            )));
        }
        Ok(())
    }
}

/// Exact probability that one sampled response to `task` is verified correct.
pub fn success_probability(params: &PolicyParams, task: &SyntheticTask) -> f64 {
    let ctx = params.context_of(task);
    let eos = params.world.eos();
    task.target
        .iter()
        .chain(std::iter::once(&eos))
        .enumerate()
        .map(|(pos, &tok)| log_softmax(params.row(ctx, pos))[tok as usize])
        .sum::<f64>()
        .exp()
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub query_id: QueryId,
    pub tokens: Vec<Token>,
    pub logprobs_old: Vec<f64>,
    pub reward: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Exact-match verifier: target tokens followed by EOS, nothing else.
pub fn verify(task: &SyntheticTask, tokens: &[Token], world: &World) -> f64 {
    let l = task.len();
    let ok = tokens.len() == l + 1 && tokens[..l] == task.target[..] && tokens[l] == world.eos();
    if ok {
        1.0
    } else {
        0.0
    }
}

/// Folds several integers into one seed (SplitMix64 mixing).
pub fn stream_seed(parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(0x9e37_79b9_7f4a_7c15, |acc, &p| {
        mix(acc.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ mix(p))
    })
}

pub fn stream_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(parts))
}

/// Samples one response position by position until EOS, or until every
/// position `0..=l_max` has emitted a non-EOS token (truncation).
pub fn sample_rollout(params: &PolicyParams, task: &SyntheticTask, rng: &mut impl Rng) -> Rollout {
    let world = params.world;
    let ctx = params.context_of(task);
    let mut tokens = Vec::new();
    let mut logprobs_old = Vec::new();
    for pos in 0..world.positions() {
        let lp = log_softmax(params.row(ctx, pos));
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut tok = lp.len() - 1;
        for (c, l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                tok = c;
                break;
            }
        }
        tokens.push(tok as Token);
        logprobs_old.push(lp[tok]);
        if tok as Token == world.eos() {
            break;
        }
    }
    let reward = verify(task, &tokens, &world);
    Rollout {
        query_id: task.query_id,
        tokens,
        logprobs_old,
        reward,
    }
}

/// `g` independent responses; rollout `i` draws from its own stream `(seed, i)`.
pub fn sample_group(params: &PolicyParams, task: &SyntheticTask, g: usize, seed: u64) -> Vec<Rollout> {
    (0..g)
        .map(|i| sample_rollout(params, task, &mut stream_rng(&[seed, i as u64])))
        .collect()
}

fn check_emission(params: &PolicyParams, tokens: &[Token]) -> Result<()> {
    let world = params.world;
    if tokens.is_empty() || tokens.len() > world.positions() {
        return Err(Error::InvalidRollout(format!(
            "length {} outside [1, {}]",
            tokens.len(),
            world.positions()
        )));
    }
    if let Some(t) = tokens.iter().find(|&&t| t > world.eos()) {
        return Err(Error::InvalidRollout(format!("token {t} out of range")));
    }
    if tokens[..tokens.len() - 1].contains(&world.eos()) {
        return Err(Error::InvalidRollout("EOS before the final token".into()));
    }
    Ok(())
}

/// Total log-probability of `tokens` and its gradient with respect to every logit.
pub fn logprob_and_grad(
    params: &PolicyParams,
    task: &SyntheticTask,
    tokens: &[Token],
) -> Result<(f64, Gradient)> {
    params.check_task(task)?;
    check_emission(params, tokens)?;
    let ctx = params.context_of(task);
    let mut grad = Gradient::zeros(params.shape);
    let mut total = 0.0;
    for (pos, &tok) in tokens.iter().enumerate() {
        let lp = log_softmax(params.row(ctx, pos));
        total += lp[tok as usize];
        let start = grad.shape.row_start(ctx, pos);
        for (c, l) in lp.iter().enumerate() {
            grad.data[start + c] = -l.exp();
        }
        grad.data[start + tok as usize] += 1.0;
    }
    Ok((total, grad))
}

/// Mean categorical entropy over all positions `0..=l_max` of the task's rows.
pub fn policy_entropy(params: &PolicyParams, task: &SyntheticTask) -> f64 {
    let ctx = params.context_of(task);
    let n = params.shape.positions;
    (0..n).map(|pos| entropy_of(params.row(ctx, pos))).sum::<f64>() / n as f64
}

/// Mean entropy over the positions a rollout actually emitted.
pub fn rollout_entropy(params: &PolicyParams, task: &SyntheticTask, rollout: &Rollout) -> f64 {
    let ctx = params.context_of(task);
    let n = rollout.len().max(1);
    (0..rollout.len())
        .map(|pos| entropy_of(params.row(ctx, pos)))
        .sum::<f64>()
        / n as f64
}

/// Uniform sample of `n` distinct indices from `0..len`, in sampled order.
pub fn sample_indices(rng: &mut impl Rng, len: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let (chosen, _) = idx.partial_shuffle(rng, n.min(len));
    chosen.to_vec()
}
