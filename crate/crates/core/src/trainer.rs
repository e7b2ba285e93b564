//! Step pipeline: sample, roll out, filter by `p`, replay from the memory
//! bank, update, and refill the bank.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{InitScheme, KappaSchedule, Method, Shortfall, TrainConfig};
use crate::env::{
    rollout_entropy, sample_group, sample_indices, stream_rng, stream_seed, Gradient, PolicyParams,
    SyntheticTask,
};
use crate::error::{Error, Result};
use crate::memory_bank::{BankState, MemoryBank};
use crate::metrics::{MetricsSink, StepMetrics};
use crate::objectives::{
    dapo_objective, grpo_objective, gspo_objective, vcrl_objective, Group, ObjectiveOutput, RolloutBatch,
};
use crate::optim::OptimizerState;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

// Stream tags keep the per-step random streams apart.
const TAG_BATCH: u64 = 1;
const TAG_TOPUP: u64 = 2;
const PHASE_CORPUS: u64 = 0;
const PHASE_REPLAY: u64 = 1;
const PHASE_TOPUP: u64 = 2;

/// `early` for steps `1..=switch_step`, `late` afterwards.
pub fn kappa_at(step: u64, schedule: &KappaSchedule) -> f64 {
    if step <= schedule.switch_step {
        schedule.early
    } else {
        schedule.late
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub config: TrainConfig,
    pub params: PolicyParams,
    pub optimizer: OptimizerState,
    pub bank: BankState,
    /// Random streams are keyed by step, so the step is the whole cursor.
    pub stream_cursor: u64,
    /// Metric records written so far.
    pub metrics_cursor: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::parse(path, 1, e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "{}: checkpoint version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

pub struct Trainer {
    config: TrainConfig,
    tasks: Vec<SyntheticTask>,
    clusters: usize,
    params: PolicyParams,
    opt: OptimizerState,
    bank: MemoryBank,
    step: u64,
}

/// Objective result plus bookkeeping for a step that may have no update.
struct Update {
    value: f64,
    gradient: Gradient,
    mask: Vec<bool>,
    zero: bool,
}

impl Trainer {
    pub fn new(config: TrainConfig, tasks: Vec<SyntheticTask>) -> Result<Self> {
        config.validate()?;
        if tasks.is_empty() {
            return Err(Error::Config("empty corpus".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            t.validate(&config.world)?;
            if t.query_id as usize != i {
                return Err(Error::Config(format!("query ids must be dense: index {i} has id {}", t.query_id)));
            }
        }
        let mut params = match &config.init {
            InitScheme::Uniform => PolicyParams::uniform(config.world, tasks.len()),
            InitScheme::Calibrated { levels } => PolicyParams::calibrated(config.world, &tasks, levels)?,
        };
        params.jitter(config.seeds.init, config.init_noise);
        let opt = OptimizerState::new(&config.optimizer, params.logits.len());
        let bank = MemoryBank::new(config.bank)?;
        let clusters = tasks.iter().map(|t| t.cluster_id as usize + 1).max().unwrap_or(0);
        Ok(Self {
            config,
            tasks,
            clusters,
            params,
            opt,
            bank,
            step: 0,
        })
    }

    /// Rebuilds a trainer mid-run. Only `steps` and `checkpoint_every` may
    /// differ from the checkpoint's config.
    pub fn from_checkpoint(config: TrainConfig, tasks: Vec<SyntheticTask>, ckpt: Checkpoint) -> Result<Self> {
        let mut expected = ckpt.config.clone();
        expected.steps = config.steps;
        expected.checkpoint_every = config.checkpoint_every;
        if expected != config {
            return Err(Error::Config("checkpoint was written under a different configuration".into()));
        }
        let mut t = Self::new(config, tasks)?;
        if ckpt.params.shape != t.params.shape {
            return Err(Error::Config("checkpoint parameter shape does not match the corpus".into()));
        }
        t.params = ckpt.params;
        t.opt = ckpt.optimizer;
        t.bank = MemoryBank::from_state(t.config.bank, ckpt.bank)?;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step: self.step,
            config: self.config.clone(),
            params: self.params.clone(),
            optimizer: self.opt.clone(),
            bank: self.bank.state(),
            stream_cursor: self.step,
            metrics_cursor: self.step,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut PolicyParams {
        &mut self.params
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn tasks(&self) -> &[SyntheticTask] {
        &self.tasks
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn rollout_group(&self, qid: usize, phase: u64) -> Result<Group> {
        let task = &self.tasks[qid];
        let seed = stream_seed(&[self.config.seeds.rollout, self.step, task.query_id as u64, phase]);
        let rollouts = sample_group(&self.params, task, self.config.group_size, seed);
        Group::new(task.clone(), rollouts)
    }

    fn evaluate(&self, batch: &RolloutBatch, kappa: f64) -> Result<Update> {
        let zero = |mask| Update {
            value: 0.0,
            gradient: Gradient::zeros(self.params.shape),
            mask,
            zero: true,
        };
        if batch.is_empty() {
            return Ok(zero(Vec::new()));
        }
        let clip = &self.config.clip;
        let out: ObjectiveOutput = match self.config.method {
            Method::Grpo => grpo_objective(batch, &self.params, clip)?,
            Method::Gspo => gspo_objective(batch, &self.params, clip)?,
            Method::Vcrl => vcrl_objective(batch, &self.params, clip, kappa)?,
            Method::Dapo => match dapo_objective(batch, &self.params, clip) {
                Err(Error::EmptyAfterFilter) => return Ok(zero(vec![false; batch.len()])),
                other => other?,
            },
        };
        let all_masked = !out.mask.iter().any(|&m| m);
        Ok(Update {
            value: out.value,
            zero: all_masked,
            gradient: out.gradient,
            mask: out.mask,
        })
    }

    /// Runs one full training step and returns its metrics.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        self.step += 1;
        let step = self.step;
        let kappa = kappa_at(step, &self.config.kappa);
        let n = self.tasks.len();
        let b = self.config.batch_size.min(n);

        let picked = sample_indices(&mut stream_rng(&[self.config.seeds.data, step, TAG_BATCH]), n, b);
        let fresh: Vec<Group> = picked
            .iter()
            .map(|&q| self.rollout_group(q, PHASE_CORPUS))
            .collect::<Result<_>>()?;

        let (mut reward, mut length, mut entropy, mut count) = (0.0, 0.0, 0.0, 0usize);
        for g in &fresh {
            for r in &g.rollouts {
                reward += r.reward;
                length += r.len() as f64;
                entropy += rollout_entropy(&self.params, &g.task, r);
                count += 1;
            }
        }
        let count = count.max(1) as f64;

        let is_vcrl = self.config.method == Method::Vcrl;
        let mut groups_removed = 0u64;
        let mut popped = 0u64;
        let groups = if is_vcrl {
            let (kept, removed): (Vec<Group>, Vec<Group>) = fresh.into_iter().partition(|g| g.p >= kappa);
            let m = removed.len();
            groups_removed = m as u64;
            let mut batch = kept;
            let replay_ids = self.bank.pop_batch(m);
            popped = replay_ids.len() as u64;
            for &q in &replay_ids {
                batch.push(self.rollout_group(q as usize, PHASE_REPLAY)?);
            }
            let short = m - replay_ids.len();
            if short > 0 && self.config.shortfall == Shortfall::TopUpFromCorpus {
                let used: BTreeSet<usize> = picked.iter().copied().collect();
                let pool: Vec<usize> = (0..n).filter(|q| !used.contains(q)).collect();
                let extra = sample_indices(&mut stream_rng(&[self.config.seeds.data, step, TAG_TOPUP]), pool.len(), short);
                for i in extra {
                    let g = self.rollout_group(pool[i], PHASE_TOPUP)?;
                    if g.p >= kappa {
                        batch.push(g);
                    }
                }
            }
            self.bank.tick(self.config.bank.momentum);
            batch
        } else {
            fresh
        };

        let batch = RolloutBatch::new(groups, kappa)?;
        let update = self.evaluate(&batch, kappa)?;
        if self.config.method == Method::Dapo {
            groups_removed = update.mask.iter().filter(|&&m| !m).count() as u64;
        }
        let grad_norm = update.gradient.norm();
        self.opt
            .ascend(&self.config.optimizer, &mut self.params.logits, &update.gradient.data);

        let mut pushed = 0u64;
        if is_vcrl {
            // Reuses the p measured on this step's pre-update rollouts.
            for g in batch.groups.iter().filter(|g| g.p >= kappa) {
                if self.bank.push(g.task.query_id, g.p) {
                    pushed += 1;
                }
            }
        }

        let mut retained_by_cluster = vec![0u64; self.clusters];
        for (g, _) in batch.groups.iter().zip(&update.mask).filter(|(_, &m)| m) {
            retained_by_cluster[g.task.cluster_id as usize] += 1;
        }
        let max_replay_count = self
            .tasks
            .iter()
            .map(|t| self.bank.replay_count(t.query_id))
            .max()
            .unwrap_or(0);

        Ok(StepMetrics {
            step,
            mean_reward: reward / count,
            mean_response_length: length / count,
            mean_entropy: entropy / count,
            grad_norm,
            objective_value: update.value,
            kappa,
            groups_removed,
            bank_size: self.bank.len() as u64,
            bank_popped: popped,
            bank_pushed: pushed,
            mask_retained: update.mask.iter().filter(|&&m| m).count() as u64,
            batch_groups: batch.len() as u64,
            zero_update: update.zero,
            max_replay_count: u64::from(max_replay_count),
            retained_by_cluster,
        })
    }
}

/// Provenance record written before the first step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub artifact_version: String,
    pub config: TrainConfig,
    pub corpus_path: PathBuf,
    pub corpus_tasks: usize,
    pub seeds: crate::config::Seeds,
    pub outputs: RunOutputs,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutputs {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub config: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_FILE: &str = "config.resolved";
pub const CHECKPOINT_DIR: &str = "checkpoints";

const BANK_PUSH_NOTE: &str = "bank pushes reuse the p measured on each step's pre-update rollouts";

pub fn default_run_id(config: &TrainConfig) -> String {
    format!(
        "{}-d{}-r{}-i{}",
        config.method, config.seeds.data, config.seeds.rollout, config.seeds.init
    )
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step_{step:06}.json"))
}

pub struct RunRequest<'a> {
    pub config: TrainConfig,
    pub corpus_path: &'a Path,
    pub out_dir: &'a Path,
    pub run_id: Option<String>,
    pub resume: Option<&'a Path>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub steps_run: u64,
    pub last: Option<StepMetrics>,
}

/// Executes a full run, writing manifest, metrics stream and checkpoints.
pub fn run(req: RunRequest<'_>) -> Result<RunSummary> {
    let RunRequest {
        config,
        corpus_path,
        out_dir,
        run_id,
        resume,
    } = req;
    config.validate()?;
    let tasks = crate::env::load_corpus(corpus_path)?;
    fs::create_dir_all(out_dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out_dir, e))?;

    let manifest = RunManifest {
        run_id: run_id.unwrap_or_else(|| default_run_id(&config)),
        artifact_version: ARTIFACT_VERSION.to_string(),
        config: config.clone(),
        corpus_path: corpus_path.to_path_buf(),
        corpus_tasks: tasks.len(),
        seeds: config.seeds,
        outputs: RunOutputs {
            metrics: out_dir.join(METRICS_FILE),
            checkpoint: out_dir.join(CHECKPOINT_FILE),
            checkpoint_dir: out_dir.join(CHECKPOINT_DIR),
            config: out_dir.join(CONFIG_FILE),
        },
        notes: vec![BANK_PUSH_NOTE.to_string()],
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(&manifest_path, e))?;
    fs::write(&manifest.outputs.config, config.to_kv_string()).map_err(|e| Error::io(&manifest.outputs.config, e))?;
    log::info!("run {}: {BANK_PUSH_NOTE}", manifest.run_id);

    let (mut trainer, mut sink) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let cursor = ckpt.metrics_cursor as usize;
            let trainer = Trainer::from_checkpoint(config.clone(), tasks, ckpt)?;
            (trainer, MetricsSink::resume(&manifest.outputs.metrics, cursor)?)
        }
        None => (Trainer::new(config.clone(), tasks)?, MetricsSink::create(&manifest.outputs.metrics)?),
    };

    let start = trainer.step();
    let mut last = None;
    while trainer.step() < config.steps {
        let m = trainer.train_step()?;
        sink.emit(&m)?;
        if m.zero_update {
            log::debug!("step {}: zero update (no group retained)", m.step);
        }
        if config.checkpoint_every > 0 && trainer.step() % config.checkpoint_every == 0 {
            trainer.checkpoint().save(&checkpoint_path(out_dir, trainer.step()))?;
        }
        last = Some(m);
    }
    trainer.checkpoint().save(&manifest.outputs.checkpoint)?;
    Ok(RunSummary {
        steps_run: trainer.step() - start,
        manifest,
        last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{default_clusters, gen_corpus, World};

    #[test]
    fn kappa_schedule() {
        let s = KappaSchedule::default();
        assert_eq!(kappa_at(1, &s), 0.3);
        assert_eq!(kappa_at(20, &s), 0.3);
        assert_eq!(kappa_at(21, &s), 0.8);
        let c = KappaSchedule { early: 0.5, switch_step: 0, late: 0.5 };
        assert!((1..50).all(|t| kappa_at(t, &c) == 0.5));
    }

    fn small(method: Method) -> (TrainConfig, Vec<SyntheticTask>) {
        let mut c = TrainConfig::for_method(method);
        c.batch_size = 8;
        c.group_size = 8;
        c.steps = 5;
        let tasks = gen_corpus(1, &default_clusters(6), &World::default()).unwrap();
        (c, tasks)
    }

    #[test]
    fn empty_corpus_is_config_error() {
        let (c, _) = small(Method::Vcrl);
        assert!(matches!(Trainer::new(c, vec![]), Err(Error::Config(_))));
    }

    #[test]
    fn every_method_steps() {
        for m in Method::ALL {
            let (c, tasks) = small(m);
            let mut t = Trainer::new(c, tasks).unwrap();
            for _ in 0..3 {
                let s = t.train_step().unwrap();
                assert!((0.0..=1.0).contains(&s.mean_reward));
                assert!(s.grad_norm >= 0.0);
                assert!(t.params().is_finite());
            }
        }
    }

    #[test]
    fn saturated_policy_gives_zero_update() {
        let (mut c, tasks) = small(Method::Vcrl);
        c.init = InitScheme::Uniform;
        let mut t = Trainer::new(c, tasks.clone()).unwrap();
        for task in &tasks {
            let eos = t.params().world.eos();
            for (pos, &tok) in task.target.iter().chain([eos].iter()).enumerate() {
                t.params_mut().row_mut(task.query_id as usize, pos)[tok as usize] = 60.0;
            }
        }
        let before = t.params().clone();
        let s = t.train_step().unwrap();
        assert!(s.zero_update);
        assert_eq!(s.mask_retained, 0);
        assert_eq!(s.groups_removed, 8);
        assert_eq!(s.grad_norm, 0.0);
        assert_eq!(t.params(), &before);
    }
}
