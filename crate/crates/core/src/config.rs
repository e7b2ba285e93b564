//! Training configuration and its flat `key = value` text form.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::World;
use crate::error::{Error, Result};
use crate::memory_bank::BankConfig;
use crate::objectives::ClipConfig;
use crate::optim::OptimizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Grpo,
    Dapo,
    Gspo,
    Vcrl,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Grpo, Method::Dapo, Method::Gspo, Method::Vcrl];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Grpo => "grpo",
            Method::Dapo => "dapo",
            Method::Gspo => "gspo",
            Method::Vcrl => "vcrl",
        }
    }

    pub fn default_clip(&self) -> ClipConfig {
        match self {
            Method::Grpo | Method::Vcrl => ClipConfig::Symmetric { eps: 0.2 },
            Method::Dapo => ClipConfig::Asymmetric {
                eps_low: 0.2,
                eps_high: 0.28,
            },
            Method::Gspo => ClipConfig::Sequence { eps: 0.0003 },
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method '{s}' (grpo|dapo|gspo|vcrl)")))
    }
}

/// `kappa_early` through `switch_step` inclusive, `kappa_late` afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaSchedule {
    pub early: f64,
    pub switch_step: u64,
    pub late: f64,
}

impl Default for KappaSchedule {
    fn default() -> Self {
        Self {
            early: 0.3,
            switch_step: 20,
            late: 0.8,
        }
    }
}

impl KappaSchedule {
    pub fn constant(kappa: f64) -> Self {
        Self {
            early: kappa,
            switch_step: 0,
            late: kappa,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shortfall {
    /// Train on whatever survived the filter plus what the bank could supply.
    Shrink,
    /// Refill missing slots once with fresh corpus queries.
    TopUpFromCorpus,
}

impl FromStr for Shortfall {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "shrink" => Ok(Shortfall::Shrink),
            "top_up_from_corpus" | "top_up" => Ok(Shortfall::TopUpFromCorpus),
            other => Err(Error::Config(format!(
                "unknown shortfall policy '{other}' (shrink|top_up_from_corpus)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// Query sampling from the corpus.
    pub data: u64,
    pub rollout: u64,
    /// Initial-logit jitter.
    pub init: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            data: seed,
            rollout: seed,
            init: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum InitScheme {
    Uniform,
    /// Per-cluster initial success probabilities, set exactly.
    Calibrated { levels: Vec<f64> },
}

/// Initial success probabilities of the default easy/medium/hard clusters.
pub const DEFAULT_LEVELS: [f64; 3] = [0.95, 0.5, 0.05];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub batch_size: usize,
    pub group_size: usize,
    pub steps: u64,
    pub kappa: KappaSchedule,
    pub clip: ClipConfig,
    pub bank: BankConfig,
    pub optimizer: OptimizerConfig,
    pub seeds: Seeds,
    pub shortfall: Shortfall,
    pub world: World,
    pub init: InitScheme,
    pub init_noise: f64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_method(Method::Vcrl)
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            batch_size: 32,
            group_size: 16,
            steps: 300,
            kappa: KappaSchedule::default(),
            clip: method.default_clip(),
            bank: BankConfig::default(),
            optimizer: OptimizerConfig::Sgd { lr: 40.0 },
            seeds: Seeds::all(0),
            shortfall: Shortfall::Shrink,
            world: World::default(),
            init: InitScheme::Calibrated {
                levels: DEFAULT_LEVELS.to_vec(),
            },
            init_noise: 0.0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        for k in [self.kappa.early, self.kappa.late] {
            if !(0.0..=1.0).contains(&k) {
                return Err(Error::Config(format!("kappa {k} outside [0, 1]")));
            }
        }
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            return Err(Error::Config("init_noise must be a nonnegative number".into()));
        }
        let clip_matches = matches!(
            (self.method, self.clip),
            (Method::Grpo | Method::Vcrl, ClipConfig::Symmetric { .. })
                | (Method::Dapo, ClipConfig::Asymmetric { .. })
                | (Method::Gspo, ClipConfig::Sequence { .. })
        );
        if !clip_matches {
            return Err(Error::Config(format!(
                "clip {:?} does not fit method {}",
                self.clip, self.method
            )));
        }
        self.clip.validate()?;
        self.bank.validate()?;
        self.optimizer.validate()?;
        self.world.validate()
    }

    /// Applies `key = value` overrides. `method` is applied first and resets
    /// the clip range to that method's default.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let mut pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        pairs.sort_by_key(|(k, _)| *k != "method");
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        match key {
            "method" => {
                self.method = value.parse()?;
                self.clip = self.method.default_clip();
            }
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "group_size" => self.group_size = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "kappa_early" => self.kappa.early = parse_num(key, value)?,
            "kappa_switch_step" => self.kappa.switch_step = parse_num(key, value)?,
            "kappa_late" => self.kappa.late = parse_num(key, value)?,
            "kappa" => self.kappa = KappaSchedule::constant(parse_num(key, value)?),
            "clip_eps" => match &mut self.clip {
                ClipConfig::Symmetric { eps } | ClipConfig::Sequence { eps } => *eps = parse_num(key, value)?,
                ClipConfig::Asymmetric { .. } => {
                    return Err(Error::Config("dapo takes clip_eps_low / clip_eps_high".into()))
                }
            },
            "clip_eps_low" | "clip_eps_high" => match &mut self.clip {
                ClipConfig::Asymmetric { eps_low, eps_high } => {
                    let slot = if key == "clip_eps_low" { eps_low } else { eps_high };
                    *slot = parse_num(key, value)?;
                }
                _ => return Err(Error::Config(format!("{key} only applies to dapo"))),
            },
            "bank_momentum" => self.bank.momentum = parse_num(key, value)?,
            "bank_max_replays" => self.bank.max_replays = parse_num(key, value)?,
            "bank_capacity" => {
                self.bank.capacity = match value {
                    "none" | "" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "optimizer" => {
                let lr = self.optimizer.lr();
                self.optimizer = match value {
                    "sgd" => OptimizerConfig::Sgd { lr },
                    "adam" | "adamw" | "adaptive_moments" => OptimizerConfig::adam(lr),
                    other => return Err(Error::Config(format!("unknown optimizer '{other}' (sgd|adam)"))),
                };
            }
            "lr" => {
                let new: f64 = parse_num(key, value)?;
                match &mut self.optimizer {
                    OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => *lr = new,
                }
            }
            "adam_beta1" | "adam_beta2" | "adam_eps" | "weight_decay" => match &mut self.optimizer {
                OptimizerConfig::Adam {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    ..
                } => {
                    let slot = match key {
                        "adam_beta1" => beta1,
                        "adam_beta2" => beta2,
                        "adam_eps" => eps,
                        _ => weight_decay,
                    };
                    *slot = parse_num(key, value)?;
                }
                OptimizerConfig::Sgd { .. } => {
                    return Err(Error::Config(format!("{key} requires optimizer = adam")))
                }
            },
            "seed" => self.seeds = Seeds::all(parse_num(key, value)?),
            "data_seed" => self.seeds.data = parse_num(key, value)?,
            "rollout_seed" => self.seeds.rollout = parse_num(key, value)?,
            "init_seed" => self.seeds.init = parse_num(key, value)?,
            "shortfall" => self.shortfall = value.parse()?,
            "vocab" => self.world.vocab = parse_num(key, value)?,
            "l_max" => self.world.l_max = parse_num(key, value)?,
            "init" => {
                self.init = match value {
                    "uniform" => InitScheme::Uniform,
                    "calibrated" => InitScheme::Calibrated {
                        levels: DEFAULT_LEVELS.to_vec(),
                    },
                    other => return Err(Error::Config(format!("unknown init '{other}' (uniform|calibrated)"))),
                }
            }
            "init_success" => {
                let levels = value
                    .split(',')
                    .map(|s| parse_num::<f64>(key, s))
                    .collect::<Result<Vec<_>>>()?;
                self.init = InitScheme::Calibrated { levels };
            }
            "init_noise" => self.init_noise = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Full resolved configuration as `key = value` lines, method first.
    /// Applying these to a default config reproduces `self`.
    pub fn to_kv_string(&self) -> String {
        let mut lines = vec![
            format!("method = {}", self.method),
            format!("batch_size = {}", self.batch_size),
            format!("group_size = {}", self.group_size),
            format!("steps = {}", self.steps),
            format!("kappa_early = {:?}", self.kappa.early),
            format!("kappa_switch_step = {}", self.kappa.switch_step),
            format!("kappa_late = {:?}", self.kappa.late),
        ];
        match self.clip {
            ClipConfig::Symmetric { eps } | ClipConfig::Sequence { eps } => lines.push(format!("clip_eps = {eps:?}")),
            ClipConfig::Asymmetric { eps_low, eps_high } => {
                lines.push(format!("clip_eps_low = {eps_low:?}"));
                lines.push(format!("clip_eps_high = {eps_high:?}"));
            }
        }
        lines.push(format!("bank_momentum = {:?}", self.bank.momentum));
        lines.push(format!("bank_max_replays = {}", self.bank.max_replays));
        lines.push(format!(
            "bank_capacity = {}",
            self.bank.capacity.map_or("none".to_string(), |c| c.to_string())
        ));
        match self.optimizer {
            OptimizerConfig::Sgd { lr } => {
                lines.push("optimizer = sgd".into());
                lines.push(format!("lr = {lr:?}"));
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                lines.push("optimizer = adam".into());
                lines.push(format!("lr = {lr:?}"));
                lines.push(format!("adam_beta1 = {beta1:?}"));
                lines.push(format!("adam_beta2 = {beta2:?}"));
                lines.push(format!("adam_eps = {eps:?}"));
                lines.push(format!("weight_decay = {weight_decay:?}"));
            }
        }
        lines.push(format!("data_seed = {}", self.seeds.data));
        lines.push(format!("rollout_seed = {}", self.seeds.rollout));
        lines.push(format!("init_seed = {}", self.seeds.init));
        lines.push(format!(
            "shortfall = {}",
            match self.shortfall {
                Shortfall::Shrink => "shrink",
                Shortfall::TopUpFromCorpus => "top_up_from_corpus",
            }
        ));
        lines.push(format!("vocab = {}", self.world.vocab));
        lines.push(format!("l_max = {}", self.world.l_max));
        match &self.init {
            InitScheme::Uniform => lines.push("init = uniform".into()),
            InitScheme::Calibrated { levels } => lines.push(format!(
                "init_success = {}",
                levels.iter().map(|l| format!("{l:?}")).collect::<Vec<_>>().join(",")
            )),
        }
        lines.push(format!("init_noise = {:?}", self.init_noise));
        lines.push(format!("checkpoint_every = {}", self.checkpoint_every));
        lines.join("\n") + "\n"
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(origin, i + 1, "expected key = value"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn load_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_switch_resets_clip() {
        let mut c = TrainConfig::default();
        c.apply([("clip_eps_high", "0.3"), ("method", "dapo")]).unwrap();
        assert_eq!(c.clip, ClipConfig::Asymmetric { eps_low: 0.2, eps_high: 0.3 });
        c.set("method", "gspo").unwrap();
        assert_eq!(c.clip, ClipConfig::Sequence { eps: 0.0003 });
        assert!(c.set("clip_eps_low", "0.1").is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut c = TrainConfig::for_method(Method::Dapo);
        c.apply([
            ("optimizer", "adam"),
            ("lr", "0.001"),
            ("weight_decay", "0.01"),
            ("bank_capacity", "64"),
            ("init_success", "0.9,0.4,0.1"),
            ("shortfall", "top_up_from_corpus"),
            ("seed", "17"),
            ("init_seed", "3"),
        ])
        .unwrap();
        let text = c.to_kv_string();
        let pairs = parse_kv(&text, Path::new("x")).unwrap();
        let mut back = TrainConfig::default();
        back.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.steps = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.kappa.late = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.clip = ClipConfig::Sequence { eps: 0.1 };
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().set("bogus", "1").is_err());
        assert!(TrainConfig::default().set("steps", "ten").is_err());
        assert!(TrainConfig::default().set("adam_beta1", "0.5").is_err());
    }

    #[test]
    fn kv_parsing() {
        let pairs = parse_kv("# comment\nsteps = 5  # trailing\n\nmethod=grpo\n", Path::new("f")).unwrap();
        assert_eq!(pairs, vec![("steps".into(), "5".into()), ("method".into(), "grpo".into())]);
        assert!(matches!(parse_kv("oops\n", Path::new("f")), Err(Error::Parse { line: 1, .. })));
    }
}
