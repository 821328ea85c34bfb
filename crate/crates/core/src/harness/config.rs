use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::dataset::DatasetSpec;
use super::{HarnessError, Result};
use crate::experts::Corruption;
use crate::model::ModelConfig;
use crate::seed::mix_seed;
use crate::train::TrainConfig;

const EVAL_SALT: u64 = 0xe7a1;

/// Splits `key=value` lines. Blank lines and `#` comments are skipped;
/// a repeated key is an error.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            HarnessError::Config(format!("line {}: expected key=value, got {line:?}", n + 1))
        })?;
        let k = k.trim();
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(HarnessError::Config(format!(
                "line {}: duplicate key {k}",
                n + 1
            )));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Qa,
    Caption,
}

impl FromStr for Task {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qa" => Ok(Task::Qa),
            "caption" => Ok(Task::Caption),
            _ => Err(HarnessError::Config(format!("unknown task {s:?}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Qa => "qa",
            Task::Caption => "caption",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub scenes: usize,
    pub eval_scenes: usize,
    pub difficulty: u32,
    /// Base seed; training scenes additionally depend on the run seed.
    pub seed: u64,
    pub corruption: Option<Corruption>,
    pub noise_seed: u64,
    pub task: Task,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 500,
            eval_scenes: 200,
            difficulty: 0,
            seed: 0,
            corruption: None,
            noise_seed: 7,
            task: Task::Qa,
        }
    }
}

fn parse_corruption(v: &str) -> Result<Option<Corruption>> {
    if v == "none" {
        return Ok(None);
    }
    let (kind, frac) = v
        .split_once(':')
        .ok_or_else(|| HarnessError::Config(format!("corruption {v:?}: expected kind:fraction")))?;
    let fraction = frac
        .trim()
        .parse()
        .map_err(|_| HarnessError::Config(format!("bad corruption fraction {frac:?}")))?;
    Ok(Some(Corruption {
        kind: kind.trim().parse()?,
        fraction,
    }))
}

/// Everything one training run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::preset("desk").expect("builtin preset"),
            train: TrainConfig {
                total_steps: 300,
                warmup_steps: 30,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overridden by `text`. `model.preset` is applied before
    /// every other key wherever it appears.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let mut cfg = Self::default();
        if let Some((_, preset)) = kv.iter().find(|(k, _)| k == "model.preset") {
            cfg.model = ModelConfig::preset(preset)?;
        }
        for (k, v) in kv.iter().filter(|(k, _)| k != "model.preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let prefix = key.split('.').next().unwrap_or("");
        match prefix {
            "model" if key == "model.preset" => self.model = ModelConfig::preset(value)?,
            "model" | "experts" => self.model.set(key, value)?,
            "train" => self.train.set(key, value)?,
            "data" => {
                let num = |v: &str| {
                    v.parse::<u64>()
                        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {v:?}")))
                };
                let d = &mut self.data;
                match key {
                    "data.scenes" => d.scenes = num(value)? as usize,
                    "data.eval_scenes" => d.eval_scenes = num(value)? as usize,
                    "data.difficulty" => d.difficulty = num(value)? as u32,
                    "data.seed" => d.seed = num(value)?,
                    "data.noise_seed" => d.noise_seed = num(value)?,
                    "data.corruption" => d.corruption = parse_corruption(value)?,
                    "data.task" => d.task = value.parse()?,
                    _ => return Err(HarnessError::Config(format!("unknown data key {key:?}"))),
                }
            }
            _ => {
                return Err(HarnessError::Config(format!(
                    "key {key:?} needs a model., train., data. or experts. prefix"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.scenes == 0 {
            return Err(HarnessError::Config(
                "data.scenes must be at least 1".into(),
            ));
        }
        self.train_spec().validate()
    }

    /// Every setting as `key=value` lines that [`RunConfig::parse`] reads back.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out = self.model.to_kv();
        let t = &self.train;
        let d = &self.data;
        let corruption = d
            .corruption
            .map_or("none".to_string(), |c| format!("{}:{}", c.kind, c.fraction));
        out.extend(
            [
                ("train.lr", t.peak_lr.to_string()),
                ("train.warmup_steps", t.warmup_steps.to_string()),
                ("train.steps", t.total_steps.to_string()),
                ("train.batch_size", t.batch_size.to_string()),
                ("train.seed", t.seed.to_string()),
                ("train.policy", t.policy.to_string()),
                ("train.weight_decay", t.optimizer.weight_decay.to_string()),
                ("train.beta1", t.optimizer.beta1.to_string()),
                ("train.beta2", t.optimizer.beta2.to_string()),
                ("train.eps", t.optimizer.eps.to_string()),
                (
                    "train.clip_norm",
                    t.clip_norm.map_or("none".to_string(), |c| c.to_string()),
                ),
                ("data.scenes", d.scenes.to_string()),
                ("data.eval_scenes", d.eval_scenes.to_string()),
                ("data.difficulty", d.difficulty.to_string()),
                ("data.seed", d.seed.to_string()),
                ("data.noise_seed", d.noise_seed.to_string()),
                ("data.corruption", corruption),
                ("data.task", d.task.to_string()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v)),
        );
        out
    }

    /// Training scenes for the run seed `train.seed`.
    pub fn train_spec(&self) -> DatasetSpec {
        DatasetSpec {
            count: self.data.scenes,
            difficulty: self.data.difficulty,
            seed: mix_seed(self.data.seed, self.train.seed),
            experts: self.model.experts.clone(),
            corruption: self.data.corruption,
            noise_seed: self.data.noise_seed,
        }
    }

    /// Held-out scenes; independent of the run seed.
    pub fn eval_spec(&self) -> DatasetSpec {
        DatasetSpec {
            count: self.data.eval_scenes.max(1),
            seed: mix_seed(self.data.seed, EVAL_SALT),
            ..self.train_spec()
        }
    }
}
