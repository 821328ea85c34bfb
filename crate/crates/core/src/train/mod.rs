//! Freeze policies, AdamW with decoupled decay, the warmup+cosine schedule
//! and the next-token training loop.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::experts::ExpertLabelMap;
use crate::model::{
    ModelError, ParamGroup, ParamId, ParameterStore, Prismer, Session, TokenSequence,
};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: u64, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    PreTrain,
    FineTune,
}

/// Which backbones stay frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FreezePolicy {
    FreezeVisionAndLanguage,
    FreezeVision,
    FreezeLanguage,
    AllTrainable,
}

impl FreezePolicy {
    pub const ALL: [FreezePolicy; 4] = [
        FreezePolicy::FreezeVisionAndLanguage,
        FreezePolicy::FreezeVision,
        FreezePolicy::FreezeLanguage,
        FreezePolicy::AllTrainable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FreezePolicy::FreezeVisionAndLanguage => "freeze-vision-and-language",
            FreezePolicy::FreezeVision => "freeze-vision-only",
            FreezePolicy::FreezeLanguage => "freeze-language-only",
            FreezePolicy::AllTrainable => "all-trainable",
        }
    }

    /// Parses a policy name as spelled for `phase`: pre-training says
    /// `freeze-vision-only`, fine-tuning says `freeze-vision`.
    pub fn parse(name: &str, phase: Phase) -> Result<Self> {
        let p = match (name, phase) {
            ("freeze-vision-and-language", _) => FreezePolicy::FreezeVisionAndLanguage,
            ("freeze-vision-only", Phase::PreTrain) | ("freeze-vision", Phase::FineTune) => {
                FreezePolicy::FreezeVision
            }
            ("freeze-language-only", _) => FreezePolicy::FreezeLanguage,
            ("all-trainable", _) => FreezePolicy::AllTrainable,
            _ => {
                return Err(TrainError::Config(format!(
                    "unknown freeze policy {name:?} for {phase:?}"
                )))
            }
        };
        Ok(p)
    }

    pub fn freezes(self, group: ParamGroup) -> bool {
        match self {
            FreezePolicy::FreezeVisionAndLanguage => {
                matches!(
                    group,
                    ParamGroup::VisionBackbone | ParamGroup::LanguageBackbone
                )
            }
            FreezePolicy::FreezeVision => group == ParamGroup::VisionBackbone,
            FreezePolicy::FreezeLanguage => group == ParamGroup::LanguageBackbone,
            FreezePolicy::AllTrainable => false,
        }
    }
}

impl FromStr for FreezePolicy {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s, Phase::PreTrain).or_else(|_| Self::parse(s, Phase::FineTune))
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub trainable_count: u64,
    pub frozen_count: u64,
}

impl Partition {
    pub fn trainable_share(&self) -> f64 {
        self.trainable_count as f64 / (self.trainable_count + self.frozen_count) as f64
    }
}

/// Applies `policy` to the store (resetting optimizer state) and reports
/// the resulting split.
pub fn partition_parameters(store: &mut ParameterStore, policy: FreezePolicy) -> Partition {
    store.apply_freeze(|g| policy.freezes(g));
    let mut part = Partition {
        trainable: Vec::new(),
        frozen: Vec::new(),
        trainable_count: 0,
        frozen_count: 0,
    };
    for (_, p) in store.iter() {
        let n = p.value.numel() as u64;
        if p.frozen {
            part.frozen.push(p.name.clone());
            part.frozen_count += n;
        } else {
            part.trainable.push(p.name.clone());
            part.trainable_count += n;
        }
    }
    part
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// One AdamW update. `grads` must cover every trainable parameter and no
/// frozen one. Decay multiplies by `1 - lr·wd` before the Adam step and
/// skips parameters with `decay == false`.
pub fn adamw_step(
    store: &mut ParameterStore,
    grads: &[(ParamId, Tensor)],
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    let mut by_id: Vec<Option<&Tensor>> = vec![None; store.len()];
    for (id, g) in grads {
        let p = store.get(*id);
        if p.frozen {
            return Err(TrainError::Contract(format!(
                "gradient supplied for frozen parameter {}",
                p.name
            )));
        }
        if g.shape() != p.value.shape() {
            return Err(TrainError::Contract(format!(
                "gradient for {} has shape {:?}, parameter {:?}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
        by_id[id.index()] = Some(g);
    }
    for (id, p) in store.iter() {
        if !p.frozen && by_id[id.index()].is_none() {
            return Err(TrainError::Contract(format!(
                "no gradient for trainable parameter {}",
                p.name
            )));
        }
    }
    if store.iter().any(|(_, p)| !p.frozen && p.moments.is_none()) {
        store.init_moments();
    }
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let Some(g) = by_id[i] else { continue };
        let mom = p
            .moments
            .as_mut()
            .expect("trainable parameters have moments");
        let shrink = if p.decay {
            1.0 - lr * opt.weight_decay
        } else {
            1.0
        };
        for (((w, &g), m), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(&mut mom.m)
            .zip(&mut mom.v)
        {
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w *= shrink;
            *w -= lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub policy: FreezePolicy,
    pub optimizer: AdamW,
    /// Global-norm cap on the gradient; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 2000,
            total_steps: 10_000,
            batch_size: 8,
            seed: 0,
            policy: FreezePolicy::FreezeVisionAndLanguage,
            optimizer: AdamW::default(),
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(TrainError::Config(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr > 0.0) || self.batch_size == 0 {
            return Err(TrainError::Config(
                "learning rate and batch size must be positive".into(),
            ));
        }
        let o = &self.optimizer;
        if !(o.weight_decay >= 0.0
            && o.eps > 0.0
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2))
        {
            return Err(TrainError::Config(
                "optimizer hyper-parameters out of range".into(),
            ));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(TrainError::Config("clip norm must be positive".into()));
        }
        Ok(())
    }

    /// Sets one field from a `train.*` key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| TrainError::Config(format!("{key}: cannot parse {v:?}")))
        }
        let v = value.trim();
        match key {
            "train.lr" | "train.peak_lr" => self.peak_lr = num(key, v)?,
            "train.warmup_steps" => self.warmup_steps = num(key, v)?,
            "train.steps" | "train.total_steps" => self.total_steps = num(key, v)?,
            "train.batch_size" => self.batch_size = num(key, v)?,
            "train.seed" => self.seed = num(key, v)?,
            "train.policy" => self.policy = v.parse()?,
            "train.weight_decay" => self.optimizer.weight_decay = num(key, v)?,
            "train.beta1" => self.optimizer.beta1 = num(key, v)?,
            "train.beta2" => self.optimizer.beta2 = num(key, v)?,
            "train.eps" => self.optimizer.eps = num(key, v)?,
            "train.clip_norm" => {
                self.clip_norm = if v == "none" {
                    None
                } else {
                    Some(num(key, v)?)
                }
            }
            _ => return Err(TrainError::Config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at
/// `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(TrainError::Range(format!(
            "step {step} beyond total {}",
            cfg.total_steps
        )));
    }
    let (w, total, peak) = (cfg.warmup_steps, cfg.total_steps, cfg.peak_lr);
    if step < w {
        return Ok(peak * step as f64 / w as f64);
    }
    if total == w {
        return Ok(peak);
    }
    let frac = (step - w) as f64 / (total - w) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// One image with its expert maps and every text sequence to model on
/// it. The sequences share one encoder pass.
#[derive(Clone, Debug)]
pub struct Example {
    pub rgb: Tensor,
    pub experts: Vec<ExpertLabelMap>,
    pub seqs: Vec<TokenSequence>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub fn write_trace<W: Write>(rows: &[TraceRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "loss", "lr", "grad_norm"])?;
    for r in rows {
        out.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            r.lr.to_string(),
            r.grad_norm.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Mean over all sequences in `batch` of the per-sequence loss, and its
/// gradient for every trainable parameter.
pub fn loss_and_grads(
    model: &Prismer,
    batch: &[&Example],
) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
    let mut g = Graph::new();
    let mut s = Session::new(model, &mut g);
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let z = s.encoder_forward(&ex.rgb, &ex.experts)?;
        for seq in &ex.seqs {
            losses.push(s.prefix_lm_loss(z, seq)?);
        }
    }
    if losses.is_empty() {
        return Err(TrainError::Contract("batch has no text sequences".into()));
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = s.graph.add(total, l)?;
    }
    let loss = s.graph.scale(total, 1.0 / losses.len() as f64)?;
    let bound: Vec<(ParamId, crate::tensor::Var)> = s.bound_params().collect();
    let value = g.value(loss).item()?;
    let mut grads = g.backward(loss)?;
    let mut out = Vec::new();
    for (id, p) in model.store.iter() {
        if p.frozen {
            continue;
        }
        let grad = bound
            .iter()
            .find(|(b, _)| *b == id)
            .and_then(|(_, v)| grads.take(*v))
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        out.push((id, grad));
    }
    Ok((value, out))
}

/// Runs `cfg.total_steps` AdamW steps on minibatches drawn by reshuffling
/// `data` every epoch. The model's freeze flags are set from `cfg.policy`
/// first. Returns one trace row per step.
pub fn train_loop(
    model: &mut Prismer,
    data: &[Example],
    cfg: &TrainConfig,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Contract("training set is empty".into()));
    }
    partition_parameters(&mut model.store, cfg.policy);
    model.store.init_moments();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut trace = Vec::with_capacity(cfg.total_steps as usize);
    for step in 0..cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let (loss, mut grads) = match loss_and_grads(model, &batch) {
            Err(TrainError::Model(ModelError::Tensor(TensorError::NonFinite(_))))
            | Err(TrainError::Tensor(TensorError::NonFinite(_))) => {
                return Err(TrainError::NonFinite {
                    step,
                    loss: f64::NAN,
                })
            }
            r => r?,
        };
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step, loss });
        }
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if let Some(cap) = cfg.clip_norm.filter(|&c| norm > c) {
            let k = cap / norm;
            grads
                .iter_mut()
                .for_each(|(_, g)| g.data_mut().iter_mut().for_each(|v| *v *= k));
        }
        let lr = lr_at(step, cfg)?;
        adamw_step(&mut model.store, &grads, lr, &cfg.optimizer)?;
        trace.push(TraceRow {
            step,
            loss,
            lr,
            grad_norm: norm,
        });
    }
    Ok(trace)
}
