use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use super::config::{RunConfig, Task};
use super::dataset::{build_items, content_hash, DataItem};
use super::{HarnessError, Result};
use crate::experts::{ExpertKind, ExpertPipeline};
use crate::infer::{caption, encode, rank_closed_ended};
use crate::model::Prismer;
use crate::train::{partition_parameters, train_loop, Example, TraceRow, TrainError};
use crate::vocab::BOS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PlanKind {
    ExpertCountSweep,
    CorruptionSweep,
    NoiseExpert,
    ResamplerLatentsSweep,
    ResamplerLayersSweep,
    AdaptorRatioSweep,
    FreezePolicySweep,
    PrismerVsPrismerZ,
}

impl PlanKind {
    pub const ALL: [PlanKind; 8] = [
        PlanKind::ExpertCountSweep,
        PlanKind::CorruptionSweep,
        PlanKind::NoiseExpert,
        PlanKind::ResamplerLatentsSweep,
        PlanKind::ResamplerLayersSweep,
        PlanKind::AdaptorRatioSweep,
        PlanKind::FreezePolicySweep,
        PlanKind::PrismerVsPrismerZ,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PlanKind::ExpertCountSweep => "expert-count-sweep",
            PlanKind::CorruptionSweep => "corruption-sweep",
            PlanKind::NoiseExpert => "noise-expert",
            PlanKind::ResamplerLatentsSweep => "resampler-latents-sweep",
            PlanKind::ResamplerLayersSweep => "resampler-layers-sweep",
            PlanKind::AdaptorRatioSweep => "adaptor-ratio-sweep",
            PlanKind::FreezePolicySweep => "freeze-policy-sweep",
            PlanKind::PrismerVsPrismerZ => "prismer-vs-prismerz",
        }
    }
}

impl FromStr for PlanKind {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown plan kind {s:?}")))
    }
}

impl fmt::Display for PlanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    QaAccuracy,
    CaptionExactMatch,
    FinalLoss,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::QaAccuracy => "qa-accuracy",
            Metric::CaptionExactMatch => "caption-exact-match",
            Metric::FinalLoss => "final-loss",
        }
    }
}

impl FromStr for Metric {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        [
            Metric::QaAccuracy,
            Metric::CaptionExactMatch,
            Metric::FinalLoss,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| HarnessError::Config(format!("unknown metric {s:?}")))
    }
}

/// One condition of a plan: overrides applied on top of the base config.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

impl Arm {
    pub fn new(label: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            label: label.to_string(),
            overrides: overrides
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

fn kinds_list(kinds: &[ExpertKind]) -> String {
    kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
}

const RGB_ONLY: [(&str, &str); 3] = [
    ("model.mode", "prismer-z"),
    ("model.resampler", "none"),
    ("experts.kinds", "none"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub kind: PlanKind,
    pub base: RunConfig,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub metric: Metric,
}

impl ExperimentPlan {
    /// The standard arms for `kind`, three seeds starting at the base
    /// run seed, scored by QA accuracy.
    pub fn standard(kind: PlanKind, base: RunConfig) -> Self {
        let with = |n: usize| {
            let kinds = kinds_list(&ExpertKind::TASK_ORDER[..n]);
            Arm {
                label: format!("+{n}"),
                overrides: vec![
                    ("model.mode".into(), "prismer".into()),
                    ("model.resampler".into(), "learned".into()),
                    ("experts.kinds".into(), kinds),
                ],
            }
        };
        let prismer = |label: &str, extra: &[(&str, &str)]| {
            let mut arm = with(2);
            arm.label = label.to_string();
            arm.overrides
                .extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
            arm
        };
        let arms = match kind {
            PlanKind::ExpertCountSweep => {
                vec![Arm::new("rgb", &RGB_ONLY), with(2), with(4), with(6)]
            }
            PlanKind::CorruptionSweep => ["0.25", "0.10", "0"]
                .iter()
                .map(|p| {
                    let c = if *p == "0" {
                        "none".to_string()
                    } else {
                        format!("depth:{p}")
                    };
                    prismer(&format!("p={p}"), &[("data.corruption", &c)])
                })
                .collect(),
            PlanKind::NoiseExpert => vec![
                Arm::new("rgb", &RGB_ONLY),
                Arm::new(
                    "rgb+noise",
                    &[
                        ("model.mode", "prismer"),
                        ("model.resampler", "learned"),
                        ("experts.kinds", "noise"),
                    ],
                ),
            ],
            PlanKind::ResamplerLatentsSweep => ["4", "16", "32"]
                .iter()
                .map(|n| prismer(&format!("latents={n}"), &[("model.latents", n)]))
                .chain(std::iter::once(prismer(
                    "random-sampling",
                    &[("model.resampler", "random-sampling")],
                )))
                .collect(),
            PlanKind::ResamplerLayersSweep => ["1", "2", "4"]
                .iter()
                .map(|n| prismer(&format!("layers={n}"), &[("model.resampler_layers", n)]))
                .collect(),
            PlanKind::AdaptorRatioSweep => ["0.25", "0.5", "1"]
                .iter()
                .map(|r| prismer(&format!("ratio={r}"), &[("model.adaptor_ratio", r)]))
                .collect(),
            PlanKind::FreezePolicySweep => crate::train::FreezePolicy::ALL
                .iter()
                .map(|p| prismer(p.name(), &[("train.policy", p.name())]))
                .collect(),
            PlanKind::PrismerVsPrismerZ => {
                vec![prismer("prismer", &[]), Arm::new("prismer-z", &RGB_ONLY)]
            }
        };
        let s = base.train.seed;
        Self {
            kind,
            base,
            arms,
            seeds: vec![s, s + 1, s + 2],
            metric: Metric::QaAccuracy,
        }
    }

    /// The config of `arm` under run seed `seed`.
    pub fn arm_config(&self, arm: &Arm, seed: u64) -> Result<RunConfig> {
        let mut cfg = self.base.clone();
        for (k, v) in &arm.overrides {
            cfg.set(k, v)?;
        }
        cfg.train.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.len() < 2 {
            return Err(HarnessError::Config(
                "a plan needs at least two arms".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config(
                "a plan needs at least one seed".into(),
            ));
        }
        let mut labels: Vec<&str> = self.arms.iter().map(|a| a.label.as_str()).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.arms.len() {
            return Err(HarnessError::Config("arm labels must be distinct".into()));
        }
        let needed = match self.metric {
            Metric::QaAccuracy => Some(Task::Qa),
            Metric::CaptionExactMatch => Some(Task::Caption),
            Metric::FinalLoss => None,
        };
        for arm in &self.arms {
            let cfg = self.arm_config(arm, self.seeds[0])?;
            if needed.is_some_and(|t| t != cfg.data.task) {
                return Err(HarnessError::Config(format!(
                    "metric {} does not apply to task {}",
                    self.metric.name(),
                    cfg.data.task
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub plan: PlanKind,
    pub arm: String,
    pub seed: u64,
    pub metric: Metric,
    /// `None` when training diverged.
    pub value: Option<f64>,
    pub trainable_params: u64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub arm: String,
    pub runs: usize,
    pub failed: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanReport {
    pub kind: PlanKind,
    /// Ordered by arm (plan order), then seed.
    pub rows: Vec<MetricsRow>,
    pub summary: Vec<ArmSummary>,
    /// Hash of the training scenes per seed, shared by every arm.
    pub data_hashes: Vec<(u64, String)>,
}

impl PlanReport {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.value.is_none()).count()
    }

    pub fn mean(&self, arm: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.arm == arm).map(|s| s.mean)
    }

    fn sorted_rows(&self) -> Vec<&MetricsRow> {
        let mut rows: Vec<&MetricsRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| (&a.arm, a.seed).cmp(&(&b.arm, b.seed)));
        rows
    }

    /// `plan,arm,seed,metric,value,trainable_params,status`, sorted by arm
    /// then seed. Wall time is kept out so that reruns produce identical
    /// bytes.
    pub fn write_metrics<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "plan",
            "arm",
            "seed",
            "metric",
            "value",
            "trainable_params",
            "status",
        ])?;
        for r in self.sorted_rows() {
            out.write_record([
                r.plan.name().to_string(),
                r.arm.clone(),
                r.seed.to_string(),
                r.metric.name().to_string(),
                r.value.map_or(String::new(), |v| format!("{v:.6}")),
                r.trainable_params.to_string(),
                if r.value.is_some() { "ok" } else { "failed" }.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_summary<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["arm", "runs", "failed", "mean", "std"])?;
        let mut summary: Vec<&ArmSummary> = self.summary.iter().collect();
        summary.sort_by(|a, b| a.arm.cmp(&b.arm));
        for s in summary {
            out.write_record([
                s.arm.clone(),
                s.runs.to_string(),
                s.failed.to_string(),
                format!("{:.6}", s.mean),
                format!("{:.6}", s.std),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_timings<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["arm", "seed", "wall_seconds"])?;
        for r in self.sorted_rows() {
            out.write_record([
                r.arm.clone(),
                r.seed.to_string(),
                format!("{:.3}", r.wall_seconds),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn examples(items: &[DataItem], task: Task) -> Result<Vec<Example>> {
    items
        .iter()
        .map(|it| match task {
            Task::Qa => it.qa_example(),
            Task::Caption => it.caption_example(),
        })
        .collect()
}

/// Fraction of questions whose answer ranks first among its candidates.
pub fn qa_accuracy(model: &Prismer, items: &[DataItem]) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for it in items {
        let z = encode(model, &it.rgb, &it.experts)?;
        for q in &it.qa {
            let mut prefix = vec![BOS];
            prefix.extend_from_slice(&q.question);
            let r = rank_closed_ended(model, &z, &prefix, &q.candidates())?;
            right += usize::from(r.index == 0);
            total += 1;
        }
    }
    Ok(right as f64 / total.max(1) as f64)
}

/// Fraction of images whose beam-3 caption equals the reference.
pub fn caption_exact_match(model: &Prismer, items: &[DataItem]) -> Result<f64> {
    let max_len = model.config.max_seq_len.saturating_sub(5).max(1);
    let mut right = 0usize;
    for it in items {
        let c = caption(model, &it.rgb, &it.experts, 3, max_len)?;
        right += usize::from(!c.truncated && c.tokens == it.caption);
    }
    Ok(right as f64 / items.len().max(1) as f64)
}

/// Result of a single training run.
pub struct RunOutcome {
    pub model: Prismer,
    pub trace: Vec<TraceRow>,
    pub data_hash: String,
}

/// Renders the run's training scenes and trains a fresh model on them.
pub fn train_run(cfg: &RunConfig, pipe: &ExpertPipeline) -> Result<RunOutcome> {
    let items = build_items(&cfg.train_spec(), pipe)?;
    train_on(cfg, &items)
}

pub fn train_on(cfg: &RunConfig, items: &[DataItem]) -> Result<RunOutcome> {
    let data = examples(items, cfg.data.task)?;
    let mut model = Prismer::new(cfg.model.clone(), cfg.train.seed)?;
    let trace = train_loop(&mut model, &data, &cfg.train)?;
    Ok(RunOutcome {
        model,
        trace,
        data_hash: content_hash(items),
    })
}

pub fn score(
    model: &Prismer,
    trace: &[TraceRow],
    metric: Metric,
    eval: &[DataItem],
) -> Result<f64> {
    match metric {
        Metric::QaAccuracy => qa_accuracy(model, eval),
        Metric::CaptionExactMatch => caption_exact_match(model, eval),
        Metric::FinalLoss => Ok(trace.last().map_or(f64::NAN, |r| r.loss)),
    }
}

fn summarize(arm: &str, rows: &[MetricsRow]) -> ArmSummary {
    let ok: Vec<f64> = rows
        .iter()
        .filter(|r| r.arm == arm)
        .filter_map(|r| r.value)
        .collect();
    let runs = rows.iter().filter(|r| r.arm == arm).count();
    let n = ok.len() as f64;
    let mean = if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().sum::<f64>() / n
    };
    let std = if ok.len() < 2 {
        0.0
    } else {
        (ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    ArmSummary {
        arm: arm.to_string(),
        runs,
        failed: runs - ok.len(),
        mean,
        std,
    }
}

/// Trains and scores every (arm, seed). Arms that diverge are recorded as
/// failed and the plan goes on. `progress` sees each row as it finishes.
pub fn run_plan(
    plan: &ExperimentPlan,
    mut progress: impl FnMut(&MetricsRow),
) -> Result<PlanReport> {
    plan.validate()?;
    let pipe = ExpertPipeline::new();
    let mut rows = Vec::new();
    let mut data_hashes: Vec<(u64, String)> = Vec::new();
    for arm in &plan.arms {
        for &seed in &plan.seeds {
            let cfg = plan.arm_config(arm, seed)?;
            let start = Instant::now();
            let items = build_items(&cfg.train_spec(), &pipe)?;
            let hash = content_hash(&items);
            match data_hashes.iter().find(|(s, _)| *s == seed) {
                Some((_, h)) if *h != hash => {
                    return Err(HarnessError::Config(format!(
                        "arm {} trains on different scenes for seed {seed}",
                        arm.label
                    )))
                }
                Some(_) => {}
                None => data_hashes.push((seed, hash)),
            }
            let mut probe = Prismer::new(cfg.model.clone(), seed)?;
            let trainable_params =
                partition_parameters(&mut probe.store, cfg.train.policy).trainable_count;
            let value = match train_on(&cfg, &items) {
                Ok(run) => {
                    let eval = if plan.metric == Metric::FinalLoss {
                        Vec::new()
                    } else {
                        build_items(&cfg.eval_spec(), &pipe)?
                    };
                    Some(score(&run.model, &run.trace, plan.metric, &eval)?)
                }
                Err(HarnessError::Train(TrainError::NonFinite { .. })) => None,
                Err(e) => return Err(e),
            };
            let row = MetricsRow {
                plan: plan.kind,
                arm: arm.label.clone(),
                seed,
                metric: plan.metric,
                value,
                trainable_params,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            progress(&row);
            rows.push(row);
        }
    }
    let summary = plan
        .arms
        .iter()
        .map(|a| summarize(&a.label, &rows))
        .collect();
    data_hashes.sort();
    Ok(PlanReport {
        kind: plan.kind,
        rows,
        summary,
        data_hashes,
    })
}
