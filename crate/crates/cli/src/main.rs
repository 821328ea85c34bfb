use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use prismer::experts::ExpertPipeline;
use prismer::harness::dataset::{build_items, content_hash, read_dataset, write_dataset, DataItem};
use prismer::harness::plan::{examples, score, ExperimentPlan, Metric, PlanKind};
use prismer::harness::{estimate_cost, run_plan, HarnessError, Result, RunConfig, Task};
use prismer::infer::{encode, generate, rank_closed_ended, CAPTION_PROMPT};
use prismer::model::{load_checkpoint, save_checkpoint, Prismer};
use prismer::train::{train_loop, write_trace};
use prismer::vocab::{Vocab, BOS, EOS};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "prismer",
    version,
    about = "Expert-conditioned vision-language model on synthetic scenes"
)]
struct Cli {
    /// key=value file with model., train., data. and experts. keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (overrides train.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset directory.
    GenData {
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Train a model; writes a checkpoint, the loss trace and the config.
    Train {
        /// Dataset written by gen-data; rendered on the fly when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on held-out scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        metric: Option<String>,
    },
    /// Generate text for one scene, or rank candidate answers.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Scene index within the dataset (or the held-out scenes).
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long, default_value_t = 16)]
        max_len: usize,
        #[arg(long, default_value = CAPTION_PROMPT)]
        prompt: String,
        /// Comma-separated answers; switches to closed-ended ranking.
        #[arg(long)]
        candidates: Option<String>,
    },
    /// Run an ablation plan.
    Ablate {
        plan: String,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        metric: Option<String>,
    },
    /// Parameter counts and FLOP estimates for the configured model.
    Cost {
        #[arg(long)]
        tokens_per_example: Option<u64>,
        #[arg(long)]
        examples: Option<u64>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    let dir = cli
        .out
        .as_deref()
        .ok_or_else(|| HarnessError::Config("--out is required".into()))?;
    fs::create_dir_all(dir)?;
    Ok(dir)
}

fn write_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    let text: String = cfg
        .to_kv()
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    fs::write(path, text)?;
    Ok(())
}

fn encode_text(text: &str) -> Result<Vec<usize>> {
    Vocab::get().encode(text).map_err(HarnessError::Config)
}

/// Checkpointed model plus the held-out scenes it should be scored on.
fn model_and_scenes(
    cfg: &mut RunConfig,
    checkpoint: &Path,
    data: Option<&Path>,
) -> Result<(Prismer, Vec<DataItem>)> {
    let model = load_checkpoint(checkpoint)?;
    cfg.model = model.config.clone();
    let items = match data {
        Some(d) => {
            let (spec, items) = read_dataset(d)?;
            if spec.experts != model.config.experts {
                return Err(HarnessError::Config(format!(
                    "dataset experts {:?} differ from the checkpoint's {:?}",
                    spec.experts, model.config.experts
                )));
            }
            items
        }
        None => build_items(&cfg.eval_spec(), &ExpertPipeline::new())?,
    };
    Ok((model, items))
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData { split } => {
            let out = out_dir(cli)?;
            let spec = match split {
                Split::Train => cfg.train_spec(),
                Split::Eval => cfg.eval_spec(),
            };
            let items = write_dataset(&spec, &ExpertPipeline::new(), out)?;
            println!("scenes={}", items.len());
            println!("content_sha256={}", content_hash(&items));
        }
        Command::Train { data } => {
            let out = out_dir(cli)?;
            let items = match data {
                Some(d) => {
                    let (spec, items) = read_dataset(d)?;
                    if spec.experts != cfg.model.experts {
                        return Err(HarnessError::Config(format!(
                            "dataset experts {:?} differ from the configured {:?}",
                            spec.experts, cfg.model.experts
                        )));
                    }
                    items
                }
                None => build_items(&cfg.train_spec(), &ExpertPipeline::new())?,
            };
            let data = examples(&items, cfg.data.task)?;
            let mut model = Prismer::new(cfg.model.clone(), cfg.train.seed)?;
            let trace = train_loop(&mut model, &data, &cfg.train)?;
            save_checkpoint(&model, &out.join("checkpoint"))?;
            write_trace(&trace, fs::File::create(out.join("trace.csv"))?)?;
            write_config(&cfg, &out.join("config.txt"))?;
            if let Some(last) = trace.last() {
                println!("steps={} final_loss={:.6}", trace.len(), last.loss);
            }
        }
        Command::Eval {
            checkpoint,
            data,
            metric,
        } => {
            let (model, items) = model_and_scenes(&mut cfg, checkpoint, data.as_deref())?;
            let metric = match metric {
                Some(m) => m.parse()?,
                None if cfg.data.task == Task::Caption => Metric::CaptionExactMatch,
                None => Metric::QaAccuracy,
            };
            if metric == Metric::FinalLoss {
                return Err(HarnessError::Config(
                    "final-loss is a training metric".into(),
                ));
            }
            let value = score(&model, &[], metric, &items)?;
            let line = format!("{}={value:.6}", metric.name());
            println!("{line}");
            if let Some(out) = &cli.out {
                fs::create_dir_all(out)?;
                fs::write(
                    out.join("eval.txt"),
                    format!("{line}\nscenes={}\n", items.len()),
                )?;
            }
        }
        Command::Decode {
            checkpoint,
            data,
            index,
            beam,
            max_len,
            prompt,
            candidates,
        } => {
            let (model, items) = model_and_scenes(&mut cfg, checkpoint, data.as_deref())?;
            let item = items.get(*index).ok_or_else(|| {
                HarnessError::Config(format!(
                    "scene index {index} out of range ({})",
                    items.len()
                ))
            })?;
            let prompt_ids = encode_text(prompt)?;
            let z = encode(&model, &item.rgb, &item.experts)?;
            let vocab = Vocab::get();
            match candidates {
                None => {
                    let g = generate(&model, &z, &prompt_ids, *beam, *max_len)?;
                    let tokens: Vec<usize> =
                        g.tokens.iter().copied().filter(|&t| t != EOS).collect();
                    if g.truncated {
                        eprintln!("warning: no hypothesis ended within --max-len {max_len}");
                    }
                    println!("{}", vocab.decode(&tokens));
                }
                Some(list) => {
                    let answers = list
                        .split(',')
                        .map(|a| encode_text(a.trim()))
                        .collect::<Result<Vec<Vec<usize>>>>()?;
                    let mut prefix = vec![BOS];
                    prefix.extend(prompt_ids);
                    let r = rank_closed_ended(&model, &z, &prefix, &answers)?;
                    for (i, (a, s)) in answers.iter().zip(&r.scores).enumerate() {
                        let rec = json!({
                            "index": i,
                            "candidate": vocab.decode(a),
                            "score": s,
                            "chosen": i == r.index,
                        });
                        println!("{rec}");
                    }
                }
            }
        }
        Command::Ablate {
            plan,
            seeds,
            metric,
        } => {
            let out = out_dir(cli)?;
            let mut p = ExperimentPlan::standard(plan.parse::<PlanKind>()?, cfg.clone());
            p.seeds = (0..*seeds).map(|i| cfg.train.seed + i).collect();
            if let Some(m) = metric {
                p.metric = m.parse()?;
            }
            let report = run_plan(&p, |row| {
                let v = row
                    .value
                    .map_or("failed".to_string(), |v| format!("{v:.4}"));
                eprintln!(
                    "{} seed {}: {} {v} ({:.1}s)",
                    row.arm,
                    row.seed,
                    row.metric.name(),
                    row.wall_seconds
                );
            })?;
            report.write_metrics(fs::File::create(out.join("metrics.csv"))?)?;
            report.write_summary(fs::File::create(out.join("summary.csv"))?)?;
            report.write_timings(fs::File::create(out.join("timings.csv"))?)?;
            for s in &report.summary {
                println!(
                    "{}: {:.4} ± {:.4} ({} runs, {} failed)",
                    s.arm, s.mean, s.std, s.runs, s.failed
                );
            }
            if report.failed() > 0 {
                return Err(HarnessError::ArmsFailed(report.failed()));
            }
        }
        Command::Cost {
            tokens_per_example,
            examples,
        } => {
            let tokens = tokens_per_example.unwrap_or(cfg.model.max_seq_len as u64);
            let n = examples.unwrap_or(cfg.data.scenes as u64);
            let c = estimate_cost(&cfg.model, tokens, n)?;
            println!("trainable_params={}", c.trainable_params);
            println!("total_params={}", c.total_params);
            println!("trainable_share={:.4}", c.trainable_share());
            println!("train_flops={:.4e}", c.train_flops);
            println!("inference_flops={:.4e}", c.inference_flops);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
