use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use hexfollow::orchestrator::{persist, Experiment, ExperimentConfig, RoundData};
use hexfollow::rewards::{RewardedExample, Trace};
use hexfollow::trainer::featurize_examples;

#[derive(Parser)]
#[command(name = "hexfollow", version, about = "Train a hex-grid instruction follower from simulated realtime feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat TOML file of experiment constants.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<u32>,
    /// One of RewardProp, SimpleReward, NoNegative, FewerDemo, SupOnly.
    #[arg(long)]
    variant: Option<String>,
    /// Root directory for runs; artifacts go to <out-dir>/<run name>.
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
    /// Instructions deployed per round.
    #[arg(long)]
    interactions: Option<usize>,
}

#[derive(Args)]
struct RoundArg {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    round: u32,
}

#[derive(Subcommand)]
enum Command {
    /// Build the demonstration set and train the initial ensemble (round 0).
    Bootstrap(Common),
    /// Deploy the ensemble trained after round-1 and record traces for the round.
    Deploy(RoundArg),
    /// Turn a round's traces into rewarded examples.
    BuildDataset(RoundArg),
    /// Retrain from scratch on the datasets of rounds 0 through the given round.
    Train(RoundArg),
    /// Compute metrics for a round's traces and dataset.
    Evaluate(RoundArg),
    /// Full experiment: bootstrap and every round.
    Run {
        #[command(flatten)]
        common: Common,
        /// Reuse traces already on disk for a round.
        #[arg(long)]
        resume: bool,
    },
    /// Print the effective configuration.
    Config(Common),
}

fn experiment(c: &Common) -> Result<Experiment> {
    let mut config = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        config.seed = s;
    }
    if let Some(r) = c.rounds {
        config.rounds = r;
    }
    if let Some(v) = &c.variant {
        config.variant = v.clone();
    }
    if let Some(n) = c.interactions {
        config.interactions = n;
    }
    Ok(Experiment::new(config, &c.out_dir)?)
}

fn round_sources(exp: &Experiment, round: u32) -> Result<Vec<Trace>> {
    let dir = exp.round_dir(round);
    let scenario = exp.config.scenario();
    let mut sources = persist::read_traces(&dir.join("traces.jsonl"), &scenario)?;
    let demos = dir.join("demos.jsonl");
    if demos.is_file() {
        sources.extend(persist::read_traces(&demos, &scenario)?);
    }
    Ok(sources)
}

fn load_examples(exp: &Experiment, round: u32) -> Result<Vec<RewardedExample>> {
    let sources = round_sources(exp, round)?;
    let path = exp.round_dir(round).join("dataset.jsonl");
    persist::read_dataset(&path, &sources).with_context(|| format!("loading {}", path.display()))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if !path.exists() {
        bail!("{} is missing; run `{hint}` first", path.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Bootstrap(c) => {
            let exp = experiment(&c)?;
            let (examples, _, _, _) = exp.bootstrap()?;
            info!("bootstrap: {} demonstration examples in {}", examples.len(), exp.round_dir(0).display());
        }
        Command::Deploy(r) => {
            let exp = experiment(&r.common)?;
            if r.round == 0 {
                bail!("round 0 is the bootstrap; deploy rounds start at 1");
            }
            let prev = exp.round_dir(r.round - 1);
            require(&persist::member_path(&prev, 0), "train")?;
            let ensemble = exp.load_ensemble(r.round - 1)?;
            let traces = exp.deploy(r.round, &ensemble);
            let path = exp.round_dir(r.round).join("traces.jsonl");
            persist::write_traces(&path, &traces)?;
            info!("deploy: {} traces to {}", traces.len(), path.display());
        }
        Command::BuildDataset(r) => {
            let exp = experiment(&r.common)?;
            let dir = exp.round_dir(r.round);
            require(&dir.join("traces.jsonl"), "deploy")?;
            let traces = persist::read_traces(&dir.join("traces.jsonl"), &exp.config.scenario())?;
            let data = exp.round_data(r.round, &traces)?;
            persist::write_dataset(&dir.join("dataset.jsonl"), &data.examples)?;
            if !data.demos.is_empty() {
                persist::write_traces(&dir.join("demos.jsonl"), &data.demos)?;
            }
            info!("build-dataset: {} examples", data.examples.len());
        }
        Command::Train(r) => {
            let exp = experiment(&r.common)?;
            let mut examples = Vec::new();
            for k in 0..=r.round {
                require(&exp.round_dir(k).join("dataset.jsonl"), "build-dataset")?;
                examples.extend(load_examples(&exp, k)?);
            }
            let feats = featurize_examples(&examples, &exp.featurizer);
            let (_, validation) = exp.demo_split();
            let (_, members) = exp.train(r.round, &feats, &validation)?;
            let dir = exp.round_dir(r.round);
            let pairs: Vec<_> = members.iter().map(|m| (m.seed, &m.params)).collect();
            persist::write_members(&dir, &pairs, r.round)?;
            for (i, m) in members.iter().enumerate() {
                persist::write_train_log(&dir.join(format!("train_member_{i}.csv")), &m.log)?;
            }
            info!("train: {} members written to {}", members.len(), dir.display());
        }
        Command::Evaluate(r) => {
            let exp = experiment(&r.common)?;
            let dir = exp.round_dir(r.round);
            let traces = if r.round == 0 {
                Vec::new()
            } else {
                require(&dir.join("traces.jsonl"), "deploy")?;
                persist::read_traces(&dir.join("traces.jsonl"), &exp.config.scenario())?
            };
            let data = if dir.join("dataset.jsonl").is_file() {
                Some(RoundData {
                    examples: load_examples(&exp, r.round)?,
                    demos: Vec::new(),
                })
            } else {
                None
            };
            // examples accumulated through this round, as the full run reports them
            let training_examples = (0..=r.round)
                .map(|k| std::fs::read_to_string(exp.round_dir(k).join("dataset.jsonl")).map(|t| t.lines().count()))
                .sum::<std::io::Result<usize>>()
                .ok();
            let metrics = exp.evaluate(r.round, &traces, data.as_ref(), None, training_examples)?;
            persist::write_metrics(&dir.join("metrics.csv"), &metrics)?;
            for m in &metrics {
                println!("{},{},{},{}", m.round, m.variant, m.metric, m.value);
            }
        }
        Command::Run { common, resume } => {
            let mut exp = experiment(&common)?;
            exp.resume = resume;
            let metrics = exp.run()?;
            for m in metrics.iter().filter(|m| m.metric == "accuracy") {
                println!("round {} accuracy {:.3}", m.round, m.value);
            }
            info!("run complete: {}", exp.run_dir.display());
        }
        Command::Config(c) => {
            print!("{}", experiment(&c)?.config.to_toml());
        }
    }
    Ok(())
}
