//! The deploy, collect, build-dataset, retrain loop, with persistence.

pub mod config;
pub mod persist;
pub mod variants;

use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{feedback_stats, judged_accuracy, swsd, EvalError, ExecutionOutcome};
use crate::policy::{demonstration, sample_rollout, Ensemble, EnsemblePolicy, Featurizer, PolicyError};
use crate::rewards::{convert_demonstrations, RewardError, RewardedExample, Trace, TraceEnd};
use crate::simleader::{generate_scenario, Leader, Scenario};
use crate::trainer::{featurize_examples, train_ensemble, TrainError, TrainExample, TrainedMember};

pub use config::ExperimentConfig;
pub use persist::MetricRow;
pub use variants::{RoundData, RoundInputs, Variant};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    #[error("malformed artifact: {0}")]
    Format(String),
    #[error("trace {trace} does not replay: {reason}")]
    Replay { trace: u64, reason: String },
    #[error("round {round}: {source}")]
    Round { round: u32, source: Box<OrchestratorError> },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl OrchestratorError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        OrchestratorError::Io {
            path: path.to_owned(),
            source,
        }
    }

    fn in_round(self, round: u32) -> Self {
        match self {
            e @ OrchestratorError::Round { .. } => e,
            e => OrchestratorError::Round {
                round,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, OrchestratorError>;

/// Seed for item `index` of a named random stream.
pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stream.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn round_index(round: u32, i: usize) -> u64 {
    ((round as u64) << 32) | i as u64
}

const ROUND_ID_STRIDE: u64 = 1_000_000;
const DEMO_ID_OFFSET: u64 = 500_000;

/// Everything one round produced.
pub struct RoundOutcome {
    pub round: u32,
    pub traces: Vec<Trace>,
    pub data: RoundData,
    pub ensemble: Option<(Ensemble, Vec<TrainedMember>)>,
    pub metrics: Vec<MetricRow>,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub run_dir: PathBuf,
    pub variant: &'static dyn Variant,
    pub featurizer: Featurizer,
    /// Reuse traces already persisted for a round instead of redeploying.
    pub resume: bool,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, out_root: &Path) -> Result<Self> {
        config.validate()?;
        let variant = variants::lookup(&config.variant).ok_or_else(|| OrchestratorError::UnknownVariant(config.variant.clone()))?;
        Ok(Experiment {
            run_dir: out_root.join(config.run_name()),
            featurizer: Featurizer::new(config.feature_dim),
            variant,
            resume: false,
            config,
        })
    }

    pub fn round_dir(&self, round: u32) -> PathBuf {
        persist::round_dir(&self.run_dir, round)
    }

    fn scenario(&self, stream: &str, round: u32, i: usize) -> Scenario {
        generate_scenario(derive_seed(self.config.seed, stream, round_index(round, i)), &self.config.scenario())
    }

    /// Demonstration scenarios for training (after the variant's subsampling)
    /// and the held-out validation scenarios.
    pub fn demo_split(&self) -> (Vec<Scenario>, Vec<Scenario>) {
        let n = self.config.demo_interactions;
        let n_val = ((n as f64 * self.config.validation_fraction).round() as usize).clamp(1, n.max(1));
        let pool: Vec<Scenario> = (0..n).into_par_iter().map(|i| self.scenario("scenario", 0, i)).collect();
        let (train, val) = pool.split_at(n.saturating_sub(n_val));
        let frac = self.variant.demo_fraction(self.config.fewer_demo_fraction);
        let keep = ((train.len() as f64 * frac).round() as usize).min(train.len());
        (train[..keep].to_vec(), val.to_vec())
    }

    pub fn demonstrations(scenarios: &[Scenario], id_base: u64) -> Vec<Trace> {
        scenarios
            .iter()
            .enumerate()
            .map(|(i, s)| demonstration(s, id_base + i as u64))
            .collect()
    }

    /// Fresh demonstrations for a supervised-only round.
    fn fresh_demos(&self, round: u32) -> Vec<Trace> {
        let scenarios: Vec<Scenario> = (0..self.config.interactions)
            .into_par_iter()
            .map(|i| self.scenario("demo", round, i))
            .collect();
        let mut demos = Self::demonstrations(&scenarios, round as u64 * ROUND_ID_STRIDE + DEMO_ID_OFFSET);
        for d in &mut demos {
            d.round = 0;
        }
        demos
    }

    pub fn member_seeds(&self, round: u32) -> Vec<u64> {
        (0..self.config.ensemble_size)
            .map(|i| derive_seed(self.config.seed, "training", round_index(round, i)))
            .collect()
    }

    pub fn train(&self, round: u32, examples: &[TrainExample], validation: &[Scenario]) -> Result<(Ensemble, Vec<TrainedMember>)> {
        let start = std::time::Instant::now();
        let out = train_ensemble(examples, validation, &self.config.train(), self.featurizer, &self.member_seeds(round))?;
        info!(
            "round {round}: trained {} members on {} examples in {:.1}s",
            out.1.len(),
            examples.len(),
            start.elapsed().as_secs_f64()
        );
        Ok(out)
    }

    /// Deploy `ensemble` on the round's fresh scenarios with the scripted leader.
    pub fn deploy(&self, round: u32, ensemble: &Ensemble) -> Vec<Trace> {
        let policy = EnsemblePolicy {
            ensemble,
            featurizer: self.featurizer,
        };
        let c = &self.config;
        (0..c.interactions)
            .into_par_iter()
            .map(|i| {
                let scenario = self.scenario("scenario", round, i);
                let leader = Leader::new(c.oracle(), &scenario);
                let mut sample_rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, "sampling", round_index(round, i)));
                let mut oracle_rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, "oracle", round_index(round, i)));
                let mut t = sample_rollout(&policy, &scenario, Some(&leader), &mut sample_rng, &mut oracle_rng, c.max_steps);
                t.id = round as u64 * ROUND_ID_STRIDE + i as u64;
                t.round = round;
                t
            })
            .collect()
    }

    pub fn round_data(&self, round: u32, traces: &[Trace]) -> Result<RoundData> {
        let fresh = || self.fresh_demos(round);
        Ok(self.variant.round_data(&RoundInputs {
            traces,
            reward: self.config.reward(),
            fresh_demos: &fresh,
        })?)
    }

    fn metric(&self, round: u32, metric: &str, value: f64) -> MetricRow {
        MetricRow {
            round,
            variant: self.variant.name().to_owned(),
            metric: metric.to_owned(),
            value,
        }
    }

    /// Metrics of one round's deployment, its new data, and the model trained after it.
    pub fn evaluate(
        &self,
        round: u32,
        traces: &[Trace],
        data: Option<&RoundData>,
        trained: Option<&[TrainedMember]>,
        training_examples: Option<usize>,
    ) -> Result<Vec<MetricRow>> {
        let mut rows = Vec::new();
        let mut push = |name: &str, v: f64| rows.push(self.metric(round, name, v));
        if !traces.is_empty() {
            let scenarios: Vec<Scenario> = traces
                .par_iter()
                .map(|t| generate_scenario(t.scenario_seed, &self.config.scenario()))
                .collect();
            let plans: Vec<_> = scenarios.iter().map(|s| &s.plan).collect();
            let n = traces.len() as f64;
            let count = |e: TraceEnd| traces.iter().filter(|t| t.end == e).count() as f64 / n;
            push("accuracy", judged_accuracy(traces, &plans, self.config.stop_tolerance)?);
            let mean_swsd = traces
                .iter()
                .zip(&plans)
                .map(|(t, p)| swsd(&ExecutionOutcome::of_trace(t), &ExecutionOutcome::of_plan(p)))
                .sum::<f64>()
                / n;
            push("swsd", mean_swsd);
            push("completed_rate", count(TraceEnd::Stopped));
            push("reboot_rate", count(TraceEnd::Rebooted));
            push("truncated_rate", count(TraceEnd::Truncated));
            let steps: usize = traces.iter().map(|t| t.steps.len()).sum();
            push("steps_per_instruction", steps as f64 / n);
            let fs = feedback_stats(traces);
            push("positive_per_action", fs.positive_per_action);
            push("negative_per_action", fs.negative_per_action);
            if let Some(r) = fs.pos_neg_ratio {
                push("pos_neg_ratio", r);
            }
        }
        if let Some(d) = data {
            let pos = d.examples.iter().filter(|e| e.reward > 0).count();
            push("dataset_examples", d.examples.len() as f64);
            push("dataset_positive", pos as f64);
            push("dataset_negative", (d.examples.len() - pos) as f64);
            push("dataset_demo_examples", d.examples.iter().filter(|e| e.round == 0).count() as f64);
        }
        if let Some(n) = training_examples {
            push("training_examples", n as f64);
        }
        if let Some(members) = trained {
            let best: Vec<f64> = members
                .iter()
                .filter_map(|m| m.log.iter().find(|r| r.selected).map(|r| r.validation_swsd))
                .collect();
            if !best.is_empty() {
                push("validation_swsd", best.iter().sum::<f64>() / best.len() as f64);
            }
            let epochs: usize = members.iter().map(|m| m.log.len() - 1).sum();
            push("epochs_per_member", epochs as f64 / members.len() as f64);
        }
        Ok(rows)
    }

    fn save_members(&self, round: u32, members: &[TrainedMember]) -> Result<()> {
        let dir = self.round_dir(round);
        let pairs: Vec<(u64, &_)> = members.iter().map(|m| (m.seed, &m.params)).collect();
        persist::write_members(&dir, &pairs, round)?;
        for (i, m) in members.iter().enumerate() {
            persist::write_train_log(&dir.join(format!("train_member_{i}.csv")), &m.log)?;
        }
        Ok(())
    }

    pub fn load_ensemble(&self, round: u32) -> Result<Ensemble> {
        persist::read_members(&self.round_dir(round), self.config.ensemble_size)
    }

    fn write_config(&self) -> Result<()> {
        persist::ensure_dir(&self.run_dir)?;
        let path = self.run_dir.join("config.toml");
        std::fs::write(&path, self.config.to_toml()).map_err(|e| OrchestratorError::io(&path, e))
    }

    /// Demonstration data and the initial ensemble. Persists round 0.
    pub fn bootstrap(&self) -> Result<(Vec<RewardedExample>, Vec<Scenario>, Ensemble, Vec<MetricRow>)> {
        self.write_config()?;
        let dir = self.round_dir(0);
        let (train, validation) = self.demo_split();
        let demos = Self::demonstrations(&train, 0);
        let examples = convert_demonstrations(&demos);
        persist::write_traces(&dir.join("traces.jsonl"), &demos)?;
        persist::write_dataset(&dir.join("dataset.jsonl"), &examples)?;
        let feats = featurize_examples(&examples, &self.featurizer);
        let (ensemble, members) = self.train(0, &feats, &validation)?;
        self.save_members(0, &members)?;
        let data = RoundData {
            examples: examples.clone(),
            demos,
        };
        let mut metrics = vec![self.metric(0, "demonstrations", train.len() as f64)];
        metrics.extend(self.evaluate(0, &[], Some(&data), Some(&members), Some(examples.len()))?);
        persist::write_metrics(&dir.join("metrics.csv"), &metrics)?;
        Ok((examples, validation, ensemble, metrics))
    }

    /// Deploy, build the round's data, and retrain on everything so far.
    /// `history` holds the featurized examples of earlier rounds and grows.
    pub fn run_round(&self, round: u32, ensemble: &Ensemble, history: &mut Vec<TrainExample>, validation: &[Scenario], retrain: bool) -> Result<RoundOutcome> {
        let mut go = || -> Result<RoundOutcome> {
            let dir = self.round_dir(round);
            let traces_path = dir.join("traces.jsonl");
            let traces = if self.resume && traces_path.is_file() {
                info!("round {round}: reusing persisted traces");
                persist::read_traces(&traces_path, &self.config.scenario())?
            } else {
                let t = self.deploy(round, ensemble);
                persist::write_traces(&traces_path, &t)?;
                t
            };
            let data = self.round_data(round, &traces)?;
            persist::write_dataset(&dir.join("dataset.jsonl"), &data.examples)?;
            if !data.demos.is_empty() {
                persist::write_traces(&dir.join("demos.jsonl"), &data.demos)?;
            }
            history.extend(featurize_examples(&data.examples, &self.featurizer));
            let trained = if retrain {
                let t = self.train(round, history, validation)?;
                self.save_members(round, &t.1)?;
                Some(t)
            } else {
                None
            };
            let metrics = self.evaluate(round, &traces, Some(&data), trained.as_ref().map(|t| t.1.as_slice()), Some(history.len()))?;
            persist::write_metrics(&dir.join("metrics.csv"), &metrics)?;
            Ok(RoundOutcome {
                round,
                traces,
                data,
                ensemble: trained,
                metrics,
            })
        };
        go().map_err(|e| e.in_round(round))
    }

    /// Bootstrap, then rounds 1..=R. Returns every metric row, also written
    /// to `metrics.csv` in the run directory.
    pub fn run(&self) -> Result<Vec<MetricRow>> {
        let started = std::time::Instant::now();
        let (examples, validation, mut ensemble, mut metrics) = self.bootstrap().map_err(|e| e.in_round(0))?;
        let mut history = featurize_examples(&examples, &self.featurizer);
        for round in 1..=self.config.rounds {
            let retrain = round < self.config.rounds || self.config.train_after_last_round;
            let out = self.run_round(round, &ensemble, &mut history, &validation, retrain)?;
            if let Some(acc) = out.metrics.iter().find(|m| m.metric == "accuracy") {
                info!("round {round}: accuracy {:.3} ({:.0}s elapsed)", acc.value, started.elapsed().as_secs_f64());
            }
            metrics.extend(out.metrics);
            if let Some((next, _)) = out.ensemble {
                ensemble = next;
            }
        }
        persist::write_metrics(&self.run_dir.join("metrics.csv"), &metrics)?;
        Ok(metrics)
    }
}
