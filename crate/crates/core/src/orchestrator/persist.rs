//! On-disk artifacts: JSONL traces and datasets, binary member checkpoints,
//! CSV metrics and training logs.
//!
//! Traces store actions and feedback but not observations. Loading
//! regenerates the scenario from its seed and replays the actions, checking
//! every observation digest against the recorded one.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::hexgeom::AxialCoord;
use crate::policy::{read_checkpoint, write_checkpoint, Ensemble, PolicyParams};
use crate::rewards::{DatasetRow, RewardedExample, StepInput, Trace, TraceEnd, TraceStep};
use crate::simleader::{generate_scenario, FeedbackSignal, ScenarioConfig};
use crate::trainer::EpochRecord;
use crate::world::{Action, CardId};

use super::OrchestratorError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action: Action,
    pub wall_time: f64,
    pub behavior_prob: f64,
    pub toggled: Option<CardId>,
    pub invalid_set: bool,
    /// Digest of the observation the action was chosen from.
    pub observation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: u64,
    pub round: u32,
    pub scenario_seed: u64,
    pub instruction: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub feedback: Vec<FeedbackSignal>,
    pub end: TraceEnd,
    pub final_position: AxialCoord,
}

impl From<&Trace> for TraceRecord {
    fn from(t: &Trace) -> Self {
        TraceRecord {
            id: t.id,
            round: t.round,
            scenario_seed: t.scenario_seed,
            instruction: t.instruction.to_vec(),
            steps: t
                .steps
                .iter()
                .map(|s| StepRecord {
                    action: s.action,
                    wall_time: s.wall_time,
                    behavior_prob: s.behavior_prob,
                    toggled: s.toggled,
                    invalid_set: s.invalid_set,
                    observation: s.input.observation.digest(),
                })
                .collect(),
            feedback: t.feedback.clone(),
            end: t.end,
            final_position: t.final_position,
        }
    }
}

impl TraceRecord {
    /// Rebuild the full trace by replaying the actions in the regenerated scenario.
    pub fn restore(&self, config: &ScenarioConfig) -> Result<Trace, OrchestratorError> {
        let bad = |reason: String| OrchestratorError::Replay { trace: self.id, reason };
        let scenario = generate_scenario(self.scenario_seed, config);
        if scenario.instruction != self.instruction {
            return Err(bad("instruction differs from the regenerated scenario".into()));
        }
        let instruction: Arc<[String]> = Arc::from(self.instruction.clone());
        let mut world = scenario.world.clone();
        let mut obs = world.observe(None);
        let mut steps = Vec::with_capacity(self.steps.len());
        for (i, rec) in self.steps.iter().enumerate() {
            if i > 0 {
                obs = world.observe(Some(&obs));
            }
            if obs.digest() != rec.observation {
                return Err(bad(format!("observation digest mismatch at step {i}")));
            }
            let mask = world.executable_actions();
            let (next, events) = world
                .apply_action(rec.action)
                .map_err(|e| bad(format!("step {i}: {e}")))?;
            if events.toggled != rec.toggled || events.invalid_set != rec.invalid_set {
                return Err(bad(format!("card events differ at step {i}")));
            }
            steps.push(TraceStep {
                input: Arc::new(StepInput {
                    instruction: instruction.clone(),
                    observation: obs.clone(),
                    mask,
                }),
                action: rec.action,
                wall_time: rec.wall_time,
                behavior_prob: rec.behavior_prob,
                toggled: rec.toggled,
                invalid_set: rec.invalid_set,
            });
            world = next;
        }
        if world.follower.position != self.final_position {
            return Err(bad("final position differs after replay".into()));
        }
        let t = Trace {
            id: self.id,
            round: self.round,
            scenario_seed: self.scenario_seed,
            instruction,
            steps,
            feedback: self.feedback.clone(),
            end: self.end,
            final_position: self.final_position,
        };
        t.validate()?;
        Ok(t)
    }
}

pub fn round_dir(run_dir: &Path, round: u32) -> PathBuf {
    run_dir.join(format!("round_{round}"))
}

pub fn ensure_dir(dir: &Path) -> Result<(), OrchestratorError> {
    std::fs::create_dir_all(dir).map_err(|e| OrchestratorError::io(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, OrchestratorError> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| OrchestratorError::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), OrchestratorError> {
    let mut w = create(path)?;
    for row in rows {
        serde_json::to_writer(&mut w, &row).map_err(|e| OrchestratorError::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| OrchestratorError::io(path, e))?;
    }
    w.flush().map_err(|e| OrchestratorError::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, OrchestratorError> {
    let f = File::open(path).map_err(|e| OrchestratorError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| OrchestratorError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| OrchestratorError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_traces(path: &Path, traces: &[Trace]) -> Result<(), OrchestratorError> {
    write_jsonl(path, traces.iter().map(TraceRecord::from))
}

pub fn read_traces(path: &Path, config: &ScenarioConfig) -> Result<Vec<Trace>, OrchestratorError> {
    read_jsonl::<TraceRecord>(path)?
        .iter()
        .map(|r| r.restore(config))
        .collect()
}

pub fn write_dataset(path: &Path, examples: &[RewardedExample]) -> Result<(), OrchestratorError> {
    write_jsonl(path, examples.iter().map(DatasetRow::from))
}

/// Reattach dataset rows to the step inputs of the traces they came from.
pub fn read_dataset(path: &Path, sources: &[Trace]) -> Result<Vec<RewardedExample>, OrchestratorError> {
    let index: BTreeMap<(u64, usize), &Arc<StepInput>> = sources
        .iter()
        .flat_map(|t| t.steps.iter().enumerate().map(move |(i, s)| ((t.id, i), &s.input)))
        .collect();
    read_jsonl::<DatasetRow>(path)?
        .into_iter()
        .map(|row| {
            let input = index.get(&(row.trace_id, row.step)).ok_or_else(|| {
                OrchestratorError::Format(format!("dataset row ({}, {}) has no source trace", row.trace_id, row.step))
            })?;
            if input.observation.digest() != row.observation {
                return Err(OrchestratorError::Format(format!(
                    "dataset row ({}, {}) disagrees with its source observation",
                    row.trace_id, row.step
                )));
            }
            Ok(RewardedExample {
                trace_id: row.trace_id,
                step: row.step,
                input: Arc::clone(input),
                action: row.action,
                reward: row.reward,
                behavior_prob: row.behavior_prob,
                round: row.round,
            })
        })
        .collect()
}

pub fn member_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("member_{i}.ckpt"))
}

pub fn write_members(dir: &Path, members: &[(u64, &PolicyParams)], round: u32) -> Result<(), OrchestratorError> {
    for (i, (seed, params)) in members.iter().enumerate() {
        let path = member_path(dir, i);
        let mut w = create(&path)?;
        write_checkpoint(&mut w, params, *seed, round)?;
        w.flush().map_err(|e| OrchestratorError::io(&path, e))?;
    }
    Ok(())
}

pub fn read_members(dir: &Path, count: usize) -> Result<Ensemble, OrchestratorError> {
    let mut members = Vec::with_capacity(count);
    for i in 0..count {
        let path = member_path(dir, i);
        let f = File::open(&path).map_err(|e| OrchestratorError::io(&path, e))?;
        members.push(read_checkpoint(&mut BufReader::new(f))?.1);
    }
    Ok(Ensemble::new(members)?)
}

pub fn members_exist(dir: &Path, count: usize) -> bool {
    (0..count).all(|i| member_path(dir, i).is_file())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: u32,
    pub variant: String,
    pub metric: String,
    pub value: f64,
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<(), OrchestratorError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| OrchestratorError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| OrchestratorError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>, OrchestratorError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| OrchestratorError::Format(e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| OrchestratorError::Format(e.to_string())))
        .collect()
}

pub fn write_train_log(path: &Path, log: &[EpochRecord]) -> Result<(), OrchestratorError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in log {
        w.serialize(r).map_err(|e| OrchestratorError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| OrchestratorError::io(path, e))
}
