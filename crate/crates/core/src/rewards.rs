//! Reward attribution: turns executed traces and their feedback streams into
//! rewarded training examples.
//!
//! A trace pairs the follower's timed actions with the leader's timed binary
//! feedback. The simple reward of action `i` is the sign of the summed
//! feedback whose delay-corrected time falls in `(w_i, w_{i+1}]`, where the
//! last action's window is open-ended. Propagation back-fills unrewarded
//! actions from the next directly rewarded action within a fixed window, and
//! scenario filters drop examples made unreliable by card interactions.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hexgeom::AxialCoord;
use crate::simleader::FeedbackSignal;
use crate::world::{Action, ActionSet, CardId, Observation};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("trace {trace}: action wall times not strictly increasing at step {step}")]
    NonMonotoneWallTime { trace: u64, step: usize },
    #[error("trace {trace}: {reason}")]
    InvalidTrace { trace: u64, reason: String },
}

/// Everything the policy conditions on at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInput {
    pub instruction: Arc<[String]>,
    pub observation: Observation,
    pub mask: ActionSet,
}

impl StepInput {
    /// Input with an empty observation, for traces that never touch a board.
    pub fn blank(instruction: Arc<[String]>, mask: ActionSet) -> Self {
        StepInput {
            instruction,
            observation: Observation::default(),
            mask,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub input: Arc<StepInput>,
    pub action: Action,
    /// Time the action started executing.
    pub wall_time: f64,
    /// Probability the deployed policy gave `action`.
    pub behavior_prob: f64,
    pub toggled: Option<CardId>,
    /// The action left a card selection that cannot become a valid set.
    pub invalid_set: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEnd {
    Stopped,
    Rebooted,
    /// Hit the step limit without stopping or being rebooted.
    Truncated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub id: u64,
    pub round: u32,
    pub scenario_seed: u64,
    pub instruction: Arc<[String]>,
    pub steps: Vec<TraceStep>,
    /// Sorted by wall time.
    pub feedback: Vec<FeedbackSignal>,
    pub end: TraceEnd,
    pub final_position: AxialCoord,
}

impl Trace {
    pub fn rebooted(&self) -> bool {
        self.end == TraceEnd::Rebooted
    }

    /// Cards toggled an odd number of times.
    pub fn net_toggled(&self) -> std::collections::BTreeSet<CardId> {
        let mut counts: BTreeMap<CardId, u32> = BTreeMap::new();
        for s in &self.steps {
            if let Some(id) = s.toggled {
                *counts.entry(id).or_default() += 1;
            }
        }
        counts.into_iter().filter(|(_, n)| n % 2 == 1).map(|(id, _)| id).collect()
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let bad = |reason: &str| RewardError::InvalidTrace {
            trace: self.id,
            reason: reason.to_owned(),
        };
        if self.steps.is_empty() {
            return Err(bad("no steps"));
        }
        check_monotone(self)?;
        let last_stop = self.steps.last().map(|s| s.action) == Some(Action::Stop);
        if last_stop != (self.end == TraceEnd::Stopped) {
            return Err(bad("final action must be STOP exactly when the trace stopped"));
        }
        if self.steps[..self.steps.len() - 1].iter().any(|s| s.action == Action::Stop) {
            return Err(bad("STOP before the final step"));
        }
        if self.rebooted() && self.feedback.last().map(|f| f.sign) != Some(-1) {
            return Err(bad("rebooted trace must end with a negative signal"));
        }
        if self.feedback.windows(2).any(|w| w[0].wall_time > w[1].wall_time) {
            return Err(bad("feedback not sorted by time"));
        }
        if self.feedback.iter().any(|f| f.sign != 1 && f.sign != -1) {
            return Err(bad("feedback sign outside {+1,-1}"));
        }
        if self
            .steps
            .iter()
            .any(|s| !(s.behavior_prob > 0.0 && s.behavior_prob <= 1.0))
        {
            return Err(bad("behavior probability outside (0,1]"));
        }
        if self.round == 0 && self.steps.iter().any(|s| s.behavior_prob != 1.0) {
            return Err(bad("demonstration with behavior probability below 1"));
        }
        Ok(())
    }
}

/// Step index to reward; rewards are always +1 or -1.
pub type RewardMap = BTreeMap<usize, i8>;

#[derive(Clone, Debug, PartialEq)]
pub struct RewardedExample {
    pub trace_id: u64,
    pub step: usize,
    pub input: Arc<StepInput>,
    pub action: Action,
    pub reward: i8,
    pub behavior_prob: f64,
    pub round: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    /// Delay-corrected sign of summed feedback, nothing else.
    Simple,
    /// Simple reward, invalid-set barring, propagation, truncation after bad card interactions.
    Propagated,
    /// Propagated pipeline after discarding every negative signal, reboots included.
    NoNegative,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Human response delay subtracted from feedback times, seconds.
    pub response_delay: f64,
    /// How many following actions propagation may look ahead.
    pub propagation_window: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            response_delay: 0.2,
            propagation_window: 8,
        }
    }
}

fn check_monotone(t: &Trace) -> Result<(), RewardError> {
    for (i, w) in t.steps.windows(2).enumerate() {
        if !(w[0].wall_time < w[1].wall_time) {
            return Err(RewardError::NonMonotoneWallTime { trace: t.id, step: i + 1 });
        }
    }
    Ok(())
}

pub fn simple_reward(t: &Trace, delay: f64) -> Result<RewardMap, RewardError> {
    check_monotone(t)?;
    let mut sums: BTreeMap<usize, i32> = BTreeMap::new();
    for f in &t.feedback {
        let shifted = f.wall_time - delay;
        // first action starting at or after the shifted time owns the window before it
        let next = t.steps.partition_point(|s| s.wall_time < shifted);
        if next == 0 {
            continue;
        }
        *sums.entry(next - 1).or_default() += f.sign as i32;
    }
    Ok(sums
        .into_iter()
        .filter(|(_, s)| *s != 0)
        .map(|(i, s)| (i, s.signum() as i8))
        .collect())
}

/// Back-fill unrewarded steps from the nearest directly rewarded step
/// within `window` later actions. Invalid-set steps are neither sources nor
/// targets, and a negatively rewarded STOP is never a source.
pub fn propagate(rewards: &RewardMap, t: &Trace, window: usize) -> RewardMap {
    let barred = |i: usize| t.steps[i].invalid_set;
    let direct: RewardMap = rewards.iter().filter(|(i, _)| !barred(**i)).map(|(i, r)| (*i, *r)).collect();
    let mut out = direct.clone();
    for i in 0..t.steps.len() {
        if direct.contains_key(&i) || barred(i) {
            continue;
        }
        let source = direct.range(i + 1..=i + window).next();
        if let Some((&k, &r)) = source {
            if t.steps[k].action == Action::Stop && r < 0 {
                continue;
            }
            out.insert(i, r);
        }
    }
    out
}

/// Drop invalid-set steps, and every step after the first card toggle
/// that carries a negative reward.
pub fn apply_scenario_filters(rewards: &RewardMap, t: &Trace) -> RewardMap {
    let cutoff = rewards
        .iter()
        .find(|(i, r)| **r < 0 && t.steps[**i].toggled.is_some())
        .map(|(i, _)| *i);
    rewards
        .iter()
        .filter(|(i, _)| !t.steps[**i].invalid_set)
        .filter(|(i, _)| cutoff.map_or(true, |c| **i <= c))
        .map(|(i, r)| (*i, *r))
        .collect()
}

/// Rewards for one trace under `mode`.
pub fn trace_rewards(t: &Trace, mode: DatasetMode, config: &RewardConfig) -> Result<RewardMap, RewardError> {
    match mode {
        DatasetMode::Simple => simple_reward(t, config.response_delay),
        DatasetMode::Propagated => {
            let direct = simple_reward(t, config.response_delay)?;
            let spread = propagate(&direct, t, config.propagation_window);
            Ok(apply_scenario_filters(&spread, t))
        }
        DatasetMode::NoNegative => {
            let mut positive_only = t.clone();
            positive_only.feedback.retain(|f| f.sign > 0);
            trace_rewards(&positive_only, DatasetMode::Propagated, config)
        }
    }
}

pub fn build_dataset(
    traces: &[Trace],
    mode: DatasetMode,
    config: &RewardConfig,
) -> Result<Vec<RewardedExample>, RewardError> {
    let mut out = Vec::new();
    for t in traces {
        for (i, r) in trace_rewards(t, mode, config)? {
            let s = &t.steps[i];
            out.push(RewardedExample {
                trace_id: t.id,
                step: i,
                input: Arc::clone(&s.input),
                action: s.action,
                reward: r,
                behavior_prob: s.behavior_prob,
                round: t.round,
            });
        }
    }
    out.sort_by_key(|e| (e.trace_id, e.step));
    Ok(out)
}

/// Every demonstrated step becomes a +1 example with unit propensity.
pub fn convert_demonstrations(demos: &[Trace]) -> Vec<RewardedExample> {
    demos
        .iter()
        .flat_map(|t| {
            t.steps.iter().enumerate().map(move |(i, s)| RewardedExample {
                trace_id: t.id,
                step: i,
                input: Arc::clone(&s.input),
                action: s.action,
                reward: 1,
                behavior_prob: 1.0,
                round: 0,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub trace_id: u64,
    pub step: usize,
    pub instruction: String,
    pub observation: String,
    pub action: Action,
    pub reward: i8,
    pub behavior_prob: f64,
    pub round: u32,
}

impl From<&RewardedExample> for DatasetRow {
    fn from(e: &RewardedExample) -> Self {
        DatasetRow {
            trace_id: e.trace_id,
            step: e.step,
            instruction: e.input.instruction.join(" "),
            observation: e.input.observation.digest(),
            action: e.action,
            reward: e.reward,
            behavior_prob: e.behavior_prob,
            round: e.round,
        }
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    fn map(pairs: &[(usize, i8)]) -> RewardMap {
        pairs.iter().copied().collect()
    }

    #[test]
    fn simple_reward_shifted_window() {
        let t = trace(&[Action::Forward, Action::Forward, Action::Stop], &[0.0, 1.0, 2.0], &[(1, 1.5)]);
        // 1.5 - 0.2 = 1.3 falls in (1.0, 2.0], the second action
        assert_eq!(simple_reward(&t, 0.2).unwrap(), map(&[(1, 1)]));
    }

    #[test]
    fn simple_reward_cancelling_signals() {
        let t = trace(&[Action::Forward, Action::Forward, Action::Stop], &[0.0, 1.0, 2.0], &[(1, 1.4), (-1, 1.6)]);
        assert!(simple_reward(&t, 0.2).unwrap().is_empty());
        let silent = trace(&[Action::Forward, Action::Stop], &[0.0, 1.0], &[]);
        assert!(simple_reward(&silent, 0.2).unwrap().is_empty());
    }

    #[test]
    fn simple_reward_window_edges() {
        let (a, w) = forwards(3);
        // shifted exactly onto w_2 belongs to the first action; at w_1 belongs to nobody
        let t = trace(&a, &w, &[(1, 1.25), (-1, 0.25)]);
        assert_eq!(simple_reward(&t, 0.25).unwrap(), map(&[(0, 1)]));
        // last window is open-ended
        let late = trace(&a, &w, &[(-1, 100.0)]);
        assert_eq!(simple_reward(&late, 0.2).unwrap(), map(&[(2, -1)]));
    }

    #[test]
    fn simple_reward_rejects_non_monotone() {
        let t = trace(&[Action::Forward, Action::Forward, Action::Stop], &[0.0, 1.0, 1.0], &[]);
        assert_eq!(
            simple_reward(&t, 0.2),
            Err(RewardError::NonMonotoneWallTime { trace: 1, step: 2 })
        );
    }

    #[test]
    fn propagate_fills_window() {
        let (a, w) = forwards(3);
        let t = trace(&a, &w, &[]);
        assert_eq!(propagate(&map(&[(2, 1)]), &t, 8), map(&[(0, 1), (1, 1), (2, 1)]));

        let (a, w) = forwards(12);
        let t = trace(&a, &w, &[]);
        let out = propagate(&map(&[(9, 1)]), &t, 8);
        assert!(!out.contains_key(&0));
        for i in 1..=9 {
            assert_eq!(out[&i], 1);
        }
        assert!(!out.contains_key(&10));
    }

    #[test]
    fn propagate_never_overwrites() {
        let (a, w) = forwards(6);
        let t = trace(&a, &w, &[]);
        let out = propagate(&map(&[(1, -1), (4, 1)]), &t, 8);
        assert_eq!(out, map(&[(0, -1), (1, -1), (2, 1), (3, 1), (4, 1)]));
    }

    #[test]
    fn negative_stop_does_not_propagate() {
        let (a, w) = forwards(5);
        let t = trace(&a, &w, &[]);
        assert_eq!(propagate(&map(&[(4, -1)]), &t, 8), map(&[(4, -1)]));
        // a positive STOP does
        assert_eq!(propagate(&map(&[(4, 1)]), &t, 8).len(), 5);
    }

    #[test]
    fn truncation_after_bad_card_interaction() {
        let (a, w) = forwards(8);
        let mut t = trace(&a, &w, &[]);
        t.steps[3].toggled = Some(CardId(4));
        let rewards = map(&[(2, 1), (3, -1), (4, 1), (5, 1)]);
        assert_eq!(apply_scenario_filters(&rewards, &t), map(&[(2, 1), (3, -1)]));
        let clean = trace(&a, &w, &[]);
        assert_eq!(apply_scenario_filters(&rewards, &clean), rewards);
    }

    #[test]
    fn invalid_set_is_removed_and_not_a_source() {
        let (a, w) = forwards(6);
        let mut t = trace(&a, &w, &[]);
        t.steps[2].invalid_set = true;
        t.steps[2].toggled = Some(CardId(1));
        let spread = propagate(&map(&[(2, 1)]), &t, 8);
        assert!(spread.is_empty());
        assert!(apply_scenario_filters(&map(&[(2, 1), (4, 1)]), &t).get(&2).is_none());
    }

    #[test]
    fn no_negative_mode_has_no_negatives() {
        let (a, w) = forwards(6);
        let t = trace(&a, &w, &[(-1, 0.5), (1, 1.5), (-1, 3.4), (-1, 5.5)]);
        let ds = build_dataset(&[t.clone()], DatasetMode::NoNegative, &RewardConfig::default()).unwrap();
        assert!(!ds.is_empty());
        assert!(ds.iter().all(|e| e.reward == 1));
        let with_neg = build_dataset(&[t], DatasetMode::Propagated, &RewardConfig::default()).unwrap();
        assert!(with_neg.iter().any(|e| e.reward == -1));
    }

    #[test]
    fn demonstrations_convert_to_positive_examples() {
        assert!(convert_demonstrations(&[]).is_empty());
        let (a, w) = forwards(7);
        let mut t = trace(&a, &w, &[]);
        t.round = 0;
        let ex = convert_demonstrations(&[t]);
        assert_eq!(ex.len(), 7);
        assert!(ex.iter().all(|e| e.reward == 1 && e.round == 0 && e.behavior_prob == 1.0));
    }

    #[test]
    fn trace_validation() {
        let (a, w) = forwards(4);
        let t = trace(&a, &w, &[(1, 0.5)]);
        assert!(t.validate().is_ok());
        let mut rebooted = trace(&a[..3], &w[..3], &[(1, 0.5)]);
        rebooted.steps[2].action = Action::Left;
        rebooted.end = TraceEnd::Rebooted;
        assert!(rebooted.validate().is_err());
        rebooted.feedback.push(FeedbackSignal::negative(2.5));
        assert!(rebooted.validate().is_ok());
    }
}
