//! Evaluation metrics and the ground-truth judge standing in for human
//! annotation.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::hexgeom::{hex_distance, AxialCoord};
use crate::rewards::{Trace, TraceEnd};
use crate::simleader::Plan;
use crate::world::CardId;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no executions to evaluate")]
    NoExecutions,
    #[error("completed executions exist but none were judged")]
    NothingJudged,
    #[error("inconsistent counts: {judged} judged, {completed} completed, {total} total")]
    InconsistentCounts { total: usize, completed: usize, judged: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecutionOutcome {
    /// Cards whose selection changed over the execution.
    pub toggled: BTreeSet<CardId>,
    pub stop: AxialCoord,
    pub end: TraceEnd,
}

impl ExecutionOutcome {
    pub fn of_trace(t: &Trace) -> Self {
        ExecutionOutcome {
            toggled: t.net_toggled(),
            stop: t.final_position,
            end: t.end,
        }
    }

    /// What a perfect execution of `plan` produces.
    pub fn of_plan(plan: &Plan) -> Self {
        ExecutionOutcome {
            toggled: plan.targets.iter().copied().collect(),
            stop: plan.stop,
            end: TraceEnd::Stopped,
        }
    }
}

/// Success weighted by stopping distance.
pub fn swsd(agent: &ExecutionOutcome, reference: &ExecutionOutcome) -> f64 {
    if agent.toggled != reference.toggled {
        return 0.0;
    }
    1.0 / (1.0 + hex_distance(agent.stop, reference.stop) as f64)
}

/// Judged accuracy over completed executions, scaled down by the share of
/// executions that were completed at all. Rebooted executions count as wrong.
pub fn adjusted_correctness(total: usize, completed: usize, judged: &[bool]) -> Result<f64, EvalError> {
    if total == 0 {
        return Err(EvalError::NoExecutions);
    }
    if completed > total || judged.len() > completed {
        return Err(EvalError::InconsistentCounts {
            total,
            completed,
            judged: judged.len(),
        });
    }
    if completed == 0 {
        return Ok(0.0);
    }
    if judged.is_empty() {
        return Err(EvalError::NothingJudged);
    }
    let correct = judged.iter().filter(|&&c| c).count();
    // one rounding step: (correct / judged) * (completed / total)
    Ok((correct * completed) as f64 / (judged.len() * total) as f64)
}

/// Exactly the plan's cards toggled, and stopped within `tolerance` of the
/// intended cell.
pub fn ground_truth_judge(t: &Trace, plan: &Plan, tolerance: i32) -> bool {
    t.end == TraceEnd::Stopped
        && t.net_toggled() == plan.targets.iter().copied().collect::<BTreeSet<_>>()
        && hex_distance(t.final_position, plan.stop) <= tolerance
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FeedbackStats {
    pub actions: usize,
    pub instructions: usize,
    pub positive_per_action: f64,
    pub negative_per_action: f64,
    pub reboots_per_instruction: f64,
    /// Positive to negative signal ratio; absent when there is no negative signal.
    pub pos_neg_ratio: Option<f64>,
}

/// Rates over raw feedback streams. Reboot signals count as negative feedback.
pub fn feedback_stats(traces: &[Trace]) -> FeedbackStats {
    let actions: usize = traces.iter().map(|t| t.steps.len()).sum();
    let instructions = traces.len();
    let pos = traces
        .iter()
        .flat_map(|t| &t.feedback)
        .filter(|f| f.sign > 0)
        .count();
    let neg = traces
        .iter()
        .flat_map(|t| &t.feedback)
        .filter(|f| f.sign < 0)
        .count();
    let reboots = traces.iter().filter(|t| t.rebooted()).count();
    let rate = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    FeedbackStats {
        actions,
        instructions,
        positive_per_action: rate(pos, actions),
        negative_per_action: rate(neg, actions),
        reboots_per_instruction: rate(reboots, instructions),
        pos_neg_ratio: (neg > 0).then(|| pos as f64 / neg as f64),
    }
}

/// Accuracy of a batch of executions under the ground-truth judge, with every
/// completed execution judged.
pub fn judged_accuracy(traces: &[Trace], plans: &[&Plan], tolerance: i32) -> Result<f64, EvalError> {
    let completed: Vec<bool> = traces
        .iter()
        .zip(plans)
        .filter(|(t, _)| t.end == TraceEnd::Stopped)
        .map(|(t, p)| ground_truth_judge(t, p, tolerance))
        .collect();
    adjusted_correctness(traces.len(), completed.len(), &completed)
}
