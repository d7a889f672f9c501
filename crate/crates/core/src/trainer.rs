//! Contextual-bandit training: clipped inverse-propensity-weighted policy
//! gradient, Adam ascent, and from-scratch retraining with early stopping on
//! validation SWSD.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{swsd, ExecutionOutcome};
use crate::policy::{
    logprob_grad, sample_rollout, ActionFeatures, Ensemble, FeatureVector, Featurizer, Greedy,
    LinearPolicy, PolicyError, PolicyParams,
};
use crate::rewards::RewardedExample;
use crate::simleader::Scenario;
use crate::world::Action;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("behavior probability must be positive, got {0}")]
    ZeroPropensity(f64),
    #[error("no training examples")]
    EmptyDataset,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Examples (agent steps) per update.
    pub batch_size: usize,
    /// Ceiling on the IPS coefficient.
    pub ips_clip: f64,
    pub max_epochs: usize,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Share of demonstration scenarios held out for model selection.
    pub validation_fraction: f64,
    /// Initial weights are uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    /// Step limit for validation rollouts.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 16,
            ips_clip: 1.0,
            max_epochs: 50,
            patience: 5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            validation_fraction: 0.05,
            init_scale: 0.01,
            max_steps: 40,
        }
    }
}

/// A rewarded example with its features precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub feats: ActionFeatures,
    pub action: Action,
    pub reward: i8,
    pub behavior_prob: f64,
    pub round: u32,
}

impl TrainExample {
    pub fn new(ex: &RewardedExample, featurizer: &Featurizer) -> Self {
        TrainExample {
            feats: featurizer.featurize_all(&ex.input),
            action: ex.action,
            reward: ex.reward,
            behavior_prob: ex.behavior_prob,
            round: ex.round,
        }
    }
}

pub fn featurize_examples(examples: &[RewardedExample], featurizer: &Featurizer) -> Vec<TrainExample> {
    examples.iter().map(|e| TrainExample::new(e, featurizer)).collect()
}

/// Clipped importance weight. Demonstrations (round 0) always weigh 1.
pub fn ips_coefficient(round: u32, behavior_prob: f64, current_prob: f64, clip: f64) -> Result<f64, TrainError> {
    if !(behavior_prob > 0.0) {
        return Err(TrainError::ZeroPropensity(behavior_prob));
    }
    if round == 0 {
        return Ok(1.0);
    }
    Ok((current_prob / behavior_prob).min(clip))
}

/// `c * r * grad log pi(a)` for one example at `params`.
pub fn example_gradient(ex: &TrainExample, params: &PolicyParams, clip: f64) -> Result<FeatureVector, TrainError> {
    let current = params.distribution(&ex.feats)[ex.action.index()];
    let c = ips_coefficient(ex.round, ex.behavior_prob, current, clip)?;
    let scale = c * ex.reward as f64;
    let mut g = logprob_grad(params, &ex.feats, ex.action)?;
    for (_, x) in g.iter_mut() {
        *x *= scale;
    }
    Ok(g)
}

/// Mean of `c * r * log pi(a)` over `examples`, with `c` evaluated at `params`.
pub fn objective(examples: &[TrainExample], params: &PolicyParams, clip: f64) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let total: f64 = examples
        .iter()
        .map(|ex| {
            let p = params.distribution(&ex.feats)[ex.action.index()];
            let c = ips_coefficient(ex.round, ex.behavior_prob, p, clip).unwrap_or(0.0);
            c * ex.reward as f64 * p.max(1e-300).ln()
        })
        .sum();
    total / examples.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One bias-corrected Adam ascent step along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (((w, m), v), &g) in params.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grad) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w += lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: f64,
    pub validation_swsd: f64,
    pub selected: bool,
}

#[derive(Clone, Debug)]
pub struct TrainedMember {
    pub params: PolicyParams,
    pub seed: u64,
    pub log: Vec<EpochRecord>,
}

/// Mean SWSD of the policy's greedy executions against the plans.
pub fn validation_swsd(params: &PolicyParams, featurizer: Featurizer, scenarios: &[Scenario], max_steps: usize) -> f64 {
    if scenarios.is_empty() {
        return 0.0;
    }
    let policy = Greedy(LinearPolicy { params, featurizer });
    let total: f64 = scenarios
        .iter()
        .map(|s| {
            let mut r1 = rand::rngs::mock::StepRng::new(0, 0);
            let mut r2 = rand::rngs::mock::StepRng::new(0, 0);
            let t = sample_rollout(&policy, s, None, &mut r1, &mut r2, max_steps);
            swsd(&ExecutionOutcome::of_trace(&t), &ExecutionOutcome::of_plan(&s.plan))
        })
        .sum();
    total / scenarios.len() as f64
}

/// Train one policy from scratch. Epoch 0 is the untrained initialization;
/// the kept parameters are the latest among the best validation scores.
pub fn train_member(
    examples: &[TrainExample],
    validation: &[Scenario],
    config: &TrainConfig,
    featurizer: Featurizer,
    seed: u64,
) -> Result<TrainedMember, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let dim = featurizer.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = PolicyParams {
        weights: (0..dim)
            .map(|_| rng.gen_range(-config.init_scale..=config.init_scale))
            .collect(),
    };
    let mut adam = AdamState::new(dim, config.beta1, config.beta2, config.adam_eps);
    let mut grad = vec![0.0; dim];
    let mut touched: Vec<u32> = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();

    let score = validation_swsd(&params, featurizer, validation, config.max_steps);
    let mut log = vec![EpochRecord {
        epoch: 0,
        objective: objective(examples, &params, config.ips_clip),
        validation_swsd: score,
        selected: true,
    }];
    let mut best = (score, params.clone(), 0usize);
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            for &i in batch {
                for (j, g) in example_gradient(&examples[i], &params, config.ips_clip)? {
                    if grad[j as usize] == 0.0 {
                        touched.push(j);
                    }
                    grad[j as usize] += g;
                }
            }
            let n = batch.len() as f64;
            for &j in &touched {
                grad[j as usize] /= n;
            }
            adam.step(&mut params.weights, &grad, config.learning_rate);
            for &j in &touched {
                grad[j as usize] = 0.0;
            }
            touched.clear();
        }
        let score = validation_swsd(&params, featurizer, validation, config.max_steps);
        let obj = objective(examples, &params, config.ips_clip);
        let improved = score > best.0;
        let selected = score >= best.0;
        if selected {
            best = (score, params.clone(), epoch);
        }
        log.push(EpochRecord {
            epoch,
            objective: obj,
            validation_swsd: score,
            selected,
        });
        stale = if improved { 0 } else { stale + 1 };
        if stale >= config.patience {
            break;
        }
    }
    for r in log.iter_mut() {
        r.selected = r.epoch == best.2;
    }
    Ok(TrainedMember {
        params: best.1,
        seed,
        log,
    })
}

/// Members train independently on the same examples, one seed each.
pub fn train_ensemble(
    examples: &[TrainExample],
    validation: &[Scenario],
    config: &TrainConfig,
    featurizer: Featurizer,
    seeds: &[u64],
) -> Result<(Ensemble, Vec<TrainedMember>), TrainError> {
    let members: Vec<TrainedMember> = seeds
        .par_iter()
        .map(|&s| train_member(examples, validation, config, featurizer, s))
        .collect::<Result<_, _>>()?;
    let ensemble = Ensemble::new(members.iter().map(|m| m.params.clone()).collect())?;
    Ok((ensemble, members))
}
