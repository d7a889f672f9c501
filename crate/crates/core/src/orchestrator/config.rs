//! Flat experiment configuration. Every constant of the simulator and the
//! learner is one top-level key; missing keys take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rewards::RewardConfig;
use crate::simleader::{OracleConfig, ScenarioConfig};
use crate::trainer::TrainConfig;
use crate::world::WorldConfig;

use super::OrchestratorError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run directory name under the output root. Empty means the variant name.
    pub name: String,
    pub variant: String,
    pub seed: u64,
    pub rounds: u32,
    /// Instructions deployed per round.
    pub interactions: usize,
    /// Demonstration scenarios in the bootstrap pool, validation included.
    pub demo_interactions: usize,
    /// Share of training demonstrations kept by the reduced-demonstration variant.
    pub fewer_demo_fraction: f64,
    pub ensemble_size: usize,
    /// Hashed feature dimension, a power of two.
    pub feature_dim: usize,
    /// Per-instruction action limit during deployment and validation.
    pub max_steps: usize,
    /// Hex tolerance of the ground-truth judge on the stop position.
    pub stop_tolerance: i32,
    /// Retrain after the last round. The result is never deployed.
    pub train_after_last_round: bool,

    pub edge: i32,
    pub vis_radius: i32,
    pub action_duration: f64,

    pub cards: usize,
    pub obstacle_density: f64,
    pub first_target_range: i32,
    pub second_target_range: i32,
    pub two_target_prob: f64,
    pub preselect_prob: f64,
    pub max_plan_len: usize,

    pub feedback_prob: f64,
    pub feedback_delay_min: f64,
    pub feedback_delay_max: f64,
    pub feedback_sign_error: f64,
    pub reboot_distance: i32,

    pub response_delay: f64,
    pub propagation_window: usize,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub ips_clip: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub validation_fraction: f64,
    pub init_scale: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let w = WorldConfig::default();
        let s = ScenarioConfig::default();
        let o = OracleConfig::default();
        let r = RewardConfig::default();
        let t = TrainConfig::default();
        ExperimentConfig {
            name: String::new(),
            variant: "RewardProp".into(),
            seed: 0,
            rounds: 5,
            interactions: 200,
            demo_interactions: 120,
            fewer_demo_fraction: 0.25,
            ensemble_size: 10,
            feature_dim: 1 << 16,
            max_steps: t.max_steps,
            stop_tolerance: 0,
            train_after_last_round: false,
            edge: w.edge,
            vis_radius: w.vis_radius,
            action_duration: w.action_duration,
            cards: s.cards,
            obstacle_density: s.obstacle_density,
            first_target_range: s.first_target_range,
            second_target_range: s.second_target_range,
            two_target_prob: s.two_target_prob,
            preselect_prob: s.preselect_prob,
            max_plan_len: s.max_plan_len,
            feedback_prob: o.feedback_prob,
            feedback_delay_min: o.delay_min,
            feedback_delay_max: o.delay_max,
            feedback_sign_error: o.sign_error,
            reboot_distance: o.reboot_distance,
            response_delay: r.response_delay,
            propagation_window: r.propagation_window,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            ips_clip: t.ips_clip,
            max_epochs: t.max_epochs,
            patience: t.patience,
            adam_beta1: t.beta1,
            adam_beta2: t.beta2,
            adam_eps: t.adam_eps,
            validation_fraction: t.validation_fraction,
            init_scale: t.init_scale,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(|e| OrchestratorError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, OrchestratorError> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| OrchestratorError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn run_name(&self) -> &str {
        if self.name.is_empty() {
            &self.variant
        } else {
            &self.name
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::Config(m.to_owned()));
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be at least 1");
        }
        if !self.feature_dim.is_power_of_two() {
            return bad("feature_dim must be a power of two");
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.max_epochs == 0 {
            return bad("batch_size, max_steps and max_epochs must be positive");
        }
        for (k, p) in [
            ("feedback_prob", self.feedback_prob),
            ("feedback_sign_error", self.feedback_sign_error),
            ("two_target_prob", self.two_target_prob),
            ("preselect_prob", self.preselect_prob),
            ("obstacle_density", self.obstacle_density),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(OrchestratorError::Config(format!("{k} must lie in [0, 1]")));
            }
        }
        if !(self.fewer_demo_fraction > 0.0 && self.fewer_demo_fraction <= 1.0) {
            return bad("fewer_demo_fraction must lie in (0, 1]");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if self.feedback_delay_min < 0.0 || self.feedback_delay_max < self.feedback_delay_min {
            return bad("feedback delays must satisfy 0 <= min <= max");
        }
        if self.ips_clip <= 0.0 || self.learning_rate <= 0.0 {
            return bad("ips_clip and learning_rate must be positive");
        }
        if super::variants::lookup(&self.variant).is_none() {
            return Err(OrchestratorError::UnknownVariant(self.variant.clone()));
        }
        Ok(())
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            edge: self.edge,
            vis_radius: self.vis_radius,
            action_duration: self.action_duration,
        }
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            world: self.world(),
            cards: self.cards,
            obstacle_density: self.obstacle_density,
            first_target_range: self.first_target_range,
            second_target_range: self.second_target_range,
            two_target_prob: self.two_target_prob,
            preselect_prob: self.preselect_prob,
            max_plan_len: self.max_plan_len,
        }
    }

    pub fn oracle(&self) -> OracleConfig {
        OracleConfig {
            feedback_prob: self.feedback_prob,
            delay_min: self.feedback_delay_min,
            delay_max: self.feedback_delay_max,
            sign_error: self.feedback_sign_error,
            reboot_distance: self.reboot_distance,
        }
    }

    pub fn reward(&self) -> RewardConfig {
        RewardConfig {
            response_delay: self.response_delay,
            propagation_window: self.propagation_window,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            ips_clip: self.ips_clip,
            max_epochs: self.max_epochs,
            patience: self.patience,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            validation_fraction: self.validation_fraction,
            init_scale: self.init_scale,
            max_steps: self.max_steps,
        }
    }
}
