//! Experimental conditions, registered by name.

use once_cell::sync::Lazy;

use crate::rewards::{build_dataset, convert_demonstrations, DatasetMode, RewardConfig, RewardError, RewardedExample, Trace};

/// What a round hands to a variant when its new data is assembled.
pub struct RoundInputs<'a> {
    /// This round's deployment traces.
    pub traces: &'a [Trace],
    pub reward: RewardConfig,
    /// Fresh demonstrations, one per deployed interaction, built on request.
    pub fresh_demos: &'a dyn Fn() -> Vec<Trace>,
}

pub struct RoundData {
    pub examples: Vec<RewardedExample>,
    /// Demonstration traces the examples came from, if any.
    pub demos: Vec<Trace>,
}

pub trait Variant: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
    /// Share of the training demonstrations used to bootstrap.
    fn demo_fraction(&self, fewer_demo_fraction: f64) -> f64 {
        let _ = fewer_demo_fraction;
        1.0
    }
    fn round_data(&self, inputs: &RoundInputs) -> Result<RoundData, RewardError>;
}

struct Feedback {
    name: &'static str,
    description: &'static str,
    mode: DatasetMode,
    reduced_demos: bool,
}

impl Variant for Feedback {
    fn name(&self) -> &'static str {
        self.name
    }

    fn description(&self) -> &'static str {
        self.description
    }

    fn demo_fraction(&self, fewer_demo_fraction: f64) -> f64 {
        if self.reduced_demos {
            fewer_demo_fraction
        } else {
            1.0
        }
    }

    fn round_data(&self, inputs: &RoundInputs) -> Result<RoundData, RewardError> {
        Ok(RoundData {
            examples: build_dataset(inputs.traces, self.mode, &inputs.reward)?,
            demos: Vec::new(),
        })
    }
}

struct SupervisedOnly;

impl Variant for SupervisedOnly {
    fn name(&self) -> &'static str {
        "SupOnly"
    }

    fn description(&self) -> &'static str {
        "adds fresh demonstrations each round and ignores feedback"
    }

    fn round_data(&self, inputs: &RoundInputs) -> Result<RoundData, RewardError> {
        let demos = (inputs.fresh_demos)();
        Ok(RoundData {
            examples: convert_demonstrations(&demos),
            demos,
        })
    }
}

static REGISTRY: Lazy<Vec<Box<dyn Variant>>> = Lazy::new(|| {
    vec![
        Box::new(Feedback {
            name: "RewardProp",
            description: "simple reward with propagation and scenario filters",
            mode: DatasetMode::Propagated,
            reduced_demos: false,
        }),
        Box::new(Feedback {
            name: "SimpleReward",
            description: "delay-corrected feedback sign only",
            mode: DatasetMode::Simple,
            reduced_demos: false,
        }),
        Box::new(Feedback {
            name: "NoNegative",
            description: "propagated pipeline with all negative signals discarded",
            mode: DatasetMode::NoNegative,
            reduced_demos: false,
        }),
        Box::new(Feedback {
            name: "FewerDemo",
            description: "propagated pipeline bootstrapped on a reduced demonstration set",
            mode: DatasetMode::Propagated,
            reduced_demos: true,
        }),
        Box::new(SupervisedOnly),
    ]
});

pub fn registry() -> &'static [Box<dyn Variant>] {
    &REGISTRY
}

pub fn lookup(name: &str) -> Option<&'static dyn Variant> {
    REGISTRY.iter().find(|v| v.name() == name).map(|v| v.as_ref())
}

pub fn names() -> Vec<&'static str> {
    REGISTRY.iter().map(|v| v.name()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_are_unique_and_resolvable() {
        let n = names();
        assert_eq!(n, ["RewardProp", "SimpleReward", "NoNegative", "FewerDemo", "SupOnly"]);
        for name in n {
            assert_eq!(lookup(name).unwrap().name(), name);
        }
        assert!(lookup("rewardprop").is_none());
    }

    #[test]
    fn only_fewer_demo_reduces_demonstrations() {
        for v in registry() {
            let f = v.demo_fraction(0.25);
            assert_eq!(f, if v.name() == "FewerDemo" { 0.25 } else { 1.0 });
        }
    }
}
