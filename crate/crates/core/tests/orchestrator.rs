use std::path::Path;

use hexfollow::orchestrator::{persist, Experiment, ExperimentConfig, MetricRow};
use hexfollow::rewards::{DatasetRow, TraceEnd};

fn small(variant: &str) -> ExperimentConfig {
    ExperimentConfig {
        variant: variant.into(),
        rounds: 2,
        interactions: 8,
        demo_interactions: 24,
        ensemble_size: 2,
        max_epochs: 3,
        learning_rate: 0.01,
        ..ExperimentConfig::default()
    }
}

fn run(config: ExperimentConfig, root: &Path) -> (Experiment, Vec<MetricRow>) {
    let exp = Experiment::new(config, root).unwrap();
    let metrics = exp.run().unwrap();
    (exp, metrics)
}

fn rows(exp: &Experiment, round: u32) -> Vec<DatasetRow> {
    std::fs::read_to_string(exp.round_dir(round).join("dataset.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn metric(metrics: &[MetricRow], round: u32, name: &str) -> Option<f64> {
    metrics.iter().find(|m| m.round == round && m.metric == name).map(|m| m.value)
}

#[test]
fn smoke_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small("RewardProp");
    config.rounds = 1;
    config.interactions = 5;
    config.train_after_last_round = true;
    let (exp, metrics) = run(config, tmp.path());
    assert_eq!(exp.run_dir, tmp.path().join("RewardProp"));
    assert!(exp.run_dir.join("config.toml").is_file());
    assert!(exp.run_dir.join("metrics.csv").is_file());
    for round in 0..=1 {
        let dir = exp.round_dir(round);
        for name in ["traces.jsonl", "dataset.jsonl", "metrics.csv", "member_0.ckpt", "member_1.ckpt", "train_member_0.csv"] {
            assert!(dir.join(name).is_file(), "missing {round}/{name}");
        }
    }
    let header = std::fs::read_to_string(exp.run_dir.join("metrics.csv")).unwrap();
    assert!(header.starts_with("round,variant,metric,value\n"));
    let log = std::fs::read_to_string(exp.round_dir(1).join("train_member_0.csv")).unwrap();
    assert!(log.starts_with("epoch,objective,validation_swsd,selected\n"));
    assert_eq!(persist::read_metrics(&exp.run_dir.join("metrics.csv")).unwrap(), metrics);
    assert_eq!(metric(&metrics, 1, "completed_rate").unwrap() + metric(&metrics, 1, "reboot_rate").unwrap() + metric(&metrics, 1, "truncated_rate").unwrap(), 1.0);
}

#[test]
fn persisted_traces_replay_and_datasets_reattach() {
    let tmp = tempfile::tempdir().unwrap();
    let (exp, _) = run(small("RewardProp"), tmp.path());
    let scenario = exp.config.scenario();
    for round in 0..=2 {
        let traces = persist::read_traces(&exp.round_dir(round).join("traces.jsonl"), &scenario).unwrap();
        assert!(!traces.is_empty());
        for t in &traces {
            t.validate().unwrap();
            assert_eq!(t.round, round);
        }
        let examples = persist::read_dataset(&exp.round_dir(round).join("dataset.jsonl"), &traces).unwrap();
        let steps: usize = traces.iter().map(|t| t.steps.len()).sum();
        assert!(examples.len() <= steps);
        if round > 0 {
            assert_eq!(exp.round_data(round, &traces).unwrap().examples, examples);
        }
    }
}

#[test]
fn tampered_trace_fails_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small("RewardProp");
    config.rounds = 1;
    let (exp, _) = run(config, tmp.path());
    let path = exp.round_dir(1).join("traces.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut rec: persist::TraceRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    rec.scenario_seed ^= 1;
    std::fs::write(&path, serde_json::to_string(&rec).unwrap() + "\n").unwrap();
    assert!(persist::read_traces(&path, &exp.config.scenario()).is_err());
}

#[test]
fn variants_share_round_one_deployment() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small("RewardProp");
    config.rounds = 1;
    let (a, _) = run(config.clone(), tmp.path());
    config.variant = "SimpleReward".into();
    let (b, _) = run(config, tmp.path());
    let read = |e: &Experiment| std::fs::read(e.round_dir(1).join("traces.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(a.run_dir, b.run_dir);
}

#[test]
fn variant_datasets_follow_their_definitions() {
    let tmp = tempfile::tempdir().unwrap();

    let (nn, _) = run(small("NoNegative"), tmp.path());
    for round in 1..=2 {
        assert!(rows(&nn, round).iter().all(|r| r.reward == 1));
    }

    let (so, so_metrics) = run(small("SupOnly"), tmp.path());
    for round in 1..=2 {
        let r = rows(&so, round);
        assert!(!r.is_empty());
        assert!(r.iter().all(|x| x.reward == 1 && x.round == 0 && x.behavior_prob == 1.0));
        // deployment still happens and is evaluated
        assert!(metric(&so_metrics, round, "accuracy").is_some());
    }

    let (rp, rp_metrics) = run(small("RewardProp"), tmp.path());
    let (fd, fd_metrics) = run(small("FewerDemo"), tmp.path());
    let full = metric(&rp_metrics, 0, "demonstrations").unwrap();
    let few = metric(&fd_metrics, 0, "demonstrations").unwrap();
    assert_eq!(few, (full * 0.25).round());
    assert!(rows(&fd, 0).len() < rows(&rp, 0).len());
}

#[test]
fn training_data_never_shrinks() {
    let tmp = tempfile::tempdir().unwrap();
    for v in ["RewardProp", "SupOnly"] {
        let (_, metrics) = run(small(v), tmp.path());
        let sizes: Vec<f64> = (0..=2).map(|r| metric(&metrics, r, "training_examples").unwrap()).collect();
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]), "{v}: {sizes:?}");
    }
}

#[test]
fn resume_reuses_persisted_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let (exp, first) = run(small("RewardProp"), tmp.path());
    let traces = exp.round_dir(1).join("traces.jsonl");
    let before = std::fs::read(&traces).unwrap();
    std::fs::remove_file(exp.round_dir(1).join("dataset.jsonl")).unwrap();

    let mut again = Experiment::new(small("RewardProp"), tmp.path()).unwrap();
    again.resume = true;
    let second = again.run().unwrap();
    assert_eq!(first, second);
    assert_eq!(std::fs::read(&traces).unwrap(), before);
    assert!(exp.round_dir(1).join("dataset.jsonl").is_file());
}

#[test]
fn bootstrap_beats_untrained_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        demo_interactions: 60,
        ensemble_size: 2,
        max_epochs: 8,
        ..ExperimentConfig::default()
    };
    let exp = Experiment::new(config, tmp.path()).unwrap();
    exp.bootstrap().unwrap();
    for i in 0..2 {
        let log = std::fs::read_to_string(exp.round_dir(0).join(format!("train_member_{i}.csv"))).unwrap();
        let swsd: Vec<f64> = log
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        let best = swsd.iter().cloned().fold(f64::MIN, f64::max);
        assert!(best > swsd[0], "member {i}: {swsd:?}");
    }
}

#[test]
fn unknown_variant_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small("RewardProp");
    c.variant = "Imitation".into();
    assert!(Experiment::new(c, tmp.path()).is_err());
}

#[test]
fn deployments_end_in_known_states() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = small("RewardProp");
    config.rounds = 1;
    let (exp, _) = run(config, tmp.path());
    let traces = persist::read_traces(&exp.round_dir(1).join("traces.jsonl"), &exp.config.scenario()).unwrap();
    for t in &traces {
        match t.end {
            TraceEnd::Stopped => assert_eq!(t.steps.last().unwrap().action, hexfollow::world::Action::Stop),
            TraceEnd::Rebooted => assert_eq!(t.feedback.last().unwrap().sign, -1),
            TraceEnd::Truncated => assert_eq!(t.steps.len(), exp.config.max_steps),
        }
    }
}
