use std::path::Path;
use std::process::Command;

const CONFIG: &str = "\
rounds = 1
interactions = 6
demo_interactions = 24
ensemble_size = 2
max_epochs = 3
";

fn hexfollow(args: &[&str], config: &Path, out: &Path) -> String {
    let output = Command::new(env!("CARGO_BIN_EXE_hexfollow"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        output.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout).unwrap()
}

#[test]
fn stepwise_commands_reproduce_a_full_run() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("exp.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let (full, steps) = (tmp.path().join("full"), tmp.path().join("steps"));

    hexfollow(&["run"], &config, &full);
    hexfollow(&["bootstrap"], &config, &steps);
    hexfollow(&["deploy", "--round", "1"], &config, &steps);
    hexfollow(&["build-dataset", "--round", "1"], &config, &steps);
    let evaluated = hexfollow(&["evaluate", "--round", "1"], &config, &steps);
    assert!(evaluated.lines().any(|l| l.starts_with("1,RewardProp,accuracy,")));

    for name in ["round_0/traces.jsonl", "round_0/dataset.jsonl", "round_0/member_1.ckpt", "round_1/traces.jsonl", "round_1/dataset.jsonl", "round_1/metrics.csv"] {
        let a = std::fs::read(full.join("RewardProp").join(name)).unwrap();
        let b = std::fs::read(steps.join("RewardProp").join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }

    hexfollow(&["train", "--round", "1"], &config, &steps);
    assert!(steps.join("RewardProp/round_1/member_0.ckpt").is_file());
    assert!(steps.join("RewardProp/round_1/train_member_1.csv").is_file());
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("exp.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let out = hexfollow(
        &["config", "--seed", "17", "--rounds", "3", "--variant", "NoNegative", "--interactions", "9"],
        &config,
        tmp.path(),
    );
    for line in ["seed = 17", "rounds = 3", "variant = \"NoNegative\"", "interactions = 9", "ensemble_size = 2"] {
        assert!(out.lines().any(|l| l == line), "missing {line:?} in\n{out}");
    }
}

#[test]
fn bad_input_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("exp.toml");
    std::fs::write(&config, "unknown_constant = 3\n").unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_hexfollow"))
        .args(["run", "--config"])
        .arg(&config)
        .status()
        .unwrap();
    assert!(!status.success());

    std::fs::write(&config, CONFIG).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_hexfollow"))
        .args(["deploy", "--round", "1", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(tmp.path().join("empty"))
        .status()
        .unwrap();
    assert!(!status.success());
}
