use std::process::Command;

use cogchain::harness::experiment::{detect_convergence, run_experiment, run_sweep};
use cogchain::harness::validation::{attack_suite, run_validation, TinyTraining, ValidationOptions};
use cogchain::harness::ExperimentConfig;

fn small_config(extra: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&format!(
        "experiment.episodes = 1\nexperiment.replicates = 1\nenv.T_slots = 10\nnn.hidden = 8\nagent.warmup = 4\nagent.batch = 4\n{extra}"
    ))
    .unwrap()
}

fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

#[test]
fn single_episode_csv_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let result = run_experiment(&small_config(""), Some(dir.path())).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("ddqn_rep0.csv")).unwrap();
    assert_eq!(data_rows(&csv).len(), 1);
    assert!(csv.lines().any(|l| l.starts_with("episode,total_reward")));
    assert!(csv.contains("# experiment.window=100"));
    assert_eq!(result.runs[0].metrics[0].slots(), 10);
    assert!(dir.path().join("ddqn_mean.csv").exists());
    assert!(dir.path().join("ddqn_rep0.mlp").exists());
}

#[test]
fn same_config_and_seed_give_identical_files() {
    let cfg = small_config("experiment.episodes = 3\nexperiment.replicates = 2\nexperiment.seed = 9");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&cfg, Some(a.path())).unwrap();
    run_experiment(&cfg, Some(b.path())).unwrap();
    for name in ["ddqn_rep0.csv", "ddqn_rep1.csv", "ddqn_mean.csv", "ddqn_rep1.mlp"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn ql_runs_through_the_same_harness() {
    let cfg = small_config("agent.kind = ql\nexperiment.episodes = 5\nmempool.D_max = 10");
    let result = run_experiment(&cfg, None).unwrap();
    assert_eq!(result.runs[0].metrics.len(), 5);
}

#[test]
fn sweep_writes_one_summary_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config("experiment.episodes = 2");
    let values: Vec<String> = ["0.02", "0.1", "0.2"].iter().map(|s| s.to_string()).collect();
    let sweep = run_sweep(&cfg, "attack.q", &values, Some(dir.path())).unwrap();
    assert_eq!(sweep.rows.len(), 3);
    let summary = std::fs::read_to_string(dir.path().join("sweep_attack.q.csv")).unwrap();
    assert_eq!(data_rows(&summary).len(), 3);
    assert!(summary.contains("# convergence_rule="));
    assert!(dir.path().join("attack.q=0.1").join("ddqn_rep0.csv").exists());
}

#[test]
fn sweep_rejects_unknown_key() {
    let err = run_sweep(&small_config(""), "attack.z", &["1".into()], None).unwrap_err();
    assert!(err.to_string().contains("attack.z"));
}

#[test]
fn convergence_is_defined_for_every_run() {
    for n in [1usize, 2, 50, 300] {
        let rewards: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64).collect();
        let c = detect_convergence(&rewards, 100);
        assert!((1..=n).contains(&c.episode));
    }
}

#[test]
fn validation_lists_each_suite_once() {
    let opts = ValidationOptions {
        attack_trials: 20_000,
        gradient_nets: 3,
        channel_steps: 50_000,
        invariant_steps: 20_000,
        rollout_slots: 50_000,
        tiny_training: TinyTraining { ql_episodes: 50, ddqn_episodes: 2, ..TinyTraining::default() },
        ..ValidationOptions::default()
    };
    let report = run_validation(&opts).unwrap();
    let mut names: Vec<&str> = report.suites.iter().map(|s| s.name).collect();
    assert_eq!(names.len(), 6);
    names.sort();
    names.dedup();
    assert_eq!(names.len(), 6);
    for s in &report.suites {
        if s.name != "mdp" {
            assert!(s.passed, "{s}");
        }
    }
}

#[test]
fn sign_flipped_attack_formula_is_caught() {
    fn flipped(p: &cogchain::attack::AttackParams) -> f64 {
        2.0 - cogchain::attack::attack_probability(p)
    }
    assert!(!attack_suite(flipped, 10_000, 0).passed);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cogchain"))
}

#[test]
fn cli_train_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "experiment.episodes = 2\nexperiment.replicates = 1\nenv.T_slots = 10\nnn.hidden = 8\n").unwrap();
    let out = dir.path().join("out");
    let status = cli().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(out.join("ddqn_rep0.csv").exists());

    let trace = cli().args(["trace", "--config"]).arg(&cfg).args(["--slots", "25"]).output().unwrap();
    assert!(trace.status.success());
    let text = String::from_utf8(trace.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "slot,action,channel_good,accepted,included,attacked,fee,reward");
    assert_eq!(lines.len(), 26);
}

#[test]
fn cli_default_output_dir_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "experiment.episodes = 1\nexperiment.replicates = 1\nenv.T_slots = 5\nnn.hidden = 4\n").unwrap();
    let target = dir.path().join("from-env");
    let status = cli().args(["train", "--config"]).arg(&cfg).env("COGCHAIN_OUT", &target).output().unwrap();
    assert!(status.status.success());
    assert!(target.join("ddqn_rep0.csv").exists());
}

#[test]
fn cli_reports_bad_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "agent.kind = sarsa\n").unwrap();
    let out = cli().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("agent.kind"));
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen > 0);
}
