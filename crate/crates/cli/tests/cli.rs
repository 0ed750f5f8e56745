use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [3]

[bench]
image_size = 32
useful_episodes = 3
adversarial_episodes = 3
target_demos = 2

[flow]
iterations = 10
pyramid_levels = 1
k = 4

[vae]
epochs = 1
batch_size = 16
resolution = 8
latent_dim = 4

[savae]
pool = 4
hidden = 8

[policy]
k = 4
epochs = 1
steps_per_epoch = 3
batch_size = 8
bottleneck = 8
flow_resolution = 8

[eval]
episodes = 2
"#;

fn flowguide(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_flowguide"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    eprintln!(
        "$ flowguide {}\n{}{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), format!("{TINY}\n{extra}")).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_all_then_rerun_hits_every_cache() {
    let dir = setup("");
    let first = flowguide(dir.path(), &["--config", "tiny.toml", "run-all"]);
    assert!(first.status.success());
    assert!(!stdout(&first).contains("cache hit"));
    let summary = std::fs::read_to_string(dir.path().join("runs/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "mode,retrieval,delta,seed,episodes,successes,success_rate,config_hash");
    assert_eq!(lines.len(), 4, "{summary}");
    assert!(lines[3].starts_with("flow-retrieval,flow-top0.35,0.35,3,2,"));
    let archived = std::fs::read_to_string(dir.path().join("runs/config.toml")).unwrap();
    assert!(archived.contains("image_size = 32"));
    assert!(dir.path().join("runs/seed-3/analysis/flow-top0.35/hist.svg").exists());
    assert!(dir.path().join("runs/seed-3/analysis/flow-top0.35/hist.csv").exists());

    let second = flowguide(dir.path(), &["--config", "tiny.toml", "run-all"]);
    assert!(second.status.success());
    let text = stdout(&second);
    assert!(!text.contains("built"), "{text}");
    assert!(text.matches("cache hit").count() >= 8);
    assert_eq!(std::fs::read_to_string(dir.path().join("runs/summary.csv")).unwrap(), summary);
}

#[test]
fn stale_stage_needs_force_and_missing_stage_names_its_command() {
    let dir = setup("");
    let missing = flowguide(dir.path(), &["--config", "tiny.toml", "retrieve"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("flowguide gen-data"));

    for cmd in ["gen-data", "compute-flow", "train-vae"] {
        assert!(flowguide(dir.path(), &["--config", "tiny.toml", cmd]).status.success());
    }
    std::fs::write(
        dir.path().join("changed.toml"),
        TINY.replace("epochs = 1\nbatch_size = 16", "epochs = 2\nbatch_size = 16"),
    )
    .unwrap();
    let stale = flowguide(dir.path(), &["--config", "changed.toml", "train-vae"]);
    assert_eq!(stale.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&stale.stderr).contains("--force"));
    assert!(flowguide(dir.path(), &["--config", "changed.toml", "--force", "train-vae"]).status.success());
    assert!(flowguide(dir.path(), &["--config", "changed.toml", "retrieve"]).status.success());
}

#[test]
fn delta_sweep_gives_one_row_per_delta() {
    let dir = setup("");
    let out = flowguide(
        dir.path(),
        &[
            "--config",
            "tiny.toml",
            "--mode",
            "flow-retrieval",
            "--delta",
            "0.1",
            "--delta",
            "0.35",
            "--delta",
            "1.0",
            "run-all",
        ],
    );
    assert!(out.status.success());
    let summary = std::fs::read_to_string(dir.path().join("runs/summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (row, d) in rows.iter().zip(["0.1", "0.35", "1"]) {
        assert!(row.starts_with(&format!("flow-retrieval,flow-top{d},{d},")), "{row}");
    }
}

#[test]
fn baselines_strategies_and_preview() {
    let dir = setup("");
    let gen = flowguide(dir.path(), &["--config", "tiny.toml", "gen-data", "--preview"]);
    assert!(gen.status.success());
    assert!(stdout(&gen).contains(".ppm"));
    let inspect = flowguide(dir.path(), &["dataset", "inspect", "runs/seed-3/data/prior"]);
    assert!(inspect.status.success());
    assert!(stdout(&inspect).contains("adversarial"));

    for args in [
        vec!["--baseline", "proprio", "retrieve"],
        vec!["--baseline", "savae", "retrieve"],
        vec!["--strategy", "knn", "--knn-k", "3", "--force", "run-all"],
        vec!["--candidate-cap", "50", "--force", "run-all"],
    ] {
        let mut full = vec!["--config", "tiny.toml"];
        full.extend(args);
        assert!(flowguide(dir.path(), &full).status.success());
    }
    let seed = dir.path().join("runs/seed-3");
    for tag in ["proprio-top0.35", "savae-top0.35", "flow-knn3", "flow-top0.35-cap50"] {
        assert!(seed.join("retrieval").join(tag).join("result.json").exists(), "{tag}");
    }
    assert!(seed.join("retrieval/savae-top0.35/savae.fvae").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = setup("");
    assert_eq!(flowguide(dir.path(), &["--config", "tiny.toml", "--delta", "1.5", "retrieve"]).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.toml"), "[flow]\nalpah = 3.0\n").unwrap();
    assert_eq!(flowguide(dir.path(), &["--config", "bad.toml", "gen-data"]).status.code(), Some(2));
    assert_eq!(flowguide(dir.path(), &["--mode", "diffusion", "gen-data"]).status.code(), Some(2));
    assert_eq!(flowguide(dir.path(), &["--config", "missing.toml", "gen-data"]).status.code(), Some(1));
}

#[test]
fn divergence_exits_with_four() {
    let dir = setup("");
    let cfg = TINY.replace("flow_resolution = 8", "flow_resolution = 8\nlr = 1e30");
    std::fs::write(dir.path().join("hot.toml"), cfg).unwrap();
    let out = flowguide(dir.path(), &["--config", "hot.toml", "--mode", "bc", "run-all"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn show_config_round_trips() {
    let dir = setup("");
    let out = flowguide(dir.path(), &["--config", "tiny.toml", "--seed", "9", "--episodes", "7", "show-config"]);
    assert!(out.status.success());
    std::fs::write(dir.path().join("echo.toml"), stdout(&out)).unwrap();
    let again = flowguide(dir.path(), &["--config", "echo.toml", "show-config"]);
    assert_eq!(stdout(&again), stdout(&out));
    assert!(stdout(&out).contains("seeds = [9]"));
}
