use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
dynamics.w = 12
data.spinup = 20
data.train_length = 80
data.test_length = 60
model.hidden_width = 4
model.depth = 1
model.conv_kernel = 3
model.tau_dim = 2
kernel.k = 5
kernel.hidden = [4]
train.iterations_stage1 = 4
train.iterations_stage2 = 2
train.batch_size = 2
train.rate_min = 0.2
train.rollout_max = 2
flow.L = 4
experiment.alphas = [0.25, 0.5]
experiment.eval_times = 5
experiment.n_cycles = 12
experiment.free_run_intervals = 2
output.record_wall_time = false
"#;

fn flowda(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowda"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = flowda(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(dir.path(), &["gen-data", "--config", "tiny.toml"]);
    dir
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = setup();
    let d = dir.path();
    assert!(d.join("data/train.trj").exists() && d.join("data/test.trj.meta.json").exists());
    ok(d, &["train-stage1", "-c", "tiny.toml"]);
    ok(d, &["train-stage2", "-c", "tiny.toml"]);
    assert_eq!(
        fs::read_to_string(d.join("runs/train_stage1.csv"))
            .unwrap()
            .lines()
            .count(),
        5
    );
    ok(d, &["single-step", "-c", "tiny.toml"]);
    ok(d, &["noise-sweep", "-c", "tiny.toml"]);
    ok(d, &["cycle", "-c", "tiny.toml", "--mode", "both", "--runs", "2"]);
    let header = "experiment,alpha,sigma_noise,location_mode,cycle,time_index,variable,rmse_background,rmse_analysis,rmse_freerun,wall_ms";
    let single = fs::read_to_string(d.join("runs/single_step.csv")).unwrap();
    assert_eq!(single.lines().next(), Some(header));
    assert_eq!(single.lines().count(), 1 + 5 * 2);
    let sweep = fs::read_to_string(d.join("runs/noise_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 5 * 2 * 4);
    let cycle = fs::read_to_string(d.join("runs/cycle.csv")).unwrap();
    assert_eq!(cycle.lines().count(), 1 + 12 * 2 * 2);

    fs::remove_file(d.join("runs/cycle.summary.json")).unwrap();
    let out = ok(d, &["report", "--records", "runs/cycle.csv"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("shuffled"));
    let summary = fs::read_to_string(d.join("runs/cycle.summary.json")).unwrap();
    assert!(summary.contains("\"min_cycle\": 10"));
}

#[test]
fn evaluation_reports_are_reproducible() {
    let dir = setup();
    let d = dir.path();
    let run = |name: &str| {
        ok(
            d,
            &[
                "single-step",
                "-c",
                "tiny.toml",
                "--set",
                "assimilator.kind=\"oi\"",
                "--out",
                name,
            ],
        );
        fs::read(d.join(name)).unwrap()
    };
    assert_eq!(run("a.csv"), run("b.csv"));
    ok(
        d,
        &[
            "single-step",
            "-c",
            "tiny.toml",
            "--set",
            "assimilator.kind=oi",
            "--seed",
            "9",
            "--out",
            "c.csv",
        ],
    );
    assert_ne!(fs::read(d.join("a.csv")).unwrap(), fs::read(d.join("c.csv")).unwrap());
}

#[test]
fn assimilate_writes_one_state() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("obs.csv"), "h,w,v0\n0,3,1.5\n0,7,-2.0\n").unwrap();
    ok(
        d,
        &[
            "assimilate",
            "-c",
            "tiny.toml",
            "-s",
            "assimilator.kind=interp",
            "--background",
            "data/test.trj",
            "--index",
            "4",
            "--obs",
            "obs.csv",
            "--out",
            "xa.trj",
        ],
    );
    let meta = fs::read_to_string(d.join("xa.trj.meta.json")).unwrap();
    assert!(meta.contains("\"t\": 1") || meta.contains("\"t\":1"), "{meta}");
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = setup();
    let d = dir.path();
    let code = |args: &[&str]| flowda(d, args).status.code();

    fs::write(d.join("typo.toml"), "flow.steps = 32\n").unwrap();
    assert_eq!(code(&["single-step", "-c", "typo.toml"]), Some(2));
    assert_eq!(code(&["single-step", "-c", "tiny.toml", "--set", "noequals"]), Some(2));
    assert_eq!(code(&["single-step", "-c", "tiny.toml", "--set", "flow.L=0"]), Some(2));

    let mut bytes = fs::read(d.join("data/test.trj")).unwrap();
    bytes[0] ^= 0xff;
    fs::write(d.join("data/test.trj"), bytes).unwrap();
    assert_eq!(
        code(&["single-step", "-c", "tiny.toml", "-s", "assimilator.kind=interp"]),
        Some(3)
    );

    fs::write(d.join("bad.ckpt"), b"NOTACKPT").unwrap();
    assert_eq!(
        code(&["single-step", "-c", "tiny.toml", "--checkpoint", "bad.ckpt"]),
        Some(3)
    );
    assert_eq!(
        code(&["single-step", "-c", "tiny.toml", "--checkpoint", "missing.ckpt"]),
        Some(3)
    );
}

#[test]
fn template_round_trips_through_the_loader() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(d, &["config-template"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("flow.L = 32"));
    ok(d, &["config-template", "--out", "c.toml"]);
    assert_eq!(fs::read_to_string(d.join("c.toml")).unwrap(), text);
    // The written template is accepted as a configuration file.
    ok(d, &["config-template", "-c", "c.toml"]);
}
