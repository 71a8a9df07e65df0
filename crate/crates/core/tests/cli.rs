use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use route_detr::checkpoint;

const TINY: &str = "\
# small enough for a few seconds of training
image_size = 16
patch_size = 4
classes = 2
max_objects = 3
min_side = 3
max_side = 8
layers = 2
heads = 2
d_model = 8
queries = 4
d_ffn = 16
d_z = 4
rank = 3
gate_rank = 4
batch_size = 3
train_scenes = 12
eval_scenes = 6
eval_interval = 3
steps = 7
lr = 0.003
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_route-detr"))
        .args(args)
        .env_remove("ROUTE_DETR_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn gen_data_is_deterministic_and_handles_empty_counts() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        let o = run(&[
            "gen-data",
            "--seed",
            "7",
            "--count",
            "512",
            "--out",
            path(out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        assert_eq!(summary["count"], 512);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 512);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let empty = dir.path().join("empty.jsonl");
    let o = run(&["gen-data", "--count", "0", "--out", path(&empty)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(&empty).unwrap().len(), 0);

    let o = run(&[
        "gen-data",
        "--count",
        "3",
        "--out",
        "/nonexistent-dir/x/scenes.jsonl",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nonexistent-dir"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "steps = 3\nwarmup = 0.5\n").unwrap();
    let o = run(&[
        "train",
        "--config",
        path(&bad),
        "--out-dir",
        path(&dir.path().join("r")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(
        err.contains("line 2") && err.contains("warmup_frac") && err.contains("eval_interval"),
        "{err}"
    );

    let o = run(&["train", "--set", "stepz=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(
        run(&["eval", "--checkpoint", path(&dir.path().join("missing"))])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--routing", "maybe"]).status.code(), Some(2));
    assert_eq!(
        run(&["gradcheck", "--inject-fault", "nonsense"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn train_reruns_write_identical_logs_and_eval_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(&[
            "train",
            "--config",
            &cfg,
            "--seed",
            "3",
            "--out-dir",
            path(&out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        logs.push(fs::read(out.join("metrics.jsonl")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    let text = String::from_utf8(logs[0].clone()).unwrap();
    let steps: Vec<u64> = text
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps, vec![3, 6, 7]);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in [
        "step",
        "alpha",
        "L_main",
        "L_aux",
        "AP",
        "duplicate_rate",
        "mean_query_cos",
    ] {
        assert!(first.get(key).is_some(), "missing {key}");
    }

    let ckpt = dir.path().join("a").join("checkpoint");
    let e1 = run(&["eval", "--checkpoint", path(&ckpt)]);
    let e2 = run(&["eval", "--checkpoint", path(&ckpt), "--mode", "main"]);
    assert_eq!(e1.status.code(), Some(0), "{}", stderr(&e1));
    assert_eq!(stdout(&e1), stdout(&e2));
    let aux = run(&["eval", "--checkpoint", path(&ckpt), "--mode", "aux"]);
    assert_eq!(aux.status.code(), Some(0));

    // Zeroing every routing tensor leaves the main-mode report untouched.
    let mut state = checkpoint::load::<f32>(&ckpt).unwrap();
    for id in state.model.routing_param_ids() {
        state.model.params.get_mut(id).data_mut().fill(0.0);
    }
    let zeroed = dir.path().join("zeroed");
    checkpoint::save(&state, &zeroed).unwrap();
    let e3 = run(&["eval", "--checkpoint", path(&zeroed)]);
    assert_eq!(stdout(&e1), stdout(&e3));
}

#[test]
fn resumed_cli_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let rest = dir.path().join("rest");
    assert_eq!(
        run(&["train", "--config", &cfg, "--out-dir", path(&full)])
            .status
            .code(),
        Some(0)
    );
    let o = run(&[
        "train",
        "--config",
        &cfg,
        "--out-dir",
        path(&part),
        "--until",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run(&[
        "train",
        "--resume",
        path(&part.join("checkpoint")),
        "--out-dir",
        path(&rest),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        fs::read(full.join("metrics.jsonl")).unwrap(),
        fs::read(rest.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(full.join("checkpoint").join(checkpoint::BLOB)).unwrap(),
        fs::read(rest.join("checkpoint").join(checkpoint::BLOB)).unwrap()
    );
}

#[test]
fn route_switches_select_the_arm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("s_only");
    let o = run(&[
        "train",
        "--config",
        &cfg,
        "--suppressor",
        "on",
        "--delegator",
        "off",
        "--set",
        "steps=1",
        "--out-dir",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let written = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(written.contains("suppressor = on") && written.contains("delegator = off"));

    let off = dir.path().join("off");
    let o = run(&[
        "train",
        "--config",
        &cfg,
        "--routing",
        "off",
        "--set",
        "steps=1",
        "--out-dir",
        path(&off),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let state = checkpoint::load::<f32>(&off.join("checkpoint")).unwrap();
    assert!(state.model.routing_param_ids().is_empty());
}

#[test]
fn gradcheck_passes_and_catches_faults() {
    let o = run(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(report["passed"], true);
    let names: Vec<String> = report["reports"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r["entries"].as_array().unwrap().iter())
        .map(|e| e["name"].as_str().unwrap().to_string())
        .collect();
    for p in route_detr::routing::ROUTING_PARAM_NAMES {
        assert!(
            names.iter().any(|n| n == &format!("layer1.routing.{p}")),
            "{p} not reported"
        );
    }

    let o = run(&["gradcheck", "--inject-fault", "softmax"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("FAIL"));
}

#[test]
fn ablate_emits_one_row_per_run_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("abl");
    let args = [
        "ablate",
        "--config",
        &cfg,
        "--seeds",
        "2",
        "--set",
        "steps=2",
        "--set",
        "eval_interval=1",
    ];
    let a = run(&[&args[..], &["--out-dir", path(&out)]].concat());
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let b = run(&args);
    assert_eq!(stdout(&a), stdout(&b));
    let text = stdout(&a);
    let rows: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(rows, ["none", "none", "S", "S", "D", "D", "S+D", "S+D"]);
    assert!(stderr(&a).contains("verdict:"));
    assert!(out.join("summary.csv").exists() && out.join("verdict.json").exists());
}
