use std::fs;
use std::path::Path;
use std::process::Command;

use histogen_cli::{dataset, read_samples, Config};

fn tiny_config(dir: &Path) -> Config {
    let mut c = Config::default();
    c.data.n_train = 6;
    c.data.n_eval = 3;
    c.train.steps = 4;
    c.train.batch_size = 2;
    c.diffusion.t = 20;
    c.paths.dataset_dir = dir.join("data");
    c.paths.out_dir = dir.join("run");
    c
}

fn write_config(dir: &Path, c: &Config) -> std::path::PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, c.to_json()).unwrap();
    p
}

fn histogen(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_histogen")).args(args).output().unwrap()
}

#[test]
fn full_flow_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config(dir.path());
    let cfg = write_config(dir.path(), &c);
    let cfg = cfg.to_str().unwrap();
    for cmd in ["gen-data", "train", "sample", "evaluate", "annotate", "gradcheck"] {
        let out = histogen(&[cmd, "--config", cfg]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let run = &c.paths.out_dir;
    let log = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + c.train.steps);
    assert!(log.starts_with("step,loss\n0,"));
    assert_eq!(read_samples(&run.join("samples.icdt")).unwrap().len(), 3);
    assert!(run.join("samples.png").exists());
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    for key in ["fid", "mean_cosine", "mean_dice"] {
        assert!(metrics[key].as_f64().unwrap().is_finite(), "{key}");
    }
    let ann = fs::read_to_string(run.join("annotations.jsonl")).unwrap();
    assert_eq!(ann.lines().count(), 64);
    let gc: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(gc["passed"], true);
    assert_eq!(gc["checks"].as_array().unwrap().len(), 7);
}

#[test]
fn sample_options_and_out_override() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config(dir.path());
    let cfg = write_config(dir.path(), &c);
    let cfg = cfg.to_str().unwrap();
    let other = dir.path().join("elsewhere");
    let ckpt = dir.path().join("ck/model.icdt");
    assert!(histogen(&["gen-data", "--config", cfg]).status.success());
    let out = histogen(&["train", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(out.status.success());
    let out = histogen(&[
        "sample",
        "--config",
        cfg,
        "--out",
        other.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--n",
        "2",
        "--embedding-source",
        "reference",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_samples(&other.join("samples.icdt")).unwrap().len(), 2);
    // more samples than held-out layouts is a usage error
    let out = histogen(&["sample", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap(), "--n", "9"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(histogen(&["--help"]).status.code(), Some(0));
    assert_eq!(histogen(&["--version"]).status.code(), Some(0));
    assert_eq!(histogen(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(histogen(&["train"]).status.code(), Some(1));

    let missing = dir.path().join("nope.json");
    assert_eq!(histogen(&["train", "--config", missing.to_str().unwrap()]).status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    let mut v: serde_json::Value = serde_json::from_str(&Config::default().to_json()).unwrap();
    v["train"]["stpes"] = serde_json::json!(3);
    fs::write(&bad, v.to_string()).unwrap();
    let out = histogen(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stpes"));

    // valid config but no dataset on disk: runtime failure
    let c = tiny_config(dir.path());
    let cfg = write_config(dir.path(), &c);
    let out = histogen(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(histogen(&["gen-data", "--config", cfg.to_str().unwrap()]).status.success());
    // truncated checkpoint
    let ck = dir.path().join("trunc.icdt");
    fs::write(&ck, b"ICDT\x01\x00").unwrap();
    let out = histogen(&["sample", "--config", cfg.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    // unreachable annotation endpoint is skipped and logged, not fatal
    let out = histogen(&[
        "annotate",
        "--config",
        cfg.to_str().unwrap(),
        "--endpoint-url",
        "http://127.0.0.1:9/agent",
        "--workers",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let skipped = fs::read_to_string(c.paths.out_dir.join("skipped.jsonl")).unwrap();
    assert_eq!(skipped.lines().count(), 64);
}

#[test]
fn human_scores_are_attached() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config(dir.path());
    histogen_cli::cmd_gen_data(&c).unwrap();
    let first = histogen_cli::cmd_annotate(&c, None, None, 2).unwrap();
    assert!(first.agreement.is_none());
    let ann = fs::read_to_string(c.paths.out_dir.join("annotations.jsonl")).unwrap();
    let records = histogen_core::annotate::read_records(ann.as_bytes()).unwrap();
    // the mock judge agrees with its own mock agents on every patch
    assert!(records.iter().all(|r| r.judge_score == records[0].judge_score));

    let scores = dir.path().join("human.csv");
    let mut csv = String::from("patch_id,score\n");
    for (i, r) in records.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", r.patch_id, i as f64 / 63.0));
    }
    fs::write(&scores, csv).unwrap();
    // a constant judge leaves nothing to rank against: a runtime error, but
    // the annotated records are still written
    let err = histogen_cli::cmd_annotate(&c, None, Some(&scores), 1).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let back = histogen_core::annotate::read_records(
        fs::read_to_string(c.paths.out_dir.join("annotations.jsonl")).unwrap().as_bytes(),
    )
    .unwrap();
    assert_eq!(back[63].human_score, Some(1.0));
    assert_eq!(back[0].human_score, Some(0.0));

    fs::write(&scores, "patch_id,score\npatch_9999,0.5\n").unwrap();
    assert!(histogen_cli::cmd_annotate(&c, None, Some(&scores), 1).is_err());
}

#[test]
fn dataset_on_disk_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config(dir.path());
    let written = histogen_cli::cmd_gen_data(&c).unwrap();
    let back = dataset::read(&c.paths.dataset_dir).unwrap();
    for (a, b) in written.eval.iter().zip(&back.eval) {
        assert_eq!(a.entry, b.entry);
        assert_eq!(a.mask, b.mask);
        for (x, y) in a.image.data().iter().zip(b.image.data()) {
            assert_eq!((*x as f32) as f64, *y);
        }
    }
}
