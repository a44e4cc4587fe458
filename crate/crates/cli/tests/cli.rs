use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[sampling]
grid_size = 8
fragment_edge = 56
technical_frames = 4
clip_length = 4
alpha = 2
semantic_frames = 4

[model]
d_model = 16
d_ff = 32
heads = 2

[lora]
rank = 2

[train]
epochs = 2
batch_size = 2
"#;

fn mdvqa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdvqa"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synthetic(dir: &Path) {
    fs::write(dir.join("small.toml"), SMALL).unwrap();
    let out = mdvqa(
        dir,
        &[
            "make-synthetic", "--out", "data", "--n-train", "3", "--n-holdout", "1", "--frames", "8",
            "--height", "64", "--width", "64", "--workers", "1",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir);
    for name in ["manifest.csv", "train.csv", "holdout.csv", "labels.csv"] {
        assert!(dir.join("data").join(name).exists(), "{name}");
    }

    let prep = ["--config", "small.toml", "prepare", "--manifest", "data/manifest.csv", "--cache", "cache"];
    let first = mdvqa(dir, &prep);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert!(stdout(&first).starts_with("12 cache files written"), "{}", stdout(&first));
    let second = mdvqa(dir, &prep);
    assert!(stdout(&second).starts_with("0 cache files written, 4 videos"), "{}", stdout(&second));

    let train = mdvqa(
        dir,
        &[
            "--config", "small.toml", "train", "--train", "data/manifest.csv", "--val", "data/holdout.csv",
            "--cache", "cache", "--out", "run",
        ],
    );
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    assert_eq!(stdout(&train).lines().filter(|l| l.starts_with("epoch")).count(), 2);
    for name in ["model.ckpt", "state.ckpt", "train_log.csv", "config.toml"] {
        assert!(dir.join("run").join(name).exists(), "{name}");
    }

    let predict = |out: &str| {
        mdvqa(
            dir,
            &["predict", "--manifest", "data/manifest.csv", "--cache", "cache", "--checkpoint", "run/model.ckpt", "--out", out],
        )
    };
    let p = predict("a.csv");
    assert_eq!(code(&p), 0, "{}", String::from_utf8_lossy(&p.stderr));
    assert_eq!(code(&predict("b.csv")), 0);
    assert_eq!(fs::read(dir.join("a.csv")).unwrap(), fs::read(dir.join("b.csv")).unwrap());
    assert!(dir.join("a.csv.config.toml").exists());

    let eval = mdvqa(dir, &["evaluate", "--predictions", "a.csv", "--manifest", "data/manifest.csv"]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(stdout(&eval).contains("SROCC"));
    let kv = fs::read_to_string(dir.join("a.csv.eval.kv")).unwrap();
    assert!(kv.lines().any(|l| l.starts_with("main_score")), "{kv}");

    let report = mdvqa(dir, &["report", "--manifest", "data/manifest.csv", "a.csv", "b.csv", "--csv", "report.csv"]);
    assert_eq!(code(&report), 0, "{}", String::from_utf8_lossy(&report.stderr));
    let table = stdout(&report);
    assert_eq!(table.lines().count(), 3, "{table}");
    assert!(table.lines().next().unwrap().contains("MainScore"));
    assert!(dir.join("report.csv").exists());

    let mismatch = mdvqa(dir, &["evaluate", "--predictions", "a.csv", "--manifest", "data/holdout.csv"]);
    assert_eq!(code(&mismatch), 1);
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("syn0000"));
}

#[test]
fn unreadable_video_is_a_partial_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synthetic(dir);
    fs::remove_dir_all(dir.join("data/videos/syn0002")).unwrap();
    let out = mdvqa(
        dir,
        &["--config", "small.toml", "prepare", "--manifest", "data/manifest.csv", "--cache", "cache"],
    );
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).starts_with("9 cache files written"), "{}", stdout(&out));
    assert!(String::from_utf8_lossy(&out.stderr).contains("syn0002"));
    let caches = fs::read_dir(dir.join("cache"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "feat"))
        .count();
    assert_eq!(caches, 9);
}

#[test]
fn invalid_invocations_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("m.csv"), "video_id,uri,mos\nv,v,3.0\n").unwrap();
    let cases: [&[&str]; 5] = [
        &["prepare", "--manifest", "m.csv"],
        &["frobnicate"],
        &["--set", "train.nonsense=1", "prepare", "--manifest", "m.csv", "--cache", "c"],
        &["--preset", "huge", "prepare", "--manifest", "m.csv", "--cache", "c"],
        &["prepare", "--manifest", "m.csv", "--cache", "c", "--grid-size", "0"],
    ];
    for args in cases {
        let out = mdvqa(dir, args);
        assert_eq!(code(&out), 2, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(code(&mdvqa(dir, &["--help"])), 0);
}
