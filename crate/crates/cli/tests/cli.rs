use std::path::Path;
use std::process::{Command, Output};

fn cf2net(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cf2net"))
        .args(args)
        .current_dir(dir)
        .env("CF2NET_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--base-width",
    "2",
    "--fsp-width",
    "2",
    "--folds",
    "2",
    "--epochs",
    "1",
];

/// Prepared 6-sample synthetic set at 32×32 with a small superpixel count.
fn prepare(dir: &Path) {
    ok(&cf2net(
        dir,
        &[
            "prepare",
            "--synthetic",
            "6",
            "--size",
            "32",
            "--k",
            "30",
            "--out",
            "data",
        ],
    ));
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for sub in ["", "images", "masks", "edges", "superpixels"] {
        let Ok(entries) = std::fs::read_dir(dir.join(sub)) else {
            continue;
        };
        for e in entries.flatten() {
            if e.path().is_file() {
                files.push((
                    e.path().display().to_string(),
                    std::fs::read(e.path()).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn prepare_materializes_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let first = ok(&cf2net(
        tmp.path(),
        &[
            "prepare",
            "--synthetic",
            "5",
            "--size",
            "32",
            "--k",
            "30",
            "--out",
            "data",
        ],
    ));
    assert!(first.contains("prepared 5 samples"), "{first}");
    let images = std::fs::read_dir(tmp.path().join("data/images"))
        .unwrap()
        .count();
    assert_eq!(images, 5);
    let again = ok(&cf2net(
        tmp.path(),
        &[
            "prepare",
            "--synthetic",
            "5",
            "--size",
            "32",
            "--k",
            "30",
            "--out",
            "data",
        ],
    ));
    assert!(again.contains("already prepared"), "{again}");
}

#[test]
fn missing_inputs_are_user_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cf2net(tmp.path(), &["train", "--data", "nowhere", "--out", "run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("cf2net prepare"), "{}", stderr(&out));

    let out = cf2net(tmp.path(), &["train", "--out", "run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("cf2net prepare"));

    std::fs::write(tmp.path().join("bad.toml"), "seed = \"x\"").unwrap();
    let out = cf2net(
        tmp.path(),
        &["--config", "bad.toml", "selftest", "--skip-overfit"],
    );
    assert_eq!(out.status.code(), Some(1));

    prepare(tmp.path());
    let out = cf2net(
        tmp.path(),
        &["train", "--data", "data", "--out", "r", "--epochs", "0"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("epochs"), "{}", stderr(&out));
}

#[test]
fn train_eval_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    let before = listing(&dir.join("data"));

    let mut args = vec!["train", "--data", "data", "--out", "run"];
    args.extend_from_slice(TINY);
    let table = ok(&cf2net(dir, &args));
    assert!(table.contains("mean"), "{table}");
    for f in [
        "config.toml",
        "run.log",
        "report.jsonl",
        "report.txt",
        "fold0/best.safetensors",
        "fold1/history.jsonl",
    ] {
        assert!(dir.join("run").join(f).exists(), "{f}");
    }
    assert_eq!(listing(&dir.join("data")), before, "input dataset changed");

    // The persisted config alone reproduces the run.
    ok(&cf2net(
        dir,
        &["--config", "run/config.toml", "train", "--out", "again"],
    ));
    assert_eq!(
        std::fs::read_to_string(dir.join("run/report.jsonl")).unwrap(),
        std::fs::read_to_string(dir.join("again/report.jsonl")).unwrap()
    );

    ok(&cf2net(
        dir,
        &[
            "eval",
            "--checkpoint",
            "run/fold1/best.safetensors",
            "--data",
            "data",
            "--out",
            "ev",
        ],
    ));
    let report = std::fs::read_to_string(dir.join("ev/eval_report.jsonl")).unwrap();
    assert!(report.lines().count() >= 2);

    let image = std::fs::read_dir(dir.join("data/images"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let image = image.to_str().unwrap();
    let msg = ok(&cf2net(
        dir,
        &[
            "predict",
            "--checkpoint",
            "run/fold0/best.safetensors",
            "--image",
            image,
            "--out",
            "pred/overlay.png",
        ],
    ));
    assert!(msg.contains("lesion pixels"));
    for f in [
        "overlay.png",
        "overlay_mask.png",
        "overlay_edge.png",
        "overlay_config.toml",
    ] {
        assert!(dir.join("pred").join(f).exists(), "{f}");
    }

    let out = cf2net(
        dir,
        &[
            "predict",
            "--checkpoint",
            "run/fold0/best.safetensors",
            "--image",
            image,
            "--no-superpixels",
            "--out",
            "p2.png",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("mismatch"));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    std::fs::write(
        dir.join("exp.toml"),
        "seed = 4\n[train]\nepochs = 3\nfolds = 2\n[train.model]\nbase_width = 2\nfsp_width = 2\n",
    )
    .unwrap();
    ok(&cf2net(
        dir,
        &[
            "--config", "exp.toml", "train", "--data", "data", "--out", "run", "--epochs", "1",
            "--fold", "0",
        ],
    ));
    let history = std::fs::read_to_string(dir.join("run/fold0/history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 1);
    let resolved = std::fs::read_to_string(dir.join("run/config.toml")).unwrap();
    assert!(resolved.contains("seed = 4"), "{resolved}");
    assert!(resolved.contains("epochs = 1"));
}

#[test]
fn ablate_prints_the_loss_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    let mut args = vec![
        "ablate",
        "--data",
        "data",
        "--out",
        "abl",
        "--variants",
        "unet,unetw",
    ];
    args.extend_from_slice(TINY);
    let table = ok(&cf2net(dir, &args));
    assert!(table.contains("Balance-weighted loss"), "{table}");
    assert!(table.contains("U-NetW"));
    assert!(dir.join("abl/ablation.jsonl").exists());

    let mut args = vec![
        "ablate",
        "--data",
        "data",
        "--out",
        "abl2",
        "--variants",
        "bogus",
    ];
    args.extend_from_slice(TINY);
    assert_eq!(cf2net(dir, &args).status.code(), Some(1));
}

#[test]
fn selftest_checks_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&cf2net(tmp.path(), &["selftest", "--skip-overfit"]));
    assert!(out.contains("[PASS] metric oracle"));
    assert!(!out.contains("FAIL"));
}
