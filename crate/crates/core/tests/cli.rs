use std::fs;
use std::path::Path;
use std::process::Command;

use headmorph::imgcore::ImageCrop;

const SMALL: [&str; 8] = [
    "--set",
    "distill.fine_iterations=20",
    "--set",
    "distill.coarse_iterations=10",
    "--set",
    "tune.epochs=3",
    "--set",
    "tune.milestones=[2]",
];

fn headmorph(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_headmorph"))
        .arg("-q")
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.stdout.is_empty(),
        "stdout is reserved: {:?}",
        String::from_utf8_lossy(&out.stdout)
    );
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&SMALL);
    v
}

fn header(p: &Path) -> String {
    fs::read_to_string(p)
        .unwrap_or_else(|e| panic!("{}: {e}", p.display()))
        .lines()
        .next()
        .unwrap()
        .to_string()
}

fn rows(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().count() - 1
}

#[test]
fn stages_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("data"), dir.path().join("out"));
    assert_eq!(
        headmorph(&[
            "gen-synth",
            "--out",
            s(&data),
            "--n",
            "40",
            "--classes",
            "4",
            "--seed",
            "3"
        ]),
        0
    );
    for f in [
        "votes.csv",
        "classes.txt",
        "manifest.jsonl",
        "images/s00000.png",
    ] {
        assert!(data.join(f).exists(), "{f}");
    }
    assert_eq!(rows(&data.join("manifest.jsonl")) + 1, 40);

    assert_eq!(
        headmorph(&["masks", "--data", s(&data), "--out", s(&out)]),
        0
    );
    let masks = out.join("masks");
    assert_eq!(rows(&masks.join("masks.jsonl")) + 1, 40);
    assert!(masks.join("aligned/s00000.png").exists());
    assert!(masks.join("hierarchy/s00000.png").exists());
    assert!(masks.join("config.toml").exists());

    let fold = ["--fold", "0", "--seed", "1"];
    let mut args = vec!["pretrain", "--data", s(&data), "--out", s(&out)];
    args.extend_from_slice(&fold);
    assert_eq!(headmorph(&with_small(&args)), 0);
    let pre = out.join("fold0/pretrain");
    assert_eq!(
        header(&pre.join("loss_curve.csv")),
        "iteration,seg,con,rot,lr"
    );
    assert_eq!(rows(&pre.join("loss_curve.csv")), 30);
    for f in ["checkpoint.bin", "student.bin", "config.toml"] {
        assert!(pre.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_dir(pre.join("teacher_masks")).unwrap().count(), 41);

    let mut args = vec!["tune", "--data", s(&data), "--out", s(&out)];
    args.extend_from_slice(&fold);
    assert_eq!(headmorph(&with_small(&args)), 0);
    let tune = out.join("fold0/tune");
    assert_eq!(
        header(&tune.join("epochs.csv")),
        "epoch,dilations,lr,loss,train_accuracy,val_accuracy"
    );
    assert_eq!(rows(&tune.join("epochs.csv")), 3);
    assert!(tune.join("classifier.bin").exists());

    assert_eq!(
        headmorph(&with_small(&[
            "eval",
            "--data",
            s(&data),
            "--out",
            s(&out),
            "--fold",
            "0"
        ])),
        0
    );
    let eval = out.join("fold0/eval");
    assert_eq!(
        header(&eval.join("metrics.csv")),
        "fold,accuracy,recall,precision,f1"
    );
    assert_eq!(
        header(&eval.join("predictions.csv")),
        "id,truth,predicted,confidence"
    );
    assert_eq!(rows(&eval.join("predictions.csv")), 8);

    let png = dir.path().join("overlay.png");
    let args = [
        "overlay",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--id",
        "s00003",
        "--fold",
        "0",
        "--output",
        s(&png),
    ];
    assert_eq!(headmorph(&args), 0);
    let panel = ImageCrop::load_png(&png).unwrap();
    assert_eq!(
        (panel.height(), panel.width(), panel.channels()),
        (64, 3 * 64 + 4, 3)
    );
}

#[test]
fn run_all_summarises_every_fold() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("data"), dir.path().join("out"));
    assert_eq!(
        headmorph(&["gen-synth", "--out", s(&data), "--n", "40", "--seed", "8"]),
        0
    );
    let args = [
        "run-all",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--seed",
        "2",
        "--runs",
        "2",
        "--folds",
        "0,3",
        "--no-pretrain",
    ];
    assert_eq!(headmorph(&with_small(&args)), 0);
    assert_eq!(
        header(&out.join("metrics.csv")),
        "run,fold,accuracy,recall,precision,f1"
    );
    assert_eq!(rows(&out.join("metrics.csv")), 4);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let names: Vec<&str> = summary
        .lines()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(names, ["metric", "accuracy", "recall", "precision", "f1"]);
    assert!(out.join("run1/fold3/eval/metrics.csv").exists());
    assert!(!out.join("run0/fold0/pretrain").exists());
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("data"), dir.path().join("out"));
    assert_eq!(
        headmorph(&["gen-synth", "--out", s(&data), "--n", "20", "--seed", "1"]),
        0
    );
    let io = ["--data", s(&data), "--out", s(&out)];
    let cmd = |pre: &[&str], post: &[&str]| -> Vec<String> {
        pre.iter()
            .chain(&io)
            .chain(post)
            .map(|a| a.to_string())
            .collect()
    };
    let code = |v: Vec<String>| headmorph(&v.iter().map(String::as_str).collect::<Vec<_>>());

    assert_eq!(code(cmd(&["masks"], &["--set", "tune.nonsense=1"])), 1);
    assert_eq!(code(cmd(&["masks"], &["--set", "tune.lambda=1.5"])), 1);
    assert_eq!(code(cmd(&["eval"], &["--fold", "0"])), 2);
    assert_eq!(code(cmd(&["masks"], &[])), 0);
    assert_eq!(code(cmd(&["pretrain"], &["--fold", "9", "--seed", "0"])), 1);
    assert_eq!(code(cmd(&["tune"], &["--fold", "0", "--seed", "0"])), 2);
    let blowup = [
        "--fold",
        "0",
        "--seed",
        "0",
        "--no-pretrain",
        "--set",
        "tune.lr=1e30",
    ];
    assert_eq!(code(cmd(&["tune"], &blowup)), 3);
    assert!(out.join("fold0/tune/classifier.last_good.bin").exists());
}
