use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use logo_ssl::metrics::{knn_curve, read_metrics};
use logo_ssl::plot::parse_line_chart;

fn logo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_logo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A few seconds of training on a tiny synthetic set.
const TINY: &[&str] = &[
    "preset=compact",
    "data.format=synthetic",
    "synth.num_images=100",
    "synth.canvas_size=32",
    "epochs=1",
    "batch_size=8",
    "encoder.widths=8,8,8,8",
    "encoder.embed_dim=16",
    "regressor.hidden=16",
    "queue_size=64",
];

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--out", dir.to_str().unwrap(), "--seed", "3", "train"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    logo(&args)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&logo(&[])), 2);
    assert_eq!(code(&logo(&["frobnicate"])), 2);
    let tmp = tempfile::tempdir().unwrap();
    let o = logo(&["--out", p(tmp.path()), "train", "no_such.key=1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no_such.key"), "{}", stderr(&o));
    let o = logo(&["--out", p(tmp.path()), "train", "lambda=abc"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_dataset_path_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let o = logo(&["--out", p(tmp.path()), "train", "data.format=folder"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("data.train"), "{}", stderr(&o));
}

#[test]
fn unreadable_dataset_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let o = logo(&[
        "--out",
        p(tmp.path()),
        "train",
        "data.format=cifar",
        "data.train=/definitely/not/here.bin",
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn smoke_train_writes_artifacts_and_echoes_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train(tmp.path(), &["variant=noncontrastive", "lambda=0.0001"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.txt", "metrics.jsonl", "last.ckpt", "best.ckpt"] {
        assert!(tmp.path().join(f).is_file(), "missing {f}");
    }
    let echo = fs::read_to_string(tmp.path().join("config.txt")).unwrap();
    assert!(echo.contains("train.variant = noncontrastive"), "{echo}");
    assert!(echo.contains("train.lambda = 0.0001"), "{echo}");
    let (records, warnings) = read_metrics(tmp.path().join("metrics.jsonl")).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(knn_curve(&records).len(), 1);
}

#[test]
fn config_file_and_overrides_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    let mut text = TINY.iter().map(|kv| kv.replacen('=', " = ", 1)).collect::<Vec<_>>().join("\n");
    text.push_str("\n# comment\ntrain.lambda = 0.25\n");
    fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("run");
    let o = logo(&["--config", p(&cfg), "--out", p(&out), "train", "lambda=0.5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(echo.contains("train.lambda = 0.5"));
    assert!(echo.contains("encoder.widths = 8,8,8,8"));
}

#[test]
fn fresh_processes_reproduce_parameters_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(code(&train(d, &[])), 0);
    }
    let steps = read_metrics(a.join("metrics.jsonl")).unwrap().0.len();
    assert!(steps >= 10, "only {steps} records");
    assert_eq!(fs::read(a.join("last.ckpt")).unwrap(), fs::read(b.join("last.ckpt")).unwrap());
    assert_eq!(
        fs::read_to_string(a.join("metrics.jsonl")).unwrap(),
        fs::read_to_string(b.join("metrics.jsonl")).unwrap()
    );
}

fn synth_folder(dir: &Path, n: &str) -> PathBuf {
    let folder = dir.join("synth");
    let o = logo(&[
        "--out",
        p(&folder),
        "make-synth",
        &format!("synth.num_images={n}"),
        "synth.canvas_size=32",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    folder
}

#[test]
fn eval_on_duplicated_bank_is_perfect_and_bad_checkpoints_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert_eq!(code(&train(&run, &[])), 0);
    let folder = synth_folder(tmp.path(), "60");
    let ckpt = run.join("last.ckpt");
    let data = [
        "data.format=folder".to_string(),
        format!("data.train={}", folder.display()),
        format!("data.val={}", folder.display()),
    ];
    let out = tmp.path().join("eval");
    let mut args = vec!["--out", p(&out), "eval", p(&ckpt), "eval.knn_k=1"];
    args.extend(data.iter().map(String::as_str));
    let o = logo(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "knn_top1=100.00");
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(record["top1"], 1.0);

    let mut args = vec!["--out", p(&out), "eval", p(&ckpt), "--mode", "linear", "eval.probe_epochs=2"];
    args.extend(data.iter().map(String::as_str));
    let o = logo(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o);
    let value: f64 = line.trim().strip_prefix("linear_top1=").unwrap().parse().unwrap();
    assert!((0.0..=100.0).contains(&value));
    assert_eq!(line.trim().split('.').nth(1).unwrap().len(), 2);

    let bytes = fs::read(&ckpt).unwrap();
    let cut = tmp.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let mut args = vec!["--out", p(&out), "eval", p(&cut)];
    args.extend(data.iter().map(String::as_str));
    assert_eq!(code(&logo(&args)), 2);
}

#[test]
fn affinity_needs_two_images_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    assert_eq!(code(&train(&run, &[])), 0);
    let folder = synth_folder(tmp.path(), "20");
    let mut images: Vec<PathBuf> = fs::read_dir(folder.join("00_disk"))
        .unwrap()
        .chain(fs::read_dir(folder.join("01_square")).unwrap())
        .map(|e| e.unwrap().path())
        .collect();
    images.sort();
    images.truncate(4);
    assert_eq!(images.len(), 4);
    let ckpt = run.join("last.ckpt");

    let single = logo(&["--out", p(&tmp.path().join("one")), "affinity", p(&ckpt), p(&images[0])]);
    assert_eq!(code(&single), 2);

    let mut reports = Vec::new();
    for name in ["x", "y"] {
        let out = tmp.path().join(name);
        let mut args = vec!["--out", p(&out), "--seed", "5", "affinity", p(&ckpt)];
        args.extend(images.iter().map(|i| p(i)));
        let o = logo(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(out.join("affinity.svg").is_file());
        reports.push(fs::read_to_string(out.join("affinity.txt")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let crops = reports[0].lines().filter(|l| l.contains("_crop")).count();
    assert_eq!(crops, 40);
}

#[test]
fn plot_overlays_logs_with_exact_values() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("alpha.jsonl");
    let b = tmp.path().join("beta.jsonl");
    fs::write(
        &a,
        concat!(
            r#"{"kind":"eval","step":31,"epoch":1,"knn_top1":0.123456789}"#,
            "\n",
            "not json\n",
            r#"{"kind":"eval","step":62,"epoch":2,"knn_top1":0.25}"#,
            "\n"
        ),
    )
    .unwrap();
    fs::write(&b, concat!(r#"{"kind":"eval","step":31,"epoch":1,"knn_top1":0.3}"#, "\n")).unwrap();
    let out = tmp.path().join("plot");
    let o = logo(&["--out", p(&out), "plot", p(&a), p(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("alpha.jsonl:2"), "{}", stderr(&o));
    let svg = fs::read_to_string(out.join("knn_top1.svg")).unwrap();
    let series = parse_line_chart(&svg);
    assert_eq!(series.len(), 2);
    assert_eq!(series[0].label, "alpha");
    assert_eq!(series[0].points, vec![(31.0, 0.123456789), (62.0, 0.25)]);
    assert_eq!(series[1].points, vec![(31.0, 0.3)]);

    let empty = tmp.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = tmp.path().join("plot-empty");
    let o = logo(&["--out", p(&out), "plot", p(&empty)]);
    assert_eq!(code(&o), 0);
    let svg = fs::read_to_string(out.join("knn_top1.svg")).unwrap();
    assert!(svg.contains("<line"));
    assert!(parse_line_chart(&svg).iter().all(|s| s.points.is_empty()));
}

fn tree_files(root: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .flat_map(|d| fs::read_dir(d).unwrap().map(|e| e.unwrap().path()).collect::<Vec<_>>())
        .collect();
    files.sort();
    files
}

#[test]
fn make_synth_default_writes_2000_files_in_10_classes_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = logo(&["--out", p(d), "--seed", "7", "make-synth"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let classes = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(classes, 10);
    let (fa, fb) = (tree_files(&a), tree_files(&b));
    assert_eq!(fa.len(), 2000);
    for (x, y) in fa.iter().zip(&fb).step_by(97) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
}

#[test]
fn make_synth_into_a_file_path_fails_at_runtime() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = logo(&["--out", p(&blocker.join("sub")), "make-synth", "synth.num_images=10"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}
