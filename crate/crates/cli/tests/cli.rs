//! End-to-end tests of the command-line interface: every command runs as a
//! subprocess against a small corpus, and the emitted files are checked
//! against the library's own readers and metrics.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const MICRO_CFG: &str = "\
corpus.num_categories = 2
corpus.feature_dim = 8
corpus.segments_per_video = 8
corpus.n_normal = 12
corpus.n_abnormal = 12
corpus.anomaly_span = [2, 4]
corpus.frames_per_segment = 4
corpus.seed = 5
model.motar.num_heads = 2
model.core.scorer_hidden = [16, 8]
model.core.inject_heads = 2
train.epochs = 1
train.batch_size = 8
train.holdout_fraction = 0.25
train.seed = 5
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wvad"))
}

fn write_cfg(dir: &Path) -> PathBuf {
    let p = dir.join("micro.cfg");
    std::fs::write(&p, MICRO_CFG).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn wvad")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "`wvad {}` failed:\nstdout: {}\nstderr: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// gen + train into fresh subdirectories; returns (config, corpus, run dir).
fn train_fixture(tmp: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = write_cfg(tmp);
    let corpus = tmp.join("corpus");
    let rundir = tmp.join("run");
    run_ok(&["gen", "--config", &s(&cfg), "--out", &s(&corpus)]);
    run_ok(&[
        "train",
        "--config",
        &s(&cfg),
        "--corpus",
        &s(&corpus),
        "--out",
        &s(&rundir),
    ]);
    (cfg, corpus, rundir)
}

#[test]
fn gen_refuses_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path());
    let corpus = tmp.path().join("corpus");
    run_ok(&["gen", "--config", &s(&cfg), "--out", &s(&corpus)]);
    let second = run(&["gen", "--config", &s(&cfg), "--out", &s(&corpus)]);
    assert_eq!(code(&second), 1);
    assert!(String::from_utf8_lossy(&second.stderr).contains("--force"));
    run_ok(&["gen", "--config", &s(&cfg), "--out", &s(&corpus), "--force"]);
}

#[test]
fn gen_is_deterministic_and_verifies() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = run_ok(&["gen", "--config", &s(&cfg), "--out", &s(&a), "--verify"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("zero errors"));
    run_ok(&["gen", "--config", &s(&cfg), "--out", &s(&b)]);
    for rel in [
        "manifest.jsonl",
        "features/abnormal_0000.rfvd",
        "masks/abnormal_0000.rfvm",
    ] {
        let x = std::fs::read(a.join(rel)).unwrap();
        let y = std::fs::read(b.join(rel)).unwrap();
        assert_eq!(x, y, "{rel} differs between identical-seed runs");
    }
    // A different seed produces different features.
    let c = tmp.path().join("c");
    run_ok(&["gen", "--config", &s(&cfg), "--seed", "6", "--out", &s(&c)]);
    let x = std::fs::read(a.join("features/abnormal_0000.rfvd")).unwrap();
    let y = std::fs::read(c.join("features/abnormal_0000.rfvd")).unwrap();
    assert_ne!(x, y);
}

#[test]
fn train_writes_a_self_describing_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, _, rundir) = train_fixture(tmp.path());
    for name in [
        "checkpoint_best.rfvc",
        "checkpoint_last.rfvc",
        "history.csv",
        "metrics.json",
        "effective-config.txt",
    ] {
        assert!(rundir.join(name).exists(), "{name} missing");
    }
    let history = std::fs::read_to_string(rundir.join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,loss_mil,loss_gmm,loss_cat,loss_total,auc,ap");
    assert_eq!(lines.len(), 2, "one epoch -> header + one row");

    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(rundir.join("metrics.json")).unwrap())
            .unwrap();
    for key in ["auc", "ano_auc", "ap", "map_at_iou", "config_hash", "protocol", "splits"] {
        assert!(metrics.get(key).is_some(), "metrics.json lacks {key}");
    }
    assert_eq!(metrics["held_out"], serde_json::json!(true));
    assert_eq!(metrics["splits"]["holdout"]["held_out"], serde_json::json!(true));
    assert_eq!(metrics["splits"]["full"]["held_out"], serde_json::json!(false));
    assert!(metrics["map_at_iou"]["avg"].is_number());

    let echo = std::fs::read_to_string(rundir.join("effective-config.txt")).unwrap();
    assert!(echo.contains("# model-config-hash = "));
    assert!(echo.contains("train.seed = 5"));
}

#[test]
fn train_with_zero_epochs_writes_only_the_initialized_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path());
    let corpus = tmp.path().join("corpus");
    let rundir = tmp.path().join("run0");
    run_ok(&["gen", "--config", &s(&cfg), "--out", &s(&corpus)]);
    run_ok(&[
        "train",
        "--config",
        &s(&cfg),
        "--corpus",
        &s(&corpus),
        "--epochs",
        "0",
        "--out",
        &s(&rundir),
    ]);
    assert!(rundir.join("checkpoint_best.rfvc").exists());
    let history = std::fs::read_to_string(rundir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1, "header only");
    assert!(!rundir.join("metrics.json").exists());
}

#[test]
fn eval_is_deterministic_and_checks_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, corpus, rundir) = train_fixture(tmp.path());
    let ckpt = rundir.join("checkpoint_best.rfvc");
    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    for e in [&e1, &e2] {
        run_ok(&[
            "eval",
            "--config",
            &s(&cfg),
            "--checkpoint",
            &s(&ckpt),
            "--corpus",
            &s(&corpus),
            "--out",
            &s(e),
        ]);
    }
    let m1 = std::fs::read(e1.join("metrics.json")).unwrap();
    let m2 = std::fs::read(e2.join("metrics.json")).unwrap();
    assert_eq!(m1, m2, "eval output must be byte-identical");

    // A corpus with a different feature width must be refused, with both
    // hashes printed.
    let wide_cfg = tmp.path().join("wide.cfg");
    std::fs::write(
        &wide_cfg,
        MICRO_CFG.replace("corpus.feature_dim = 8", "corpus.feature_dim = 16"),
    )
    .unwrap();
    let wide = tmp.path().join("wide");
    run_ok(&["gen", "--config", &s(&wide_cfg), "--out", &s(&wide)]);
    let bad = run(&[
        "eval",
        "--checkpoint",
        &s(&ckpt),
        "--corpus",
        &s(&wide),
        "--out",
        &s(&tmp.path().join("ebad")),
    ]);
    assert_eq!(code(&bad), 1);
    let err = String::from_utf8_lossy(&bad.stderr).to_string();
    assert!(err.contains("checkpoint hash"), "{err}");
    assert!(err.contains("expected hash"), "{err}");
}

fn gt_rects(svg: &str) -> Vec<(usize, usize)> {
    svg.lines()
        .filter(|l| l.contains("class=\"gt\""))
        .map(|l| {
            let grab = |key: &str| -> usize {
                l.split(key).nth(1).unwrap().split('"').next().unwrap().parse().unwrap()
            };
            let x = grab("x=\"");
            (x, x + grab("width=\""))
        })
        .collect()
}

#[test]
fn score_emits_frame_rows_and_exact_svg_spans() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, corpus, rundir) = train_fixture(tmp.path());
    let ckpt = rundir.join("checkpoint_best.rfvc");
    let outdir = tmp.path().join("score");
    run_ok(&[
        "score",
        "--config",
        &s(&cfg),
        "--checkpoint",
        &s(&ckpt),
        "--features",
        &s(&corpus.join("features/abnormal_0001.rfvd")),
        "--mask",
        &s(&corpus.join("masks/abnormal_0001.rfvm")),
        "--svg",
        "--out",
        &s(&outdir),
    ]);
    let csv = std::fs::read_to_string(outdir.join("score.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "frame_index,score,gt");
    assert_eq!(lines.len(), 1 + 8 * 4, "header + T * frames_per_segment");

    // The gt column reproduces the mask, and the SVG shades exactly the
    // mask's spans.
    let mask = wvad::corpus::read_mask_file(&corpus.join("masks/abnormal_0001.rfvm")).unwrap();
    for (i, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0], i.to_string());
        let score: f64 = fields[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&score));
        assert_eq!(fields[2], mask[i].to_string());
    }
    let svg = std::fs::read_to_string(outdir.join("score.svg")).unwrap();
    assert_eq!(gt_rects(&svg), wvad::metrics::mask_to_spans(&mask));
}

#[test]
fn score_without_a_mask_omits_gt_and_shading() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, corpus, rundir) = train_fixture(tmp.path());
    let outdir = tmp.path().join("score");
    run_ok(&[
        "score",
        "--config",
        &s(&cfg),
        "--checkpoint",
        &s(&rundir.join("checkpoint_best.rfvc")),
        "--features",
        &s(&corpus.join("features/normal_0000.rfvd")),
        "--svg",
        "--out",
        &s(&outdir),
    ]);
    let csv = std::fs::read_to_string(outdir.join("score.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "frame_index,score");
    assert_eq!(csv.lines().count(), 1 + 8 * 4);
    let svg = std::fs::read_to_string(outdir.join("score.svg")).unwrap();
    assert!(gt_rects(&svg).is_empty());
}

#[test]
fn eval_metrics_match_recomputation_from_score_exports() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, corpus, rundir) = train_fixture(tmp.path());
    let ckpt = rundir.join("checkpoint_best.rfvc");
    let evaldir = tmp.path().join("eval");
    run_ok(&[
        "eval",
        "--config",
        &s(&cfg),
        "--checkpoint",
        &s(&ckpt),
        "--corpus",
        &s(&corpus),
        "--out",
        &s(&evaldir),
    ]);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(evaldir.join("metrics.json")).unwrap())
            .unwrap();

    // Re-score every video through the score command and pool the frames.
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for i in 0..12 {
        for (prefix, masked) in [("normal", false), ("abnormal", true)] {
            let outdir = tmp.path().join(format!("s_{prefix}_{i}"));
            let feat = corpus.join(format!("features/{prefix}_{i:04}.rfvd"));
            let mut args = vec![
                "score".to_string(),
                "--config".into(),
                s(&cfg),
                "--checkpoint".into(),
                s(&ckpt),
                "--features".into(),
                s(&feat),
                "--out".into(),
                s(&outdir),
            ];
            if masked {
                args.push("--mask".into());
                args.push(s(&corpus.join(format!("masks/{prefix}_{i:04}.rfvm"))));
            }
            let argv: Vec<&str> = args.iter().map(String::as_str).collect();
            run_ok(&argv);
            let csv = std::fs::read_to_string(outdir.join("score.csv")).unwrap();
            for line in csv.lines().skip(1) {
                let fields: Vec<&str> = line.split(',').collect();
                scores.push(fields[1].parse::<f64>().unwrap());
                labels.push(if masked {
                    fields[2].parse::<u8>().unwrap()
                } else {
                    0
                });
            }
        }
    }
    let recomputed = wvad::metrics::roc_auc(&scores, &labels).unwrap();
    let reported = metrics["splits"]["full"]["auc"].as_f64().unwrap();
    assert!(
        (recomputed - reported).abs() < 1e-12,
        "recomputed {recomputed} vs reported {reported}"
    );
}

#[test]
fn export_logits_has_one_row_per_video_and_2c_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, corpus, rundir) = train_fixture(tmp.path());
    let outdir = tmp.path().join("logits");
    run_ok(&[
        "export-logits",
        "--checkpoint",
        &s(&rundir.join("checkpoint_best.rfvc")),
        "--corpus",
        &s(&corpus),
        "--out",
        &s(&outdir),
    ]);
    let csv = std::fs::read_to_string(outdir.join("logits.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 24);
    assert_eq!(
        lines[0],
        "video_id,label,category,logit_0_normal,logit_0_abnormal,logit_1_normal,logit_1_abnormal"
    );
    for line in &lines[1..] {
        assert_eq!(line.split(',').count(), 3 + 4);
    }
    let normals = lines[1..].iter().filter(|l| l.contains(",normal,")).count();
    assert_eq!(normals, 12);
}

#[test]
fn unknown_config_keys_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "trainer.epochs = 3\n").unwrap();
    let out = run(&["gen", "--config", &s(&cfg), "--out", &s(&tmp.path().join("x"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path());
    let corpus = tmp.path().join("corpus");
    run_ok(&["gen", "--config", &s(&cfg), "--out", &s(&corpus)]);
    let out = run(&[
        "eval",
        "--checkpoint",
        &s(&tmp.path().join("nope.rfvc")),
        "--corpus",
        &s(&corpus),
        "--out",
        &s(&tmp.path().join("e")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_out_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path());
    let out = run(&["gen", "--config", &s(&cfg)]);
    assert_eq!(code(&out), 1);
}
