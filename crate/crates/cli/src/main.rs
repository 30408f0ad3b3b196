//! Command-line front end: corpus generation, training, evaluation,
//! per-video scoring, and logit export.
//!
//! Every command writes into `--out`, refuses a non-empty directory without
//! `--force`, and drops an `effective-config.txt` echo so each output
//! directory is self-describing. Exit codes: 0 success, 1 usage or
//! configuration error, 2 runtime abort.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use wvad::config::RunConfig;
use wvad::corpus::{
    expand_to_frames, generate_synthetic_corpus, read_feature_file, read_mask_file,
    CorpusManifest, FeatureSequence,
};
use wvad::metrics::{
    evaluate, mask_to_spans, score_corpus, MetricsSummary, ScoredSequence, IOU_THRESHOLDS,
    PROPOSAL_THRESHOLDS,
};
use wvad::model::{ModelConfig, RefineModel};
use wvad::nn::AdamW;
use wvad::trainer::{
    config_hash, history_to_csv, run_training, split_holdout, Checkpoint,
};

#[derive(Parser)]
#[command(
    name = "wvad",
    version,
    about = "Weakly-supervised video anomaly detection on synthetic feature corpora"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// Dotted-key config file (see README for the format).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override both the corpus seed and the training seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Output directory (required by every command).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic planted-anomaly corpus.
    Gen {
        /// Read the corpus back after writing and validate every file.
        #[arg(long)]
        verify: bool,
    },
    /// Train a model on a generated corpus.
    Train {
        /// Corpus directory (from `gen`).
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        /// Override the number of epochs.
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
        /// Disable motion-adaptive recalibration.
        #[arg(long)]
        no_motar: bool,
        /// Disable category injection (final scores re-score the
        /// recalibrated sequence).
        #[arg(long)]
        no_injection: bool,
        /// Replace soft category weights with a hard argmax gate.
        #[arg(long)]
        hard_classification: bool,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
    },
    /// Score one feature file frame by frame.
    Score {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Feature file (.rfvd).
        #[arg(long, value_name = "FILE")]
        features: PathBuf,
        /// Optional ground-truth mask (.rfvm) for the `gt` column and plot
        /// shading.
        #[arg(long, value_name = "FILE")]
        mask: Option<PathBuf>,
        /// Also write an SVG score curve.
        #[arg(long)]
        svg: bool,
    },
    /// Export per-video category logits as CSV.
    ExportLogits {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

type CmdResult<T> = Result<T, Failure>;

impl From<wvad::Error> for Failure {
    fn from(e: wvad::Error) -> Self {
        match &e {
            wvad::Error::Config(_) | wvad::Error::Shape(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> CmdResult<()> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Failure::Usage("--out DIR is required".into()))?;
    let mut cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.cmd {
        Cmd::Gen { verify } => cmd_gen(cfg, &out, cli.force, verify),
        Cmd::Train {
            corpus,
            epochs,
            no_motar,
            no_injection,
            hard_classification,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if no_motar {
                cfg.model.ablation.use_motar = false;
            }
            if no_injection {
                cfg.model.ablation.use_injection = false;
            }
            if hard_classification {
                cfg.model.ablation.use_soft_classification = false;
            }
            cmd_train(cfg, &corpus, &out, cli.force)
        }
        Cmd::Eval { checkpoint, corpus } => {
            cmd_eval(cfg, &checkpoint, &corpus, &out, cli.force, cli.config.is_some())
        }
        Cmd::Score {
            checkpoint,
            features,
            mask,
            svg,
        } => cmd_score(cfg, &checkpoint, &features, mask.as_deref(), svg, &out, cli.force),
        Cmd::ExportLogits { checkpoint, corpus } => {
            cmd_export_logits(cfg, &checkpoint, &corpus, &out, cli.force)
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CmdResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.corpus.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

/// Load a corpus manifest given either its directory or the manifest file
/// itself.
fn load_manifest(path: &Path) -> CmdResult<CorpusManifest> {
    let file = if path.is_dir() {
        path.join("manifest.jsonl")
    } else {
        path.to_path_buf()
    };
    Ok(CorpusManifest::load(&file)?)
}

/// Create the output directory, refusing to touch a non-empty one without
/// `--force`.
fn prepare_out(out: &Path, force: bool) -> CmdResult<()> {
    if out.exists() && std::fs::read_dir(out)?.next().is_some() && !force {
        return Err(Failure::Usage(format!(
            "output directory `{}` is not empty; pass --force to write into it",
            out.display()
        )));
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn write_echo(cfg: &RunConfig, out: &Path) -> CmdResult<()> {
    std::fs::write(out.join("effective-config.txt"), cfg.effective_text()?)?;
    Ok(())
}

/// Take the authoritative corpus shape from a manifest into the config.
fn adopt_corpus_shape(cfg: &mut RunConfig, manifest: &CorpusManifest) {
    cfg.corpus.num_categories = manifest.num_categories;
    cfg.corpus.feature_dim = manifest.feature_dim;
    cfg.corpus.segments_per_video = manifest.segments_per_video;
    cfg.model.num_categories = manifest.num_categories;
    cfg.model.feature_dim = manifest.feature_dim;
    cfg.model.segments_per_video = manifest.segments_per_video;
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn cmd_gen(cfg: RunConfig, out: &Path, force: bool, verify: bool) -> CmdResult<()> {
    cfg.validate()?;
    prepare_out(out, force)?;
    let manifest = generate_synthetic_corpus(&cfg.corpus, out)?;
    write_echo(&cfg, out)?;
    println!(
        "wrote {} videos ({} normal + {} abnormal) to {}",
        manifest.entries.len(),
        cfg.corpus.n_normal,
        cfg.corpus.n_abnormal,
        out.display()
    );
    if verify {
        let back = load_manifest(out)?;
        let sequences = back.load_sequences(cfg.corpus.frames_per_segment)?;
        for seq in &sequences {
            seq.validate(back.num_categories)?;
        }
        println!("verified {} videos: zero errors", sequences.len());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(mut cfg: RunConfig, corpus_dir: &Path, out: &Path, force: bool) -> CmdResult<()> {
    let manifest = load_manifest(corpus_dir)?;
    adopt_corpus_shape(&mut cfg, &manifest);
    cfg.validate()?;
    prepare_out(out, force)?;
    let sequences = manifest.load_sequences(cfg.corpus.frames_per_segment)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = RefineModel::<f32>::new(&mut rng, cfg.model.clone())?;
    let opt = AdamW::new(
        cfg.train.learning_rate,
        cfg.train.weight_decay,
        Some(cfg.train.clip_norm),
    );
    let result = run_training(model, opt, 0, &cfg.train, &sequences)?;
    for r in &result.history {
        println!(
            "epoch {:>3}/{}: loss {:.4} (mil {:.4} gmm {:.4} cat {:.4})  holdout auc {:.4} ap {:.4}",
            r.epoch, cfg.train.epochs, r.total, r.mil, r.gmm, r.cat, r.auc, r.ap
        );
    }

    result.best.save(&out.join("checkpoint_best.rfvc"))?;
    result.last.save(&out.join("checkpoint_last.rfvc"))?;
    std::fs::write(out.join("history.csv"), history_to_csv(&result.history))?;
    write_echo(&cfg, out)?;

    if result.history.is_empty() {
        println!(
            "wrote initialized checkpoint to {} (no epochs trained)",
            out.display()
        );
        return Ok(());
    }

    let (best_model, _) = result.best.restore::<f32>(&cfg.train)?;
    let report = report_json(&best_model, &sequences, &result.holdout_indices)?;
    std::fs::write(out.join("metrics.json"), &report)?;
    println!(
        "best epoch {} of {}; run directory: {}",
        result.best_epoch,
        cfg.train.epochs,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Refuse a checkpoint whose configuration hash disagrees with what the
/// corpus (and any explicit config) implies, printing both hashes.
fn check_hash(
    ckpt: &Checkpoint,
    manifest: &CorpusManifest,
    cfg: &RunConfig,
    config_given: bool,
) -> CmdResult<()> {
    let expected: ModelConfig = if config_given {
        cfg.model.clone()
    } else {
        let mut m = ckpt.config.clone();
        m.num_categories = manifest.num_categories;
        m.feature_dim = manifest.feature_dim;
        m.segments_per_video = manifest.segments_per_video;
        m
    };
    let expected_hash = config_hash(&expected);
    if expected_hash != ckpt.config_hash {
        return Err(Failure::Usage(format!(
            "checkpoint/config mismatch: checkpoint hash {}, expected hash {}",
            ckpt.config_hash, expected_hash
        )));
    }
    Ok(())
}

fn cmd_eval(
    mut cfg: RunConfig,
    checkpoint: &Path,
    corpus_dir: &Path,
    out: &Path,
    force: bool,
    config_given: bool,
) -> CmdResult<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let manifest = load_manifest(corpus_dir)?;
    check_hash(&ckpt, &manifest, &cfg, config_given)?;
    prepare_out(out, force)?;

    let (model, _) = ckpt.restore::<f32>(&cfg.train)?;
    let sequences = manifest.load_sequences(cfg.corpus.frames_per_segment)?;
    let (_, holdout) = split_holdout(&sequences, cfg.train.holdout_fraction, ckpt.seed);

    cfg.model = ckpt.config.clone();
    adopt_corpus_shape(&mut cfg, &manifest);
    cfg.model = ckpt.config.clone();
    write_echo(&cfg, out)?;

    let report = report_json(&model, &sequences, &holdout)?;
    std::fs::write(out.join("metrics.json"), &report)?;
    let v: serde_json::Value = serde_json::from_str(&report)?;
    println!(
        "auc {} ano_auc {} ap {} map_avg {}",
        v["auc"], v["ano_auc"], v["ap"], v["map_at_iou"]["avg"]
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

fn cmd_score(
    cfg: RunConfig,
    checkpoint: &Path,
    features_path: &Path,
    mask_path: Option<&Path>,
    svg: bool,
    out: &Path,
    force: bool,
) -> CmdResult<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (model, _) = ckpt.restore::<f32>(&cfg.train)?;
    let features = read_feature_file(features_path)?;
    let scored = model.score_sequence(&features)?;
    let t = features.nrows();

    let mask = match mask_path {
        Some(p) => Some(read_mask_file(p)?),
        None => None,
    };
    let fps = match &mask {
        Some(m) if !m.is_empty() && m.len() % t == 0 => m.len() / t,
        Some(m) => {
            return Err(Failure::Usage(format!(
                "mask holds {} frames, not a positive multiple of {t} segments",
                m.len()
            )))
        }
        None => cfg.corpus.frames_per_segment,
    };
    let frame_scores = expand_to_frames(&scored.scores, fps);

    prepare_out(out, force)?;
    let mut csv = String::new();
    match &mask {
        Some(m) => {
            csv.push_str("frame_index,score,gt\n");
            for (i, (s, g)) in frame_scores.iter().zip(m.iter()).enumerate() {
                csv.push_str(&format!("{i},{s},{g}\n"));
            }
        }
        None => {
            csv.push_str("frame_index,score\n");
            for (i, s) in frame_scores.iter().enumerate() {
                csv.push_str(&format!("{i},{s}\n"));
            }
        }
    }
    std::fs::write(out.join("score.csv"), csv)?;
    if svg {
        std::fs::write(
            out.join("score.svg"),
            score_svg(&frame_scores, mask.as_deref()),
        )?;
    }
    write_echo(&cfg, out)?;
    let max = frame_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "scored {} frames (max score {max:.4}) into {}",
        frame_scores.len(),
        out.display()
    );
    Ok(())
}

/// A standalone score-curve plot: ground-truth spans as shaded rectangles
/// with exact integer frame coordinates, the 0.5 decision line, and the
/// per-frame score polyline. Coordinate system: x = frame index, y = 100
/// down to 0 as the score runs 0 to 1.
fn score_svg(frame_scores: &[f64], mask: Option<&[u8]>) -> String {
    let w = frame_scores.len();
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} 100\" \
         preserveAspectRatio=\"none\" width=\"800\" height=\"200\">\n"
    ));
    s.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"100\" fill=\"#ffffff\"/>\n"
    ));
    if let Some(m) = mask {
        for (start, end) in mask_to_spans(m) {
            s.push_str(&format!(
                "  <rect class=\"gt\" x=\"{start}\" y=\"0\" width=\"{}\" height=\"100\" \
                 fill=\"#e74c3c\" fill-opacity=\"0.25\"/>\n",
                end - start
            ));
        }
    }
    s.push_str(&format!(
        "  <line x1=\"0\" y1=\"50\" x2=\"{w}\" y2=\"50\" stroke=\"#888888\" \
         stroke-width=\"0.5\" stroke-dasharray=\"3 2\"/>\n"
    ));
    let points: Vec<String> = frame_scores
        .iter()
        .enumerate()
        .map(|(i, &v)| format!("{i},{:.2}", 100.0 * (1.0 - v)))
        .collect();
    s.push_str(&format!(
        "  <polyline fill=\"none\" stroke=\"#2c3e50\" stroke-width=\"1\" points=\"{}\"/>\n",
        points.join(" ")
    ));
    s.push_str("</svg>\n");
    s
}

// ---------------------------------------------------------------------------
// export-logits
// ---------------------------------------------------------------------------

fn cmd_export_logits(
    mut cfg: RunConfig,
    checkpoint: &Path,
    corpus_dir: &Path,
    out: &Path,
    force: bool,
) -> CmdResult<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let manifest = load_manifest(corpus_dir)?;
    check_hash(&ckpt, &manifest, &cfg, false)?;
    prepare_out(out, force)?;
    let (model, _) = ckpt.restore::<f32>(&cfg.train)?;
    let sequences = manifest.load_sequences(cfg.corpus.frames_per_segment)?;

    let c = manifest.num_categories;
    let mut csv = String::from("video_id,label,category");
    for i in 0..c {
        csv.push_str(&format!(",logit_{i}_normal,logit_{i}_abnormal"));
    }
    csv.push('\n');
    for seq in &sequences {
        let scored = model.score_sequence(&seq.features)?;
        let category = seq
            .category_id
            .map(|c| c.to_string())
            .unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{category}",
            seq.video_id,
            seq.label.as_str()
        ));
        for v in &scored.logits {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    std::fs::write(out.join("logits.csv"), csv)?;
    cfg.model = ckpt.config.clone();
    write_echo(&cfg, out)?;
    println!(
        "exported logits for {} videos to {}",
        sequences.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// metrics report
// ---------------------------------------------------------------------------

fn summary_value(s: &MetricsSummary, held_out: bool, n_videos: usize) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for &(t, ap) in &s.map.per_threshold {
        map.insert(format!("{t:.1}"), serde_json::json!(ap));
    }
    map.insert("avg".into(), serde_json::json!(s.map.avg));
    serde_json::json!({
        "auc": s.auc,
        "ano_auc": s.ano_auc,
        "ap": s.ap,
        "map_at_iou": map,
        "held_out": held_out,
        "num_videos": n_videos,
    })
}

/// The full metrics report: the whole corpus and, when it is well-defined,
/// the held-out split. Headline numbers come from the held-out split when
/// present, otherwise from the full corpus.
fn report_json(
    model: &RefineModel<f32>,
    sequences: &[FeatureSequence],
    holdout: &[usize],
) -> CmdResult<String> {
    let scored = score_corpus(model, sequences)?;
    let full = evaluate(&scored)?;
    let holdout_scored: Vec<ScoredSequence> =
        holdout.iter().map(|&i| scored[i].clone()).collect();
    let holdout_summary = if holdout_scored.is_empty() {
        None
    } else {
        match evaluate(&holdout_scored) {
            Ok(s) => Some(s),
            Err(wvad::Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e.into()),
        }
    };

    let mut splits = serde_json::Map::new();
    splits.insert(
        "full".into(),
        summary_value(&full, false, sequences.len()),
    );
    if let Some(h) = &holdout_summary {
        splits.insert("holdout".into(), summary_value(h, true, holdout.len()));
    }
    let headline = holdout_summary.as_ref().unwrap_or(&full);
    let head_n = if holdout_summary.is_some() {
        holdout.len()
    } else {
        sequences.len()
    };
    let mut doc = summary_value(headline, holdout_summary.is_some(), head_n);
    let obj = doc.as_object_mut().expect("object");
    obj.insert(
        "config_hash".into(),
        serde_json::json!(config_hash(&model.cfg)),
    );
    obj.insert(
        "protocol".into(),
        serde_json::json!({
            "frame_expansion": "repeat-per-segment",
            "proposal_thresholds": PROPOSAL_THRESHOLDS,
            "iou_thresholds": IOU_THRESHOLDS,
            "ap_interpolation": "step",
            "detection_scope": "abnormal-videos",
        }),
    );
    obj.insert("splits".into(), serde_json::Value::Object(splits));
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}
