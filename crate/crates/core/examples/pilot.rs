//! Calibration pilot for the quantitative acceptance thresholds.
//!
//! The end-to-end training, ablation-ordering, and transfer tests assert
//! numeric floors that were fixed by running this script once and freezing
//! what it reported. Keeping it checked in makes the calibration
//! reproducible: `cargo run -p wvad --example pilot [train|ablation|transfer|all]`.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wvad::corpus::{generate_sequences, FeatureSequence, SyntheticSpec};
use wvad::model::{ModelConfig, RefineModel};
use wvad::nn::AdamW;
use wvad::trainer::{run_training, TrainConfig, TrainResult};

fn sequences_for(spec: &SyntheticSpec) -> Vec<FeatureSequence> {
    generate_sequences(spec)
        .expect("valid spec")
        .into_iter()
        .map(|v| v.sequence)
        .collect()
}

fn train(
    spec: &SyntheticSpec,
    cfg: ModelConfig,
    tc: &TrainConfig,
    from: Option<RefineModel<f32>>,
) -> TrainResult {
    let sequences = sequences_for(spec);
    let model = from.unwrap_or_else(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        RefineModel::<f32>::new(&mut rng, cfg).expect("valid model config")
    });
    let opt = AdamW::new(tc.learning_rate, tc.weight_decay, Some(tc.clip_norm));
    run_training(model, opt, 0, tc, &sequences).expect("training run")
}

/// Best held-out frame AUC over the run, with the AP measured at that epoch.
fn best_auc_ap(result: &TrainResult) -> (f64, f64) {
    result
        .history
        .iter()
        .max_by(|a, b| a.auc.total_cmp(&b.auc))
        .map(|r| (r.auc, r.ap))
        .unwrap_or((f64::NAN, f64::NAN))
}

fn pilot_train(weight_decay: Option<f64>, noise: Option<f64>) {
    println!("== end-to-end training pilot (default corpus, default trainer) ==");
    let mut spec = SyntheticSpec::default();
    let mut tc = TrainConfig::default();
    if let Some(wd) = weight_decay {
        tc.weight_decay = wd;
        println!("(weight_decay override: {wd})");
    }
    if let Some(ns) = noise {
        spec.noise_scale = ns;
        println!("(noise_scale override: {ns})");
    }
    let cfg = ModelConfig::for_corpus(
        spec.num_categories,
        spec.feature_dim,
        spec.segments_per_video,
    );
    let start = Instant::now();
    let result = train(&spec, cfg, &tc, None);
    let secs = start.elapsed().as_secs_f64();
    for r in &result.history {
        println!(
            "epoch {:2}  total {:.4}  holdout auc {:.4}  ap {:.4}",
            r.epoch, r.total, r.auc, r.ap
        );
    }
    let (auc, ap) = best_auc_ap(&result);
    println!(
        "train-pilot: best epoch {}  auc {auc:.4}  ap {ap:.4}  wall {secs:.1}s",
        result.best_epoch
    );
}

/// Reduced corpus shared by the ablation and transfer pilots: the default
/// corpus at three-quarters the video count so a dozen runs stay affordable.
/// Anomalies carry their elevated motion in the step-to-step increments of a
/// span-local walk, so a per-row scorer is starved of motion evidence (and
/// the walk's amplitude skews its normalization), while the temporal modules
/// read the increment statistics directly — which is what gives the
/// recalibration and refinement stages room to show up in the ordering.
fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_normal: 150,
        n_abnormal: 150,
        seed,
        ..SyntheticSpec::default()
    }
}

fn small_tc(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 15,
        holdout_fraction: 0.25,
        seed,
        ..TrainConfig::default()
    }
}

fn variant(spec: &SyntheticSpec, motar: bool, injection: bool, soft: bool) -> ModelConfig {
    let mut cfg = ModelConfig::for_corpus(
        spec.num_categories,
        spec.feature_dim,
        spec.segments_per_video,
    );
    cfg.ablation.use_motar = motar;
    cfg.ablation.use_injection = injection;
    cfg.ablation.use_soft_classification = soft;
    cfg
}

fn pilot_ablation() {
    println!("== ablation-ordering pilot (3 seeds x 4 variants) ==");
    let seeds = [7u64, 11, 13];
    // Strongest to weakest; each row drops one more piece.
    let variants: [(&str, bool, bool, bool); 4] = [
        ("full", true, true, true),
        ("no-soft", true, true, false),
        ("no-injection", true, false, true),
        ("no-motar-no-injection", false, false, true),
    ];
    let mut means = Vec::new();
    for (name, motar, injection, soft) in variants {
        let mut aucs = Vec::new();
        for &seed in &seeds {
            let spec = small_spec(seed);
            let result = train(&spec, variant(&spec, motar, injection, soft), &small_tc(seed), None);
            let (auc, _) = best_auc_ap(&result);
            aucs.push(auc);
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        println!(
            "{name:>22}: per-seed {:?}  mean {mean:.4}",
            aucs.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
        means.push((name, mean));
    }
    for pair in means.windows(2) {
        let (ref hi, ref lo) = (pair[0], pair[1]);
        println!(
            "gap {} -> {}: {:+.4}",
            hi.0,
            lo.0,
            hi.1 - lo.1
        );
    }
}

/// Single-run probe over the reduced corpus with gains taken from the
/// command line, so sweeping the difficulty landscape needs no recompiles:
/// `pilot probe <signal> <motion> <noise> <epochs> [full|simple]`.
#[allow(clippy::too_many_arguments)]
fn pilot_probe(
    signal: f64,
    motion: f64,
    noise: f64,
    epochs: usize,
    which: &str,
    n: usize,
    dropout: f64,
    wd: f64,
    c: usize,
    d: usize,
    span: (usize, usize),
) {
    println!(
        "== probe: signal {signal} motion {motion} noise {noise} epochs {epochs} \
         variant {which} n {n} dropout {dropout} wd {wd} c {c} d {d} span {span:?} =="
    );
    let mut spec = small_spec(7);
    spec.num_categories = c;
    spec.feature_dim = d;
    spec.anomaly_span = span;
    spec.signal_gain = signal;
    spec.motion_gain = motion;
    spec.noise_scale = noise;
    spec.n_normal = n;
    spec.n_abnormal = n;
    let mut tc = small_tc(7);
    tc.epochs = epochs;
    tc.weight_decay = wd;
    let mut cfg = match which {
        "simple" => variant(&spec, false, false, true),
        "no-soft" => variant(&spec, true, true, false),
        "no-inj" => variant(&spec, true, false, true),
        _ => variant(&spec, true, true, true),
    };
    cfg.motar.dropout = dropout;
    let result = train(&spec, cfg, &tc, None);
    for r in &result.history {
        println!(
            "epoch {:2}  mil {:.4}  total {:.4}  holdout auc {:.4}  ap {:.4}",
            r.epoch, r.mil, r.total, r.auc, r.ap
        );
    }
    let (auc, ap) = best_auc_ap(&result);
    println!("probe: best epoch {}  auc {auc:.4}  ap {ap:.4}", result.best_epoch);
}

fn pilot_transfer() {
    println!("== transfer pilot (freeze classifier + prototypes, corpus A -> B) ==");
    let spec_a = small_spec(7);
    let spec_b = small_spec(11);
    let cfg = ModelConfig::for_corpus(
        spec_a.num_categories,
        spec_a.feature_dim,
        spec_a.segments_per_video,
    );

    let full_b = train(&spec_b, cfg.clone(), &small_tc(11), None);
    let (full_auc, _) = best_auc_ap(&full_b);
    println!("full training on B:     auc {full_auc:.4}");

    let on_a = train(&spec_a, cfg, &small_tc(7), None);
    let (carried, _) = on_a.best.restore::<f32>(&small_tc(7)).unwrap();
    let mut tc_b = small_tc(11);
    tc_b.freeze = vec!["core.classifier".into(), "core.prototypes".into()];
    let transfer = train(&spec_b, carried.cfg.clone(), &tc_b, Some(carried));
    let (transfer_auc, _) = best_auc_ap(&transfer);
    println!("frozen transfer A -> B: auc {transfer_auc:.4}");
    println!(
        "transfer-pilot: |full - transfer| = {:.4}",
        (full_auc - transfer_auc).abs()
    );
}

fn main() {
    let phase = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    let wd = std::env::args().nth(2).and_then(|s| s.parse().ok());
    let noise = std::env::args().nth(3).and_then(|s| s.parse().ok());
    let t0 = Instant::now();
    match phase.as_str() {
        "train" => pilot_train(wd, noise),
        "probe" => {
            let arg = |i: usize| std::env::args().nth(i);
            let f = |i: usize, d: f64| arg(i).and_then(|s| s.parse().ok()).unwrap_or(d);
            let epochs = arg(5).and_then(|s| s.parse().ok()).unwrap_or(25);
            let which = arg(6).unwrap_or_else(|| "full".into());
            let n = arg(7).and_then(|s| s.parse().ok()).unwrap_or(100);
            pilot_probe(
                f(2, 1.2),
                f(3, 0.2),
                f(4, 0.6),
                epochs,
                &which,
                n,
                f(8, 0.1),
                f(9, 1e-4),
                arg(10).and_then(|s| s.parse().ok()).unwrap_or(4),
                arg(11).and_then(|s| s.parse().ok()).unwrap_or(64),
                (
                    arg(12).and_then(|s| s.parse().ok()).unwrap_or(6),
                    arg(13).and_then(|s| s.parse().ok()).unwrap_or(12),
                ),
            );
        }
        "ablation" => pilot_ablation(),
        "transfer" => pilot_transfer(),
        "all" => {
            pilot_train(wd, noise);
            pilot_ablation();
            pilot_transfer();
        }
        other => {
            eprintln!("unknown phase `{other}` (expected train|ablation|transfer|all)");
            std::process::exit(1);
        }
    }
    println!("pilot finished in {:.1}s", t0.elapsed().as_secs_f64());
}
