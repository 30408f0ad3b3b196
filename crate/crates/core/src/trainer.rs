//! Training loop: balanced batching, the three-part objective, optimizer
//! steps, per-epoch held-out evaluation, and self-describing checkpoints.
//!
//! Every mini-batch is half normal, half abnormal; ranking pairs are formed
//! position-wise across the two halves. The smoothing term averages over the
//! abnormal half, the category term over the whole batch. All randomness —
//! split, shuffles, dropout — derives from one base seed plus epoch/batch
//! counters, so an interrupted run resumed from a checkpoint continues
//! exactly as an uninterrupted one.

use crate::autodiff::{Element, Graph, Mode, Var};
use crate::corpus::{FeatureSequence, Label};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, score_corpus};
use crate::model::{ModelConfig, RefineModel};
use crate::nn::{AdamW, Binder, BnStats};
use crate::objectives::{
    category_loss, fit_score_gmm, gmm_smoothing_loss, mil_ranking_loss, total_loss,
};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

/// Optimization schedule. Model shape and loss weights live in
/// [`ModelConfig`]; this covers everything else about a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Total videos per step; half normal, half abnormal.
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Fraction of videos held out for per-epoch evaluation, stratified by
    /// label and category.
    pub holdout_fraction: f64,
    pub seed: u64,
    /// Parameter-name prefixes excluded from optimization (their tensors
    /// keep the values they were loaded with). Used for transfer runs that
    /// carry a trained classifier and prototype bank onto a new corpus.
    #[serde(default)]
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 3e-3,
            batch_size: 64,
            weight_decay: 1e-4,
            clip_norm: 5.0,
            holdout_fraction: 0.2,
            seed: 7,
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch size must be even and at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout fraction must be in [0, 1), got {}",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

/// Derive an independent stream seed from the base seed and counters.
fn stream_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&base.to_le_bytes());
    key[8..16].copy_from_slice(&a.to_le_bytes());
    key[16..24].copy_from_slice(&b.to_le_bytes());
    key[24..28].copy_from_slice(b"RFVC");
    ChaCha8Rng::from_seed(key).gen()
}

// ---------------------------------------------------------------------------
// Split and batching
// ---------------------------------------------------------------------------

/// Deterministic stratified split: within each (label, category) group a
/// fixed fraction is held out. Returns `(train, holdout)` index sets in
/// ascending order.
pub fn split_holdout(
    sequences: &[FeatureSequence],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(u8, Option<usize>), Vec<usize>> = BTreeMap::new();
    for (i, s) in sequences.iter().enumerate() {
        let key = (u8::from(s.label == Label::Abnormal), s.category_id);
        groups.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0x57, 0));
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for (_, mut members) in groups {
        members.shuffle(&mut rng);
        let n_hold = ((members.len() as f64 * fraction).round() as usize).min(members.len() - 1);
        holdout.extend_from_slice(&members[..n_hold]);
        train.extend_from_slice(&members[n_hold..]);
    }
    train.sort_unstable();
    holdout.sort_unstable();
    (train, holdout)
}

/// One balanced mini-batch: indices into the caller's sequence slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub normal: Vec<usize>,
    pub abnormal: Vec<usize>,
}

/// Build one epoch of balanced batches over `indices`. Each class is drawn
/// without replacement until exhausted, then reshuffled; the epoch covers
/// `ceil(larger_class / (batch_size / 2))` batches, each exactly half
/// normal, half abnormal. Deterministic given `epoch_seed`.
pub fn make_batches(
    sequences: &[FeatureSequence],
    indices: &[usize],
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "batch size must be even and at least 2, got {batch_size}"
        )));
    }
    let mut normal: Vec<usize> = Vec::new();
    let mut abnormal: Vec<usize> = Vec::new();
    for &i in indices {
        match sequences[i].label {
            Label::Normal => normal.push(i),
            Label::Abnormal => abnormal.push(i),
        }
    }
    if normal.is_empty() || abnormal.is_empty() {
        return Err(Error::Corpus(format!(
            "balanced batching needs both classes, got {} normal / {} abnormal",
            normal.len(),
            abnormal.len()
        )));
    }
    let half = batch_size / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    normal.shuffle(&mut rng);
    abnormal.shuffle(&mut rng);
    let n_batches = normal.len().max(abnormal.len()).div_ceil(half);
    let mut cursors = (0usize, 0usize);
    let draw = |pool: &mut Vec<usize>, cursor: &mut usize, rng: &mut ChaCha8Rng| -> usize {
        if *cursor == pool.len() {
            pool.shuffle(rng);
            *cursor = 0;
        }
        let v = pool[*cursor];
        *cursor += 1;
        v
    };
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut b = Batch {
            normal: Vec::with_capacity(half),
            abnormal: Vec::with_capacity(half),
        };
        for _ in 0..half {
            b.normal.push(draw(&mut normal, &mut cursors.0, &mut rng));
            b.abnormal
                .push(draw(&mut abnormal, &mut cursors.1, &mut rng));
        }
        batches.push(b);
    }
    Ok(batches)
}

// ---------------------------------------------------------------------------
// One optimization step
// ---------------------------------------------------------------------------

/// The scalar terms of one step or one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub mil: f64,
    pub gmm: f64,
    pub cat: f64,
    pub total: f64,
}

fn mean_var<F: Element>(g: &mut Graph<F>, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.affine(acc, F::lit(1.0 / terms.len() as f64), F::zero())
}

fn scalar_value<F: Element>(g: &Graph<F>, v: Var) -> f64 {
    g.value(v)[(0, 0)].as_f64()
}

fn ensure_finite(term: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { term, value })
    }
}

/// Run one balanced batch through the pipeline and apply one optimizer
/// update. Ranking pairs are position-wise across the halves; the smoothing
/// term averages over abnormal videos, the category term over all videos.
pub fn train_step<F: Element>(
    model: &mut RefineModel<F>,
    opt: &mut AdamW<F>,
    sequences: &[FeatureSequence],
    batch: &Batch,
    step_seed: u64,
    freeze: &[String],
) -> Result<LossReport> {
    if batch.normal.len() != batch.abnormal.len() || batch.normal.is_empty() {
        return Err(Error::Config(format!(
            "batch must pair equal non-empty halves, got {} normal / {} abnormal",
            batch.normal.len(),
            batch.abnormal.len()
        )));
    }
    let cfg = model.cfg.clone();
    let weights = vec![1.0; cfg.num_categories];

    let mut g = Graph::<F>::with_seed(Mode::Train, step_seed);
    let mut binder = Binder::new(&mut g);
    let vars = model.bind(&mut binder);
    let index = binder.into_index();
    let mut stats = Vec::new();

    let forward_one =
        |g: &mut Graph<F>, idx: usize, stats: &mut Vec<BnStats>| -> Result<(Var, Var, f64)> {
            let seq = &sequences[idx];
            let x = g.constant(seq.features.mapv(|v| F::lit(v as f64)));
            let label = match seq.label {
                Label::Abnormal => seq.category_id,
                Label::Normal => None,
            };
            let fwd = vars.forward(g, x, label, stats)?;
            Ok((fwd.core.scores, fwd.core.logits, fwd.mu_hi))
        };

    let mut mil_terms = Vec::with_capacity(batch.normal.len());
    let mut gmm_terms = Vec::with_capacity(batch.abnormal.len());
    let mut cat_terms = Vec::with_capacity(batch.normal.len() * 2);

    for (&ni, &ai) in batch.normal.iter().zip(batch.abnormal.iter()) {
        let (nor_scores, nor_logits, _) = forward_one(&mut g, ni, &mut stats)?;
        let (abn_scores, abn_logits, abn_mu) = forward_one(&mut g, ai, &mut stats)?;

        mil_terms.push(mil_ranking_loss(&mut g, abn_scores, nor_scores, cfg.topk)?);

        let score_vals: Vec<f64> = g.value(abn_scores).iter().map(|v| v.as_f64()).collect();
        let fit = fit_score_gmm(&score_vals, abn_mu, cfg.em_iters)?;
        gmm_terms.push(gmm_smoothing_loss(&mut g, abn_scores, &fit.gamma)?);

        for &(idx, var) in &[(ni, nor_logits), (ai, abn_logits)] {
            let seq = &sequences[idx];
            cat_terms.push(category_loss(
                &mut g,
                var,
                seq.label,
                seq.category_id,
                &weights,
            )?);
        }
    }

    let l_mil = mean_var(&mut g, &mil_terms);
    let l_gmm = mean_var(&mut g, &gmm_terms);
    let l_cat = mean_var(&mut g, &cat_terms);
    let l_total = total_loss(&mut g, l_mil, l_gmm, l_cat, cfg.loss);

    let report = LossReport {
        mil: ensure_finite("mil", scalar_value(&g, l_mil))?,
        gmm: ensure_finite("gmm", scalar_value(&g, l_gmm))?,
        cat: ensure_finite("cat", scalar_value(&g, l_cat))?,
        total: ensure_finite("total", scalar_value(&g, l_total))?,
    };

    let grads = g.backward(l_total);
    let trainable: Vec<(String, &mut Array2<F>)> = model
        .params_mut()
        .into_iter()
        .filter(|(name, _)| !freeze.iter().any(|p| name.starts_with(p.as_str())))
        .collect();
    opt.step(trainable, |name| index.grad(&grads, name));
    model.absorb(&stats);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: [u8; 4] = *b"RFVC";
const CHECKPOINT_VERSION: u16 = 1;

/// Hex SHA-256 of the canonical (JSON) form of a model configuration.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// A self-describing training snapshot: the model configuration and its
/// hash, every parameter and normalization buffer as a named f32 tensor,
/// optimizer moments, and the training position (epoch, seed).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub config_hash: String,
    /// Epochs completed when the snapshot was taken.
    pub epoch: usize,
    pub seed: u64,
    pub tensors: Vec<(String, Array2<f32>)>,
    pub opt_steps: u64,
    pub opt_state: Vec<(String, Array2<f32>, Array2<f32>)>,
}

fn to_f32<F: Element>(a: &Array2<F>) -> Array2<f32> {
    a.mapv(|v| v.as_f64() as f32)
}

fn from_f32<F: Element>(a: &Array2<f32>) -> Array2<F> {
    a.mapv(|v| F::lit(v as f64))
}

impl Checkpoint {
    /// Snapshot a model and optimizer.
    pub fn capture<F: Element>(
        model: &RefineModel<F>,
        opt: &AdamW<F>,
        epoch: usize,
        seed: u64,
    ) -> Checkpoint {
        let mut tensors: Vec<(String, Array2<f32>)> = model
            .params()
            .into_iter()
            .chain(model.buffers())
            .map(|(n, a)| (n, to_f32(a)))
            .collect();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        let opt_state = opt
            .export_state()
            .into_iter()
            .map(|(n, m, v)| (n, to_f32(&m), to_f32(&v)))
            .collect();
        Checkpoint {
            config: model.cfg.clone(),
            config_hash: config_hash(&model.cfg),
            epoch,
            seed,
            tensors,
            opt_steps: opt.steps_taken(),
            opt_state,
        }
    }

    /// Rebuild the model and optimizer exactly as captured. The tensor set
    /// must cover the model's parameters and buffers exactly.
    pub fn restore<F: Element>(&self, tc: &TrainConfig) -> Result<(RefineModel<F>, AdamW<F>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = RefineModel::<F>::new(&mut rng, self.config.clone())?;
        let stored: std::collections::HashMap<&str, &Array2<f32>> = self
            .tensors
            .iter()
            .map(|(n, a)| (n.as_str(), a))
            .collect();
        let mut expected = 0usize;
        let fill = |slots: Vec<(String, &mut Array2<F>)>| -> Result<usize> {
            let mut count = 0usize;
            for (name, tensor) in slots {
                count += 1;
                let src = stored
                    .get(name.as_str())
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
                if src.dim() != tensor.dim() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        src.dim(),
                        tensor.dim()
                    )));
                }
                *tensor = from_f32(src);
            }
            Ok(count)
        };
        expected += fill(model.params_mut())?;
        expected += fill(model.buffers_mut())?;
        if expected != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model declares {expected}",
                self.tensors.len()
            )));
        }
        let mut opt = AdamW::<F>::new(tc.learning_rate, tc.weight_decay, Some(tc.clip_norm));
        opt.import_state(
            self.opt_steps,
            self.opt_state
                .iter()
                .map(|(n, m, v)| (n.clone(), from_f32::<F>(m), from_f32::<F>(v)))
                .collect(),
        );
        Ok((model, opt))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let put_u32 = |w: &mut dyn Write, v: u32| w.write_all(&v.to_le_bytes());
        let put_str = |w: &mut dyn Write, s: &str| -> std::io::Result<()> {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())
        };
        let put_tensor = |w: &mut dyn Write, a: &Array2<f32>| -> std::io::Result<()> {
            w.write_all(&(a.nrows() as u32).to_le_bytes())?;
            w.write_all(&(a.ncols() as u32).to_le_bytes())?;
            for &v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        put_str(w, &serde_json::to_string(&self.config)?)?;
        put_str(w, &self.config_hash)?;
        put_u32(w, self.epoch as u32)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.opt_steps.to_le_bytes())?;
        put_u32(w, self.tensors.len() as u32)?;
        for (name, a) in &self.tensors {
            put_str(w, name)?;
            put_tensor(w, a)?;
        }
        put_u32(w, self.opt_state.len() as u32)?;
        for (name, m, v) in &self.opt_state {
            put_str(w, name)?;
            put_tensor(w, m)?;
            put_tensor(w, v)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Checkpoint> {
        fn get_u32(r: &mut impl Read) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn get_u64(r: &mut impl Read) -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        fn get_str(r: &mut impl Read) -> Result<String> {
            let len = get_u32(r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            String::from_utf8(buf)
                .map_err(|_| Error::Checkpoint("non-UTF-8 string field".into()))
        }
        fn get_tensor(r: &mut impl Read) -> Result<Array2<f32>> {
            let rows = get_u32(r)? as usize;
            let cols = get_u32(r)? as usize;
            let mut data = vec![0f32; rows * cols];
            for v in data.iter_mut() {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                *v = f32::from_le_bytes(b);
            }
            Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))
        }

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let mut ver = [0u8; 2];
        r.read_exact(&mut ver)?;
        let version = u16::from_le_bytes(ver);
        if version != CHECKPOINT_VERSION {
            return Err(Error::BadVersion(version));
        }
        let config: ModelConfig = serde_json::from_str(&get_str(r)?)?;
        let stored_hash = get_str(r)?;
        let fresh_hash = config_hash(&config);
        if stored_hash != fresh_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: stored {stored_hash}, recomputed {fresh_hash}"
            )));
        }
        let epoch = get_u32(r)? as usize;
        let seed = get_u64(r)?;
        let opt_steps = get_u64(r)?;
        let n_tensors = get_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = get_str(r)?;
            tensors.push((name, get_tensor(r)?));
        }
        let n_opt = get_u32(r)? as usize;
        let mut opt_state = Vec::with_capacity(n_opt);
        for _ in 0..n_opt {
            let name = get_str(r)?;
            let m = get_tensor(r)?;
            let v = get_tensor(r)?;
            opt_state.push((name, m, v));
        }
        Ok(Checkpoint {
            config,
            config_hash: stored_hash,
            epoch,
            seed,
            tensors,
            opt_steps,
            opt_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Checkpoint::read_from(&mut f)
    }
}

// ---------------------------------------------------------------------------
// The epoch loop
// ---------------------------------------------------------------------------

/// One epoch's mean losses and held-out metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mil: f64,
    pub gmm: f64,
    pub cat: f64,
    pub total: f64,
    pub auc: f64,
    pub ap: f64,
}

/// Everything a finished (or zero-epoch) run produces.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub history: Vec<EpochRecord>,
    pub best: Checkpoint,
    pub last: Checkpoint,
    /// Epoch of the best snapshot (0 = initialization).
    pub best_epoch: usize,
    pub train_indices: Vec<usize>,
    pub holdout_indices: Vec<usize>,
}

/// Serialize epoch records as CSV with a header row.
pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss_mil,loss_gmm,loss_cat,loss_total,auc,ap\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.mil, r.gmm, r.cat, r.total, r.auc, r.ap
        ));
    }
    out
}

/// Train from the model's current state through `tc.epochs`, evaluating on
/// the held-out split after every epoch and retaining the best-AUC snapshot.
///
/// `start_epoch` is the number of epochs already completed (0 for a fresh
/// model, or the epoch stored in a restored checkpoint); training resumes
/// there, so a restored run continues identically to an uninterrupted one.
pub fn run_training<F: Element>(
    mut model: RefineModel<F>,
    mut opt: AdamW<F>,
    start_epoch: usize,
    tc: &TrainConfig,
    sequences: &[FeatureSequence],
) -> Result<TrainResult> {
    tc.validate()?;
    model.cfg.validate()?;
    let (train_indices, holdout_indices) =
        split_holdout(sequences, tc.holdout_fraction, tc.seed);

    let mut best = Checkpoint::capture(&model, &opt, start_epoch, tc.seed);
    let mut best_auc = f64::NEG_INFINITY;
    let mut best_epoch = start_epoch;
    let mut history = Vec::new();

    for epoch in start_epoch..tc.epochs {
        let epoch_seed = stream_seed(tc.seed, epoch as u64 + 1, 0xE);
        let batches = make_batches(sequences, &train_indices, tc.batch_size, epoch_seed)?;
        let mut sums = LossReport {
            mil: 0.0,
            gmm: 0.0,
            cat: 0.0,
            total: 0.0,
        };
        for (bi, batch) in batches.iter().enumerate() {
            let step_seed = stream_seed(epoch_seed, bi as u64 + 1, 0x5);
            let r = train_step(&mut model, &mut opt, sequences, batch, step_seed, &tc.freeze)?;
            sums.mil += r.mil;
            sums.gmm += r.gmm;
            sums.cat += r.cat;
            sums.total += r.total;
        }
        let n = batches.len() as f64;

        let held: Vec<FeatureSequence> = holdout_indices
            .iter()
            .map(|&i| sequences[i].clone())
            .collect();
        let summary = evaluate(&score_corpus(&model, &held)?)?;

        let record = EpochRecord {
            epoch: epoch + 1,
            mil: sums.mil / n,
            gmm: sums.gmm / n,
            cat: sums.cat / n,
            total: sums.total / n,
            auc: summary.auc,
            ap: summary.ap,
        };
        history.push(record);

        if summary.auc > best_auc {
            best_auc = summary.auc;
            best_epoch = epoch + 1;
            best = Checkpoint::capture(&model, &opt, epoch + 1, tc.seed);
        }
    }

    let last = Checkpoint::capture(&model, &opt, tc.epochs.max(start_epoch), tc.seed);
    Ok(TrainResult {
        history,
        best,
        last,
        best_epoch,
        train_indices,
        holdout_indices,
    })
}
