//! Category-oriented refinement.
//!
//! Stage two of the pipeline. A shared MLP scorer produces rough per-segment
//! anomaly scores; attention pooling over those scores summarizes the video;
//! a classifier head turns the summary into per-category normal/abnormal
//! logit pairs; the predicted category distribution gates a bank of learned
//! category prototypes into a single soft embedding; and that embedding is
//! injected back into every segment through multi-head cross-attention with a
//! gated feed-forward fusion. The refined sequence is then re-scored by the
//! *same* scorer object — rough and final scores share every parameter.
//!
//! During training on an abnormal video the ground-truth category's prototype
//! is added on top of the soft embedding. Supplying a label at evaluation
//! time is a leakage bug and is rejected loudly.

use crate::autodiff::{Element, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::nn::{gaussian, BatchNorm1d, BatchNorm1dVars, Binder, BnStats, Linear, LinearVars};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Knobs for the refinement stage.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CoreConfig {
    /// Widths of the scorer's two hidden layers.
    pub scorer_hidden: (usize, usize),
    pub scorer_dropout: f64,
    /// Gate threshold tau on the per-category abnormal probability.
    pub tau: f64,
    /// Heads for the prototype cross-attention; must divide the feature dim.
    pub inject_heads: usize,
    /// Hidden width of the fusion feed-forward, as a multiple of D.
    pub fusion_mult: usize,
}

impl Default for CoreConfig {
    fn default() -> Self {
        CoreConfig {
            scorer_hidden: (512, 128),
            scorer_dropout: 0.3,
            tau: 0.5,
            inject_heads: 4,
            fusion_mult: 2,
        }
    }
}

// ---------------------------------------------------------------------------
// Scorer
// ---------------------------------------------------------------------------

/// Segment scorer: D -> h1 -> BN -> ReLU -> dropout -> h2 -> BN -> ReLU ->
/// dropout -> 1 -> sigmoid. One instance scores both the recalibrated and the
/// refined sequence.
#[derive(Debug, Clone)]
pub struct Scorer<F> {
    pub l1: Linear<F>,
    pub bn1: BatchNorm1d<F>,
    pub l2: Linear<F>,
    pub bn2: BatchNorm1d<F>,
    pub l3: Linear<F>,
    pub dropout: f64,
}

pub struct ScorerVars {
    pub l1: LinearVars,
    pub bn1: BatchNorm1dVars,
    pub l2: LinearVars,
    pub bn2: BatchNorm1dVars,
    pub l3: LinearVars,
    pub dropout: f64,
    prefix: String,
}

impl<F: Element> Scorer<F> {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, hidden: (usize, usize), dropout: f64) -> Self {
        Scorer {
            l1: Linear::new(rng, d, hidden.0),
            bn1: BatchNorm1d::new(hidden.0),
            l2: Linear::new(rng, hidden.0, hidden.1),
            bn2: BatchNorm1d::new(hidden.1),
            l3: Linear::new(rng, hidden.1, 1),
            dropout,
        }
    }

    pub fn bind(&self, b: &mut Binder<'_, F>, prefix: &str) -> ScorerVars {
        ScorerVars {
            l1: self.l1.bind(b, &format!("{prefix}.l1")),
            bn1: self.bn1.bind(b, &format!("{prefix}.bn1")),
            l2: self.l2.bind(b, &format!("{prefix}.l2")),
            bn2: self.bn2.bind(b, &format!("{prefix}.bn2")),
            l3: self.l3.bind(b, &format!("{prefix}.l3")),
            dropout: self.dropout,
            prefix: prefix.to_string(),
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Array2<F>)> {
        let mut p = self.l1.params(&format!("{prefix}.l1"));
        p.extend(self.bn1.params(&format!("{prefix}.bn1")));
        p.extend(self.l2.params(&format!("{prefix}.l2")));
        p.extend(self.bn2.params(&format!("{prefix}.bn2")));
        p.extend(self.l3.params(&format!("{prefix}.l3")));
        p
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<F>)> {
        let mut p = self.l1.params_mut(&format!("{prefix}.l1"));
        p.extend(self.bn1.params_mut(&format!("{prefix}.bn1")));
        p.extend(self.l2.params_mut(&format!("{prefix}.l2")));
        p.extend(self.bn2.params_mut(&format!("{prefix}.bn2")));
        p.extend(self.l3.params_mut(&format!("{prefix}.l3")));
        p
    }

    pub fn buffers(&self, prefix: &str) -> Vec<(String, &Array2<F>)> {
        let mut p = self.bn1.buffers(&format!("{prefix}.bn1"));
        p.extend(self.bn2.buffers(&format!("{prefix}.bn2")));
        p
    }

    pub fn buffers_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<F>)> {
        let mut p = self.bn1.buffers_mut(&format!("{prefix}.bn1"));
        p.extend(self.bn2.buffers_mut(&format!("{prefix}.bn2")));
        p
    }

    /// Fold freshly observed batch statistics back into the running buffers.
    pub fn absorb(&mut self, prefix: &str, stats: &[BnStats]) {
        for s in stats {
            if s.name == format!("{prefix}.bn1") {
                self.bn1.absorb(s);
            } else if s.name == format!("{prefix}.bn2") {
                self.bn2.absorb(s);
            }
        }
    }
}

impl ScorerVars {
    /// `x` is `T x D`; returns `T x 1` scores in (0, 1).
    pub fn forward<F: Element>(
        &self,
        g: &mut Graph<F>,
        x: Var,
        stats_out: &mut Vec<BnStats>,
    ) -> Var {
        let h = self.l1.forward(g, x);
        let h = self.bn1.forward(g, h, &format!("{}.bn1", self.prefix), stats_out);
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        let h = self.l2.forward(g, h);
        let h = self.bn2.forward(g, h, &format!("{}.bn2", self.prefix), stats_out);
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        let z = self.l3.forward(g, h);
        g.sigmoid(z)
    }
}

// ---------------------------------------------------------------------------
// Pooling, classification, gating
// ---------------------------------------------------------------------------

/// Score-attention pooling: `pooled = sum_t softmax(scores)_t * x_t`.
/// Returns the pooled `1 x D` summary and the `1 x T` attention weights.
pub fn attention_pool<F: Element>(g: &mut Graph<F>, scores: Var, x: Var) -> (Var, Var) {
    let st = g.transpose(scores); // 1 x T
    let alpha = g.softmax_rows(st);
    let pooled = g.matmul(alpha, x); // 1 x D
    (pooled, alpha)
}

/// Per-category abnormal probabilities from a `C x 2` logit matrix whose rows
/// are `[z_c_normal, z_c_abnormal]`: a two-way softmax per row, abnormal
/// column. Max subtraction keeps extreme logits exact (abnormal logit 1000
/// yields exactly 1.0).
pub fn category_probabilities<F: Element>(g: &mut Graph<F>, logits_c2: Var) -> Var {
    let p = g.softmax_rows(logits_c2);
    g.slice_cols(p, 1, 2) // C x 1
}

/// How the category weights were produced; returned for inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GateBranch {
    /// No category cleared tau: uniform weights.
    Uniform,
    /// Softmax over all abnormal logits.
    Soft,
    /// Hard one-hot argmax (soft classification disabled).
    Hard(usize),
}

/// Category gate. `logits_c2` is `C x 2`; returns `1 x C` weights, the
/// abnormal probabilities as plain values, and which branch fired.
///
/// With soft classification: categories whose abnormal probability clears
/// `tau` select the soft branch, where weights are a softmax over *all* C
/// abnormal logits; if none clears it, weights fall back to uniform 1/C.
/// With soft classification off, the weight is a one-hot on the argmax
/// probability (ties to the lowest index).
pub fn gate_weights<F: Element>(
    g: &mut Graph<F>,
    logits_c2: Var,
    tau: f64,
    soft: bool,
) -> (Var, Vec<f64>, GateBranch) {
    let c = g.value(logits_c2).dim().0;
    let p_a_var = category_probabilities(g, logits_c2);
    let p_a: Vec<f64> = g.value(p_a_var).iter().map(|v| v.as_f64()).collect();
    if !soft {
        let mut best = 0;
        for (i, &p) in p_a.iter().enumerate() {
            if p > p_a[best] {
                best = i;
            }
        }
        let mut w = Array2::<F>::zeros((1, c));
        w[(0, best)] = F::one();
        return (g.constant(w), p_a, GateBranch::Hard(best));
    }
    if p_a.iter().any(|&p| p >= tau) {
        let z_a = g.slice_cols(logits_c2, 1, 2); // C x 1
        let z_at = g.transpose(z_a); // 1 x C
        let w = g.softmax_rows(z_at);
        (w, p_a, GateBranch::Soft)
    } else {
        let w = Array2::<F>::from_elem((1, c), F::lit(1.0 / c as f64));
        (g.constant(w), p_a, GateBranch::Uniform)
    }
}

// ---------------------------------------------------------------------------
// Prototype bank and injection
// ---------------------------------------------------------------------------

/// Learned per-category prototype embeddings, `C x d_emb`.
#[derive(Debug, Clone)]
pub struct PrototypeBank<F> {
    pub e: Array2<F>,
}

pub struct PrototypeBankVars {
    pub e: Var,
}

impl<F: Element> PrototypeBank<F> {
    pub fn new(rng: &mut ChaCha8Rng, c: usize, d_emb: usize) -> Self {
        PrototypeBank {
            e: gaussian(rng, c, d_emb, 1.0 / (d_emb as f64).sqrt()),
        }
    }

    pub fn bind(&self, b: &mut Binder<'_, F>, prefix: &str) -> PrototypeBankVars {
        PrototypeBankVars {
            e: b.param(format!("{prefix}.e"), &self.e),
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Array2<F>)> {
        vec![(format!("{prefix}.e"), &self.e)]
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<F>)> {
        vec![(format!("{prefix}.e"), &mut self.e)]
    }
}

/// Weighted prototype mixture `v = w . E`, `1 x d_emb`.
///
/// During training on an abnormal video, pass the ground-truth category as
/// `train_label` to add its prototype on top (a one-hot weight on category c
/// plus label c yields exactly `2 e_c`). Passing a label outside training is
/// label leakage and returns an error.
pub fn soft_embedding<F: Element>(
    g: &mut Graph<F>,
    bank: &PrototypeBankVars,
    w: Var,
    train_label: Option<usize>,
) -> Result<Var> {
    let v = g.matmul(w, bank.e);
    match train_label {
        None => Ok(v),
        Some(c) => {
            if g.mode() == Mode::Eval {
                return Err(Error::LabelLeakage);
            }
            let rows = g.value(bank.e).dim().0;
            if c >= rows {
                return Err(Error::Shape(format!(
                    "label {c} out of range for {rows} prototypes"
                )));
            }
            let ec = g.slice_rows(bank.e, c, c + 1);
            Ok(g.add(v, ec))
        }
    }
}

/// Cross-attention injection of a category embedding into every segment.
#[derive(Debug, Clone)]
pub struct Injector<F> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub gate: Linear<F>,
    /// Fusion feed-forward weights; bias-free so that a zero output
    /// projection makes the whole injection an exact identity.
    pub ffn1: Array2<F>,
    pub ffn2: Array2<F>,
    pub num_heads: usize,
}

pub struct InjectorVars {
    pub wq: LinearVars,
    pub wk: LinearVars,
    pub wv: LinearVars,
    pub wo: LinearVars,
    pub gate: LinearVars,
    pub ffn1: Var,
    pub ffn2: Var,
    pub num_heads: usize,
}

impl<F: Element> Injector<F> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        d: usize,
        d_emb: usize,
        num_heads: usize,
        fusion_mult: usize,
    ) -> Result<Self> {
        if num_heads == 0 || d % num_heads != 0 {
            return Err(Error::Config(format!(
                "inject_heads {num_heads} must divide feature dim {d}"
            )));
        }
        if fusion_mult == 0 {
            return Err(Error::Config("fusion_mult must be >= 1".into()));
        }
        let h = d * fusion_mult;
        Ok(Injector {
            wq: Linear::new(rng, d_emb, d),
            wk: Linear::new(rng, d, d),
            wv: Linear::new(rng, d, d),
            wo: Linear::new(rng, d, d),
            gate: Linear::new(rng, d, d),
            ffn1: crate::nn::xavier_uniform(rng, d, h),
            // Zero output projection: injection starts as the identity and
            // ramps in as the fusion layer learns, so early training matches
            // the un-injected model instead of feeding the scorer noise.
            ffn2: Array2::zeros((h, d)),
            num_heads,
        })
    }

    pub fn bind(&self, b: &mut Binder<'_, F>, prefix: &str) -> InjectorVars {
        InjectorVars {
            wq: self.wq.bind(b, &format!("{prefix}.wq")),
            wk: self.wk.bind(b, &format!("{prefix}.wk")),
            wv: self.wv.bind(b, &format!("{prefix}.wv")),
            wo: self.wo.bind(b, &format!("{prefix}.wo")),
            gate: self.gate.bind(b, &format!("{prefix}.gate")),
            ffn1: b.param(format!("{prefix}.ffn1"), &self.ffn1),
            ffn2: b.param(format!("{prefix}.ffn2"), &self.ffn2),
            num_heads: self.num_heads,
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Array2<F>)> {
        let mut p = self.wq.params(&format!("{prefix}.wq"));
        p.extend(self.wk.params(&format!("{prefix}.wk")));
        p.extend(self.wv.params(&format!("{prefix}.wv")));
        p.extend(self.wo.params(&format!("{prefix}.wo")));
        p.extend(self.gate.params(&format!("{prefix}.gate")));
        p.push((format!("{prefix}.ffn1"), &self.ffn1));
        p.push((format!("{prefix}.ffn2"), &self.ffn2));
        p
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<F>)> {
        let mut p = self.wq.params_mut(&format!("{prefix}.wq"));
        p.extend(self.wk.params_mut(&format!("{prefix}.wk")));
        p.extend(self.wv.params_mut(&format!("{prefix}.wv")));
        p.extend(self.wo.params_mut(&format!("{prefix}.wo")));
        p.extend(self.gate.params_mut(&format!("{prefix}.gate")));
        p.push((format!("{prefix}.ffn1"), &mut self.ffn1));
        p.push((format!("{prefix}.ffn2"), &mut self.ffn2));
        p
    }
}

/// Inject embedding `v` (`1 x d_emb`) into sequence `x` (`T x D`):
/// the embedding queries the segments by multi-head cross-attention, and each
/// segment is updated as `x_t + FFN(attended * gate(x_t))` where `*` is
/// elementwise and the FFN is bias-free GELU. Zeroing the FFN output
/// projection therefore reproduces `x` exactly.
pub fn inject_category<F: Element>(
    g: &mut Graph<F>,
    v: Var,
    x: Var,
    p: &InjectorVars,
) -> Result<Var> {
    let (_, d) = g.value(x).dim();
    let heads = p.num_heads;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "inject_heads {heads} must divide feature dim {d}"
        )));
    }
    let dh = d / heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());
    let q = p.wq.forward(g, v); // 1 x D
    let k = p.wk.forward(g, x); // T x D
    let val = p.wv.forward(g, x);
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi);
        let kh = g.slice_cols(k, lo, hi);
        let vh = g.slice_cols(val, lo, hi);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt); // 1 x T
        let scores = g.affine(scores, scale, F::zero());
        let probs = g.softmax_rows(scores);
        parts.push(g.matmul(probs, vh)); // 1 x dh
    }
    let cat = g.concat_cols(&parts);
    let attended = p.wo.forward(g, cat); // 1 x D

    let gate_z = p.gate.forward(g, x);
    let gate = g.sigmoid(gate_z); // T x D
    let mixed = g.mul_row(gate, attended); // row-wise product with attended
    let h1 = g.matmul(mixed, p.ffn1);
    let h1 = g.gelu(h1);
    let delta = g.matmul(h1, p.ffn2); // T x D
    Ok(g.add(x, delta))
}

// ---------------------------------------------------------------------------
// Composite module
// ---------------------------------------------------------------------------

/// The full refinement stage.
#[derive(Debug, Clone)]
pub struct CoreRefine<F> {
    pub scorer: Scorer<F>,
    pub classifier: Linear<F>,
    pub prototypes: PrototypeBank<F>,
    pub injector: Injector<F>,
    pub cfg: CoreConfig,
    pub num_categories: usize,
}

pub struct CoreRefineVars {
    pub scorer: ScorerVars,
    pub classifier: LinearVars,
    pub prototypes: PrototypeBankVars,
    pub injector: InjectorVars,
    pub cfg: CoreConfig,
    pub num_categories: usize,
    prefix: String,
}

/// Everything the stage computes for one video.
pub struct CoreForward {
    /// Rough per-segment scores on the incoming sequence, `T x 1`.
    pub rough: Var,
    /// Attention weights used for pooling, `1 x T`.
    pub alpha: Var,
    /// Category logits reshaped to `C x 2` rows `[z_normal, z_abnormal]`.
    pub logits: Var,
    /// Per-category abnormal probabilities (plain values).
    pub p_abnormal: Vec<f64>,
    /// Category weights `1 x C` and which gate branch produced them.
    pub weights: Var,
    pub branch: GateBranch,
    /// Soft category embedding `1 x d_emb`.
    pub embedding: Var,
    /// Refined sequence `T x D` (equal to the input when injection is off).
    pub refined: Var,
    /// Final per-segment scores on the refined sequence, `T x 1`.
    pub scores: Var,
}

impl<F: Element> CoreRefine<F> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        d: usize,
        num_categories: usize,
        d_emb: Option<usize>,
        cfg: CoreConfig,
    ) -> Result<Self> {
        if num_categories == 0 {
            return Err(Error::Config("need at least one category".into()));
        }
        let d_emb = d_emb.unwrap_or(d);
        Ok(CoreRefine {
            scorer: Scorer::new(rng, d, cfg.scorer_hidden, cfg.scorer_dropout),
            classifier: Linear::new(rng, d, 2 * num_categories),
            prototypes: PrototypeBank::new(rng, num_categories, d_emb),
            injector: Injector::new(rng, d, d_emb, cfg.inject_heads, cfg.fusion_mult)?,
            cfg,
            num_categories,
        })
    }

    pub fn bind(&self, b: &mut Binder<'_, F>, prefix: &str) -> CoreRefineVars {
        CoreRefineVars {
            scorer: self.scorer.bind(b, &format!("{prefix}.scorer")),
            classifier: self.classifier.bind(b, &format!("{prefix}.classifier")),
            prototypes: self.prototypes.bind(b, &format!("{prefix}.prototypes")),
            injector: self.injector.bind(b, &format!("{prefix}.injector")),
            cfg: self.cfg.clone(),
            num_categories: self.num_categories,
            prefix: prefix.to_string(),
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Array2<F>)> {
        let mut p = self.scorer.params(&format!("{prefix}.scorer"));
        p.extend(self.classifier.params(&format!("{prefix}.classifier")));
        p.extend(self.prototypes.params(&format!("{prefix}.prototypes")));
        p.extend(self.injector.params(&format!("{prefix}.injector")));
        p
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<F>)> {
        let mut p = self.scorer.params_mut(&format!("{prefix}.scorer"));
        p.extend(self.classifier.params_mut(&format!("{prefix}.classifier")));
        p.extend(self.prototypes.params_mut(&format!("{prefix}.prototypes")));
        p.extend(self.injector.params_mut(&format!("{prefix}.injector")));
        p
    }

    pub fn buffers(&self, prefix: &str) -> Vec<(String, &Array2<F>)> {
        self.scorer.buffers(&format!("{prefix}.scorer"))
    }

    pub fn buffers_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<F>)> {
        self.scorer.buffers_mut(&format!("{prefix}.scorer"))
    }

    pub fn absorb(&mut self, prefix: &str, stats: &[BnStats]) {
        self.scorer.absorb(&format!("{prefix}.scorer"), stats);
    }
}

impl CoreRefineVars {
    /// Run the stage on a `T x D` sequence.
    ///
    /// `soft` selects the soft/hard category gate; `use_injection = false`
    /// bypasses the prototype injection (the final scores then re-score the
    /// input sequence itself); `train_label` is the ground-truth category for
    /// an abnormal training video and must be `None` during evaluation.
    pub fn forward<F: Element>(
        &self,
        g: &mut Graph<F>,
        x: Var,
        soft: bool,
        use_injection: bool,
        train_label: Option<usize>,
        stats_out: &mut Vec<BnStats>,
    ) -> Result<CoreForward> {
        let rough = self.scorer.forward(g, x, stats_out);
        let (pooled, alpha) = attention_pool(g, rough, x);
        let flat = self.classifier.forward(g, pooled); // 1 x 2C
        let logits = g.reshape(flat, self.num_categories, 2);
        let (weights, p_abnormal, branch) = gate_weights(g, logits, self.cfg.tau, soft);
        let embedding = soft_embedding(g, &self.prototypes, weights, train_label)?;
        let refined = if use_injection {
            inject_category(g, embedding, x, &self.injector)?
        } else {
            x
        };
        let scores = self.scorer.forward(g, refined, stats_out);
        let _ = &self.prefix;
        Ok(CoreForward {
            rough,
            alpha,
            logits,
            p_abnormal,
            weights,
            branch,
            embedding,
            refined,
            scores,
        })
    }
}
