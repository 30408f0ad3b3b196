//! The composed anomaly-detection model.
//!
//! Pipeline per video: motion-adaptive recalibration, category-oriented
//! refinement, and a small head that conditions the score-mixture fit on the
//! category embedding. Three ablation switches select which stages run:
//! without recalibration the raw features feed the refinement stage directly;
//! without injection the final scores re-score the recalibrated sequence; and
//! soft classification can be replaced with a hard argmax gate.
//!
//! Evaluation takes exactly one input — the feature matrix. Ground-truth
//! categories and frame masks have no entry point here, and the refinement
//! stage rejects a category label whenever the graph is in eval mode.

use crate::autodiff::{sigmoid_scalar, Element, Graph, Mode, Var};
use crate::core_refine::{CoreConfig, CoreForward, CoreRefine, CoreRefineVars};
use crate::error::{Error, Result};
use crate::motar::{Motar, MotarConfig, MotarVars};
use crate::nn::{gaussian, Binder, BnStats};
use crate::objectives::{clamp_mu_hi, LossWeights};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stage switches for ablation studies. Everything on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_motar: bool,
    pub use_injection: bool,
    pub use_soft_classification: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_motar: true,
            use_injection: true,
            use_soft_classification: true,
        }
    }
}

/// Everything needed to build the model deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub num_categories: usize,
    pub segments_per_video: usize,
    /// Prototype embedding width; defaults to the feature dim.
    pub embed_dim: Option<usize>,
    /// k of the top-k ranking objective.
    pub topk: usize,
    /// EM iterations of the score-mixture fit.
    pub em_iters: usize,
    pub motar: MotarConfig,
    pub core: CoreConfig,
    pub loss: LossWeights,
    pub ablation: Ablation,
}

impl ModelConfig {
    /// Defaults for a corpus of shape (C, D, T).
    pub fn for_corpus(num_categories: usize, feature_dim: usize, segments: usize) -> Self {
        ModelConfig {
            feature_dim,
            num_categories,
            segments_per_video: segments,
            embed_dim: None,
            topk: 3,
            em_iters: crate::objectives::GMM_EM_ITERS,
            motar: MotarConfig::default(),
            core: CoreConfig::default(),
            loss: LossWeights::default(),
            ablation: Ablation::default(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim.unwrap_or(self.feature_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.topk == 0 || self.topk > self.segments_per_video {
            return Err(Error::Config(format!(
                "topk {} out of range for {} segments",
                self.topk, self.segments_per_video
            )));
        }
        if self.num_categories == 0 {
            return Err(Error::Config("need at least one category".into()));
        }
        if self.segments_per_video < 2 {
            return Err(Error::Config("need at least two segments".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Mixture-mean head
// ---------------------------------------------------------------------------

/// Scalar projection of the category embedding that conditions the high
/// component's initial mean: `mu_hi = clamp(sigmoid(u . v + b))`.
///
/// The mixture fit is detached, so these parameters receive no gradient from
/// the current objective; they are still declared, persisted, and enumerated
/// like every other parameter.
#[derive(Debug, Clone)]
pub struct GmmHead<F> {
    pub u: Array2<F>,
    pub b: Array2<F>,
}

pub struct GmmHeadVars {
    pub u: Var,
    pub b: Var,
    u_vals: Vec<f64>,
    b_val: f64,
}

impl<F: Element> GmmHead<F> {
    pub fn new(rng: &mut ChaCha8Rng, d_emb: usize) -> Self {
        GmmHead {
            u: gaussian(rng, d_emb, 1, 1.0 / (d_emb as f64).sqrt()),
            b: Array2::zeros((1, 1)),
        }
    }

    pub fn bind(&self, b: &mut Binder<'_, F>, prefix: &str) -> GmmHeadVars {
        GmmHeadVars {
            u: b.param(format!("{prefix}.u"), &self.u),
            b: b.param(format!("{prefix}.b"), &self.b),
            u_vals: self.u.iter().map(|v| v.as_f64()).collect(),
            b_val: self.b[(0, 0)].as_f64(),
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Array2<F>)> {
        vec![
            (format!("{prefix}.u"), &self.u),
            (format!("{prefix}.b"), &self.b),
        ]
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<F>)> {
        vec![
            (format!("{prefix}.u"), &mut self.u),
            (format!("{prefix}.b"), &mut self.b),
        ]
    }
}

impl GmmHeadVars {
    /// Clamped high-component mean for a given embedding (plain values; the
    /// mixture fit never carries gradient).
    pub fn mu_hi(&self, embedding: &[f64]) -> f64 {
        let dot: f64 = self
            .u_vals
            .iter()
            .zip(embedding.iter())
            .map(|(u, v)| u * v)
            .sum();
        clamp_mu_hi(sigmoid_scalar(dot + self.b_val))
    }
}

// ---------------------------------------------------------------------------
// Composed model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RefineModel<F> {
    pub motar: Motar<F>,
    pub core: CoreRefine<F>,
    pub gmm: GmmHead<F>,
    pub cfg: ModelConfig,
}

pub struct RefineModelVars {
    pub motar: MotarVars,
    pub core: CoreRefineVars,
    pub gmm: GmmHeadVars,
    pub cfg: ModelConfig,
}

/// Per-video products of a forward pass.
pub struct VideoForward {
    /// Recalibrated sequence (the input itself when recalibration is off).
    pub recalibrated: Var,
    /// Discrete shift counts, when recalibration ran.
    pub shifts: Option<Vec<usize>>,
    pub core: CoreForward,
    /// Category-conditioned initial mean for the score-mixture fit.
    pub mu_hi: f64,
}

/// Plain-value scoring products for one video at evaluation time.
#[derive(Debug, Clone)]
pub struct ScoredVideo {
    /// Final per-segment anomaly scores in [0, 1].
    pub scores: Vec<f64>,
    /// Rough (pre-refinement) scores.
    pub rough: Vec<f64>,
    /// Per-category abnormal probabilities.
    pub p_abnormal: Vec<f64>,
    /// Raw classifier logits, row-major `C x 2`.
    pub logits: Vec<f64>,
    /// Shift counts, when recalibration ran.
    pub shifts: Option<Vec<usize>>,
}

impl<F: Element> RefineModel<F> {
    pub fn new(rng: &mut ChaCha8Rng, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, c, t) = (cfg.feature_dim, cfg.num_categories, cfg.segments_per_video);
        Ok(RefineModel {
            motar: Motar::new(rng, t, d, cfg.motar.clone())?,
            core: CoreRefine::new(rng, d, c, Some(cfg.embed_dim()), cfg.core.clone())?,
            gmm: GmmHead::new(rng, cfg.embed_dim()),
            cfg,
        })
    }

    pub fn bind(&self, b: &mut Binder<'_, F>) -> RefineModelVars {
        RefineModelVars {
            motar: self.motar.bind(b, "motar"),
            core: self.core.bind(b, "core"),
            gmm: self.gmm.bind(b, "gmm"),
            cfg: self.cfg.clone(),
        }
    }

    pub fn params(&self) -> Vec<(String, &Array2<F>)> {
        let mut p = self.motar.params("motar");
        p.extend(self.core.params("core"));
        p.extend(self.gmm.params("gmm"));
        p
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Array2<F>)> {
        let mut p = self.motar.params_mut("motar");
        p.extend(self.core.params_mut("core"));
        p.extend(self.gmm.params_mut("gmm"));
        p
    }

    pub fn buffers(&self) -> Vec<(String, &Array2<F>)> {
        self.core.buffers("core")
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Array2<F>)> {
        self.core.buffers_mut("core")
    }

    /// Fold batch statistics observed during a training step into the
    /// normalization buffers.
    pub fn absorb(&mut self, stats: &[BnStats]) {
        self.core.absorb("core", stats);
    }

    /// Score one video from its feature matrix alone. This is the only
    /// evaluation entry point: labels, categories, and masks cannot reach it.
    pub fn score_sequence(&self, features: &Array2<f32>) -> Result<ScoredVideo> {
        let (t, d) = features.dim();
        if t != self.cfg.segments_per_video || d != self.cfg.feature_dim {
            return Err(Error::Shape(format!(
                "expected {}x{} features, got {t}x{d}",
                self.cfg.segments_per_video, self.cfg.feature_dim
            )));
        }
        let mut g = Graph::new(Mode::Eval);
        let mut binder = Binder::new(&mut g);
        let vars = self.bind(&mut binder);
        drop(binder);
        let x = g.constant(features.mapv(|v| F::lit(v as f64)));
        let mut stats = Vec::new();
        let fwd = vars.forward(&mut g, x, None, &mut stats)?;
        let column = |v: Var| -> Vec<f64> { g.value(v).iter().map(|x| x.as_f64()).collect() };
        Ok(ScoredVideo {
            scores: column(fwd.core.scores),
            rough: column(fwd.core.rough),
            p_abnormal: fwd.core.p_abnormal.clone(),
            logits: column(fwd.core.logits),
            shifts: fwd.shifts,
        })
    }
}

impl RefineModelVars {
    /// Run the full pipeline on a `T x D` sequence.
    ///
    /// `train_label` is the ground-truth category of an abnormal training
    /// video; it must be `None` for normal videos and for any evaluation.
    pub fn forward<F: Element>(
        &self,
        g: &mut Graph<F>,
        x: Var,
        train_label: Option<usize>,
        stats_out: &mut Vec<BnStats>,
    ) -> Result<VideoForward> {
        let a = self.cfg.ablation;
        let (recalibrated, shifts) = if a.use_motar {
            let m = self.motar.forward(g, x)?;
            (m.out, Some(m.shifts))
        } else {
            (x, None)
        };
        let core = self.core.forward(
            g,
            recalibrated,
            a.use_soft_classification,
            a.use_injection,
            train_label,
            stats_out,
        )?;
        let emb: Vec<f64> = g
            .value(core.embedding)
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let mu_hi = self.gmm.mu_hi(&emb);
        Ok(VideoForward {
            recalibrated,
            shifts,
            core,
            mu_hi,
        })
    }
}
