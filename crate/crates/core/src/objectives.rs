//! The three-part training objective.
//!
//! - A top-k ranking hinge separates abnormal from normal videos at the
//!   video level using only weak labels.
//! - A Gaussian-mixture smoothing term fits a two-component model to an
//!   abnormal video's final scores and pushes each segment's score toward
//!   the component it most plausibly belongs to. The responsibilities are
//!   deliberately detached: only the scores receive gradient.
//! - A category classification term supervises the per-category
//!   normal/abnormal logit pairs with weighted binary cross-entropy.
//!
//! The total is `L_mil + lambda_gmm * L_gmm + lambda_cat * L_cat`.

use crate::autodiff::{Element, Graph, Var};
use crate::corpus::Label;
use crate::error::{Error, Result};
use ndarray::Array2;

/// Mixing coefficients of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_gmm: f64,
    pub lambda_cat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_gmm: 0.1,
            lambda_cat: 0.2,
        }
    }
}

// ---------------------------------------------------------------------------
// Ranking loss
// ---------------------------------------------------------------------------

/// Top-k ranking hinge between one abnormal and one normal video:
/// `max(0, 1 - topk_mean(abnormal) + topk_mean(normal))`.
///
/// Both inputs are `T x 1` score columns in [0, 1], so the loss lives in
/// [0, 2]. `k` must satisfy `1 <= k <= T` for both videos.
pub fn mil_ranking_loss<F: Element>(
    g: &mut Graph<F>,
    abnormal_scores: Var,
    normal_scores: Var,
    k: usize,
) -> Result<Var> {
    for (name, v) in [("abnormal", abnormal_scores), ("normal", normal_scores)] {
        let (t, one) = g.value(v).dim();
        if one != 1 {
            return Err(Error::Shape(format!("{name} scores must be T x 1")));
        }
        if k == 0 || k > t {
            return Err(Error::Config(format!(
                "top-k {k} out of range for {t} {name} segments"
            )));
        }
    }
    let ta = g.topk_mean(abnormal_scores, k);
    let tn = g.topk_mean(normal_scores, k);
    let diff = g.sub(tn, ta);
    let margin = g.affine(diff, F::one(), F::one()); // 1 + tn - ta
    Ok(g.relu(margin))
}

// ---------------------------------------------------------------------------
// Score GMM
// ---------------------------------------------------------------------------

/// Fixed initialization of the low (normal) component mean.
pub const GMM_MU_LO_INIT: f64 = 0.25;
/// Clamp range for the category-conditioned high-component mean.
pub const GMM_MU_HI_RANGE: (f64, f64) = (0.5, 0.95);
/// Both components start at this variance.
pub const GMM_VAR_INIT: f64 = 0.1;
/// Variances never drop below this floor during the M-step.
pub const GMM_VAR_FLOOR: f64 = 1e-4;
/// Default number of EM iterations.
pub const GMM_EM_ITERS: usize = 5;

/// Clamp a category-conditioned projection into the allowed range for the
/// high-component mean.
pub fn clamp_mu_hi(raw_sigmoid: f64) -> f64 {
    raw_sigmoid.clamp(GMM_MU_HI_RANGE.0, GMM_MU_HI_RANGE.1)
}

/// Result of fitting the two-component score mixture.
#[derive(Debug, Clone)]
pub struct GmmFit {
    /// Responsibility of the high (anomalous) component per segment.
    pub gamma: Vec<f64>,
    pub mu_lo: f64,
    pub mu_hi: f64,
    pub var_lo: f64,
    pub var_hi: f64,
    /// Mixing proportion of the high component.
    pub pi_hi: f64,
}

fn normal_pdf(x: f64, mu: f64, var: f64) -> f64 {
    let diff = x - mu;
    (-diff * diff / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Fit a 1-D two-component Gaussian mixture to the scores by EM.
///
/// Initialization: means (`GMM_MU_LO_INIT`, `mu_hi` — already clamped by the
/// caller), both variances `GMM_VAR_INIT`, uniform priors. With zero
/// iterations the responsibilities are simply the posteriors under the
/// initial parameters. This runs on plain values: responsibilities carry no
/// gradient by construction.
pub fn fit_score_gmm(scores: &[f64], mu_hi: f64, em_iters: usize) -> Result<GmmFit> {
    if scores.is_empty() {
        return Err(Error::Shape("cannot fit a mixture to zero scores".into()));
    }
    if !(GMM_MU_HI_RANGE.0..=GMM_MU_HI_RANGE.1).contains(&mu_hi) {
        return Err(Error::Config(format!(
            "mu_hi {mu_hi} outside clamp range {:?}",
            GMM_MU_HI_RANGE
        )));
    }
    let n = scores.len() as f64;
    let mut fit = GmmFit {
        gamma: vec![0.0; scores.len()],
        mu_lo: GMM_MU_LO_INIT,
        mu_hi,
        var_lo: GMM_VAR_INIT,
        var_hi: GMM_VAR_INIT,
        pi_hi: 0.5,
    };

    let e_step = |fit: &mut GmmFit| {
        for (g, &s) in fit.gamma.iter_mut().zip(scores.iter()) {
            let p_hi = fit.pi_hi * normal_pdf(s, fit.mu_hi, fit.var_hi);
            let p_lo = (1.0 - fit.pi_hi) * normal_pdf(s, fit.mu_lo, fit.var_lo);
            let total = p_hi + p_lo;
            *g = if total > 0.0 { p_hi / total } else { 0.5 };
        }
    };

    e_step(&mut fit);
    for _ in 0..em_iters {
        // M-step. A component with (numerically) no mass keeps its params.
        let n_hi: f64 = fit.gamma.iter().sum();
        let n_lo = n - n_hi;
        if n_hi > 1e-12 {
            fit.mu_hi = fit
                .gamma
                .iter()
                .zip(scores.iter())
                .map(|(g, s)| g * s)
                .sum::<f64>()
                / n_hi;
            fit.var_hi = (fit
                .gamma
                .iter()
                .zip(scores.iter())
                .map(|(g, s)| g * (s - fit.mu_hi) * (s - fit.mu_hi))
                .sum::<f64>()
                / n_hi)
                .max(GMM_VAR_FLOOR);
        }
        if n_lo > 1e-12 {
            fit.mu_lo = fit
                .gamma
                .iter()
                .zip(scores.iter())
                .map(|(g, s)| (1.0 - g) * s)
                .sum::<f64>()
                / n_lo;
            fit.var_lo = (fit
                .gamma
                .iter()
                .zip(scores.iter())
                .map(|(g, s)| (1.0 - g) * (s - fit.mu_lo) * (s - fit.mu_lo))
                .sum::<f64>()
                / n_lo)
                .max(GMM_VAR_FLOOR);
        }
        fit.pi_hi = n_hi / n;
        e_step(&mut fit);
    }
    Ok(fit)
}

/// Smoothing loss against detached responsibilities:
/// `(1/T) * sum_t [ gamma_t (1 - s_t)^2 + (1 - gamma_t) s_t^2 ]`.
pub fn gmm_smoothing_loss<F: Element>(g: &mut Graph<F>, scores: Var, gamma: &[f64]) -> Result<Var> {
    let (t, one) = g.value(scores).dim();
    if one != 1 || t != gamma.len() {
        return Err(Error::Shape(format!(
            "scores {t}x{one} vs {} responsibilities",
            gamma.len()
        )));
    }
    let gam = Array2::from_shape_vec((t, 1), gamma.iter().map(|&v| F::lit(v)).collect())
        .expect("shape checked above");
    let one_minus_gam = gam.mapv(|v| F::one() - v);
    let gam = g.constant(gam);
    let one_minus_gam = g.constant(one_minus_gam);
    let one_minus_s = g.affine(scores, -F::one(), F::one());
    let sq_miss = g.mul(one_minus_s, one_minus_s);
    let high_term = g.mul(gam, sq_miss);
    let sq = g.mul(scores, scores);
    let low_term = g.mul(one_minus_gam, sq);
    let total = g.add(high_term, low_term);
    Ok(g.mean(total))
}

// ---------------------------------------------------------------------------
// Category loss
// ---------------------------------------------------------------------------

/// Per-category target rows: `[1, 0]` (normal) everywhere except the
/// ground-truth category of an abnormal video, which gets `[0, 1]`.
pub fn category_targets<F: Element>(
    num_categories: usize,
    label: Label,
    category: Option<usize>,
) -> Result<Array2<F>> {
    let mut t = Array2::<F>::zeros((num_categories, 2));
    for c in 0..num_categories {
        t[(c, 0)] = F::one();
    }
    match (label, category) {
        (Label::Normal, None) => Ok(t),
        (Label::Normal, Some(_)) => Err(Error::Corpus(
            "normal video must not carry a category".into(),
        )),
        (Label::Abnormal, Some(c)) if c < num_categories => {
            t[(c, 0)] = F::zero();
            t[(c, 1)] = F::one();
            Ok(t)
        }
        (Label::Abnormal, Some(c)) => Err(Error::Corpus(format!(
            "category {c} out of range [0, {num_categories})"
        ))),
        (Label::Abnormal, None) => Err(Error::Corpus(
            "abnormal video without a category label".into(),
        )),
    }
}

/// Weighted binary cross-entropy over the `C x 2` logit matrix, each row
/// scored against its target pair under two independent sigmoids and scaled
/// by that category's weight. All-zero logits with unit weights give exactly
/// `2 C ln 2`.
pub fn category_loss<F: Element>(
    g: &mut Graph<F>,
    logits_c2: Var,
    label: Label,
    category: Option<usize>,
    class_weights: &[f64],
) -> Result<Var> {
    let (c, two) = g.value(logits_c2).dim();
    if two != 2 {
        return Err(Error::Shape(format!("expected C x 2 logits, got {c}x{two}")));
    }
    if class_weights.len() != c {
        return Err(Error::Shape(format!(
            "{} class weights for {c} categories",
            class_weights.len()
        )));
    }
    let targets = category_targets::<F>(c, label, category)?;
    let mut weights = Array2::<F>::zeros((c, 2));
    for (i, &w) in class_weights.iter().enumerate() {
        weights[(i, 0)] = F::lit(w);
        weights[(i, 1)] = F::lit(w);
    }
    Ok(g.bce_logits_sum(logits_c2, targets, weights))
}

// ---------------------------------------------------------------------------
// Total
// ---------------------------------------------------------------------------

/// Combine the three scalar terms: `mil + lambda_gmm * gmm + lambda_cat * cat`.
pub fn total_loss<F: Element>(
    g: &mut Graph<F>,
    l_mil: Var,
    l_gmm: Var,
    l_cat: Var,
    w: LossWeights,
) -> Var {
    let gmm = g.affine(l_gmm, F::lit(w.lambda_gmm), F::zero());
    let cat = g.affine(l_cat, F::lit(w.lambda_cat), F::zero());
    let partial = g.add(l_mil, gmm);
    g.add(partial, cat)
}

/// Plain-value version of [`total_loss`] for bookkeeping and tests.
pub fn total_loss_value(l_mil: f64, l_gmm: f64, l_cat: f64, w: LossWeights) -> f64 {
    l_mil + w.lambda_gmm * l_gmm + w.lambda_cat * l_cat
}
