//! Motion-adaptive temporal recalibration.
//!
//! Stage one of the pipeline. For each segment it estimates a motion level
//! from the variance of the temporal feature delta, turns that into a
//! per-segment channel-shift count via a small gated MLP, routes leading
//! channel blocks in from the temporal neighbours, and re-encodes the routed
//! sequence with a single-layer pre-norm transformer so that every segment's
//! representation is recalibrated by its motion context.
//!
//! The shift count is discrete (a floor), so by default no gradient flows
//! into the shift predictor; an optional straight-through estimator treats
//! the count as its continuous relaxation in the backward pass.

use crate::autodiff::{BackFn, Element, Graph, TapeView, Var};
use crate::error::{Error, Result};
use crate::nn::{gaussian, Binder, LayerNorm, LayerNormVars, Linear, LinearVars};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Knobs for the recalibration stage.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MotarConfig {
    /// Attention heads in the temporal encoder; must divide the feature dim.
    pub num_heads: usize,
    /// Chunk divisor K: the shift count is `floor(r * D / K)`.
    pub shift_chunks: usize,
    /// Dropout probability inside the encoder.
    pub dropout: f64,
    /// Route gradients through the discrete shift with a straight-through
    /// estimator instead of stopping them at the floor.
    pub straight_through: bool,
}

impl Default for MotarConfig {
    fn default() -> Self {
        MotarConfig {
            num_heads: 4,
            shift_chunks: 8,
            dropout: 0.1,
            straight_through: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Motion variance
// ---------------------------------------------------------------------------

/// Per-segment motion estimate: the population variance across channels of
/// the temporal delta `x_t - x_{t-1}` (the delta of segment 0 is zero).
pub fn estimate_motion_variance<F: Element>(x: &Array2<F>) -> Result<Vec<F>> {
    let (t, d) = x.dim();
    if t < 2 {
        return Err(Error::Shape(format!(
            "motion variance needs at least 2 segments, got {t}"
        )));
    }
    let mut out = Vec::with_capacity(t);
    out.push(F::zero());
    let dn = F::lit(d as f64);
    for ti in 1..t {
        let mut sum = F::zero();
        let mut sumsq = F::zero();
        for j in 0..d {
            let delta = x[(ti, j)] - x[(ti - 1, j)];
            sum += delta;
            sumsq += delta * delta;
        }
        let mean = sum / dn;
        out.push(sumsq / dn - mean * mean);
    }
    Ok(out)
}

/// Graph version of [`estimate_motion_variance`]: `T x 1`, differentiable.
/// Composed as `E[delta^2] - E[delta]^2` over the channel axis.
pub fn motion_variance_graph<F: Element>(g: &mut Graph<F>, x: Var) -> Var {
    let deltas = g.delta_rows(x);
    let mean = g.row_mean(deltas);
    let sq = g.mul(deltas, deltas);
    let mean_sq = g.row_mean(sq);
    let mean2 = g.mul(mean, mean);
    g.sub(mean_sq, mean2)
}

// ---------------------------------------------------------------------------
// Shift predictor
// ---------------------------------------------------------------------------

/// Small MLP mapping a scalar motion level to a shift ratio in (0, 1):
/// 1 -> 16 -> 16 -> 1 with GELU activations and a sigmoid output.
#[derive(Debug, Clone)]
pub struct ShiftPredictor<F> {
    pub l1: Linear<F>,
    pub l2: Linear<F>,
    pub l3: Linear<F>,
}

pub struct ShiftPredictorVars {
    pub l1: LinearVars,
    pub l2: LinearVars,
    pub l3: LinearVars,
}

const SHIFT_HIDDEN: usize = 16;

impl<F: Element> ShiftPredictor<F> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        ShiftPredictor {
            l1: Linear::new(rng, 1, SHIFT_HIDDEN),
            l2: Linear::new(rng, SHIFT_HIDDEN, SHIFT_HIDDEN),
            l3: Linear::new(rng, SHIFT_HIDDEN, 1),
        }
    }

    /// All-zero weights and biases; the sigmoid then emits exactly 0.5.
    pub fn zeroed() -> Self {
        ShiftPredictor {
            l1: Linear {
                w: Array2::zeros((1, SHIFT_HIDDEN)),
                b: Array2::zeros((1, SHIFT_HIDDEN)),
            },
            l2: Linear {
                w: Array2::zeros((SHIFT_HIDDEN, SHIFT_HIDDEN)),
                b: Array2::zeros((1, SHIFT_HIDDEN)),
            },
            l3: Linear {
                w: Array2::zeros((SHIFT_HIDDEN, 1)),
                b: Array2::zeros((1, 1)),
            },
        }
    }

    pub fn bind(&self, b: &mut Binder<'_, F>, prefix: &str) -> ShiftPredictorVars {
        ShiftPredictorVars {
            l1: self.l1.bind(b, &format!("{prefix}.l1")),
            l2: self.l2.bind(b, &format!("{prefix}.l2")),
            l3: self.l3.bind(b, &format!("{prefix}.l3")),
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Array2<F>)> {
        let mut p = self.l1.params(&format!("{prefix}.l1"));
        p.extend(self.l2.params(&format!("{prefix}.l2")));
        p.extend(self.l3.params(&format!("{prefix}.l3")));
        p
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<F>)> {
        let mut p = self.l1.params_mut(&format!("{prefix}.l1"));
        p.extend(self.l2.params_mut(&format!("{prefix}.l2")));
        p.extend(self.l3.params_mut(&format!("{prefix}.l3")));
        p
    }
}

impl ShiftPredictorVars {
    /// `v` is `T x 1` motion variance; returns `T x 1` ratios in (0, 1).
    pub fn forward<F: Element>(&self, g: &mut Graph<F>, v: Var) -> Var {
        let h = self.l1.forward(g, v);
        let h = g.gelu(h);
        let h = self.l2.forward(g, h);
        let h = g.gelu(h);
        let z = self.l3.forward(g, h);
        g.sigmoid(z)
    }
}

// ---------------------------------------------------------------------------
// Shift counts and adaptive routing
// ---------------------------------------------------------------------------

/// Validate that the block layout can never overlap: two shifted blocks of up
/// to `floor(D/K)` channels each must fit inside `D`.
pub fn validate_shift_layout(d: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("shift_chunks must be >= 1".into()));
    }
    if 2 * (d / k) > d {
        return Err(Error::Config(format!(
            "shift_chunks {k} allows blocks of {} channels, which overlap in D={d}",
            d / k
        )));
    }
    Ok(())
}

/// `s_t = floor(r_t * D / K)` for ratios in [0, 1].
pub fn compute_shift_counts(ratios: &[f64], d: usize, k: usize) -> Result<Vec<usize>> {
    validate_shift_layout(d, k)?;
    let cap = d / k;
    let mut out = Vec::with_capacity(ratios.len());
    for &r in ratios {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("shift ratio {r} outside [0, 1]")));
        }
        let s = (r * d as f64 / k as f64).floor() as usize;
        out.push(s.min(cap));
    }
    Ok(out)
}

/// Route channel blocks in from the temporal neighbours.
///
/// With `s = shifts[t]`, the output row `y_t` is the concatenation
/// `[x_{t-1}[0..s] | x_{t+1}[s..2s] | x_t[2s..D]]`; out-of-range neighbours
/// (before the first segment, after the last) contribute zeros. `s = 0`
/// reproduces `x_t` exactly.
///
/// When `ste` carries the ratio variable and the relaxation slope `D/K`, the
/// backward pass adds a straight-through gradient for the ratios: the shift
/// count is treated as the continuous value `r * D / K`, and the derivative
/// with respect to a unit increase of the count is the change in output the
/// increment would cause (block one grows by channel `s`, block two slides to
/// cover channels `2s` and `2s+1`).
pub fn apply_adaptive_shift<F: Element>(
    g: &mut Graph<F>,
    x: Var,
    shifts: &[usize],
    ste: Option<(Var, f64)>,
) -> Result<Var> {
    let xv = g.value(x);
    let (t, d) = xv.dim();
    if shifts.len() != t {
        return Err(Error::Shape(format!(
            "{} shift counts for {t} segments",
            shifts.len()
        )));
    }
    if let Some(&bad) = shifts.iter().find(|&&s| 2 * s > d) {
        return Err(Error::Shape(format!(
            "shift count {bad} needs {} channels but D={d}",
            2 * bad
        )));
    }

    let mut y = Array2::<F>::zeros((t, d));
    for ti in 0..t {
        let s = shifts[ti];
        for j in 0..d {
            y[(ti, j)] = if j < s {
                if ti >= 1 {
                    xv[(ti - 1, j)]
                } else {
                    F::zero()
                }
            } else if j < 2 * s {
                if ti + 1 < t {
                    xv[(ti + 1, j)]
                } else {
                    F::zero()
                }
            } else {
                xv[(ti, j)]
            };
        }
    }

    let shifts_own: Vec<usize> = shifts.to_vec();
    let parents: Vec<Var> = match ste {
        Some((r, _)) => vec![x, r],
        None => vec![x],
    };
    let back: BackFn<F> = Box::new(move |view: TapeView<'_, F>, grad, sink| {
        // Scatter the upstream gradient back to the source cells of x.
        let mut gx = Array2::<F>::zeros((t, d));
        for ti in 0..t {
            let s = shifts_own[ti];
            for j in 0..d {
                if j < s {
                    if ti >= 1 {
                        gx[(ti - 1, j)] += grad[(ti, j)];
                    }
                } else if j < 2 * s {
                    if ti + 1 < t {
                        gx[(ti + 1, j)] += grad[(ti, j)];
                    }
                } else {
                    gx[(ti, j)] += grad[(ti, j)];
                }
            }
        }
        sink(x, gx);

        if let Some((r, slope)) = ste {
            let xv = view.value(x);
            let mut gr = Array2::<F>::zeros((t, 1));
            let cell = |ti: isize, j: usize| -> F {
                if ti < 0 || ti as usize >= t {
                    F::zero()
                } else {
                    xv[(ti as usize, j)]
                }
            };
            for ti in 0..t {
                let s = shifts_own[ti];
                let im1 = ti as isize - 1;
                let ip1 = ti as isize + 1;
                let mut dl_ds = F::zero();
                // Block one gains channel s (currently held by block two for
                // s >= 1, by the passthrough block at s = 0).
                if s < d {
                    let old = if s == 0 { cell(ti as isize, 0) } else { cell(ip1, s) };
                    dl_ds += grad[(ti, s)] * (cell(im1, s) - old);
                }
                // Block two slides to cover 2s and 2s+1 (2s itself is taken
                // over by block one when s = 0).
                let start = if s == 0 { 2 * s + 1 } else { 2 * s };
                for j in start..(2 * s + 2).min(d) {
                    dl_ds += grad[(ti, j)] * (cell(ip1, j) - cell(ti as isize, j));
                }
                gr[(ti, 0)] = dl_ds * F::lit(slope);
            }
            sink(r, gr);
        }
    });
    Ok(g.custom(&parents, y, back))
}

// ---------------------------------------------------------------------------
// Temporal encoder
// ---------------------------------------------------------------------------

/// Projection parameters of one multi-head self-attention block.
#[derive(Debug, Clone)]
pub struct Attention<F> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
}

pub struct AttentionVars {
    pub wq: LinearVars,
    pub wk: LinearVars,
    pub wv: LinearVars,
    pub wo: LinearVars,
}

impl<F: Element> Attention<F> {
    pub fn new(rng: &mut ChaCha8Rng, d: usize) -> Self {
        Attention {
            wq: Linear::new(rng, d, d),
            wk: Linear::new(rng, d, d),
            wv: Linear::new(rng, d, d),
            wo: Linear::new(rng, d, d),
        }
    }

    pub fn bind(&self, b: &mut Binder<'_, F>, prefix: &str) -> AttentionVars {
        AttentionVars {
            wq: self.wq.bind(b, &format!("{prefix}.wq")),
            wk: self.wk.bind(b, &format!("{prefix}.wk")),
            wv: self.wv.bind(b, &format!("{prefix}.wv")),
            wo: self.wo.bind(b, &format!("{prefix}.wo")),
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Array2<F>)> {
        let mut p = self.wq.params(&format!("{prefix}.wq"));
        p.extend(self.wk.params(&format!("{prefix}.wk")));
        p.extend(self.wv.params(&format!("{prefix}.wv")));
        p.extend(self.wo.params(&format!("{prefix}.wo")));
        p
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<F>)> {
        let mut p = self.wq.params_mut(&format!("{prefix}.wq"));
        p.extend(self.wk.params_mut(&format!("{prefix}.wk")));
        p.extend(self.wv.params_mut(&format!("{prefix}.wv")));
        p.extend(self.wo.params_mut(&format!("{prefix}.wo")));
        p
    }
}

/// Scaled dot-product multi-head self-attention over a `T x D` sequence.
/// No residual or normalization here; the encoder adds those around it.
pub fn multi_head_attention<F: Element>(
    g: &mut Graph<F>,
    x: Var,
    p: &AttentionVars,
    num_heads: usize,
    dropout: f64,
) -> Result<Var> {
    let (_, d) = g.value(x).dim();
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Config(format!(
            "num_heads {num_heads} must divide feature dim {d}"
        )));
    }
    let dh = d / num_heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());
    let q = p.wq.forward(g, x);
    let k = p.wk.forward(g, x);
    let v = p.wv.forward(g, x);
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi);
        let kh = g.slice_cols(k, lo, hi);
        let vh = g.slice_cols(v, lo, hi);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.affine(scores, scale, F::zero());
        let probs = g.softmax_rows(scores);
        let probs = g.dropout(probs, dropout);
        heads.push(g.matmul(probs, vh));
    }
    let cat = g.concat_cols(&heads);
    Ok(p.wo.forward(g, cat))
}

/// Single-layer pre-norm transformer with learned positional embeddings:
/// `h = x + pos; h = h + MHSA(LN(h)); out = h + FFN(LN(h))` with a GELU
/// feed-forward expansion of 4x and dropout after each sublayer.
#[derive(Debug, Clone)]
pub struct TemporalEncoder<F> {
    pub attn: Attention<F>,
    pub ffn1: Linear<F>,
    pub ffn2: Linear<F>,
    pub ln1: LayerNorm<F>,
    pub ln2: LayerNorm<F>,
    /// Learned positional embeddings, `T x D`.
    pub pos: Array2<F>,
    pub num_heads: usize,
    pub dropout: f64,
}

pub struct TemporalEncoderVars {
    pub attn: AttentionVars,
    pub ffn1: LinearVars,
    pub ffn2: LinearVars,
    pub ln1: LayerNormVars,
    pub ln2: LayerNormVars,
    pub pos: Var,
    pub num_heads: usize,
    pub dropout: f64,
}

impl<F: Element> TemporalEncoder<F> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        t: usize,
        d: usize,
        num_heads: usize,
        dropout: f64,
    ) -> Result<Self> {
        if num_heads == 0 || d % num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads {num_heads} must divide feature dim {d}"
            )));
        }
        Ok(TemporalEncoder {
            attn: Attention::new(rng, d),
            ffn1: Linear::new(rng, d, 4 * d),
            ffn2: Linear::new(rng, 4 * d, d),
            ln1: LayerNorm::new(d),
            ln2: LayerNorm::new(d),
            pos: gaussian(rng, t, d, 0.02),
            num_heads,
            dropout,
        })
    }

    pub fn bind(&self, b: &mut Binder<'_, F>, prefix: &str) -> TemporalEncoderVars {
        TemporalEncoderVars {
            attn: self.attn.bind(b, &format!("{prefix}.attn")),
            ffn1: self.ffn1.bind(b, &format!("{prefix}.ffn1")),
            ffn2: self.ffn2.bind(b, &format!("{prefix}.ffn2")),
            ln1: self.ln1.bind(b, &format!("{prefix}.ln1")),
            ln2: self.ln2.bind(b, &format!("{prefix}.ln2")),
            pos: b.param(format!("{prefix}.pos"), &self.pos),
            num_heads: self.num_heads,
            dropout: self.dropout,
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Array2<F>)> {
        let mut p = self.attn.params(&format!("{prefix}.attn"));
        p.extend(self.ffn1.params(&format!("{prefix}.ffn1")));
        p.extend(self.ffn2.params(&format!("{prefix}.ffn2")));
        p.extend(self.ln1.params(&format!("{prefix}.ln1")));
        p.extend(self.ln2.params(&format!("{prefix}.ln2")));
        p.push((format!("{prefix}.pos"), &self.pos));
        p
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<F>)> {
        let mut p = self.attn.params_mut(&format!("{prefix}.attn"));
        p.extend(self.ffn1.params_mut(&format!("{prefix}.ffn1")));
        p.extend(self.ffn2.params_mut(&format!("{prefix}.ffn2")));
        p.extend(self.ln1.params_mut(&format!("{prefix}.ln1")));
        p.extend(self.ln2.params_mut(&format!("{prefix}.ln2")));
        p.push((format!("{prefix}.pos"), &mut self.pos));
        p
    }
}

impl TemporalEncoderVars {
    pub fn forward<F: Element>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let (t, _) = g.value(x).dim();
        let (pt, _) = g.value(self.pos).dim();
        if t != pt {
            return Err(Error::Shape(format!(
                "input has {t} segments but positional table holds {pt}"
            )));
        }
        let h = g.add(x, self.pos);
        let hn = self.ln1.forward(g, h);
        let att = multi_head_attention(g, hn, &self.attn, self.num_heads, self.dropout)?;
        let att = g.dropout(att, self.dropout);
        let h = g.add(h, att);
        let hn = self.ln2.forward(g, h);
        let f = self.ffn1.forward(g, hn);
        let f = g.gelu(f);
        let f = self.ffn2.forward(g, f);
        let f = g.dropout(f, self.dropout);
        Ok(g.add(h, f))
    }
}

// ---------------------------------------------------------------------------
// Composite module
// ---------------------------------------------------------------------------

/// The full recalibration stage: motion variance -> shift ratios -> routing
/// -> temporal encoding.
#[derive(Debug, Clone)]
pub struct Motar<F> {
    pub predictor: ShiftPredictor<F>,
    pub encoder: TemporalEncoder<F>,
    pub cfg: MotarConfig,
    pub feature_dim: usize,
}

pub struct MotarVars {
    pub predictor: ShiftPredictorVars,
    pub encoder: TemporalEncoderVars,
    pub cfg: MotarConfig,
    pub feature_dim: usize,
}

/// Outputs of the stage: the recalibrated sequence plus the discrete shifts
/// and the underlying ratios for inspection.
pub struct MotarForward {
    pub out: Var,
    pub shifts: Vec<usize>,
    pub ratios: Var,
}

impl<F: Element> Motar<F> {
    pub fn new(rng: &mut ChaCha8Rng, t: usize, d: usize, cfg: MotarConfig) -> Result<Self> {
        validate_shift_layout(d, cfg.shift_chunks)?;
        Ok(Motar {
            predictor: ShiftPredictor::new(rng),
            encoder: TemporalEncoder::new(rng, t, d, cfg.num_heads, cfg.dropout)?,
            cfg,
            feature_dim: d,
        })
    }

    pub fn bind(&self, b: &mut Binder<'_, F>, prefix: &str) -> MotarVars {
        MotarVars {
            predictor: self.predictor.bind(b, &format!("{prefix}.predictor")),
            encoder: self.encoder.bind(b, &format!("{prefix}.encoder")),
            cfg: self.cfg.clone(),
            feature_dim: self.feature_dim,
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, &Array2<F>)> {
        let mut p = self.predictor.params(&format!("{prefix}.predictor"));
        p.extend(self.encoder.params(&format!("{prefix}.encoder")));
        p
    }

    pub fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array2<F>)> {
        let mut p = self.predictor.params_mut(&format!("{prefix}.predictor"));
        p.extend(self.encoder.params_mut(&format!("{prefix}.encoder")));
        p
    }
}

impl MotarVars {
    pub fn forward<F: Element>(&self, g: &mut Graph<F>, x: Var) -> Result<MotarForward> {
        let v = motion_variance_graph(g, x);
        let ratios = self.predictor.forward(g, v);
        let rv: Vec<f64> = g.value(ratios).iter().map(|r| r.as_f64()).collect();
        let shifts = compute_shift_counts(&rv, self.feature_dim, self.cfg.shift_chunks)?;
        let slope = self.feature_dim as f64 / self.cfg.shift_chunks as f64;
        let ste = self.cfg.straight_through.then_some((ratios, slope));
        let routed = apply_adaptive_shift(g, x, &shifts, ste)?;
        let out = self.encoder.forward(g, routed)?;
        Ok(MotarForward {
            out,
            shifts,
            ratios,
        })
    }
}
