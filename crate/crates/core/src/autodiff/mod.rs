//! Minimal reverse-mode tape over dense 2-D arrays.
//!
//! Every value on the tape is an `Array2<F>`; vectors are `T x 1` or `1 x N`
//! matrices and scalars are `1 x 1`. A forward pass builds nodes on a
//! [`Graph`], `backward` walks the tape once and returns gradients for leaf
//! nodes. Generic over `f32`/`f64` so training runs in `f32` while gradient
//! checks run in `f64`.

pub mod check;

use ndarray::{concatenate, Array2, Axis, ScalarOperand};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scalar element of the tape: `f32` or `f64`.
pub trait Element:
    ndarray::LinalgScalar
    + Float
    + ScalarOperand
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    /// Lossy conversion from `f64`, for literals and hyperparameters.
    fn lit(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("literal conversion")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("f64 conversion")
    }
}

impl Element for f32 {}
impl Element for f64 {}

/// Forward mode: training enables dropout and batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Read-only access to tape values inside a backward closure.
pub struct TapeView<'a, F> {
    vals: &'a [Array2<F>],
}

impl<F> TapeView<'_, F> {
    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.vals[v.0]
    }
}

/// Backward closure: receives tape values, the gradient flowing into this
/// node, and a sink that accumulates gradient contributions onto parents.
pub type BackFn<F> = Box<dyn Fn(TapeView<'_, F>, &Array2<F>, &mut dyn FnMut(Var, Array2<F>))>;

pub struct Graph<F: Element> {
    vals: Vec<Array2<F>>,
    backs: Vec<Option<BackFn<F>>>,
    needs: Vec<bool>,
    mode: Mode,
    rng: ChaCha8Rng,
}

/// Gradients of a scalar root with respect to leaf nodes.
pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Element> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&Array2<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<F: Element> Graph<F> {
    pub fn new(mode: Mode) -> Self {
        Self::with_seed(mode, 0)
    }

    /// Seed controls dropout masks only; forward math is deterministic.
    pub fn with_seed(mode: Mode, seed: u64) -> Self {
        Graph {
            vals: Vec::new(),
            backs: Vec::new(),
            needs: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.vals[v.0]
    }

    /// Whether gradients flow into this node.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn push(&mut self, value: Array2<F>, needs: bool, back: Option<BackFn<F>>) -> Var {
        self.vals.push(value);
        self.needs.push(needs);
        self.backs.push(if needs { back } else { None });
        Var(self.vals.len() - 1)
    }

    /// Leaf that participates in gradients (a parameter or checked input).
    pub fn leaf(&mut self, value: Array2<F>) -> Var {
        self.push(value, true, None)
    }

    /// Constant: gradients never flow into it.
    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, false, None)
    }

    /// Escape hatch for domain-specific ops. `back` must route the incoming
    /// gradient to whichever of `parents` should receive one; contributions
    /// to non-gradient nodes are silently dropped.
    pub fn custom(&mut self, parents: &[Var], value: Array2<F>, back: BackFn<F>) -> Var {
        let needs = self.needs_any(parents);
        self.push(value, needs, Some(back))
    }

    fn needs_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs[v.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.vals[a.0].dot(&self.vals[b.0]);
        let needs = self.needs_any(&[a, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, sink| {
                sink(a, g.dot(&vals.value(b).t()));
                sink(b, vals.value(a).t().dot(g));
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.vals[a.0].t().to_owned();
        let needs = self.needs[a.0];
        self.push(
            value,
            needs,
            Some(Box::new(move |_vals, g, sink| {
                sink(a, g.t().to_owned());
            })),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].dim(), self.vals[b.0].dim(), "add shape");
        let value = &self.vals[a.0] + &self.vals[b.0];
        let needs = self.needs_any(&[a, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |_vals, g, sink| {
                sink(a, g.clone());
                sink(b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].dim(), self.vals[b.0].dim(), "sub shape");
        let value = &self.vals[a.0] - &self.vals[b.0];
        let needs = self.needs_any(&[a, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |_vals, g, sink| {
                sink(a, g.clone());
                sink(b, g.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].dim(), self.vals[b.0].dim(), "mul shape");
        let value = &self.vals[a.0] * &self.vals[b.0];
        let needs = self.needs_any(&[a, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, sink| {
                sink(a, g * vals.value(b));
                sink(b, g * vals.value(a));
            })),
        )
    }

    /// Add a `1 x N` row vector to every row of an `M x N` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.vals[a.0].dim();
        assert_eq!(self.vals[row.0].dim(), (1, n), "add_row shape");
        let value = &self.vals[a.0] + &self.vals[row.0].broadcast((m, n)).unwrap();
        let needs = self.needs_any(&[a, row]);
        self.push(
            value,
            needs,
            Some(Box::new(move |_vals, g, sink| {
                sink(a, g.clone());
                sink(row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            })),
        )
    }

    /// Multiply every row of an `M x N` matrix elementwise by a `1 x N` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.vals[a.0].dim();
        assert_eq!(self.vals[row.0].dim(), (1, n), "mul_row shape");
        let value = &self.vals[a.0] * &self.vals[row.0].broadcast((m, n)).unwrap();
        let needs = self.needs_any(&[a, row]);
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, sink| {
                let (m, n) = g.dim();
                sink(a, g * &vals.value(row).broadcast((m, n)).unwrap());
                sink(
                    row,
                    (g * vals.value(a)).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
            })),
        )
    }

    /// Elementwise `a * mul + add` with scalar constants.
    pub fn affine(&mut self, a: Var, mul: F, add: F) -> Var {
        let value = self.vals[a.0].mapv(|x| x * mul + add);
        let needs = self.needs[a.0];
        self.push(
            value,
            needs,
            Some(Box::new(move |_vals, g, sink| {
                sink(a, g * mul);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.vals[a.0].mapv(sigmoid_scalar);
        let needs = self.needs[a.0];
        let out = Var(self.vals.len());
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, sink| {
                let y = vals.value(out);
                sink(a, g * &y.mapv(|y| y * (F::one() - y)));
            })),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.vals[a.0].mapv(gelu_scalar);
        let needs = self.needs[a.0];
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, sink| {
                sink(a, g * &vals.value(a).mapv(gelu_grad_scalar));
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.vals[a.0].mapv(|x| x.max(F::zero()));
        let needs = self.needs[a.0];
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, sink| {
                let mask = vals
                    .value(a)
                    .mapv(|x| if x > F::zero() { F::one() } else { F::zero() });
                sink(a, g * &mask);
            })),
        )
    }

    /// Numerically stable softmax over each row (max-subtracted).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.vals[a.0].clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.iter().cloned().sum::<F>();
            row.mapv_inplace(|x| x / sum);
        }
        let needs = self.needs[a.0];
        let out = Var(self.vals.len());
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, sink| {
                let y = vals.value(out);
                let mut gx = g * y;
                for (mut grow, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                    let s: F = grow.iter().cloned().sum();
                    grow.zip_mut_with(&yrow, |gi, &yi| *gi = *gi - s * yi);
                }
                sink(a, gx);
            })),
        )
    }

    /// Mean over the columns of each row: `M x N -> M x 1`.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let (_, n) = self.vals[a.0].dim();
        let value = self.vals[a.0]
            .mean_axis(Axis(1))
            .unwrap()
            .insert_axis(Axis(1));
        let needs = self.needs[a.0];
        let inv = F::lit(1.0 / n as f64);
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, sink| {
                let (m, n) = vals.value(a).dim();
                sink(a, g.broadcast((m, n)).unwrap().to_owned() * inv);
            })),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.vals[a.0].iter().cloned().sum::<F>();
        let needs = self.needs[a.0];
        self.push(
            Array2::from_elem((1, 1), total),
            needs,
            Some(Box::new(move |vals, g, sink| {
                let dim = vals.value(a).dim();
                sink(a, Array2::from_elem(dim, g[(0, 0)]));
            })),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let (m, n) = self.vals[a.0].dim();
        let s = self.sum(a);
        self.affine(s, F::lit(1.0 / (m * n) as f64), F::zero())
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.vals[a.0].slice(ndarray::s![.., start..end]).to_owned();
        let needs = self.needs[a.0];
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, sink| {
                let mut full = Array2::zeros(vals.value(a).dim());
                full.slice_mut(ndarray::s![.., start..end]).assign(g);
                sink(a, full);
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.vals[a.0].slice(ndarray::s![start..end, ..]).to_owned();
        let needs = self.needs[a.0];
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, sink| {
                let mut full = Array2::zeros(vals.value(a).dim());
                full.slice_mut(ndarray::s![start..end, ..]).assign(g);
                sink(a, full);
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.vals[v.0].view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols");
        let needs = self.needs_any(parts);
        let widths: Vec<usize> = parts.iter().map(|v| self.vals[v.0].dim().1).collect();
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            value,
            needs,
            Some(Box::new(move |_vals, g, sink| {
                let mut c0 = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    sink(p, g.slice(ndarray::s![.., c0..c0 + w]).to_owned());
                    c0 += w;
                }
            })),
        )
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (m, n) = self.vals[a.0].dim();
        assert_eq!(m * n, rows * cols, "reshape size");
        let value =
            Array2::from_shape_vec((rows, cols), self.vals[a.0].iter().cloned().collect())
                .unwrap();
        let needs = self.needs[a.0];
        self.push(
            value,
            needs,
            Some(Box::new(move |_vals, g, sink| {
                sink(
                    a,
                    Array2::from_shape_vec((m, n), g.iter().cloned().collect()).unwrap(),
                );
            })),
        )
    }

    /// Per-row layer normalization with learnable gain/bias (`1 x N` each).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let x = &self.vals[a.0];
        let (m, n) = x.dim();
        assert_eq!(self.vals[gamma.0].dim(), (1, n), "layer_norm gamma");
        assert_eq!(self.vals[beta.0].dim(), (1, n), "layer_norm beta");
        let mut xhat = Array2::zeros((m, n));
        let mut inv_std = Vec::with_capacity(m);
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = row.iter().cloned().sum::<F>() / F::lit(n as f64);
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / F::lit(n as f64);
            let istd = (var + eps).sqrt().recip();
            inv_std.push(istd);
            for (j, &v) in row.iter().enumerate() {
                xhat[(i, j)] = (v - mean) * istd;
            }
        }
        let value = &xhat * &self.vals[gamma.0].broadcast((m, n)).unwrap()
            + &self.vals[beta.0].broadcast((m, n)).unwrap();
        let needs = self.needs_any(&[a, gamma, beta]);
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, sink| {
                let (m, n) = g.dim();
                let nf = F::lit(n as f64);
                sink(beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                sink(gamma, (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let gm = vals.value(gamma);
                let mut gx = Array2::zeros((m, n));
                for i in 0..m {
                    let mut d_sum = F::zero();
                    let mut dxhat_sum = F::zero();
                    for j in 0..n {
                        let d = g[(i, j)] * gm[(0, j)];
                        d_sum = d_sum + d;
                        dxhat_sum = dxhat_sum + d * xhat[(i, j)];
                    }
                    let mean_d = d_sum / nf;
                    let mean_dx = dxhat_sum / nf;
                    for j in 0..n {
                        let d = g[(i, j)] * gm[(0, j)];
                        gx[(i, j)] = inv_std[i] * (d - mean_d - xhat[(i, j)] * mean_dx);
                    }
                }
                sink(a, gx);
            })),
        )
    }

    /// Batch normalization over rows using batch statistics (training path).
    /// Also returns the per-column batch mean and (population) variance so the
    /// caller can maintain running statistics.
    pub fn batch_norm_train(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    ) -> (Var, Vec<F>, Vec<F>) {
        let x = &self.vals[a.0];
        let (m, n) = x.dim();
        assert_eq!(self.vals[gamma.0].dim(), (1, n), "batch_norm gamma");
        assert_eq!(self.vals[beta.0].dim(), (1, n), "batch_norm beta");
        let mf = F::lit(m as f64);
        let mut mean = vec![F::zero(); n];
        let mut var = vec![F::zero(); n];
        for j in 0..n {
            let mu = x.column(j).iter().cloned().sum::<F>() / mf;
            let v2 = x.column(j).iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / mf;
            mean[j] = mu;
            var[j] = v2;
        }
        let mut xhat = Array2::zeros((m, n));
        let mut inv_std = vec![F::zero(); n];
        for j in 0..n {
            inv_std[j] = (var[j] + eps).sqrt().recip();
            for i in 0..m {
                xhat[(i, j)] = (x[(i, j)] - mean[j]) * inv_std[j];
            }
        }
        let value = &xhat * &self.vals[gamma.0].broadcast((m, n)).unwrap()
            + &self.vals[beta.0].broadcast((m, n)).unwrap();
        let needs = self.needs_any(&[a, gamma, beta]);
        let mean_out = mean;
        let var_out = var.clone();
        let out = self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, sink| {
                let (m, n) = g.dim();
                let mf = F::lit(m as f64);
                sink(beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                sink(gamma, (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let gm = vals.value(gamma);
                let mut gx = Array2::zeros((m, n));
                for j in 0..n {
                    let mut d_sum = F::zero();
                    let mut dxhat_sum = F::zero();
                    for i in 0..m {
                        let d = g[(i, j)] * gm[(0, j)];
                        d_sum = d_sum + d;
                        dxhat_sum = dxhat_sum + d * xhat[(i, j)];
                    }
                    let mean_d = d_sum / mf;
                    let mean_dx = dxhat_sum / mf;
                    for i in 0..m {
                        let d = g[(i, j)] * gm[(0, j)];
                        gx[(i, j)] = inv_std[j] * (d - mean_d - xhat[(i, j)] * mean_dx);
                    }
                }
                sink(a, gx);
            })),
        );
        (out, mean_out, var_out)
    }

    /// Batch normalization with fixed (running) statistics: pointwise affine.
    pub fn batch_norm_eval(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        mean: &[F],
        var: &[F],
        eps: F,
    ) -> Var {
        let x = &self.vals[a.0];
        let (m, n) = x.dim();
        assert_eq!(mean.len(), n, "batch_norm_eval mean length");
        assert_eq!(var.len(), n, "batch_norm_eval var length");
        let inv_std: Vec<F> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let mut xhat = Array2::zeros((m, n));
        for j in 0..n {
            for i in 0..m {
                xhat[(i, j)] = (x[(i, j)] - mean[j]) * inv_std[j];
            }
        }
        let value = &xhat * &self.vals[gamma.0].broadcast((m, n)).unwrap()
            + &self.vals[beta.0].broadcast((m, n)).unwrap();
        let needs = self.needs_any(&[a, gamma, beta]);
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, sink| {
                let (m, n) = g.dim();
                sink(beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                sink(gamma, (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                let gm = vals.value(gamma);
                let mut gx = Array2::zeros((m, n));
                for j in 0..n {
                    for i in 0..m {
                        gx[(i, j)] = g[(i, j)] * gm[(0, j)] * inv_std[j];
                    }
                }
                sink(a, gx);
            })),
        )
    }

    /// Inverted dropout; identity in eval mode or at `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if self.mode == Mode::Eval || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let scale = F::lit(1.0 / keep);
        let dim = self.vals[a.0].dim();
        let rng = &mut self.rng;
        let mask = Array2::from_shape_simple_fn(dim, || {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                F::zero()
            }
        });
        let value = &self.vals[a.0] * &mask;
        let needs = self.needs[a.0];
        self.push(
            value,
            needs,
            Some(Box::new(move |_vals, g, sink| {
                sink(a, g * &mask);
            })),
        )
    }

    /// Mean of the `k` largest entries of a `T x 1` column vector.
    /// Ties break toward the lower index, so the selection is deterministic.
    pub fn topk_mean(&mut self, a: Var, k: usize) -> Var {
        let x = &self.vals[a.0];
        let (t, one) = x.dim();
        assert_eq!(one, 1, "topk_mean expects a column vector");
        assert!(k >= 1 && k <= t, "topk_mean k out of range");
        let mut idx: Vec<usize> = (0..t).collect();
        idx.sort_by(|&i, &j| x[(j, 0)].partial_cmp(&x[(i, 0)]).unwrap().then(i.cmp(&j)));
        idx.truncate(k);
        let kf = F::lit(k as f64);
        let value = idx.iter().map(|&i| x[(i, 0)]).sum::<F>() / kf;
        let needs = self.needs[a.0];
        self.push(
            Array2::from_elem((1, 1), value),
            needs,
            Some(Box::new(move |vals, g, sink| {
                let mut gx = Array2::zeros(vals.value(a).dim());
                for &i in &idx {
                    gx[(i, 0)] = g[(0, 0)] / kf;
                }
                sink(a, gx);
            })),
        )
    }

    /// Sum of weighted binary cross-entropy on logits:
    /// `sum_ij w_ij * (max(z,0) - z*t + ln(1 + exp(-|z|)))`.
    pub fn bce_logits_sum(&mut self, z: Var, targets: Array2<F>, weights: Array2<F>) -> Var {
        let zv = &self.vals[z.0];
        assert_eq!(zv.dim(), targets.dim(), "bce targets shape");
        assert_eq!(zv.dim(), weights.dim(), "bce weights shape");
        let mut total = F::zero();
        for ((&zi, &ti), &wi) in zv.iter().zip(targets.iter()).zip(weights.iter()) {
            let term = zi.max(F::zero()) - zi * ti + (F::one() + (-zi.abs()).exp()).ln();
            total = total + wi * term;
        }
        let needs = self.needs[z.0];
        self.push(
            Array2::from_elem((1, 1), total),
            needs,
            Some(Box::new(move |vals, g, sink| {
                let zv = vals.value(z);
                let cols = zv.dim().1;
                let mut gz = Array2::zeros(zv.dim());
                for (i, ((&zi, &ti), &wi)) in zv
                    .iter()
                    .zip(targets.iter())
                    .zip(weights.iter())
                    .enumerate()
                {
                    gz[(i / cols, i % cols)] = g[(0, 0)] * wi * (sigmoid_scalar(zi) - ti);
                }
                sink(z, gz);
            })),
        )
    }

    /// Row-wise backward differences: row 0 is zero, row `t` is `x_t - x_{t-1}`.
    pub fn delta_rows(&mut self, a: Var) -> Var {
        let x = &self.vals[a.0];
        let (t, d) = x.dim();
        let mut value = Array2::zeros((t, d));
        for i in 1..t {
            for j in 0..d {
                value[(i, j)] = x[(i, j)] - x[(i - 1, j)];
            }
        }
        let needs = self.needs[a.0];
        self.push(
            value,
            needs,
            Some(Box::new(move |vals, g, sink| {
                let (t, d) = vals.value(a).dim();
                let mut gx = Array2::zeros((t, d));
                for i in 0..t {
                    for j in 0..d {
                        let mut v = F::zero();
                        if i >= 1 {
                            v = v + g[(i, j)];
                        }
                        if i + 1 < t {
                            v = v - g[(i + 1, j)];
                        }
                        gx[(i, j)] = v;
                    }
                }
                sink(a, gx);
            })),
        )
    }

    /// Backward pass from a `1 x 1` scalar root. Gradients are retained for
    /// leaf nodes only; intermediate gradients are dropped as soon as they
    /// have been propagated.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(
            self.vals[root.0].dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Array2<F>>> = (0..self.vals.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), F::one()));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.needs[i] {
                continue;
            }
            if let Some(back) = &self.backs[i] {
                let g = grads[i].take().unwrap();
                let needs = &self.needs;
                let view = TapeView { vals: &self.vals };
                back(view, &g, &mut |j: Var, contrib: Array2<F>| {
                    if !needs[j.0] {
                        return;
                    }
                    match &mut grads[j.0] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                });
            }
        }
        Gradients { grads }
    }
}

pub fn sigmoid_scalar<F: Element>(x: F) -> F {
    if x >= F::zero() {
        (F::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

// GELU, tanh approximation: 0.5 x (1 + tanh(c0 (x + c1 x^3))).
const GELU_C0: f64 = 0.797_884_560_802_865_4;
const GELU_C1: f64 = 0.044_715;

pub fn gelu_scalar<F: Element>(x: F) -> F {
    let c0 = F::lit(GELU_C0);
    let c1 = F::lit(GELU_C1);
    let half = F::lit(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad_scalar<F: Element>(x: F) -> F {
    let c0 = F::lit(GELU_C0);
    let c1 = F::lit(GELU_C1);
    let half = F::lit(0.5);
    let three = F::lit(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c0 * (F::one() + three * c1 * x * x)
}
