//! Central-difference gradient checking.
//!
//! The numerical oracle never touches `backward`: it re-runs the forward
//! closure on perturbed copies of the inputs, so it independently validates
//! every backward rule. Callers build the forward pass inside a closure that
//! receives a fresh [`Graph`] and leaf [`Var`]s for the inputs; stochastic
//! nodes (dropout) stay deterministic across evaluations because every graph
//! is constructed with the same seed.

use super::{Element, Graph, Mode, Var};
use ndarray::Array2;

/// Forward pass under test: build nodes on `g` from the given input leaves
/// and return a `1 x 1` scalar output.
pub type Forward<F> = dyn Fn(&mut Graph<F>, &[Var]) -> Var;

/// Result of comparing one analytic gradient against the numerical oracle.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Index of the input the gradient is taken with respect to.
    pub input: usize,
    /// Largest elementwise error, scaled as
    /// `|a - n| / max(1e-6, |a|, |n|)`.
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub argmax: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn run_forward<F: Element>(f: &Forward<F>, mode: Mode, seed: u64, inputs: &[Array2<F>]) -> F {
    let mut g = Graph::with_seed(mode, seed);
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &vars);
    let v = g.value(out);
    assert_eq!(v.dim(), (1, 1), "forward under check must return a scalar");
    v[(0, 0)]
}

/// Central-difference gradient of `f` with respect to each input.
pub fn numerical_grad<F: Element>(
    f: &Forward<F>,
    mode: Mode,
    seed: u64,
    inputs: &[Array2<F>],
    step: f64,
) -> Vec<Array2<F>> {
    let h = F::lit(step);
    let two_h = F::lit(2.0 * step);
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Array2::zeros(inputs[i].dim());
        for idx in 0..inputs[i].len() {
            let mut plus: Vec<Array2<F>> = inputs.to_vec();
            let mut minus: Vec<Array2<F>> = inputs.to_vec();
            let (r, c) = (idx / inputs[i].dim().1, idx % inputs[i].dim().1);
            plus[i][(r, c)] = plus[i][(r, c)] + h;
            minus[i][(r, c)] = minus[i][(r, c)] - h;
            let fp = run_forward(f, mode, seed, &plus);
            let fm = run_forward(f, mode, seed, &minus);
            grad[(r, c)] = (fp - fm) / two_h;
        }
        grads.push(grad);
    }
    grads
}

/// Compare analytic gradients against the central-difference oracle for every
/// input. Returns one report per input (worst element each).
pub fn check_gradients<F: Element>(
    f: &Forward<F>,
    mode: Mode,
    seed: u64,
    inputs: &[Array2<F>],
    step: f64,
) -> Vec<GradReport> {
    // Analytic pass.
    let mut g = Graph::with_seed(mode, seed);
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let numeric = numerical_grad(f, mode, seed, inputs, step);

    let mut reports = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let zero = Array2::zeros(inputs[i].dim());
        let analytic = grads.wrt(*var).unwrap_or(&zero);
        let mut worst = GradReport {
            input: i,
            max_rel_err: 0.0,
            argmax: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (idx, (&a, &n)) in analytic.iter().zip(numeric[i].iter()).enumerate() {
            let a = a.as_f64();
            let n = n.as_f64();
            let denom = a.abs().max(n.abs()).max(1e-6);
            let err = (a - n).abs() / denom;
            if err > worst.max_rel_err {
                worst.max_rel_err = err;
                worst.argmax = idx;
                worst.analytic = a;
                worst.numeric = n;
            }
        }
        reports.push(worst);
    }
    reports
}

/// Assert that every input's analytic gradient matches the oracle.
///
/// Panics with a description of the worst element on failure; intended for
/// use inside tests.
pub fn assert_gradients_close<F: Element>(
    f: &Forward<F>,
    mode: Mode,
    seed: u64,
    inputs: &[Array2<F>],
    step: f64,
    tol: f64,
) {
    for report in check_gradients(f, mode, seed, inputs, step) {
        assert!(
            report.within(tol),
            "gradient mismatch on input {} at flat index {}: analytic {} vs numeric {} (rel err {:.3e}, tol {:.1e})",
            report.input,
            report.argmax,
            report.analytic,
            report.numeric,
            report.max_rel_err,
            tol
        );
    }
}
