//! Central finite-difference checks of the analytic backward passes.
//!
//! The numeric side only evaluates forward passes, so it is independent of
//! every backward rule it is used to check.

use crate::autograd::{Graph, Grads, ParamStore, Var};
use crate::tensor::Tensor;

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-300 {
        diff
    } else {
        diff / denom
    }
}

fn eval<F>(store: &ParamStore, f: &F) -> f64
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let mut g = Graph::frozen(store);
    let out = f(&mut g);
    g.value(out).item()
}

/// Compares analytic parameter gradients of the scalar built by `f` with
/// central differences of step `h`, probing every `stride`-th entry of
/// each parameter. Returns the relative error.
pub fn check_param_grads<F>(store: &ParamStore, h: f64, stride: usize, f: F) -> f64
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let mut grads = Grads::zeros_like(store);
    {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        g.backward(out).accumulate_params(&g, &mut grads);
    }
    let mut work = store.clone();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let stride = stride.max(1);
    for id in store.ids() {
        let len = store.get(id).len();
        // Offset the probe pattern per tensor so small tensors are covered.
        let start = id.0 % stride.min(len.max(1));
        for e in (start..len).step_by(stride) {
            let orig = work.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + h;
            let fp = eval(&work, &f);
            work.get_mut(id).data_mut()[e] = orig - h;
            let fm = eval(&work, &f);
            work.get_mut(id).data_mut()[e] = orig;
            numeric.push((fp - fm) / (2.0 * h));
            analytic.push(grads.get(id).data()[e]);
        }
    }
    relative_error(&analytic, &numeric)
}

/// Same check for the gradient with respect to an input tensor.
pub fn check_input_grad<F>(store: &ParamStore, x: &Tensor, h: f64, f: F) -> f64
where
    F: Fn(&mut Graph<'_>, Var) -> Var,
{
    let analytic = {
        let mut g = Graph::frozen(store);
        let xv = g.input_with_grad(x.clone());
        let out = f(&mut g, xv);
        let ng = g.backward(out);
        ng.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()))
    };
    let mut xp = x.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for e in 0..x.len() {
        let orig = xp.data()[e];
        let run = |v: f64, xp: &mut Tensor| {
            xp.data_mut()[e] = v;
            let mut g = Graph::frozen(store);
            let xv = g.input(xp.clone());
            let out = f(&mut g, xv);
            g.value(out).item()
        };
        let fp = run(orig + h, &mut xp);
        let fm = run(orig - h, &mut xp);
        xp.data_mut()[e] = orig;
        numeric.push((fp - fm) / (2.0 * h));
    }
    relative_error(analytic.data(), &numeric)
}
