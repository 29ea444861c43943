//! Central finite-difference gradient checking in `f64`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

/// Compare autodiff gradients of the scalar `f(inputs)` against central
/// differences with step `1e-5`. Relative error uses
/// `|a - n| / max(|a|, |n|, 1e-3)` so near-zero entries are judged absolutely.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    check_gradients_with_step(inputs, 1e-5, f)
}

pub fn check_gradients_with_step<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let g = Graph::inference();
        let vars: Vec<_> = vals.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).value().data()[0]
    };
    let g = Graph::inference();
    let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let fm = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-3);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    report
}
