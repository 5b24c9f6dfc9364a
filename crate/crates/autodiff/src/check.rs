//! Central finite-difference gradient checking.

use crate::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_abs_err: f64,
    /// `max |analytic - numeric| / max |numeric|`.
    pub rel_err: f64,
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `h` for every input element.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> GradCheck
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars);
    assert_eq!(out.value().numel(), 1, "gradient check needs a scalar output");
    let grads = g.backward(out);
    let eval = |xs: &[Tensor]| {
        let g = Graph::inference();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).value().item()
    };
    let mut max_abs_err: f64 = 0.0;
    let mut max_num: f64 = 0.0;
    let mut xs: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[i];
            xs[k].data_mut()[i] = x0 + h;
            let fp = eval(&xs);
            xs[k].data_mut()[i] = x0 - h;
            let fm = eval(&xs);
            xs[k].data_mut()[i] = x0;
            let num = (fp - fm) / (2.0 * h);
            max_abs_err = max_abs_err.max((num - analytic.data()[i]).abs());
            max_num = max_num.max(num.abs());
        }
    }
    GradCheck { max_abs_err, rel_err: max_abs_err / max_num.max(1e-12) }
}
