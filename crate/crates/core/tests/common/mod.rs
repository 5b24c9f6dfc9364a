#![allow(dead_code)]

use lic_autodiff::{Graph, Tensor, Var};
use lic_core::params::{Bound, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Adds `U(-s, s)` noise to every parameter, so zero-initialised layers
/// become live.
pub fn perturb_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, s: f64) {
    for t in store.values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-s..s);
        }
    }
}

/// Sets every parameter whose name satisfies `pred` to zero.
pub fn zero_params(store: &mut ParamStore, pred: impl Fn(&str) -> bool) -> usize {
    let ids: Vec<usize> = (0..store.len()).filter(|&i| pred(store.name(i))).collect();
    for &i in &ids {
        for v in store.value_mut(i).data_mut() {
            *v = 0.0;
        }
    }
    ids.len()
}

fn weights(n: usize) -> Tensor {
    Tensor::from_fn(&[n], |i| (1.3 * i as f64 + 0.7).sin())
}

fn project<'g>(out: Var<'g>) -> Var<'g> {
    let n = out.value().numel();
    let w = out.graph().constant(weights(n).reshape(&out.shape()).unwrap());
    (out * w).sum()
}

#[derive(Debug)]
pub struct ModuleCheck {
    pub input_rel: f64,
    pub param_rel: f64,
    pub checked: usize,
}

impl ModuleCheck {
    pub fn worst(&self) -> f64 {
        self.input_rel.max(self.param_rel)
    }
}

fn rel(errs: &[(f64, f64)]) -> f64 {
    let abs = errs.iter().map(|e| e.0).fold(0.0, f64::max);
    let num = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    abs / num.max(1e-12)
}

/// Central-difference check of a module's gradients with respect to its
/// inputs and every parameter it touches. At most `per_tensor` entries of each
/// tensor are probed.
pub fn check_module<F>(store: &ParamStore, inputs: &[Tensor], per_tensor: usize, f: F) -> ModuleCheck
where
    F: for<'g> Fn(&Bound<'g>, &[Var<'g>]) -> Var<'g>,
{
    let h = 1e-5;
    let g = Graph::new();
    let p = Bound::new(&g, store);
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = project(f(&p, &vars));
    let mut grads = g.backward(loss);
    let input_grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let param_grads = p.collect_grads(&mut grads);

    let eval = |store: &ParamStore, xs: &[Tensor]| {
        let g = Graph::inference();
        let p = Bound::new(&g, store);
        let vars: Vec<Var<'_>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        project(f(&p, &vars)).value().item()
    };
    let probes = |n: usize| -> Vec<usize> {
        let step = n.div_ceil(per_tensor).max(1);
        (0..n).step_by(step).collect()
    };
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    let mut in_errs = Vec::new();
    for k in 0..xs.len() {
        for i in probes(xs[k].numel()) {
            let x0 = xs[k].data()[i];
            xs[k].data_mut()[i] = x0 + h;
            let fp = eval(store, &xs);
            xs[k].data_mut()[i] = x0 - h;
            let fm = eval(store, &xs);
            xs[k].data_mut()[i] = x0;
            let num = (fp - fm) / (2.0 * h);
            in_errs.push(((num - input_grads[k].data()[i]).abs(), num.abs()));
            checked += 1;
        }
    }
    let mut s = store.clone();
    let mut p_errs = Vec::new();
    for (id, grad) in param_grads.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for i in probes(grad.numel()) {
            let x0 = s.value(id).data()[i];
            s.value_mut(id).data_mut()[i] = x0 + h;
            let fp = eval(&s, inputs);
            s.value_mut(id).data_mut()[i] = x0 - h;
            let fm = eval(&s, inputs);
            s.value_mut(id).data_mut()[i] = x0;
            let num = (fp - fm) / (2.0 * h);
            p_errs.push(((num - grad.data()[i]).abs(), num.abs()));
            checked += 1;
        }
    }
    ModuleCheck { input_rel: rel(&in_errs), param_rel: rel(&p_errs), checked }
}

/// Wraps plain check functions so they run both as `#[test]`s and from the
/// acceptance runner through `checks::ALL`.
#[allow(unused_macros)]
macro_rules! suite {
    ($($(#[$m:meta])* fn $name:ident() $body:block)*) => {
        pub(crate) mod checks {
            #![allow(unused_imports)]
            use super::*;
            $($(#[$m])* pub(crate) fn $name() $body)*
            #[allow(dead_code)]
            pub(crate) const ALL: &[(&str, fn())] = &[$((stringify!($name), $name as fn())),*];
        }
        $(#[cfg(test)] #[test] fn $name() { checks::$name() })*
    };
}
