//! Elementwise arithmetic with numpy-style broadcasting and unary maps.

use crate::tensor::{numel_of, strides_of};
use crate::{Tensor, Var};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("cannot broadcast {a:?} with {b:?}"),
        };
    }
    out
}

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let own = strides_of(shape);
    let mut s = vec![0; nd];
    for i in 0..shape.len() {
        let o = i + nd - shape.len();
        if shape[i] != 1 {
            s[o] = own[i];
        }
    }
    s
}

/// Visits every output index with the matching flat offsets into `a` and `b`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = out.len();
    let n = numel_of(out);
    if n == 0 {
        return;
    }
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let last = nd - 1;
    let inner = out[last];
    let (ia, ib) = (sa[last], sb[last]);
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut flat = 0;
    while flat < n {
        for k in 0..inner {
            f(flat + k, oa + k * ia, ob + k * ib);
        }
        flat += inner;
        for ax in (0..last).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    if b.numel() == 1 && a.ndim() >= b.ndim() {
        let s = b.data()[0];
        return a.map(|x| f(x, s));
    }
    let out = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let (da, db) = (a.data(), b.data());
    let mut data = vec![0.0; numel_of(&out)];
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
    Tensor::from_vec(&out, data)
}

/// Sums `g` down to `shape` (the inverse of broadcasting).
pub fn sum_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let out = g.shape().to_vec();
    let ss = broadcast_strides(shape, &out);
    let zero = vec![0; out.len()];
    let mut acc = vec![0.0; numel_of(shape)];
    let gd = g.data();
    for_each_broadcast(&out, &ss, &zero, |o, i, _| acc[i] += gd[o]);
    Tensor::from_vec(shape, acc)
}

impl<'g> Var<'g> {
    fn binary(
        self,
        other: Var<'g>,
        f: impl Fn(f64, f64) -> f64,
        grads: impl Fn(&Tensor, &Tensor, &Tensor, &[bool]) -> (Option<Tensor>, Option<Tensor>) + 'static,
    ) -> Var<'g> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let out = broadcast_zip(&a, &b, f);
        self.graph.custom(&[self, other], out, move |g, need| {
            let (ga, gb) = grads(g, &a, &b, need);
            vec![
                ga.map(|t| sum_to_shape(&t, a.shape())),
                gb.map(|t| sum_to_shape(&t, b.shape())),
            ]
        })
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |x, y| x + y, |g, _, _, need| {
            (need[0].then(|| g.clone()), need[1].then(|| g.clone()))
        })
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |x, y| x - y, |g, _, _, need| {
            (need[0].then(|| g.clone()), need[1].then(|| g.map(|v| -v)))
        })
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |x, y| x * y, |g, a, b, need| {
            (
                need[0].then(|| broadcast_zip(g, b, |g, b| g * b)),
                need[1].then(|| broadcast_zip(g, a, |g, a| g * a)),
            )
        })
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |x, y| x / y, |g, a, b, need| {
            (
                need[0].then(|| broadcast_zip(g, b, |g, b| g / b)),
                need[1].then(|| {
                    // d(a/b)/db = -a / b^2
                    let ab = broadcast_zip(a, b, |a, b| -a / (b * b));
                    broadcast_zip(g, &ab, |g, q| g * q)
                }),
            )
        })
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let x = self.value();
        let y = std::rc::Rc::new(x.map(f));
        let out = (*y).clone();
        self.graph.custom(&[self], out, move |g, _| {
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), d))]
        })
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let out = self.value().map(|x| x * s);
        self.graph
            .custom(&[self], out, move |g, _| vec![Some(g.map(|v| v * s))])
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let out = self.value().map(|x| x + s);
        self.graph.custom(&[self], out, |g, _| vec![Some(g.clone())])
    }

    pub fn sqr(self) -> Var<'g> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn log2(self) -> Var<'g> {
        self.unary(f64::log2, |x, _| 1.0 / (x * std::f64::consts::LN_2))
    }

    pub fn powf(self, p: f64) -> Var<'g> {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(f64::abs, |x, _| x.signum())
    }

    pub fn softplus(self) -> Var<'g> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// Exact (erf-based) Gaussian error linear unit.
    pub fn gelu(self) -> Var<'g> {
        self.unary(gelu, |x, _| {
            std_normal_cdf(x) + x * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
        })
    }

    pub fn atanh(self) -> Var<'g> {
        self.unary(f64::atanh, |x, _| 1.0 / (1.0 - x * x))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    /// Standard normal CDF.
    pub fn std_normal_cdf(self) -> Var<'g> {
        self.unary(std_normal_cdf, |x, _| {
            (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
        })
    }

    /// Rounds to the nearest integer (ties away from zero) in the forward pass
    /// and passes the gradient through unchanged.
    pub fn round_ste(self) -> Var<'g> {
        let out = self.value().map(f64::round);
        self.graph.custom(&[self], out, |g, _| vec![Some(g.clone())])
    }

    /// `max(x, bound)` whose gradient still flows where it would push `x` upwards.
    pub fn lower_bound(self, bound: f64) -> Var<'g> {
        let x = self.value();
        let out = x.map(|v| v.max(bound));
        self.graph.custom(&[self], out, move |g, _| {
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &x)| if x >= bound || g < 0.0 { g } else { 0.0 })
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), d))]
        })
    }
}

impl<'g> std::ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        Var::add(self, rhs)
    }
}

impl<'g> std::ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        Var::sub(self, rhs)
    }
}

impl<'g> std::ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        Var::mul(self, rhs)
    }
}

impl<'g> std::ops::Div for Var<'g> {
    type Output = Var<'g>;
    fn div(self, rhs: Var<'g>) -> Var<'g> {
        Var::div(self, rhs)
    }
}

impl<'g> std::ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        Var::neg(self)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    #[test]
    fn broadcast_add_and_reduce() {
        let g = Graph::new();
        let a = g.leaf(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let b = g.leaf(Tensor::from_vec(&[1, 3, 1], vec![10.0, 20.0, 30.0]));
        let c = a + b;
        assert_eq!(c.value().data()[..4], [10.0, 11.0, 22.0, 23.0]);
        let loss = c.sum();
        let grads = g.backward(loss);
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 4.0, 4.0]);
        assert_eq!(grads.get(a).unwrap().data(), &[1.0; 12]);
    }

    #[test]
    fn sum_to_shape_leading_axes() {
        let t = Tensor::from_fn(&[2, 2, 3], |i| i as f64);
        let s = sum_to_shape(&t, &[3]);
        assert_eq!(s.data(), &[0.0 + 3.0 + 6.0 + 9.0, 22.0, 26.0]);
    }

    #[test]
    fn round_ste_has_identity_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![0.4, 1.6, -2.5]));
        let y = x.round_ste();
        assert_eq!(y.value().data(), &[0.0, 2.0, -3.0]);
        let grads = g.backward(y.scale(3.0).sum());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert!((std_normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((std_normal_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
    }
}
