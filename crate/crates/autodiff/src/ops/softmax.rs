//! Softmax along one axis, optionally restricted by a mask.

use crate::{Tensor, Var};

fn softmax_lanes(x: &Tensor, axis: usize, mask: Option<&[bool]>) -> Tensor {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    let keep = |idx: usize| mask.is_none_or(|m| m[idx % m.len()]);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * dim * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for d in 0..dim {
                let idx = base + d * inner;
                if keep(idx) {
                    mx = mx.max(xd[idx]);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for d in 0..dim {
                let idx = base + d * inner;
                if keep(idx) {
                    let e = (xd[idx] - mx).exp();
                    out[idx] = e;
                    z += e;
                }
            }
            for d in 0..dim {
                out[base + d * inner] /= z;
            }
        }
    }
    Tensor::from_vec(shape, out)
}

fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let shape = y.shape();
    let outer: usize = shape[..axis].iter().product();
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let (yd, gd) = (y.data(), g.data());
    let mut gx = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * dim * inner + i;
            let dot: f64 = (0..dim).map(|d| yd[base + d * inner] * gd[base + d * inner]).sum();
            for d in 0..dim {
                let idx = base + d * inner;
                gx[idx] = yd[idx] * (gd[idx] - dot);
            }
        }
    }
    Tensor::from_vec(shape, gx)
}

impl<'g> Var<'g> {
    pub fn softmax(self, axis: usize) -> Var<'g> {
        self.masked_softmax(axis, None)
    }

    /// Softmax where positions with a false mask get probability zero.
    ///
    /// The mask is indexed by flat position modulo its length, so a mask over
    /// the trailing dimensions is shared by all leading ones. Lanes that are
    /// fully masked produce zeros.
    pub fn masked_softmax(self, axis: usize, mask: Option<&[bool]>) -> Var<'g> {
        let y = std::rc::Rc::new(softmax_lanes(&self.value(), axis, mask));
        let y2 = y.clone();
        self.graph.custom(&[self], (*y).clone(), move |g, _| vec![Some(softmax_backward(&y2, g, axis))])
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, Tensor};

    #[test]
    fn rows_sum_to_one_and_mask_zeroes() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]));
        let s = x.softmax(1).value();
        assert!((s.data()[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mask = [true, false, true, false, false, false];
        let m = x.masked_softmax(1, Some(&mask)).value();
        assert_eq!(m.data()[1], 0.0);
        assert!((m.data()[0] + m.data()[2] - 1.0).abs() < 1e-12);
        assert_eq!(&m.data()[3..], &[0.0, 0.0, 0.0]);
    }
}
