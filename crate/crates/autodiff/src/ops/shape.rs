//! Reductions and shape manipulation.

use crate::{Tensor, Var};

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'g> Var<'g> {
    /// Sum of all elements as a one-element tensor.
    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.graph.custom(&[self], out, move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums along `axis`, keeping it as a size-one dimension.
    pub fn sum_axis(self, axis: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (outer, dim, inner) = split_axis(&shape, axis);
        let xd = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &xd[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut oshape = shape.clone();
        oshape[axis] = 1;
        self.graph
            .custom(&[self], Tensor::from_vec(&oshape, out), move |g, _| {
                let gd = g.data();
                let mut gx = Vec::with_capacity(outer * dim * inner);
                for o in 0..outer {
                    for _ in 0..dim {
                        gx.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::from_vec(&shape, gx))]
            })
    }

    pub fn mean_axis(self, axis: usize) -> Var<'g> {
        let n = self.value().dim(axis) as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let src = x.shape().to_vec();
        let out = x.reshape(shape).expect("reshape");
        self.graph.custom(&[self], out, move |g, _| {
            vec![Some(g.reshape(&src).expect("reshape back"))]
        })
    }

    pub fn permute(self, perm: &[usize]) -> Var<'g> {
        let out = self.value().permute(perm).expect("permute");
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.graph.custom(&[self], out, move |g, _| {
            vec![Some(g.permute(&inverse).expect("inverse permute"))]
        })
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Var<'g> {
        let mut perm: Vec<usize> = (0..self.value().ndim()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = x.narrow(axis, start, len).expect("narrow");
        self.graph.custom(&[self], out, move |g, _| {
            let (outer, dim, inner) = split_axis(&shape, axis);
            let mut gx = vec![0.0; outer * dim * inner];
            let gd = g.data();
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_vec(&shape, gx))]
        })
    }

    pub fn cat(parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "cat of zero vars");
        if parts.len() == 1 {
            return parts[0];
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::cat(&refs, axis).expect("cat");
        let sizes: Vec<usize> = values.iter().map(|v| v.dim(axis)).collect();
        parts[0].graph.custom(parts, out, move |g, need| {
            let mut start = 0;
            sizes
                .iter()
                .zip(need)
                .map(|(&len, &n)| {
                    let piece = n.then(|| g.narrow(axis, start, len).expect("cat grad"));
                    start += len;
                    piece
                })
                .collect()
        })
    }
}
