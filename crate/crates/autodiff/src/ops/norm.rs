//! Normalisation along a single axis.

use crate::{Tensor, Var};

impl<'g> Var<'g> {
    /// `(x - mean) / sqrt(var + eps)` along `axis`, without affine parameters.
    pub fn normalize_axis(self, axis: usize, eps: f64) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = x.data();
        let mut y = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                let mean = (0..dim).map(|d| xd[base + d * inner]).sum::<f64>() / dim as f64;
                let var = (0..dim).map(|d| (xd[base + d * inner] - mean).powi(2)).sum::<f64>() / dim as f64;
                let r = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = r;
                for d in 0..dim {
                    y[base + d * inner] = (xd[base + d * inner] - mean) * r;
                }
            }
        }
        let y = Tensor::from_vec(&shape, y);
        let yc = y.clone();
        self.graph.custom(&[self], y, move |g, _| {
            let (yd, gd) = (yc.data(), g.data());
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * dim * inner + i;
                    let (mut mg, mut mgy) = (0.0, 0.0);
                    for d in 0..dim {
                        let idx = base + d * inner;
                        mg += gd[idx];
                        mgy += gd[idx] * yd[idx];
                    }
                    mg /= dim as f64;
                    mgy /= dim as f64;
                    let r = inv_std[o * inner + i];
                    for d in 0..dim {
                        let idx = base + d * inner;
                        gx[idx] = r * (gd[idx] - mg - yd[idx] * mgy);
                    }
                }
            }
            vec![Some(Tensor::from_vec(&shape, gx))]
        })
    }
}
