//! Batched matrix products on top of `matrixmultiply`.

use crate::{Tensor, Var};

/// `c = beta * c + op(a) * op(b)` for row-major stored matrices.
///
/// `a` is stored as `m x k` (or `k x m` when `ta`), `b` as `k x n` (or `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are at least as long as the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
}

fn mat_dims(a: &[usize], ta: bool, b: &[usize], tb: bool) -> MatDims {
    assert!(a.len() >= 2 && b.len() >= 2, "matmul needs matrices, got {a:?} x {b:?}");
    let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
    let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dims: {a:?}{} x {b:?}{}", if ta { "ᵀ" } else { "" }, if tb { "ᵀ" } else { "" });
    let batch_a: usize = a[..a.len() - 2].iter().product();
    let b_batched = b.len() > 2;
    if b_batched {
        assert_eq!(&a[..a.len() - 2], &b[..b.len() - 2], "matmul batch dims");
    }
    MatDims {
        batch: batch_a,
        m,
        k,
        n,
        b_batched,
    }
}

pub(crate) fn matmul_tensors(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let d = mat_dims(a.shape(), ta, b.shape(), tb);
    let mut shape = a.shape()[..a.ndim() - 2].to_vec();
    shape.extend([d.m, d.n]);
    let mut out = vec![0.0; d.batch * d.m * d.n];
    let (sa, sb, sc) = (d.m * d.k, if d.b_batched { d.k * d.n } else { 0 }, d.m * d.n);
    for i in 0..d.batch {
        gemm(
            d.m,
            d.k,
            d.n,
            &a.data()[i * sa..],
            ta,
            &b.data()[i * sb..],
            tb,
            0.0,
            &mut out[i * sc..(i + 1) * sc],
        );
    }
    Tensor::from_vec(&shape, out)
}

impl<'g> Var<'g> {
    /// Batched `op(self) · op(other)`; `other` may be a plain matrix shared by
    /// every batch entry.
    pub fn matmul_t(self, ta: bool, other: Var<'g>, tb: bool) -> Var<'g> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let out = matmul_tensors(&a, ta, &b, tb);
        self.graph.custom(&[self, other], out, move |g, need| {
            let d = mat_dims(a.shape(), ta, b.shape(), tb);
            let ga = need[0].then(|| {
                // dA = dC · op(B)ᵀ, laid out to match A's storage.
                let mut ga = vec![0.0; a.numel()];
                let sb = if d.b_batched { d.k * d.n } else { 0 };
                for i in 0..d.batch {
                    let gi = &g.data()[i * d.m * d.n..];
                    let bi = &b.data()[i * sb..];
                    let gai = &mut ga[i * d.m * d.k..(i + 1) * d.m * d.k];
                    if ta {
                        // A stored k x m: dA = op(B) · dCᵀ
                        gemm(d.k, d.n, d.m, bi, tb, gi, true, 0.0, gai);
                    } else {
                        gemm(d.m, d.n, d.k, gi, false, bi, !tb, 0.0, gai);
                    }
                }
                Tensor::from_vec(a.shape(), ga)
            });
            let gb = need[1].then(|| {
                let mut gbv = vec![0.0; b.numel()];
                let sb = if d.b_batched { d.k * d.n } else { 0 };
                for i in 0..d.batch {
                    let gi = &g.data()[i * d.m * d.n..];
                    let ai = &a.data()[i * d.m * d.k..];
                    let gbi = &mut gbv[i * sb..i * sb + d.k * d.n];
                    // Shared B accumulates across the batch.
                    let beta = if d.b_batched || i == 0 { 0.0 } else { 1.0 };
                    if tb {
                        // B stored n x k: dB = dCᵀ · op(A)
                        gemm(d.n, d.m, d.k, gi, true, ai, ta, beta, gbi);
                    } else {
                        gemm(d.k, d.m, d.n, ai, !ta, gi, false, beta, gbi);
                    }
                }
                Tensor::from_vec(b.shape(), gbv)
            });
            vec![ga, gb]
        })
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.matmul_t(false, other, false)
    }
}
