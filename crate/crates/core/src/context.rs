//! Context extractors of the multi-reference entropy model: linear attention,
//! 2-D rotary position embedding, windowed checkerboard attention, channel
//! reweighting and the inter/intra-slice context branches.

use lic_autodiff::{Tensor, Var};

use crate::config::CodecConfig;
use crate::latent::CheckerboardMask;
use crate::nn_blocks::{check_channels, Conv2d, Gate};
use crate::params::{Bound, Init, ParamId, Scope};
use crate::{Error, Result};

/// `[B, c, h, w]` feature map to a `[B, h*w, c]` token sequence.
pub fn to_tokens(x: Var<'_>) -> Var<'_> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]]).permute(&[0, 2, 1])
}

pub fn from_tokens(x: Var<'_>, h: usize, w: usize) -> Var<'_> {
    let s = x.shape();
    x.permute(&[0, 2, 1]).reshape(&[s[0], s[2], h, w])
}

fn expand_mask(mask: &[bool], c: usize) -> Vec<bool> {
    mask.iter().flat_map(|&m| std::iter::repeat_n(m, c)).collect()
}

/// `Softmax2(Q) (Softmax1(K)^T V)` for `[B, L, c]` sequences: queries are
/// normalised over channels, keys over positions. `key_mask` restricts the
/// key positions that take part.
pub fn linear_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, key_mask: Option<&[bool]>) -> Result<Var<'g>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || ks[1] != vs[1] || ks[0] != vs[0] {
        return Err(Error::Shape(format!("linear_attention: Q {qs:?}, K {ks:?}, V {vs:?}")));
    }
    if let Some(m) = key_mask {
        if m.len() != ks[1] {
            return Err(Error::Shape(format!("key mask of {} positions for {} keys", m.len(), ks[1])));
        }
    }
    let sq = q.softmax(2);
    let expanded = key_mask.map(|m| expand_mask(m, ks[2]));
    let sk = k.masked_softmax(1, expanded.as_deref());
    let kv = sk.matmul_t(true, v, false);
    Ok(sq.matmul(kv))
}

/// Initial per-group angles `10000^(-2g/c)`.
pub fn rope_init(c: usize) -> Vec<f64> {
    (0..c / 2).map(|g| 10000f64.powf(-2.0 * g as f64 / c as f64)).collect()
}

/// `(x, y)` coordinates of a row-major `h x w` grid.
pub fn grid_positions(h: usize, w: usize) -> Vec<(f64, f64)> {
    (0..h * w).map(|k| ((k % w) as f64, (k / w) as f64)).collect()
}

/// Rotates channel pair `(2g, 2g+1)` of every token by
/// `m_x * theta_x[g] + m_y * theta_y[g]` (column-vector convention).
pub fn apply_rope2d<'g>(x: Var<'g>, positions: &[(f64, f64)], theta_x: Var<'g>, theta_y: Var<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != positions.len() {
        return Err(Error::Shape(format!("rope: tokens {s:?} vs {} positions", positions.len())));
    }
    let c = s[2];
    if c % 2 != 0 {
        return Err(Error::Config(format!("rope needs an even channel count, got {c}")));
    }
    let groups = c / 2;
    if theta_x.shape() != [groups] || theta_y.shape() != [groups] {
        return Err(Error::Shape(format!("rope angles must have {groups} entries")));
    }
    let (xv, txv, tyv) = (x.value(), theta_x.value(), theta_y.value());
    let pos = positions.to_vec();
    let (b, l) = (s[0], s[1]);
    let angles = move |tx: &[f64], ty: &[f64]| -> Vec<(f64, f64)> {
        let mut cs = Vec::with_capacity(l * groups);
        for &(mx, my) in &pos {
            for g in 0..groups {
                let phi = mx * tx[g] + my * ty[g];
                cs.push((phi.cos(), phi.sin()));
            }
        }
        cs
    };
    let cs = angles(txv.data(), tyv.data());
    let mut out = vec![0.0; xv.numel()];
    for bi in 0..b {
        for li in 0..l {
            let base = (bi * l + li) * c;
            for g in 0..groups {
                let (co, si) = cs[li * groups + g];
                let (a0, a1) = (xv.data()[base + 2 * g], xv.data()[base + 2 * g + 1]);
                out[base + 2 * g] = co * a0 - si * a1;
                out[base + 2 * g + 1] = si * a0 + co * a1;
            }
        }
    }
    let out = Tensor::from_vec(&s, out);
    let rotated = out.clone();
    let pos = positions.to_vec();
    Ok(x.graph().custom(&[x, theta_x, theta_y], out, move |gr, need| {
        let gd = gr.data();
        let mut gx = need[0].then(|| vec![0.0; gd.len()]);
        let mut gtx = vec![0.0; groups];
        let mut gty = vec![0.0; groups];
        for bi in 0..b {
            for li in 0..l {
                let base = (bi * l + li) * c;
                let (mx, my) = pos[li];
                for g in 0..groups {
                    let (co, si) = cs[li * groups + g];
                    let (g0, g1) = (gd[base + 2 * g], gd[base + 2 * g + 1]);
                    if let Some(gx) = gx.as_mut() {
                        gx[base + 2 * g] = co * g0 + si * g1;
                        gx[base + 2 * g + 1] = -si * g0 + co * g1;
                    }
                    let (r0, r1) = (rotated.data()[base + 2 * g], rotated.data()[base + 2 * g + 1]);
                    let dphi = -g0 * r1 + g1 * r0;
                    gtx[g] += mx * dphi;
                    gty[g] += my * dphi;
                }
            }
        }
        vec![
            gx.map(|v| Tensor::from_vec(&[b, l, c], v)),
            need[1].then(|| Tensor::from_vec(&[groups], gtx)),
            need[2].then(|| Tensor::from_vec(&[groups], gty)),
        ]
    }))
}

/// Learnable RoPE angle pair.
#[derive(Clone, Debug)]
pub struct Rope {
    pub theta_x: ParamId,
    pub theta_y: ParamId,
}

impl Rope {
    pub fn new(s: &mut Scope<'_>, c: usize) -> Self {
        let init = rope_init(c);
        Rope {
            theta_x: s.param("theta_x", &[c / 2], Init::Values(init.clone())),
            theta_y: s.param("theta_y", &[c / 2], Init::Values(init)),
        }
    }

    pub fn apply<'g>(&self, p: &Bound<'g>, x: Var<'g>, positions: &[(f64, f64)]) -> Result<Var<'g>> {
        apply_rope2d(x, positions, p.get(self.theta_x), p.get(self.theta_y))
    }
}

fn maybe_rope<'g>(rope: &Option<Rope>, p: &Bound<'g>, x: Var<'g>, positions: &[(f64, f64)]) -> Result<Var<'g>> {
    match rope {
        Some(r) => r.apply(p, x, positions),
        None => Ok(x),
    }
}

/// Start offsets and size of overlapping windows along one axis.
pub fn window_starts(n: usize, window: usize, overlap: usize) -> (Vec<usize>, usize) {
    if n <= window {
        return (vec![0], n);
    }
    let step = (window - overlap).max(1);
    let mut starts: Vec<usize> = (0..).map(|k| k * step).take_while(|&s| s + window < n).collect();
    if starts.last() != Some(&(n - window)) {
        starts.push(n - window);
    }
    (starts, window)
}

struct Windows {
    /// Per window: query token indices and key token indices.
    lists: Vec<(Vec<usize>, Vec<usize>)>,
    /// Number of windows with at least one key that contain each query.
    count: Vec<usize>,
}

fn build_windows(h: usize, w: usize, window: usize, overlap: usize, query: &[bool], key: &[bool]) -> Windows {
    let (ys, wh) = window_starts(h, window, overlap);
    let (xs, ww) = window_starts(w, window, overlap);
    let mut lists = Vec::new();
    let mut count = vec![0; h * w];
    for &y0 in &ys {
        for &x0 in &xs {
            let mut qs = Vec::new();
            let mut ks = Vec::new();
            for y in y0..y0 + wh {
                for x in x0..x0 + ww {
                    let t = y * w + x;
                    if query[t] {
                        qs.push(t);
                    }
                    if key[t] {
                        ks.push(t);
                    }
                }
            }
            if !ks.is_empty() && !qs.is_empty() {
                for &t in &qs {
                    count[t] += 1;
                }
                lists.push((qs, ks));
            }
        }
    }
    Windows { lists, count }
}

fn window_softmax(q: &[f64], keys: &[usize], k: &[f64], c: usize, scale: f64, a: &mut Vec<f64>) {
    a.clear();
    let mut mx = f64::NEG_INFINITY;
    for &t in keys {
        let s: f64 = q.iter().zip(&k[t * c..(t + 1) * c]).map(|(x, y)| x * y).sum::<f64>() * scale;
        mx = mx.max(s);
        a.push(s);
    }
    let mut z = 0.0;
    for v in a.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in a.iter_mut() {
        *v /= z;
    }
}

/// Softmax attention restricted to overlapping `window x window` tiles.
/// Query tokens attend only to key tokens of the same tile; a query covered by
/// several tiles averages their outputs. Non-query tokens output zero.
#[allow(clippy::too_many_arguments)]
pub fn window_attention<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    h: usize,
    w: usize,
    window: usize,
    overlap: usize,
    query_mask: &[bool],
    key_mask: &[bool],
) -> Result<Var<'g>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3 || qs != ks || ks[..2] != vs[..2] || qs[1] != h * w {
        return Err(Error::Shape(format!("window_attention: Q {qs:?}, K {ks:?}, V {vs:?}, grid {h}x{w}")));
    }
    let (b, l, c) = (qs[0], qs[1], qs[2]);
    let cv = vs[2];
    let win = build_windows(h, w, window.max(1), overlap.min(window.saturating_sub(1)), query_mask, key_mask);
    let scale = 1.0 / (c as f64).sqrt();
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let mut out = vec![0.0; b * l * cv];
    let mut a = Vec::new();
    for bi in 0..b {
        let qd = &qv.data()[bi * l * c..(bi + 1) * l * c];
        let kd = &kv.data()[bi * l * c..(bi + 1) * l * c];
        let vd = &vv.data()[bi * l * cv..(bi + 1) * l * cv];
        let od = &mut out[bi * l * cv..(bi + 1) * l * cv];
        for (queries, keys) in &win.lists {
            for &t in queries {
                window_softmax(&qd[t * c..(t + 1) * c], keys, kd, c, scale, &mut a);
                let inv = 1.0 / win.count[t] as f64;
                for (&kt, &ak) in keys.iter().zip(&a) {
                    for j in 0..cv {
                        od[t * cv + j] += inv * ak * vd[kt * cv + j];
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[b, l, cv], out);
    Ok(q.graph().custom(&[q, k, v], out, move |g, need| {
        let mut gq = vec![0.0; b * l * c];
        let mut gk = vec![0.0; b * l * c];
        let mut gv = vec![0.0; b * l * cv];
        let mut a = Vec::new();
        let mut ga = Vec::new();
        for bi in 0..b {
            let qd = &qv.data()[bi * l * c..(bi + 1) * l * c];
            let kd = &kv.data()[bi * l * c..(bi + 1) * l * c];
            let vd = &vv.data()[bi * l * cv..(bi + 1) * l * cv];
            let gd = &g.data()[bi * l * cv..(bi + 1) * l * cv];
            let (gq, gk, gv) = (
                &mut gq[bi * l * c..(bi + 1) * l * c],
                &mut gk[bi * l * c..(bi + 1) * l * c],
                &mut gv[bi * l * cv..(bi + 1) * l * cv],
            );
            for (queries, keys) in &win.lists {
                for &t in queries {
                    let qt = &qd[t * c..(t + 1) * c];
                    window_softmax(qt, keys, kd, c, scale, &mut a);
                    let inv = 1.0 / win.count[t] as f64;
                    let go = &gd[t * cv..(t + 1) * cv];
                    ga.clear();
                    let mut dot = 0.0;
                    for (&kt, &ak) in keys.iter().zip(&a) {
                        let gak: f64 = go.iter().zip(&vd[kt * cv..(kt + 1) * cv]).map(|(x, y)| x * y).sum::<f64>() * inv;
                        ga.push(gak);
                        dot += ak * gak;
                        for j in 0..cv {
                            gv[kt * cv + j] += inv * ak * go[j];
                        }
                    }
                    for ((&kt, &ak), &gak) in keys.iter().zip(&a).zip(&ga) {
                        let gs = ak * (gak - dot) * scale;
                        for j in 0..c {
                            gq[t * c + j] += gs * kd[kt * c + j];
                            gk[kt * c + j] += gs * qt[j];
                        }
                    }
                }
            }
        }
        vec![
            need[0].then(|| Tensor::from_vec(&[b, l, c], gq)),
            need[1].then(|| Tensor::from_vec(&[b, l, c], gk)),
            need[2].then(|| Tensor::from_vec(&[b, l, cv], gv)),
        ]
    }))
}

/// `Softmax(Q^T K) V^T` over `[B, L, c]` inputs: returns the `[B, c, L]`
/// output and the row-stochastic `[B, c, c]` channel attention map.
pub fn channel_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3 || qs != ks || qs != vs {
        return Err(Error::Shape(format!("channel_attention: Q {qs:?}, K {ks:?}, V {vs:?}")));
    }
    if qs[1] == 0 {
        return Err(Error::Usage("channel attention over an empty sequence".into()));
    }
    let m = q.matmul_t(true, k, false).softmax(2);
    let o = m.matmul_t(false, v, true);
    Ok((o, m))
}

/// Column means of a row-stochastic `c x c` attention map: how much each input
/// channel contributes on average.
pub fn mean_attention_weights(m: &Tensor) -> Result<Vec<f64>> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Validation(format!("attention map must be square, got {s:?}")));
    }
    let c = s[0];
    for i in 0..c {
        let row = &m.data()[i * c..(i + 1) * c];
        if row.iter().any(|&x| !(0.0..=1.0 + 1e-9).contains(&x)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("row {i} of the attention map is not stochastic")));
        }
    }
    Ok((0..c).map(|j| (0..c).map(|i| m.data()[i * c + j]).sum::<f64>() / c as f64).collect())
}

/// Channel-wise context reweighting: L2-normalised query/key projections with
/// a learnable temperature, channel attention over positions, then a gate.
#[derive(Clone, Debug)]
pub struct ContextReweight {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub temperature: ParamId,
    pub gate: Gate,
    pub c: usize,
    pub name: String,
}

fn l2_normalize_rows<'g>(x: Var<'g>, axis: usize) -> Var<'g> {
    let norm = x.sqr().sum_axis(axis).add_scalar(1e-12).sqrt();
    x / norm
}

impl ContextReweight {
    pub fn new(s: &mut Scope<'_>, name: &str, c: usize, gated: bool) -> Self {
        let mut s = s.sub(name);
        ContextReweight {
            q: Conv2d::pointwise(&mut s, "q", c, c, false),
            k: Conv2d::pointwise(&mut s, "k", c, c, false),
            v: Conv2d::pointwise(&mut s, "v", c, c, false),
            temperature: s.param("temperature", &[1], Init::Const(1.0)),
            gate: Gate::new(&mut s, "gate", c, gated),
            c,
            name: name.to_string(),
        }
    }

    /// Returns the reweighted context and its `[B, c, c]` attention map.
    pub fn forward_with_map<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        check_channels(&x, self.c, "context_reweight")?;
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        let q = l2_normalize_rows(to_tokens(self.q.forward(p, x)), 1) * p.get(self.temperature);
        let k = l2_normalize_rows(to_tokens(self.k.forward(p, x)), 1);
        let v = to_tokens(self.v.forward(p, x));
        let (o, m) = channel_attention(q, k, v)?;
        let o = o.reshape(&[s[0], self.c, h, w]);
        p.log_attention(|| self.name.clone(), &m.value());
        Ok((o + self.gate.forward(p, o)?, m))
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        Ok(self.forward_with_map(p, x)?.0)
    }
}

fn maybe_reweight<'g>(cr: &Option<ContextReweight>, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
    match cr {
        Some(cr) => cr.forward(p, x),
        None => Ok(x),
    }
}

/// `g_l^inter`: two 3x3 convolutions over the concatenated previous slices.
#[derive(Clone, Debug)]
pub struct InterLocal {
    pub c1: Conv2d,
    pub c2: Conv2d,
    pub cr: Option<ContextReweight>,
    pub cin: usize,
}

impl InterLocal {
    pub fn new(s: &mut Scope<'_>, cfg: &CodecConfig, slice: usize) -> Self {
        let mut s = s.sub(&format!("ctx.{slice}.inter_local"));
        let cin = slice * cfg.slice_ch();
        InterLocal {
            c1: Conv2d::new(&mut s, "c1", cin, cfg.ctx_ch, 3, 1, 1, false),
            c2: Conv2d::new(&mut s, "c2", cfg.ctx_ch, cfg.ctx_ch, 3, 1, 1, false),
            cr: cfg.ablation.cr.then(|| ContextReweight::new(&mut s, "cr", cfg.ctx_ch, cfg.ablation.gate)),
            cin,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, prev: Option<Var<'g>>) -> Result<Var<'g>> {
        let prev = prev.ok_or_else(|| Error::Usage("inter-slice context needs at least one previous slice".into()))?;
        check_channels(&prev, self.cin, "inter_local_context")?;
        let h = self.c2.forward(p, self.c1.forward(p, prev).gelu());
        maybe_reweight(&self.cr, p, h)
    }
}

/// `g_g^inter`: linear attention over the concatenated previous slices.
#[derive(Clone, Debug)]
pub struct InterGlobal {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub rope: Option<Rope>,
    pub gate: Gate,
    pub cr: Option<ContextReweight>,
    pub cin: usize,
}

impl InterGlobal {
    pub fn new(s: &mut Scope<'_>, cfg: &CodecConfig, slice: usize) -> Self {
        let mut s = s.sub(&format!("ctx.{slice}.inter_global"));
        let cin = slice * cfg.slice_ch();
        let c = cfg.ctx_ch;
        InterGlobal {
            q: Conv2d::pointwise(&mut s, "q", cin, c, false),
            k: Conv2d::pointwise(&mut s, "k", cin, c, false),
            v: Conv2d::pointwise(&mut s, "v", cin, c, false),
            rope: cfg.ablation.rope.then(|| Rope::new(&mut s, c)),
            gate: Gate::new(&mut s, "gate", c, cfg.ablation.gate),
            cr: cfg.ablation.cr.then(|| ContextReweight::new(&mut s, "cr", c, cfg.ablation.gate)),
            cin,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, prev: Option<Var<'g>>) -> Result<Var<'g>> {
        let prev = prev.ok_or_else(|| Error::Usage("inter-slice context needs at least one previous slice".into()))?;
        check_channels(&prev, self.cin, "inter_global_context")?;
        let s = prev.shape();
        let pos = grid_positions(s[2], s[3]);
        let q = maybe_rope(&self.rope, p, to_tokens(self.q.forward(p, prev)), &pos)?;
        let k = maybe_rope(&self.rope, p, to_tokens(self.k.forward(p, prev)), &pos)?;
        let v = to_tokens(self.v.forward(p, prev));
        let o = from_tokens(linear_attention(q, k, v, None)?, s[2], s[3]);
        let o = o + self.gate.forward(p, o)?;
        maybe_reweight(&self.cr, p, o)
    }
}

/// `g_l^intra`: overlapped-window checkerboard attention from non-anchor
/// queries (3x3 neighbourhood of decoded anchors) to anchor keys.
#[derive(Clone, Debug)]
pub struct IntraLocal {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub rope: Option<Rope>,
    pub cr: Option<ContextReweight>,
    pub window: usize,
    pub overlap: usize,
    pub cs: usize,
}

impl IntraLocal {
    pub fn new(s: &mut Scope<'_>, cfg: &CodecConfig, slice: usize) -> Self {
        let mut s = s.sub(&format!("ctx.{slice}.intra_local"));
        let (cs, c) = (cfg.slice_ch(), cfg.ctx_ch);
        IntraLocal {
            q: Conv2d::new(&mut s, "q", cs, c, 3, 1, 1, false),
            k: Conv2d::pointwise(&mut s, "k", cs, c, false),
            v: Conv2d::pointwise(&mut s, "v", cs, c, false),
            rope: cfg.ablation.rope.then(|| Rope::new(&mut s, c)),
            cr: cfg.ablation.cr.then(|| ContextReweight::new(&mut s, "cr", c, cfg.ablation.gate)),
            window: cfg.window,
            overlap: cfg.window_overlap,
            cs,
        }
    }

    /// `anchor` holds decoded anchors of the current slice and zeros elsewhere.
    pub fn forward<'g>(&self, p: &Bound<'g>, anchor: Var<'g>) -> Result<Var<'g>> {
        check_channels(&anchor, self.cs, "intra_local_context")?;
        let s = anchor.shape();
        let (h, w) = (s[2], s[3]);
        let mask = CheckerboardMask::new(h, w);
        let pos = grid_positions(h, w);
        let q = maybe_rope(&self.rope, p, to_tokens(self.q.forward(p, anchor)), &pos)?;
        let k = maybe_rope(&self.rope, p, to_tokens(self.k.forward(p, anchor)), &pos)?;
        let v = to_tokens(self.v.forward(p, anchor));
        let o = window_attention(q, k, v, h, w, self.window, self.overlap, &mask.non_anchor(), &mask.anchor)?;
        maybe_reweight(&self.cr, p, from_tokens(o, h, w))
    }
}

/// Global checkerboard context: similarity between the non-anchor (queries)
/// and anchor (keys) positions of a guide map, applied to anchor values of the
/// current slice. The guide is the hyperprior for the first slice and the
/// previous slice otherwise.
#[derive(Clone, Debug)]
pub struct CheckerboardGlobal {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub rope: Option<Rope>,
    pub gate: Gate,
    pub cr: Option<ContextReweight>,
    pub guide_ch: usize,
    pub cs: usize,
}

impl CheckerboardGlobal {
    pub fn new(s: &mut Scope<'_>, cfg: &CodecConfig, slice: usize) -> Self {
        let name = if slice == 0 { "hgcp" } else { "intra_global" };
        let mut s = s.sub(&format!("ctx.{slice}.{name}"));
        let guide_ch = if slice == 0 { 2 * cfg.m } else { cfg.slice_ch() };
        let (cs, c) = (cfg.slice_ch(), cfg.ctx_ch);
        CheckerboardGlobal {
            q: Conv2d::pointwise(&mut s, "q", guide_ch, c, false),
            k: Conv2d::pointwise(&mut s, "k", guide_ch, c, false),
            v: Conv2d::pointwise(&mut s, "v", cs, c, false),
            rope: cfg.ablation.rope.then(|| Rope::new(&mut s, c)),
            gate: Gate::new(&mut s, "gate", c, cfg.ablation.gate),
            cr: cfg.ablation.cr.then(|| ContextReweight::new(&mut s, "cr", c, cfg.ablation.gate)),
            guide_ch,
            cs,
        }
    }

    /// Context at non-anchor positions (zero at anchors) before reweighting.
    pub fn attend<'g>(&self, p: &Bound<'g>, guide: Var<'g>, anchor: Var<'g>) -> Result<Var<'g>> {
        check_channels(&guide, self.guide_ch, "checkerboard_global guide")?;
        check_channels(&anchor, self.cs, "checkerboard_global values")?;
        let s = anchor.shape();
        let (h, w) = (s[2], s[3]);
        if guide.shape()[2..] != s[2..] {
            return Err(Error::Shape(format!("guide {:?} not aligned with slice {:?}", guide.shape(), s)));
        }
        let mask = CheckerboardMask::new(h, w);
        let pos = grid_positions(h, w);
        let q = maybe_rope(&self.rope, p, to_tokens(self.q.forward(p, guide)), &pos)?;
        let k = maybe_rope(&self.rope, p, to_tokens(self.k.forward(p, guide)), &pos)?;
        let v = to_tokens(self.v.forward(p, anchor));
        let o = from_tokens(linear_attention(q, k, v, Some(&mask.anchor))?, h, w);
        let na = p.graph().constant(mask.tensor(crate::latent::Phase::NonAnchor));
        let o = o * na;
        Ok(o + self.gate.forward(p, o)?)
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, guide: Var<'g>, anchor: Var<'g>) -> Result<Var<'g>> {
        let o = self.attend(p, guide, anchor)?;
        maybe_reweight(&self.cr, p, o)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lic_autodiff::Graph;

    #[test]
    fn rope_quarter_turn() {
        let g = Graph::inference();
        let q = g.constant(Tensor::from_vec(&[1, 1, 2], vec![1.0, 0.0]));
        let t = g.constant(Tensor::from_vec(&[1], vec![std::f64::consts::FRAC_PI_2]));
        let r = apply_rope2d(q, &[(1.0, 0.0)], t, t).unwrap().value();
        assert!(r.data()[0].abs() < 1e-12 && (r.data()[1] - 1.0).abs() < 1e-12);
        let odd = g.constant(Tensor::zeros(&[1, 1, 3]));
        assert!(matches!(apply_rope2d(odd, &[(0.0, 0.0)], t, t), Err(Error::Config(_)) | Err(Error::Shape(_))));
    }

    #[test]
    fn windows_cover_axis() {
        assert_eq!(window_starts(4, 8, 4), (vec![0], 4));
        assert_eq!(window_starts(16, 8, 4), (vec![0, 4, 8], 8));
        assert_eq!(window_starts(14, 8, 4), (vec![0, 4, 6], 8));
    }

    #[test]
    fn identity_map_weights() {
        let m = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(mean_attention_weights(&m).unwrap(), vec![0.5, 0.5]);
        let bad = Tensor::from_vec(&[2, 2], vec![0.7, 0.7, 0.0, 1.0]);
        assert!(mean_attention_weights(&bad).is_err());
    }
}
