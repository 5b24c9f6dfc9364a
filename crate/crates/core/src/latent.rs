//! Slice partitioning, checkerboard masks, mixed quantisation, latent
//! residual prediction and the entropy parameter networks.

use lic_autodiff::{Graph, Tensor, Var};

use crate::config::{CodecConfig, SIGMA_MIN};
use crate::nn_blocks::Conv2d;
use crate::params::{Bound, Init, Scope};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Anchor,
    NonAnchor,
}

impl Phase {
    pub const BOTH: [Phase; 2] = [Phase::Anchor, Phase::NonAnchor];

    pub fn index(self) -> usize {
        match self {
            Phase::Anchor => 0,
            Phase::NonAnchor => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Anchor => "anchor",
            Phase::NonAnchor => "non-anchor",
        }
    }
}

/// Checkerboard split of an `h x w` grid: anchors are positions with even `i + j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckerboardMask {
    pub h: usize,
    pub w: usize,
    pub anchor: Vec<bool>,
}

impl CheckerboardMask {
    pub fn new(h: usize, w: usize) -> Self {
        let anchor = (0..h * w).map(|k| (k / w + k % w) % 2 == 0).collect();
        CheckerboardMask { h, w, anchor }
    }

    pub fn non_anchor(&self) -> Vec<bool> {
        self.anchor.iter().map(|a| !a).collect()
    }

    pub fn phase(&self, phase: Phase) -> Vec<bool> {
        match phase {
            Phase::Anchor => self.anchor.clone(),
            Phase::NonAnchor => self.non_anchor(),
        }
    }

    pub fn is_in(&self, phase: Phase, pos: usize) -> bool {
        self.anchor[pos] == (phase == Phase::Anchor)
    }

    /// `[1, 1, h, w]` indicator of the phase positions.
    pub fn tensor(&self, phase: Phase) -> Tensor {
        Tensor::from_vec(
            &[1, 1, self.h, self.w],
            self.anchor.iter().map(|&a| if a == (phase == Phase::Anchor) { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn count(&self, phase: Phase) -> usize {
        self.anchor.iter().filter(|&&a| a == (phase == Phase::Anchor)).count()
    }
}

/// Splits `[B, M, h, w]` into `num_slices` equal channel groups.
pub fn split_slices(y: &Tensor, num_slices: usize) -> Result<Vec<Tensor>> {
    let m = y.dim(1);
    if num_slices == 0 || m % num_slices != 0 {
        return Err(Error::Config(format!("{m} channels cannot be split into {num_slices} slices")));
    }
    let cs = m / num_slices;
    (0..num_slices).map(|i| Ok(y.narrow(1, i * cs, cs)?)).collect()
}

pub fn merge_slices(slices: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = slices.iter().collect();
    Ok(Tensor::cat(&refs, 1)?)
}

pub fn split_slice_vars<'g>(y: Var<'g>, num_slices: usize) -> Result<Vec<Var<'g>>> {
    let m = y.shape()[1];
    if num_slices == 0 || m % num_slices != 0 {
        return Err(Error::Config(format!("{m} channels cannot be split into {num_slices} slices")));
    }
    let cs = m / num_slices;
    Ok((0..num_slices).map(|i| y.narrow(1, i * cs, cs)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Rounding with an identity gradient.
    Ste,
    /// Additive uniform noise (training-time rate proxy); `mu` and `r` unused.
    Aun,
    /// Plain rounding (inference).
    Round,
}

/// `round(y - mu) + mu + r` (STE/ROUND) or `y + u` (AUN) with `noise = u`.
pub fn mixed_quantize<'g>(y: Var<'g>, mu: Var<'g>, r: Var<'g>, mode: QuantMode, noise: Option<Var<'g>>) -> Result<Var<'g>> {
    if y.shape() != mu.shape() || y.shape() != r.shape() {
        return Err(Error::Shape(format!("mixed_quantize: y {:?}, mu {:?}, r {:?}", y.shape(), mu.shape(), r.shape())));
    }
    match mode {
        QuantMode::Ste => Ok((y - mu).round_ste() + mu + r),
        QuantMode::Round => Ok((y - mu).detach().round_ste() + mu + r),
        QuantMode::Aun => {
            let u = noise.ok_or_else(|| Error::Usage("AUN quantisation needs a noise tensor".into()))?;
            if u.shape() != y.shape() {
                return Err(Error::Shape("AUN noise shape".into()));
            }
            Ok(y + u)
        }
    }
}

/// Reconstruction from integer residuals, shared bit-for-bit by encoder and
/// decoder: `((q + mu) + r)` on the phase positions, zero elsewhere.
pub fn reconstruct(q: &Tensor, mu: &Tensor, r: &Tensor, mask: &Tensor) -> Tensor {
    let (b, c, h, w) = q.dims4().expect("4-d residuals");
    let hw = h * w;
    let mut out = vec![0.0; q.numel()];
    for bc in 0..b * c {
        for k in 0..hw {
            if mask.data()[k] != 0.0 {
                let i = bc * hw + k;
                out[i] = (q.data()[i] + mu.data()[i]) + r.data()[i];
            }
        }
    }
    Tensor::from_vec(&[b, c, h, w], out)
}

/// A first layer written as a sum of per-input convolutions, so inputs can be
/// added to a network without disturbing the weights of the others.
#[derive(Clone, Debug)]
pub(crate) struct SumInput {
    pub parts: Vec<(String, Conv2d)>,
}

impl SumInput {
    pub fn forward<'g>(&self, p: &Bound<'g>, inputs: &[(&str, Var<'g>)]) -> Result<Var<'g>> {
        if inputs.len() != self.parts.len() {
            return Err(Error::Usage(format!(
                "expected inputs {:?}, got {:?}",
                self.parts.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(),
                inputs.iter().map(|(n, _)| *n).collect::<Vec<_>>()
            )));
        }
        let mut acc: Option<Var<'g>> = None;
        for ((name, conv), (iname, x)) in self.parts.iter().zip(inputs) {
            if name != iname {
                return Err(Error::Usage(format!("input {iname:?} where {name:?} was expected")));
            }
            if x.shape()[1] != conv.cin {
                return Err(Error::Shape(format!("input {name}: {} channels, expected {}", x.shape()[1], conv.cin)));
            }
            let y = conv.forward(p, *x);
            acc = Some(match acc {
                Some(a) => a + y,
                None => y,
            });
        }
        acc.ok_or_else(|| Error::Usage("no inputs".into()))
    }
}

/// `g_lrp` for one (slice, phase): predicts the quantisation residual as
/// `0.5 * tanh(.)` from the hyperprior, previous slices and (non-anchor
/// phase) the current anchors.
#[derive(Clone, Debug)]
pub struct LatentResidualPredictor {
    first: SumInput,
    out: Conv2d,
}

impl LatentResidualPredictor {
    pub fn new(s: &mut Scope<'_>, cfg: &CodecConfig, slice: usize, phase: Phase) -> Self {
        let mut s = s.sub(&format!("lrp.{slice}.{}", phase.index()));
        let cs = cfg.slice_ch();
        let hid = cfg.lrp_hidden;
        let mut parts = vec![("hyper".to_string(), Conv2d::new(&mut s, "in_hyper", 2 * cfg.m, hid, 3, 1, 1, true))];
        if !cfg.hyperprior_only {
            if slice > 0 {
                parts.push((
                    "prev".into(),
                    Conv2d::with_init(&mut s, "in_prev", slice * cs, hid, 3, 1, 1, false, Init::Zeros),
                ));
            }
            if phase == Phase::NonAnchor {
                parts.push(("anchor".into(), Conv2d::with_init(&mut s, "in_anchor", cs, hid, 3, 1, 1, false, Init::Zeros)));
            }
        }
        let out = Conv2d::pointwise(&mut s, "out", hid, cs, true);
        LatentResidualPredictor { first: SumInput { parts }, out }
    }

    /// `prev` is the concatenation of decoded slices `< i` (empty for slice 0).
    pub fn forward<'g>(&self, p: &Bound<'g>, hyper: Var<'g>, prev: Option<Var<'g>>, anchor: Option<Var<'g>>) -> Result<Var<'g>> {
        let mut inputs = vec![("hyper", hyper)];
        let wants = |n: &str| self.first.parts.iter().any(|(k, _)| k == n);
        if let Some(v) = prev.filter(|_| wants("prev")) {
            inputs.push(("prev", v));
        }
        if let Some(v) = anchor.filter(|_| wants("anchor")) {
            inputs.push(("anchor", v));
        }
        let h = self.first.forward(p, &inputs)?.gelu();
        Ok(self.out.forward(p, h).tanh().scale(0.5))
    }
}

/// Conditioning features for one (slice, phase).
#[derive(Clone, Copy, Debug)]
pub struct ContextBundle<'g> {
    pub hyper: Var<'g>,
    pub inter_local: Option<Var<'g>>,
    pub inter_global: Option<Var<'g>>,
    pub intra_local: Option<Var<'g>>,
    pub intra_global: Option<Var<'g>>,
}

impl<'g> ContextBundle<'g> {
    pub fn hyper_only(hyper: Var<'g>) -> Self {
        ContextBundle { hyper, inter_local: None, inter_global: None, intra_local: None, intra_global: None }
    }

    fn named(&self) -> Vec<(&'static str, Var<'g>)> {
        let mut v = vec![("hyper", self.hyper)];
        for (name, x) in [
            ("inter_local", self.inter_local),
            ("inter_global", self.inter_global),
            ("intra_local", self.intra_local),
            ("intra_global", self.intra_global),
        ] {
            if let Some(x) = x {
                v.push((name, x));
            }
        }
        v
    }
}

/// Which context members are legal for a (slice, phase).
pub fn legal_contexts(cfg: &CodecConfig, slice: usize, phase: Phase) -> Vec<&'static str> {
    let mut v = vec!["hyper"];
    if cfg.hyperprior_only {
        return v;
    }
    if slice > 0 {
        v.extend(["inter_local", "inter_global"]);
    }
    if phase == Phase::NonAnchor {
        v.push("intra_local");
        if slice > 0 || cfg.ablation.hgcp {
            v.push("intra_global");
        }
    }
    v
}

/// Gaussian mean and scale of the governed slice.
#[derive(Clone, Copy, Debug)]
pub struct GaussianParams<'g> {
    pub mu: Var<'g>,
    pub sigma: Var<'g>,
}

/// `g_ep` for one (slice, phase): pointwise network over the context bundle.
#[derive(Clone, Debug)]
pub struct EntropyParameters {
    first: SumInput,
    mid: Conv2d,
    out: Conv2d,
    cs: usize,
}

impl EntropyParameters {
    pub fn new(s: &mut Scope<'_>, cfg: &CodecConfig, slice: usize, phase: Phase) -> Self {
        let mut s = s.sub(&format!("ep.{slice}.{}", phase.index()));
        let hid = cfg.ep_hidden;
        let parts = legal_contexts(cfg, slice, phase)
            .into_iter()
            .map(|name| {
                let conv = if name == "hyper" {
                    Conv2d::pointwise(&mut s, "in_hyper", 2 * cfg.m, hid, true)
                } else {
                    Conv2d::with_init(&mut s, &format!("in_{name}"), cfg.ctx_ch, hid, 1, 1, 1, false, Init::Zeros)
                };
                (name.to_string(), conv)
            })
            .collect();
        EntropyParameters {
            first: SumInput { parts },
            mid: Conv2d::pointwise(&mut s, "mid", hid, hid, true),
            out: Conv2d::pointwise(&mut s, "out", hid, 2 * cfg.slice_ch(), true),
            cs: cfg.slice_ch(),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, bundle: &ContextBundle<'g>) -> Result<GaussianParams<'g>> {
        let h = self.first.forward(p, &bundle.named())?.gelu();
        let h = self.mid.forward(p, h).gelu();
        let o = self.out.forward(p, h);
        let mu = o.narrow(1, 0, self.cs);
        let sigma = o.narrow(1, self.cs, self.cs).abs().lower_bound(SIGMA_MIN);
        Ok(GaussianParams { mu, sigma })
    }
}

/// Constant `[1,1,h,w]` phase indicator on a graph.
pub fn phase_mask<'g>(g: &'g Graph, mask: &CheckerboardMask, phase: Phase) -> Var<'g> {
    g.constant(mask.tensor(phase))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkerboard_counts() {
        let m = CheckerboardMask::new(3, 5);
        assert!(m.anchor[0] && !m.anchor[1] && !m.anchor[5] && m.anchor[6]);
        let diff = m.count(Phase::Anchor) as i64 - m.count(Phase::NonAnchor) as i64;
        assert_eq!(diff, 1);
        let even = CheckerboardMask::new(4, 4);
        assert_eq!(even.count(Phase::Anchor), even.count(Phase::NonAnchor));
    }

    #[test]
    fn split_merge_identity() {
        let y = Tensor::from_fn(&[1, 8, 2, 3], |i| i as f64 * 0.37);
        let s = split_slices(&y, 4).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s[1].shape(), &[1, 2, 2, 3]);
        assert_eq!(merge_slices(&s).unwrap().data(), y.data());
        assert_eq!(split_slices(&y, 1).unwrap()[0].data(), y.data());
        assert!(split_slices(&y, 3).is_err());
    }

    #[test]
    fn quantize_arithmetic() {
        let g = Graph::new();
        let y = g.leaf(Tensor::from_vec(&[1, 1, 1, 2], vec![2.6, 5.0]));
        let mu = g.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![2.0, 5.0]));
        let r = g.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![0.1, 0.0]));
        let q = mixed_quantize(y, mu, r, QuantMode::Ste, None).unwrap();
        assert!((q.value().data()[0] - 3.1).abs() < 1e-12);
        assert_eq!(q.value().data()[1], 5.0);
        let grads = g.backward(q.sum());
        assert_eq!(grads.get(y).unwrap().data(), &[1.0, 1.0]);
        assert!(mixed_quantize(y, mu, r, QuantMode::Aun, None).is_err());
    }
}
