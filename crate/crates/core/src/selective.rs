//! Guided selective compression: scale-threshold initialisation, the skip
//! predictor `f_s`, the weighted cross-entropy loss and skip-map application.

use lic_autodiff::{Tensor, Var};

use crate::config::CodecConfig;
use crate::latent::Phase;
use crate::nn_blocks::{check_channels, Conv2d};
use crate::params::{Bound, Init, ParamId, Scope};
use crate::{Error, Result};

pub const DEFAULT_XI: f64 = 0.3;
const EPS_CLAMP: f64 = 1e-7;

/// `1` where `sigma >= xi`, else `0`.
pub fn scale_threshold_init(sigma: &Tensor, xi: f64) -> Tensor {
    sigma.map(|s| if s >= xi { 1.0 } else { 0.0 })
}

/// Hard decision `eps >= 0.5` in the forward pass, identity gradient.
pub fn binarize_ste(eps: Var<'_>) -> Var<'_> {
    let hard = eps.value().map(|e| if e >= 0.5 { 1.0 } else { 0.0 });
    let hard = eps.graph().constant(hard);
    eps + (hard - eps).detach()
}

/// Hard skip map from probabilities.
pub fn binarize(eps: &Tensor) -> Tensor {
    eps.map(|e| if e >= 0.5 { 1.0 } else { 0.0 })
}

/// Residual priors fed to `f_s` for one (slice, phase).
#[derive(Clone, Copy, Debug)]
pub struct SkipInputs<'g> {
    /// Scale-threshold map of the governed slice.
    pub init: Var<'g>,
    pub hyper: Var<'g>,
    /// Masked integer residuals of all previous slices, concatenated.
    pub prev: Option<Var<'g>>,
    /// Masked integer residuals of the current slice's anchors (non-anchor
    /// phase only; zero at non-anchor positions).
    pub anchor: Option<Var<'g>>,
}

/// `f_s` for one (slice, phase): `eps = sigmoid(alpha (2 s_sigma - 1) + net(.))`.
#[derive(Clone, Debug)]
pub struct SkipPredictor {
    pub alpha: ParamId,
    pub in_init: Conv2d,
    pub in_hyper: Conv2d,
    pub in_prev: Option<Conv2d>,
    pub in_anchor: Option<Conv2d>,
    pub mid: Conv2d,
    pub out: Conv2d,
    pub slice: usize,
    pub phase: Phase,
}

impl SkipPredictor {
    pub fn new(s: &mut Scope<'_>, cfg: &CodecConfig, slice: usize, phase: Phase) -> Self {
        let mut s = s.sub(&format!("skip.{slice}.{}", phase.index()));
        let (cs, hid) = (cfg.slice_ch(), cfg.skip_hidden);
        SkipPredictor {
            alpha: s.param("alpha", &[1], Init::Const(4.0)),
            in_init: Conv2d::pointwise(&mut s, "in_init", cs, hid, true),
            in_hyper: Conv2d::pointwise(&mut s, "in_hyper", 2 * cfg.m, hid, false),
            in_prev: (slice > 0).then(|| Conv2d::pointwise(&mut s, "in_prev", slice * cs, hid, false)),
            in_anchor: (phase == Phase::NonAnchor).then(|| Conv2d::new(&mut s, "in_anchor", cs, hid, 3, 1, 1, false)),
            mid: Conv2d::pointwise(&mut s, "mid", hid, hid, true),
            out: Conv2d::with_init(&mut s, "out", hid, cs, 1, 1, 1, true, Init::Zeros),
            slice,
            phase,
        }
    }

    /// Probability map `eps` of coding each element.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: &SkipInputs<'g>) -> Result<Var<'g>> {
        check_channels(&x.init, self.in_init.cin, "skip init map")?;
        check_channels(&x.hyper, self.in_hyper.cin, "skip hyperprior")?;
        let mismatch = |what: &str| Error::Usage(format!("skip predictor {}/{}: {what}", self.slice, self.phase.name()));
        let mut h = self.in_init.forward(p, x.init) + self.in_hyper.forward(p, x.hyper);
        match (&self.in_prev, x.prev) {
            (Some(c), Some(v)) => {
                check_channels(&v, c.cin, "skip previous-slice prior")?;
                h = h + c.forward(p, v);
            }
            (None, None) => {}
            _ => return Err(mismatch("previous-slice prior present iff slice > 0")),
        }
        match (&self.in_anchor, x.anchor) {
            (Some(c), Some(v)) => {
                check_channels(&v, c.cin, "skip anchor prior")?;
                h = h + c.forward(p, v);
            }
            (None, None) => {}
            _ => return Err(mismatch("anchor prior present iff non-anchor phase")),
        }
        let logits = self.out.forward(p, self.mid.forward(p, h.gelu()));
        let bias = x.init.scale(2.0).add_scalar(-1.0) * p.get(self.alpha);
        Ok((logits + bias).sigmoid())
    }
}

/// `1/2 (|q| + 1) CE(eps, [q != 0])` per element, in nats.
pub fn skip_loss_element(eps: f64, q: f64) -> f64 {
    let e = eps.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP);
    let ce = if q != 0.0 { -e.ln() } else { -(1.0 - e).ln() };
    0.5 * (q.abs() + 1.0) * ce
}

/// Differentiable weighted cross-entropy summed over the phase positions
/// (`mask` is `[1,1,h,w]`) divided by `norm`.
pub fn skip_loss<'g>(eps: Var<'g>, q: &Tensor, mask: &Tensor, norm: f64) -> Result<Var<'g>> {
    if eps.shape() != q.shape() {
        return Err(Error::Shape(format!("skip loss: eps {:?} vs residuals {:?}", eps.shape(), q.shape())));
    }
    let g = eps.graph();
    let target = g.constant(q.map(|v| if v != 0.0 { 1.0 } else { 0.0 }));
    let weight = g.constant(q.map(|v| 0.5 * (v.abs() + 1.0)));
    let e = eps.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP);
    let ce = (target * e.ln() + (target.neg().add_scalar(1.0)) * e.neg().add_scalar(1.0).ln()).neg();
    Ok((ce * weight * g.constant(mask.clone())).sum().scale(1.0 / norm.max(1.0)))
}

/// Summary of skip decisions against true residuals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SkipLossReport {
    /// Mean per-element weighted cross-entropy (nats).
    pub loss: f64,
    /// Fraction of skipped elements per slice.
    pub skip_ratio: Vec<f64>,
    /// Skipped elements whose residual is non-zero.
    pub false_skips: usize,
}

impl SkipLossReport {
    /// `eps`, `q` and `s` are per-slice full maps; every element belongs to
    /// exactly one phase.
    pub fn compute(eps: &[Tensor], q: &[Tensor], s: &[Tensor]) -> Result<Self> {
        if eps.len() != q.len() || q.len() != s.len() {
            return Err(Error::Shape("skip report: slice counts differ".into()));
        }
        let mut loss = 0.0;
        let mut n = 0usize;
        let mut report = SkipLossReport::default();
        for ((e, q), s) in eps.iter().zip(q).zip(s) {
            if e.shape() != q.shape() || q.shape() != s.shape() {
                return Err(Error::Shape("skip report: map shapes differ".into()));
            }
            let mut skipped = 0;
            for ((&e, &q), &s) in e.data().iter().zip(q.data()).zip(s.data()) {
                loss += skip_loss_element(e, q);
                if s == 0.0 {
                    skipped += 1;
                    if q != 0.0 {
                        report.false_skips += 1;
                    }
                }
            }
            n += q.numel();
            report.skip_ratio.push(skipped as f64 / q.numel().max(1) as f64);
        }
        report.loss = loss / n.max(1) as f64;
        Ok(report)
    }
}

/// Decisions for one phase: which flat indices of the slice are coded. `s`
/// may be `None` (selective compression off).
pub fn apply_skip(phase_mask: &[bool], s: Option<&Tensor>, channels: usize) -> Vec<bool> {
    let hw = phase_mask.len();
    (0..channels * hw)
        .map(|i| phase_mask[i % hw] && s.is_none_or(|s| s.data()[i] != 0.0))
        .collect()
}
