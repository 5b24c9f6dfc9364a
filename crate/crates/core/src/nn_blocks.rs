//! Convolution layers, layer norm, depth-wise residual block, gate block and
//! the simple token mixing block used by the transforms.

use std::str::FromStr;

use lic_autodiff::Var;

use crate::params::{Bound, Init, ParamId, Scope};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-6;
/// Hidden width multiplier of the depth-wise residual block.
pub const DEPTH_RB_EXPANSION: usize = 2;

pub(crate) fn check_channels(x: &Var<'_>, c: usize, what: &str) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != c {
        return Err(Error::Shape(format!("{what}: expected [B, {c}, H, W], got {s:?}")));
    }
    Ok(())
}

/// Multiply-accumulates of one convolution producing an `h x w` output.
pub fn conv_macs(k: usize, cin: usize, cout: usize, groups: usize, h: usize, w: usize) -> u64 {
    (k * k * (cin / groups) * cout * h * w) as u64
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn new(s: &mut Scope<'_>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, groups: usize, bias: bool) -> Self {
        Self::with_init(s, name, cin, cout, k, stride, groups, bias, Init::FanIn(cin / groups * k * k))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        s: &mut Scope<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let mut s = s.sub(name);
        let w = s.param("w", &[cout, cin / groups, k, k], init);
        let b = bias.then(|| s.param("b", &[cout], Init::Zeros));
        Conv2d { w, b, cin, cout, k, stride, pad: k / 2, groups }
    }

    pub fn pointwise(s: &mut Scope<'_>, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        Self::new(s, name, cin, cout, 1, 1, 1, bias)
    }

    pub fn depthwise(s: &mut Scope<'_>, name: &str, c: usize, k: usize) -> Self {
        Self::new(s, name, c, c, k, 1, c, true)
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.conv2d(p.get(self.w), self.b.map(|b| p.get(b)), self.stride, self.pad, self.groups)
    }

    pub fn macs(&self, h_out: usize, w_out: usize) -> u64 {
        conv_macs(self.k, self.cin, self.cout, self.groups, h_out, w_out)
    }
}

/// Stride-2 transposed convolution that exactly doubles the spatial size.
#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Deconv2d {
    pub fn new(s: &mut Scope<'_>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let mut s = s.sub(name);
        let w = s.param("w", &[cin, cout, k, k], Init::FanIn(cin * k * k / 4));
        let b = s.param("b", &[cout], Init::Zeros);
        Deconv2d { w, b, cin, cout, k }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        x.conv_transpose2d(p.get(self.w), Some(p.get(self.b)), 2, self.k / 2, 1)
    }

    /// MACs for an `h_in x w_in` input.
    pub fn macs(&self, h_in: usize, w_in: usize) -> u64 {
        (self.k * self.k * self.cin * self.cout * h_in * w_in) as u64
    }
}

/// Layer normalisation over the channel axis at every spatial position.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub c: usize,
}

impl LayerNorm {
    pub fn new(s: &mut Scope<'_>, name: &str, c: usize) -> Self {
        let mut s = s.sub(name);
        LayerNorm { gamma: s.param("gamma", &[1, c, 1, 1], Init::Const(1.0)), beta: s.param("beta", &[1, c, 1, 1], Init::Zeros), c }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        check_channels(&x, self.c, "layer_norm")?;
        Ok(x.normalize_axis(1, LN_EPS) * p.get(self.gamma) + p.get(self.beta))
    }
}

/// `x + pw2(GELU(dw3x3(pw1(x))))` with a widened hidden stage.
#[derive(Clone, Debug)]
pub struct DepthRb {
    pub pw1: Conv2d,
    pub dw: Conv2d,
    pub pw2: Conv2d,
    pub c: usize,
}

impl DepthRb {
    pub fn new(s: &mut Scope<'_>, name: &str, c: usize) -> Self {
        let mut s = s.sub(name);
        let hidden = c * DEPTH_RB_EXPANSION;
        DepthRb {
            pw1: Conv2d::pointwise(&mut s, "pw1", c, hidden, true),
            dw: Conv2d::depthwise(&mut s, "dw", hidden, 3),
            pw2: Conv2d::pointwise(&mut s, "pw2", hidden, c, true),
            c,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.dw.forward(p, self.pw1.forward(p, x)).gelu();
        x + self.pw2.forward(p, h)
    }

    pub fn macs_per_pixel(c: usize) -> u64 {
        let hidden = c * DEPTH_RB_EXPANSION;
        (c * hidden + 9 * hidden + hidden * c) as u64
    }
}

/// `Wo(GELU(W1 x) * W2 x)`; with the gating projection disabled it degrades to
/// the two-layer pointwise MLP `Wo(GELU(W1 x))`.
#[derive(Clone, Debug)]
pub struct Gate {
    pub w1: Conv2d,
    pub w2: Option<Conv2d>,
    pub wo: Conv2d,
    pub c: usize,
}

impl Gate {
    pub fn new(s: &mut Scope<'_>, name: &str, c: usize, gated: bool) -> Self {
        let mut s = s.sub(name);
        Gate {
            w1: Conv2d::pointwise(&mut s, "w1", c, c, false),
            w2: gated.then(|| Conv2d::pointwise(&mut s, "w2", c, c, false)),
            wo: Conv2d::pointwise(&mut s, "wo", c, c, false),
            c,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        check_channels(&x, self.c, "gate")?;
        let a = self.w1.forward(p, x).gelu();
        let h = match &self.w2 {
            Some(w2) => a * w2.forward(p, x),
            None => a,
        };
        Ok(self.wo.forward(p, h))
    }

    pub fn macs_per_pixel(c: usize, gated: bool) -> u64 {
        ((if gated { 3 } else { 2 }) * c * c) as u64
    }
}

/// Simple token mixing block:
/// `x += Conv1x1(DWConv5x5(DepthRB(LN(x))))`, then `x += Gate(LN(x))`.
#[derive(Clone, Debug)]
pub struct StmBlock {
    pub ln1: LayerNorm,
    pub depth_rb: DepthRb,
    pub dw5: Conv2d,
    pub proj: Conv2d,
    pub ln2: LayerNorm,
    pub gate: Gate,
    pub c: usize,
}

impl StmBlock {
    pub fn new(s: &mut Scope<'_>, name: &str, c: usize, gated: bool) -> Self {
        let mut s = s.sub(name);
        StmBlock {
            ln1: LayerNorm::new(&mut s, "ln1", c),
            depth_rb: DepthRb::new(&mut s, "depth_rb", c),
            dw5: Conv2d::depthwise(&mut s, "dw5", c, 5),
            proj: Conv2d::pointwise(&mut s, "proj", c, c, true),
            ln2: LayerNorm::new(&mut s, "ln2", c),
            gate: Gate::new(&mut s, "gate", c, gated),
            c,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        check_channels(&x, self.c, "stm_block")?;
        if !x.value().all_finite() {
            return Err(Error::Numeric("stm_block: non-finite input".into()));
        }
        let t = self.ln1.forward(p, x)?;
        let t = self.proj.forward(p, self.dw5.forward(p, self.depth_rb.forward(p, t)));
        let x = x + t;
        let g = self.gate.forward(p, self.ln2.forward(p, x)?)?;
        Ok(x + g)
    }

    pub fn macs_per_pixel(c: usize) -> u64 {
        DepthRb::macs_per_pixel(c) + 25 * c as u64 + (c * c) as u64 + Gate::macs_per_pixel(c, true)
    }
}

/// Residual block with two 3x3 convolutions, the baseline transform unit.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub c: usize,
}

impl ResidualBlock {
    pub fn new(s: &mut Scope<'_>, name: &str, c: usize) -> Self {
        let mut s = s.sub(name);
        ResidualBlock {
            conv1: Conv2d::new(&mut s, "conv1", c, c, 3, 1, 1, true),
            conv2: Conv2d::new(&mut s, "conv2", c, c, 3, 1, 1, true),
            c,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        check_channels(&x, self.c, "residual_block")?;
        Ok(x + self.conv2.forward(p, self.conv1.forward(p, x).gelu()))
    }
}

/// Either an STM block or the residual-block baseline, per transform stage.
#[derive(Clone, Debug)]
pub enum MixBlock {
    Stm(StmBlock),
    Residual(ResidualBlock),
}

impl MixBlock {
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        match self {
            MixBlock::Stm(b) => b.forward(p, x),
            MixBlock::Residual(b) => b.forward(p, x),
        }
    }

    pub fn macs_per_pixel(&self) -> u64 {
        match self {
            MixBlock::Stm(b) => {
                StmBlock::macs_per_pixel(b.c) - Gate::macs_per_pixel(b.c, true) + Gate::macs_per_pixel(b.c, b.gate.w2.is_some())
            }
            MixBlock::Residual(b) => 2 * 9 * (b.c * b.c) as u64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockSpec {
    ResidualBlock3x3x2,
    Stm,
    StmX2,
}

impl FromStr for BlockSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual_block_3x3x2" => Ok(BlockSpec::ResidualBlock3x3x2),
            "stm_block" => Ok(BlockSpec::Stm),
            "stm_block_x2" => Ok(BlockSpec::StmX2),
            other => Err(Error::Usage(format!("unknown block spec {other:?}"))),
        }
    }
}

/// Exact convolution/linear multiply-accumulate count of one block applied to
/// a `c x h x w` feature map. Normalisation, activations and elementwise
/// products are not counted.
pub fn count_macs(spec: BlockSpec, c: usize, h: usize, w: usize) -> u64 {
    let px = (h * w) as u64;
    match spec {
        BlockSpec::ResidualBlock3x3x2 => 2 * conv_macs(3, c, c, 1, h, w),
        BlockSpec::Stm => StmBlock::macs_per_pixel(c) * px,
        BlockSpec::StmX2 => 2 * StmBlock::macs_per_pixel(c) * px,
    }
}
