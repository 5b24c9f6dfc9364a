//! Analysis/synthesis transforms and the hyperprior pair.

use lic_autodiff::Var;

use crate::config::CodecConfig;
use crate::nn_blocks::{check_channels, Conv2d, Deconv2d, MixBlock, ResidualBlock, StmBlock};
use crate::params::{Bound, Scope};
use crate::{Error, Result};

fn mix_blocks(s: &mut Scope<'_>, cfg: &CodecConfig, stage: usize, c: usize) -> Vec<MixBlock> {
    (0..cfg.stm_blocks_per_stage)
        .map(|b| {
            let name = format!("stage{stage}.block{b}");
            if cfg.ablation.stmt {
                MixBlock::Stm(StmBlock::new(s, &name, c, cfg.ablation.gate))
            } else {
                MixBlock::Residual(ResidualBlock::new(s, &name, c))
            }
        })
        .collect()
}

fn spatial_multiple(x: &Var<'_>, k: usize, what: &str) -> Result<()> {
    let s = x.shape();
    if s[2] % k != 0 || s[3] % k != 0 || s[2] == 0 || s[3] == 0 {
        return Err(Error::Shape(format!("{what}: spatial size {}x{} is not a multiple of {k}", s[2], s[3])));
    }
    Ok(())
}

/// `g_a`: four stride-2 stages, image `3 x H x W` to latent `M x H/16 x W/16`.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub down: Vec<Conv2d>,
    pub blocks: Vec<Vec<MixBlock>>,
}

impl Analysis {
    pub fn new(s: &mut Scope<'_>, cfg: &CodecConfig) -> Self {
        let mut s = s.sub("g_a");
        let chans = [3, cfg.n, cfg.n, cfg.n, cfg.m];
        let mut down = Vec::new();
        let mut blocks = Vec::new();
        for st in 0..4 {
            down.push(Conv2d::new(&mut s, &format!("stage{st}.down"), chans[st], chans[st + 1], 5, 2, 1, true));
            blocks.push(mix_blocks(&mut s, cfg, st, chans[st + 1]));
        }
        Analysis { down, blocks }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        check_channels(&x, 3, "analysis")?;
        spatial_multiple(&x, 16, "analysis")?;
        let mut h = x;
        for (down, blocks) in self.down.iter().zip(&self.blocks) {
            h = down.forward(p, h);
            for b in blocks {
                h = b.forward(p, h)?;
            }
        }
        Ok(h)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let mut total = 0;
        let (mut h, mut w) = (h, w);
        for (down, blocks) in self.down.iter().zip(&self.blocks) {
            h /= 2;
            w /= 2;
            total += down.macs(h, w);
            total += blocks.iter().map(|b| b.macs_per_pixel() * (h * w) as u64).sum::<u64>();
        }
        total
    }
}

/// `g_s`: mirror of [`Analysis`] with stride-2 transposed convolutions.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub blocks: Vec<Vec<MixBlock>>,
    pub up: Vec<Deconv2d>,
    pub m: usize,
}

impl Synthesis {
    pub fn new(s: &mut Scope<'_>, cfg: &CodecConfig) -> Self {
        let mut s = s.sub("g_s");
        let chans = [cfg.m, cfg.n, cfg.n, cfg.n, 3];
        let mut blocks = Vec::new();
        let mut up = Vec::new();
        for st in 0..4 {
            blocks.push(mix_blocks(&mut s, cfg, st, chans[st]));
            up.push(Deconv2d::new(&mut s, &format!("stage{st}.up"), chans[st], chans[st + 1], 5));
        }
        Synthesis { blocks, up, m: cfg.m }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, y: Var<'g>) -> Result<Var<'g>> {
        check_channels(&y, self.m, "synthesis")?;
        let mut h = y;
        for (blocks, up) in self.blocks.iter().zip(&self.up) {
            for b in blocks {
                h = b.forward(p, h)?;
            }
            h = up.forward(p, h);
        }
        Ok(h)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let mut total = 0;
        let (mut h, mut w) = (h, w);
        for (blocks, up) in self.blocks.iter().zip(&self.up) {
            total += blocks.iter().map(|b| b.macs_per_pixel() * (h * w) as u64).sum::<u64>();
            total += up.macs(h, w);
            h *= 2;
            w *= 2;
        }
        total
    }
}

/// `h_a`: conv3x3 -> GELU -> stride-2 conv5x5 -> GELU -> stride-2 conv5x5.
#[derive(Clone, Debug)]
pub struct HyperAnalysis {
    pub c1: Conv2d,
    pub c2: Conv2d,
    pub c3: Conv2d,
    pub m: usize,
}

impl HyperAnalysis {
    pub fn new(s: &mut Scope<'_>, cfg: &CodecConfig) -> Self {
        let mut s = s.sub("h_a");
        HyperAnalysis {
            c1: Conv2d::new(&mut s, "c1", cfg.m, cfg.n, 3, 1, 1, true),
            c2: Conv2d::new(&mut s, "c2", cfg.n, cfg.n, 5, 2, 1, true),
            c3: Conv2d::new(&mut s, "c3", cfg.n, cfg.n, 5, 2, 1, true),
            m: cfg.m,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, y: Var<'g>) -> Result<Var<'g>> {
        check_channels(&y, self.m, "hyper_analysis")?;
        spatial_multiple(&y, 4, "hyper_analysis")?;
        let h = self.c1.forward(p, y).gelu();
        let h = self.c2.forward(p, h).gelu();
        Ok(self.c3.forward(p, h))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.c1.macs(h, w) + self.c2.macs(h / 2, w / 2) + self.c3.macs(h / 4, w / 4)
    }
}

/// `h_s`: two stride-2 transposed convs and a conv3x3 producing the `2M`
/// channel hyperprior at latent resolution.
#[derive(Clone, Debug)]
pub struct HyperSynthesis {
    pub d1: Deconv2d,
    pub d2: Deconv2d,
    pub c3: Conv2d,
    pub n: usize,
}

impl HyperSynthesis {
    pub fn new(s: &mut Scope<'_>, cfg: &CodecConfig) -> Self {
        let mut s = s.sub("h_s");
        HyperSynthesis {
            d1: Deconv2d::new(&mut s, "d1", cfg.n, cfg.n, 5),
            d2: Deconv2d::new(&mut s, "d2", cfg.n, cfg.n, 5),
            c3: Conv2d::new(&mut s, "c3", cfg.n, 2 * cfg.m, 3, 1, 1, true),
            n: cfg.n,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Result<Var<'g>> {
        check_channels(&z, self.n, "hyper_synthesis")?;
        let h = self.d1.forward(p, z).gelu();
        let h = self.d2.forward(p, h).gelu();
        Ok(self.c3.forward(p, h))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.d1.macs(h, w) + self.d2.macs(2 * h, 2 * w) + self.c3.macs(4 * h, 4 * w)
    }
}
