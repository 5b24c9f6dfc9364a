//! Codec configuration, presets and ablation toggles.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Rate-distortion weights for MSE-optimised models (MSE on the 0-255 scale).
pub const MSE_LAMBDAS: [f64; 6] = [0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483];
/// Rate-distortion weights for MS-SSIM-optimised models (distortion `1 - MS-SSIM`).
pub const MSSSIM_LAMBDAS: [f64; 6] = [2.4, 4.58, 8.73, 16.64, 31.73, 60.5];

/// Lower bound on every predicted Gaussian scale.
pub const SIGMA_MIN: f64 = 0.11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Mse,
    MsSsim,
}

impl Metric {
    pub fn lambda(self, index: usize) -> f64 {
        match self {
            Metric::Mse => MSE_LAMBDAS[index],
            Metric::MsSsim => MSSSIM_LAMBDAS[index],
        }
    }
}

/// Component toggles; `Ablation::full()` enables everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Encoder-side iterative latent refinement.
    pub ilr: bool,
    /// Guided selective compression.
    pub gsc: bool,
    pub rope: bool,
    /// Context reweighting.
    pub cr: bool,
    /// Hyperprior-guided global context for the first slice.
    pub hgcp: bool,
    /// Token mixing blocks in the transforms (residual blocks when off).
    pub stmt: bool,
    /// Gated projections (plain two-layer MLP when off).
    pub gate: bool,
}

impl Ablation {
    pub fn full() -> Self {
        Ablation { ilr: true, gsc: true, rope: true, cr: true, hgcp: true, stmt: true, gate: true }
    }

    pub fn none() -> Self {
        Ablation { ilr: false, gsc: false, rope: false, cr: false, hgcp: false, stmt: false, gate: false }
    }

    /// Toggle sets of the ablation table: case 0 = full model, cases 1-7
    /// cumulative removals, 8-14 a single component kept, 15 = everything off.
    pub fn case(index: usize) -> Result<Self> {
        let set = |a: &mut Ablation, k: usize, on: bool| match k {
            0 => a.ilr = on,
            1 => a.gsc = on,
            2 => a.rope = on,
            3 => a.cr = on,
            4 => a.hgcp = on,
            5 => a.stmt = on,
            _ => a.gate = on,
        };
        let mut a = Ablation::full();
        match index {
            0 => {}
            1 => a.gsc = false,
            2 => a.ilr = false,
            3..=7 => {
                for k in 0..index - 1 {
                    set(&mut a, k, false);
                }
            }
            8..=14 => {
                a = Ablation::none();
                set(&mut a, index - 8, true);
            }
            15 => a = Ablation::none(),
            _ => return Err(Error::Usage(format!("ablation case {index} out of range 0..=15"))),
        }
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub name: String,
    /// Identifier written to bitstream headers.
    pub model_id: u8,
    /// Transform channels.
    pub n: usize,
    /// Latent channels.
    pub m: usize,
    pub num_slices: usize,
    pub stm_blocks_per_stage: usize,
    /// Width of every context branch output.
    pub ctx_ch: usize,
    /// Hidden width of the entropy parameter networks.
    pub ep_hidden: usize,
    /// Hidden width of the latent residual predictors.
    pub lrp_hidden: usize,
    /// Hidden width of the skip predictors.
    pub skip_hidden: usize,
    pub window: usize,
    pub window_overlap: usize,
    /// Scale threshold of the skip-map initialisation.
    pub skip_xi: f64,
    pub metric: Metric,
    pub lambda_index: usize,
    /// Only the hyperprior conditions the entropy model (no slice contexts).
    pub hyperprior_only: bool,
    pub ablation: Ablation,
    pub seed: u64,
}

impl CodecConfig {
    /// Smallest configuration that keeps every mechanism; used by tests.
    pub fn tiny() -> Self {
        CodecConfig {
            name: "tiny".into(),
            model_id: 1,
            n: 16,
            m: 32,
            num_slices: 4,
            stm_blocks_per_stage: 1,
            ctx_ch: 16,
            ep_hidden: 32,
            lrp_hidden: 16,
            skip_hidden: 16,
            window: 8,
            window_overlap: 4,
            skip_xi: 0.3,
            metric: Metric::Mse,
            lambda_index: 0,
            hyperprior_only: false,
            ablation: Ablation::full(),
            seed: 0,
        }
    }

    /// Desk-scale default.
    pub fn desk() -> Self {
        CodecConfig {
            name: "desk".into(),
            model_id: 2,
            n: 32,
            m: 48,
            num_slices: 4,
            stm_blocks_per_stage: 2,
            ctx_ch: 24,
            ep_hidden: 48,
            lrp_hidden: 24,
            skip_hidden: 24,
            ..Self::tiny()
        }
    }

    /// Full-size configuration (parameter counting and complexity reports).
    pub fn full() -> Self {
        CodecConfig {
            name: "full".into(),
            model_id: 3,
            n: 192,
            m: 320,
            num_slices: 10,
            stm_blocks_per_stage: 2,
            ctx_ch: 192,
            ep_hidden: 408,
            lrp_hidden: 224,
            skip_hidden: 64,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown preset {other:?} (tiny, desk, full)"))),
        }
    }

    pub fn preset_by_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Self::tiny()),
            2 => Ok(Self::desk()),
            3 => Ok(Self::full()),
            other => Err(Error::Format(format!("unknown model id {other}"))),
        }
    }

    pub fn slice_ch(&self) -> usize {
        self.m / self.num_slices
    }

    pub fn lambda(&self) -> f64 {
        self.metric.lambda(self.lambda_index)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 || self.m < 4 {
            return Err(Error::Config(format!("N={} and M={} must both be at least 4", self.n, self.m)));
        }
        if self.num_slices < 2 {
            return Err(Error::Config(format!("num_slices={} must be at least 2", self.num_slices)));
        }
        if self.m % self.num_slices != 0 {
            return Err(Error::Config(format!("M={} is not divisible by num_slices={}", self.m, self.num_slices)));
        }
        if self.ctx_ch % 2 != 0 || self.ctx_ch == 0 {
            return Err(Error::Config(format!("context width {} must be even and positive", self.ctx_ch)));
        }
        if self.window == 0 || self.window_overlap >= self.window {
            return Err(Error::Config(format!("window {} / overlap {} invalid", self.window, self.window_overlap)));
        }
        if self.lambda_index >= MSE_LAMBDAS.len() {
            return Err(Error::Config(format!("lambda index {} out of range", self.lambda_index)));
        }
        if self.num_slices > 255 {
            return Err(Error::Config("at most 255 slices".into()));
        }
        Ok(())
    }

    /// Hash of everything that affects the parameter layout.
    pub fn arch_hash(&self) -> String {
        let arch = (
            self.n,
            self.m,
            self.num_slices,
            self.stm_blocks_per_stage,
            self.ctx_ch,
            self.ep_hidden,
            self.lrp_hidden,
            self.skip_hidden,
            self.hyperprior_only,
            self.ablation.rope,
            self.ablation.cr,
            self.ablation.hgcp,
            self.ablation.stmt,
            self.ablation.gate,
        );
        let json = serde_json::to_string(&arch).expect("serialisable");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_indivisible_rejected() {
        for c in [CodecConfig::tiny(), CodecConfig::desk(), CodecConfig::full()] {
            c.validate().unwrap();
        }
        let mut c = CodecConfig::tiny();
        c.m = 30;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_cases() {
        assert_eq!(Ablation::case(0).unwrap(), Ablation::full());
        assert!(!Ablation::case(1).unwrap().gsc);
        let c2 = Ablation::case(2).unwrap();
        assert!(!c2.ilr && c2.gsc && c2.rope);
        let c6 = Ablation::case(6).unwrap();
        assert!(!c6.hgcp && c6.stmt && c6.gate && !c6.cr);
        let c7 = Ablation::case(7).unwrap();
        assert!(!c7.stmt && c7.gate);
        let c14 = Ablation::case(14).unwrap();
        assert!(c14.gate && !c14.rope);
        assert_eq!(Ablation::case(15).unwrap(), Ablation::none());
        assert!(Ablation::case(16).is_err());
    }
}
