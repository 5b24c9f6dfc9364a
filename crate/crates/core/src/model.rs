//! The full codec network and the shared slice/phase schedule used by
//! training, encoding, decoding and refinement.

use lic_autodiff::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::CodecConfig;
use crate::context::{CheckerboardGlobal, InterGlobal, InterLocal, IntraLocal};
use crate::entropy::{gaussian_likelihood, rate_bits, FactorizedPrior};
use crate::latent::{
    mixed_quantize, split_slice_vars, CheckerboardMask, ContextBundle, EntropyParameters, GaussianParams,
    LatentResidualPredictor, Phase, QuantMode,
};
use crate::params::{Bound, ParamStore};
use crate::selective::{binarize, scale_threshold_init, SkipInputs, SkipPredictor};
use crate::transforms::{Analysis, HyperAnalysis, HyperSynthesis, Synthesis};
use crate::{Error, Result};

/// Images must be padded to a multiple of this.
pub const SPATIAL_MULTIPLE: usize = 64;

/// Context and prediction modules of one slice.
#[derive(Clone, Debug)]
pub struct SliceModules {
    pub inter_local: Option<InterLocal>,
    pub inter_global: Option<InterGlobal>,
    pub intra_local: Option<IntraLocal>,
    pub intra_global: Option<CheckerboardGlobal>,
    pub ep: [EntropyParameters; 2],
    pub lrp: [LatentResidualPredictor; 2],
    pub skip: [SkipPredictor; 2],
}

pub struct Model {
    pub cfg: CodecConfig,
    pub store: ParamStore,
    pub g_a: Analysis,
    pub g_s: Synthesis,
    pub h_a: HyperAnalysis,
    pub h_s: HyperSynthesis,
    pub prior: FactorizedPrior,
    pub slices: Vec<SliceModules>,
}

impl Model {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::build(cfg.clone(), ParamStore::new(cfg.seed)))
    }

    /// Layout only: parameter shapes without allocated values.
    pub fn layout(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::build(cfg, ParamStore::shapes_only()))
    }

    fn build(cfg: CodecConfig, mut store: ParamStore) -> Self {
        let mut s = store.scope("");
        let g_a = Analysis::new(&mut s, &cfg);
        let g_s = Synthesis::new(&mut s, &cfg);
        let h_a = HyperAnalysis::new(&mut s, &cfg);
        let h_s = HyperSynthesis::new(&mut s, &cfg);
        let prior = FactorizedPrior::new(&mut s, cfg.n);
        let ctx = !cfg.hyperprior_only;
        let slices = (0..cfg.num_slices)
            .map(|i| SliceModules {
                inter_local: (ctx && i > 0).then(|| InterLocal::new(&mut s, &cfg, i)),
                inter_global: (ctx && i > 0).then(|| InterGlobal::new(&mut s, &cfg, i)),
                intra_local: ctx.then(|| IntraLocal::new(&mut s, &cfg, i)),
                intra_global: (ctx && (i > 0 || cfg.ablation.hgcp)).then(|| CheckerboardGlobal::new(&mut s, &cfg, i)),
                ep: Phase::BOTH.map(|ph| EntropyParameters::new(&mut s, &cfg, i, ph)),
                lrp: Phase::BOTH.map(|ph| LatentResidualPredictor::new(&mut s, &cfg, i, ph)),
                skip: Phase::BOTH.map(|ph| SkipPredictor::new(&mut s, &cfg, i, ph)),
            })
            .collect();
        Model { cfg, store, g_a, g_s, h_a, h_s, prior, slices }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Parameters of the codec proper (everything but the skip predictors).
    pub fn is_codec_param(name: &str) -> bool {
        !name.starts_with("skip.")
    }

    pub fn check_image(x: &[usize]) -> Result<()> {
        if x.len() != 4 || x[1] != 3 || x[2] % SPATIAL_MULTIPLE != 0 || x[3] % SPATIAL_MULTIPLE != 0 || x[2] == 0 || x[3] == 0 {
            return Err(Error::Shape(format!(
                "model input must be [B, 3, H, W] with H, W positive multiples of {SPATIAL_MULTIPLE}, got {x:?}"
            )));
        }
        Ok(())
    }

    /// Multiply-accumulates of the transforms for an `h x w` image.
    pub fn transform_macs(&self, h: usize, w: usize) -> u64 {
        self.g_a.macs(h, w) + self.g_s.macs(h / 16, w / 16) + self.h_a.macs(h / 16, w / 16) + self.h_s.macs(h / 64, w / 64)
    }
}

/// Everything a phase handler needs to quantise, code or relax one phase.
pub struct PhaseCtx<'a, 'g> {
    pub slice: usize,
    pub phase: Phase,
    pub mask: &'a CheckerboardMask,
    /// `[1,1,h,w]` indicator of the phase positions.
    pub phase_mask: &'a Tensor,
    pub params: GaussianParams<'g>,
    pub r: Var<'g>,
    /// Hard skip map of the slice (1 = code); `None` when selective
    /// compression is off.
    pub skip: Option<&'a Tensor>,
    pub eps: Option<Var<'g>>,
}

pub struct PhaseOut<'g> {
    /// Decoded values at the phase positions, zero elsewhere.
    pub yhat: Var<'g>,
    /// Integer residuals at coded positions of the phase, zero elsewhere.
    pub q: Tensor,
}

pub trait PhaseHandler<'g> {
    fn phase(&mut self, ctx: &PhaseCtx<'_, 'g>) -> Result<PhaseOut<'g>>;
}

pub struct ScheduleOut<'g> {
    pub yhat: Var<'g>,
    /// Integer residual maps per slice.
    pub q: Vec<Tensor>,
    /// Skip maps per slice (when selective compression is on).
    pub skip: Vec<Tensor>,
    /// Coding probabilities `eps` per slice and phase.
    pub eps: Vec<[Option<Var<'g>>; 2]>,
}

fn cat_opt<'g>(parts: &[Var<'g>]) -> Option<Var<'g>> {
    (!parts.is_empty()).then(|| Var::cat(parts, 1))
}

/// Runs the two-pass checkerboard schedule over all slices. `hyper` is the
/// `[B, 2M, h, w]` hyperprior; `selective` enables skip prediction.
pub fn run_schedule<'g>(
    model: &Model,
    p: &Bound<'g>,
    hyper: Var<'g>,
    selective: bool,
    handler: &mut dyn PhaseHandler<'g>,
) -> Result<ScheduleOut<'g>> {
    let cfg = &model.cfg;
    let hs = hyper.shape();
    if hs.len() != 4 || hs[1] != 2 * cfg.m {
        return Err(Error::Shape(format!("hyperprior must be [B, {}, h, w], got {hs:?}", 2 * cfg.m)));
    }
    let (b, h, w) = (hs[0], hs[2], hs[3]);
    let cs = cfg.slice_ch();
    let g = p.graph();
    let mask = CheckerboardMask::new(h, w);
    let masks = Phase::BOTH.map(|ph| mask.tensor(ph));
    let selective = selective && cfg.ablation.gsc;
    let mut decoded: Vec<Var<'g>> = Vec::new();
    let mut qs: Vec<Tensor> = Vec::new();
    let mut skips = Vec::new();
    let mut eps_all = Vec::new();
    for (i, m) in model.slices.iter().enumerate() {
        let prev = cat_opt(&decoded);
        let prev_q = (!qs.is_empty()).then(|| {
            let refs: Vec<&Tensor> = qs.iter().collect();
            g.constant(Tensor::cat(&refs, 1).expect("residual maps share a shape"))
        });
        let inter_local = m.inter_local.as_ref().map(|c| c.forward(p, prev)).transpose()?;
        let inter_global = m.inter_global.as_ref().map(|c| c.forward(p, prev)).transpose()?;
        let mut skip_map = Tensor::zeros(&[b, cs, h, w]);
        let mut q_slice = Tensor::zeros(&[b, cs, h, w]);
        let mut eps_slice = [None, None];
        let mut anchor_map: Option<Var<'g>> = None;
        let mut anchor_q: Option<Tensor> = None;
        let mut yhat_slice: Option<Var<'g>> = None;
        for ph in Phase::BOTH {
            let pi = ph.index();
            let mut bundle = ContextBundle { inter_local, inter_global, ..ContextBundle::hyper_only(hyper) };
            if ph == Phase::NonAnchor {
                let am = anchor_map.expect("anchor phase runs first");
                bundle.intra_local = m.intra_local.as_ref().map(|c| c.forward(p, am)).transpose()?;
                let guide = if i == 0 { hyper } else { decoded[i - 1] };
                bundle.intra_global = m.intra_global.as_ref().map(|c| c.forward(p, guide, am)).transpose()?;
            }
            let params = m.ep[pi].forward(p, &bundle)?;
            let r = m.lrp[pi].forward(p, hyper, prev, anchor_map.filter(|_| ph == Phase::NonAnchor))?;
            let mut eps = None;
            if selective {
                let init = scale_threshold_init(&params.sigma.value(), cfg.skip_xi);
                let inputs = SkipInputs {
                    init: g.constant(init),
                    hyper,
                    prev: prev_q,
                    anchor: anchor_q.as_ref().filter(|_| ph == Phase::NonAnchor).map(|q| g.constant(q.clone())),
                };
                let e = m.skip[pi].forward(p, &inputs)?;
                let hard = binarize(&e.value());
                let pm = &masks[pi];
                let hw = h * w;
                for (k, v) in skip_map.data_mut().iter_mut().enumerate() {
                    if pm.data()[k % hw] != 0.0 {
                        *v = hard.data()[k];
                    }
                }
                eps = Some(e);
            }
            eps_slice[pi] = eps;
            let ctx = PhaseCtx {
                slice: i,
                phase: ph,
                mask: &mask,
                phase_mask: &masks[pi],
                params,
                r,
                skip: selective.then_some(&skip_map),
                eps,
            };
            let out = handler.phase(&ctx)?;
            if out.yhat.shape() != [b, cs, h, w] || out.q.shape() != [b, cs, h, w] {
                return Err(Error::Shape(format!("phase handler returned {:?}", out.yhat.shape())));
            }
            q_slice.add_assign(&out.q);
            yhat_slice = Some(match yhat_slice {
                Some(a) => a + out.yhat,
                None => out.yhat,
            });
            if ph == Phase::Anchor {
                anchor_map = Some(out.yhat);
                anchor_q = Some(out.q);
            }
        }
        decoded.push(yhat_slice.expect("two phases"));
        qs.push(q_slice);
        if selective {
            skips.push(skip_map);
        }
        eps_all.push(eps_slice);
    }
    Ok(ScheduleOut { yhat: Var::cat(&decoded, 1), q: qs, skip: skips, eps: eps_all })
}

/// Mixed quantisation for training: STE values for the synthesis path and
/// an AUN rate estimate.
pub struct TrainHandler<'g, 'r> {
    pub y: Vec<Var<'g>>,
    pub rng: &'r mut ChaCha8Rng,
    pub bits: Option<Var<'g>>,
}

pub(crate) fn uniform_noise<'g>(g: &'g Graph, shape: &[usize], rng: &mut ChaCha8Rng) -> Var<'g> {
    g.constant(Tensor::from_fn(shape, |_| rng.random_range(-0.5..0.5)))
}

fn add_bits<'g>(acc: &mut Option<Var<'g>>, b: Var<'g>) {
    *acc = Some(match *acc {
        Some(a) => a + b,
        None => b,
    });
}

impl<'g> PhaseHandler<'g> for TrainHandler<'g, '_> {
    fn phase(&mut self, ctx: &PhaseCtx<'_, 'g>) -> Result<PhaseOut<'g>> {
        let y = self.y[ctx.slice];
        let g = y.graph();
        let pm = g.constant(ctx.phase_mask.clone());
        let (mu, sigma) = (ctx.params.mu, ctx.params.sigma);
        let yhat = mixed_quantize(y, mu, ctx.r, QuantMode::Ste, None)? * pm;
        let noise = uniform_noise(g, &y.shape(), self.rng);
        let noisy = mixed_quantize(y, mu, ctx.r, QuantMode::Aun, Some(noise))?;
        let lik = gaussian_likelihood(noisy, mu, sigma)?;
        let one = g.constant(Tensor::ones(&y.shape()));
        let lik = lik * pm + one * pm.neg().add_scalar(1.0);
        add_bits(&mut self.bits, rate_bits(lik));
        let q = (y.value().zip_map(&mu.value(), |a, b| (a - b).round())).zip_map(&broadcast_mask(ctx.phase_mask, &y.shape()), |a, m| a * m);
        Ok(PhaseOut { yhat, q })
    }
}

/// Expands a `[1,1,h,w]` mask to `shape`.
pub fn broadcast_mask(mask: &Tensor, shape: &[usize]) -> Tensor {
    let hw = mask.numel();
    Tensor::from_fn(shape, |i| mask.data()[i % hw])
}

/// Training-time forward pass.
pub struct TrainOut<'g> {
    pub x_hat: Var<'g>,
    pub y_bits: Var<'g>,
    pub z_bits: Var<'g>,
}

impl Model {
    /// `x` in `[0, 1]`, `[B, 3, H, W]`.
    pub fn forward_train<'g>(&self, p: &Bound<'g>, x: Var<'g>, rng: &mut ChaCha8Rng) -> Result<TrainOut<'g>> {
        Self::check_image(&x.shape())?;
        let g = p.graph();
        let y = self.g_a.forward(p, x)?;
        let z = self.h_a.forward(p, y)?;
        let z_noisy = z + uniform_noise(g, &z.shape(), rng);
        let z_bits = rate_bits(self.prior.likelihood(p, z_noisy)?);
        let hyper = self.h_s.forward(p, z.round_ste())?;
        let y_slices = split_slice_vars(y, self.cfg.num_slices)?;
        let mut handler = TrainHandler { y: y_slices, rng, bits: None };
        let out = run_schedule(self, p, hyper, false, &mut handler)?;
        let y_bits = handler.bits.expect("at least one phase");
        let x_hat = self.g_s.forward(p, out.yhat)?;
        Ok(TrainOut { x_hat, y_bits, z_bits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn train_forward_shapes_and_gradients() {
        let model = Model::new(CodecConfig::tiny()).unwrap();
        let g = Graph::new();
        let p = Bound::new(&g, &model.store);
        let x = g.constant(Tensor::from_fn(&[1, 3, 64, 64], |i| ((i * 31 % 97) as f64) / 97.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward_train(&p, x, &mut rng).unwrap();
        assert_eq!(out.x_hat.shape(), vec![1, 3, 64, 64]);
        let bits = out.y_bits.value().item() + out.z_bits.value().item();
        assert!(bits.is_finite() && bits > 0.0);
        let mut grads = g.backward(out.y_bits + out.z_bits + (out.x_hat - x).sqr().mean());
        let gs = p.collect_grads(&mut grads);
        assert!(gs.iter().flatten().all(|t| t.all_finite()));
        assert!(gs.iter().flatten().count() > 10);
    }
}
