//! Encoder-side latent refinement with stochastic Gumbel annealing.

use lic_autodiff::{Adam, Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::coding::codec::{hard_eval, Latents};
use crate::entropy::{gaussian_likelihood, rate_bits};
use crate::latent::split_slice_vars;
use crate::metrics::{distortion_var, psnr, rd_loss};
use crate::model::{run_schedule, Model, PhaseCtx, PhaseHandler, PhaseOut};
use crate::params::Bound;
use crate::{Error, Result};

const FRAC_CLAMP: f64 = 1e-4;

/// `min(0.5, exp(-rate * j))`; a positive `rate` anneals the temperature.
pub fn temperature_schedule(j: usize, rate: f64) -> f64 {
    0.5f64.min((-rate * j as f64).exp())
}

/// Default annealing rate of [`temperature_schedule`].
pub const TAU_RATE: f64 = 0.001;

/// `(P(down), P(up))` of rounding a value with fractional part `frac`.
pub fn sga_probs(frac: f64, tau: f64) -> (f64, f64) {
    let f = frac.clamp(FRAC_CLAMP, 1.0 - FRAC_CLAMP);
    let ld = -f.atanh() / tau;
    let lu = -(1.0 - f).atanh() / tau;
    let m = ld.max(lu);
    let (ed, eu) = ((ld - m).exp(), (lu - m).exp());
    (ed / (ed + eu), eu / (ed + eu))
}

fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// One stochastic rounding of `lambda`: the hard rounded values (categorical
/// draw) and the Gumbel-softmax relaxation sharing the same noise.
pub fn sga_sample<'g>(lambda: Var<'g>, tau: f64, rng: &mut ChaCha8Rng) -> (Tensor, Var<'g>) {
    let g = lambda.graph();
    let lv = lambda.value();
    let floor = lv.map(f64::floor);
    let noise_down = Tensor::from_fn(lv.shape(), |_| gumbel(rng));
    let noise_up = Tensor::from_fn(lv.shape(), |_| gumbel(rng));
    let frac = (lambda - g.constant(floor.clone())).clamp(FRAC_CLAMP, 1.0 - FRAC_CLAMP);
    let ld = frac.atanh().scale(-1.0 / tau) + g.constant(noise_down);
    let lu = frac.neg().add_scalar(1.0).atanh().scale(-1.0 / tau) + g.constant(noise_up);
    let (ldv, luv) = (ld.value(), lu.value());
    let hard = Tensor::from_fn(lv.shape(), |i| floor.data()[i] + if luv.data()[i] > ldv.data()[i] { 1.0 } else { 0.0 });
    let w_up = (lu - ld).scale(1.0 / tau).sigmoid();
    (hard, g.constant(floor) + w_up)
}

struct SgaHandler<'g, 'r> {
    y: Vec<Var<'g>>,
    tau: f64,
    rng: &'r mut ChaCha8Rng,
    bits: Option<Var<'g>>,
}

impl<'g> PhaseHandler<'g> for SgaHandler<'g, '_> {
    fn phase(&mut self, ctx: &PhaseCtx<'_, 'g>) -> Result<PhaseOut<'g>> {
        let y = self.y[ctx.slice];
        let g = y.graph();
        let pm = g.constant(ctx.phase_mask.clone());
        let (mu, sigma) = (ctx.params.mu, ctx.params.sigma);
        let (hard, soft) = sga_sample(y - mu, self.tau, self.rng);
        let lik = gaussian_likelihood(soft + mu, mu, sigma)?;
        let lik = lik * pm + pm.neg().add_scalar(1.0);
        let b = rate_bits(lik);
        self.bits = Some(match self.bits {
            Some(a) => a + b,
            None => b,
        });
        let yhat = (soft + mu + ctx.r) * pm;
        let q = hard.zip_map(&crate::model::broadcast_mask(ctx.phase_mask, &hard.shape().to_vec()), |a, m| a * m);
        Ok(PhaseOut { yhat, q })
    }
}

#[derive(Clone, Debug)]
pub struct RefineConfig {
    pub steps: usize,
    pub lr: f64,
    pub tau_rate: f64,
    /// Hard-rounded evaluation interval for best-iterate tracking.
    pub eval_every: usize,
    /// Abort once the relaxed loss exceeds this multiple of the initial loss.
    pub abort_factor: f64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { steps: 3000, lr: 1e-3, tau_rate: TAU_RATE, eval_every: 10, abort_factor: 10.0, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineLogEntry {
    pub step: usize,
    pub tau: f64,
    /// Relaxed (SGA) objective.
    pub loss: f64,
    /// Hard-rounded objective at this iterate, when evaluated.
    pub hard_loss: Option<f64>,
    pub bpp: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug)]
pub struct RefineResult {
    pub latents: Latents,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_step: usize,
    pub log: Vec<RefineLogEntry>,
}

fn crop_var(v: Var<'_>, (h, w): (usize, usize)) -> Var<'_> {
    v.narrow(2, 0, h).narrow(3, 0, w)
}

/// Hard-rounded RD loss of latents for the original-size region.
pub fn hard_rd_loss(model: &Model, x: &Tensor, lat: &Latents, orig: (usize, usize)) -> Result<(f64, f64, f64)> {
    let ev = hard_eval(model, lat, false)?;
    let x_hat = crate::image_io::crop(&ev.x_hat, orig.0, orig.1)?;
    let x0 = crate::image_io::crop(x, orig.0, orig.1)?;
    let bpp = (ev.y_bits + ev.z_bits) / (orig.0 * orig.1) as f64;
    let loss = rd_loss(&x0, &x_hat, bpp, model.cfg.lambda(), model.cfg.metric)?;
    Ok((loss, bpp, psnr(&x0, &x_hat)?))
}

/// Optimises `y` and `z` of the padded image `x` (original size `orig`).
/// Returns the best hard-rounded iterate seen (the starting point included).
pub fn refine(model: &Model, x: &Tensor, start: &Latents, orig: (usize, usize), cfg: &RefineConfig) -> Result<RefineResult> {
    use rand::SeedableRng;
    Model::check_image(x.shape())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (initial_loss, _, _) = hard_rd_loss(model, x, start, orig)?;
    let mut best = (initial_loss, 0usize, start.clone());
    let mut vars = vec![start.y.clone(), start.z.clone()];
    let mut adam = Adam::new(cfg.lr);
    let mut log = Vec::with_capacity(cfg.steps);
    let pixels = (orig.0 * orig.1) as f64;
    for j in 0..cfg.steps {
        let tau = temperature_schedule(j, cfg.tau_rate);
        let g = Graph::new();
        let p = Bound::with_filter(&g, &model.store, |_| false);
        let y = g.leaf(vars[0].clone());
        let z = g.leaf(vars[1].clone());
        let (_, zsoft) = sga_sample(z, tau, &mut rng);
        let z_bits = rate_bits(model.prior.likelihood(&p, zsoft)?);
        let hyper = model.h_s.forward(&p, zsoft)?;
        let mut h = SgaHandler { y: split_slice_vars(y, model.cfg.num_slices)?, tau, rng: &mut rng, bits: None };
        let out = run_schedule(model, &p, hyper, false, &mut h)?;
        let y_bits = h.bits.expect("phases ran");
        let x_hat = model.g_s.forward(&p, out.yhat)?;
        let xc = crop_var(g.constant(x.clone()), orig);
        let d = distortion_var(xc, crop_var(x_hat, orig), model.cfg.metric)?;
        let bpp = (y_bits + z_bits).scale(1.0 / pixels);
        let loss = bpp + d.scale(model.cfg.lambda());
        let lv = loss.value().item();
        if !lv.is_finite() {
            return Err(Error::Diverged { step: j, loss: lv, initial: initial_loss });
        }
        if lv > cfg.abort_factor * initial_loss {
            return Err(Error::Diverged { step: j, loss: lv, initial: initial_loss });
        }
        let grads = g.backward(loss);
        let gy = grads.get(y).cloned();
        let gz = grads.get(z).cloned();
        adam.step(&mut vars, &[gy, gz]);
        let mut entry = RefineLogEntry {
            step: j + 1,
            tau,
            loss: lv,
            hard_loss: None,
            bpp: bpp.value().item(),
            psnr: if model.cfg.metric == crate::config::Metric::Mse {
                let mse = d.value().item() / (255.0 * 255.0);
                -10.0 * mse.max(1e-20).log10()
            } else {
                f64::NAN
            },
        };
        if (j + 1) % cfg.eval_every.max(1) == 0 || j + 1 == cfg.steps {
            let cand = Latents { y: vars[0].clone(), z: vars[1].clone() };
            let (hl, _, _) = hard_rd_loss(model, x, &cand, orig)?;
            entry.hard_loss = Some(hl);
            if hl < best.0 {
                best = (hl, j + 1, cand);
            }
        }
        log.push(entry);
    }
    Ok(RefineResult { latents: best.2, initial_loss, final_loss: best.0, best_step: best.1, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn temperature_values() {
        assert_eq!(temperature_schedule(0, TAU_RATE), 0.5);
        assert!((temperature_schedule(3000, TAU_RATE) - (-3.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn symmetric_at_half() {
        let (d, u) = sga_probs(0.5, 0.3);
        assert!((d - 0.5).abs() < 1e-15 && (u - 0.5).abs() < 1e-15);
        assert!(sga_probs(0.1, 1e-3).0 > 1.0 - 1e-12);
    }

    #[test]
    fn hard_sample_brackets_value() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = g.leaf(Tensor::from_vec(&[4], vec![-1.3, 0.2, 2.7, 5.5]));
        let (hard, soft) = sga_sample(l, 0.4, &mut rng);
        for i in 0..4 {
            let v = l.value().data()[i];
            assert!(hard.data()[i] == v.floor() || hard.data()[i] == v.ceil());
            assert!(soft.value().data()[i] >= v.floor() && soft.value().data()[i] <= v.ceil());
        }
    }
}
