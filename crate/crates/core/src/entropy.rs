//! Discretised Gaussian likelihoods, rate estimation and the factorised prior
//! of the hyper-latent.

use lic_autodiff::{std_normal_cdf, Tensor, Var};

use crate::config::SIGMA_MIN;
use crate::params::{Bound, Init, ParamId, Scope};
use crate::{Error, Result};

/// Probabilities below this are floored before taking logarithms.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;
/// Minimum mass of any symbol before CDF quantisation.
pub const PMF_FLOOR: f64 = 1.0 / 65536.0;

fn clamp_sigma(sigma: f64) -> f64 {
    if sigma < SIGMA_MIN {
        log::warn!("scale {sigma} below {SIGMA_MIN}, clamped");
        SIGMA_MIN
    } else {
        sigma
    }
}

/// Mass of the unit bin centred on `v - mu`, computed in the lower tail for
/// precision.
fn bin_mass(d: f64, sigma: f64) -> f64 {
    let a = d.abs();
    std_normal_cdf((0.5 - a) / sigma) - std_normal_cdf((-0.5 - a) / sigma)
}

/// `Phi((v + 0.5 - mu) / sigma) - Phi((v - 0.5 - mu) / sigma)`.
pub fn likelihood(v: f64, mu: f64, sigma: f64) -> f64 {
    bin_mass(v - mu, clamp_sigma(sigma))
}

/// Discretised Gaussian over the integer offsets `[-t, t]` around `mu`, with
/// the tail mass folded into the two endpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscretizedGaussian {
    pub mu: f64,
    pub sigma: f64,
    pub t: u32,
}

impl DiscretizedGaussian {
    pub fn new(mu: f64, sigma: f64, t: u32) -> Self {
        DiscretizedGaussian { mu, sigma: clamp_sigma(sigma), t }
    }

    /// Probabilities of offsets `-t..=t`.
    pub fn pmf(&self) -> Vec<f64> {
        let t = self.t as i64;
        let cdf = |x: f64| std_normal_cdf(x / self.sigma);
        let frac = self.mu - self.mu.round();
        (-t..=t)
            .map(|k| {
                let lo = if k == -t { f64::NEG_INFINITY } else { k as f64 - 0.5 - frac };
                let hi = if k == t { f64::INFINITY } else { k as f64 + 0.5 - frac };
                if hi <= 0.0 {
                    cdf(hi) - cdf(lo)
                } else if lo >= 0.0 {
                    cdf(-lo) - cdf(-hi)
                } else {
                    1.0 - cdf(lo) - cdf(-hi)
                }
            })
            .collect()
    }

    /// PMF with every entry raised to `floor` and renormalised.
    pub fn floored_pmf(&self, floor: f64) -> Vec<f64> {
        let mut p = self.pmf();
        for v in &mut p {
            *v = v.max(floor);
        }
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
        p
    }
}

/// Differentiable discretised-Gaussian likelihood of `x` under `(mu, sigma)`,
/// floored at [`LIKELIHOOD_FLOOR`].
pub fn gaussian_likelihood<'g>(x: Var<'g>, mu: Var<'g>, sigma: Var<'g>) -> Result<Var<'g>> {
    if x.shape() != mu.shape() || x.shape() != sigma.shape() {
        return Err(Error::Shape(format!(
            "likelihood: x {:?}, mu {:?}, sigma {:?}",
            x.shape(),
            mu.shape(),
            sigma.shape()
        )));
    }
    let sigma = sigma.lower_bound(SIGMA_MIN);
    let a = (x - mu).abs();
    let upper = (a.neg().add_scalar(0.5) / sigma).std_normal_cdf();
    let lower = (a.neg().add_scalar(-0.5) / sigma).std_normal_cdf();
    Ok((upper - lower).lower_bound(LIKELIHOOD_FLOOR))
}

/// Total bits `sum(-log2 p)` with probabilities floored.
pub fn estimate_rate(probs: &[f64]) -> f64 {
    probs.iter().map(|&p| -p.max(LIKELIHOOD_FLOOR).log2()).sum()
}

/// Differentiable `sum(-log2 p)`.
pub fn rate_bits<'g>(likelihoods: Var<'g>) -> Var<'g> {
    likelihoods.lower_bound(LIKELIHOOD_FLOOR).log2().neg().sum()
}

/// Bits of integer residuals `q` under zero-mean Gaussians of scale `sigma`
/// for the positions where `coded` is set.
pub fn residual_bits(q: &Tensor, sigma: &Tensor, coded: impl Fn(usize) -> bool) -> f64 {
    q.data()
        .iter()
        .zip(sigma.data())
        .enumerate()
        .filter(|(i, _)| coded(*i))
        .map(|(_, (&v, &s))| -bin_mass(v, s.max(SIGMA_MIN)).max(LIKELIHOOD_FLOOR).log2())
        .sum()
}

const FILTERS: [usize; 3] = [3, 3, 3];
const INIT_SCALE: f64 = 10.0;

/// Per-channel monotone cumulative network over the hyper-latent.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    pub matrices: Vec<ParamId>,
    pub biases: Vec<ParamId>,
    pub factors: Vec<ParamId>,
    pub channels: usize,
}

impl FactorizedPrior {
    pub fn new(s: &mut Scope<'_>, channels: usize) -> Self {
        let mut s = s.sub("prior");
        let dims: Vec<usize> = std::iter::once(1).chain(FILTERS).chain(std::iter::once(1)).collect();
        let scale = INIT_SCALE.powf(1.0 / (FILTERS.len() + 1) as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for i in 0..dims.len() - 1 {
            let (din, dout) = (dims[i], dims[i + 1]);
            let init = (1.0 / scale / dout as f64).exp_m1().ln();
            matrices.push(s.param(&format!("matrix{i}"), &[channels, dout, din], Init::Const(init)));
            biases.push(s.param(&format!("bias{i}"), &[channels, dout, 1], Init::Uniform(0.5)));
            if i < FILTERS.len() {
                factors.push(s.param(&format!("factor{i}"), &[channels, dout, 1], Init::Zeros));
            }
        }
        FactorizedPrior { matrices, biases, factors, channels }
    }

    /// Cumulative logits of `x` shaped `[C, 1, L]`.
    pub fn logits<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let mut h = x;
        for i in 0..self.matrices.len() {
            let m = p.get(self.matrices[i]).softplus();
            h = m.matmul(h) + p.get(self.biases[i]);
            if i < self.factors.len() {
                h = h + p.get(self.factors[i]).tanh() * h.tanh();
            }
        }
        h
    }

    fn to_channel_rows(z: Var<'_>) -> Result<(Var<'_>, Vec<usize>)> {
        let s = z.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("factorized prior expects [B, C, h, w], got {s:?}")));
        }
        let rows = z.permute(&[1, 0, 2, 3]).reshape(&[s[1], 1, s[0] * s[2] * s[3]]);
        Ok((rows, s))
    }

    /// Likelihood of each element of `z` (same shape), floored.
    pub fn likelihood<'g>(&self, p: &Bound<'g>, z: Var<'g>) -> Result<Var<'g>> {
        if z.shape().get(1) != Some(&self.channels) {
            return Err(Error::Shape(format!("factorized prior has {} channels, input {:?}", self.channels, z.shape())));
        }
        let (rows, s) = Self::to_channel_rows(z)?;
        let lower = self.logits(p, rows.add_scalar(-0.5));
        let upper = self.logits(p, rows.add_scalar(0.5));
        let sign = (lower + upper).value().map(|v| if v > 0.0 { -1.0 } else { 1.0 });
        let sign = p.graph().constant(sign);
        let lik = ((upper * sign).sigmoid() - (lower * sign).sigmoid()).abs().lower_bound(LIKELIHOOD_FLOOR);
        Ok(lik.reshape(&[s[1], s[0], s[2], s[3]]).permute(&[1, 0, 2, 3]))
    }

    /// CDF of every channel at the given points: `[C][points.len()]`.
    pub fn cdf(&self, p: &Bound<'_>, points: &[f64]) -> Vec<Vec<f64>> {
        let c = self.channels;
        let n = points.len();
        let x = Tensor::from_fn(&[c, 1, n], |i| points[i % n]);
        let logits = self.logits(p, p.graph().constant(x)).value();
        (0..c).map(|ch| logits.data()[ch * n..(ch + 1) * n].iter().map(|&l| lic_autodiff::sigmoid(l)).collect()).collect()
    }
}
