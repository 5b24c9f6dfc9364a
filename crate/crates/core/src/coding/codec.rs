//! Image encoder and decoder driving the slice/phase schedule.

use lic_autodiff::{Graph, Tensor, Var};

use super::bitstream::{Bitstream, Header, FLAG_BUCKETED, FLAG_REFINED, FLAG_SKIP};
use super::cdf::{residual_table, z_edges, QuantizedCdf, Z_TAIL};
use super::rangecoder::{RangeDecoder, RangeEncoder};
use crate::entropy::{residual_bits, LIKELIHOOD_FLOOR};
use crate::image_io::{crop, pad_reflect};
use crate::latent::{reconstruct, split_slices, Phase};
use crate::model::{broadcast_mask, run_schedule, Model, PhaseCtx, PhaseHandler, PhaseOut, ScheduleOut, SPATIAL_MULTIPLE};
use crate::params::Bound;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodeOptions {
    /// Guided selective compression.
    pub selective: bool,
    /// Bucketed CDF tables instead of exact per-element tables.
    pub bucketed: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions { selective: true, bucketed: false }
    }
}

/// Analysis outputs of a padded image.
#[derive(Clone, Debug)]
pub struct Latents {
    pub y: Tensor,
    pub z: Tensor,
}

#[derive(Clone, Debug)]
pub struct EncodeResult {
    pub bitstream: Bitstream,
    pub bytes: Vec<u8>,
    /// Decoded latent as the encoder sees it.
    pub yhat: Tensor,
    pub zhat: Tensor,
    /// Integer residual maps per slice (zero where skipped).
    pub q: Vec<Tensor>,
    /// Skip maps per slice (empty when selective compression is off).
    pub skip: Vec<Tensor>,
    /// `z` bits and `y` bits under the continuous models.
    pub est_z_bits: f64,
    pub est_y_bits: f64,
    /// Number of range-coded latent residuals.
    pub coded_symbols: usize,
    /// Reconstruction cropped to the original size.
    pub x_hat: Tensor,
}

impl EncodeResult {
    pub fn estimated_bits(&self) -> f64 {
        self.est_z_bits + self.est_y_bits
    }
}

#[derive(Clone, Debug)]
pub struct DecodeResult {
    pub yhat: Tensor,
    pub zhat: Tensor,
    pub q: Vec<Tensor>,
    pub skip: Vec<Tensor>,
    pub x_hat: Tensor,
}

/// Analysis transforms on an image already padded to the model grid.
pub fn analyse(model: &Model, x: &Tensor) -> Result<Latents> {
    Model::check_image(x.shape())?;
    let g = Graph::inference();
    let p = Bound::new(&g, &model.store);
    let y = model.g_a.forward(&p, g.constant(x.clone()))?;
    let z = model.h_a.forward(&p, y)?;
    Ok(Latents { y: (*y.value()).clone(), z: (*z.value()).clone() })
}

fn z_tables(model: &Model, p: &Bound<'_>) -> Vec<QuantizedCdf> {
    model.prior.cdf(p, &z_edges()).into_iter().map(|edges| QuantizedCdf::from_edges(Z_TAIL, &edges)).collect()
}

fn coded_flags(ctx: &PhaseCtx<'_, '_>, shape: &[usize]) -> Vec<bool> {
    let pm = broadcast_mask(ctx.phase_mask, shape);
    pm.data()
        .iter()
        .enumerate()
        .map(|(i, &m)| m != 0.0 && ctx.skip.is_none_or(|s| s.data()[i] != 0.0))
        .collect()
}

fn reconstruct_phase<'g>(g: &'g Graph, q: &Tensor, ctx: &PhaseCtx<'_, 'g>) -> Var<'g> {
    g.constant(reconstruct(q, &ctx.params.mu.value(), &ctx.r.value(), ctx.phase_mask))
}

/// Quantises with hard rounding, optionally range-coding each phase.
pub struct EncodeHandler {
    pub y: Vec<Tensor>,
    pub bucketed: bool,
    pub coders: Option<Vec<Vec<u8>>>,
    pub bits: f64,
    pub symbols: usize,
}

impl EncodeHandler {
    pub fn new(y: &Tensor, num_slices: usize, code: bool, bucketed: bool) -> Result<Self> {
        Ok(EncodeHandler { y: split_slices(y, num_slices)?, bucketed, coders: code.then(Vec::new), bits: 0.0, symbols: 0 })
    }
}

impl<'g> PhaseHandler<'g> for EncodeHandler {
    fn phase(&mut self, ctx: &PhaseCtx<'_, 'g>) -> Result<PhaseOut<'g>> {
        let y = &self.y[ctx.slice];
        let mu = ctx.params.mu.value();
        let sigma = ctx.params.sigma.value();
        let coded = coded_flags(ctx, y.shape());
        let q = Tensor::from_fn(y.shape(), |i| if coded[i] { (y.data()[i] - mu.data()[i]).round() } else { 0.0 });
        self.bits += residual_bits(&q, &sigma, |i| coded[i]);
        if let Some(coders) = self.coders.as_mut() {
            let mut enc = RangeEncoder::new();
            for (i, _) in coded.iter().enumerate().filter(|(_, &c)| c) {
                let v = q.data()[i];
                if v.abs() > i32::MAX as f64 {
                    return Err(Error::Coding {
                        slice: ctx.slice,
                        phase: ctx.phase.name(),
                        index: i,
                        msg: format!("residual {v} outside the codable range"),
                    });
                }
                residual_table(sigma.data()[i], self.bucketed).encode(&mut enc, v as i32);
            }
            coders.push(enc.finish());
        }
        self.symbols += coded.iter().filter(|&&c| c).count();
        let yhat = reconstruct_phase(ctx.params.mu.graph(), &q, ctx);
        Ok(PhaseOut { yhat, q })
    }
}

struct DecodeHandler<'b> {
    payloads: Vec<&'b [u8]>,
    bucketed: bool,
    next: usize,
}

impl<'g> PhaseHandler<'g> for DecodeHandler<'_> {
    fn phase(&mut self, ctx: &PhaseCtx<'_, 'g>) -> Result<PhaseOut<'g>> {
        let payload = self.payloads[self.next];
        self.next += 1;
        let sigma = ctx.params.sigma.value();
        let shape = sigma.shape().to_vec();
        let coded = coded_flags(ctx, &shape);
        let mut dec = RangeDecoder::new(payload);
        let mut q = Tensor::zeros(&shape);
        for (i, _) in coded.iter().enumerate().filter(|(_, &c)| c) {
            q.data_mut()[i] = residual_table(sigma.data()[i], self.bucketed).decode(&mut dec) as f64;
            if dec.overrun() {
                return Err(Error::Coding {
                    slice: ctx.slice,
                    phase: ctx.phase.name(),
                    index: i,
                    msg: "payload exhausted".into(),
                });
            }
        }
        let yhat = reconstruct_phase(ctx.params.mu.graph(), &q, ctx);
        Ok(PhaseOut { yhat, q })
    }
}

fn hyper_from_zhat<'g>(model: &Model, p: &Bound<'g>, zhat: &Tensor) -> Result<Var<'g>> {
    model.h_s.forward(p, p.graph().constant(zhat.clone()))
}

fn z_bits(model: &Model, p: &Bound<'_>, zhat: &Tensor) -> Result<f64> {
    let lik = model.prior.likelihood(p, p.graph().constant(zhat.clone()))?.value();
    Ok(lik.data().iter().map(|&v| -v.max(LIKELIHOOD_FLOOR).log2()).sum())
}

/// Hard-rounded evaluation of latents: reconstruction, residuals and the
/// estimated rate, without producing a bitstream.
pub struct HardEval {
    pub yhat: Tensor,
    pub x_hat: Tensor,
    pub y_bits: f64,
    pub z_bits: f64,
    pub q: Vec<Tensor>,
    pub skip: Vec<Tensor>,
    pub symbols: usize,
}

pub fn hard_eval(model: &Model, lat: &Latents, selective: bool) -> Result<HardEval> {
    let g = Graph::inference();
    let p = Bound::new(&g, &model.store);
    let zhat = lat.z.map(f64::round);
    let hyper = hyper_from_zhat(model, &p, &zhat)?;
    let mut h = EncodeHandler::new(&lat.y, model.cfg.num_slices, false, false)?;
    let out = run_schedule(model, &p, hyper, selective, &mut h)?;
    let x_hat = model.g_s.forward(&p, out.yhat)?.value().map(|v| v.clamp(0.0, 1.0));
    Ok(HardEval {
        yhat: (*out.yhat.value()).clone(),
        x_hat,
        y_bits: h.bits,
        z_bits: z_bits(model, &p, &zhat)?,
        q: out.q,
        skip: out.skip,
        symbols: h.symbols,
    })
}

fn header_for(model: &Model, orig_h: usize, orig_w: usize, opts: EncodeOptions, refined: bool) -> Result<Header> {
    let dim = |v: usize| u16::try_from(v).map_err(|_| Error::Usage(format!("image dimension {v} exceeds 65535")));
    let selective = opts.selective && model.cfg.ablation.gsc;
    Ok(Header {
        orig_h: dim(orig_h)?,
        orig_w: dim(orig_w)?,
        model_id: model.cfg.model_id,
        lambda_index: model.cfg.lambda_index as u8,
        num_slices: model.cfg.num_slices as u8,
        flags: (if selective { FLAG_SKIP } else { 0 })
            | (if refined { FLAG_REFINED } else { 0 })
            | (if opts.bucketed { FLAG_BUCKETED } else { 0 }),
    })
}

/// Entropy-codes given latents of a padded image of original size
/// `orig_h x orig_w`.
pub fn encode_latents(
    model: &Model,
    lat: &Latents,
    orig_h: usize,
    orig_w: usize,
    opts: EncodeOptions,
    refined: bool,
) -> Result<EncodeResult> {
    let header = header_for(model, orig_h, orig_w, opts, refined)?;
    let g = Graph::inference();
    let p = Bound::new(&g, &model.store);
    let zhat = lat.z.map(f64::round);
    let (_, zc, zh, zw) = zhat.dims4()?;
    let tables = z_tables(model, &p);
    let mut enc = RangeEncoder::new();
    for (i, &v) in zhat.data().iter().enumerate() {
        let c = (i / (zh * zw)) % zc;
        tables[c].encode(&mut enc, v as i32);
    }
    let z_payload = enc.finish();
    let est_z_bits = z_bits(model, &p, &zhat)?;
    let hyper = hyper_from_zhat(model, &p, &zhat)?;
    let mut handler = EncodeHandler::new(&lat.y, model.cfg.num_slices, true, opts.bucketed)?;
    let out: ScheduleOut<'_> = run_schedule(model, &p, hyper, header.skip(), &mut handler)?;
    let mut payloads = handler.coders.take().expect("coding enabled").into_iter();
    let slices = (0..model.cfg.num_slices)
        .map(|_| [payloads.next().expect("anchor payload"), payloads.next().expect("non-anchor payload")])
        .collect();
    let bitstream = Bitstream { header, z_payload, slices };
    let bytes = bitstream.to_bytes()?;
    let x_hat = model.g_s.forward(&p, out.yhat)?.value().map(|v| v.clamp(0.0, 1.0));
    Ok(EncodeResult {
        bitstream,
        bytes,
        yhat: (*out.yhat.value()).clone(),
        zhat,
        q: out.q,
        skip: out.skip,
        est_z_bits,
        est_y_bits: handler.bits,
        coded_symbols: handler.symbols,
        x_hat: crop(&x_hat, orig_h, orig_w)?,
    })
}

/// Encodes a `[1, 3, H, W]` image in `[0, 1]` of any size.
pub fn encode_image(model: &Model, x: &Tensor, opts: EncodeOptions) -> Result<EncodeResult> {
    let (b, c, h, w) = x.dims4()?;
    if b != 1 || c != 3 {
        return Err(Error::Shape(format!("encode expects one RGB image, got {:?}", x.shape())));
    }
    let padded = pad_reflect(x, SPATIAL_MULTIPLE)?;
    let lat = analyse(model, &padded)?;
    encode_latents(model, &lat, h, w, opts, false)
}

pub fn decode_bytes(model: &Model, bytes: &[u8]) -> Result<DecodeResult> {
    decode_image(model, &Bitstream::from_bytes(bytes)?)
}

pub fn decode_image(model: &Model, bs: &Bitstream) -> Result<DecodeResult> {
    let hd = bs.header;
    if hd.model_id != model.cfg.model_id || hd.num_slices as usize != model.cfg.num_slices {
        return Err(Error::Format(format!(
            "bitstream for model {} with {} slices, decoder has model {} with {} slices",
            hd.model_id, hd.num_slices, model.cfg.model_id, model.cfg.num_slices
        )));
    }
    if hd.orig_h == 0 || hd.orig_w == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    let (ph, pw) = (
        (hd.orig_h as usize).div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE,
        (hd.orig_w as usize).div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE,
    );
    let g = Graph::inference();
    let p = Bound::new(&g, &model.store);
    let (zc, zh, zw) = (model.cfg.n, ph / 64, pw / 64);
    let tables = z_tables(model, &p);
    let mut dec = RangeDecoder::new(&bs.z_payload);
    let mut zhat = Tensor::zeros(&[1, zc, zh, zw]);
    for i in 0..zhat.numel() {
        zhat.data_mut()[i] = tables[i / (zh * zw)].decode(&mut dec) as f64;
    }
    if dec.overrun() {
        return Err(Error::Parse("hyper-latent payload truncated".into()));
    }
    let hyper = hyper_from_zhat(model, &p, &zhat)?;
    let payloads = bs.slices.iter().flat_map(|[a, n]| [a.as_slice(), n.as_slice()]).collect();
    let mut handler = DecodeHandler { payloads, bucketed: hd.bucketed(), next: 0 };
    let out = run_schedule(model, &p, hyper, hd.skip(), &mut handler)?;
    let x_hat = model.g_s.forward(&p, out.yhat)?.value().map(|v| v.clamp(0.0, 1.0));
    Ok(DecodeResult {
        yhat: (*out.yhat.value()).clone(),
        zhat,
        q: out.q,
        skip: out.skip,
        x_hat: crop(&x_hat, hd.orig_h as usize, hd.orig_w as usize)?,
    })
}

/// Number of elements per phase for a latent of the given spatial size.
pub fn phase_counts(h: usize, w: usize) -> [usize; 2] {
    let m = crate::latent::CheckerboardMask::new(h, w);
    Phase::BOTH.map(|ph| m.count(ph))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CodecConfig;

    #[test]
    fn untrained_round_trip_is_exact() {
        let model = Model::new(CodecConfig::tiny()).unwrap();
        let x = Tensor::from_fn(&[1, 3, 40, 70], |i| ((i * 13 % 101) as f64) / 100.0);
        for opts in [EncodeOptions { selective: true, bucketed: false }, EncodeOptions { selective: false, bucketed: true }] {
            let enc = encode_image(&model, &x, opts).unwrap();
            let dec = decode_bytes(&model, &enc.bytes).unwrap();
            assert_eq!(dec.yhat, enc.yhat);
            assert_eq!(dec.x_hat, enc.x_hat);
            assert_eq!(dec.skip, enc.skip);
            assert_eq!(dec.x_hat.shape(), &[1, 3, 40, 70]);
        }
    }
}
