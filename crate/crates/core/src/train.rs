//! Two-stage rate-distortion training and skip-predictor post-training.

use std::path::PathBuf;

use lic_autodiff::{Adam, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::coding::codec::analyse;
use crate::config::CodecConfig;
use crate::data::PatchSource;
use crate::latent::split_slices;
use crate::metrics::distortion_var;
use crate::model::{broadcast_mask, run_schedule, Model, PhaseCtx, PhaseHandler, PhaseOut};
use crate::params::Bound;
use crate::selective::skip_loss;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage1_lr: f64,
    /// `(first step, lr)` breakpoints of stage 2; steps increasing, rates
    /// strictly decreasing.
    pub stage2_lr: Vec<(usize, f64)>,
    pub patch_small: usize,
    pub patch_large: usize,
    /// Stage-2 step at which patches switch to `patch_large`.
    pub patch_switch: usize,
    pub batch: usize,
    pub skip_steps: usize,
    pub skip_lr: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Stage checkpoints (and the last good one on divergence) go here.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stage 2 keeps `g_a` and `g_s` at their stage-1 values and trains the
    /// entropy model only.
    pub freeze_transforms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale schedule.
    pub fn desk() -> Self {
        TrainConfig {
            stage1_steps: 5000,
            stage2_steps: 20000,
            stage1_lr: 1e-4,
            stage2_lr: vec![(0, 1e-4), (16000, 3e-5), (19000, 1e-5)],
            patch_small: 64,
            patch_large: 128,
            patch_switch: 15000,
            batch: 8,
            skip_steps: 2000,
            skip_lr: 1e-3,
            seed: 0,
            log_every: 100,
            checkpoint_dir: None,
            freeze_transforms: false,
        }
    }

    /// A few hundred steps on small patches; enough for smoke tests.
    pub fn smoke() -> Self {
        TrainConfig {
            stage1_steps: 100,
            stage2_steps: 200,
            stage1_lr: 2e-3,
            stage2_lr: vec![(0, 2e-3), (150, 5e-4)],
            patch_small: 64,
            patch_large: 64,
            patch_switch: 200,
            batch: 2,
            skip_steps: 100,
            skip_lr: 5e-3,
            seed: 0,
            log_every: 20,
            checkpoint_dir: None,
            freeze_transforms: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage2_lr.is_empty() || self.stage2_lr[0].0 != 0 {
            return Err(Error::Config("stage-2 lr schedule must start at step 0".into()));
        }
        for w in self.stage2_lr.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 >= w[0].1 {
                return Err(Error::Config(format!("stage-2 lr schedule must be strictly decreasing: {:?}", self.stage2_lr)));
            }
        }
        if self.stage2_lr.iter().any(|&(_, lr)| !(lr > 0.0 && lr.is_finite())) || !(self.stage1_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        for p in [self.patch_small, self.patch_large] {
            if p == 0 || p % crate::model::SPATIAL_MULTIPLE != 0 {
                return Err(Error::Config(format!("patch size {p} must be a positive multiple of {}", crate::model::SPATIAL_MULTIPLE)));
            }
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }

    pub fn stage2_lr_at(&self, step: usize) -> f64 {
        self.stage2_lr.iter().rev().find(|(s, _)| *s <= step).map_or(self.stage2_lr[0].1, |&(_, lr)| lr)
    }

    pub fn stage2_patch_at(&self, step: usize) -> usize {
        if step >= self.patch_switch {
            self.patch_large
        } else {
            self.patch_small
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub stage: u8,
    pub step: usize,
    pub loss: f64,
    pub bpp: f64,
    /// Distortion term (255-scale MSE or `1 - MS-SSIM`); skip loss in stage 3.
    pub distortion: f64,
    pub lr: f64,
}

/// RD loss of one batch on a fresh graph. Returns the loss variable and its
/// parts.
pub fn batch_loss<'g>(model: &Model, p: &Bound<'g>, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Var<'g>, f64, f64)> {
    let g = p.graph();
    let (b, _, h, w) = x.dims4()?;
    let xv = g.constant(x.clone());
    let out = model.forward_train(p, xv, rng)?;
    let bpp = (out.y_bits + out.z_bits).scale(1.0 / (b * h * w) as f64);
    let d = distortion_var(xv, out.x_hat, model.cfg.metric)?;
    let loss = bpp + d.scale(model.cfg.lambda());
    Ok((loss, bpp.value().item(), d.value().item()))
}

fn all_finite(grads: &[Option<Tensor>]) -> bool {
    grads.iter().flatten().all(|t| t.all_finite())
}

fn save_if(dir: &Option<PathBuf>, file: &str, model: &Model, stage: u8, step: usize) -> Result<()> {
    if let Some(dir) = dir {
        save_checkpoint(&dir.join(file), model, stage, step)?;
    }
    Ok(())
}

/// Steps of one stage. On a non-finite loss or gradient, restores the
/// parameters of the last finite step, checkpoints them and fails.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &mut Model,
    stage: u8,
    steps: usize,
    tc: &TrainConfig,
    data: &mut dyn PatchSource,
    lr_at: &dyn Fn(usize) -> f64,
    patch_at: &dyn Fn(usize) -> usize,
    trainable: fn(&str) -> bool,
) -> Result<Vec<StepStats>> {
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ (stage as u64).wrapping_mul(0x9e37_79b9));
    let mut adam = Adam::new(lr_at(0));
    let mut log = Vec::with_capacity(steps);
    let mut last_good: Option<Vec<Tensor>> = None;
    for step in 0..steps {
        adam.lr = lr_at(step);
        let x = data.next_batch(tc.batch, patch_at(step))?;
        let g = Graph::new();
        let p = Bound::with_filter(&g, &model.store, trainable);
        let (loss, bpp, d) = match stage {
            3 => skip_batch_loss(model, &p, &x)?,
            _ => batch_loss(model, &p, &x, &mut rng)?,
        };
        let lv = loss.value().item();
        let mut grads = g.backward(loss);
        let grads = p.collect_grads(&mut grads);
        drop(p);
        if !lv.is_finite() || !all_finite(&grads) {
            if let Some(good) = last_good.take() {
                model.store.values_mut().clone_from_slice(&good);
            }
            save_if(&tc.checkpoint_dir, "last_good.ckpt", model, stage, step.saturating_sub(1))?;
            return Err(Error::Numeric(format!(
                "non-finite loss or gradient in stage {stage} at step {step}; restored the last finite parameters"
            )));
        }
        last_good = Some(model.store.values().to_vec());
        adam.step(model.store.values_mut(), &grads);
        if tc.log_every > 0 && step % tc.log_every == 0 {
            log::info!("stage {stage} step {step}: loss {lv:.4} bpp {bpp:.4} d {d:.4}");
        }
        log.push(StepStats { stage, step, loss: lv, bpp, distortion: d, lr: adam.lr });
    }
    Ok(log)
}

fn codec_only(name: &str) -> bool {
    Model::is_codec_param(name)
}

fn entropy_only(name: &str) -> bool {
    Model::is_codec_param(name) && !name.starts_with("g_a.") && !name.starts_with("g_s.")
}

fn skip_only(name: &str) -> bool {
    !Model::is_codec_param(name)
}

/// Stage 1: transforms and hyperprior only.
pub fn train_stage1(cfg: &CodecConfig, tc: &TrainConfig, data: &mut dyn PatchSource) -> Result<(Model, Vec<StepStats>)> {
    tc.validate()?;
    let mut model = Model::new(CodecConfig { hyperprior_only: true, ..cfg.clone() })?;
    let log = run_stage(&mut model, 1, tc.stage1_steps, tc, data, &|_| tc.stage1_lr, &|_| tc.patch_small, codec_only)?;
    save_if(&tc.checkpoint_dir, "stage1.ckpt", &model, 1, tc.stage1_steps)?;
    Ok((model, log))
}

/// Stage 2: the full model, initialised from every matching stage-1 tensor.
pub fn train_stage2(stage1: &Model, cfg: &CodecConfig, tc: &TrainConfig, data: &mut dyn PatchSource) -> Result<(Model, Vec<StepStats>)> {
    tc.validate()?;
    let mut model = init_stage2(stage1, cfg)?;
    let log = run_stage(
        &mut model,
        2,
        tc.stage2_steps,
        tc,
        data,
        &|s| tc.stage2_lr_at(s),
        &|s| tc.stage2_patch_at(s),
        if tc.freeze_transforms { entropy_only } else { codec_only },
    )?;
    save_if(&tc.checkpoint_dir, "stage2.ckpt", &model, 2, tc.stage2_steps)?;
    Ok((model, log))
}

/// Full model carrying the stage-1 weights.
pub fn init_stage2(stage1: &Model, cfg: &CodecConfig) -> Result<Model> {
    let mut model = Model::new(cfg.clone())?;
    let copied = model.store.load_matching(&stage1.store);
    log::info!("stage 2 initialised {copied} tensors from stage 1");
    Ok(model)
}

/// Trains the skip predictors against the frozen codec.
pub fn train_skip(model: &mut Model, tc: &TrainConfig, data: &mut dyn PatchSource) -> Result<Vec<StepStats>> {
    if !model.cfg.ablation.gsc {
        return Ok(Vec::new());
    }
    let lr = tc.skip_lr;
    let log = run_stage(model, 3, tc.skip_steps, tc, data, &|_| lr, &|_| tc.patch_small, skip_only)?;
    save_if(&tc.checkpoint_dir, "skip.ckpt", model, 3, tc.skip_steps)?;
    Ok(log)
}

/// Stage 1, stage 2 and skip post-training.
pub fn train_all(cfg: &CodecConfig, tc: &TrainConfig, data: &mut dyn PatchSource) -> Result<(Model, Vec<StepStats>)> {
    let (s1, mut log) = train_stage1(cfg, tc, data)?;
    let (mut model, l2) = train_stage2(&s1, cfg, tc, data)?;
    log.extend(l2);
    log.extend(train_skip(&mut model, tc, data)?);
    Ok((model, log))
}

struct SkipTrainHandler<'g> {
    y: Vec<Tensor>,
    loss: Option<Var<'g>>,
    norm: f64,
}

impl<'g> PhaseHandler<'g> for SkipTrainHandler<'g> {
    fn phase(&mut self, ctx: &PhaseCtx<'_, 'g>) -> Result<PhaseOut<'g>> {
        let y = &self.y[ctx.slice];
        let g = ctx.r.graph();
        let mu = ctx.params.mu.value();
        let pm = broadcast_mask(ctx.phase_mask, y.shape());
        let q = y.zip_map(&mu, |a, m| (a - m).round()).zip_map(&pm, |a, m| a * m);
        let eps = ctx.eps.ok_or_else(|| Error::Usage("skip training needs selective compression".into()))?;
        let l = skip_loss(eps, &q, ctx.phase_mask, self.norm)?;
        self.loss = Some(match self.loss {
            Some(a) => a + l,
            None => l,
        });
        let coded = match ctx.skip {
            Some(s) => q.zip_map(s, |a, s| a * s),
            None => q,
        };
        let yhat = coded.zip_map(&mu, |a, m| a + m).zip_map(&ctx.r.value(), |a, r| a + r).zip_map(&pm, |a, m| a * m);
        Ok(PhaseOut { yhat: g.constant(yhat), q: coded })
    }
}

/// Mean weighted cross-entropy of the skip predictors on one batch.
fn skip_batch_loss<'g>(model: &Model, p: &Bound<'g>, x: &Tensor) -> Result<(Var<'g>, f64, f64)> {
    let lat = analyse(model, x)?;
    let g = p.graph();
    let zhat = g.constant(lat.z.map(f64::round));
    let hyper = model.h_s.forward(p, zhat)?;
    let norm = lat.y.numel() as f64;
    let mut h = SkipTrainHandler { y: split_slices(&lat.y, model.cfg.num_slices)?, loss: None, norm };
    run_schedule(model, p, hyper, true, &mut h)?;
    let loss = h.loss.ok_or_else(|| Error::Usage("no phases ran".into()))?;
    let v = loss.value().item();
    Ok((loss, 0.0, v))
}

/// Mean RD loss over fixed batches, on an inference graph.
pub fn validation_loss(model: &Model, batches: &[Tensor], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for x in batches {
        let g = Graph::inference();
        let p = Bound::new(&g, &model.store);
        total += batch_loss(model, &p, x, &mut rng)?.0.value().item();
    }
    Ok(total / batches.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_lookup_and_validation() {
        let tc = TrainConfig::desk();
        tc.validate().unwrap();
        assert_eq!(tc.stage2_lr_at(0), 1e-4);
        assert_eq!(tc.stage2_lr_at(16500), 3e-5);
        assert_eq!(tc.stage2_lr_at(25000), 1e-5);
        assert_eq!(tc.stage2_patch_at(14999), 64);
        assert_eq!(tc.stage2_patch_at(15000), 128);
        let bad = TrainConfig { stage2_lr: vec![(0, 1e-4), (10, 1e-4)], ..tc };
        assert!(bad.validate().is_err());
    }
}
