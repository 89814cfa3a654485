//! Denoising diffusion: the linear noise schedule, closed-form forward
//! corruption, the clean-sequence-prediction training objective with
//! condition masking, a strided sampler, and zero-shot temporal composition
//! through anchor shifting.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{Condition, Denoiser};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::BoundParams;
use crate::rng::Rng;
use crate::schema::{DatasetEntry, FineGrainedScript, MotionSequence};

/// Predicted clean values are clipped to this many standard units during
/// sampling.
const X0_CLIP: f64 = 6.0;

/// Beta, alpha and cumulative-alpha tables for `t in [1, t_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear beta schedule. Betas run from `beta_start` at `t = 1` to
/// `beta_end` at `t = t_max`; cumulative products are precomputed.
pub fn build_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(CoreError::contract("schedule needs at least 2 steps"));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(CoreError::contract(format!(
            "invalid beta range [{beta_start}, {beta_end}]"
        )));
    }
    let mut betas = Vec::with_capacity(t_max);
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut cum = 1.0;
    for t in 1..=t_max {
        let beta = beta_start + (t - 1) as f64 / (t_max - 1) as f64 * (beta_end - beta_start);
        cum *= 1.0 - beta;
        betas.push(beta);
        alpha_bars.push(cum);
    }
    debug_assert!(alpha_bars.windows(2).all(|w| w[1] < w[0]));
    Ok(NoiseSchedule {
        t_max,
        betas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn default_training() -> Self {
        build_schedule(1000, 1e-4, 2e-2).expect("default schedule")
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Beta at 1-indexed step `t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative alpha product at 1-indexed step `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(CoreError::contract(format!(
                "timestep {t} out of range [1, {}]",
                self.t_max
            )));
        }
        Ok(())
    }
}

/// Closed-form forward corruption:
/// `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample<S: Scalar>(
    x0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<S>> {
    schedule.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(CoreError::contract(format!(
            "noise shape {:?} does not match data shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let a = S::of(ab.sqrt());
    let b = S::of((1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

fn randn_like<S: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<S> {
    Tensor::randn(shape, 1.0, rng)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Per-item draw of the training randomness: a uniform timestep and the
/// condition-mask decision. Factored out so the masking rate can be
/// measured over the exact code path training uses.
pub fn draw_timestep_and_mask(
    rng: &mut Rng,
    t_max: usize,
    mask_prob: f64,
) -> (usize, bool) {
    let t = 1 + rng.below(t_max);
    let masked = rng.uniform() < mask_prob;
    (t, masked)
}

/// Outcome of one training step.
pub struct TrainOutcome<S> {
    pub loss: f64,
    pub gradients: Vec<Tensor<S>>,
    pub masked_items: usize,
}

/// One optimization step's forward/backward pass: per item, draw a
/// timestep, mask the condition with probability `mask_prob`, corrupt the
/// clean sequence, and regress the model output onto it. The loss is the
/// mean squared error averaged over the batch.
pub fn training_step<S: Scalar>(
    model: &Denoiser<S>,
    schedule: &NoiseSchedule,
    batch: &[&DatasetEntry<S>],
    mask_prob: f64,
    rng: &mut Rng,
) -> Result<TrainOutcome<S>> {
    if batch.is_empty() {
        return Err(CoreError::contract("empty training batch"));
    }
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &model.params)?;
    let mut total: Option<Var> = None;
    let mut masked_items = 0;
    for entry in batch {
        let (t, masked) = draw_timestep_and_mask(rng, schedule.t_max(), mask_prob);
        if masked {
            masked_items += 1;
        }
        let x0 = &entry.motion.frames;
        let eps = randn_like(x0.shape(), rng);
        let x_t = q_sample(x0, t, &eps, schedule)?;
        let x_t_var = g.constant(x_t)?;
        let cond = Condition {
            script: &entry.script,
            masked,
            stage_offsets: None,
        };
        let (pred, _) = model.forward(&mut g, &bound, x_t_var, t, &cond, false)?;
        let x0_var = g.constant(x0.clone())?;
        let item_loss = g.mean_square_error(pred, x0_var)?;
        total = Some(match total {
            Some(acc) => g.add(acc, item_loss)?,
            None => item_loss,
        });
    }
    let loss_var = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    let loss = g.value(loss_var).scalar_value()?.as_f64();
    if !loss.is_finite() {
        return Err(CoreError::numeric(
            "training_step",
            format!("non-finite loss {loss}"),
        ));
    }
    let grads = g.backward(loss_var)?;
    Ok(TrainOutcome {
        loss,
        gradients: bound.gradients(&grads),
        masked_items,
    })
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Inference-time sampler settings: the number of denoising steps (selected
/// as a uniform-stride subsequence ending at t = 1) and an optional
/// guidance weight (1 = plain conditional sampling).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_weight: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            guidance_weight: 1.0,
        }
    }
}

impl SamplerConfig {
    /// Selected timesteps, strictly decreasing, ending at 1:
    /// `t_k = 1 + k * (t_max / steps)` for `k = steps-1 .. 0`.
    pub fn timesteps(&self, t_max: usize) -> Result<Vec<usize>> {
        if self.steps == 0 {
            return Err(CoreError::contract("sampler needs at least one step"));
        }
        let steps = self.steps.min(t_max);
        let stride = t_max / steps;
        let ts: Vec<usize> = (0..steps).rev().map(|k| 1 + k * stride).collect();
        debug_assert!(ts.windows(2).all(|w| w[1] < w[0]));
        debug_assert_eq!(*ts.last().unwrap(), 1);
        Ok(ts)
    }
}

fn predict_x0<S: Scalar>(
    model: &Denoiser<S>,
    x_t: &Tensor<S>,
    t: usize,
    script: &FineGrainedScript,
    offsets: Option<&[f64]>,
    guidance: f64,
) -> Result<Tensor<S>> {
    let cond = Condition {
        script,
        masked: false,
        stage_offsets: offsets,
    };
    let (pred, _) = model.predict(x_t, t, &cond, false)?;
    let pred = if (guidance - 1.0).abs() > 1e-12 {
        let null = Condition {
            script,
            masked: true,
            stage_offsets: offsets,
        };
        let (null_pred, _) = model.predict(x_t, t, &null, false)?;
        // null + g * (cond - null)
        null_pred.zip_map(&pred, |n, c| n + S::of(guidance) * (c - n))?
    } else {
        pred
    };
    let clip = S::of(X0_CLIP);
    Ok(pred.map(|v| v.max(-clip).min(clip)))
}

fn denoise_loop<S: Scalar>(
    model: &Denoiser<S>,
    script: &FineGrainedScript,
    n_frames: usize,
    offsets: Option<&[f64]>,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<MotionSequence<S>> {
    script.ensure_valid()?;
    if n_frames == 0 {
        return Err(CoreError::contract("cannot sample zero frames"));
    }
    let dim = model.cfg.feature_dim;
    let mut rng = Rng::new(seed);
    let mut x: Tensor<S> = randn_like(&[n_frames, dim], &mut rng);
    let ts = sampler.timesteps(schedule.t_max())?;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let x0_hat = predict_x0(model, &x, t, script, offsets, sampler.guidance_weight)
            .map_err(|e| match e {
                CoreError::Numeric { op, detail } => CoreError::Numeric {
                    op,
                    detail: format!("{detail} (sampling step t={t})"),
                },
                other => other,
            })?;
        let ab_t = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let alpha_eff = ab_t / ab_prev;
        let beta_eff = 1.0 - alpha_eff;
        // Posterior over the strided chain, expressed through predicted x0.
        let c0 = ab_prev.sqrt() * beta_eff / (1.0 - ab_t);
        let ct = alpha_eff.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t);
        let mean = x0_hat.zip_map(&x, |x0v, xv| S::of(c0) * x0v + S::of(ct) * xv)?;
        x = if t_prev == 0 {
            mean
        } else {
            let noise: Tensor<S> = randn_like(&[n_frames, dim], &mut rng);
            let sd = S::of(var.sqrt());
            mean.zip_map(&noise, |m, n| m + sd * n)?
        };
        if !x.all_finite() {
            return Err(CoreError::numeric(
                "sample",
                format!("non-finite state after step t={t}"),
            ));
        }
    }
    MotionSequence::new(x, model.cfg.fps)
}

/// Generate a motion for a script: start from unit Gaussian noise and run
/// the strided denoising loop. Deterministic given the seed. `n_frames`
/// defaults to the script's total duration.
pub fn sample<S: Scalar>(
    model: &Denoiser<S>,
    script: &FineGrainedScript,
    n_frames: Option<usize>,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<MotionSequence<S>> {
    let frames = n_frames.unwrap_or_else(|| script.total_frames());
    denoise_loop(model, script, frames, None, schedule, sampler, seed)
}

/// Zero-shot temporal composition: one joint denoising pass over the full
/// frame range where each stage's text conditions its own anchor subset,
/// optionally shifted by per-stage offsets (seconds). With a single stage
/// and zero offsets this is exactly [`sample`].
pub fn compose_sample<S: Scalar>(
    model: &Denoiser<S>,
    script: &FineGrainedScript,
    offsets: &[f64],
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<MotionSequence<S>> {
    if offsets.len() != script.num_stages() {
        return Err(CoreError::contract(format!(
            "{} offsets for {} stages",
            offsets.len(),
            script.num_stages()
        )));
    }
    denoise_loop(
        model,
        script,
        script.total_frames(),
        Some(offsets),
        schedule,
        sampler,
        seed,
    )
}

#[cfg(test)]
mod tests;
