//! The denoiser network: per-part input projections, a sinusoidal timestep
//! embedding, a stack of attention blocks, and per-part output projections
//! back to pose-feature space. The network predicts the clean sequence from
//! a noised one, a diffusion step, and a (possibly masked) script condition.

use serde::{Deserialize, Serialize};

use crate::attention::{
    template_stage_assignment, AttentionBlock, AttentionConfig, BlockInput, BlockTrace,
};
use crate::error::{CoreError, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::rng::Rng;
use crate::schema::{FineGrainedScript, NUM_PARTS};
use crate::textenc::{tokenize, TextEncoder, TextEncoderConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of attention blocks.
    pub layers: usize,
    /// Pose feature width D; split evenly over the body parts.
    pub feature_dim: usize,
    /// Width of the sinusoidal timestep embedding.
    pub time_embed_dim: usize,
    pub fps: u32,
    pub attention: AttentionConfig,
    pub text: TextEncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            feature_dim: 448,
            time_embed_dim: 64,
            fps: 30,
            attention: AttentionConfig::default(),
            text: TextEncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.layers == 0 {
            return Err(CoreError::contract("model needs at least one layer"));
        }
        if self.attention.groups != NUM_PARTS {
            return Err(CoreError::contract(format!(
                "attention groups must equal the {NUM_PARTS} body parts"
            )));
        }
        if self.feature_dim == 0 || self.feature_dim % self.attention.groups != 0 {
            return Err(CoreError::contract(format!(
                "feature_dim {} not divisible into {} parts",
                self.feature_dim, self.attention.groups
            )));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(CoreError::contract("time_embed_dim must be even"));
        }
        if self.fps == 0 {
            return Err(CoreError::contract("fps must be positive"));
        }
        if self.attention.text_width != self.text.width {
            return Err(CoreError::contract(
                "attention text_width must match the text encoder width",
            ));
        }
        Ok(())
    }

    pub fn part_width(&self) -> usize {
        self.feature_dim / self.attention.groups
    }
}

/// Conditioning passed to the denoiser. `masked` replaces every text slot
/// with the learned null embedding while keeping the stage structure, so
/// shapes never depend on condition presence. `stage_offsets` shift each
/// stage's anchor centers (zero-shot composition).
pub struct Condition<'a> {
    pub script: &'a FineGrainedScript,
    pub masked: bool,
    pub stage_offsets: Option<&'a [f64]>,
}

impl<'a> Condition<'a> {
    pub fn text(script: &'a FineGrainedScript) -> Self {
        Condition {
            script,
            masked: false,
            stage_offsets: None,
        }
    }

    pub fn null(script: &'a FineGrainedScript) -> Self {
        Condition {
            script,
            masked: true,
            stage_offsets: None,
        }
    }
}

struct IoProjection {
    w_in: Vec<ParamId>,
    b_in: Vec<ParamId>,
    w_out: Vec<ParamId>,
    b_out: Vec<ParamId>,
}

/// The full denoiser, generic over the scalar type.
pub struct Denoiser<S> {
    pub cfg: ModelConfig,
    pub params: ParamSet<S>,
    text_encoder: TextEncoder,
    blocks: Vec<AttentionBlock>,
    io: IoProjection,
    time_w: ParamId,
    time_b: ParamId,
}

impl<S: Scalar> Denoiser<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = Rng::new(seed);

        let text_encoder = TextEncoder::new(cfg.text, &mut params, &mut rng);

        let spatial = cfg.attention.spatial_independence;
        let l_g = cfg.attention.latent_per_group;
        let d_lat = cfg.attention.latent_dim();
        let pw = cfg.part_width();
        let (mut w_in, mut b_in, mut w_out, mut b_out) = (vec![], vec![], vec![], vec![]);
        if spatial {
            for j in 0..cfg.attention.groups {
                let std = 1.0 / (pw as f64).sqrt();
                w_in.push(params.add(
                    format!("input.part{j}.w"),
                    Tensor::randn(&[pw, l_g], std, &mut rng),
                ));
                b_in.push(params.add(format!("input.part{j}.b"), Tensor::zeros(&[l_g])));
            }
            for j in 0..cfg.attention.groups {
                let std = 1.0 / (l_g as f64).sqrt();
                w_out.push(params.add(
                    format!("output.part{j}.w"),
                    Tensor::randn(&[l_g, pw], std, &mut rng),
                ));
                b_out.push(params.add(format!("output.part{j}.b"), Tensor::zeros(&[pw])));
            }
        } else {
            let std = 1.0 / (cfg.feature_dim as f64).sqrt();
            w_in.push(params.add(
                "input.w",
                Tensor::randn(&[cfg.feature_dim, d_lat], std, &mut rng),
            ));
            b_in.push(params.add("input.b", Tensor::zeros(&[d_lat])));
            let std = 1.0 / (d_lat as f64).sqrt();
            w_out.push(params.add(
                "output.w",
                Tensor::randn(&[d_lat, cfg.feature_dim], std, &mut rng),
            ));
            b_out.push(params.add("output.b", Tensor::zeros(&[cfg.feature_dim])));
        }

        let time_w = params.add(
            "time.w",
            Tensor::randn(
                &[cfg.time_embed_dim, d_lat],
                1.0 / (cfg.time_embed_dim as f64).sqrt(),
                &mut rng,
            ),
        );
        let time_b = params.add("time.b", Tensor::zeros(&[d_lat]));

        let blocks = (0..cfg.layers)
            .map(|l| AttentionBlock::new(&cfg.attention, l, &mut params, &mut rng))
            .collect();

        Ok(Denoiser {
            cfg,
            params,
            text_encoder,
            blocks,
            io: IoProjection {
                w_in,
                b_in,
                w_out,
                b_out,
            },
            time_w,
            time_b,
        })
    }

    /// Same architecture with replaced parameter values (checkpoint load,
    /// precision casts). Names and shapes must line up.
    pub fn with_params(cfg: ModelConfig, params: ParamSet<S>) -> Result<Self> {
        let mut fresh = Denoiser::new(cfg, 0)?;
        if fresh.params.names() != params.names() {
            return Err(CoreError::contract(
                "parameter names do not match the model architecture",
            ));
        }
        for (i, t) in params.tensors().iter().enumerate() {
            if t.shape() != fresh.params.tensors()[i].shape() {
                return Err(CoreError::contract(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    params.names()[i],
                    t.shape(),
                    fresh.params.tensors()[i].shape()
                )));
            }
        }
        fresh.params = params;
        Ok(fresh)
    }

    /// Rebuild the model at another precision, copying parameter values.
    pub fn cast<T: Scalar>(&self) -> Result<Denoiser<T>> {
        Denoiser::with_params(self.cfg.clone(), self.params.cast())
    }

    /// Sinusoidal embedding of a diffusion step.
    pub fn timestep_embedding(&self, t: usize) -> Tensor<S> {
        let dim = self.cfg.time_embed_dim;
        let half = dim / 2;
        let mut data = vec![S::zero(); dim];
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            let angle = t as f64 * freq;
            data[2 * i] = S::of(angle.sin());
            data[2 * i + 1] = S::of(angle.cos());
        }
        Tensor::new(vec![1, dim], data).expect("timestep embedding shape")
    }

    /// Encode the condition into per-stage, per-group text features.
    fn condition_features(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        cond: &Condition,
    ) -> Result<Vec<Vec<Var>>> {
        let groups = self.cfg.attention.groups;
        let script = cond.script;
        if cond.masked {
            let null = self.text_encoder.encode_null(g, bound)?;
            return Ok(vec![vec![null; groups]; script.num_stages()]);
        }
        if self.cfg.attention.spatial_independence {
            self.text_encoder.encode_script(g, bound, script, groups)
        } else {
            // Without spatial independence every group reads the overall
            // sentence of each stage.
            script.ensure_valid()?;
            let mut rows = Vec::with_capacity(script.num_stages());
            for s in &script.stages {
                let enc = self
                    .text_encoder
                    .encode_tokens(g, bound, &tokenize(&s.overall))?;
                rows.push(vec![enc; groups]);
            }
            Ok(rows)
        }
    }

    /// Constant anchor-center bias per template: the assigned stage's center
    /// time plus any composition offset.
    fn anchor_center_bias(&self, cond: &Condition) -> Result<Tensor<S>> {
        let n_g = self.cfg.attention.templates_per_group;
        let n_stages = cond.script.num_stages();
        if let Some(offsets) = cond.stage_offsets {
            if offsets.len() != n_stages {
                return Err(CoreError::contract(format!(
                    "{} stage offsets for {} stages",
                    offsets.len(),
                    n_stages
                )));
            }
            if offsets.iter().any(|o| !o.is_finite()) {
                return Err(CoreError::contract("stage offsets must be finite"));
            }
        }
        let assignment = template_stage_assignment(n_g, n_stages);
        let data = assignment
            .iter()
            .map(|&s| {
                let center = cond.script.stage_center_seconds(s);
                let extra = cond.stage_offsets.map(|o| o[s]).unwrap_or(0.0);
                S::of(center + extra)
            })
            .collect();
        Tensor::new(vec![n_g], data)
    }

    /// Predict the clean sequence from a noised one. Returns the prediction
    /// node and, when `trace` is set, every block's per-group templates.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        x_t: Var,
        t: usize,
        cond: &Condition,
        trace: bool,
    ) -> Result<(Var, Vec<BlockTrace<S>>)> {
        let shape = g.shape(x_t).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.feature_dim {
            return Err(CoreError::contract(format!(
                "expected (N_m, {}) motion input, got {:?}",
                self.cfg.feature_dim, shape
            )));
        }
        let n_m = shape[0];
        if n_m == 0 {
            return Err(CoreError::contract("empty motion sequence"));
        }
        let spatial = self.cfg.attention.spatial_independence;
        let l_g = self.cfg.attention.latent_per_group;
        let groups = self.cfg.attention.groups;
        let pw = self.cfg.part_width();

        let stage_texts = self.condition_features(g, bound, cond)?;

        // Frame clock and anchor bias constants.
        let times = Tensor::new(
            vec![n_m],
            (0..n_m)
                .map(|k| S::of(k as f64 / self.cfg.fps as f64))
                .collect(),
        )?;
        let frame_times = g.constant(times)?;
        let center_bias = g.constant(self.anchor_center_bias(cond)?)?;

        // Timestep embedding projected to latent width.
        let emb = g.constant(self.timestep_embedding(t))?;
        let time_lat = g.matmul(emb, bound.var(self.time_w))?;
        let time_lat = g.add_row_broadcast(time_lat, bound.var(self.time_b))?;

        // Input projections plus the timestep signal.
        let mut latents = Vec::new();
        if spatial {
            for j in 0..groups {
                let cols = g.slice_cols(x_t, j * pw, (j + 1) * pw)?;
                let proj = g.matmul(cols, bound.var(self.io.w_in[j]))?;
                let proj = g.add_row_broadcast(proj, bound.var(self.io.b_in[j]))?;
                let seg = g.slice_cols(time_lat, j * l_g, (j + 1) * l_g)?;
                let seg = g.reshape(seg, vec![l_g])?;
                latents.push(g.add_row_broadcast(proj, seg)?);
            }
        } else {
            let proj = g.matmul(x_t, bound.var(self.io.w_in[0]))?;
            let proj = g.add_row_broadcast(proj, bound.var(self.io.b_in[0]))?;
            let d_lat = self.cfg.attention.latent_dim();
            let seg = g.reshape(time_lat, vec![d_lat])?;
            latents.push(g.add_row_broadcast(proj, seg)?);
        }

        // Attention blocks.
        let mut traces = Vec::new();
        for block in &self.blocks {
            let input = BlockInput {
                latents: &latents,
                stage_texts: &stage_texts,
                frame_times,
                anchor_center_bias: center_bias,
            };
            let (next, block_trace) = block.forward(g, bound, &input, trace)?;
            latents = next;
            if let Some(bt) = block_trace {
                traces.push(bt);
            }
        }

        // Output projections back to feature space.
        let out = if spatial {
            let mut parts = Vec::with_capacity(groups);
            for j in 0..groups {
                let proj = g.matmul(latents[j], bound.var(self.io.w_out[j]))?;
                parts.push(g.add_row_broadcast(proj, bound.var(self.io.b_out[j]))?);
            }
            concat_cols(g, &parts)?
        } else {
            let proj = g.matmul(latents[0], bound.var(self.io.w_out[0]))?;
            g.add_row_broadcast(proj, bound.var(self.io.b_out[0]))?
        };
        Ok((out, traces))
    }

    /// Forward pass on plain tensors (no gradient consumers). Returns the
    /// prediction and optional traces.
    pub fn predict(
        &self,
        x_t: &Tensor<S>,
        t: usize,
        cond: &Condition,
        trace: bool,
    ) -> Result<(Tensor<S>, Vec<BlockTrace<S>>)> {
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &self.params)?;
        let x = g.constant(x_t.clone())?;
        let (out, traces) = self.forward(&mut g, &bound, x, t, cond, trace)?;
        Ok((g.value(out).clone(), traces))
    }
}

fn concat_cols<S: Scalar>(g: &mut Graph<S>, parts: &[Var]) -> Result<Var> {
    let transposed: Vec<Var> = parts
        .iter()
        .map(|&p| g.transpose(p))
        .collect::<Result<_>>()?;
    let stacked = g.concat_rows(&transposed)?;
    g.transpose(stacked)
}
