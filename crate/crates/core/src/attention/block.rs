//! One transformer block: pre-norm attention over stage-routed global
//! templates plus cross-part mixing, followed by per-part feed-forward
//! layers. With spatial independence off the block degrades to the
//! baseline mixed-attention layout (one undivided latent, shared FFN);
//! with temporal independence off the anchor read-out is replaced by the
//! baseline query softmax.

use crate::error::Result;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::rng::Rng;

use super::{
    build_group_templates, decompose_anchors, moe_forward, query_templates, spatial_refine,
    temporal_refine, Anchors, AnchorWeights, AttentionConfig, MoeVars,
};

/// A motion-side projection: plain linear or a sparse expert mixture,
/// depending on the MoE toggle. Text-side projections are always plain.
enum Proj {
    Dense(ParamId),
    Moe {
        gate: ParamId,
        w3: Vec<ParamId>,
        w2: Vec<ParamId>,
    },
}

impl Proj {
    fn new<S: Scalar>(
        cfg: &AttentionConfig,
        params: &mut ParamSet<S>,
        rng: &mut Rng,
        name: &str,
        l_in: usize,
        l_out: usize,
    ) -> Self {
        let std = 1.0 / (l_in as f64).sqrt();
        if cfg.moe {
            let gate = params.add(
                format!("{name}.gate"),
                Tensor::randn(&[l_in, cfg.experts], std, rng),
            );
            let mut w3 = Vec::with_capacity(cfg.experts);
            let mut w2 = Vec::with_capacity(cfg.experts);
            for e in 0..cfg.experts {
                w3.push(params.add(
                    format!("{name}.expert{e}.w3"),
                    Tensor::randn(&[l_in, l_in], std, rng),
                ));
                w2.push(params.add(
                    format!("{name}.expert{e}.w2"),
                    Tensor::randn(&[l_in, l_out], std, rng),
                ));
            }
            Proj::Moe { gate, w3, w2 }
        } else {
            Proj::Dense(params.add(name.to_string(), Tensor::randn(&[l_in, l_out], std, rng)))
        }
    }

    fn apply<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        x: Var,
        active: usize,
    ) -> Result<Var> {
        match self {
            Proj::Dense(w) => g.matmul(x, bound.var(*w)),
            Proj::Moe { gate, w3, w2 } => {
                let vars = MoeVars {
                    gate: bound.var(*gate),
                    w3: w3.iter().map(|&p| bound.var(p)).collect(),
                    w2: w2.iter().map(|&p| bound.var(p)).collect(),
                };
                moe_forward(g, x, &vars, active)
            }
        }
    }
}

struct AnchorParams {
    w_state: ParamId,
    w_velocity: ParamId,
    w_center: ParamId,
    b_center: ParamId,
}

struct GroupParams {
    k: Proj,
    v: Proj,
    /// Query projection, used only when temporal independence is off.
    q: Option<Proj>,
    /// Spatial-branch projection, used only when spatial independence is on.
    b: Option<Proj>,
    wk_t: ParamId,
    wv_t: ParamId,
    anchors: Option<AnchorParams>,
}

struct ChannelParams {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

/// Parameter handles of one block.
pub struct AttentionBlock {
    cfg: AttentionConfig,
    groups: Vec<GroupParams>,
    channels: Vec<ChannelParams>,
    omega: Option<ParamId>,
}

/// Per-forward inputs of a block.
pub struct BlockInput<'a> {
    /// Latent channels: one `(N_m, L_g)` matrix per part with spatial
    /// independence on, a single `(N_m, groups * L_g)` matrix otherwise.
    pub latents: &'a [Var],
    /// Text features per stage and group.
    pub stage_texts: &'a [Vec<Var>],
    /// Frame times in seconds, `(N_m,)`.
    pub frame_times: Var,
    /// Constant per-template anchor time bias (stage centers plus any
    /// composition offsets), `(N_g,)`.
    pub anchor_center_bias: Var,
}

/// Captured intermediate values for isolation checks and inspection.
pub struct BlockTrace<S> {
    /// Per-group template features `(N_g, L_g)`.
    pub templates: Vec<Tensor<S>>,
}

impl AttentionBlock {
    pub fn new<S: Scalar>(
        cfg: &AttentionConfig,
        layer: usize,
        params: &mut ParamSet<S>,
        rng: &mut Rng,
    ) -> Self {
        let l_g = cfg.latent_per_group;
        let n_g = cfg.templates_per_group;
        let l_in = if cfg.spatial_independence {
            l_g
        } else {
            cfg.latent_dim()
        };
        let groups = (0..cfg.groups)
            .map(|i| {
                let base = format!("layer{layer}.group{i}");
                let std_t = 1.0 / (cfg.text_width as f64).sqrt();
                GroupParams {
                    k: Proj::new(cfg, params, rng, &format!("{base}.k"), l_in, n_g),
                    v: Proj::new(cfg, params, rng, &format!("{base}.v"), l_in, l_g),
                    q: (!cfg.temporal_independence)
                        .then(|| Proj::new(cfg, params, rng, &format!("{base}.q"), l_in, n_g)),
                    b: cfg
                        .spatial_independence
                        .then(|| Proj::new(cfg, params, rng, &format!("{base}.b"), l_in, l_g)),
                    wk_t: params.add(
                        format!("{base}.wk_t"),
                        Tensor::randn(&[cfg.text_width, n_g], std_t, rng),
                    ),
                    wv_t: params.add(
                        format!("{base}.wv_t"),
                        Tensor::randn(&[cfg.text_width, l_g], std_t, rng),
                    ),
                    anchors: cfg.temporal_independence.then(|| {
                        let std_g = 1.0 / (l_g as f64).sqrt();
                        AnchorParams {
                            w_state: params.add(
                                format!("{base}.anchor.state"),
                                Tensor::randn(&[l_g, l_g], std_g, rng),
                            ),
                            w_velocity: params.add(
                                format!("{base}.anchor.velocity"),
                                // Small initial velocities keep early outputs
                                // close to the static template read-out.
                                Tensor::randn(&[l_g, l_g], 0.1 * std_g, rng),
                            ),
                            w_center: params.add(
                                format!("{base}.anchor.center"),
                                Tensor::randn(&[l_g, 1], 0.1 * std_g, rng),
                            ),
                            b_center: params
                                .add(format!("{base}.anchor.center_bias"), Tensor::zeros(&[1])),
                        }
                    }),
                }
            })
            .collect();

        let n_channels = if cfg.spatial_independence {
            cfg.groups
        } else {
            1
        };
        let width = if cfg.spatial_independence {
            l_g
        } else {
            cfg.latent_dim()
        };
        let hidden = cfg.ffn_mult * width;
        let channels = (0..n_channels)
            .map(|c| {
                let base = format!("layer{layer}.channel{c}");
                let std = 1.0 / (width as f64).sqrt();
                ChannelParams {
                    ln1_gain: params.add(format!("{base}.ln1.gain"), Tensor::full(&[width], S::one())),
                    ln1_bias: params.add(format!("{base}.ln1.bias"), Tensor::zeros(&[width])),
                    ln2_gain: params.add(format!("{base}.ln2.gain"), Tensor::full(&[width], S::one())),
                    ln2_bias: params.add(format!("{base}.ln2.bias"), Tensor::zeros(&[width])),
                    ffn_w1: params.add(
                        format!("{base}.ffn.w1"),
                        Tensor::randn(&[width, hidden], std, rng),
                    ),
                    ffn_b1: params.add(format!("{base}.ffn.b1"), Tensor::zeros(&[hidden])),
                    ffn_w2: params.add(
                        format!("{base}.ffn.w2"),
                        Tensor::randn(&[hidden, width], 1.0 / (hidden as f64).sqrt(), rng),
                    ),
                    ffn_b2: params.add(format!("{base}.ffn.b2"), Tensor::zeros(&[width])),
                }
            })
            .collect();

        let omega = cfg.spatial_independence.then(|| {
            // Near-identity mixing: parts start mostly independent.
            let mut eye = Tensor::zeros(&[cfg.groups, cfg.groups]);
            for i in 0..cfg.groups {
                eye.set2(i, i, S::one());
            }
            let noise = Tensor::randn(&[cfg.groups, cfg.groups], 0.02, rng);
            params.add(
                format!("layer{layer}.omega"),
                eye.add(&noise).expect("omega init"),
            )
        });

        AttentionBlock {
            cfg: cfg.clone(),
            groups,
            channels,
            omega,
        }
    }

    /// Run the block. Returns the refreshed latent channels and, when
    /// `trace` is set, the per-group template values.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        input: &BlockInput,
        trace: bool,
    ) -> Result<(Vec<Var>, Option<BlockTrace<S>>)> {
        let cfg = &self.cfg;
        let active = cfg.active_experts;
        let n_g = cfg.templates_per_group;

        // Pre-norm per channel.
        let normed: Vec<Var> = self
            .channels
            .iter()
            .zip(input.latents.iter())
            .map(|(ch, &x)| g.layer_norm(x, bound.var(ch.ln1_gain), bound.var(ch.ln1_bias)))
            .collect::<Result<_>>()?;

        let mut y_temporal = Vec::with_capacity(cfg.groups);
        let mut b_parts = Vec::with_capacity(cfg.groups);
        let mut templates_out = trace.then(Vec::new);

        for (i, gp) in self.groups.iter().enumerate() {
            // Group i reads its own part channel, or the shared latent.
            let src = if cfg.spatial_independence {
                normed[i]
            } else {
                normed[0]
            };
            let k_m = gp.k.apply(g, bound, src, active)?;
            let v_m = gp.v.apply(g, bound, src, active)?;
            let stage_texts: Vec<Var> = input.stage_texts.iter().map(|row| row[i]).collect();
            let templates = build_group_templates(
                g,
                k_m,
                v_m,
                &stage_texts,
                bound.var(gp.wk_t),
                bound.var(gp.wv_t),
                n_g,
            )?;
            if let Some(ts) = templates_out.as_mut() {
                ts.push(g.value(templates).clone());
            }

            let y_t = if let Some(anchor_params) = &gp.anchors {
                let w = AnchorWeights {
                    w_state: bound.var(anchor_params.w_state),
                    w_velocity: bound.var(anchor_params.w_velocity),
                    w_center: bound.var(anchor_params.w_center),
                    b_center: bound.var(anchor_params.b_center),
                };
                let anchors = decompose_anchors(g, templates, &w)?;
                let center = g.add(anchors.center, input.anchor_center_bias)?;
                temporal_refine(
                    g,
                    input.frame_times,
                    &Anchors {
                        state: anchors.state,
                        velocity: anchors.velocity,
                        center,
                    },
                    cfg.sigma,
                )?
            } else {
                let q = gp
                    .q
                    .as_ref()
                    .expect("query projection present when temporal independence is off")
                    .apply(g, bound, src, active)?;
                query_templates(g, q, templates)?
            };
            y_temporal.push(y_t);

            if let Some(bp) = &gp.b {
                b_parts.push(bp.apply(g, bound, src, active)?);
            }
        }

        // Combine refinements per group.
        let y: Vec<Var> = if let Some(omega) = self.omega {
            let y_spatial = spatial_refine(g, &b_parts, bound.var(omega))?;
            y_temporal
                .iter()
                .zip(y_spatial.iter())
                .map(|(&t, &s)| g.add(t, s))
                .collect::<Result<_>>()?
        } else {
            y_temporal
        };

        // Fold group outputs back onto channels.
        let attn_out: Vec<Var> = if cfg.spatial_independence {
            y
        } else {
            vec![concat_cols(g, &y)?]
        };

        // Residual + feed-forward per channel.
        let mut out = Vec::with_capacity(self.channels.len());
        for (ci, ch) in self.channels.iter().enumerate() {
            let x = g.add(input.latents[ci], attn_out[ci])?;
            let normed = g.layer_norm(x, bound.var(ch.ln2_gain), bound.var(ch.ln2_bias))?;
            let h = g.matmul(normed, bound.var(ch.ffn_w1))?;
            let h = g.add_row_broadcast(h, bound.var(ch.ffn_b1))?;
            let h = g.gelu(h)?;
            let h = g.matmul(h, bound.var(ch.ffn_w2))?;
            let h = g.add_row_broadcast(h, bound.var(ch.ffn_b2))?;
            out.push(g.add(x, h)?);
        }
        Ok((out, templates_out.map(|templates| BlockTrace { templates })))
    }
}

/// Column-wise concatenation via transposes.
fn concat_cols<S: Scalar>(g: &mut Graph<S>, parts: &[Var]) -> Result<Var> {
    let transposed: Vec<Var> = parts
        .iter()
        .map(|&p| g.transpose(p))
        .collect::<Result<_>>()?;
    let stacked = g.concat_rows(&transposed)?;
    g.transpose(stacked)
}
