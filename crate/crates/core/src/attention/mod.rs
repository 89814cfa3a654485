//! Attention core: global-template summarization (linear in sequence
//! length), time-anchored temporal refinement, cross-part spatial mixing,
//! and sparsely activated expert projections.
//!
//! Keys and values are summarized into a small set of templates per group
//! (`G = Softmax(K) V` over the element axis), so attention cost grows
//! linearly with the number of frames. Each template doubles as a moving
//! anchor: three linear maps read out a state, a velocity, and a temporal
//! center, and the per-frame output is a Gaussian-kernel mixture of the
//! anchors' linearly extrapolated signals. Appending or relocating a stage
//! at inference time is a pure shift of the anchor centers.

mod block;

pub use block::{AttentionBlock, BlockInput, BlockTrace};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Shape and toggle configuration of the attention core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Attention groups; identified with the body parts (one group per part).
    pub groups: usize,
    /// Global templates per group.
    pub templates_per_group: usize,
    /// Latent width per group.
    pub latent_per_group: usize,
    /// Gaussian kernel bandwidth of the temporal anchors, in seconds.
    pub sigma: f64,
    /// Expert count of the sparse mixture.
    pub experts: usize,
    /// Active experts per token.
    pub active_experts: usize,
    /// Feature width of encoded text sequences.
    pub text_width: usize,
    /// Hidden width multiplier of the per-part feed-forward blocks.
    pub ffn_mult: usize,
    pub spatial_independence: bool,
    pub temporal_independence: bool,
    pub moe: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            groups: 7,
            templates_per_group: 7,
            latent_per_group: 64,
            sigma: 1.0,
            experts: 4,
            active_experts: 2,
            text_width: 64,
            ffn_mult: 2,
            spatial_independence: true,
            temporal_independence: true,
            moe: true,
        }
    }
}

impl AttentionConfig {
    pub fn latent_dim(&self) -> usize {
        self.groups * self.latent_per_group
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0
            || self.templates_per_group == 0
            || self.latent_per_group == 0
            || self.experts == 0
            || self.active_experts == 0
            || self.text_width == 0
            || self.ffn_mult == 0
        {
            return Err(CoreError::contract(
                "attention counts must all be at least 1",
            ));
        }
        if self.active_experts > self.experts {
            return Err(CoreError::contract(format!(
                "active experts {} exceed expert count {}",
                self.active_experts, self.experts
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(CoreError::contract("sigma must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Template summarization and query read-out (the baseline attention path)
// ---------------------------------------------------------------------------

/// `G = Softmax(K^T) V`: summarize `n` elements into `N_g` templates.
/// `k_cat` is `(n, N_g)`, `v_cat` is `(n, L_g)`; softmax normalizes over the
/// element axis.
pub fn summarize_templates<S: Scalar>(g: &mut Graph<S>, k_cat: Var, v_cat: Var) -> Result<Var> {
    let kt = g.transpose(k_cat)?;
    let weights = g.softmax(kt, 1)?;
    g.matmul(weights, v_cat)
}

/// `Y = Softmax(Q) G`: per-frame read-out over the template axis.
pub fn query_templates<S: Scalar>(g: &mut Graph<S>, q: Var, templates: Var) -> Result<Var> {
    let weights = g.softmax(q, 1)?;
    g.matmul(weights, templates)
}

/// Projection weights of the baseline mixed-attention module: motion and
/// text each get value/key maps, motion alone gets the query map. Weight
/// column blocks are laid out group-major.
#[derive(Debug, Clone, Copy)]
pub struct MeaWeights {
    /// `(L_m, groups * L_g)`
    pub wv_m: Var,
    /// `(L_t, groups * L_g)`
    pub wv_t: Var,
    /// `(L_m, groups * N_g)`
    pub wk_m: Var,
    /// `(L_t, groups * N_g)`
    pub wk_t: Var,
    /// `(L_m, groups * N_g)`
    pub wq_m: Var,
}

/// Per-group outputs of [`mea_forward`].
pub struct MeaOutput {
    /// Refined features, one `(N_m, L_g)` matrix per group.
    pub y: Vec<Var>,
    /// Global templates, one `(N_g, L_g)` matrix per group.
    pub templates: Vec<Var>,
}

/// Baseline mixed attention over global templates: motion and text elements
/// are concatenated, summarized into `N_g` templates per group, and queried
/// per frame. Cost is linear in the number of frames.
pub fn mea_forward<S: Scalar>(
    g: &mut Graph<S>,
    x_m: Var,
    x_t: Var,
    w: &MeaWeights,
    groups: usize,
    n_g: usize,
    l_g: usize,
) -> Result<MeaOutput> {
    if g.shape(x_m)[0] == 0 {
        return Err(CoreError::contract("empty motion sequence"));
    }
    let v_m = g.matmul(x_m, w.wv_m)?;
    let v_t = g.matmul(x_t, w.wv_t)?;
    let k_m = g.matmul(x_m, w.wk_m)?;
    let k_t = g.matmul(x_t, w.wk_t)?;
    let q_m = g.matmul(x_m, w.wq_m)?;

    let mut y = Vec::with_capacity(groups);
    let mut templates = Vec::with_capacity(groups);
    for i in 0..groups {
        let v_mi = g.slice_cols(v_m, i * l_g, (i + 1) * l_g)?;
        let v_ti = g.slice_cols(v_t, i * l_g, (i + 1) * l_g)?;
        let k_mi = g.slice_cols(k_m, i * n_g, (i + 1) * n_g)?;
        let k_ti = g.slice_cols(k_t, i * n_g, (i + 1) * n_g)?;
        let v_cat = g.concat_rows(&[v_mi, v_ti])?;
        let k_cat = g.concat_rows(&[k_mi, k_ti])?;
        let templ = summarize_templates(g, k_cat, v_cat)?;
        let q_i = g.slice_cols(q_m, i * n_g, (i + 1) * n_g)?;
        y.push(query_templates(g, q_i, templ)?);
        templates.push(templ);
    }
    Ok(MeaOutput { y, templates })
}

// ---------------------------------------------------------------------------
// Stage-routed template construction
// ---------------------------------------------------------------------------

/// Stage index each template row is assigned to (round-robin). With a
/// single stage every template belongs to it.
pub fn template_stage_assignment(n_g: usize, n_stages: usize) -> Vec<usize> {
    (0..n_g).map(|j| j % n_stages.max(1)).collect()
}

/// Build one group's templates from pre-projected motion keys/values plus
/// per-stage text features. Template row `j` attends over the motion
/// elements and the text elements of its assigned stage only, so each
/// stage's text conditions exactly its own anchor subset.
pub fn build_group_templates<S: Scalar>(
    g: &mut Graph<S>,
    k_motion: Var,
    v_motion: Var,
    stage_texts: &[Var],
    wk_t: Var,
    wv_t: Var,
    n_g: usize,
) -> Result<Var> {
    let n_stages = stage_texts.len();
    if n_stages == 0 {
        return Err(CoreError::contract("templates need at least one stage"));
    }
    let mut per_stage = Vec::with_capacity(n_stages);
    for &text in stage_texts {
        let k_t = g.matmul(text, wk_t)?;
        let v_t = g.matmul(text, wv_t)?;
        let k_cat = g.concat_rows(&[k_motion, k_t])?;
        let v_cat = g.concat_rows(&[v_motion, v_t])?;
        per_stage.push(summarize_templates(g, k_cat, v_cat)?);
    }
    if n_stages == 1 {
        return Ok(per_stage[0]);
    }
    let assignment = template_stage_assignment(n_g, n_stages);
    let rows: Vec<Var> = assignment
        .iter()
        .enumerate()
        .map(|(j, &s)| g.slice_rows(per_stage[s], j, j + 1))
        .collect::<Result<_>>()?;
    g.concat_rows(&rows)
}

// ---------------------------------------------------------------------------
// Anchor decomposition and temporal refinement
// ---------------------------------------------------------------------------

/// The three linear read-outs that turn a template into an anchor.
/// State and velocity maps are bias-free; the center map carries a bias so
/// a zero template still has a well-defined time.
#[derive(Debug, Clone, Copy)]
pub struct AnchorWeights {
    /// `(L_g, L_g)`
    pub w_state: Var,
    /// `(L_g, L_g)`
    pub w_velocity: Var,
    /// `(L_g, 1)`
    pub w_center: Var,
    /// `(1,)`
    pub b_center: Var,
}

/// Anchor view of one group's templates: per-template state `(N_g, L_g)`,
/// velocity `(N_g, L_g)` in units per second, and center `(N_g,)` in
/// seconds.
#[derive(Debug, Clone, Copy)]
pub struct Anchors {
    pub state: Var,
    pub velocity: Var,
    pub center: Var,
}

/// Project templates `(N_g, L_g)` onto their anchor decomposition.
pub fn decompose_anchors<S: Scalar>(
    g: &mut Graph<S>,
    templates: Var,
    w: &AnchorWeights,
) -> Result<Anchors> {
    let n_g = g.shape(templates)[0];
    let state = g.matmul(templates, w.w_state)?;
    let velocity = g.matmul(templates, w.w_velocity)?;
    let center2d = g.matmul(templates, w.w_center)?;
    let center2d = g.add_row_broadcast(center2d, w.b_center)?;
    let center = g.reshape(center2d, vec![n_g])?;
    Ok(Anchors {
        state,
        velocity,
        center,
    })
}

/// Temporal refinement: every anchor emits the linear signal
/// `state + velocity * (x - center)` and the per-frame output mixes the
/// signals with normalized Gaussian kernel weights
/// `exp(-(x_k - center_j)^2 / sigma^2)`. Both factors depend on time only
/// through `x - center`, so a joint shift of frame times and centers leaves
/// the output unchanged; that identity is what makes anchor-bias shifting a
/// sound composition mechanism.
pub fn temporal_refine<S: Scalar>(
    g: &mut Graph<S>,
    frame_times: Var,
    anchors: &Anchors,
    sigma: f64,
) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(CoreError::contract("sigma must be positive"));
    }
    // (N_m, N_g) signed time distances.
    let d = g.sub_outer(frame_times, anchors.center)?;
    let d2 = g.square(d)?;
    let logits = g.scale(d2, -1.0 / (sigma * sigma))?;
    let kernel = g.softmax(logits, 1)?;
    // Y = K * state + (K .* D) * velocity
    let base = g.matmul(kernel, anchors.state)?;
    let kd = g.mul(kernel, d)?;
    let drift = g.matmul(kd, anchors.velocity)?;
    g.add(base, drift)
}

// ---------------------------------------------------------------------------
// Spatial refinement
// ---------------------------------------------------------------------------

/// Cross-part mixing: `Y^S_i = sum_j omega[i, j] * B_j`, a single weight
/// matrix shared by every frame. Implemented as one matrix product over
/// flattened part features.
pub fn spatial_refine<S: Scalar>(g: &mut Graph<S>, parts: &[Var], omega: Var) -> Result<Vec<Var>> {
    let n_parts = parts.len();
    if g.shape(omega) != [n_parts, n_parts] {
        return Err(CoreError::contract(format!(
            "omega shape {:?} does not match {} parts",
            g.shape(omega),
            n_parts
        )));
    }
    let (n_m, l_g) = {
        let s = g.shape(parts[0]);
        (s[0], s[1])
    };
    let flat: Vec<Var> = parts
        .iter()
        .map(|&p| g.reshape(p, vec![1, n_m * l_g]))
        .collect::<Result<_>>()?;
    let stacked = g.concat_rows(&flat)?;
    let mixed = g.matmul(omega, stacked)?;
    (0..n_parts)
        .map(|i| {
            let row = g.slice_rows(mixed, i, i + 1)?;
            g.reshape(row, vec![n_m, l_g])
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Sparsely activated mixture of experts
// ---------------------------------------------------------------------------

/// Gate and expert weights of one mixture projection.
#[derive(Debug, Clone)]
pub struct MoeVars {
    /// `(L_in, N_e)` gating weights.
    pub gate: Var,
    /// Per expert `(L_in, L_hidden)`.
    pub w3: Vec<Var>,
    /// Per expert `(L_hidden, L_out)`.
    pub w2: Vec<Var>,
}

/// Sparse mixture projection: gate values are the softmax of `x W_gate`
/// masked to the top-k entries (no renormalization), and the output is the
/// gate-weighted sum of `phi(x W3_e) W2_e` over the selected experts.
/// Exactly `k` experts run per token; tokens are routed by row so inactive
/// experts never see them.
pub fn moe_forward<S: Scalar>(g: &mut Graph<S>, x: Var, moe: &MoeVars, k: usize) -> Result<Var> {
    let n_experts = moe.w3.len();
    if k == 0 || k > n_experts {
        return Err(CoreError::contract(format!(
            "active expert count {k} out of range for {n_experts} experts"
        )));
    }
    let n = g.shape(x)[0];
    let l_out = g.shape(moe.w2[0])[1];

    let logits = g.matmul(x, moe.gate)?;
    let probs = g.softmax(logits, 1)?;
    let gate = g.topk_mask(probs, k)?;

    let mut acc = g.constant(Tensor::zeros(&[n, l_out]))?;
    for e in 0..n_experts {
        // Tokens routed to this expert, read from the forward gate values.
        let gate_vals = g.value(gate);
        let rows: Vec<usize> = (0..n)
            .filter(|&r| gate_vals.get2(r, e) != S::zero())
            .collect();
        if rows.is_empty() {
            continue;
        }
        let x_e = g.gather_rows(x, &rows)?;
        let h = g.matmul(x_e, moe.w3[e])?;
        let h = g.gelu(h)?;
        let y_e = g.matmul(h, moe.w2[e])?;
        let gate_col = g.slice_cols(gate, e, e + 1)?;
        let gate_rows = g.gather_rows(gate_col, &rows)?;
        let gate_vec = g.reshape(gate_rows, vec![rows.len()])?;
        let weighted = g.mul_col_broadcast(y_e, gate_vec)?;
        let spread = g.scatter_rows(weighted, &rows, n)?;
        acc = g.add(acc, spread)?;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Plain-tensor anchor carrier (inference-time shifting, tests)
// ---------------------------------------------------------------------------

/// Concrete (non-graph) template tensor with its anchor decomposition, used
/// where anchors are manipulated as data: composition offsets and the
/// translation-identity tests.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTemplates<S> {
    /// Per group `(N_g, L_g)` template features.
    pub features: Vec<Tensor<S>>,
    /// Per group `(N_g, L_g)` anchor states.
    pub state: Vec<Tensor<S>>,
    /// Per group `(N_g, L_g)` anchor velocities (per second).
    pub velocity: Vec<Tensor<S>>,
    /// Per group `(N_g,)` anchor centers in seconds.
    pub center: Vec<Tensor<S>>,
    /// Stage owning each template row (shared across groups).
    pub stage_of_template: Vec<usize>,
}

impl<S: Scalar> GlobalTemplates<S> {
    pub fn num_groups(&self) -> usize {
        self.features.len()
    }

    pub fn templates_per_group(&self) -> usize {
        self.stage_of_template.len()
    }
}

/// Add per-stage time offsets to the anchor centers: template `j` of every
/// group moves by `offsets[stage_of_template[j]]`. States and velocities
/// are untouched. Offsets are additive, so applying two shifts equals
/// applying their sum.
pub fn shift_anchor_bias<S: Scalar>(
    templates: &mut GlobalTemplates<S>,
    offsets: &[f64],
) -> Result<()> {
    if let Some(&bad) = templates
        .stage_of_template
        .iter()
        .find(|&&s| s >= offsets.len())
    {
        return Err(CoreError::contract(format!(
            "anchor references stage {bad} but only {} offsets given",
            offsets.len()
        )));
    }
    if offsets.iter().any(|o| !o.is_finite()) {
        return Err(CoreError::contract("anchor offsets must be finite"));
    }
    for center in &mut templates.center {
        for (j, v) in center.data_mut().iter_mut().enumerate() {
            *v += S::of(offsets[templates.stage_of_template[j]]);
        }
    }
    Ok(())
}
