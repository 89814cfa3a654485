//! Trainable text encoder: hash-bucket word embeddings with learned
//! positions, refined by two standard self-attention encoder layers.
//! Produces one feature sequence per (stage, part) slot of a script.

use std::collections::HashMap;

use crate::error::Result;
use crate::hash::fnv1a64;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::rng::Rng;
use crate::schema::FineGrainedScript;

/// Hash buckets for open-vocabulary token ids. Bucket 0 is reserved for the
/// null token used by empty descriptions.
pub const TOKEN_BUCKETS: usize = 4096;
/// Token id of the reserved null token.
pub const NULL_TOKEN: usize = 0;
/// Descriptions are truncated to this many tokens.
pub const MAX_TOKENS: usize = 16;

/// Hash-bucketed token ids of one description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

/// Lowercase, whitespace-split, hash into buckets. Empty text maps to a
/// single null token so every sequence has length >= 1.
pub fn tokenize(text: &str) -> TokenSequence {
    let mut ids: Vec<usize> = text
        .split_whitespace()
        .take(MAX_TOKENS)
        .map(|w| {
            let h = fnv1a64(w.to_lowercase().as_bytes());
            1 + (h % (TOKEN_BUCKETS as u64 - 1)) as usize
        })
        .collect();
    if ids.is_empty() {
        ids.push(NULL_TOKEN);
    }
    TokenSequence { ids }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TextEncoderConfig {
    /// Feature width of the encoded sequences.
    pub width: usize,
    pub layers: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            width: 64,
            layers: 2,
        }
    }
}

struct EncoderLayer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

/// The encoder's parameter handles. Parameters live in the shared
/// [`ParamSet`] under the `textenc.` prefix.
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    embedding: ParamId,
    positional: ParamId,
    null_embedding: ParamId,
    layers: Vec<EncoderLayer>,
}

impl TextEncoder {
    pub fn new<S: Scalar>(
        cfg: TextEncoderConfig,
        params: &mut ParamSet<S>,
        rng: &mut Rng,
    ) -> Self {
        let w = cfg.width;
        let embedding = params.add(
            "textenc.embedding",
            Tensor::randn(&[TOKEN_BUCKETS, w], 0.1, rng),
        );
        let positional = params.add(
            "textenc.positional",
            Tensor::randn(&[MAX_TOKENS, w], 0.1, rng),
        );
        let null_embedding = params.add("textenc.null", Tensor::randn(&[1, w], 0.1, rng));
        let std = 1.0 / (w as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = |suffix: &str| format!("textenc.layer{l}.{suffix}");
                EncoderLayer {
                    wq: params.add(p("wq"), Tensor::randn(&[w, w], std, rng)),
                    wk: params.add(p("wk"), Tensor::randn(&[w, w], std, rng)),
                    wv: params.add(p("wv"), Tensor::randn(&[w, w], std, rng)),
                    wo: params.add(p("wo"), Tensor::randn(&[w, w], std, rng)),
                    ln1_g: params.add(p("ln1.gain"), Tensor::full(&[w], S::one())),
                    ln1_b: params.add(p("ln1.bias"), Tensor::zeros(&[w])),
                    ln2_g: params.add(p("ln2.gain"), Tensor::full(&[w], S::one())),
                    ln2_b: params.add(p("ln2.bias"), Tensor::zeros(&[w])),
                    ffn_w1: params.add(p("ffn.w1"), Tensor::randn(&[w, 2 * w], std, rng)),
                    ffn_b1: params.add(p("ffn.b1"), Tensor::zeros(&[2 * w])),
                    ffn_w2: params.add(
                        p("ffn.w2"),
                        Tensor::randn(&[2 * w, w], 1.0 / (2.0 * w as f64).sqrt(), rng),
                    ),
                    ffn_b2: params.add(p("ffn.b2"), Tensor::zeros(&[w])),
                }
            })
            .collect();
        TextEncoder {
            cfg,
            embedding,
            positional,
            null_embedding,
            layers,
        }
    }

    /// Encode one token sequence to an `(N_t, width)` feature matrix.
    pub fn encode_tokens<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        tokens: &TokenSequence,
    ) -> Result<Var> {
        let n = tokens.ids.len().min(MAX_TOKENS);
        let emb = g.gather_rows(bound.var(self.embedding), &tokens.ids[..n])?;
        let pos = g.slice_rows(bound.var(self.positional), 0, n)?;
        let mut x = g.add(emb, pos)?;
        for layer in &self.layers {
            x = self.layer_forward(g, bound, layer, x)?;
        }
        Ok(x)
    }

    fn layer_forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        layer: &EncoderLayer,
        x: Var,
    ) -> Result<Var> {
        // Pre-norm self-attention with residual.
        let normed = g.layer_norm(x, bound.var(layer.ln1_g), bound.var(layer.ln1_b))?;
        let q = g.matmul(normed, bound.var(layer.wq))?;
        let k = g.matmul(normed, bound.var(layer.wk))?;
        let v = g.matmul(normed, bound.var(layer.wv))?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scaled = g.scale(scores, 1.0 / (self.cfg.width as f64).sqrt())?;
        let attn = g.softmax(scaled, 1)?;
        let mixed = g.matmul(attn, v)?;
        let proj = g.matmul(mixed, bound.var(layer.wo))?;
        let x = g.add(x, proj)?;

        // Pre-norm feed-forward with residual.
        let normed2 = g.layer_norm(x, bound.var(layer.ln2_g), bound.var(layer.ln2_b))?;
        let h = g.matmul(normed2, bound.var(layer.ffn_w1))?;
        let h = g.add_row_broadcast(h, bound.var(layer.ffn_b1))?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, bound.var(layer.ffn_w2))?;
        let h = g.add_row_broadcast(h, bound.var(layer.ffn_b2))?;
        g.add(x, h)
    }

    /// The learned null-condition embedding as a length-1 sequence.
    pub fn encode_null<S: Scalar>(&self, _g: &mut Graph<S>, bound: &BoundParams) -> Result<Var> {
        Ok(bound.var(self.null_embedding))
    }

    /// Encode every (stage, part) slot of a script. A slot without
    /// fine-grained text falls back to the stage's overall sentence, so
    /// single-text training conditions every part on the same sentence.
    /// Identical texts share one encoding subgraph.
    pub fn encode_script<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        script: &FineGrainedScript,
        num_parts: usize,
    ) -> Result<Vec<Vec<Var>>> {
        script.ensure_valid()?;
        let mut cache: HashMap<String, Var> = HashMap::new();
        let mut out = Vec::with_capacity(script.num_stages());
        for si in 0..script.num_stages() {
            let mut row = Vec::with_capacity(num_parts);
            for pi in 0..num_parts {
                let text = script.slot_text(si, pi).to_string();
                let var = match cache.get(&text) {
                    Some(&v) => v,
                    None => {
                        let v = self.encode_tokens(g, bound, &tokenize(&text))?;
                        cache.insert(text, v);
                        v
                    }
                };
                row.push(var);
            }
            out.push(row);
        }
        Ok(out)
    }
}
