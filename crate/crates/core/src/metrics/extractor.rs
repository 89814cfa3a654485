//! Contrastive text-motion feature extractor.
//!
//! Motions are summarized by per-column statistics (mean, spread, mean
//! absolute step) and texts by per-part hashed word histograms; two small
//! projection heads map both into a shared unit-normalized feature space,
//! trained with a symmetric contrastive loss on matched pairs. R-Precision,
//! FID and the distance metrics all operate on these features.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::hash::fnv1a64;
use crate::numerics::{adam_update, AdamConfig, Graph, OptimizerState, Scalar, Tensor, Var};
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::rng::Rng;
use crate::schema::{BodyPartPartition, DatasetEntry, FineGrainedScript, MotionSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    /// Width of the shared feature space.
    pub feature_width: usize,
    pub hidden: usize,
    /// Word-hash buckets per body part on the text side.
    pub text_buckets_per_part: usize,
    /// Softmax temperature of the contrastive loss.
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            feature_width: 32,
            hidden: 64,
            text_buckets_per_part: 64,
            temperature: 0.1,
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

/// Canonical identity of a script's description content (word matrix only,
/// durations excluded): two scripts with the same slot texts share a key.
pub fn description_key(script: &FineGrainedScript) -> String {
    script
        .stages
        .iter()
        .map(|s| s.parts.join("|"))
        .collect::<Vec<_>>()
        .join(";")
}

struct Head {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Head {
    fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        rng: &mut Rng,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Self {
        Head {
            w1: params.add(
                format!("{prefix}.w1"),
                Tensor::randn(&[input, hidden], 1.0 / (input as f64).sqrt(), rng),
            ),
            b1: params.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden])),
            w2: params.add(
                format!("{prefix}.w2"),
                Tensor::randn(&[hidden, output], 1.0 / (hidden as f64).sqrt(), rng),
            ),
            b2: params.add(format!("{prefix}.b2"), Tensor::zeros(&[output])),
        }
    }

    fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bound: &BoundParams,
        x: Var,
    ) -> Result<Var> {
        let h = g.matmul(x, bound.var(self.w1))?;
        let h = g.add_row_broadcast(h, bound.var(self.b1))?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, bound.var(self.w2))?;
        let h = g.add_row_broadcast(h, bound.var(self.b2))?;
        g.normalize_rows(h)
    }
}

/// A (possibly trained) extractor: both heads plus the summary schema.
pub struct FeatureExtractor<S> {
    pub cfg: ExtractorConfig,
    pub partition: BodyPartPartition,
    pub params: ParamSet<S>,
    motion_head: Head,
    text_head: Head,
}

/// Result of [`train_extractor`]: the extractor plus training diagnostics.
pub struct TrainedExtractor<S> {
    pub extractor: FeatureExtractor<S>,
    pub loss_history: Vec<f64>,
}

impl<S: Scalar> FeatureExtractor<S> {
    pub fn new(cfg: ExtractorConfig, partition: BodyPartPartition, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut rng = Rng::new(seed);
        let motion_in = 3 * partition.dim();
        let text_in = partition.num_parts() * cfg.text_buckets_per_part;
        let motion_head = Head::new(
            &mut params,
            &mut rng,
            "motion",
            motion_in,
            cfg.hidden,
            cfg.feature_width,
        );
        let text_head = Head::new(
            &mut params,
            &mut rng,
            "text",
            text_in,
            cfg.hidden,
            cfg.feature_width,
        );
        FeatureExtractor {
            cfg,
            partition,
            params,
            motion_head,
            text_head,
        }
    }

    /// Per-column summary statistics: mean, standard deviation, and mean
    /// absolute frame-to-frame step.
    pub fn motion_summary(&self, motion: &MotionSequence<S>) -> Vec<S> {
        let n = motion.num_frames();
        let d = motion.dim();
        let mut out = Vec::with_capacity(3 * d);
        for c in 0..d {
            let mut mean = 0.0;
            for r in 0..n {
                mean += motion.frames.get2(r, c).as_f64();
            }
            mean /= n as f64;
            let mut var = 0.0;
            let mut step = 0.0;
            for r in 0..n {
                let v = motion.frames.get2(r, c).as_f64();
                var += (v - mean) * (v - mean);
                if r + 1 < n {
                    step += (motion.frames.get2(r + 1, c).as_f64() - v).abs();
                }
            }
            var /= n as f64;
            step /= (n.max(2) - 1) as f64;
            out.push(S::of(mean));
            out.push(S::of(var.sqrt()));
            out.push(S::of(step));
        }
        out
    }

    /// Per-part hashed word histogram, averaged over stages.
    pub fn text_summary(&self, script: &FineGrainedScript) -> Vec<S> {
        let parts = self.partition.num_parts();
        let buckets = self.cfg.text_buckets_per_part;
        let mut out = vec![0.0f64; parts * buckets];
        for si in 0..script.num_stages() {
            for pi in 0..parts {
                for word in script.slot_text(si, pi).split_whitespace() {
                    let h = fnv1a64(word.to_lowercase().as_bytes()) as usize % buckets;
                    out[pi * buckets + h] += 1.0;
                }
            }
        }
        let norm = script.num_stages().max(1) as f64;
        out.into_iter().map(|v| S::of(v / norm)).collect()
    }

    fn encode_rows(&self, head: &Head, rows: Vec<Vec<S>>) -> Result<Tensor<S>> {
        let n = rows.len();
        let d = rows[0].len();
        let mut data = Vec::with_capacity(n * d);
        for row in rows {
            data.extend(row);
        }
        let input = Tensor::new(vec![n, d], data)?;
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &self.params)?;
        let x = g.constant(input)?;
        let out = head.forward(&mut g, &bound, x)?;
        Ok(g.value(out).clone())
    }

    /// Unit-normalized motion features, one row per sequence.
    pub fn encode_motions(&self, motions: &[&MotionSequence<S>]) -> Result<Tensor<S>> {
        if motions.is_empty() {
            return Err(CoreError::contract("no motions to encode"));
        }
        let rows = motions.iter().map(|m| self.motion_summary(m)).collect();
        self.encode_rows(&self.motion_head, rows)
    }

    /// Unit-normalized text features, one row per script.
    pub fn encode_scripts(&self, scripts: &[&FineGrainedScript]) -> Result<Tensor<S>> {
        if scripts.is_empty() {
            return Err(CoreError::contract("no scripts to encode"));
        }
        let rows = scripts.iter().map(|s| self.text_summary(s)).collect();
        self.encode_rows(&self.text_head, rows)
    }
}

/// Symmetric contrastive training on matched (text, motion) pairs.
/// Deterministic given the seed; aborts on a non-finite loss.
pub fn train_extractor<S: Scalar>(
    dataset: &[DatasetEntry<S>],
    partition: &BodyPartPartition,
    cfg: ExtractorConfig,
    seed: u64,
) -> Result<TrainedExtractor<S>> {
    if dataset.len() < 64 {
        return Err(CoreError::contract(format!(
            "extractor training needs at least 64 pairs, got {}",
            dataset.len()
        )));
    }
    let mut extractor = FeatureExtractor::new(cfg, partition.clone(), seed);
    let mut rng = Rng::new(seed ^ 0x5eed);
    let mut opt = OptimizerState::new(extractor.params.tensors());
    let adam = AdamConfig::default();
    let mut history = Vec::new();

    // Precompute summaries once.
    let motion_rows: Vec<Vec<S>> = dataset
        .iter()
        .map(|e| extractor.motion_summary(&e.motion))
        .collect();
    let text_rows: Vec<Vec<S>> = dataset
        .iter()
        .map(|e| extractor.text_summary(&e.script))
        .collect();

    let batch = cfg.batch_size.min(dataset.len());
    let steps_per_epoch = dataset.len().div_ceil(batch);
    for _epoch in 0..cfg.epochs {
        let order = rng.sample_indices(dataset.len(), dataset.len());
        for step in 0..steps_per_epoch {
            let idx = &order[step * batch..((step + 1) * batch).min(order.len())];
            if idx.len() < 2 {
                continue;
            }
            let loss = contrastive_step(&mut extractor, idx, &motion_rows, &text_rows, &mut opt, &adam)?;
            history.push(loss);
        }
    }
    Ok(TrainedExtractor {
        extractor,
        loss_history: history,
    })
}

fn contrastive_step<S: Scalar>(
    extractor: &mut FeatureExtractor<S>,
    idx: &[usize],
    motion_rows: &[Vec<S>],
    text_rows: &[Vec<S>],
    opt: &mut OptimizerState<S>,
    adam: &AdamConfig,
) -> Result<f64> {
    let b = idx.len();
    let pack = |rows: &[Vec<S>]| -> Result<Tensor<S>> {
        let d = rows[idx[0]].len();
        let mut data = Vec::with_capacity(b * d);
        for &i in idx {
            data.extend_from_slice(&rows[i]);
        }
        Tensor::new(vec![b, d], data)
    };
    let m_in = pack(motion_rows)?;
    let t_in = pack(text_rows)?;

    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, &extractor.params)?;
    let m_x = g.constant(m_in)?;
    let t_x = g.constant(t_in)?;
    let m_feat = extractor.motion_head.forward(&mut g, &bound, m_x)?;
    let t_feat = extractor.text_head.forward(&mut g, &bound, t_x)?;
    let t_feat_t = g.transpose(t_feat)?;
    let sims = g.matmul(m_feat, t_feat_t)?;
    let logits = g.scale(sims, 1.0 / extractor.cfg.temperature)?;

    // Symmetric cross-entropy with the diagonal as the matched pair.
    let mut eye = Tensor::zeros(&[b, b]);
    for i in 0..b {
        eye.set2(i, i, S::one());
    }
    let eye = g.constant(eye)?;
    let diag = g.mul(logits, eye)?;
    let diag_sum = g.sum_all(diag)?;

    let lse_rows = g.logsumexp_rows(logits)?;
    let rows_sum = g.sum_all(lse_rows)?;
    let logits_t = g.transpose(logits)?;
    let lse_cols = g.logsumexp_rows(logits_t)?;
    let cols_sum = g.sum_all(lse_cols)?;

    let lse_total = g.add(rows_sum, cols_sum)?;
    let two_diag = g.scale(diag_sum, 2.0)?;
    let gap = g.sub(lse_total, two_diag)?;
    let loss_var = g.scale(gap, 0.5 / b as f64)?;

    let loss = g.value(loss_var).scalar_value()?.as_f64();
    if !loss.is_finite() {
        return Err(CoreError::numeric(
            "train_extractor",
            format!("non-finite contrastive loss {loss}"),
        ));
    }
    let grads = g.backward(loss_var)?;
    let grad_list = bound.gradients(&grads);
    adam_update(
        extractor.params.tensors_mut(),
        &grad_list,
        opt,
        extractor.cfg.lr,
        adam,
    )?;
    Ok(loss)
}
