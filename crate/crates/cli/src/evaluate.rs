//! Evaluation orchestration: generate a corpus from a trained model, train
//! the contrastive extractor on the synthetic ground truth, and compute the
//! full metric suite with confidence intervals over repeated subset draws.

use std::collections::HashMap;

use mogen_core::diffusion::{sample, NoiseSchedule, SamplerConfig};
use mogen_core::error::{CoreError, Result};
use mogen_core::metrics::{
    description_key, diversity, fid, mean_ci, mm_dist, multimodality, r_precision,
    train_extractor, FeatureExtractor, MetricReport, MetricValue,
};
use mogen_core::model::Denoiser;
use mogen_core::numerics::Tensor;
use mogen_core::schema::{Dataset, FineGrainedScript, MotionSequence, Split};

use crate::config::RunConfig;

pub struct EvalOutcome {
    pub report: MetricReport,
    /// Trained extractor kept around for follow-up analysis.
    pub extractor: FeatureExtractor<f32>,
}

/// Scripts used for generation: the validation split, cycled as needed.
fn eval_scripts(dataset: &Dataset<f32>) -> Vec<&FineGrainedScript> {
    let val: Vec<&FineGrainedScript> = dataset
        .iter()
        .filter(|e| e.split == Split::Val)
        .map(|e| &e.script)
        .collect();
    if val.is_empty() {
        dataset.iter().map(|e| &e.script).collect()
    } else {
        val
    }
}

pub fn run_eval(
    model: &Denoiser<f32>,
    cfg: &RunConfig,
    dataset: &Dataset<f32>,
    schedule: &NoiseSchedule,
    quiet: bool,
) -> Result<EvalOutcome> {
    let sampler = SamplerConfig {
        steps: cfg.sampler.steps,
        guidance_weight: cfg.sampler.guidance_weight,
    };
    let seed = cfg.eval.seed;

    // Extractor trained on the synthetic ground truth.
    let partition = mogen_core::schema::BodyPartPartition::default_partition(
        cfg.model.feature_dim,
    )?;
    let trained = train_extractor(dataset, &partition, cfg.extractor, seed)?;
    let extractor = trained.extractor;

    // Distinct description pool over the whole dataset.
    let mut pool_scripts: Vec<&FineGrainedScript> = Vec::new();
    let mut key_to_idx: HashMap<String, usize> = HashMap::new();
    for e in dataset.iter() {
        let k = description_key(&e.script);
        key_to_idx.entry(k).or_insert_with(|| {
            pool_scripts.push(&e.script);
            pool_scripts.len() - 1
        });
    }
    let text_pool = extractor.encode_scripts(&pool_scripts)?;

    // Generated corpus for FID / R-Precision / Diversity / MM-Dist.
    let scripts = eval_scripts(dataset);
    let n = cfg.eval.samples;
    let mut generated: Vec<MotionSequence<f32>> = Vec::with_capacity(n);
    let mut gen_keys: Vec<usize> = Vec::with_capacity(n);
    let mut gen_scripts: Vec<&FineGrainedScript> = Vec::with_capacity(n);
    for i in 0..n {
        let script = scripts[i % scripts.len()];
        let motion = sample(model, script, None, schedule, &sampler, seed ^ (i as u64) << 1)?;
        generated.push(motion);
        gen_keys.push(key_to_idx[&description_key(script)]);
        gen_scripts.push(script);
        if !quiet && (i + 1) % 64 == 0 {
            eprintln!("generated {}/{n} evaluation samples", i + 1);
        }
    }
    let gen_refs: Vec<&MotionSequence<f32>> = generated.iter().collect();
    let gen_feats = extractor.encode_motions(&gen_refs)?;
    let gen_text_feats = extractor.encode_scripts(&gen_scripts)?;

    // Real-side features from the dataset motions.
    let real_refs: Vec<&MotionSequence<f32>> = dataset
        .iter()
        .take(n.max(64).min(dataset.len()))
        .map(|e| &e.motion)
        .collect();
    let real_feats = extractor.encode_motions(&real_refs)?;

    // Multimodality groups: repeated generations per description.
    let c_groups = cfg.eval.multimodality_groups.min(scripts.len());
    if c_groups == 0 {
        return Err(CoreError::contract("no scripts available for multimodality"));
    }
    let per_group = 2 * cfg.eval.multimodality_subset;
    let mut groups: Vec<Tensor<f32>> = Vec::with_capacity(c_groups);
    for (c, script) in scripts.iter().take(c_groups).enumerate() {
        let motions: Vec<MotionSequence<f32>> = (0..per_group)
            .map(|r| {
                sample(
                    model,
                    script,
                    None,
                    schedule,
                    &sampler,
                    seed ^ 0xabcd ^ ((c * per_group + r) as u64) << 3,
                )
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&MotionSequence<f32>> = motions.iter().collect();
        groups.push(extractor.encode_motions(&refs)?);
    }

    // Deterministic metrics once, seeded metrics over `repeats` draws.
    let fid_value = fid(&real_feats, &gen_feats)?;
    let mm = mm_dist(&gen_feats, &gen_text_feats)?;
    let repeats = cfg.eval.repeats;
    let mut div = Vec::with_capacity(repeats);
    let mut multi = Vec::with_capacity(repeats);
    let mut r1 = Vec::with_capacity(repeats);
    let mut r2 = Vec::with_capacity(repeats);
    let mut r3 = Vec::with_capacity(repeats);
    for rep in 0..repeats as u64 {
        div.push(diversity(&gen_feats, cfg.eval.diversity_subset, seed + rep)?);
        multi.push(multimodality(
            &groups,
            cfg.eval.multimodality_subset,
            seed + rep,
        )?);
        r1.push(r_precision(&gen_feats, &gen_keys, &text_pool, 1, seed + rep)?);
        r2.push(r_precision(&gen_feats, &gen_keys, &text_pool, 2, seed + rep)?);
        r3.push(r_precision(&gen_feats, &gen_keys, &text_pool, 3, seed + rep)?);
    }

    let exact = |v: f64| MetricValue { mean: v, ci95: 0.0 };
    let report = MetricReport {
        fid: exact(fid_value),
        r_precision_top1: mean_ci(&r1),
        r_precision_top2: mean_ci(&r2),
        r_precision_top3: mean_ci(&r3),
        diversity: mean_ci(&div),
        multimodality: mean_ci(&multi),
        mm_dist: exact(mm),
        generated_samples: n,
        real_samples: real_refs.len(),
        repeats,
        seed,
    };
    if !report.all_finite() {
        return Err(CoreError::numeric("evaluate", "non-finite metric value"));
    }
    Ok(EvalOutcome { report, extractor })
}
