use super::*;
use crate::attention::AttentionConfig;
use crate::model::ModelConfig;
use crate::schema::{
    build_dataset, BodyPartPartition, DatasetConfig, Stage, SyntheticVocabulary, NUM_PARTS,
};
use crate::textenc::TextEncoderConfig;

fn tiny_model() -> Denoiser<f64> {
    let cfg = ModelConfig {
        layers: 1,
        feature_dim: 14,
        time_embed_dim: 8,
        fps: 30,
        attention: AttentionConfig {
            groups: 7,
            templates_per_group: 2,
            latent_per_group: 4,
            sigma: 0.5,
            experts: 2,
            active_experts: 1,
            text_width: 6,
            ffn_mult: 2,
            spatial_independence: true,
            temporal_independence: true,
            moe: true,
        },
        text: TextEncoderConfig {
            width: 6,
            layers: 1,
        },
    };
    Denoiser::new(cfg, 3).unwrap()
}

#[test]
fn schedule_endpoints_match_configuration() {
    let s = build_schedule(1000, 1e-4, 2e-2).unwrap();
    assert_eq!(s.beta(1), 1e-4);
    assert_eq!(s.beta(1000), 2e-2);
    assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-12);
    // Near-total corruption at the last step.
    assert!(s.alpha_bar(1000) < 0.01, "alpha_bar(T) = {}", s.alpha_bar(1000));
    // Strictly decreasing cumulative product.
    for t in 2..=1000 {
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
}

#[test]
fn schedule_rejects_bad_parameters() {
    assert!(build_schedule(1, 1e-4, 2e-2).is_err());
    assert!(build_schedule(100, 0.0, 2e-2).is_err());
    assert!(build_schedule(100, 0.5, 0.2).is_err());
    assert!(build_schedule(100, 1e-4, 1.0).is_err());
}

#[test]
fn q_sample_zero_noise_scales_data() {
    let s = build_schedule(100, 1e-4, 2e-2).unwrap();
    let x0 = Tensor::<f64>::from_rows(&[vec![2.0, -4.0]]).unwrap();
    let eps = Tensor::<f64>::zeros(&[1, 2]);
    let xt = q_sample(&x0, 30, &eps, &s).unwrap();
    let scale = s.alpha_bar(30).sqrt();
    assert!((xt.get2(0, 0) - 2.0 * scale).abs() < 1e-12);
    assert!((xt.get2(0, 1) + 4.0 * scale).abs() < 1e-12);
    assert!(q_sample(&x0, 0, &eps, &s).is_err());
    assert!(q_sample(&x0, 101, &eps, &s).is_err());
}

#[test]
fn q_sample_matches_iterated_chain_moments() {
    // Monte-Carlo oracle: iterating x_t = sqrt(1-beta_t) x_{t-1} +
    // sqrt(beta_t) e must have the same first two moments as the closed
    // form at matching t. 10k draws on a single element.
    let s = build_schedule(50, 5e-3, 5e-2).unwrap();
    let t = 7;
    let x0 = 1.3f64;
    let n = 10_000;
    let mut rng = Rng::new(2024);
    let mut iterated = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = x0;
        for step in 1..=t {
            let beta = s.beta(step);
            x = (1.0 - beta).sqrt() * x + beta.sqrt() * rng.normal();
        }
        iterated.push(x);
    }
    let mean: f64 = iterated.iter().sum::<f64>() / n as f64;
    let var: f64 = iterated.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;

    let ab = s.alpha_bar(t);
    let expect_mean = ab.sqrt() * x0;
    let expect_var = 1.0 - ab;
    // 5-sigma tolerances on the estimators.
    let mean_tol = 5.0 * expect_var.sqrt() / (n as f64).sqrt();
    let var_tol = 5.0 * expect_var * (2.0 / (n as f64 - 1.0)).sqrt();
    assert!(
        (mean - expect_mean).abs() < mean_tol,
        "mean {mean} vs {expect_mean} (tol {mean_tol})"
    );
    assert!(
        (var - expect_var).abs() < var_tol,
        "var {var} vs {expect_var} (tol {var_tol})"
    );

    // Direct q_sample draws agree with the same closed form.
    let x0_t = Tensor::<f64>::scalar(x0).reshaped(vec![1, 1]).unwrap();
    let mut direct = Vec::with_capacity(n);
    for _ in 0..n {
        let eps = Tensor::randn(&[1, 1], 1.0, &mut rng);
        direct.push(q_sample(&x0_t, t, &eps, &s).unwrap().data()[0]);
    }
    let dmean: f64 = direct.iter().sum::<f64>() / n as f64;
    let dvar: f64 = direct.iter().map(|v| (v - dmean) * (v - dmean)).sum::<f64>() / n as f64;
    assert!((dmean - expect_mean).abs() < mean_tol);
    assert!((dvar - expect_var).abs() < var_tol);
}

#[test]
fn objective_is_zero_for_perfect_prediction_and_one_for_zero_model() {
    // The training objective is the elementwise mean squared error; a
    // perfect prediction gives exactly zero, and predicting zero on
    // unit-variance data gives approximately one.
    let mut rng = Rng::new(5);
    let x0 = Tensor::<f64>::randn(&[64, 8], 1.0, &mut rng);
    let mut g = Graph::new();
    let a = g.constant(x0.clone()).unwrap();
    let b = g.constant(x0.clone()).unwrap();
    let perfect = g.mean_square_error(a, b).unwrap();
    assert_eq!(g.value(perfect).scalar_value().unwrap(), 0.0);

    let zeros = g.constant(Tensor::zeros(&[64, 8])).unwrap();
    let loss = g.mean_square_error(zeros, a).unwrap();
    let v = g.value(loss).scalar_value().unwrap();
    assert!((v - 1.0).abs() < 0.2, "zero-model loss {v}");
}

#[test]
fn masking_rate_within_binomial_bounds() {
    let mut rng = Rng::new(31);
    let n = 10_000;
    let mut masked = 0;
    for _ in 0..n {
        let (t, m) = draw_timestep_and_mask(&mut rng, 1000, 0.1);
        assert!((1..=1000).contains(&t));
        if m {
            masked += 1;
        }
    }
    let rate = masked as f64 / n as f64;
    assert!((0.09..=0.11).contains(&rate), "mask rate {rate}");
}

#[test]
fn training_step_runs_and_counts_masks() {
    let model = tiny_model();
    let vocab = SyntheticVocabulary::standard(NUM_PARTS);
    let partition = BodyPartPartition::default_partition(14).unwrap();
    let cfg = DatasetConfig {
        feature_dim: 14,
        min_stage_frames: 6,
        max_stage_frames: 10,
        max_stages: 2,
        ..DatasetConfig::default()
    };
    let ds = build_dataset::<f64>(6, &vocab, &partition, &cfg, 1).unwrap();
    let schedule = build_schedule(100, 1e-4, 2e-2).unwrap();
    let batch: Vec<&_> = ds.iter().collect();
    let mut rng = Rng::new(7);
    let out = training_step(&model, &schedule, &batch, 0.5, &mut rng).unwrap();
    assert!(out.loss.is_finite() && out.loss > 0.0);
    assert_eq!(out.gradients.len(), model.params.len());
    assert!(out.masked_items <= batch.len());
    // Some gradient must be nonzero.
    assert!(out
        .gradients
        .iter()
        .any(|t| t.data().iter().any(|&v| v != 0.0)));
    assert!(training_step(&model, &schedule, &[], 0.1, &mut rng).is_err());
}

#[test]
fn every_text_encoder_parameter_receives_gradient() {
    // One batch with both masked and unmasked items: every text-encoder
    // parameter tensor must see a nonzero gradient somewhere.
    let model = tiny_model();
    let vocab = SyntheticVocabulary::standard(NUM_PARTS);
    let partition = BodyPartPartition::default_partition(14).unwrap();
    let cfg = DatasetConfig {
        feature_dim: 14,
        min_stage_frames: 8,
        max_stage_frames: 12,
        max_stages: 2,
        ..DatasetConfig::default()
    };
    let ds = build_dataset::<f64>(8, &vocab, &partition, &cfg, 2).unwrap();
    let schedule = build_schedule(100, 1e-4, 2e-2).unwrap();
    let batch: Vec<&_> = ds.iter().collect();
    let mut rng = Rng::new(12);
    let out = training_step(&model, &schedule, &batch, 0.5, &mut rng).unwrap();
    assert!(out.masked_items > 0 && out.masked_items < batch.len());
    for (i, name) in model.params.names().iter().enumerate() {
        if name.starts_with("textenc.") {
            let has_grad = out.gradients[i].data().iter().any(|&v| v != 0.0);
            assert!(has_grad, "dead parameter at init: {name}");
        }
    }
}

#[test]
fn sampler_timesteps_uniform_stride_ending_at_one() {
    let sampler = SamplerConfig {
        steps: 50,
        guidance_weight: 1.0,
    };
    let ts = sampler.timesteps(1000).unwrap();
    assert_eq!(ts.len(), 50);
    assert_eq!(ts[0], 981);
    assert_eq!(*ts.last().unwrap(), 1);
    for w in ts.windows(2) {
        assert_eq!(w[0] - w[1], 20);
    }
    // More steps than the chain clamps to the chain length.
    let short = SamplerConfig {
        steps: 10,
        guidance_weight: 1.0,
    };
    let ts = short.timesteps(5).unwrap();
    assert_eq!(ts, vec![5, 4, 3, 2, 1]);
}

#[test]
fn sampling_is_seed_deterministic_and_length_covariant() {
    let model = tiny_model();
    let schedule = build_schedule(40, 1e-4, 2e-2).unwrap();
    let sampler = SamplerConfig {
        steps: 8,
        guidance_weight: 1.0,
    };
    let script = FineGrainedScript::single_stage(
        12,
        vec!["wave".into(); NUM_PARTS],
        "wave".into(),
    );
    let a = sample(&model, &script, None, &schedule, &sampler, 9).unwrap();
    let b = sample(&model, &script, None, &schedule, &sampler, 9).unwrap();
    assert_eq!(a.frames, b.frames);
    assert_eq!(a.num_frames(), 12);
    let c = sample(&model, &script, Some(20), &schedule, &sampler, 9).unwrap();
    assert_eq!(c.num_frames(), 20);
    let d = sample(&model, &script, None, &schedule, &sampler, 10).unwrap();
    assert_ne!(a.frames, d.frames);
}

#[test]
fn single_stage_composition_equals_plain_sampling() {
    let model = tiny_model();
    let schedule = build_schedule(40, 1e-4, 2e-2).unwrap();
    let sampler = SamplerConfig {
        steps: 8,
        guidance_weight: 1.0,
    };
    let script = FineGrainedScript::single_stage(
        10,
        vec!["raise".into(); NUM_PARTS],
        "raise".into(),
    );
    let plain = sample(&model, &script, None, &schedule, &sampler, 4).unwrap();
    let composed = compose_sample(&model, &script, &[0.0], &schedule, &sampler, 4).unwrap();
    assert_eq!(plain.frames, composed.frames);

    // Offset count must match the stage count.
    assert!(compose_sample(&model, &script, &[0.0, 1.0], &schedule, &sampler, 4).is_err());
}

#[test]
fn guidance_weight_changes_output() {
    let model = tiny_model();
    let schedule = build_schedule(40, 1e-4, 2e-2).unwrap();
    let script = FineGrainedScript::single_stage(
        8,
        vec!["swing".into(); NUM_PARTS],
        "swing".into(),
    );
    let plain = SamplerConfig {
        steps: 4,
        guidance_weight: 1.0,
    };
    let guided = SamplerConfig {
        steps: 4,
        guidance_weight: 2.0,
    };
    let a = sample(&model, &script, None, &schedule, &plain, 1).unwrap();
    let b = sample(&model, &script, None, &schedule, &guided, 1).unwrap();
    assert_ne!(a.frames, b.frames);
    assert_eq!(a.frames.shape(), b.frames.shape());
}

#[test]
fn concurrent_sampling_over_shared_weights() {
    // Sampling runs are independent and share read-only parameters.
    fn assert_send_sync<T: Send + Sync>() {}
    assert_send_sync::<Denoiser<f32>>();
    assert_send_sync::<Denoiser<f64>>();

    let model = tiny_model();
    let schedule = build_schedule(40, 1e-4, 2e-2).unwrap();
    let sampler = SamplerConfig {
        steps: 4,
        guidance_weight: 1.0,
    };
    let script = FineGrainedScript::single_stage(
        10,
        vec!["circle".into(); NUM_PARTS],
        "circle".into(),
    );
    let sequential: Vec<_> = (0..4u64)
        .map(|seed| sample(&model, &script, None, &schedule, &sampler, seed).unwrap())
        .collect();
    let concurrent: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..4u64)
            .map(|seed| {
                let (model, script, schedule, sampler) = (&model, &script, &schedule, &sampler);
                scope.spawn(move || sample(model, script, None, schedule, sampler, seed).unwrap())
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for (a, b) in sequential.iter().zip(concurrent.iter()) {
        assert_eq!(a.frames, b.frames);
    }
}

#[test]
fn two_stage_script_sampling_smoke() {
    let model = tiny_model();
    let schedule = build_schedule(40, 1e-4, 2e-2).unwrap();
    let sampler = SamplerConfig {
        steps: 6,
        guidance_weight: 1.0,
    };
    let script = FineGrainedScript {
        fps: 30,
        stages: vec![Stage::uniform(8, "wave"), Stage::uniform(10, "hold")],
    };
    let m = compose_sample(&model, &script, &[0.0, 0.0], &schedule, &sampler, 2).unwrap();
    assert_eq!(m.num_frames(), 18);
    assert!(m.frames.all_finite());
}
