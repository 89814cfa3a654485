use super::*;
use crate::schema::{build_dataset, BodyPartPartition, DatasetConfig, SyntheticVocabulary, NUM_PARTS};

fn feats(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

// --- FID ---------------------------------------------------------------

#[test]
fn fid_of_identical_sets_is_zero() {
    let mut rng = Rng::new(1);
    let a = Tensor::<f64>::randn(&[40, 6], 1.0, &mut rng);
    let d = fid(&a, &a).unwrap();
    assert!(d.abs() < 1e-6, "fid(a, a) = {d}");
}

#[test]
fn fid_matches_one_dimensional_closed_form() {
    // N(0,1) vs N(1,1): (mu1-mu2)^2 + (s1-s2)^2 = 1.
    let d = fid_from_moments(&[0.0], &[vec![1.0]], &[1.0], &[vec![1.0]]).unwrap();
    assert!((d - 1.0).abs() < 1e-6, "closed form fid = {d}");
    // N(0,1) vs N(2,4): 4 + (1-2)^2 = 5.
    let d = fid_from_moments(&[0.0], &[vec![1.0]], &[2.0], &[vec![4.0]]).unwrap();
    assert!((d - 5.0).abs() < 1e-5, "closed form fid = {d}");
}

#[test]
fn fid_is_symmetric() {
    let mut rng = Rng::new(2);
    let a = Tensor::<f64>::randn(&[30, 5], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[35, 5], 1.3, &mut rng).map(|v| v + 0.5);
    let ab = fid(&a, &b).unwrap();
    let ba = fid(&b, &a).unwrap();
    assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
    assert!(ab > 0.0);
}

#[test]
fn fid_rejects_undersized_sets() {
    let a = feats(&[vec![0.0, 1.0]]);
    assert!(fid(&a, &a).is_err());
}

// --- diversity -----------------------------------------------------------

#[test]
fn diversity_of_identical_features_is_zero() {
    let rows: Vec<Vec<f64>> = (0..10).map(|_| vec![0.3, -0.7, 1.1]).collect();
    let d = diversity(&feats(&rows), 4, 0).unwrap();
    assert_eq!(d, 0.0);
}

#[test]
fn two_point_diversity_expectation_is_half_distance() {
    // Independent subset draws of size 1 from {u, w}: four equally likely
    // pairings, two give |u - w| and two give 0.
    let u = vec![0.0, 0.0];
    let w = vec![3.0, 4.0]; // distance 5
    let set = feats(&[u, w]);
    let n = 4000;
    let mut acc = 0.0;
    for seed in 0..n {
        acc += diversity(&set, 1, seed).unwrap();
    }
    let mean = acc / n as f64;
    assert!((mean - 2.5).abs() < 0.15, "expectation {mean}, want 2.5");
}

#[test]
fn diversity_scales_homogeneously() {
    let mut rng = Rng::new(3);
    let a = Tensor::<f64>::randn(&[20, 4], 1.0, &mut rng);
    let scaled = a.scale(3.0);
    let d1 = diversity(&a, 8, 42).unwrap();
    let d3 = diversity(&scaled, 8, 42).unwrap();
    assert!((d3 - 3.0 * d1).abs() < 1e-9);
}

#[test]
fn diversity_rejects_insufficient_samples() {
    let a = feats(&[vec![1.0], vec![2.0], vec![3.0]]);
    assert!(diversity(&a, 2, 0).is_err());
}

// --- multimodality ---------------------------------------------------------

#[test]
fn multimodality_zero_for_deterministic_groups() {
    let groups: Vec<Tensor<f64>> = (0..3)
        .map(|c| feats(&vec![vec![c as f64, 1.0]; 8]))
        .collect();
    let m = multimodality(&groups, 3, 5).unwrap();
    assert_eq!(m, 0.0);
}

#[test]
fn single_group_multimodality_equals_diversity() {
    let mut rng = Rng::new(4);
    let g = Tensor::<f64>::randn(&[16, 3], 1.0, &mut rng);
    let m = multimodality(&[g.clone()], 5, 77).unwrap();
    let d = diversity(&g, 5, 77).unwrap();
    assert_eq!(m, d);
}

#[test]
fn multimodality_matches_brute_force_formula() {
    // Direct evaluation of (1 / (S_m * C)) sum_c sum_i |v_{c,i} - v'_{c,i}|
    // with the same subset draws.
    let mut rng = Rng::new(5);
    let groups: Vec<Tensor<f64>> = (0..3)
        .map(|_| Tensor::<f64>::randn(&[10, 4], 1.0, &mut rng))
        .collect();
    let s_m = 4;
    let seed = 99u64;
    let got = multimodality(&groups, s_m, seed).unwrap();

    let mut acc = 0.0;
    for (c, group) in groups.iter().enumerate() {
        let mut r = Rng::new(seed.wrapping_add(c as u64));
        let a = r.sample_indices(group.rows(), s_m);
        let b = r.sample_indices(group.rows(), s_m);
        for i in 0..s_m {
            let d: f64 = (0..group.cols())
                .map(|j| {
                    let x = group.get2(a[i], j) - group.get2(b[i], j);
                    x * x
                })
                .sum::<f64>()
                .sqrt();
            acc += d;
        }
    }
    let expect = acc / (s_m * groups.len()) as f64;
    assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
}

#[test]
fn multimodality_names_undersized_group() {
    let groups = vec![
        Tensor::<f64>::zeros(&[8, 2]),
        Tensor::<f64>::zeros(&[3, 2]),
    ];
    let err = multimodality(&groups, 2, 0).unwrap_err();
    assert!(err.to_string().contains("group 1"), "{err}");
}

// --- mm_dist -----------------------------------------------------------------

#[test]
fn mm_dist_examples() {
    let m = feats(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(mm_dist(&m, &m).unwrap(), 0.0);

    // Orthogonal unit vectors per pair: distance sqrt(2).
    let a = feats(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let b = feats(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
    let d = mm_dist(&a, &b).unwrap();
    assert!((d - 2f64.sqrt()).abs() < 1e-12);

    // Jointly permuting pairs leaves the value unchanged.
    let ap = feats(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
    let bp = feats(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(mm_dist(&a, &b).unwrap(), mm_dist(&ap, &bp).unwrap());

    let short = feats(&[vec![1.0, 0.0]]);
    assert!(mm_dist(&a, &short).is_err());
}

// --- r_precision ---------------------------------------------------------------

#[test]
fn perfect_extractor_reaches_one_at_all_k() {
    // Motion feature equals its text feature; distinct texts.
    let mut rng = Rng::new(6);
    let texts = Tensor::<f64>::randn(&[40, 8], 1.0, &mut rng);
    let keys: Vec<usize> = (0..40).collect();
    for k in 1..=3 {
        let r = r_precision(&texts, &keys, &texts, k, 3).unwrap();
        assert_eq!(r, 1.0, "k={k}");
    }
}

#[test]
fn random_features_score_near_chance() {
    let mut rng = Rng::new(7);
    let n = 2000;
    let texts = Tensor::<f64>::randn(&[64, 8], 1.0, &mut rng);
    let motions = Tensor::<f64>::randn(&[n, 8], 1.0, &mut rng);
    let keys: Vec<usize> = (0..n).map(|i| i % 64).collect();
    let r1 = r_precision(&motions, &keys, &texts, 1, 11).unwrap();
    assert!((0.012..=0.055).contains(&r1), "top-1 {r1}, chance 1/32");
}

#[test]
fn r_precision_monotone_in_k() {
    let mut rng = Rng::new(8);
    let texts = Tensor::<f64>::randn(&[40, 6], 1.0, &mut rng);
    let motions = texts
        .clone()
        .zip_map(&Tensor::randn(&[40, 6], 0.8, &mut rng), |a, b| a + b)
        .unwrap();
    let keys: Vec<usize> = (0..40).collect();
    let r1 = r_precision(&motions, &keys, &texts, 1, 5).unwrap();
    let r2 = r_precision(&motions, &keys, &texts, 2, 5).unwrap();
    let r3 = r_precision(&motions, &keys, &texts, 3, 5).unwrap();
    assert!(r1 <= r2 && r2 <= r3, "{r1} {r2} {r3}");
    assert!((0.0..=1.0).contains(&r3));
}

#[test]
fn r_precision_requires_32_descriptions() {
    let texts = Tensor::<f64>::zeros(&[31, 4]);
    let motions = Tensor::<f64>::zeros(&[5, 4]);
    assert!(r_precision(&motions, &[0, 1, 2, 3, 4], &texts, 1, 0).is_err());
}

// --- extractor -------------------------------------------------------------------

fn tiny_dataset() -> (Vec<crate::schema::DatasetEntry<f64>>, BodyPartPartition) {
    let partition = BodyPartPartition::default_partition(14).unwrap();
    let vocab = SyntheticVocabulary::standard(NUM_PARTS);
    let cfg = DatasetConfig {
        feature_dim: 14,
        min_stage_frames: 8,
        max_stage_frames: 12,
        max_stages: 2,
        ..DatasetConfig::default()
    };
    let ds = build_dataset::<f64>(80, &vocab, &partition, &cfg, 21).unwrap();
    (ds, partition)
}

#[test]
fn extractor_training_is_deterministic_and_loss_falls() {
    let (ds, partition) = tiny_dataset();
    let cfg = ExtractorConfig {
        epochs: 6,
        ..ExtractorConfig::default()
    };
    let a = train_extractor(&ds, &partition, cfg, 3).unwrap();
    let b = train_extractor(&ds, &partition, cfg, 3).unwrap();
    for (x, y) in a
        .extractor
        .params
        .tensors()
        .iter()
        .zip(b.extractor.params.tensors())
    {
        assert_eq!(x, y);
    }
    let first = a.loss_history.first().copied().unwrap();
    let last = a.loss_history.last().copied().unwrap();
    assert!(last < first, "loss did not fall: {first} -> {last}");
}

#[test]
fn extractor_outputs_unit_rows() {
    let (ds, partition) = tiny_dataset();
    let ex = FeatureExtractor::<f64>::new(ExtractorConfig::default(), partition, 1);
    let motions: Vec<&_> = ds.iter().take(10).map(|e| &e.motion).collect();
    let feats = ex.encode_motions(&motions).unwrap();
    for r in 0..feats.rows() {
        let norm: f64 = feats.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9, "row {r} norm {norm}");
    }
}

#[test]
fn untrained_extractor_retrieves_at_chance() {
    let (ds, partition) = tiny_dataset();
    let ex = FeatureExtractor::<f64>::new(ExtractorConfig::default(), partition, 5);

    // Distinct description pool from the dataset scripts.
    let mut keys = Vec::new();
    let mut uniq: Vec<&crate::schema::FineGrainedScript> = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for e in &ds {
        let k = description_key(&e.script);
        let idx = *seen.entry(k).or_insert_with(|| {
            uniq.push(&e.script);
            uniq.len() - 1
        });
        keys.push(idx);
    }
    assert!(uniq.len() >= 32);
    let texts = ex.encode_scripts(&uniq).unwrap();
    let motions: Vec<&_> = ds.iter().map(|e| &e.motion).collect();
    let mfeats = ex.encode_motions(&motions).unwrap();
    let r1 = r_precision(&mfeats, &keys, &texts, 1, 17).unwrap();
    assert!(r1 < 0.2, "untrained top-1 {r1} far above chance");
}

#[test]
fn training_requires_64_pairs() {
    let (ds, partition) = tiny_dataset();
    let cfg = ExtractorConfig::default();
    assert!(train_extractor(&ds[..40], &partition, cfg, 0).is_err());
}

// --- report helpers ------------------------------------------------------------

#[test]
fn mean_ci_of_constant_is_exact() {
    let v = mean_ci(&[2.0, 2.0, 2.0, 2.0]);
    assert_eq!(v.mean, 2.0);
    assert_eq!(v.ci95, 0.0);
}
