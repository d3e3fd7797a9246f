use std::time::Instant;

use grm_core::gradcheck::GradCheckOptions;
use grm_core::head::{BBox, HeadOutput, LossConfig};
use grm_core::model::*;
use grm_core::nn::{named_tensors, num_params};
use grm_core::relation::{DivisionSampler, GumbelConfig, RelationMode};
use grm_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sample(cfg: &ModelConfig, seed: u64) -> Sample {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let t = cfg.patch.template_size;
    let s = cfg.patch.search_size;
    Sample {
        template: Tensor::uniform([3, t, t], 0.5, &mut r).map(|v| v + 0.5),
        search: Tensor::uniform([3, s, s], 0.5, &mut r).map(|v| v + 0.5),
        gt: BBox::new(0.45, 0.55, 0.25, 0.3),
    }
}

#[test]
fn tiny_model_gradients_match_finite_differences() {
    let cfg = ModelConfig::tiny();
    let params = GrmParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let start = Instant::now();
    let report = check_gradients(
        &cfg,
        &params,
        &sample(&cfg, 1),
        &LossConfig::default(),
        &GumbelConfig::default(),
        &GradCheckOptions::new(1e-4),
    )
    .unwrap();
    let names: Vec<String> = named_tensors(&params).into_iter().map(|(n, _)| n).collect();
    let reported: Vec<String> = report.params.iter().map(|p| p.name.clone()).collect();
    assert_eq!(names, reported);
    assert!(names.iter().any(|n| n.contains("predictor")));
    assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
    eprintln!("{} params, max rel err {:.2e}, {:?}", num_params(&params), report.max_rel_err(), start.elapsed());
}

#[test]
fn untrained_model_decodes_a_valid_box() {
    for relation in [RelationMode::Adaptive, RelationMode::OneStream, RelationMode::TwoStream] {
        let cfg = ModelConfig {
            relation,
            ..ModelConfig::tiny()
        };
        let params = GrmParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let s = sample(&cfg, 2);
        let out = forward(&mut tape, &p, &cfg, &s.template, &s.search, &mut DivisionSampler::eval()).unwrap();
        let head = HeadOutput::from_vars(&tape, &out.head);
        grm_core::head::decode_box(&head).validate_normalized().unwrap();
        assert_eq!(out.divisions.len(), cfg.depth);
    }
}

#[test]
fn predictors_exist_only_on_adaptive_layers() {
    let cfg = ModelConfig {
        depth: 3,
        division_layers: vec![2, 3],
        ..ModelConfig::tiny()
    };
    let params = GrmParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let has: Vec<bool> = params.layers.iter().map(|l| l.predictor.is_some()).collect();
    assert_eq!(has, vec![false, true, true]);
    let one = GrmParams::init(
        &ModelConfig {
            relation: RelationMode::OneStream,
            ..cfg.clone()
        },
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    assert!(one.layers.iter().all(|l| l.predictor.is_none()));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad_heads = ModelConfig {
        num_heads: 3,
        ..ModelConfig::tiny()
    };
    assert!(bad_heads.validate().is_err());
    let bad_layers = ModelConfig {
        division_layers: vec![3],
        ..ModelConfig::tiny()
    };
    assert!(bad_layers.validate().is_err());
}
