use grm_core::gradcheck::finite_diff_check;
use grm_core::nn::{bind, named_tensors, Linear};
use grm_core::relation::*;
use grm_core::{Error, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use TokenCategory::{Cross as A, SearchOnly as S};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_categories(n: usize, r: &mut ChaCha8Rng) -> Vec<TokenCategory> {
    (0..n).map(|_| if r.random_bool(0.5) { A } else { S }).collect()
}

fn tokens(tape: &mut Tape, n: usize, c: usize, r: &mut ChaCha8Rng) -> Var {
    tape.constant(Tensor::randn([n, c], 1.0, r))
}

#[test]
fn mask_matches_hand_evaluated_example() {
    let d = one_hot(&[S, A, S]).unwrap();
    let m = build_mask(&d, 2).unwrap();
    let expected = Tensor::from_rows(&[
        [1.0, 1.0, 0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0, 1.0, 1.0],
        [1.0, 1.0, 1.0, 1.0, 1.0],
        [0.0, 0.0, 1.0, 1.0, 1.0],
    ])
    .unwrap();
    assert_eq!(m.tensor(), &expected);
}

#[test]
fn all_cross_mask_is_full() {
    let m = mask_from_categories(&[A; 5], 3).unwrap();
    assert!(m.tensor().data().iter().all(|&v| v == 1.0));
}

#[test]
fn all_search_only_mask_is_block_diagonal() {
    let m = mask_from_categories(&[S; 4], 2).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            assert_eq!(m.allows(i, j), (i < 2) == (j < 2), "({i},{j})");
        }
    }
}

#[test]
fn mask_rejects_non_one_hot_rows() {
    let d = Tensor::from_rows(&[[1.0, 0.0], [1.0, 1.0]]).unwrap();
    assert!(matches!(build_mask(&d, 1), Err(Error::InvalidDivision(_))));
    let d = Tensor::from_rows(&[[0.5, 0.5]]).unwrap();
    assert!(matches!(build_mask(&d, 1), Err(Error::InvalidDivision(_))));
}

#[test]
fn mask_matches_rule_interpreter() {
    // Rules stated directly: template reads template and cross; search-only
    // reads search tokens; cross reads everything.
    let permitted = |q: TokenCategory, k: TokenCategory| match q {
        TokenCategory::Template => k != S,
        TokenCategory::SearchOnly => k != TokenCategory::Template,
        TokenCategory::Cross => true,
    };
    let mut r = rng(4);
    for _ in 0..1000 {
        let n_z = r.random_range(1..=8);
        let n_x = r.random_range(1..=16);
        let cats = random_categories(n_x, &mut r);
        let all: Vec<TokenCategory> = std::iter::repeat_n(TokenCategory::Template, n_z)
            .chain(cats.iter().copied())
            .collect();
        let m = mask_from_categories(&cats, n_z).unwrap();
        for (i, &qi) in all.iter().enumerate() {
            assert!(m.allows(i, i));
            for (j, &kj) in all.iter().enumerate() {
                assert_eq!(m.allows(i, j), permitted(qi, kj));
                assert_eq!(allowed(qi, kj), permitted(qi, kj));
            }
        }
    }
}

#[test]
fn differentiable_mask_equals_entrywise_mask() {
    let mut r = rng(8);
    let cats = random_categories(7, &mut r);
    let mut tape = Tape::new();
    let st = tape.constant(one_hot(&cats).unwrap());
    let m = mask_node(&mut tape, st, 3).unwrap();
    assert_eq!(tape.value(m), mask_from_categories(&cats, 3).unwrap().tensor());
}

fn predictor(c: usize, seed: u64, zero_last: bool) -> PredictorParams {
    let mut p = PredictorParams::init(c, &mut rng(seed));
    if zero_last {
        p.fc3 = Linear::zeros(c / 4, 2);
    }
    p
}

#[test]
fn zero_last_layer_predicts_even_split() {
    let mut r = rng(1);
    let mut tape = Tape::new();
    let p = bind(&predictor(8, 1, true), &mut tape);
    let z = tokens(&mut tape, 4, 8, &mut r);
    let x = tokens(&mut tape, 6, 8, &mut r);
    let pi = predict_division(&mut tape, z, x, Some(&p), Pooling::Max).unwrap();
    assert!(tape.value(pi).data().iter().all(|&v| v == 0.5));
}

#[test]
fn predictor_is_tokenwise() {
    let mut r = rng(2);
    let mut tape = Tape::new();
    let p = bind(&predictor(8, 2, false), &mut tape);
    let z = tokens(&mut tape, 4, 8, &mut r);
    let x = tokens(&mut tape, 5, 8, &mut r);
    let perm = [3, 0, 4, 1, 1];
    let xp = tape.gather_rows(x, &perm).unwrap();
    for pooling in [Pooling::Max, Pooling::Avg] {
        let pi = predict_division(&mut tape, z, x, Some(&p), pooling).unwrap();
        let pip = predict_division(&mut tape, z, xp, Some(&p), pooling).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(tape.value(pip).row(row), tape.value(pi).row(src));
        }
        for row in tape.value(pi).data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12 && row.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn missing_predictor_is_a_config_error() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros([2, 4]));
    let x = tape.constant(Tensor::zeros([3, 4]));
    let err = predict_division(&mut tape, z, x, None, Pooling::Max).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

fn train_cfg(seed: u64, tau: f64) -> GumbelConfig {
    GumbelConfig {
        tau,
        rng_seed: seed,
        mode: GumbelMode::Train,
    }
}

#[test]
fn degenerate_probabilities_always_pick_their_category() {
    let pi = Tensor::from_rows(&[[1.0, 0.0]; 8]).unwrap();
    for seed in 0..20 {
        let d = gumbel_divide(&pi, &train_cfg(seed, 1.0)).unwrap();
        assert!(d.hard.data().chunks(2).all(|r| r == [1.0, 0.0]));
    }
}

#[test]
fn eval_mode_is_argmax_with_ties_to_cross() {
    let pi = Tensor::from_rows(&[[0.3, 0.7], [0.8, 0.2], [0.5, 0.5]]).unwrap();
    let cfg = GumbelConfig {
        mode: GumbelMode::Eval,
        ..GumbelConfig::default()
    };
    let d = gumbel_divide(&pi, &cfg).unwrap();
    assert_eq!(d.categories(), vec![A, S, A]);
}

#[test]
fn gumbel_max_frequencies_match_probabilities() {
    let n = 100_000;
    let pi = Tensor::from_rows(&vec![[0.3, 0.7]; n]).unwrap();
    let d = gumbel_divide(&pi, &train_cfg(0, 1.0)).unwrap();
    let freq = d.cross_fraction();
    let se = (0.21 / n as f64).sqrt();
    assert!((freq - 0.7).abs() < 3.0 * se, "P[cross] = {freq}");
    assert!((freq - 0.7).abs() < 0.01);
}

#[test]
fn low_temperature_relaxation_is_nearly_hard() {
    let n = 100_000;
    let pi = Tensor::from_rows(&vec![[0.3, 0.7]; n]).unwrap();
    let d = gumbel_divide(&pi, &train_cfg(5, 0.01)).unwrap();
    let mut maxes = Vec::with_capacity(n);
    for (s, h) in d.soft.data().chunks(2).zip(d.hard.data().chunks(2)) {
        let m = s[0].max(s[1]);
        let hard_idx = usize::from(h[1] == 1.0);
        assert_eq!(s[hard_idx], m);
        maxes.push(m);
    }
    let mean = maxes.iter().sum::<f64>() / n as f64;
    maxes.sort_by(f64::total_cmp);
    assert!(mean > 0.99, "mean max entry {mean}");
    assert!(maxes[n / 2] > 0.99);
}

#[test]
fn non_positive_temperature_is_rejected() {
    let pi = Tensor::from_rows(&[[0.3, 0.7]]).unwrap();
    for tau in [0.0, -1.0, f64::NAN] {
        assert!(matches!(gumbel_divide(&pi, &train_cfg(0, tau)), Err(Error::Config(_))));
    }
}

#[test]
fn straight_through_gradient_matches_frozen_noise_differences() {
    let mut r = rng(19);
    let logits = Tensor::randn([6, 2], 1.0, &mut r);
    let weights = Tensor::randn([6, 2], 1.0, &mut r);
    let mut probe = Tape::new();
    let l = probe.constant(logits.clone());
    let pi = probe.softmax_rows(l).unwrap();
    let mut sampler = DivisionSampler::new(&train_cfg(3, 0.7)).unwrap();
    sampler.sample(&mut probe, pi).unwrap();
    let frozen = sampler.take_recorded();

    let params = vec![("logits".to_string(), logits)];
    let report = finite_diff_check(
        |tape, p| {
            let pi = tape.softmax_rows(p[0])?;
            let mut sampler = DivisionSampler::replay(0.7, frozen.clone())?;
            let (_, st) = sampler.sample(tape, pi)?;
            let w = tape.constant(weights.clone());
            let y = tape.mul(st, w)?;
            let y = tape.mul(y, y)?;
            tape.sum(y)
        },
        &params,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-6, "{report:?}");
}

fn attn_params(c: usize, seed: u64) -> AttentionParams {
    let mut r = rng(seed);
    let mut p = AttentionParams::init(c, &mut r);
    for lin in [&mut p.q, &mut p.k, &mut p.v, &mut p.o] {
        lin.bias = Tensor::randn([c], 0.1, &mut r);
    }
    p
}

#[test]
fn all_ones_mask_equals_unmasked_attention_bitwise() {
    let mut r = rng(6);
    let mut tape = Tape::new();
    let p = bind(&attn_params(8, 6), &mut tape);
    let x = tokens(&mut tape, 7, 8, &mut r);
    let ones = tape.constant(Tensor::ones([7, 7]));
    let masked = masked_mha(&mut tape, x, ones, &p, 2).unwrap();
    let plain = attention(&mut tape, x, x, None, &p, 2).unwrap();
    assert_eq!(tape.value(masked), tape.value(plain));
}

#[test]
fn diagonal_mask_maps_each_token_independently() {
    let mut r = rng(7);
    let mut tape = Tape::new();
    let p = bind(&attn_params(8, 7), &mut tape);
    let x = tokens(&mut tape, 5, 8, &mut r);
    let eye = tape.constant(Tensor::eye(5));
    let out = masked_mha(&mut tape, x, eye, &p, 4).unwrap();
    let v = p.v.forward(&mut tape, x).unwrap();
    let expected = p.o.forward(&mut tape, v).unwrap();
    assert!(tape.value(out).max_abs_diff(tape.value(expected)) < 1e-12);
}

fn masked_vs_separate(seed: u64, n_z: usize, cats: &[TokenCategory], c: usize, heads: usize) -> f64 {
    let mut r = rng(seed);
    let mut tape = Tape::new();
    let p = bind(&attn_params(c, seed + 1000), &mut tape);
    let z = tokens(&mut tape, n_z, c, &mut r);
    let x = tokens(&mut tape, cats.len(), c, &mut r);
    let all = tape.concat_rows(&[z, x]).unwrap();
    let mask = mask_from_categories(cats, n_z).unwrap();
    let m = tape.constant(mask.into_tensor());
    let masked = masked_mha(&mut tape, all, m, &p, heads).unwrap();
    let separate = separate_mha_oracle(&mut tape, z, x, cats, &p, heads).unwrap();
    tape.value(masked).max_abs_diff(tape.value(separate))
}

#[test]
fn masked_attention_equals_three_separate_calls() {
    assert!(masked_vs_separate(9, 2, &[S, A, S], 8, 2) < 1e-9);
    for seed in 0..20u64 {
        let mut r = rng(13 + seed);
        let n_z = r.random_range(1..=8);
        let n_x = r.random_range(1..=16);
        let cats = random_categories(n_x, &mut r);
        let heads = [1, 2, 4][seed as usize % 3];
        assert!(masked_vs_separate(seed, n_z, &cats, 8, heads) < 1e-9, "seed {seed}");
    }
    assert!(masked_vs_separate(3, 4, &[A; 6], 8, 2) < 1e-9);
    assert!(masked_vs_separate(4, 4, &[S; 6], 8, 2) < 1e-9);
}

#[test]
fn all_search_only_oracle_separates_template_and_search() {
    let mut r = rng(10);
    let mut tape = Tape::new();
    let p = bind(&attn_params(8, 10), &mut tape);
    let z = tokens(&mut tape, 3, 8, &mut r);
    let x = tokens(&mut tape, 4, 8, &mut r);
    let out = separate_mha_oracle(&mut tape, z, x, &[S; 4], &p, 2).unwrap();
    let zz = attention(&mut tape, z, z, None, &p, 2).unwrap();
    let xx = attention(&mut tape, x, x, None, &p, 2).unwrap();
    let both = tape.concat_rows(&[zz, xx]).unwrap();
    assert_eq!(tape.value(out), tape.value(both));
}

fn layer(c: usize, seed: u64, with_predictor: bool) -> LayerParams {
    let mut r = rng(seed);
    let mut p = LayerParams::init(c, with_predictor, &mut r);
    p.norm1.gamma = Tensor::randn([c], 0.3, &mut r).map(|v| v + 1.0);
    p.norm2.beta = Tensor::randn([c], 0.3, &mut r);
    p
}

fn enc(heads: usize) -> EncoderConfig {
    EncoderConfig {
        num_heads: heads,
        pooling: Pooling::Max,
    }
}

#[test]
fn force_all_cross_is_bitwise_one_stream() {
    let mut r = rng(11);
    let mut tape = Tape::new();
    let p = bind(&layer(8, 11, false), &mut tape);
    let state = LayerState {
        template: tokens(&mut tape, 4, 8, &mut r),
        search: tokens(&mut tape, 9, 8, &mut r),
    };
    let mut sampler = DivisionSampler::eval();
    for policy in [LayerPolicy::ForceAllCross, LayerPolicy::Plain] {
        let (out, division) = encoder_layer(&mut tape, state, &p, &enc(2), &mut sampler, &policy).unwrap();
        let reference = one_stream_layer(&mut tape, state, &p, 2).unwrap();
        assert_eq!(tape.value(out.template), tape.value(reference.template));
        assert_eq!(tape.value(out.search), tape.value(reference.search));
        assert_eq!(division.is_some(), policy == LayerPolicy::ForceAllCross);
    }
}

#[test]
fn zero_weight_layer_is_identity() {
    let mut r = rng(12);
    let mut params = layer(8, 12, false);
    for lin in [&mut params.attn.o, &mut params.fc2] {
        *lin = Linear::zeros(lin.weight.shape()[0], 8);
    }
    let mut tape = Tape::new();
    let p = bind(&params, &mut tape);
    let state = LayerState {
        template: tokens(&mut tape, 2, 8, &mut r),
        search: tokens(&mut tape, 4, 8, &mut r),
    };
    let (out, _) = encoder_layer(&mut tape, state, &p, &enc(1), &mut DivisionSampler::eval(), &LayerPolicy::ForceAllSearchOnly).unwrap();
    assert_eq!(tape.value(out.template), tape.value(state.template));
    assert_eq!(tape.value(out.search), tape.value(state.search));
}

#[test]
fn search_only_layer_isolates_template_and_search() {
    let mut r = rng(14);
    let mut tape = Tape::new();
    let p = bind(&layer(8, 14, false), &mut tape);
    let z = tokens(&mut tape, 3, 8, &mut r);
    let x = tokens(&mut tape, 6, 8, &mut r);
    let z2 = tokens(&mut tape, 3, 8, &mut r);
    let x2 = tokens(&mut tape, 6, 8, &mut r);
    let run = |tape: &mut Tape, template, search| {
        let state = LayerState { template, search };
        encoder_layer(tape, state, &p, &enc(2), &mut DivisionSampler::eval(), &LayerPolicy::ForceAllSearchOnly)
            .unwrap()
            .0
    };
    let base = run(&mut tape, z, x);
    let moved_search = run(&mut tape, z, x2);
    let moved_template = run(&mut tape, z2, x);
    assert_eq!(tape.value(base.template).max_abs_diff(tape.value(moved_search.template)), 0.0);
    assert_eq!(tape.value(base.search).max_abs_diff(tape.value(moved_template.search)), 0.0);
    assert!(tape.value(base.search).max_abs_diff(tape.value(moved_search.search)) > 0.0);
}

#[test]
fn search_only_tokens_are_invisible_to_the_template() {
    let mut r = rng(15);
    let mut tape = Tape::new();
    let p = bind(&layer(8, 15, true), &mut tape);
    let z = tokens(&mut tape, 3, 8, &mut r);
    let x = tokens(&mut tape, 8, 8, &mut r);
    let state = LayerState { template: z, search: x };
    let (base, division) = encoder_layer(&mut tape, state, &p, &enc(2), &mut DivisionSampler::eval(), &LayerPolicy::Adaptive).unwrap();
    let mut cats = division.unwrap().categories();
    let predicted = cats.clone();
    if !cats.contains(&S) {
        cats[0] = S;
    }
    let fixed = LayerPolicy::Fixed(cats.clone());
    let (same, _) = encoder_layer(&mut tape, state, &p, &enc(2), &mut DivisionSampler::eval(), &fixed).unwrap();

    let mut noise = Tensor::randn([8, 8], 5.0, &mut r);
    for (i, c) in cats.iter().enumerate() {
        if *c == A {
            noise.data_mut()[i * 8..(i + 1) * 8].fill(0.0);
        }
    }
    let noise = tape.constant(noise);
    let x2 = tape.add(x, noise).unwrap();
    let (moved, _) = encoder_layer(&mut tape, LayerState { template: z, search: x2 }, &p, &enc(2), &mut DivisionSampler::eval(), &fixed).unwrap();
    assert_eq!(tape.value(same.template).max_abs_diff(tape.value(moved.template)), 0.0);
    assert!(tape.value(same.search).max_abs_diff(tape.value(moved.search)) > 0.0);
    if predicted == cats {
        assert_eq!(tape.value(base.template), tape.value(same.template));
    }
}

#[test]
fn adaptive_layer_gradient_reaches_the_predictor() {
    let mut r = rng(16);
    let c = 8;
    let params = layer(c, 16, true);
    let z = Tensor::randn([2, c], 1.0, &mut r);
    let x = Tensor::randn([5, c], 1.0, &mut r);
    let probe_w = Tensor::randn([7, c], 1.0, &mut r);

    let run = |tape: &mut Tape, params: &LayerParams<Var>, sampler: &mut DivisionSampler| -> grm_core::Result<Var> {
        let state = LayerState {
            template: tape.constant(z.clone()),
            search: tape.constant(x.clone()),
        };
        let (out, _) = encoder_layer(tape, state, params, &enc(2), sampler, &LayerPolicy::Adaptive)?;
        let all = tape.concat_rows(&[out.template, out.search])?;
        let w = tape.constant(probe_w.clone());
        let y = tape.mul(all, w)?;
        tape.sum(y)
    };

    let mut tape = Tape::new();
    let bound = bind(&params, &mut tape);
    let mut sampler = DivisionSampler::new(&train_cfg(2, 1.0)).unwrap();
    let loss = run(&mut tape, &bound, &mut sampler).unwrap();
    tape.backward(loss).unwrap();
    let fc1 = tape.grad(bound.predictor.as_ref().unwrap().fc1.weight).unwrap();
    assert!(fc1.data().iter().any(|&g| g != 0.0));
    let frozen = sampler.take_recorded();

    let pred = params.predictor.clone().unwrap();
    let named = named_tensors(&pred);
    let report = finite_diff_check(
        |tape, vars| {
            let mut p = bind(&params, tape);
            let mut it = vars.iter();
            let pred_vars = p.predictor.as_mut().unwrap();
            for lin in [&mut pred_vars.fc1, &mut pred_vars.fc2, &mut pred_vars.fc3] {
                lin.weight = *it.next().unwrap();
                lin.bias = *it.next().unwrap();
            }
            let mut sampler = DivisionSampler::replay(1.0, frozen.clone())?;
            run(tape, &p, &mut sampler)
        },
        &named,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-4, "{report:?}");
}

#[test]
fn stack_records_simplex_divisions() {
    let mut r = rng(21);
    let c = 8;
    let policies = layer_policies(RelationMode::Adaptive, 4, &[2, 3, 4]).unwrap();
    let params: Vec<LayerParams> = policies
        .iter()
        .map(|p| LayerParams::init(c, *p == LayerPolicy::Adaptive, &mut r))
        .collect();
    let mut tape = Tape::new();
    let bound = bind(&params, &mut tape);
    let state = LayerState {
        template: tokens(&mut tape, 4, c, &mut r),
        search: tokens(&mut tape, 16, c, &mut r),
    };
    let mut sampler = DivisionSampler::new(&train_cfg(21, 1.0)).unwrap();
    let (out, divisions) = encoder_stack(&mut tape, state, &bound, &policies, &enc(2), &mut sampler).unwrap();
    assert!(tape.value(out.template).is_finite() && tape.value(out.search).is_finite());
    assert!(divisions[0].is_none());
    for d in divisions[1..].iter().map(|d| d.as_ref().unwrap()) {
        for (p, h) in d.pi.data().chunks(2).zip(d.hard.data().chunks(2)) {
            assert!((p[0] + p[1] - 1.0).abs() < 1e-9 && p[0] >= 0.0 && p[1] >= 0.0);
            assert_eq!(h[0] + h[1], 1.0);
        }
    }
}

#[test]
fn single_plain_layer_stack_is_one_stream_layer() {
    let mut r = rng(22);
    let mut tape = Tape::new();
    let p = bind(&vec![layer(8, 22, false)], &mut tape);
    let state = LayerState {
        template: tokens(&mut tape, 2, 8, &mut r),
        search: tokens(&mut tape, 4, 8, &mut r),
    };
    let policies = layer_policies(RelationMode::Adaptive, 1, &[]).unwrap();
    let (out, divs) = encoder_stack(&mut tape, state, &p, &policies, &enc(2), &mut DivisionSampler::eval()).unwrap();
    let reference = one_stream_layer(&mut tape, state, &p[0], 2).unwrap();
    assert_eq!(tape.value(out.search), tape.value(reference.search));
    assert_eq!(divs, vec![None]);
}

#[test]
fn policy_construction() {
    use LayerPolicy::*;
    assert_eq!(
        layer_policies(RelationMode::TwoStream, 3, &[2, 3]).unwrap(),
        vec![ForceAllSearchOnly, ForceAllSearchOnly, Plain]
    );
    assert_eq!(
        layer_policies(RelationMode::OneStream, 3, &[2, 3]).unwrap(),
        vec![Plain, ForceAllCross, ForceAllCross]
    );
    assert_eq!(
        layer_policies(RelationMode::Adaptive, 3, &[1, 3]).unwrap(),
        vec![Adaptive, Plain, Adaptive]
    );
    assert!(layer_policies(RelationMode::Adaptive, 3, &[4]).is_err());
}

#[test]
fn layer_errors_name_the_layer() {
    let mut tape = Tape::new();
    let p = bind(&vec![layer(8, 1, false), layer(8, 2, false)], &mut tape);
    let state = LayerState {
        template: tape.constant(Tensor::zeros([2, 8])),
        search: tape.constant(Tensor::zeros([4, 8])),
    };
    let policies = vec![LayerPolicy::Plain, LayerPolicy::Adaptive];
    let err = encoder_stack(&mut tape, state, &p, &policies, &enc(2), &mut DivisionSampler::eval()).unwrap_err();
    assert!(matches!(err, Error::Layer { layer: 2, .. }));
    assert!(matches!(err.root(), Error::Config(_)));
}

#[test]
fn division_record_layout() {
    let d = Division::fixed(&[S, A, A]).unwrap();
    let rec = d.record(3);
    assert_eq!(rec.layer, 3);
    assert_eq!(rec.d, vec![0, 1, 1]);
    assert_eq!(rec.pi[0], [1.0, 0.0]);
    assert!((d.cross_fraction() - 2.0 / 3.0).abs() < 1e-15);
}
