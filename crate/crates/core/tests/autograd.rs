use grm_core::autograd::{ConvSpec, Tape, Var};
use grm_core::nn;
use grm_core::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

/// Independent central-difference oracle: only forward values are used.
fn fd_max_rel_err<F>(build: F, inputs: &[Tensor], h: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    let mut ts = inputs.to_vec();
    for (p, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).unwrap();
        for i in 0..ts[p].len() {
            let orig = ts[p].data()[i];
            ts[p].data_mut()[i] = orig + h;
            let up = eval(&ts);
            ts[p].data_mut()[i] = orig - h;
            let down = eval(&ts);
            ts[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Weighted sum so every output element carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, x: Var) -> Var {
    let n = tape.value(x).len();
    let shape = tape.shape(x).to_vec();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
    let wv = tape.constant(Tensor::new(shape, w).unwrap());
    let p = tape.mul(x, wv).unwrap();
    tape.sum(p).unwrap()
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let eye = tape.constant(Tensor::eye(2));
    let b = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let out = tape.matmul(eye, b).unwrap();
    assert_eq!(tape.value(out), &m(&[&[1.0, 2.0], &[3.0, 4.0]]));

    let p = tape.constant(m(&[&[1.0, 0.0], &[0.0, 0.0]]));
    let b = tape.constant(m(&[&[5.0, 6.0], &[7.0, 8.0]]));
    let out = tape.matmul(p, b).unwrap();
    assert_eq!(tape.value(out), &m(&[&[5.0, 6.0], &[0.0, 0.0]]));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        Error::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng(7);
    let a = Tensor::randn([3, 3], 1.0, &mut r);
    let b = Tensor::randn([3, 3], 1.0, &mut r);
    let err = fd_max_rel_err(
        |t, v| {
            let b = t.constant(b.clone());
            let p = t.matmul(v[0], b).unwrap();
            t.sum(p).unwrap()
        },
        &[a],
        1e-5,
    );
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn masked_softmax_examples() {
    let mut tape = Tape::new();
    let case = |tape: &mut Tape, logits: [f64; 3], mask: [f64; 3]| {
        let l = tape.constant(Tensor::new([1, 3], logits.to_vec()).unwrap());
        let mk = tape.constant(Tensor::new([1, 3], mask.to_vec()).unwrap());
        let out = tape.masked_softmax(l, mk).unwrap();
        tape.value(out).data().to_vec()
    };
    let u = case(&mut tape, [0.0; 3], [1.0; 3]);
    for v in u {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    assert_eq!(case(&mut tape, [0.0; 3], [1.0, 1.0, 0.0]), [0.5, 0.5, 0.0]);
    // closed form e²/(e²+e³), e³/(e²+e³)
    let out = case(&mut tape, [1.0, 2.0, 3.0], [0.0, 1.0, 1.0]);
    assert_eq!(out[0], 0.0);
    assert!((out[1] - 0.268_941_421_369_995_1).abs() < 1e-15);
    assert!((out[2] - 0.731_058_578_630_004_8).abs() < 1e-15);
}

#[test]
fn masked_softmax_rejects_empty_row() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros([2, 2]));
    let mk = tape.constant(m(&[&[1.0, 0.0], &[0.0, 0.0]]));
    assert_eq!(
        tape.masked_softmax(l, mk).unwrap_err(),
        Error::DegenerateRow { row: 1 }
    );
}

fn mask_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<bool>)> {
    (1usize..6, 1usize..8).prop_flat_map(|(r, c)| {
        (
            Just(r),
            Just(c),
            prop::collection::vec(-30.0f64..30.0, r * c),
            prop::collection::vec(any::<bool>(), r * c),
        )
    })
}

proptest! {
    #[test]
    fn masked_softmax_rows_are_distributions((r, c, logits, bits) in mask_strategy()) {
        let mut mask: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        for row in 0..r {
            // guarantee one unmasked entry per row
            mask[row * c + row % c] = 1.0;
        }
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new([r, c], logits).unwrap());
        let mk = tape.constant(Tensor::new([r, c], mask.clone()).unwrap());
        let out = tape.masked_softmax(l, mk).unwrap();
        let y = tape.value(out);
        for row in 0..r {
            let s: f64 = y.row(row).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            for j in 0..c {
                if mask[row * c + j] == 0.0 {
                    prop_assert_eq!(y.at2(row, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn all_ones_mask_is_bitwise_softmax((r, c, logits, _bits) in mask_strategy()) {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new([r, c], logits).unwrap());
        let mk = tape.constant(Tensor::ones([r, c]));
        let a = tape.masked_softmax(l, mk).unwrap();
        let b = tape.softmax_rows(l).unwrap();
        prop_assert_eq!(tape.value(a).to_le_bytes(), tape.value(b).to_le_bytes());
    }
}

#[test]
fn layernorm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::ones([2]));
    let b = tape.constant(Tensor::zeros([2]));
    let x = tape.constant(m(&[&[3.0, 3.0], &[1.0, -1.0]]));
    let out = nn::layernorm(&mut tape, x, g, b, 1e-12).unwrap();
    let y = tape.value(out);
    assert_eq!(y.row(0), &[0.0, 0.0]);
    assert!((y.at2(1, 0) - 1.0).abs() < 1e-9 && (y.at2(1, 1) + 1.0).abs() < 1e-9);

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([1, 2]));
    let g = tape.constant(Tensor::ones([2]));
    let b = tape.constant(Tensor::zeros([2]));
    assert!(matches!(
        nn::layernorm(&mut tape, x, g, b, 0.0),
        Err(Error::Config(_))
    ));
}

#[test]
fn layernorm_gradient_matches_finite_differences() {
    let mut r = rng(3);
    let x = Tensor::randn([2, 4], 1.0, &mut r);
    let gamma = Tensor::randn([4], 1.0, &mut r);
    let beta = Tensor::randn([4], 1.0, &mut r);
    let err = fd_max_rel_err(
        |t, v| {
            let y = nn::layernorm(t, v[0], v[1], v[2], 1e-6).unwrap();
            weighted_sum(t, y)
        },
        &[x, gamma, beta],
        1e-5,
    );
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn gelu_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new([3], vec![0.0, 10.0, 1.0]).unwrap());
    let y = tape.gelu(x).unwrap();
    let y = tape.value(y).data();
    assert_eq!(y[0], 0.0);
    assert!((y[1] - 10.0).abs() < 1e-6);
    // Φ(1)·1 evaluated independently
    assert!((y[2] - 0.841_344_746_068_542_9).abs() < 1e-3);
}

#[test]
fn linear_examples_and_gradient() {
    let mut r = rng(11);
    let x = Tensor::randn([4, 3], 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(Tensor::eye(3));
    let b = tape.constant(Tensor::zeros([3]));
    let y = nn::linear(&mut tape, xv, w, b).unwrap();
    assert_eq!(tape.value(y), &x);

    let zero = tape.constant(Tensor::zeros([4, 3]));
    let w = tape.constant(Tensor::randn([3, 2], 1.0, &mut r));
    let bias = Tensor::new([2], vec![0.5, -1.5]).unwrap();
    let bv = tape.constant(bias.clone());
    let y = nn::linear(&mut tape, zero, w, bv).unwrap();
    for row in 0..4 {
        assert_eq!(tape.value(y).row(row), bias.data());
    }

    let w = Tensor::randn([3, 2], 1.0, &mut r);
    let b = Tensor::randn([2], 1.0, &mut r);
    let err = fd_max_rel_err(
        |t, v| {
            let y = nn::linear(t, v[0], v[1], v[2]).unwrap();
            weighted_sum(t, y)
        },
        &[x, w, b],
        1e-5,
    );
    assert!(err < 1e-6, "rel err {err}");
}

/// Direct sliding-window cross-correlation with zero padding.
fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, w) = x.dims3().unwrap();
    let s = k.shape();
    let (cout, ks) = (s[0], s[2]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for a in 0..ks {
                        for b in 0..ks {
                            let y = (oi * stride + a) as isize - pad as isize;
                            let xx = (oj * stride + b) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                acc += x.data()[(ci * h + y as usize) * w + xx as usize]
                                    * k.data()[((co * cin + ci) * ks + a) * ks + b];
                            }
                        }
                    }
                }
                out[(co * oh + oi) * ow + oj] = acc;
            }
        }
    }
    Tensor::new([cout, oh, ow], out).unwrap()
}

#[test]
fn conv2d_examples() {
    let mut r = rng(1);
    let x = Tensor::randn([2, 4, 5], 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    // identity: per-channel 1×1 kernel of value 1
    let mut eye = Tensor::zeros([2, 2, 1, 1]);
    eye.data_mut()[0] = 1.0;
    eye.data_mut()[3] = 1.0;
    let k = tape.constant(eye);
    let y = tape.conv2d(xv, k, ConvSpec::same(1)).unwrap();
    assert_eq!(tape.value(y), &x);

    let k = tape.constant(Tensor::zeros([3, 2, 3, 3]));
    let y = tape.conv2d(xv, k, ConvSpec::same(3)).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    assert_eq!(tape.shape(y), &[3, 4, 5]);

    let ramp = Tensor::new([1, 5, 5], (0..25).map(|v| v as f64).collect()).unwrap();
    let avg = Tensor::full([1, 1, 3, 3], 1.0 / 9.0);
    let rv = tape.constant(ramp.clone());
    let k = tape.constant(avg.clone());
    let y = tape.conv2d(rv, k, ConvSpec::same(3)).unwrap();
    let oracle = conv_oracle(&ramp, &avg, 1, 1);
    assert!(tape.value(y).max_abs_diff(&oracle) < 1e-12);
    // interior cell is the plain neighbourhood mean
    assert!((tape.value(y).data()[12] - 12.0).abs() < 1e-12);
}

#[test]
fn conv2d_strided_matches_oracle_and_gradient() {
    let mut r = rng(4);
    let x = Tensor::randn([2, 5, 6], 1.0, &mut r);
    let k = Tensor::randn([3, 2, 3, 3], 1.0, &mut r);
    let spec = ConvSpec { stride: 2, pad: 1 };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k.clone());
    let y = tape.conv2d(xv, kv, spec).unwrap();
    assert!(tape.value(y).max_abs_diff(&conv_oracle(&x, &k, 2, 1)) < 1e-12);

    let err = fd_max_rel_err(
        |t, v| {
            let y = t.conv2d(v[0], v[1], spec).unwrap();
            weighted_sum(t, y)
        },
        &[x, k],
        1e-5,
    );
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn conv2d_rejects_nonpositive_output() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([1, 2, 2]));
    let k = tape.constant(Tensor::zeros([1, 1, 5, 5]));
    assert!(matches!(
        tape.conv2d(x, k, ConvSpec { stride: 1, pad: 0 }),
        Err(Error::Shape { op: "conv2d", .. })
    ));
}

#[test]
fn max_rows_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(m(&[&[1.0, 5.0]]));
    let y = tape.max_rows(x).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 5.0]);

    let x = tape.constant(m(&[&[1.0, 5.0], &[3.0, 2.0]]));
    let y = tape.max_rows(x).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 5.0]);

    // subgradient oracle: one-hot at the argmax row of each column
    let mut tape = Tape::new();
    let x = tape.param(m(&[&[0.1, 0.9], &[0.7, -0.2], &[0.4, 0.3]]));
    let y = tape.max_rows(x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(
        tape.grad(x).unwrap().data(),
        &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]
    );
}

#[test]
fn max_rows_ties_route_to_lowest_row() {
    let mut tape = Tape::new();
    let x = tape.param(m(&[&[2.0], &[2.0]]));
    let y = tape.max_rows(x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0]);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), Tensor::ones([2, 3]));

    let g = tape.gelu(x).unwrap();
    let sq = tape.mul(g, g).unwrap();
    let z = tape.scale(sq, 0.0).unwrap();
    let s = tape.sum(z).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), Tensor::zeros([2, 3]));
}

#[test]
fn backward_rejects_detached_and_non_scalar() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::ones([2]));
    let s = tape.sum(c).unwrap();
    assert_eq!(tape.backward(s).unwrap_err(), Error::Detached);
    let p = tape.param(Tensor::ones([2]));
    assert_eq!(tape.backward(p).unwrap_err(), Error::NotScalar(vec![2]));
}

fn composite(t: &mut Tape, v: &[Var]) -> Var {
    let h = t.matmul(v[0], v[1]).unwrap();
    let a = t.softmax_rows(h).unwrap();
    let y = nn::layernorm(t, a, v[2], v[3], 1e-6).unwrap();
    weighted_sum(t, y)
}

fn composite_inputs(seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    vec![
        Tensor::randn([3, 4], 1.0, &mut r),
        Tensor::randn([4, 5], 1.0, &mut r),
        Tensor::randn([5], 1.0, &mut r),
        Tensor::randn([5], 1.0, &mut r),
    ]
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let err = fd_max_rel_err(composite, &composite_inputs(5), 1e-5);
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let vars: Vec<Var> = composite_inputs(5).into_iter().map(|t| tape.param(t)).collect();
        let out = composite(&mut tape, &vars);
        tape.backward(out).unwrap();
        vars.iter()
            .flat_map(|&v| tape.grad(v).unwrap().to_le_bytes())
            .collect::<Vec<u8>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_can_be_repeated() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::ones([3]));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), Tensor::ones([3]));
}

#[test]
fn every_differentiable_op_passes_finite_differences() {
    let mut r = rng(99);
    let a = Tensor::randn([3, 4], 1.0, &mut r);
    let b = Tensor::randn([3, 4], 1.0, &mut r);
    let row = Tensor::randn([4], 1.0, &mut r);
    let col = Tensor::randn([3], 1.0, &mut r);
    let pos = a.map(|v| v.abs() + 0.5);
    // keep relu inputs away from the kink
    let relu_in = a.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    let mask = Tensor::new([3, 4], (0..12).map(|i| if i % 3 == 1 { 0.0 } else { 1.0 }).collect()).unwrap();

    let st_ref = a.clone();
    type Case = (&'static str, Box<dyn Fn(&mut Tape, &[Var]) -> Var>, Vec<Tensor>);
    let cases: Vec<Case> = vec![
        ("transpose", Box::new(|t, v| { let y = t.transpose(v[0]).unwrap(); weighted_sum(t, y) }), vec![a.clone()]),
        ("add", Box::new(|t, v| { let y = t.add(v[0], v[1]).unwrap(); weighted_sum(t, y) }), vec![a.clone(), b.clone()]),
        ("sub", Box::new(|t, v| { let y = t.sub(v[0], v[1]).unwrap(); weighted_sum(t, y) }), vec![a.clone(), b.clone()]),
        ("mul", Box::new(|t, v| { let y = t.mul(v[0], v[1]).unwrap(); weighted_sum(t, y) }), vec![a.clone(), b.clone()]),
        ("add_row", Box::new(|t, v| { let y = t.add_row(v[0], v[1]).unwrap(); weighted_sum(t, y) }), vec![a.clone(), row.clone()]),
        ("mul_row", Box::new(|t, v| { let y = t.mul_row(v[0], v[1]).unwrap(); weighted_sum(t, y) }), vec![a.clone(), row.clone()]),
        ("add_col", Box::new(|t, v| { let y = t.add_col(v[0], v[1]).unwrap(); weighted_sum(t, y) }), vec![a.clone(), col.clone()]),
        ("mul_col", Box::new(|t, v| { let y = t.mul_col(v[0], v[1]).unwrap(); weighted_sum(t, y) }), vec![a.clone(), col.clone()]),
        ("scale", Box::new(|t, v| { let y = t.scale(v[0], -1.7).unwrap(); weighted_sum(t, y) }), vec![a.clone()]),
        ("add_scalar", Box::new(|t, v| { let y = t.add_scalar(v[0], 2.0).unwrap(); let y = t.mul(y, y).unwrap(); weighted_sum(t, y) }), vec![a.clone()]),
        ("reshape", Box::new(|t, v| { let y = t.reshape(v[0], [4, 3]).unwrap(); weighted_sum(t, y) }), vec![a.clone()]),
        ("slice_cols", Box::new(|t, v| { let y = t.slice_cols(v[0], 1, 3).unwrap(); weighted_sum(t, y) }), vec![a.clone()]),
        ("concat_cols", Box::new(|t, v| { let y = t.concat_cols(&[v[0], v[1]]).unwrap(); weighted_sum(t, y) }), vec![a.clone(), b.clone()]),
        ("concat_rows", Box::new(|t, v| { let y = t.concat_rows(&[v[0], v[1]]).unwrap(); weighted_sum(t, y) }), vec![a.clone(), b.clone()]),
        ("gather_rows", Box::new(|t, v| { let y = t.gather_rows(v[0], &[2, 0, 2]).unwrap(); weighted_sum(t, y) }), vec![a.clone()]),
        ("standardize", Box::new(|t, v| { let y = t.standardize_rows(v[0], 1e-6).unwrap(); weighted_sum(t, y) }), vec![a.clone()]),
        ("softmax", Box::new(|t, v| { let y = t.softmax_rows(v[0]).unwrap(); weighted_sum(t, y) }), vec![a.clone()]),
        ("masked_softmax", Box::new(|t, v| { let y = t.masked_softmax(v[0], v[1]).unwrap(); weighted_sum(t, y) }), vec![a.clone(), mask.clone()]),
        ("gelu", Box::new(|t, v| { let y = t.gelu(v[0]).unwrap(); weighted_sum(t, y) }), vec![a.clone()]),
        ("relu", Box::new(|t, v| { let y = t.relu(v[0]).unwrap(); weighted_sum(t, y) }), vec![relu_in]),
        ("sigmoid", Box::new(|t, v| { let y = t.sigmoid(v[0]).unwrap(); weighted_sum(t, y) }), vec![a.clone()]),
        ("ln", Box::new(|t, v| { let y = t.ln_clamped(v[0], 1e-12).unwrap(); weighted_sum(t, y) }), vec![pos]),
        ("max_rows", Box::new(|t, v| { let y = t.max_rows(v[0]).unwrap(); weighted_sum(t, y) }), vec![a.clone()]),
        ("mean_rows", Box::new(|t, v| { let y = t.mean_rows(v[0]).unwrap(); weighted_sum(t, y) }), vec![a.clone()]),
        ("straight_through", Box::new(move |t, v| {
            // frozen reference: the forward value varies as hard + (soft - ref)
            let hard = Tensor::new([3, 4], vec![1.0; 12]).unwrap();
            let y = t.straight_through(v[0], &hard, Some(&st_ref)).unwrap();
            let y = t.mul(y, v[0]).unwrap();
            weighted_sum(t, y)
        }), vec![a.clone()]),
    ];
    for (name, f, inputs) in cases {
        let err = fd_max_rel_err(f, &inputs, 1e-5);
        assert!(err <= 1e-4, "{name}: rel err {err}");
    }
}

#[test]
fn straight_through_forward_is_hard_value() {
    let mut tape = Tape::new();
    let soft = tape.param(m(&[&[0.3, 0.7]]));
    let hard = m(&[&[0.0, 1.0]]);
    let st = tape.straight_through(soft, &hard, None).unwrap();
    assert_eq!(tape.value(st), &hard);
    let r = m(&[&[0.3, 0.7]]);
    let st = tape.straight_through(soft, &hard, Some(&r)).unwrap();
    assert_eq!(tape.value(st), &hard);
}

#[test]
fn non_finite_results_are_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([2], 1e308));
    assert_eq!(
        tape.scale(x, 10.0).unwrap_err(),
        Error::NonFinite { op: "scale" }
    );
}
