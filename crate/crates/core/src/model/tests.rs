use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::{max_relative_error, numeric_gradient};
use crate::autodiff::{Activation, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn tiny(scales: usize) -> ModelConfig {
    ModelConfig {
        window_len: 8,
        feature_dim: 3,
        model_dim: 8,
        heads: 2,
        layers_per_scale: 1,
        ffn_dim: 16,
        scale_factors: ModelConfig::geometric_factors(scales),
        activation: Activation::Gelu,
        dropout: 0.0,
    }
}

/// Binds fresh random layer weights onto `tape`.
fn random_layer(tape: &mut Tape, rng: &mut ChaCha8Rng, d: usize, ffn: usize) -> LayerVars {
    let mut w = |shape: &[usize]| tape.leaf(rand_tensor(rng, shape));
    LayerVars {
        wq: w(&[d, d]),
        wk: w(&[d, d]),
        wv: w(&[d, d]),
        wo: w(&[d, d]),
        ln1_gain: w(&[d]),
        ln1_bias: w(&[d]),
        ffn_w1: w(&[d, ffn]),
        ffn_b1: w(&[ffn]),
        ffn_w2: w(&[ffn, d]),
        ffn_b2: w(&[d]),
        ln2_gain: w(&[d]),
        ln2_bias: w(&[d]),
    }
}

#[test]
fn positional_encoding_is_elementwise_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[1, 60, 8]);
    let p = rand_tensor(&mut rng, &[60, 8]);
    let mut tape = Tape::new();
    let (vx, vp) = (tape.leaf(x.clone()), tape.leaf(p.clone()));
    let zero_p = tape.leaf(Tensor::zeros(&[60, 8]));
    let zero_x = tape.leaf(Tensor::zeros(&[1, 60, 8]));
    let a = positional_encode(&mut tape, vx, zero_p).unwrap();
    assert_eq!(tape.value(a), &x);
    let b = positional_encode(&mut tape, zero_x, vp).unwrap();
    assert_eq!(tape.value(b).values(), p.values());
    let c = positional_encode(&mut tape, vx, vp).unwrap();
    assert_eq!(tape.shape(c), &[1, 60, 8]);
    let bad = tape.leaf(Tensor::zeros(&[30, 8]));
    assert!(matches!(
        positional_encode(&mut tape, vx, bad),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn attention_rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let h = tape.leaf(rand_tensor(&mut rng, &[3, 10, 8]));
    let l = random_layer(&mut tape, &mut rng, 8, 16);
    let out = self_attention(&mut tape, h, l.wq, l.wk, l.wv, l.wo, 2).unwrap();
    assert_eq!(tape.shape(out.output), &[3, 10, 8]);
    assert_eq!(out.attention.shape(), &[3, 2, 10, 10]);
    for row in out.attention.values().chunks(10) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn single_position_attention_is_value_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let h = tape.leaf(rand_tensor(&mut rng, &[1, 1, 8]));
    let l = random_layer(&mut tape, &mut rng, 8, 16);
    let out = self_attention(&mut tape, h, l.wq, l.wk, l.wv, l.wo, 2).unwrap();
    assert_eq!(out.attention.values(), &[1.0, 1.0]);
    let v = tape.matmul(h, l.wv).unwrap();
    let direct = tape.matmul(v, l.wo).unwrap();
    assert_eq!(tape.value(out.output).values(), tape.value(direct).values());
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, d) = (9, 8);
    let x = rand_tensor(&mut rng, &[1, t, d]);
    let mut perm: Vec<usize> = (0..t).collect();
    perm.reverse();
    perm.swap(0, 4);
    let permuted = Tensor::new(
        vec![1, t, d],
        perm.iter()
            .flat_map(|&r| x.values()[r * d..(r + 1) * d].to_vec())
            .collect(),
    )
    .unwrap();
    let mut tape = Tape::new();
    let l1 = random_layer(&mut tape, &mut rng, d, 16);
    let l2 = random_layer(&mut tape, &mut rng, d, 16);
    let run = |tape: &mut Tape, input: Var| {
        let h = encoder_layer(tape, input, &l1, 2, Activation::Gelu, None).unwrap();
        encoder_layer(tape, h, &l2, 2, Activation::Gelu, None).unwrap()
    };
    let vx = tape.leaf(x);
    let vp = tape.leaf(permuted);
    let a = run(&mut tape, vx);
    let b = run(&mut tape, vp);
    let (ya, yb) = (
        tape.value(a).values().to_vec(),
        tape.value(b).values().to_vec(),
    );
    for (i, &src) in perm.iter().enumerate() {
        for j in 0..d {
            assert!((yb[i * d + j] - ya[src * d + j]).abs() < 1e-10);
        }
    }
}

#[test]
fn encoder_with_zero_weights_is_double_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 6;
    let x = rand_tensor(&mut rng, &[2, 5, d]);
    let mut tape = Tape::new();
    let zero = |tape: &mut Tape, s: &[usize]| tape.leaf(Tensor::zeros(s));
    let l = LayerVars {
        wq: zero(&mut tape, &[d, d]),
        wk: zero(&mut tape, &[d, d]),
        wv: zero(&mut tape, &[d, d]),
        wo: zero(&mut tape, &[d, d]),
        ln1_gain: tape.leaf(Tensor::ones(&[d])),
        ln1_bias: zero(&mut tape, &[d]),
        ffn_w1: zero(&mut tape, &[d, 12]),
        ffn_b1: zero(&mut tape, &[12]),
        ffn_w2: zero(&mut tape, &[12, d]),
        ffn_b2: zero(&mut tape, &[d]),
        ln2_gain: tape.leaf(Tensor::ones(&[d])),
        ln2_bias: zero(&mut tape, &[d]),
    };
    let vx = tape.leaf(x);
    let y = encoder_layer(&mut tape, vx, &l, 3, Activation::Relu, None).unwrap();
    assert_eq!(tape.shape(y), &[2, 5, d]);
    let once = tape
        .layer_norm(vx, l.ln1_gain, l.ln1_bias, LAYER_NORM_EPS)
        .unwrap();
    let twice = tape
        .layer_norm(once, l.ln2_gain, l.ln2_bias, LAYER_NORM_EPS)
        .unwrap();
    assert!(tape.value(y).max_abs_diff(tape.value(twice)) < 1e-12);
}

#[test]
fn encoder_input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[1, 5, 4]);
    let wseed = 77;
    let build = |tape: &mut Tape, x: Var| {
        let mut wrng = ChaCha8Rng::seed_from_u64(wseed);
        let l = random_layer(tape, &mut wrng, 4, 8);
        let y = encoder_layer(tape, x, &l, 2, Activation::Gelu, None).unwrap();
        let w = tape.constant(rand_tensor(&mut wrng, &[1, 5, 4]));
        let p = tape.mul(y, w).unwrap();
        tape.sum(p)
    };
    let mut tape = Tape::new();
    let vx = tape.leaf(x.clone().with_requires_grad());
    let loss = build(&mut tape, vx);
    let grads = tape.backward(loss).unwrap();
    let numeric = numeric_gradient(
        |ts| {
            let mut t = Tape::new();
            let v = t.leaf(ts[0].clone());
            let l = build(&mut t, v);
            t.value(l).item()
        },
        &[x],
        0,
        1e-5,
    );
    assert!(max_relative_error(grads.get(vx).unwrap(), &numeric, 1e-4) < 1e-6);
}

#[test]
fn scale_inputs_follow_ceiling_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[1, 60, 3]);
    let mut tape = Tape::new();
    let vx = tape.leaf(x.clone());
    let scales = build_scale_inputs(&mut tape, vx, &[1, 2, 4]).unwrap();
    let lens: Vec<usize> = scales.iter().map(|&s| tape.shape(s)[1]).collect();
    assert_eq!(lens, vec![60, 30, 15]);
    assert_eq!(tape.value(scales[0]), &x);

    // linear ramp: pooled values equal pairwise means
    let ramp = Tensor::new(
        vec![1, 8, 1],
        (0..8).map(|v| 3.0 * v as f64 + 1.0).collect(),
    )
    .unwrap();
    let vr = tape.leaf(ramp.clone());
    let pooled = build_scale_inputs(&mut tape, vr, &[1, 2]).unwrap();
    for (j, v) in tape.value(pooled[1]).values().iter().enumerate() {
        let expect = (ramp.values()[2 * j] + ramp.values()[2 * j + 1]) / 2.0;
        assert_eq!(*v, expect);
    }

    let short = tape.leaf(Tensor::zeros(&[1, 3, 1]));
    assert!(matches!(
        build_scale_inputs(&mut tape, short, &[1, 2, 4]),
        Err(Error::Data(_))
    ));
}

#[test]
fn alignment_identity_and_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 5;
    let mut eye = Tensor::zeros(&[d, d]);
    for i in 0..d {
        eye.values_mut()[i * d + i] = 1.0;
    }
    let h = rand_tensor(&mut rng, &[2, 12, d]);
    let mut tape = Tape::new();
    let (vh, vi, vz) = (
        tape.leaf(h.clone()),
        tape.leaf(eye),
        tape.leaf(Tensor::zeros(&[d])),
    );
    let same = align_scale(&mut tape, vh, vi, vz, 12).unwrap();
    assert_eq!(tape.value(same), &h);
    for t_s in [12, 6, 3, 1] {
        let hs = tape.leaf(rand_tensor(&mut rng, &[2, t_s, d]));
        let w = tape.leaf(rand_tensor(&mut rng, &[d, d]));
        let a = align_scale(&mut tape, hs, w, vz, 12).unwrap();
        assert_eq!(tape.shape(a), &[2, 12, d]);
    }
}

#[test]
fn alignment_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![
        rand_tensor(&mut rng, &[2, 3, 4]),
        rand_tensor(&mut rng, &[4, 4]),
        rand_tensor(&mut rng, &[4]),
    ];
    let weights = rand_tensor(&mut rng, &[2, 8, 4]);
    let build = |tape: &mut Tape, v: &[Var]| {
        let a = align_scale(tape, v[0], v[1], v[2], 8).unwrap();
        let w = tape.constant(weights.clone());
        let p = tape.mul(a, w).unwrap();
        tape.sum(p)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad()))
        .collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    for i in 0..3 {
        let numeric = numeric_gradient(
            |ts| {
                let mut t = Tape::new();
                let v: Vec<Var> = ts.iter().map(|x| t.leaf(x.clone())).collect();
                let l = build(&mut t, &v);
                t.value(l).item()
            },
            &inputs,
            i,
            1e-5,
        );
        assert!(max_relative_error(grads.get(vars[i]).unwrap(), &numeric, 1e-4) < 1e-6);
    }
}

#[test]
fn fusion_single_scale_and_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let h = rand_tensor(&mut rng, &[2, 6, 4]);
    let mut tape = Tape::new();
    let vh = tape.leaf(h.clone());
    let w = tape.leaf(rand_tensor(&mut rng, &[4, 4]));
    let v = tape.leaf(rand_tensor(&mut rng, &[4, 1]));
    let one = fuse_scales(&mut tape, &[vh], w, v).unwrap();
    assert_eq!(tape.value(one.weights).values(), &[1.0, 1.0]);
    assert_eq!(tape.value(one.fused), &h);

    let three = fuse_scales(&mut tape, &[vh, vh, vh], w, v).unwrap();
    for a in tape.value(three.weights).values() {
        assert!((a - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!(matches!(
        fuse_scales(&mut tape, &[], w, v),
        Err(Error::Contract(_))
    ));
}

#[test]
fn fusion_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (t, d) = (5, 3);
    let h1 = rand_tensor(&mut rng, &[1, t, d]);
    let h2 = rand_tensor(&mut rng, &[1, t, d]);
    let wm = rand_tensor(&mut rng, &[d, d]);
    let wv = rand_tensor(&mut rng, &[d, 1]);
    let mut tape = Tape::new();
    let vars = [h1.clone(), h2.clone(), wm.clone(), wv.clone()].map(|x| tape.leaf(x));
    let f = fuse_scales(&mut tape, &vars[..2], vars[2], vars[3]).unwrap();

    // scalar path: score_s = mean_t Σ_i w_i tanh(Σ_j W_ij h_tj)
    let score = |h: &Tensor| {
        let mut total = 0.0;
        for step in 0..t {
            for i in 0..d {
                let z: f64 = (0..d).map(|j| wm.at(&[i, j]) * h.at(&[0, step, j])).sum();
                total += wv.values()[i] * z.tanh();
            }
        }
        total / t as f64
    };
    let (s1, s2) = (score(&h1), score(&h2));
    let a1 = s1.exp() / (s1.exp() + s2.exp());
    let a2 = 1.0 - a1;
    let w = tape.value(f.weights).values();
    assert!((w[0] - a1).abs() < 1e-12 && (w[1] - a2).abs() < 1e-12);
    let fused = tape.value(f.fused).values();
    for i in 0..t * d {
        let expect = a1 * h1.values()[i] + a2 * h2.values()[i];
        assert!((fused[i] - expect).abs() < 1e-10);
    }
}

#[test]
fn fusion_is_linear_in_each_scale_for_fixed_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let hs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[1, 4, 3])).collect();
    let delta = rand_tensor(&mut rng, &[1, 4, 3]);
    let mut tape = Tape::new();
    let w = tape.leaf(rand_tensor(&mut rng, &[3, 3]));
    let v = tape.leaf(rand_tensor(&mut rng, &[3, 1]));
    let vars: Vec<Var> = hs.iter().map(|h| tape.leaf(h.clone())).collect();
    let base = fuse_scales(&mut tape, &vars, w, v).unwrap();
    let a = tape.value(base.weights).values().to_vec();

    // recombine with the frozen weights after perturbing scale 1 only
    let d = tape_leaf(&mut tape, &delta);
    let bumped = tape.add(vars[1], d).unwrap();
    let mut fused = None;
    for (s, &h) in [vars[0], bumped, vars[2]].iter().enumerate() {
        let coef = tape.constant(Tensor::scalar(a[s]));
        let term = tape.mul_batch_scalar(h, coef).unwrap();
        fused = Some(match fused {
            None => term,
            Some(acc) => tape.add(acc, term).unwrap(),
        });
    }
    let change: Vec<f64> = tape
        .value(fused.unwrap())
        .values()
        .iter()
        .zip(tape.value(base.fused).values())
        .map(|(x, y)| x - y)
        .collect();
    for (c, dv) in change.iter().zip(delta.values()) {
        assert!((c - a[1] * dv).abs() < 1e-12);
    }
}

fn tape_leaf(tape: &mut Tape, t: &Tensor) -> Var {
    tape.leaf(t.clone())
}

#[test]
fn fusion_weights_are_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params = ModelParams::init(&tiny(3), 1).unwrap();
    for _ in 0..50 {
        let x = rand_tensor(&mut rng, &[8, 3]);
        let pred = params.forward(&x).unwrap();
        assert_eq!(pred.scale_weights.len(), 3);
        assert!((pred.scale_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(pred.scale_weights.iter().all(|&a| a > 0.0));
    }
}

#[test]
fn forward_head_degenerate_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut params = ModelParams::init(&tiny(2), 2).unwrap();
    let x = rand_tensor(&mut rng, &[8, 3]);
    let p = params.forward(&x).unwrap();
    assert!(p.score > 0.0 && p.score < 1.0);
    assert_eq!(
        p.score.to_bits(),
        params.forward(&x).unwrap().score.to_bits()
    );

    params
        .get_mut("head.weight")
        .unwrap()
        .values_mut()
        .fill(0.0);
    params.get_mut("head.bias").unwrap().values_mut()[0] = 0.3;
    let s = params.forward(&x).unwrap().score;
    assert!((s - 1.0 / (1.0 + (-0.3f64).exp())).abs() < 1e-15);

    let wrong = Tensor::zeros(&[7, 3]);
    assert!(matches!(params.forward(&wrong), Err(Error::Shape { .. })));
}

#[test]
fn batch_scoring_matches_single_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let params = ModelParams::init(&tiny(3), 3).unwrap();
    let flat = rand_tensor(&mut rng, &[5, 8, 3]);
    let batched = params.score_windows(flat.values(), 2).unwrap();
    for (i, s) in batched.iter().enumerate() {
        let w = Tensor::new(vec![8, 3], flat.values()[i * 24..(i + 1) * 24].to_vec()).unwrap();
        assert!((params.forward(&w).unwrap().score - s).abs() < 1e-14);
    }
}

#[test]
fn single_scale_model_equals_plain_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let cfg = tiny(1);
    let mut params = ModelParams::init(&cfg, 4).unwrap();
    let d = cfg.model_dim;
    let eye = params.get_mut("scale0.align.weight").unwrap();
    eye.values_mut().fill(0.0);
    for i in 0..d {
        eye.values_mut()[i * d + i] = 1.0;
    }
    params
        .get_mut("scale0.align.bias")
        .unwrap()
        .values_mut()
        .fill(0.0);
    let x = rand_tensor(&mut rng, &[8, 3]);
    let multiscale = params.forward(&x).unwrap().score;

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let ix = params.index().clone();
    let vx = tape.leaf(x.reshape(vec![1, 8, 3]).unwrap());
    let e = tape.matmul(vx, vars[ix.input_w]).unwrap();
    let e = tape.add_broadcast(e, vars[ix.input_b]).unwrap();
    let mut h = tape.add_broadcast(e, vars[ix.scales[0].pos]).unwrap();
    for layer in &ix.scales[0].layers {
        let lv = LayerVars {
            wq: vars[layer.wq],
            wk: vars[layer.wk],
            wv: vars[layer.wv],
            wo: vars[layer.wo],
            ln1_gain: vars[layer.ln1_gain],
            ln1_bias: vars[layer.ln1_bias],
            ffn_w1: vars[layer.ffn_w1],
            ffn_b1: vars[layer.ffn_b1],
            ffn_w2: vars[layer.ffn_w2],
            ffn_b2: vars[layer.ffn_b2],
            ln2_gain: vars[layer.ln2_gain],
            ln2_bias: vars[layer.ln2_bias],
        };
        h = encoder_layer(&mut tape, h, &lv, cfg.heads, cfg.activation, None).unwrap();
    }
    let plain = detection_head(&mut tape, h, vars[ix.head_w], vars[ix.head_b]).unwrap();
    assert!((tape.value(plain).item() - multiscale).abs() < 1e-10);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params = ModelParams::init(&tiny(2), 5).unwrap();
    let x = rand_tensor(&mut rng, &[2, 8, 3]);
    let audit = audit_gradients(&params, &x, &[1.0, 0.0], 1e-4, 1e-6).unwrap();
    assert_eq!(audit.len(), params.len());
    for a in &audit {
        assert!(a.max_rel_error < 1e-3, "{}: {:e}", a.name, a.max_rel_error);
    }
}

#[test]
fn dropout_only_acts_in_training_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut cfg = tiny(2);
    cfg.dropout = 0.3;
    let params = ModelParams::init(&cfg, 6).unwrap();
    let x = rand_tensor(&mut rng, &[2, 8, 3]);
    let eval = |rng: Option<&mut ChaCha8Rng>| {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let vx = tape.leaf(x.clone());
        let pass = params.forward_batch(&mut tape, &vars, vx, rng).unwrap();
        tape.value(pass.scores).values().to_vec()
    };
    assert_eq!(eval(None), eval(None));
    let mut drng = ChaCha8Rng::seed_from_u64(1);
    assert_ne!(eval(None), eval(Some(&mut drng)));
}
