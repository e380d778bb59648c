use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck;
use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

#[test]
fn add_componentwise() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t64(&[2], &[1.0, 2.0]));
    let b = tape.constant(t64(&[2], &[3.0, 4.0]));
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn softplus_at_zero_is_ln2() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t64(&[1], &[0.0]));
    let s = tape.softplus(a);
    assert!((tape.value(s).data()[0] - 2f64.ln()).abs() < 1e-15);
    let mut t32 = Tape::<f32>::new();
    let a = t32.constant(Tensor::from_f64([1], &[0.0]).unwrap());
    let s = t32.softplus(a);
    assert!((t32.value(s).data()[0] - 0.693_147_2).abs() < 1e-6);
}

#[test]
fn silu_gradient_matches_finite_difference() {
    let x = t64(&[1], &[1.0]);
    let r = gradcheck::check(
        &[x],
        |t, v| {
            let y = t.silu(v[0]);
            Ok(t.sum(y))
        },
        1e-5,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err() < 1e-6, "{r:?}");
}

#[test]
fn binary_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([4]));
    assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[3, 3]);
    let mut tape = Tape::<f64>::new();
    let i = tape.constant(t64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let xv = tape.constant(x.clone());
    let y = tape.matmul(i, xv).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            for l in 0..k {
                out[i * p + j] += a[i * k + l] * b[l * p + j];
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let expect = naive_matmul(a.data(), b.data(), 3, 4, 2);
    let mut tape = Tape::<f64>::new();
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(av, bv).unwrap();
    for (x, y) in tape.value(c).data().iter().zip(&expect) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn batched_matmul_broadcasts_leading_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 1, 3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4, 2]);
    let mut tape = Tape::<f64>::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(av, bv).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 3, 2]);
    for i in 0..2 {
        for j in 0..3 {
            let expect = naive_matmul(&a.data()[i * 12..(i + 1) * 12], &b.data()[j * 8..(j + 1) * 8], 3, 4, 2);
            let off = (i * 3 + j) * 6;
            for (x, y) in tape.value(c).data()[off..off + 6].iter().zip(&expect) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }
    let r = gradcheck::check(
        &[a, b],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        },
        1e-5,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err() < 1e-6, "{r:?}");
}

#[test]
fn matmul_inner_mismatch() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([4, 2]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradient_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[2, 3]);
    let b = rand_tensor(&mut rng, &[3, 2]);
    let r = gradcheck::check(
        &[a, b],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.silu(y);
            Ok(t.sum(y))
        },
        1e-5,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err() < 1e-6, "{r:?}");
}

fn layer_norm_of(x: Tensor<f64>) -> Vec<f64> {
    let d = x.last_dim();
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full([d], 1.0));
    let b = tape.constant(Tensor::zeros([d]));
    let y = tape.layer_norm(xv, g, b, 1e-12).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn layer_norm_examples() {
    assert_eq!(layer_norm_of(t64(&[3], &[5.0, 5.0, 5.0])), vec![0.0, 0.0, 0.0]);
    let y = layer_norm_of(t64(&[2], &[1.0, 3.0]));
    assert!((y[0] + 1.0).abs() < 1e-9 && (y[1] - 1.0).abs() < 1e-9);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([2, 0]));
    let g = tape.constant(Tensor::zeros([0]));
    assert!(matches!(tape.layer_norm(x, g, g, 1e-5), Err(Error::Dimension(_))));
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 5]);
    let g = rand_tensor(&mut rng, &[5]);
    let b = rand_tensor(&mut rng, &[5]);
    let w = rand_tensor(&mut rng, &[3, 5]);
    let r = gradcheck::check(
        &[x, g, b],
        move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let wv = t.constant(w.clone());
            let y = t.mul(y, wv)?;
            Ok(t.sum(y))
        },
        1e-5,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err() < 1e-5, "{r:?}");
}

fn conv(x: &[f64], w: &[f64], d: usize) -> Vec<f64> {
    let l = x.len() / d;
    let k = w.len() / d;
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(t64(&[1, l, d], x));
    let wv = tape.constant(t64(&[d, k], w));
    let y = tape.depthwise_conv1d(xv, wv).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn depthwise_conv_examples() {
    assert_eq!(conv(&[1.0, 2.0, 3.0], &[1.0], 1), vec![1.0, 2.0, 3.0]);
    assert_eq!(conv(&[1.0, 2.0, 3.0], &[1.0, 1.0], 1), vec![1.0, 3.0, 5.0]);
    // k > L is zero-padded
    assert_eq!(conv(&[1.0, 2.0], &[5.0, 0.0, 1.0, 1.0], 1), vec![1.0, 3.0]);
}

#[test]
fn depthwise_conv_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[1, 10, 3]);
    let w = rand_tensor(&mut rng, &[3, 4]);
    let base = conv(x.data(), w.data(), 3);
    let mut xp = x.clone();
    for c in 0..3 {
        xp.data_mut()[5 * 3 + c] += 1.5;
    }
    let pert = conv(xp.data(), w.data(), 3);
    assert_eq!(&base[..15], &pert[..15]);
    assert_ne!(&base[15..18], &pert[15..18]);
}

#[test]
fn depthwise_conv_channel_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 4, 3]));
    let w = tape.constant(Tensor::zeros([2, 4]));
    assert!(matches!(tape.depthwise_conv1d(x, w), Err(Error::Dimension(_))));
}

#[test]
fn loss_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2], &[0.3, -1.0]));
    let m = tape.mse(x, x).unwrap();
    assert_eq!(tape.value(m).data()[0], 0.0);
    let p = tape.constant(t64(&[2], &[0.0, 2.0]));
    let z = tape.constant(t64(&[2], &[0.0, 0.0]));
    let m = tape.mse(p, z).unwrap();
    assert_eq!(tape.value(m).data()[0], 2.0);
    let logits = tape.constant(Tensor::full([3, 10], 0.25));
    let ce = tape.cross_entropy(logits, &[0, 4, 9]).unwrap();
    assert!((tape.value(ce).data()[0] - 10f64.ln()).abs() < 1e-12);
    assert!(matches!(tape.cross_entropy(logits, &[0, 4, 10]), Err(Error::Input(_))));
}

#[test]
fn cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = rand_tensor(&mut rng, &[4, 5]);
    let r = gradcheck::check(&[logits], |t, v| t.cross_entropy(v[0], &[0, 3, 4, 1]), 1e-5, None).unwrap();
    assert!(r.max_rel_err() < 1e-6, "{r:?}");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::full([2, 3, 2], 0.7));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_accumulates_across_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut tape = Tape::<f64>::new();
    let w = tape.param(rand_tensor(&mut rng, &[3, 2]));
    let x = tape.constant(rand_tensor(&mut rng, &[4, 3]));
    let y = tape.constant(rand_tensor(&mut rng, &[4, 2]));
    let p = tape.matmul(x, w).unwrap();
    let loss = tape.mse(p, y).unwrap();
    tape.backward(loss).unwrap();
    let once = tape.grad(w).unwrap().clone();
    tape.backward(loss).unwrap();
    let twice = tape.grad(w).unwrap();
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
    tape.zero_grads();
    assert!(tape.grad(w).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::zeros([2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn mse_of_linear_map_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = rand_tensor(&mut rng, &[3, 2]);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let y = rand_tensor(&mut rng, &[4, 2]);
    let r = gradcheck::check(
        &[w, x],
        move |t, v| {
            let p = t.matmul(v[1], v[0])?;
            let yv = t.constant(y.clone());
            t.mse(p, yv)
        },
        1e-5,
        None,
    )
    .unwrap();
    assert!(r.max_rel_err() < 1e-5, "{r:?}");
}

/// Every differentiable op against central differences over 10 seeds.
#[test]
fn randomized_finite_difference_sweep() {
    type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("add-broadcast", vec![vec![2, 3, 4], vec![4]], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        })),
        ("sub-broadcast", vec![vec![2, 1, 4], vec![3, 1]], Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            let y = t.exp(y);
            Ok(t.mean(y))
        })),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            Ok(t.sum(y))
        })),
        ("neg-scale", vec![vec![5]], Box::new(|t, v| {
            let y = t.neg(v[0]);
            let y = t.scale(y, 0.3);
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        })),
        ("softplus-sigmoid", vec![vec![6]], Box::new(|t, v| {
            let a = t.softplus(v[0]);
            let b = t.sigmoid(v[0]);
            let y = t.mul(a, b)?;
            Ok(t.sum(y))
        })),
        ("silu", vec![vec![2, 5]], Box::new(|t, v| {
            let y = t.silu(v[0]);
            let y = t.mul(y, y)?;
            Ok(t.mean(y))
        })),
        ("mean-axis", vec![vec![2, 3, 4]], Box::new(|t, v| {
            let y = t.mean_axis(v[0], 1)?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        })),
        ("conv1d", vec![vec![2, 6, 3], vec![3, 4]], Box::new(|t, v| {
            let y = t.depthwise_conv1d(v[0], v[1])?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        })),
        ("permute-narrow-reshape", vec![vec![2, 4, 3]], Box::new(|t, v| {
            let y = t.permute_seq(v[0], &[3, 1, 0, 2, 1])?;
            let y = t.narrow(y, 1, 1, 3)?;
            let y = t.reshape(y, &[2, 9])?;
            let y = t.silu(y);
            Ok(t.sum(y))
        })),
        ("gather-rows", vec![vec![4, 3]], Box::new(|t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2, 3])?;
            let y = t.mul(y, y)?;
            Ok(t.sum(y))
        })),
        ("layer-norm", vec![vec![3, 4], vec![4], vec![4]], Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let y = t.silu(y);
            Ok(t.sum(y))
        })),
        ("mse", vec![vec![3, 2], vec![3, 2]], Box::new(|t, v| t.mse(v[0], v[1]))),
        ("cross-entropy", vec![vec![3, 4]], Box::new(|t, v| t.cross_entropy(v[0], &[1, 0, 3]))),
    ];
    for (name, shapes, build) in &cases {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let inputs: Vec<_> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            let r = gradcheck::check(&inputs, build, 1e-5, None).unwrap();
            assert!(r.max_rel_err() <= 1e-4, "{name} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn deterministic_outputs_and_grads() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::<f32>::new();
        let w = tape.param(rand_tensor(&mut rng, &[16, 8]).cast());
        let x = tape.constant(rand_tensor(&mut rng, &[4, 5, 16]).cast());
        let y = tape.matmul(x, w).unwrap();
        let y = tape.silu(y);
        let l = tape.mean(y);
        tape.backward(l).unwrap();
        (tape.value(y).clone(), tape.grad(w).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

proptest! {
    #[test]
    fn broadcast_matches_pre_expanded(rows in 1usize..4, cols in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[2, rows, cols]);
        let b = rand_tensor(&mut rng, &[rows, 1]);
        let expanded = b.expand(&[2, rows, cols]).unwrap();
        let mut tape = Tape::<f64>::new();
        let (av, bv, ev) = (tape.constant(a), tape.constant(b), tape.constant(expanded));
        let x = tape.mul(av, bv).unwrap();
        let y = tape.mul(av, ev).unwrap();
        prop_assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn tensor_shape_invariant(dims in proptest::collection::vec(1usize..4, 0..4)) {
        let n: usize = dims.iter().product();
        prop_assert!(Tensor::<f32>::new(dims.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::<f32>::new(dims, vec![0.0; n + 1]).is_err());
    }
}
