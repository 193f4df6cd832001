use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct nested-loop cross-correlation with zero padding.
fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (oc, icg, k, _) = w.dims4().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let opg = oc / groups;
    let mut out = Tensor::zeros(&[n, oc, oh, ow]);
    for b in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[o]);
                    for j in 0..icg {
                        let ic = (o / opg) * icg + j;
                        assert!(ic < c);
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at4(o, j, ky, kx) * x.at4(b, ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.data_mut()[((b * oc + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_sum_of_ones() {
    let g = Graph::<f64>::inference();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(&x, &w, &b, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data()[0], 9.0);
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = Graph::<f64>::inference();
    let xt = rand_tensor(&mut rng, &[1, 1, 5, 4]);
    let mut wt = Tensor::zeros(&[1, 1, 3, 3]);
    wt.data_mut()[4] = 1.0;
    let y = g
        .conv2d(
            &g.constant(xt.clone()),
            &g.constant(wt),
            &g.constant(Tensor::zeros(&[1])),
            1,
            1,
        )
        .unwrap();
    assert_eq!(y.value().data(), xt.data());
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
        let xt = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let wt = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let bt = rand_tensor(&mut rng, &[3]);
        let g = Graph::<f64>::inference();
        let y = g
            .conv2d(
                &g.constant(xt.clone()),
                &g.constant(wt.clone()),
                &g.constant(bt.clone()),
                stride,
                pad,
            )
            .unwrap();
        let want = naive_conv(&xt, &wt, Some(bt.data()), stride, pad, 1);
        assert_eq!(y.shape(), want.shape());
        assert!(y.value().max_abs_diff(&want) < 1e-6);
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let g = Graph::<f64>::inference();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(matches!(g.conv2d(&x, &w, &b, 1, 1), Err(Error::Shape(_))));
}

#[test]
fn depthwise_identity_and_isolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xt = rand_tensor(&mut rng, &[1, 2, 4, 4]);
    let mut wt = Tensor::zeros(&[2, 1, 3, 3]);
    wt.data_mut()[4] = 1.0;
    wt.data_mut()[9 + 4] = 1.0;
    let g = Graph::<f64>::inference();
    let y = g
        .depthwise_conv2d(&g.constant(xt.clone()), &g.constant(wt.clone()), 1)
        .unwrap();
    assert_eq!(y.value().data(), xt.data());

    // zero the kernel of channel 1
    for v in &mut wt.data_mut()[9..] {
        *v = 0.0;
    }
    let y = g
        .depthwise_conv2d(&g.constant(xt.clone()), &g.constant(wt), 1)
        .unwrap();
    assert!(y.data()[16..].iter().all(|&v| v == 0.0));
    assert_eq!(&y.data()[..16], &xt.data()[..16]);
}

#[test]
fn depthwise_matches_grouped_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..5 {
        let c = 1 + seed % 3;
        let xt = rand_tensor(&mut rng, &[2, c, 6, 5]);
        let wt = rand_tensor(&mut rng, &[c, 1, 3, 3]);
        let g = Graph::<f64>::inference();
        let y = g
            .depthwise_conv2d(&g.constant(xt.clone()), &g.constant(wt.clone()), 1)
            .unwrap();
        let want = naive_conv(&xt, &wt, None, 1, 1, c);
        assert!(y.value().max_abs_diff(&want) < 1e-6);
    }
}

#[test]
fn depthwise_rejects_channel_mismatch() {
    let g = Graph::<f64>::inference();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
    assert!(matches!(
        g.depthwise_conv2d(&x, &w, 1),
        Err(Error::Shape(_))
    ));
}

#[test]
fn layer_norm_cases() {
    let g = Graph::<f64>::inference();
    let ones = g.constant(Tensor::full(&[3], 1.0));
    let zeros = g.constant(Tensor::zeros(&[3]));
    let c = g.constant(Tensor::full(&[1, 3, 2, 2], 0.7));
    let y = g.layer_norm(&c, &ones, &zeros, 1e-5).unwrap();
    assert!(y.data().iter().all(|&v| v.abs() < 1e-9));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = g.constant(rand_tensor(&mut rng, &[2, 3, 2, 2]));
    let b = g.constant(Tensor::from_f64(&[3], &[0.1, -0.2, 0.3]).unwrap());
    let y = g.layer_norm(&x, &zeros, &b, 1e-5).unwrap();
    for (i, v) in y.data().iter().enumerate() {
        assert_eq!(*v, [0.1, -0.2, 0.3][(i / 4) % 3]);
    }

    // pre-affine statistics
    let y = g.layer_norm(&x, &ones, &zeros, 1e-12).unwrap();
    for b in 0..2 {
        for p in 0..4 {
            let vals: Vec<f64> = (0..3).map(|c| y.data()[(b * 3 + c) * 4 + p]).collect();
            let mean = vals.iter().sum::<f64>() / 3.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
    assert!(matches!(
        g.layer_norm(&x, &ones, &zeros, 0.0),
        Err(Error::Param(_))
    ));
}

#[test]
fn linear_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = Graph::<f64>::inference();
    let xt = rand_tensor(&mut rng, &[4, 3]);
    let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let y = g
        .linear(
            &g.constant(xt.clone()),
            &g.constant(eye),
            &g.constant(Tensor::zeros(&[3])),
        )
        .unwrap();
    assert_eq!(y.value().data(), xt.data());

    let bias = Tensor::from_f64(&[2], &[0.5, -1.5]).unwrap();
    let y = g
        .linear(
            &g.constant(xt.clone()),
            &g.constant(Tensor::zeros(&[2, 3])),
            &g.constant(bias),
        )
        .unwrap();
    for r in 0..4 {
        assert_eq!(&y.data()[r * 2..r * 2 + 2], &[0.5, -1.5]);
    }

    // naive matmul oracle
    let wt = rand_tensor(&mut rng, &[5, 3]);
    let bt = rand_tensor(&mut rng, &[5]);
    let y = g
        .linear(
            &g.constant(xt.clone()),
            &g.constant(wt.clone()),
            &g.constant(bt.clone()),
        )
        .unwrap();
    for r in 0..4 {
        for j in 0..5 {
            let mut acc = bt.data()[j];
            for f in 0..3 {
                acc += wt.data()[j * 3 + f] * xt.data()[r * 3 + f];
            }
            assert!((y.data()[r * 5 + j] - acc).abs() < 1e-6);
        }
    }
    let bad = g.linear(
        &g.constant(xt),
        &g.constant(Tensor::zeros(&[2, 4])),
        &g.constant(Tensor::zeros(&[2])),
    );
    assert!(matches!(bad, Err(Error::Shape(_))));
}

#[test]
fn silu_values() {
    let g = Graph::<f64>::inference();
    let x = g.constant(Tensor::from_f64(&[3], &[0.0, 50.0, 1.0]).unwrap());
    let y = g.silu(&x).unwrap();
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 50.0).abs() < 1e-9);
    assert!((y.data()[2] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
    assert!((y.data()[2] - 0.731059).abs() < 1e-6);
}

#[test]
fn softmax_values() {
    let g = Graph::<f64>::inference();
    let y = g.softmax(&g.constant(Tensor::full(&[4], 2.0)), 0).unwrap();
    assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let y = g
        .softmax(
            &g.constant(Tensor::from_f64(&[2], &[1000.0, 0.0]).unwrap()),
            0,
        )
        .unwrap();
    assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] < 1e-300);
    let y = g
        .softmax(
            &g.constant(Tensor::from_f64(&[2], &[0.0, 3f64.ln()]).unwrap()),
            0,
        )
        .unwrap();
    assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
    let bad = g.softmax(
        &g.constant(Tensor::from_f64(&[2], &[f64::NAN, 0.0]).unwrap()),
        0,
    );
    assert!(matches!(bad, Err(Error::NonFinite(_))));
}

#[test]
fn primitives_reject_non_finite_results() {
    let g = Graph::<f64>::inference();
    let x = g.constant(Tensor::from_f64(&[1], &[1000.0]).unwrap());
    assert!(matches!(g.exp(&x), Err(Error::NonFinite(_))));
}

#[test]
fn backward_sum_and_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xt = rand_tensor(&mut rng, &[2, 3]);
    let g = Graph::new();
    let x = g.variable(xt.clone());
    let loss = g.sum(&x).unwrap();
    let grads = g.backward(&loss).unwrap();
    assert!(grads.get(&x).unwrap().data().iter().all(|&v| v == 1.0));

    let g = Graph::new();
    let x = g.variable(xt.clone());
    let sq = g.mul(&x, &x).unwrap();
    let loss = g.sum(&sq).unwrap();
    let grads = g.backward(&loss).unwrap();
    for (gv, xv) in grads.get(&x).unwrap().data().iter().zip(xt.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn backward_contracts() {
    let g = Graph::<f64>::new();
    let x = g.variable(Tensor::full(&[3], 1.0));
    assert!(matches!(g.backward(&x), Err(Error::Contract(_))));
    let s = g.sum(&x).unwrap();
    g.backward(&s).unwrap();
    assert!(matches!(g.backward(&s), Err(Error::Contract(_))));
}

#[test]
fn unused_inputs_get_no_gradient() {
    let g = Graph::<f64>::new();
    let x = g.variable(Tensor::full(&[3], 1.0));
    let unused = g.variable(Tensor::full(&[3], 1.0));
    let _dead = g.exp(&unused).unwrap();
    let s = g.sum(&x).unwrap();
    let grads = g.backward(&s).unwrap();
    assert!(grads.get(&unused).is_none());
    assert!(grads.get_or_zero(&unused).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_silu_sum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = vec![
        rand_tensor(&mut rng, &[1, 2, 5, 5]),
        rand_tensor(&mut rng, &[3, 2, 3, 3]),
        rand_tensor(&mut rng, &[3]),
    ];
    let r = grad_check(
        |g, v| {
            let y = g.conv2d(&v[0], &v[1], &v[2], 1, 1)?;
            let y = g.silu(&y)?;
            g.sum(&y)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn grad_check_is_exact_for_linear_functions() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![rand_tensor(&mut rng, &[6])];
    let r = grad_check(
        |g, v| {
            let y = g.scale(&v[0], 3.0)?;
            g.sum(&y)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-9, "{r:?}");
    assert!(matches!(
        grad_check(|g, v| g.sum(&v[0]), &inputs, 1e-2),
        Err(Error::Param(_))
    ));
}

/// Weighted sum `sum(y * r)` with a fixed random `r`, so every output element
/// carries a distinct upstream gradient.
fn weighted<Tt: Fn(&Graph<f64>, &[Var<f64>]) -> crate::Result<Var<f64>>>(
    seed: u64,
    f: Tt,
) -> impl Fn(&Graph<f64>, &[Var<f64>]) -> crate::Result<Var<f64>> {
    move |g, v| {
        let y = f(g, v)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let r = g.constant(Tensor::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0)));
        let p = g.mul(&y, &r)?;
        g.sum(&p)
    }
}

#[test]
fn every_primitive_passes_grad_check_over_20_seeds() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let b = 1 + (seed as usize % 2);
        let c = 1 + rng.random_range(0..3usize);
        let h = 3 + rng.random_range(0..4usize);
        let w = 3 + rng.random_range(0..4usize);
        let x = rand_tensor(&mut rng, &[b, c, h, w]);
        let oc = 1 + rng.random_range(0..3usize);
        let stride = 1 + (seed as usize % 2);
        // with two or three channels the normalisation gradient lives in a
        // 0/1-dimensional subspace and is frequently roundoff-sized
        let ln_c = c + 3;
        let ln_x = rand_tensor(&mut rng, &[b, ln_c, h, w]);
        let cases: Vec<(
            &str,
            Vec<Tensor<f64>>,
            Box<dyn Fn(&Graph<f64>, &[Var<f64>]) -> crate::Result<Var<f64>>>,
        )> = vec![
            (
                "conv2d",
                vec![
                    x.clone(),
                    rand_tensor(&mut rng, &[oc, c, 3, 3]),
                    rand_tensor(&mut rng, &[oc]),
                ],
                Box::new(move |g, v| g.conv2d(&v[0], &v[1], &v[2], stride, 1)),
            ),
            (
                "depthwise",
                vec![x.clone(), rand_tensor(&mut rng, &[c, 1, 3, 3])],
                Box::new(|g, v| g.depthwise_conv2d(&v[0], &v[1], 1)),
            ),
            (
                "layer_norm",
                vec![
                    ln_x,
                    rand_tensor(&mut rng, &[ln_c]),
                    rand_tensor(&mut rng, &[ln_c]),
                ],
                Box::new(|g, v| g.layer_norm(&v[0], &v[1], &v[2], 1e-5)),
            ),
            (
                "linear_channels",
                vec![
                    x.clone(),
                    rand_tensor(&mut rng, &[oc, c]),
                    rand_tensor(&mut rng, &[oc]),
                ],
                Box::new(|g, v| g.linear_axis(&v[0], &v[1], Some(&v[2]), 1)),
            ),
            (
                "linear_last",
                vec![
                    x.clone(),
                    rand_tensor(&mut rng, &[oc, w]),
                    rand_tensor(&mut rng, &[oc]),
                ],
                Box::new(|g, v| g.linear(&v[0], &v[1], &v[2])),
            ),
            ("silu", vec![x.clone()], Box::new(|g, v| g.silu(&v[0]))),
            (
                "sigmoid",
                vec![x.clone()],
                Box::new(|g, v| g.sigmoid(&v[0])),
            ),
            (
                "softplus",
                vec![x.clone()],
                Box::new(|g, v| g.softplus(&v[0])),
            ),
            ("exp", vec![x.clone()], Box::new(|g, v| g.exp(&v[0]))),
            // finite differences are only meaningful away from the kink at 0
            (
                "relu",
                vec![x.map(|v| v + 0.05f64.copysign(v))],
                Box::new(|g, v| g.relu(&v[0])),
            ),
            (
                "softmax",
                vec![x.clone()],
                Box::new(|g, v| g.softmax(&v[0], 1)),
            ),
            (
                "mul",
                vec![x.clone(), rand_tensor(&mut rng, &[b, c, h, w])],
                Box::new(|g, v| g.mul(&v[0], &v[1])),
            ),
            (
                "sub",
                vec![x.clone(), rand_tensor(&mut rng, &[b, c, h, w])],
                Box::new(|g, v| g.sub(&v[0], &v[1])),
            ),
            (
                "mul_scalar",
                vec![x.clone(), rand_tensor(&mut rng, &[1])],
                Box::new(|g, v| g.mul_scalar(&v[0], &v[1])),
            ),
            (
                "mul_channel",
                vec![x.clone(), rand_tensor(&mut rng, &[b, c, 1, 1])],
                Box::new(|g, v| g.mul_channel(&v[0], &v[1])),
            ),
            (
                "global_avg_pool",
                vec![x.clone()],
                Box::new(|g, v| g.global_avg_pool(&v[0])),
            ),
            (
                "upsample2x",
                vec![x.clone()],
                Box::new(|g, v| g.upsample2x(&v[0])),
            ),
            (
                "crop",
                vec![x.clone()],
                Box::new(|g, v| g.crop(&v[0], 1, 1, 2, 2)),
            ),
            ("mean", vec![x.clone()], Box::new(|g, v| g.mean(&v[0]))),
        ];
        for (name, inputs, f) in cases {
            let r = grad_check(weighted(seed, f), &inputs, 1e-4).unwrap();
            assert!(r.max_rel_error < 1e-6, "{name} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn gradients_are_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xt = rand_tensor(&mut rng, &[1, 2, 4, 4]);
    let wt = rand_tensor(&mut rng, &[2, 2, 3, 3]);
    let bt = rand_tensor(&mut rng, &[2]);
    let run = |which: u8| {
        let g = Graph::new();
        let w = g.variable(wt.clone());
        let x = g.constant(xt.clone());
        let b = g.constant(bt.clone());
        let y = g.conv2d(&x, &w, &b, 1, 1).unwrap();
        let l1 = g.sum(&g.silu(&y).unwrap()).unwrap();
        let l2 = g.mean(&g.mul(&y, &y).unwrap()).unwrap();
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => g.add(&l1, &l2).unwrap(),
        };
        g.backward(&loss).unwrap().get(&w).unwrap()
    };
    let (a, b, both) = (run(0), run(1), run(2));
    for i in 0..a.len() {
        assert!((a.data()[i] + b.data()[i] - both.data()[i]).abs() < 1e-10);
    }
}

#[test]
fn param_leaves_are_shared_and_accumulate() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::full(&[2], 3.0));
    let g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    let p = g.mul(&a, &b).unwrap();
    let loss = g.sum(&p).unwrap();
    let grads = g.backward(&loss).unwrap();
    assert_eq!(grads.param(id).unwrap(), &[6.0, 6.0]);
    grads.accumulate_into(&mut store).unwrap();
    grads.accumulate_into(&mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), &[12.0, 12.0]);
}

#[test]
fn inference_graph_records_nothing() {
    let g = Graph::<f32>::inference();
    let x = g.variable(Tensor::full(&[2], 1.0));
    let y = g.exp(&x).unwrap();
    assert!(!y.is_tracked());
    assert!(g.is_empty());
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        logits in proptest::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let g = Graph::<f64>::inference();
        let n = logits.len();
        let a = g.softmax(&g.constant(Tensor::from_f64(&[n], &logits).unwrap()), 0).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let b = g.softmax(&g.constant(Tensor::from_f64(&[n], &shifted).unwrap()), 0).unwrap();
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(a.data().iter().all(|&v| v >= 0.0));
        prop_assert!(a.value().max_abs_diff(b.value()) < 1e-12);
    }

    #[test]
    fn conv_agrees_with_naive_loops_on_random_shapes(
        seed in 0u64..1000, c in 1usize..4, oc in 1usize..4, h in 3usize..7, w in 3usize..7,
        stride in 1usize..3, pad in 0usize..2,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xt = rand_tensor(&mut rng, &[1, c, h, w]);
        let wt = rand_tensor(&mut rng, &[oc, c, 3, 3]);
        let bt = rand_tensor(&mut rng, &[oc]);
        let g = Graph::<f64>::inference();
        let y = g.conv2d(&g.constant(xt.clone()), &g.constant(wt.clone()), &g.constant(bt.clone()), stride, pad).unwrap();
        prop_assert!(y.value().max_abs_diff(&naive_conv(&xt, &wt, Some(bt.data()), stride, pad, 1)) < 1e-6);
    }
}
