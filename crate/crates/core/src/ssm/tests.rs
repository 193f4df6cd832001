use std::time::Instant;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numcore::{grad_check, grad_check_params};
use crate::testutil::{random_tensor, scramble};

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

/// Step-by-step recurrence on one `(C, L)` sequence, projections included.
fn naive_scan(store: &ParamStore<f64>, p: &SsmParams, x: &[f64], len: usize) -> Vec<f64> {
    let (ch, st) = (p.channels, p.state_dim);
    let a_log = store.get(p.a_log).data();
    let d = store.get(p.d_skip).data();
    let wb = store.get(p.proj_b).data();
    let wc = store.get(p.proj_c).data();
    let wd = store.get(p.proj_delta_weight).data();
    let bd = store.get(p.proj_delta_bias).data();
    let xt = |k: usize, t: usize| x[k * len + t];
    let mut h = vec![vec![0.0; st]; ch];
    let mut y = vec![0.0; ch * len];
    for t in 0..len {
        let bt: Vec<f64> = (0..st)
            .map(|s| (0..ch).map(|k| wb[s * ch + k] * xt(k, t)).sum())
            .collect();
        let ct: Vec<f64> = (0..st)
            .map(|s| (0..ch).map(|k| wc[s * ch + k] * xt(k, t)).sum())
            .collect();
        for k in 0..ch {
            let pre: f64 = bd[k] + (0..ch).map(|j| wd[k * ch + j] * xt(j, t)).sum::<f64>();
            let dt = softplus(pre);
            let mut out = d[k] * xt(k, t);
            for s in 0..st {
                let a = -a_log[k * st + s].exp();
                h[k][s] = (dt * a).exp() * h[k][s] + dt * bt[s] * xt(k, t);
                out += ct[s] * h[k][s];
            }
            y[k * len + t] = out;
        }
    }
    y
}

fn ssm_setup(seed: u64, ch: usize, st: usize) -> (ParamStore<f64>, SsmParams, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = SsmParams::register(&mut store, "ssm", ch, st, &mut rng);
    scramble(&mut store, &mut rng);
    (store, p, rng)
}

fn raw_scan(
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    ch: usize,
    st: usize,
) -> Vec<f64> {
    let len = x.len() / ch;
    let g = Graph::inference();
    let t = |data: &[f64], shape: &[usize]| g.constant(Tensor::new(shape, data.to_vec()).unwrap());
    let y = scan_op(
        &g,
        &t(x, &[1, ch, len]),
        &t(delta, &[1, ch, len]),
        &t(a, &[ch, st]),
        &t(b, &[1, st, len]),
        &t(c, &[1, st, len]),
        &t(d, &[ch]),
    )
    .unwrap();
    y.data().to_vec()
}

#[test]
fn discretize_examples() {
    let (abar, bbar) = discretize(2f64.ln(), &[-1.0], &[3.0]).unwrap();
    assert!((abar[0] - 0.5).abs() < 1e-15);
    assert!((bbar[0] - 3.0 * 2f64.ln()).abs() < 1e-15);
    let (_, bbar) = discretize(1.0, &[-1.0], &[2.0]).unwrap();
    assert_eq!(bbar[0], 2.0);
    let (abar, bbar) = discretize(1e-12, &[-5.0, -0.1], &[1.0, 1.0]).unwrap();
    assert!(abar.iter().all(|v| (1.0 - v) < 1e-10));
    assert!(bbar.iter().all(|v| *v < 1e-10));
    assert!(matches!(
        discretize(0.0, &[-1.0], &[1.0]),
        Err(Error::Param(_))
    ));
    assert!(matches!(
        discretize(-1.0, &[-1.0], &[1.0]),
        Err(Error::Param(_))
    ));
}

#[test]
fn running_sum_example() {
    let y = raw_scan(
        &[1.0, 1.0, 1.0],
        &[1.0; 3],
        &[0.0],
        &[1.0; 3],
        &[1.0; 3],
        &[0.0],
        1,
        1,
    );
    assert_eq!(y, vec![1.0, 2.0, 3.0]);
}

#[test]
fn memoryless_when_transition_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (ch, st, len) = (2, 3, 5);
    let x: Vec<f64> = (0..ch * len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let delta: Vec<f64> = (0..ch * len).map(|_| rng.random_range(0.5..1.5)).collect();
    let b: Vec<f64> = (0..st * len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..st * len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let d = [0.3, -0.7];
    let y = raw_scan(&x, &delta, &[-1e4; 6], &b, &c, &d, ch, st);
    for k in 0..ch {
        for t in 0..len {
            let i = k * len + t;
            let want: f64 = (0..st)
                .map(|s| c[s * len + t] * delta[i] * b[s * len + t] * x[i])
                .sum::<f64>()
                + d[k] * x[i];
            assert!((y[i] - want).abs() < 1e-14);
        }
    }
}

#[test]
fn matches_naive_recurrence_at_length_64() {
    for seed in 0..10 {
        let (store, p, mut rng) = ssm_setup(seed, 3, 5);
        let x = random_tensor(&mut rng, &[2, 3, 64]);
        let g = Graph::inference();
        let y = selective_scan(&g, &store, &g.constant(x.clone()), &p).unwrap();
        for bi in 0..2 {
            let want = naive_scan(&store, &p, &x.data()[bi * 192..][..192], 64);
            let got = &y.data()[bi * 192..][..192];
            let err = want
                .iter()
                .zip(got)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "seed {seed}: {err}");
        }
    }
}

#[test]
fn negative_step_size_is_rejected() {
    let r = std::panic::catch_unwind(|| {
        raw_scan(&[1.0], &[-0.1], &[-1.0], &[1.0], &[1.0], &[0.0], 1, 1)
    });
    assert!(r.is_err());
    let g = Graph::<f64>::inference();
    let one = |s: &[usize]| g.constant(Tensor::full(s, 1.0));
    let neg = g.constant(Tensor::full(&[1, 1, 1], -0.1));
    let res = scan_op(
        &g,
        &one(&[1, 1, 1]),
        &neg,
        &one(&[1, 1]),
        &one(&[1, 1, 1]),
        &one(&[1, 1, 1]),
        &one(&[1]),
    );
    assert!(matches!(res, Err(Error::Param(_))));
}

#[test]
fn projected_scan_rejects_wrong_channel_count() {
    let (store, p, _) = ssm_setup(0, 3, 2);
    let g = Graph::inference();
    let x = g.constant(Tensor::zeros(&[1, 4, 5]));
    assert!(matches!(
        selective_scan(&g, &store, &x, &p),
        Err(Error::Shape(_))
    ));
}

#[test]
fn initialisation_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let p = SsmParams::register(&mut store, "s", 8, 16, &mut rng);
    let a_log = store.get(p.a_log).data();
    for k in 0..8 {
        for s in 0..16 {
            assert!((a_log[k * 16 + s] - ((s + 1) as f64).ln()).abs() < 1e-15);
        }
    }
    for &b in store.get(p.proj_delta_bias).data() {
        let dt = softplus(b);
        assert!(
            (DELTA_INIT_RANGE.0 * 0.999..=DELTA_INIT_RANGE.1 * 1.001).contains(&dt),
            "{dt}"
        );
    }
    assert!(store.get(p.d_skip).data().iter().all(|&v| v == 1.0));
}

#[test]
fn flatten_orders_and_roundtrip() {
    assert_eq!(
        ScanDirection::ColumnForward.order(2, 3),
        vec![0, 3, 1, 4, 2, 5]
    );
    assert_eq!(
        ScanDirection::ColumnBackward.order(2, 3),
        vec![5, 2, 4, 1, 3, 0]
    );
    assert_eq!(ScanDirection::RowBackward.order(2, 2), vec![3, 2, 1, 0]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&mut rng, &[2, 3, 4, 5]);
    let g = Graph::inference();
    let xv = g.constant(x.clone());
    for dir in ScanDirection::ALL {
        let flat = flatten(&g, &xv, dir).unwrap();
        assert_eq!(flat.shape(), &[2, 3, 20]);
        let back = unflatten(&g, &flat, dir, 4, 5).unwrap();
        assert_eq!(back.value().data(), x.data());
        assert_eq!(ScanDirection::from_tag(dir.tag()), Some(dir));
    }
}

fn scan2d_setup(seed: u64, ch: usize, st: usize) -> (ParamStore<f64>, Scan2dParams, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = Scan2dParams::register(&mut store, "scan", ch, st, &ScanDirection::ALL, &mut rng);
    scramble(&mut store, &mut rng);
    (store, p, rng)
}

#[test]
fn scan_2d_equals_sum_of_directional_oracles() {
    let (store, p, mut rng) = scan2d_setup(4, 3, 4);
    let (h, w) = (4, 4);
    let x = random_tensor(&mut rng, &[1, 3, h, w]);
    let g = Graph::inference();
    let y = scan_2d(&g, &store, &g.constant(x.clone()), &p).unwrap();
    let mut want = vec![0.0; 3 * h * w];
    for (dir, params) in &p.directions {
        let order = dir.order(h, w);
        let seq: Vec<f64> = (0..3)
            .flat_map(|k| order.iter().map(move |&q| (k, q)))
            .map(|(k, q)| x.data()[k * 16 + q])
            .collect();
        let ys = naive_scan(&store, params, &seq, 16);
        for k in 0..3 {
            for (t, &q) in order.iter().enumerate() {
                want[k * 16 + q] += ys[k * 16 + t];
            }
        }
    }
    let err = want
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-10, "{err}");
}

#[test]
fn single_pixel_map_is_one_step_per_direction() {
    let (store, p, mut rng) = scan2d_setup(5, 2, 3);
    let x = random_tensor(&mut rng, &[1, 2, 1, 1]);
    let g = Graph::inference();
    let y = scan_2d(&g, &store, &g.constant(x.clone()), &p).unwrap();
    let want: Vec<f64> = (0..2)
        .map(|k| {
            p.directions
                .iter()
                .map(|(_, q)| naive_scan(&store, q, x.data(), 1)[k])
                .sum()
        })
        .collect();
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn row_forward_is_causal_over_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let p = Scan2dParams::register(
        &mut store,
        "scan",
        2,
        3,
        &[ScanDirection::RowForward],
        &mut rng,
    );
    scramble(&mut store, &mut rng);
    // Zero bias on the step projection keeps the zero pixels from contributing.
    let (_, params) = &p.directions[0];
    store.get_mut(params.d_skip).data_mut().fill(0.0);
    let mut x = Tensor::<f64>::zeros(&[1, 2, 3, 4]);
    let pixel = 6;
    x.data_mut()[pixel] = 0.8;
    x.data_mut()[12 + pixel] = -0.4;
    let g = Graph::inference();
    let y = scan_2d(&g, &store, &g.constant(x), &p).unwrap();
    for k in 0..2 {
        for q in 0..pixel {
            assert_eq!(y.data()[k * 12 + q], 0.0);
        }
        assert_ne!(y.data()[k * 12 + pixel], 0.0);
    }
}

fn rotate_half_turn(x: &Tensor<f64>) -> Tensor<f64> {
    let (b, c, h, w) = x.dims4().unwrap();
    let mut out = x.clone();
    for plane in 0..b * c {
        let src = &x.data()[plane * h * w..][..h * w];
        out.data_mut()[plane * h * w..][..h * w]
            .iter_mut()
            .zip(src.iter().rev())
            .for_each(|(o, &v)| *o = v);
    }
    out
}

#[test]
fn half_turn_equivariance_with_swapped_directions() {
    let (store, p, mut rng) = scan2d_setup(7, 3, 4);
    let swapped = Scan2dParams {
        directions: p
            .directions
            .iter()
            .map(|(d, q)| (d.reversed(), q.clone()))
            .collect(),
    };
    let x = random_tensor(&mut rng, &[2, 3, 5, 4]);
    let g = Graph::inference();
    let lhs = scan_2d(&g, &store, &g.constant(rotate_half_turn(&x)), &swapped).unwrap();
    let rhs = rotate_half_turn(scan_2d(&g, &store, &g.constant(x), &p).unwrap().value());
    assert!(lhs.value().max_abs_diff(&rhs) < 1e-10);
}

#[test]
fn scan_gradients_match_finite_differences() {
    for seed in 0..4 {
        let (store, p, mut rng) = ssm_setup(seed, 2, 3);
        let len = 16;
        let x = random_tensor(&mut rng, &[1, 2, len]);
        let weights = random_tensor(&mut rng, &[1, 2, len]);
        let wp = weights.clone();
        let sp = store.clone();
        let pp = p.clone();
        let r = grad_check(
            move |g, v| {
                let y = selective_scan(g, &sp, &v[0], &pp)?;
                g.sum(&g.mul(&y, &g.constant(wp.clone()))?)
            },
            std::slice::from_ref(&x),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "inputs seed {seed}: {r:?}");
        let r = grad_check_params(
            |g, s| {
                let y = selective_scan(g, s, &g.constant(x.clone()), &p)?;
                g.sum(&g.mul(&y, &g.constant(weights.clone()))?)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "params seed {seed}: {r:?}");
    }
}

#[test]
fn fused_op_gradients_on_raw_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (b, ch, st, len) = (2, 2, 3, 7);
    let inputs = vec![
        random_tensor(&mut rng, &[b, ch, len]),
        Tensor::from_fn(&[b, ch, len], |_| rng.random_range(0.1..1.0)),
        Tensor::from_fn(&[ch, st], |_| rng.random_range(-2.0..-0.1)),
        random_tensor(&mut rng, &[b, st, len]),
        random_tensor(&mut rng, &[b, st, len]),
        random_tensor(&mut rng, &[ch]),
    ];
    let weights = random_tensor(&mut rng, &[b, ch, len]);
    let r = grad_check(
        |g, v| {
            let y = scan_op(g, &v[0], &v[1], &v[2], &v[3], &v[4], &v[5])?;
            g.sum(&g.mul(&y, &g.constant(weights.clone()))?)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn ssb_zero_input_gives_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let p = SsbParams::register(&mut store, "ssb", 3, 4, &ScanDirection::ALL, &mut rng);
    store
        .get_mut(p.norm_beta)
        .data_mut()
        .copy_from_slice(&[0.1, -0.2, 0.3]);
    let g = Graph::inference();
    let y = ssb(&g, &store, &g.constant(Tensor::zeros(&[1, 3, 4, 4])), &p).unwrap();
    for k in 0..3 {
        for &v in &y.data()[k * 16..][..16] {
            assert!((v - [0.1, -0.2, 0.3][k]).abs() < 1e-12);
        }
    }
}

#[test]
fn ssb_is_the_stage_composition_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let p = SsbParams::register(&mut store, "ssb", 3, 4, &ScanDirection::ALL, &mut rng);
    scramble(&mut store, &mut rng);
    let x = random_tensor(&mut rng, &[1, 3, 5, 6]);
    let g = Graph::inference();
    let xv = g.constant(x);
    let a = ssb(&g, &store, &xv, &p).unwrap();
    let b = ssb(&g, &store, &xv, &p).unwrap();
    assert_eq!(a.data(), b.data());
    let conv = g
        .depthwise_conv2d(&xv, &g.param(&store, p.dconv), 1)
        .unwrap();
    let act = g.silu(&conv).unwrap();
    let sc = scan_2d(&g, &store, &act, &p.scan).unwrap();
    let manual = g
        .layer_norm(
            &sc,
            &g.param(&store, p.norm_gamma),
            &g.param(&store, p.norm_beta),
            LAYER_NORM_EPS,
        )
        .unwrap();
    assert_eq!(a.data(), manual.data());
    let wrong = g.constant(Tensor::zeros(&[1, 2, 5, 6]));
    assert!(matches!(ssb(&g, &store, &wrong, &p), Err(Error::Shape(_))));
}

#[test]
fn ssb_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f64>::new();
    let p = SsbParams::register(&mut store, "ssb", 4, 2, &ScanDirection::ALL, &mut rng);
    scramble(&mut store, &mut rng);
    let x = random_tensor(&mut rng, &[1, 4, 3, 3]);
    let weights = random_tensor(&mut rng, &[1, 4, 3, 3]);
    let r = grad_check_params(
        |g, s| {
            let y = ssb(g, s, &g.constant(x.clone()), &p)?;
            g.sum(&g.mul(&y, &g.constant(weights.clone()))?)
        },
        &store,
        1e-4,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

fn time_scan(len: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (ch, st) = (8, 8);
    let x = Tensor::<f32>::from_fn(&[1, ch, len], |_| rng.random_range(-1.0..1.0));
    let delta = Tensor::<f32>::full(&[1, ch, len], 0.05);
    let a = Tensor::<f32>::full(&[ch, st], -1.0);
    let b = Tensor::<f32>::from_fn(&[1, st, len], |_| rng.random_range(-1.0..1.0));
    let d = Tensor::<f32>::full(&[ch], 1.0);
    let g = Graph::inference();
    let [x, delta, a, b, d] = [x, delta, a, b, d].map(|t| g.constant(t));
    (0..5)
        .map(|_| {
            let start = Instant::now();
            scan_op(&g, &x, &delta, &a, &b, &b, &d).unwrap();
            start.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn scan_time_is_linear_in_length() {
    let short = time_scan(8192);
    let long = time_scan(16384);
    assert!(
        long / short <= 2.5,
        "doubling length scaled time by {}",
        long / short
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn outputs_depend_only_on_the_past(seed in 0u64..1000, len in 2usize..24, cut in 0usize..23) {
        let cut = cut % (len - 1);
        let (store, p, mut rng) = ssm_setup(seed, 2, 3);
        let x = random_tensor(&mut rng, &[1, 2, len]);
        let mut x2 = x.clone();
        for k in 0..2 {
            x2.data_mut()[k * len + cut + 1] += 0.5;
        }
        let g = Graph::inference();
        let y1 = selective_scan(&g, &store, &g.constant(x), &p).unwrap();
        let y2 = selective_scan(&g, &store, &g.constant(x2), &p).unwrap();
        for k in 0..2 {
            for t in 0..=cut {
                prop_assert_eq!(y1.data()[k * len + t].to_bits(), y2.data()[k * len + t].to_bits());
            }
        }
    }

    #[test]
    fn discretized_transition_is_a_contraction(
        a_log in proptest::collection::vec(-3.0f64..3.0, 1..8),
        pre in -20.0f64..20.0,
    ) {
        let dt = softplus(pre);
        prop_assert!(dt > 0.0);
        let a: Vec<f64> = a_log.iter().map(|v| -v.exp()).collect();
        let (abar, _) = discretize(dt, &a, &a).unwrap();
        for v in abar {
            prop_assert!(v > 0.0 && v < 1.0);
        }
    }
}
