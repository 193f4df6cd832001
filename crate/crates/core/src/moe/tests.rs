use proptest::prelude::*;

use super::*;
use crate::numcore::grad_check_params;
use crate::testutil::{projected, random_tensor, rng, scramble};

fn config(n: usize, k: usize) -> MoeConfig {
    MoeConfig {
        channels: 3,
        n_experts: n,
        top_k: k,
        state_dim: 2,
        directions: ScanDirection::ALL.to_vec(),
    }
}

fn moe_setup(seed: u64, n: usize, k: usize) -> (ParamStore<f64>, MoeBlock, Tensor<f64>) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let block = MoeBlock::register(&mut store, "moe", &config(n, k), &mut r).unwrap();
    scramble(&mut store, &mut r);
    let x = random_tensor(&mut r, &[1, 3, 4, 5]);
    (store, block, x)
}

fn prior(p: &[f64]) -> DegradationPrior {
    DegradationPrior::new(p.to_vec()).unwrap()
}

fn expert_outputs(store: &ParamStore<f64>, block: &MoeBlock, x: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let g = Graph::inference();
    let xv = g.constant(x.clone());
    block
        .experts
        .iter()
        .map(|e| ssb(&g, store, &xv, e).unwrap().into_tensor())
        .collect()
}

fn combine(
    store: &ParamStore<f64>,
    block: &MoeBlock,
    x: &Tensor<f64>,
    p: &DegradationPrior,
) -> Tensor<f64> {
    let g = Graph::inference();
    tk_combine(&g, store, &g.constant(x.clone()), p, block)
        .unwrap()
        .into_tensor()
}

#[test]
fn top_k_examples() {
    assert_eq!(
        top_k_select(&prior(&[0.5, 0.3, 0.2]), 2).unwrap(),
        vec![0, 1]
    );
    assert_eq!(
        top_k_select(&DegradationPrior::uniform(4), 2).unwrap(),
        vec![0, 1]
    );
    assert_eq!(
        top_k_select(&prior(&[0.1, 0.4, 0.2, 0.3]), 4).unwrap(),
        vec![1, 3, 2, 0]
    );
    assert!(matches!(
        top_k_select(&DegradationPrior::uniform(3), 0),
        Err(Error::Param(_))
    ));
    assert!(matches!(
        top_k_select(&DegradationPrior::uniform(3), 4),
        Err(Error::Param(_))
    ));
}

#[test]
fn full_selection_equals_dense_weighted_sum() {
    let (store, block, x) = moe_setup(1, 2, 2);
    let out = combine(&store, &block, &x, &DegradationPrior::uniform(2));
    let ys = expert_outputs(&store, &block, &x);
    let dense = Tensor::from_fn(x.shape(), |i| 0.5 * ys[0].data()[i] + 0.5 * ys[1].data()[i]);
    assert!(out.max_abs_diff(&dense) < 1e-10);
}

#[test]
fn one_hot_prior_routes_to_one_expert_exactly() {
    let (store, block, x) = moe_setup(2, 4, 2);
    let ys = expert_outputs(&store, &block, &x);
    for j in 0..4 {
        let out = combine(&store, &block, &x, &DegradationPrior::one_hot(4, j));
        assert_eq!(out.data(), ys[j].data());
    }
}

#[test]
fn top_two_of_four_matches_exhaustive_oracle() {
    let (store, block, x) = moe_setup(3, 4, 2);
    let p = prior(&[0.15, 0.4, 0.1, 0.35]);
    let ys = expert_outputs(&store, &block, &x);
    let want = Tensor::from_fn(x.shape(), |i| {
        0.4 * ys[1].data()[i] + 0.35 * ys[3].data()[i]
    });
    assert!(combine(&store, &block, &x, &p).max_abs_diff(&want) < 1e-10);
}

#[test]
fn only_selected_experts_are_evaluated() {
    let (store, block, x) = moe_setup(4, 5, 2);
    block.reset_expert_calls();
    combine(&store, &block, &x, &prior(&[0.1, 0.3, 0.05, 0.5, 0.05]));
    assert_eq!(block.expert_calls(), vec![0, 1, 0, 1, 0]);
    block.reset_expert_calls();
    combine(&store, &block, &x, &DegradationPrior::uniform(5));
    assert_eq!(block.expert_calls().iter().sum::<usize>(), 2);
    block.reset_expert_calls();
    combine(&store, &block, &x, &DegradationPrior::one_hot(5, 3));
    assert_eq!(block.expert_calls(), vec![0, 0, 0, 1, 0]);
}

#[test]
fn single_expert_ignores_the_prior() {
    let (store, block, x) = moe_setup(5, 1, 1);
    let a = combine(&store, &block, &x, &DegradationPrior::uniform(14));
    let b = combine(&store, &block, &x, &DegradationPrior::one_hot(3, 2));
    assert_eq!(a.data(), b.data());
    assert_eq!(a.data(), expert_outputs(&store, &block, &x)[0].data());
}

#[test]
fn prior_length_mismatch_is_a_config_error() {
    let (store, block, x) = moe_setup(6, 3, 1);
    let g = Graph::inference();
    let r = tk_combine(
        &g,
        &store,
        &g.constant(x),
        &DegradationPrior::uniform(4),
        &block,
    );
    assert!(matches!(r, Err(Error::Config(_))));
    let mut s = ParamStore::<f64>::new();
    assert!(matches!(
        MoeBlock::register(&mut s, "m", &config(3, 4), &mut rng(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn unselected_experts_get_exactly_zero_gradients() {
    let (mut store, block, x) = moe_setup(7, 4, 2);
    let weights = random_tensor(&mut rng(70), x.shape());
    let g = Graph::new();
    let y = moe_forward(
        &g,
        &store,
        &g.constant(x),
        &prior(&[0.1, 0.5, 0.3, 0.1]),
        &block,
    )
    .unwrap();
    let grads = g.backward(&projected(&g, &y, &weights).unwrap()).unwrap();
    store.zero_grad();
    grads.accumulate_into(&mut store).unwrap();
    for (i, expert) in block.experts.iter().enumerate() {
        let ids = [
            expert.dconv,
            expert.norm_gamma,
            expert.scan.directions[0].1.a_log,
        ];
        for id in ids {
            let gsum: f64 = store.get(id).grad().unwrap().iter().map(|v| v.abs()).sum();
            if i == 1 || i == 2 {
                assert!(gsum > 0.0, "expert {i}");
            } else {
                assert_eq!(gsum, 0.0, "expert {i}");
            }
        }
    }
}

#[test]
fn closed_gate_leaves_output_bias() {
    let (mut store, block, x) = moe_setup(8, 2, 1);
    store.get_mut(block.value_proj.weight).data_mut().fill(0.0);
    store.get_mut(block.value_proj.bias).data_mut().fill(-60.0);
    let g = Graph::inference();
    let y = moe_forward(
        &g,
        &store,
        &g.constant(x),
        &DegradationPrior::uniform(2),
        &block,
    )
    .unwrap();
    let bias = store.get(block.out_proj.bias).data().to_vec();
    for (i, v) in y.data().iter().enumerate() {
        assert!((v - bias[i / 20]).abs() < 1e-10);
    }
}

#[test]
fn zero_input_with_bias_free_projections_gives_zero() {
    let (mut store, block, _) = moe_setup(9, 3, 2);
    for lin in [&block.gate_proj, &block.value_proj, &block.out_proj] {
        store.get_mut(lin.bias).data_mut().fill(0.0);
    }
    for e in &block.experts {
        store.get_mut(e.norm_beta).data_mut().fill(0.0);
    }
    let g = Graph::inference();
    let y = moe_forward(
        &g,
        &store,
        &g.constant(Tensor::zeros(&[1, 3, 4, 4])),
        &prior(&[0.2, 0.3, 0.5]),
        &block,
    )
    .unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn one_hot_block_equals_single_expert_gated_unit() {
    let (store, block, x) = moe_setup(10, 3, 2);
    let g = Graph::inference();
    let xv = g.constant(x);
    let y = moe_forward(&g, &store, &xv, &DegradationPrior::one_hot(3, 1), &block).unwrap();
    let fhat = block.gate_proj.forward(&g, &store, &xv).unwrap();
    let expert = ssb(&g, &store, &fhat, &block.experts[1]).unwrap();
    let gate = g
        .silu(&block.value_proj.forward(&g, &store, &xv).unwrap())
        .unwrap();
    let manual = block
        .out_proj
        .forward(&g, &store, &g.mul(&expert, &gate).unwrap())
        .unwrap();
    assert_eq!(y.data(), manual.data());
}

fn mm_setup(seed: u64) -> (ParamStore<f64>, MmBlock, Tensor<f64>) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let mut cfg = config(2, 1);
    cfg.channels = 4;
    let block = MmBlock::register(&mut store, "mm", &cfg, &mut r).unwrap();
    scramble(&mut store, &mut r);
    let x = random_tensor(&mut r, &[1, 4, 3, 4]);
    (store, block, x)
}

#[test]
fn zeroed_tail_conv_leaves_the_residual() {
    let (mut store, block, x) = mm_setup(11);
    store.get_mut(block.tail_conv.weight).data_mut().fill(0.0);
    store.get_mut(block.tail_conv.bias).data_mut().fill(0.0);
    let p = prior(&[0.3, 0.7]);
    let g = Graph::inference();
    let xv = g.constant(x);
    let y = mm_forward(&g, &store, &xv, &p, &block).unwrap();
    let ln = block.pre_norm.forward(&g, &store, &xv).unwrap();
    let u = g
        .add(&xv, &moe_forward(&g, &store, &ln, &p, &block.moe).unwrap())
        .unwrap();
    assert_eq!(y.data(), u.data());
}

#[test]
fn mm_block_is_the_stage_composition_and_deterministic() {
    let (store, block, x) = mm_setup(12);
    let p = prior(&[0.6, 0.4]);
    let g = Graph::inference();
    let xv = g.constant(x);
    let y = mm_forward(&g, &store, &xv, &p, &block).unwrap();
    assert_eq!(
        y.data(),
        mm_forward(&g, &store, &xv, &p, &block).unwrap().data()
    );
    let ln = block.pre_norm.forward(&g, &store, &xv).unwrap();
    let u = g
        .add(&xv, &moe_forward(&g, &store, &ln, &p, &block.moe).unwrap())
        .unwrap();
    let t = block
        .tail_conv
        .forward(
            &g,
            &store,
            &block.tail_norm.forward(&g, &store, &u).unwrap(),
        )
        .unwrap();
    let pooled = g.global_avg_pool(&t).unwrap();
    let hidden = g
        .relu(
            &block
                .tail_attn
                .squeeze
                .forward(&g, &store, &pooled)
                .unwrap(),
        )
        .unwrap();
    let s = g
        .sigmoid(&block.tail_attn.excite.forward(&g, &store, &hidden).unwrap())
        .unwrap();
    let manual = g.add(&g.mul_channel(&t, &s).unwrap(), &u).unwrap();
    assert_eq!(y.data(), manual.data());
    assert_eq!(y.shape(), xv.shape());
}

#[test]
fn mm_block_gradients_match_finite_differences() {
    let (store, block, x) = mm_setup(13);
    let weights = random_tensor(&mut rng(130), x.shape());
    let p = prior(&[0.35, 0.65]);
    let r = grad_check_params(
        |g, s| {
            projected(
                g,
                &mm_forward(g, s, &g.constant(x.clone()), &p, &block)?,
                &weights,
            )
        },
        &store,
        1e-4,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn channel_attention_bottleneck_width() {
    let mut s = ParamStore::<f64>::new();
    let a = ChannelAttention::register(&mut s, "a", 16, &mut rng(0));
    assert_eq!(s.get(a.squeeze.weight).shape(), &[4, 16]);
    let b = ChannelAttention::register(&mut s, "b", 2, &mut rng(0));
    assert_eq!(s.get(b.excite.weight).shape(), &[2, 1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn unselected_entries_do_not_matter(seed in 0u64..200, split in 0.0f64..1.0) {
        let (store, block, x) = moe_setup(seed, 4, 2);
        // Selected experts 2 and 0 keep their weights; the remaining 0.2 moves.
        let a = prior(&[0.3, 0.2 * split, 0.5, 0.2 * (1.0 - split)]);
        let b = prior(&[0.3, 0.1, 0.5, 0.1]);
        let (ya, yb) = (combine(&store, &block, &x, &a), combine(&store, &block, &x, &b));
        prop_assert_eq!(ya.data(), yb.data());
    }

    #[test]
    fn combination_is_linear_in_each_selected_weight(seed in 0u64..200, c in 0.8f64..1.1) {
        let (store, block, x) = moe_setup(seed, 4, 2);
        let base = prior(&[0.1, 0.4, 0.05, 0.45]);
        let pj = 0.4;
        let scaled = prior(&[0.1 + 0.5 * (1.0 - c) * pj, c * pj, 0.05 + 0.5 * (1.0 - c) * pj, 0.45]);
        prop_assert_eq!(top_k_select(&scaled, 2).unwrap(), vec![3, 1]);
        let ys = expert_outputs(&store, &block, &x);
        let (ys_scaled, ys_base) = (combine(&store, &block, &x, &scaled), combine(&store, &block, &x, &base));
        let diff = Tensor::from_fn(x.shape(), |i| ys_scaled.data()[i] - ys_base.data()[i]);
        let want = Tensor::from_fn(x.shape(), |i| (c - 1.0) * pj * ys[1].data()[i]);
        prop_assert!(diff.max_abs_diff(&want) < 1e-10);
    }
}
