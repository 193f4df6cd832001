//! Prior-gated mixture of state space experts.
//!
//! [`tk_combine`] evaluates only the `K` experts with the largest prior
//! probabilities and sums their outputs weighted by those raw probabilities.
//! Picks with probability zero are skipped.
//! [`moe_forward`] wraps it in the gated projection unit and [`mm_forward`]
//! adds the residual LayerNorm, conv and channel attention tail.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::numcore::{init, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::prior::DegradationPrior;
use crate::ssm::{ssb, ScanDirection, SsbParams, LAYER_NORM_EPS};

/// Indices of the `k` largest probabilities, largest first; ties go to the
/// lower index.
pub fn top_k_select(prior: &DegradationPrior, k: usize) -> Result<Vec<usize>> {
    let p = prior.probs();
    if k == 0 || k > p.len() {
        return Err(Error::Param(format!(
            "top-k: k = {k} outside 1..={}",
            p.len()
        )));
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Shape of a mixture block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MoeConfig {
    pub channels: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub state_dim: usize,
    pub directions: Vec<ScanDirection>,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.state_dim == 0 || self.n_experts == 0 {
            return Err(Error::Config(format!(
                "mixture block sizes must be positive: {self:?}"
            )));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top-k {} must lie in 1..={} experts",
                self.top_k, self.n_experts
            )));
        }
        if self.directions.is_empty() {
            return Err(Error::Config(
                "at least one scan direction is required".into(),
            ));
        }
        Ok(())
    }
}

/// Channel-wise affine map `(out, in)` plus bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelLinear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ChannelLinear {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fin: usize,
        fout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ChannelLinear {
            weight: store.add(
                format!("{prefix}.weight"),
                init::fan_in_uniform(rng, &[fout, fin], fin),
            ),
            bias: store.add(
                format!("{prefix}.bias"),
                init::fan_in_uniform(rng, &[fout], fin),
            ),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: &Var<T>,
    ) -> Result<Var<T>> {
        g.linear_axis(
            x,
            &g.param(store, self.weight),
            Some(&g.param(store, self.bias)),
            1,
        )
    }
}

/// Per-channel LayerNorm affine parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        NormParams {
            gamma: store.add(
                format!("{prefix}.gamma"),
                Tensor::full(&[channels], T::one()),
            ),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: &Var<T>,
    ) -> Result<Var<T>> {
        g.layer_norm(
            x,
            &g.param(store, self.gamma),
            &g.param(store, self.beta),
            T::of(LAYER_NORM_EPS),
        )
    }
}

/// Parameters of the gated mixture unit.
#[derive(Debug, Clone)]
pub struct MoeBlock {
    pub config: MoeConfig,
    pub experts: Vec<SsbParams>,
    pub gate_proj: ChannelLinear,
    pub value_proj: ChannelLinear,
    pub out_proj: ChannelLinear,
    calls: Arc<Vec<AtomicUsize>>,
}

impl MoeBlock {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &MoeConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let experts = (0..config.n_experts)
            .map(|i| {
                SsbParams::register(
                    store,
                    &format!("{prefix}.expert{i}"),
                    c,
                    config.state_dim,
                    &config.directions,
                    rng,
                )
            })
            .collect();
        Ok(MoeBlock {
            config: config.clone(),
            experts,
            gate_proj: ChannelLinear::register(store, &format!("{prefix}.gate_proj"), c, c, rng),
            value_proj: ChannelLinear::register(store, &format!("{prefix}.value_proj"), c, c, rng),
            out_proj: ChannelLinear::register(store, &format!("{prefix}.out_proj"), c, c, rng),
            calls: Arc::new((0..config.n_experts).map(|_| AtomicUsize::new(0)).collect()),
        })
    }

    /// Forward evaluations of each expert since construction or the last reset.
    pub fn expert_calls(&self) -> Vec<usize> {
        self.calls
            .iter()
            .map(|c| c.load(Ordering::Relaxed))
            .collect()
    }

    pub fn reset_expert_calls(&self) {
        self.calls
            .iter()
            .for_each(|c| c.store(0, Ordering::Relaxed));
    }

    fn expert<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: &Var<T>,
        i: usize,
    ) -> Result<Var<T>> {
        self.calls[i].fetch_add(1, Ordering::Relaxed);
        ssb(g, store, x, &self.experts[i])
    }

    /// Experts that [`tk_combine`] would evaluate, with their weights.
    pub fn routing(&self, prior: &DegradationPrior) -> Result<Vec<(usize, f64)>> {
        if self.experts.len() == 1 {
            return Ok(vec![(0, 1.0)]);
        }
        if prior.len() != self.experts.len() {
            return Err(Error::Config(format!(
                "{} experts cannot be indexed by a prior of length {}",
                self.experts.len(),
                prior.len()
            )));
        }
        // zero-weight picks are skipped; the prior sums to one, so the top
        // pick is always kept
        Ok(top_k_select(prior, self.config.top_k)?
            .into_iter()
            .map(|i| (i, prior.probs()[i]))
            .filter(|&(_, w)| w > 0.0)
            .collect())
    }
}

/// Sum of the selected experts' outputs scaled by their prior probabilities.
/// A single-expert block ignores the prior and uses weight 1.
pub fn tk_combine<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    x: &Var<T>,
    prior: &DegradationPrior,
    block: &MoeBlock,
) -> Result<Var<T>> {
    let mut total: Option<Var<T>> = None;
    for (i, weight) in block.routing(prior)? {
        let y = block.expert(g, store, x, i)?;
        let term = if block.experts.len() == 1 {
            y
        } else {
            g.scale(&y, T::of(weight))?
        };
        total = Some(match total {
            None => term,
            Some(acc) => g.add(&acc, &term)?,
        });
    }
    Ok(total.expect("routing selects at least one expert"))
}

/// `out_proj(tk_combine(gate_proj(x)) * SiLU(value_proj(x)))`.
pub fn moe_forward<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    x: &Var<T>,
    prior: &DegradationPrior,
    block: &MoeBlock,
) -> Result<Var<T>> {
    let (_, c, _, _) = x.value().dims4()?;
    if c != block.config.channels {
        return shape_err(format!(
            "mixture block expects {} channels, got {c}",
            block.config.channels
        ));
    }
    let routed = tk_combine(
        g,
        store,
        &block.gate_proj.forward(g, store, x)?,
        prior,
        block,
    )?;
    let gate = g.silu(&block.value_proj.forward(g, store, x)?)?;
    block.out_proj.forward(g, store, &g.mul(&routed, &gate)?)
}

/// Squeeze-and-excitation style channel reweighting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelAttention {
    pub squeeze: ChannelLinear,
    pub excite: ChannelLinear,
}

impl ChannelAttention {
    /// Bottleneck width is `channels / REDUCTION`, at least 1.
    pub const REDUCTION: usize = 4;

    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = (channels / Self::REDUCTION).max(1);
        ChannelAttention {
            squeeze: ChannelLinear::register(
                store,
                &format!("{prefix}.squeeze"),
                channels,
                hidden,
                rng,
            ),
            excite: ChannelLinear::register(
                store,
                &format!("{prefix}.excite"),
                hidden,
                channels,
                rng,
            ),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: &Var<T>,
    ) -> Result<Var<T>> {
        let pooled = g.global_avg_pool(x)?;
        let hidden = g.relu(&self.squeeze.forward(g, store, &pooled)?)?;
        let scale = g.sigmoid(&self.excite.forward(g, store, &hidden)?)?;
        g.mul_channel(x, &scale)
    }
}

/// 3x3 convolution with bias, same padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fin: usize,
        fout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = fin * 9;
        ConvParams {
            weight: store.add(
                format!("{prefix}.weight"),
                init::fan_in_uniform(rng, &[fout, fin, 3, 3], fan_in),
            ),
            bias: store.add(
                format!("{prefix}.bias"),
                init::fan_in_uniform(rng, &[fout], fan_in),
            ),
            stride,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: &Var<T>,
    ) -> Result<Var<T>> {
        g.conv2d(
            x,
            &g.param(store, self.weight),
            &g.param(store, self.bias),
            self.stride,
            1,
        )
    }
}

/// Mixture unit plus its residual tail.
#[derive(Debug, Clone)]
pub struct MmBlock {
    pub moe: MoeBlock,
    pub pre_norm: NormParams,
    pub tail_norm: NormParams,
    pub tail_conv: ConvParams,
    pub tail_attn: ChannelAttention,
}

impl MmBlock {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &MoeConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = config.channels;
        let pre_norm = NormParams::register(store, &format!("{prefix}.pre_norm"), c);
        let moe = MoeBlock::register(store, &format!("{prefix}.moe"), config, rng)?;
        Ok(MmBlock {
            moe,
            pre_norm,
            tail_norm: NormParams::register(store, &format!("{prefix}.tail_norm"), c),
            tail_conv: ConvParams::register(store, &format!("{prefix}.tail_conv"), c, c, 1, rng),
            tail_attn: ChannelAttention::register(store, &format!("{prefix}.tail_attn"), c, rng),
        })
    }
}

/// `u = x + moe(LN(x)); u + attn(conv(LN(u)))`.
pub fn mm_forward<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    x: &Var<T>,
    prior: &DegradationPrior,
    block: &MmBlock,
) -> Result<Var<T>> {
    let mixed = moe_forward(
        g,
        store,
        &block.pre_norm.forward(g, store, x)?,
        prior,
        &block.moe,
    )?;
    let u = g.add(x, &mixed)?;
    let tail = block
        .tail_conv
        .forward(g, store, &block.tail_norm.forward(g, store, &u)?)?;
    g.add(&block.tail_attn.forward(g, store, &tail)?, &u)
}

#[cfg(test)]
mod tests;
