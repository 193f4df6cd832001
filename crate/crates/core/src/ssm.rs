//! Selective state space scanning.
//!
//! A diagonal state space model whose step size and input/output maps depend
//! on the current input:
//!
//! ```text
//! delta_t = softplus(W_delta x_t + b_delta)
//! h_t     = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t      (h_0 = 0)
//! y_t     = C_t . h_t + D * x_t
//! ```
//!
//! with `A = -exp(A_log)` strictly negative, `B_t = W_B x_t` and `C_t = W_C x_t`.
//! The recurrence runs sequentially in one fused primitive with a hand-written
//! backward pass. [`scan_2d`] flattens a feature map along several
//! [`ScanDirection`]s, scans each and sums the results; [`ssb`] wraps it as
//! depthwise conv, SiLU, 2-D scan and LayerNorm.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::{init, Backward, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Epsilon used by every LayerNorm in the network.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Step sizes are initialised log-uniformly in this range.
pub const DELTA_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

/// Zero-order-hold state transition and Euler input term for one channel at
/// one step: returns `(exp(delta * a_s), delta * b_s)` for every state index.
pub fn discretize<T: Scalar>(delta: T, a: &[T], b: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if !(delta > T::zero()) || !delta.is_finite() {
        return Err(Error::Param(format!(
            "discretize: step size must be positive and finite, got {delta}"
        )));
    }
    if a.len() != b.len() {
        return shape_err(format!(
            "discretize: {} state entries vs {} input entries",
            a.len(),
            b.len()
        ));
    }
    Ok((
        a.iter().map(|&v| (delta * v).exp()).collect(),
        b.iter().map(|&v| delta * v).collect(),
    ))
}

/// Order in which the pixels of an `H x W` map are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanDirection {
    #[serde(rename = "row_fwd")]
    RowForward,
    #[serde(rename = "row_bwd")]
    RowBackward,
    #[serde(rename = "col_fwd")]
    ColumnForward,
    #[serde(rename = "col_bwd")]
    ColumnBackward,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowForward,
        ScanDirection::RowBackward,
        ScanDirection::ColumnForward,
        ScanDirection::ColumnBackward,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ScanDirection::RowForward => "row_fwd",
            ScanDirection::RowBackward => "row_bwd",
            ScanDirection::ColumnForward => "col_fwd",
            ScanDirection::ColumnBackward => "col_bwd",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.tag() == tag)
    }

    /// The direction visiting pixels in the opposite order.
    pub fn reversed(self) -> Self {
        match self {
            ScanDirection::RowForward => ScanDirection::RowBackward,
            ScanDirection::RowBackward => ScanDirection::RowForward,
            ScanDirection::ColumnForward => ScanDirection::ColumnBackward,
            ScanDirection::ColumnBackward => ScanDirection::ColumnForward,
        }
    }

    /// `order[t]` is the row-major pixel index visited at step `t`.
    pub fn order(self, height: usize, width: usize) -> Vec<usize> {
        let n = height * width;
        match self {
            ScanDirection::RowForward => (0..n).collect(),
            ScanDirection::RowBackward => (0..n).rev().collect(),
            ScanDirection::ColumnForward => column_major(height, width).collect(),
            ScanDirection::ColumnBackward => {
                let mut o: Vec<usize> = column_major(height, width).collect();
                o.reverse();
                o
            }
        }
    }
}

fn column_major(height: usize, width: usize) -> impl Iterator<Item = usize> {
    (0..width).flat_map(move |x| (0..height).map(move |y| y * width + x))
}

fn invert(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (t, &p) in order.iter().enumerate() {
        inv[p] = t;
    }
    inv
}

/// Reorders the last axis: `out[.., t] = in[.., index[t]]`.
struct GatherLast {
    index: Arc<Vec<usize>>,
    in_len: usize,
}

impl<T: Scalar> Backward<T> for GatherLast {
    fn name(&self) -> &'static str {
        "gather_pixels"
    }

    fn backward(
        &self,
        inputs: &[Var<T>],
        _: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let n = self.index.len();
        let mut gx = vec![T::zero(); inputs[0].value().len()];
        for (row, g) in gx.chunks_mut(self.in_len).zip(grad_out.data().chunks(n)) {
            for (t, &p) in self.index.iter().enumerate() {
                row[p] += g[t];
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape(), gx)?)])
    }
}

fn gather_last<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    index: Vec<usize>,
    in_len: usize,
    out_shape: &[usize],
) -> Result<Var<T>> {
    let n = index.len();
    let mut out = Vec::with_capacity(x.value().len() / in_len * n);
    for row in x.data().chunks(in_len) {
        out.extend(index.iter().map(|&p| row[p]));
    }
    let out = Tensor::new(out_shape, out)?;
    g.custom(
        Box::new(GatherLast {
            index: Arc::new(index),
            in_len,
        }),
        vec![x.clone()],
        out,
    )
}

/// `(B, C, H, W)` to `(B, C, H*W)` in the direction's visiting order.
pub fn flatten<T: Scalar>(g: &Graph<T>, x: &Var<T>, dir: ScanDirection) -> Result<Var<T>> {
    let (b, c, h, w) = x.value().dims4()?;
    gather_last(g, x, dir.order(h, w), h * w, &[b, c, h * w])
}

/// Inverse of [`flatten`].
pub fn unflatten<T: Scalar>(
    g: &Graph<T>,
    y: &Var<T>,
    dir: ScanDirection,
    height: usize,
    width: usize,
) -> Result<Var<T>> {
    let (b, c, n) = match y.shape() {
        [b, c, n] => (*b, *c, *n),
        s => return shape_err(format!("unflatten: expected (B, C, L), got {s:?}")),
    };
    if n != height * width {
        return shape_err(format!("unflatten: length {n} is not {height}x{width}"));
    }
    gather_last(
        g,
        y,
        invert(&dir.order(height, width)),
        n,
        &[b, c, height, width],
    )
}

/// Dimensions of one fused scan call.
#[derive(Debug, Clone, Copy)]
struct ScanDims {
    batch: usize,
    channels: usize,
    state: usize,
    len: usize,
}

struct ScanRule<T> {
    dims: ScanDims,
    /// `h_t` for every batch item and step, laid out `(B, L, C, S)`.
    states: Vec<T>,
}

fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..cols {
        out.extend((0..rows).map(|r| src[r * cols + c]));
    }
    out
}

/// Runs the recurrence for one batch item. `x`, `delta` are `(L, C)`, `b`, `c`
/// are `(L, S)`, `a` is `(C, S)`; returns `y` as `(L, C)`.
#[allow(clippy::too_many_arguments)]
fn scan_item<T: Scalar>(
    dims: ScanDims,
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    mut states: Option<&mut [T]>,
) -> Vec<T> {
    let (ch, st) = (dims.channels, dims.state);
    let mut h = vec![T::zero(); ch * st];
    let mut y = vec![T::zero(); dims.len * ch];
    for t in 0..dims.len {
        let bt = &b[t * st..][..st];
        let ct = &c[t * st..][..st];
        for k in 0..ch {
            let xv = x[t * ch + k];
            let dt = delta[t * ch + k];
            let dx = dt * xv;
            let hk = &mut h[k * st..][..st];
            let ak = &a[k * st..][..st];
            let mut acc = T::zero();
            for s in 0..st {
                let v = (dt * ak[s]).exp() * hk[s] + dx * bt[s];
                hk[s] = v;
                acc += ct[s] * v;
            }
            y[t * ch + k] = acc + d[k] * xv;
        }
        if let Some(buf) = states.as_deref_mut() {
            buf[t * ch * st..][..ch * st].copy_from_slice(&h);
        }
    }
    y
}

impl<T: Scalar> Backward<T> for ScanRule<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        inputs: &[Var<T>],
        _: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let ScanDims {
            batch,
            channels: ch,
            state: st,
            len,
        } = self.dims;
        let a = inputs[2].data();
        let d = inputs[5].data();
        let mut gx = vec![T::zero(); batch * ch * len];
        let mut gdelta = vec![T::zero(); batch * ch * len];
        let mut ga = vec![T::zero(); ch * st];
        let mut gb = vec![T::zero(); batch * st * len];
        let mut gc = vec![T::zero(); batch * st * len];
        let mut gd = vec![T::zero(); ch];
        let zeros = vec![T::zero(); ch * st];
        let mut carry = vec![T::zero(); ch * st];
        for bi in 0..batch {
            let x = transpose(&inputs[0].data()[bi * ch * len..][..ch * len], ch, len);
            let delta = transpose(&inputs[1].data()[bi * ch * len..][..ch * len], ch, len);
            let b = transpose(&inputs[3].data()[bi * st * len..][..st * len], st, len);
            let c = transpose(&inputs[4].data()[bi * st * len..][..st * len], st, len);
            let gy = transpose(&grad_out.data()[bi * ch * len..][..ch * len], ch, len);
            let states = &self.states[bi * len * ch * st..][..len * ch * st];
            // Per-item accumulators in (L, C) / (L, S) layout.
            let mut gx_i = vec![T::zero(); len * ch];
            let mut gdelta_i = vec![T::zero(); len * ch];
            let mut gb_i = vec![T::zero(); len * st];
            let mut gc_i = vec![T::zero(); len * st];
            carry.iter_mut().for_each(|v| *v = T::zero());
            for t in (0..len).rev() {
                let h_t = &states[t * ch * st..][..ch * st];
                let h_prev = if t == 0 {
                    &zeros[..]
                } else {
                    &states[(t - 1) * ch * st..][..ch * st]
                };
                let bt = &b[t * st..][..st];
                let ct = &c[t * st..][..st];
                for k in 0..ch {
                    let xv = x[t * ch + k];
                    let dt = delta[t * ch + k];
                    let gyv = gy[t * ch + k];
                    let mut gdel = T::zero();
                    let mut gxv = gyv * d[k];
                    gd[k] += gyv * xv;
                    for s in 0..st {
                        let i = k * st + s;
                        let gh = gyv * ct[s] + carry[i];
                        gc_i[t * st + s] += gyv * h_t[i];
                        let abar = (dt * a[i]).exp();
                        let via_state = gh * h_prev[i] * abar;
                        gdel = gdel + via_state * a[i] + gh * bt[s] * xv;
                        ga[i] += via_state * dt;
                        gb_i[t * st + s] += gh * dt * xv;
                        gxv += gh * dt * bt[s];
                        carry[i] = gh * abar;
                    }
                    gdelta_i[t * ch + k] = gdel;
                    gx_i[t * ch + k] = gxv;
                }
            }
            gx[bi * ch * len..][..ch * len].copy_from_slice(&transpose(&gx_i, len, ch));
            gdelta[bi * ch * len..][..ch * len].copy_from_slice(&transpose(&gdelta_i, len, ch));
            gb[bi * st * len..][..st * len].copy_from_slice(&transpose(&gb_i, len, st));
            gc[bi * st * len..][..st * len].copy_from_slice(&transpose(&gc_i, len, st));
        }
        Ok(vec![
            Some(Tensor::new(inputs[0].shape(), gx)?),
            Some(Tensor::new(inputs[1].shape(), gdelta)?),
            Some(Tensor::new(inputs[2].shape(), ga)?),
            Some(Tensor::new(inputs[3].shape(), gb)?),
            Some(Tensor::new(inputs[4].shape(), gc)?),
            Some(Tensor::new(inputs[5].shape(), gd)?),
        ])
    }
}

/// The fused recurrence on already-projected inputs.
///
/// Shapes: `x`, `delta` are `(B, C, L)`; `a` is `(C, S)`; `b`, `c` are
/// `(B, S, L)`; `d` is `(C)`. `a` should be negative and `delta` nonnegative
/// for the recurrence to be contractive, but only `delta >= 0` is enforced.
pub fn scan_op<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    delta: &Var<T>,
    a: &Var<T>,
    b: &Var<T>,
    c: &Var<T>,
    d: &Var<T>,
) -> Result<Var<T>> {
    let (batch, ch, len) = match x.shape() {
        [b, c, l] => (*b, *c, *l),
        s => return shape_err(format!("selective_scan: x must be (B, C, L), got {s:?}")),
    };
    let st = match a.shape() {
        [c2, s] if *c2 == ch => *s,
        s => return shape_err(format!("selective_scan: A {s:?} for {ch} channels")),
    };
    if delta.shape() != x.shape() {
        return shape_err(format!(
            "selective_scan: delta {:?} vs x {:?}",
            delta.shape(),
            x.shape()
        ));
    }
    for (name, v) in [("B", b), ("C", c)] {
        if v.shape() != [batch, st, len] {
            return shape_err(format!(
                "selective_scan: {name} {:?}, expected {:?}",
                v.shape(),
                [batch, st, len]
            ));
        }
    }
    if d.shape() != [ch] {
        return shape_err(format!(
            "selective_scan: D {:?} for {ch} channels",
            d.shape()
        ));
    }
    if let Some(v) = delta.data().iter().find(|v| !(**v >= T::zero())) {
        return Err(Error::Param(format!(
            "selective_scan: negative step size {v}"
        )));
    }
    let dims = ScanDims {
        batch,
        channels: ch,
        state: st,
        len,
    };
    let inputs = [x, delta, a, b, c, d];
    let record = g.is_recording() && inputs.iter().any(|v| v.is_tracked());
    let mut states = if record {
        vec![T::zero(); batch * len * ch * st]
    } else {
        Vec::new()
    };
    let mut y = vec![T::zero(); batch * ch * len];
    for bi in 0..batch {
        let xs = transpose(&x.data()[bi * ch * len..][..ch * len], ch, len);
        let ds = transpose(&delta.data()[bi * ch * len..][..ch * len], ch, len);
        let bs = transpose(&b.data()[bi * st * len..][..st * len], st, len);
        let cs = transpose(&c.data()[bi * st * len..][..st * len], st, len);
        let hist = record.then(|| &mut states[bi * len * ch * st..][..len * ch * st]);
        let yi = scan_item(dims, &xs, &ds, a.data(), &bs, &cs, d.data(), hist);
        y[bi * ch * len..][..ch * len].copy_from_slice(&transpose(&yi, len, ch));
    }
    let out = Tensor::new(&[batch, ch, len], y)?;
    let rule = ScanRule { dims, states };
    g.custom(Box::new(rule), inputs.into_iter().cloned().collect(), out)
}

/// Parameters of one selective scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SsmParams {
    pub channels: usize,
    pub state_dim: usize,
    /// `(C, S)`; the state matrix is `-exp(a_log)`.
    pub a_log: ParamId,
    /// `(C)` direct path.
    pub d_skip: ParamId,
    /// `(S, C)`, no bias.
    pub proj_b: ParamId,
    /// `(S, C)`, no bias.
    pub proj_c: ParamId,
    /// `(C, C)`.
    pub proj_delta_weight: ParamId,
    /// `(C)`.
    pub proj_delta_bias: ParamId,
}

impl SsmParams {
    /// Registers `{prefix}.*` with the standard initialisation: `a_log` row
    /// `log(1..=S)`, `d_skip = 1`, fan-in uniform projections and a step bias
    /// placing `softplus(bias)` log-uniformly in [`DELTA_INIT_RANGE`].
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let a_log = Tensor::from_fn(&[channels, state_dim], |i| {
            T::of(((i % state_dim) + 1) as f64).ln()
        });
        let (lo, hi) = (DELTA_INIT_RANGE.0.ln(), DELTA_INIT_RANGE.1.ln());
        let proj_b = init::fan_in_uniform(rng, &[state_dim, channels], channels);
        let proj_c = init::fan_in_uniform(rng, &[state_dim, channels], channels);
        let proj_delta_weight = init::fan_in_uniform(rng, &[channels, channels], channels);
        let proj_delta_bias = Tensor::from_fn(&[channels], |_| {
            let dt = rng.random_range(lo..hi).exp();
            T::of(dt.exp_m1().ln())
        });
        SsmParams {
            channels,
            state_dim,
            a_log: store.add(format!("{prefix}.a_log"), a_log),
            d_skip: store.add(
                format!("{prefix}.d_skip"),
                Tensor::full(&[channels], T::one()),
            ),
            proj_b: store.add(format!("{prefix}.proj_b"), proj_b),
            proj_c: store.add(format!("{prefix}.proj_c"), proj_c),
            proj_delta_weight: store.add(format!("{prefix}.proj_delta.weight"), proj_delta_weight),
            proj_delta_bias: store.add(format!("{prefix}.proj_delta.bias"), proj_delta_bias),
        }
    }
}

/// Selective scan of a `(B, C, L)` sequence.
pub fn selective_scan<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    x: &Var<T>,
    p: &SsmParams,
) -> Result<Var<T>> {
    if x.shape().len() != 3 || x.shape()[1] != p.channels {
        return shape_err(format!(
            "selective_scan: input {:?} for {} channels",
            x.shape(),
            p.channels
        ));
    }
    let w_delta = g.param(store, p.proj_delta_weight);
    let b_delta = g.param(store, p.proj_delta_bias);
    let delta = g.softplus(&g.linear_axis(x, &w_delta, Some(&b_delta), 1)?)?;
    let b = g.linear_axis(x, &g.param(store, p.proj_b), None, 1)?;
    let c = g.linear_axis(x, &g.param(store, p.proj_c), None, 1)?;
    let a = g.scale(&g.exp(&g.param(store, p.a_log))?, -T::one())?;
    scan_op(g, x, &delta, &a, &b, &c, &g.param(store, p.d_skip))
}

/// One [`SsmParams`] per scan direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scan2dParams {
    pub directions: Vec<(ScanDirection, SsmParams)>,
}

impl Scan2dParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state_dim: usize,
        directions: &[ScanDirection],
        rng: &mut impl Rng,
    ) -> Self {
        let directions = directions
            .iter()
            .map(|&d| {
                (
                    d,
                    SsmParams::register(
                        store,
                        &format!("{prefix}.{}", d.tag()),
                        channels,
                        state_dim,
                        rng,
                    ),
                )
            })
            .collect();
        Scan2dParams { directions }
    }

    pub fn channels(&self) -> usize {
        self.directions.first().map_or(0, |(_, p)| p.channels)
    }
}

/// Sum over directions of flatten, selective scan, unflatten.
pub fn scan_2d<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    x: &Var<T>,
    p: &Scan2dParams,
) -> Result<Var<T>> {
    let (_, _, h, w) = x.value().dims4()?;
    if p.directions.is_empty() {
        return Err(Error::Config("scan_2d needs at least one direction".into()));
    }
    let mut total: Option<Var<T>> = None;
    for (dir, params) in &p.directions {
        let seq = flatten(g, x, *dir)?;
        let y = unflatten(g, &selective_scan(g, store, &seq, params)?, *dir, h, w)?;
        total = Some(match total {
            None => y,
            Some(acc) => g.add(&acc, &y)?,
        });
    }
    Ok(total.expect("at least one direction"))
}

/// Parameters of the state space block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SsbParams {
    pub channels: usize,
    /// `(C, 1, 3, 3)` depthwise kernel, no bias.
    pub dconv: ParamId,
    pub scan: Scan2dParams,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
}

impl SsbParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state_dim: usize,
        directions: &[ScanDirection],
        rng: &mut impl Rng,
    ) -> Self {
        let dconv = init::fan_in_uniform(rng, &[channels, 1, 3, 3], 9);
        SsbParams {
            channels,
            dconv: store.add(format!("{prefix}.dconv"), dconv),
            scan: Scan2dParams::register(
                store,
                &format!("{prefix}.scan"),
                channels,
                state_dim,
                directions,
                rng,
            ),
            norm_gamma: store.add(
                format!("{prefix}.norm.gamma"),
                Tensor::full(&[channels], T::one()),
            ),
            norm_beta: store.add(format!("{prefix}.norm.beta"), Tensor::zeros(&[channels])),
        }
    }
}

/// `LayerNorm(scan_2d(SiLU(DConv(x))))`.
pub fn ssb<T: Scalar>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    x: &Var<T>,
    p: &SsbParams,
) -> Result<Var<T>> {
    let (_, c, _, _) = x.value().dims4()?;
    if c != p.channels {
        return shape_err(format!(
            "ssb: input has {c} channels, block expects {}",
            p.channels
        ));
    }
    let conv = g.depthwise_conv2d(x, &g.param(store, p.dconv), 1)?;
    let scanned = scan_2d(g, store, &g.silu(&conv)?, &p.scan)?;
    g.layer_norm(
        &scanned,
        &g.param(store, p.norm_gamma),
        &g.param(store, p.norm_beta),
        T::of(LAYER_NORM_EPS),
    )
}

#[cfg(test)]
mod tests;
