//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive executed on tracked values, in
//! execution order. Node indices are therefore a topological order and the
//! reverse pass simply walks them backwards. A graph can be backpropagated
//! exactly once; accumulation across graphs goes through
//! [`Gradients::accumulate_into`].

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::numcore::kernels::{self, ConvGeom};
use crate::numcore::{ParamId, ParamStore, Scalar, Tensor};

/// A value flowing through a [`Graph`]. Untracked values (constants, or any
/// value produced while recording is off) carry no node.
#[derive(Debug, Clone)]
pub struct Var<T> {
    node: Option<usize>,
    value: Arc<Tensor<T>>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn node(&self) -> Option<usize> {
        self.node
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }
}

/// Backward rule for an operation defined outside the numeric core.
pub trait Backward<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` for inputs that need none).
    fn backward(
        &self,
        inputs: &[Var<T>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(T),
    MulScalar,
    MulChannel,
    Conv(ConvGeom),
    LayerNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        dims: (usize, usize, usize),
    },
    Linear {
        dims: (usize, usize, usize),
        fout: usize,
    },
    Silu,
    Sigmoid,
    Relu,
    Softplus,
    Exp,
    Softmax {
        dims: (usize, usize, usize),
    },
    GlobalAvgPool,
    Upsample2x,
    Crop {
        top: usize,
        left: usize,
    },
    Clamp {
        lo: T,
        hi: T,
    },
    Sum,
    Mean,
    Custom(Box<dyn Backward<T>>),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MulScalar => "mul_scalar",
            Op::MulChannel => "mul_channel",
            Op::Conv(_) => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Linear { .. } => "linear",
            Op::Silu => "silu",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Softplus => "softplus",
            Op::Exp => "exp",
            Op::Softmax { .. } => "softmax",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Upsample2x => "upsample2x",
            Op::Crop { .. } => "crop",
            Op::Clamp { .. } => "clamp",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Custom(b) => b.name(),
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<Var<T>>,
    value: Arc<Tensor<T>>,
}

/// The computation record: an ordered list of executed primitives.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, Var<T>>>,
    recording: bool,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn tensor<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("kernel produced a buffer of the wrong size")
}

fn same_shape<T: Scalar>(op: &str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return shape_err(format!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        (T::one() + (-v).exp()).recip()
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(v: T) -> T {
    // log(1 + e^v) without overflow
    if v > T::of(30.0) {
        v
    } else {
        v.max(T::zero()) + (-(v.abs())).exp().ln_1p()
    }
}

impl<T: Scalar> Graph<T> {
    /// A recording graph.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            recording: true,
            consumed: Cell::new(false),
        }
    }

    /// A graph that evaluates but records nothing; every value is a constant.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of the recorded primitives in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.name()).collect()
    }

    fn push(&self, op: Op<T>, inputs: Vec<Var<T>>, value: Tensor<T>) -> Result<Var<T>> {
        value.ensure_finite(op.name())?;
        let value = Arc::new(value);
        if !self.recording || !inputs.iter().any(Var::is_tracked) {
            return Ok(Var { node: None, value });
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            inputs,
            value: Arc::clone(&value),
        });
        Ok(Var {
            node: Some(id),
            value,
        })
    }

    fn leaf(&self, value: Arc<Tensor<T>>) -> Var<T> {
        if !self.recording {
            return Var { node: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: Arc::clone(&value),
        });
        Var {
            node: Some(id),
            value,
        }
    }

    /// An untracked input.
    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var {
            node: None,
            value: Arc::new(t),
        }
    }

    /// A tracked input whose gradient will be reported by [`Graph::backward`].
    pub fn variable(&self, t: Tensor<T>) -> Var<T> {
        self.leaf(Arc::new(t))
    }

    /// The tracked leaf for a stored parameter; repeated calls share one leaf.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<T> {
        if let Some(v) = self.params.borrow().get(&id) {
            return v.clone();
        }
        let t = store.shared(id);
        let v = if t.requires_grad() {
            self.leaf(t)
        } else {
            Var {
                node: None,
                value: t,
            }
        };
        self.params.borrow_mut().insert(id, v.clone());
        v
    }

    /// Registers a primitive implemented elsewhere.
    pub fn custom(
        &self,
        rule: Box<dyn Backward<T>>,
        inputs: Vec<Var<T>>,
        output: Tensor<T>,
    ) -> Result<Var<T>> {
        self.push(Op::Custom(rule), inputs, output)
    }

    fn zip_map(&self, op: Op<T>, a: &Var<T>, b: &Var<T>, f: impl Fn(T, T) -> T) -> Result<Var<T>> {
        same_shape(op.name(), a, b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = tensor(a.shape(), data);
        self.push(op, vec![a.clone(), b.clone()], out)
    }

    fn unary(&self, op: Op<T>, x: &Var<T>, f: impl Fn(T) -> T) -> Result<Var<T>> {
        let out = x.value().map(f);
        self.push(op, vec![x.clone()], out)
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.zip_map(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.zip_map(Op::Sub, a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.zip_map(Op::Mul, a, b, |x, y| x * y)
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&self, x: &Var<T>, c: T) -> Result<Var<T>> {
        self.unary(Op::Scale(c), x, |v| v * c)
    }

    /// Multiplies `x` by the single element of `s`.
    pub fn mul_scalar(&self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        if s.value().len() != 1 {
            return shape_err(format!("mul_scalar: scale has shape {:?}", s.shape()));
        }
        let c = s.data()[0];
        let out = x.value().map(|v| v * c);
        self.push(Op::MulScalar, vec![x.clone(), s.clone()], out)
    }

    /// Rescales each channel of `x: (B, C, H, W)` by `s: (B, C, 1, 1)`.
    pub fn mul_channel(&self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        let (b, c, h, w) = x.value().dims4()?;
        if s.shape() != [b, c, 1, 1] {
            return shape_err(format!(
                "mul_channel: scale {:?} for input {:?}",
                s.shape(),
                x.shape()
            ));
        }
        let hw = h * w;
        let sd = s.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sd[i / hw])
            .collect();
        let out = tensor(x.shape(), data);
        self.push(Op::MulChannel, vec![x.clone(), s.clone()], out)
    }

    fn conv_impl(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<T>> {
        let (b, c, h, w) = x.value().dims4()?;
        let (oc, icg, kh, kw) = weight.value().dims4()?;
        if kh != kw {
            return shape_err(format!("conv2d: non-square kernel {kh}x{kw}"));
        }
        if stride == 0 {
            return shape_err("conv2d: stride must be positive");
        }
        if c % groups != 0 || oc % groups != 0 || icg * groups != c {
            return shape_err(format!(
                "conv2d: weight {:?} incompatible with {c} input channels (groups {groups})",
                weight.shape()
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return shape_err(format!(
                "conv2d: kernel {kh} larger than padded input {h}x{w}"
            ));
        }
        if let Some(bv) = bias {
            if bv.shape() != [oc] {
                return shape_err(format!(
                    "conv2d: bias {:?} for {oc} output channels",
                    bv.shape()
                ));
            }
        }
        let geom = ConvGeom {
            batch: b,
            in_ch: c,
            out_ch: oc,
            height: h,
            width: w,
            kernel: kh,
            stride,
            padding,
            groups,
        };
        let (oh, ow) = geom.out_hw();
        let data = kernels::conv2d(&geom, x.data(), weight.data(), bias.map(|v| v.data()));
        let out = tensor(&[b, oc, oh, ow], data);
        let mut inputs = vec![x.clone(), weight.clone()];
        if let Some(bv) = bias {
            inputs.push(bv.clone());
        }
        self.push(Op::Conv(geom), inputs, out)
    }

    /// 2-D cross-correlation. `weight: (out_ch, in_ch, k, k)`, `bias: (out_ch)`.
    pub fn conv2d(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: &Var<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        self.conv_impl(x, weight, Some(bias), stride, padding, 1)
    }

    /// Per-channel convolution without bias. `weight: (ch, 1, k, k)`.
    pub fn depthwise_conv2d(&self, x: &Var<T>, weight: &Var<T>, padding: usize) -> Result<Var<T>> {
        let (_, c, _, _) = x.value().dims4()?;
        let (wc, one, _, _) = weight.value().dims4()?;
        if wc != c || one != 1 {
            return shape_err(format!(
                "depthwise_conv2d: weight {:?} for {c} channels",
                weight.shape()
            ));
        }
        self.conv_impl(x, weight, None, 1, padding, c)
    }

    /// Normalises over axis 1 (channels) at every other position, then applies
    /// the per-channel affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
        if !(eps > T::zero()) {
            return Err(Error::Param(format!(
                "layer_norm: eps must be positive, got {eps}"
            )));
        }
        let dims = split_axis(x.shape(), 1)?;
        if gamma.shape() != [dims.1] || beta.shape() != [dims.1] {
            return shape_err(format!(
                "layer_norm: affine shapes {:?}/{:?} for {} channels",
                gamma.shape(),
                beta.shape(),
                dims.1
            ));
        }
        let (y, xhat, inv_std) = kernels::layer_norm(
            x.data(),
            dims.0,
            dims.1,
            dims.2,
            gamma.data(),
            beta.data(),
            eps,
        );
        let out = tensor(x.shape(), y);
        self.push(
            Op::LayerNorm {
                xhat,
                inv_std,
                dims,
            },
            vec![x.clone(), gamma.clone(), beta.clone()],
            out,
        )
    }

    /// Affine map along `axis`: `weight: (out, in)`, optional `bias: (out)`.
    pub fn linear_axis(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        axis: usize,
    ) -> Result<Var<T>> {
        let dims = split_axis(x.shape(), axis)?;
        let (fout, fin) = match weight.shape() {
            [o, i] => (*o, *i),
            s => return shape_err(format!("linear: weight must be rank 2, got {s:?}")),
        };
        if fin != dims.1 {
            return shape_err(format!(
                "linear: weight {:?} cannot map feature size {}",
                weight.shape(),
                dims.1
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [fout] {
                return shape_err(format!("linear: bias {:?} for {fout} outputs", b.shape()));
            }
        }
        let y = kernels::linear(
            x.data(),
            dims.0,
            fin,
            dims.2,
            weight.data(),
            fout,
            bias.map(|b| b.data()),
        );
        let mut shape = x.shape().to_vec();
        shape[axis] = fout;
        let mut inputs = vec![x.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        self.push(Op::Linear { dims, fout }, inputs, tensor(&shape, y))
    }

    /// Affine map along the last dimension.
    pub fn linear(&self, x: &Var<T>, weight: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let axis = x
            .shape()
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Shape("linear: rank-0 input".into()))?;
        self.linear_axis(x, weight, Some(bias), axis)
    }

    pub fn silu(&self, x: &Var<T>) -> Result<Var<T>> {
        self.unary(Op::Silu, x, |v| v * sigmoid(v))
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Result<Var<T>> {
        self.unary(Op::Sigmoid, x, sigmoid)
    }

    pub fn relu(&self, x: &Var<T>) -> Result<Var<T>> {
        self.unary(Op::Relu, x, |v| v.max(T::zero()))
    }

    pub fn softplus(&self, x: &Var<T>) -> Result<Var<T>> {
        self.unary(Op::Softplus, x, softplus)
    }

    pub fn exp(&self, x: &Var<T>) -> Result<Var<T>> {
        self.unary(Op::Exp, x, |v| v.exp())
    }

    pub fn softmax(&self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        if !x.value().all_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let dims = split_axis(x.shape(), axis)?;
        let y = kernels::softmax(x.data(), dims.0, dims.1, dims.2);
        self.push(Op::Softmax { dims }, vec![x.clone()], tensor(x.shape(), y))
    }

    /// `(B, C, H, W) -> (B, C, 1, 1)` spatial mean.
    pub fn global_avg_pool(&self, x: &Var<T>) -> Result<Var<T>> {
        let (b, c, h, w) = x.value().dims4()?;
        let n = T::of((h * w) as f64);
        let data = x
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        self.push(
            Op::GlobalAvgPool,
            vec![x.clone()],
            tensor(&[b, c, 1, 1], data),
        )
    }

    pub fn upsample2x(&self, x: &Var<T>) -> Result<Var<T>> {
        let (b, c, h, w) = x.value().dims4()?;
        let y = kernels::upsample2x(x.data(), b * c, h, w);
        self.push(
            Op::Upsample2x,
            vec![x.clone()],
            tensor(&[b, c, 2 * h, 2 * w], y),
        )
    }

    /// Spatial window `[top, top+height) x [left, left+width)`.
    pub fn crop(
        &self,
        x: &Var<T>,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    ) -> Result<Var<T>> {
        let (b, c, h, w) = x.value().dims4()?;
        if top + height > h || left + width > w {
            return shape_err(format!("crop window exceeds {h}x{w}"));
        }
        let mut data = Vec::with_capacity(b * c * height * width);
        for p in 0..b * c {
            for y in top..top + height {
                let row = &x.data()[(p * h + y) * w..][..w];
                data.extend_from_slice(&row[left..left + width]);
            }
        }
        self.push(
            Op::Crop { top, left },
            vec![x.clone()],
            tensor(&[b, c, height, width], data),
        )
    }

    pub fn clamp(&self, x: &Var<T>, lo: T, hi: T) -> Result<Var<T>> {
        self.unary(Op::Clamp { lo, hi }, x, |v| v.max(lo).min(hi))
    }

    pub fn sum(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.value().sum();
        self.push(Op::Sum, vec![x.clone()], Tensor::scalar(s))
    }

    pub fn mean(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.value().sum() / T::of(x.value().len() as f64);
        self.push(Op::Mean, vec![x.clone()], Tensor::scalar(s))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// A graph may be backpropagated once; a second call is a contract error.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value().len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if self.consumed.replace(true) {
            return Err(Error::Contract("graph was already backpropagated".into()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let params = self
            .params
            .borrow()
            .iter()
            .filter_map(|(id, v)| v.node.map(|n| (*id, n)))
            .collect::<HashMap<_, _>>();
        let Some(root) = loss.node else {
            return Ok(Gradients { grads, params });
        };
        grads[root] = Some(vec![T::one()]);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !matches!(node.op, Op::Leaf) {
                let gout = tensor(node.value.shape(), g);
                let input_grads = backward_node(node, &gout)?;
                for (inp, ig) in node.inputs.iter().zip(input_grads) {
                    let (Some(nid), Some(ig)) = (inp.node, ig) else {
                        continue;
                    };
                    match &mut grads[nid] {
                        Some(acc) => acc.iter_mut().zip(ig.data()).for_each(|(a, &b)| *a += b),
                        slot @ None => *slot = Some(ig.into_data()),
                    }
                }
                grads[id] = None;
            } else {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads, params })
    }
}

fn backward_node<T: Scalar>(node: &Node<T>, gout: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
    let inp = &node.inputs;
    let g = gout.data();
    let x0 = || inp[0].value();
    let like = |t: &Tensor<T>, data: Vec<T>| Some(tensor(t.shape(), data));
    let elementwise = |f: &dyn Fn(usize) -> T| -> Vec<Option<Tensor<T>>> {
        let data = (0..g.len()).map(f).collect();
        vec![like(x0(), data)]
    };
    let res = match &node.op {
        Op::Leaf => vec![],
        Op::Add => vec![like(x0(), g.to_vec()), like(x0(), g.to_vec())],
        Op::Sub => vec![
            like(x0(), g.to_vec()),
            like(x0(), g.iter().map(|&v| -v).collect()),
        ],
        Op::Mul => {
            let (a, b) = (inp[0].data(), inp[1].data());
            vec![
                like(x0(), g.iter().zip(b).map(|(&gv, &bv)| gv * bv).collect()),
                like(x0(), g.iter().zip(a).map(|(&gv, &av)| gv * av).collect()),
            ]
        }
        Op::Scale(c) => elementwise(&|i| g[i] * *c),
        Op::MulScalar => {
            let s = inp[1].data()[0];
            let x = inp[0].data();
            let gs: T = g.iter().zip(x).map(|(&gv, &xv)| gv * xv).sum();
            vec![
                like(x0(), g.iter().map(|&gv| gv * s).collect()),
                Some(Tensor::scalar(gs)),
            ]
        }
        Op::MulChannel => {
            let (_, _, h, w) = x0().dims4()?;
            let hw = h * w;
            let (x, s) = (inp[0].data(), inp[1].data());
            let gx = g
                .iter()
                .enumerate()
                .map(|(i, &gv)| gv * s[i / hw])
                .collect();
            let gs = g
                .chunks(hw)
                .zip(x.chunks(hw))
                .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                .collect();
            vec![like(x0(), gx), like(inp[1].value(), gs)]
        }
        Op::Conv(geom) => {
            let (gx, gw, gb) = kernels::conv2d_backward(geom, inp[0].data(), inp[1].data(), g);
            let mut v = vec![like(x0(), gx), like(inp[1].value(), gw)];
            if inp.len() == 3 {
                v.push(like(inp[2].value(), gb));
            }
            v
        }
        Op::LayerNorm {
            xhat,
            inv_std,
            dims,
        } => {
            let (gx, gg, gb) = kernels::layer_norm_backward(
                g,
                xhat,
                inv_std,
                inp[1].data(),
                dims.0,
                dims.1,
                dims.2,
            );
            vec![
                like(x0(), gx),
                like(inp[1].value(), gg),
                like(inp[2].value(), gb),
            ]
        }
        Op::Linear { dims, fout } => {
            let (gx, gw, gb) = kernels::linear_backward(
                inp[0].data(),
                dims.0,
                dims.1,
                dims.2,
                inp[1].data(),
                *fout,
                g,
            );
            let mut v = vec![like(x0(), gx), like(inp[1].value(), gw)];
            if inp.len() == 3 {
                v.push(like(inp[2].value(), gb));
            }
            v
        }
        Op::Silu => {
            let x = inp[0].data();
            elementwise(&|i| {
                let s = sigmoid(x[i]);
                g[i] * s * (T::one() + x[i] * (T::one() - s))
            })
        }
        Op::Sigmoid => {
            let y = node.value.data();
            elementwise(&|i| g[i] * y[i] * (T::one() - y[i]))
        }
        Op::Relu => {
            let x = inp[0].data();
            elementwise(&|i| if x[i] > T::zero() { g[i] } else { T::zero() })
        }
        Op::Softplus => {
            let x = inp[0].data();
            elementwise(&|i| g[i] * sigmoid(x[i]))
        }
        Op::Exp => {
            let y = node.value.data();
            elementwise(&|i| g[i] * y[i])
        }
        Op::Softmax { dims } => {
            vec![like(
                x0(),
                kernels::softmax_backward(node.value.data(), g, dims.0, dims.1, dims.2),
            )]
        }
        Op::GlobalAvgPool => {
            let (_, _, h, w) = x0().dims4()?;
            let n = T::of((h * w) as f64);
            let gx = (0..x0().len()).map(|i| g[i / (h * w)] / n).collect();
            vec![like(x0(), gx)]
        }
        Op::Upsample2x => {
            let (b, c, h, w) = x0().dims4()?;
            vec![like(x0(), kernels::upsample2x_backward(g, b * c, h, w))]
        }
        Op::Crop { top, left } => {
            let (b, c, h, w) = x0().dims4()?;
            let (_, _, ch, cw) = gout.dims4()?;
            let mut gx = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                for y in 0..ch {
                    let src = &g[(p * ch + y) * cw..][..cw];
                    let dst = &mut gx[(p * h + y + top) * w + left..][..cw];
                    dst.copy_from_slice(src);
                }
            }
            vec![like(x0(), gx)]
        }
        Op::Clamp { lo, hi } => {
            let x = inp[0].data();
            elementwise(&|i| {
                if x[i] >= *lo && x[i] <= *hi {
                    g[i]
                } else {
                    T::zero()
                }
            })
        }
        Op::Sum => {
            let n = x0().len();
            vec![like(x0(), vec![g[0]; n])]
        }
        Op::Mean => {
            let n = x0().len();
            vec![like(x0(), vec![g[0] / T::of(n as f64); n])]
        }
        Op::Custom(rule) => rule.backward(inp, &node.value, gout)?,
    };
    Ok(res)
}

/// Result of a reverse pass: gradients of every tracked node that influences
/// the loss.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a tracked leaf (input variable or parameter); `None` if it
    /// does not reach the loss. Interior gradients are released during the pass.
    pub fn get(&self, v: &Var<T>) -> Option<Tensor<T>> {
        let id = v.node?;
        let g = self.grads.get(id)?.as_ref()?;
        Some(tensor(v.shape(), g.clone()))
    }

    /// Gradient of `v`, or zeros when it does not reach the loss.
    pub fn get_or_zero(&self, v: &Var<T>) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    /// Raw gradient of a parameter used in the graph.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        let node = *self.params.get(&id)?;
        self.grads.get(node)?.as_deref()
    }

    /// Adds parameter gradients into each stored tensor's `grad` buffer.
    /// Every trainable parameter ends up with a buffer; parameters outside
    /// the graph receive zeros.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.get(id).requires_grad() {
                continue;
            }
            let t = store.get_mut(id);
            match self.param(id) {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    let zeros = vec![T::zero(); t.len()];
                    t.accumulate_grad(&zeros)?
                }
            }
        }
        Ok(())
    }
}
