//! Tape-based reverse-mode autodiff over dense tensors.
//!
//! Values are evaluated eagerly; every operation appends a node to the tape.
//! `backward` builds the gradients *as graph nodes*, so a scalar formed from
//! gradient nodes can itself be differentiated again. The gradient penalty
//! relies on this: it needs the derivative of a gradient norm with respect to
//! the critic weights.
//!
//! The convolution family is closed under differentiation: the VJP of
//! `conv2d` is expressed with `conv_transpose2d` and `conv2d_wgrad`, and vice
//! versa, so higher-order gradients need no special casing.

use ndarray::{Array2, Array4, ArrayD, ArrayViewD, Axis, IxDyn};
use std::sync::Arc;

/// Element type the tape can operate on. f64 is used by the gradient-check
/// tests, f32 by training.
pub trait Scalar: ndarray::LinalgScalar + PartialOrd + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}
impl_scalar!(f32);
impl_scalar!(f64);

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
#[allow(dead_code)] // some recorded op arguments exist only for Debug output
enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, S),
    AddScalar(NodeId, S),
    Relu(NodeId),
    LeakyRelu(NodeId, S),
    Tanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Abs(NodeId),
    /// Elementwise multiply by a constant mask (used for the piecewise-linear
    /// activation derivatives, which are constant almost everywhere).
    MulMask(NodeId, Arc<ArrayD<S>>),
    /// Sum over the given axes, keeping them as size-1 dims.
    SumAxes(NodeId, Vec<usize>),
    /// Broadcast size-1 dims up to the target shape.
    Expand(NodeId, Vec<usize>),
    Reshape(NodeId, Vec<usize>),
    /// Concatenate along axis 1 (channels).
    ConcatC(Vec<NodeId>),
    /// Slice `[start, start+len)` along axis 1.
    SliceC(NodeId, usize, usize),
    /// Cross-correlation, weight layout `[co, ci, kh, kw]`.
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    /// Adjoint of `Conv2d` in its input, weight layout `[ci, co, kh, kw]`.
    ConvT2d { x: NodeId, w: NodeId, stride: usize, pad: usize, opad: usize },
    /// Weight gradient of `Conv2d`: output `[c_b, c_a, kh, kw]` where `a` is
    /// the conv input and `b` the output cotangent.
    WGrad { a: NodeId, b: NodeId, stride: usize, pad: usize, kh: usize, kw: usize },
}

impl<S: Scalar> Op<S> {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::MulMask(a, _)
            | Op::SumAxes(a, _)
            | Op::Expand(a, _)
            | Op::Reshape(a, _)
            | Op::SliceC(a, _, _) => vec![*a],
            Op::ConcatC(xs) => xs.clone(),
            Op::Conv2d { x, w, .. } | Op::ConvT2d { x, w, .. } => vec![*x, *w],
            Op::WGrad { a, b, .. } => vec![*a, *b],
        }
    }
}

struct Node<S: Scalar> {
    value: ArrayD<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// The tape. One `Graph` per training step; parameters live outside and are
/// re-inserted as leaves each step.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<S> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> S {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        *v.iter().next().unwrap()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: ArrayD<S>, op: Op<S>) -> NodeId {
        // the conv kernels reshape node values in place, which requires
        // standard layout; ops like concatenate may produce other layouts
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: ArrayD<S>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: ArrayD<S>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf with an explicit grad flag (inputs we differentiate against,
    /// e.g. the interpolate in the gradient penalty).
    pub fn leaf(&mut self, value: ArrayD<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| S::zero() - x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddScalar(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let z = S::zero();
        let v = self.nodes[a.0].value.mapv(|x| if x > z { x } else { z });
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: S) -> NodeId {
        let z = S::zero();
        let v = self.nodes[a.0].value.mapv(|x| if x > z { x } else { x * alpha });
        self.push(v, Op::LeakyRelu(a, alpha))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(Scalar::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(Scalar::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(Scalar::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(Scalar::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(Scalar::abs);
        self.push(v, Op::Abs(a))
    }

    fn mul_mask(&mut self, a: NodeId, mask: Arc<ArrayD<S>>) -> NodeId {
        let v = &self.nodes[a.0].value * &*mask;
        self.push(v, Op::MulMask(a, mask))
    }

    // ---- shape ----

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let mut v = self.nodes[a.0].value.clone();
        for &ax in axes {
            let summed = v.sum_axis(Axis(ax));
            v = summed.insert_axis(Axis(ax));
        }
        self.push(v, Op::SumAxes(a, axes.to_vec()))
    }

    /// Sum everything down to a `[1]` scalar node.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        let s = self.sum_axes(a, &axes);
        self.reshape(s, &[1])
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, S::from_f64(1.0 / n as f64))
    }

    /// Broadcast size-1 dims of `a` up to `target`.
    pub fn expand(&mut self, a: NodeId, target: &[usize]) -> NodeId {
        let src = self.shape(a).to_vec();
        assert_eq!(src.len(), target.len(), "expand: rank mismatch");
        for (s, t) in src.iter().zip(target) {
            assert!(s == t || *s == 1, "expand: {:?} -> {:?}", src, target);
        }
        let v = self.nodes[a.0]
            .value
            .broadcast(IxDyn(target))
            .expect("expand: broadcast failed")
            .to_owned();
        self.push(v, Op::Expand(a, target.to_vec()))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a, shape.to_vec()))
    }

    pub fn concat_c(&mut self, xs: &[NodeId]) -> NodeId {
        let views: Vec<ArrayViewD<S>> = xs.iter().map(|x| self.nodes[x.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_c: shape mismatch");
        self.push(v, Op::ConcatC(xs.to_vec()))
    }

    pub fn slice_c(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .slice_axis(Axis(1), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.push(v, Op::SliceC(a, start, len))
    }

    // ---- convolution family ----

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = conv2d_val(
            self.value(x).view().into_dimensionality().expect("conv2d: x not 4-d"),
            self.value(w).view().into_dimensionality().expect("conv2d: w not 4-d"),
            stride,
            pad,
        );
        self.push(v.into_dyn(), Op::Conv2d { x, w, stride, pad })
    }

    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        self.conv_transpose2d_opad(x, w, stride, pad, 0)
    }

    /// Transposed conv with explicit output padding; `opad < stride` rows and
    /// columns of zeros are appended so strided convolutions round-trip to the
    /// exact input size during differentiation.
    pub fn conv_transpose2d_opad(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
        opad: usize,
    ) -> NodeId {
        let v = conv_transpose2d_val(
            self.value(x).view().into_dimensionality().expect("convT: x not 4-d"),
            self.value(w).view().into_dimensionality().expect("convT: w not 4-d"),
            stride,
            pad,
            opad,
        );
        self.push(v.into_dyn(), Op::ConvT2d { x, w, stride, pad, opad })
    }

    fn wgrad(&mut self, a: NodeId, b: NodeId, stride: usize, pad: usize, kh: usize, kw: usize) -> NodeId {
        let v = wgrad_val(
            self.value(a).view().into_dimensionality().expect("wgrad: a not 4-d"),
            self.value(b).view().into_dimensionality().expect("wgrad: b not 4-d"),
            stride,
            pad,
            kh,
            kw,
        );
        self.push(v.into_dyn(), Op::WGrad { a, b, stride, pad, kh, kw })
    }

    // ---- composites ----

    /// Mean over the listed axes (keepdims).
    pub fn mean_axes(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        let shape = self.shape(a);
        let n: usize = axes.iter().map(|&ax| shape[ax]).product();
        let s = self.sum_axes(a, axes);
        self.scale(s, S::from_f64(1.0 / n as f64))
    }

    /// Instance normalization over spatial dims of `[n, c, h, w]`, with
    /// per-channel affine parameters `gamma`, `beta` of shape `[1, c, 1, 1]`.
    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: S) -> NodeId {
        let shape = self.shape(x).to_vec();
        let mu = self.mean_axes(x, &[2, 3]);
        let mu_b = self.expand(mu, &shape);
        let centered = self.sub(x, mu_b);
        let sq = self.square(centered);
        let var = self.mean_axes(sq, &[2, 3]);
        let var_eps = self.add_scalar(var, eps);
        let std = self.sqrt(var_eps);
        let std_b = self.expand(std, &shape);
        let inv = self.div(centered, std_b);
        let g = self.expand(gamma, &shape);
        let b = self.expand(beta, &shape);
        let scaled = self.mul(inv, g);
        self.add(scaled, b)
    }

    /// Elementwise division built from primitives (b must be nonzero).
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        // a / b = a * exp(-ln(b)) only works for positive b; use reciprocal
        // via ln only where callers guarantee positivity (norm denominators).
        let lb = self.ln(b);
        let nlb = self.neg(lb);
        let inv = self.exp(nlb);
        self.mul(a, inv)
    }

    // ---- backward ----

    /// Reverse-mode differentiation of the scalar `root` with respect to every
    /// reachable grad-requiring node. Gradients are appended to the tape as
    /// ordinary nodes, so they can be differentiated again.
    pub fn backward(&mut self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward: root must be scalar");
        let mut grads: Vec<Option<NodeId>> = vec![None; root.0 + 1];
        let one = ArrayD::from_elem(IxDyn(self.shape(root)), S::one());
        grads[root.0] = Some(self.constant(one));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let contributions = self.vjp(&op, NodeId(i), g);
            for (parent, grad) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                grads[parent.0] = Some(match grads[parent.0] {
                    Some(existing) => self.add(existing, grad),
                    None => grad,
                });
            }
        }
        Gradients { grads }
    }

    /// Per-op vector-Jacobian products, expressed with graph ops.
    fn vjp(&mut self, op: &Op<S>, out: NodeId, g: NodeId) -> Vec<(NodeId, NodeId)> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g), (*b, g)],
            Op::Sub(a, b) => {
                let ng = self.neg(g);
                vec![(*a, g), (*b, ng)]
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = self.mul(g, b);
                let gb = self.mul(g, a);
                vec![(a, ga), (b, gb)]
            }
            Op::Neg(a) => {
                let ng = self.neg(g);
                vec![(*a, ng)]
            }
            Op::Scale(a, c) => {
                let sg = self.scale(g, *c);
                vec![(*a, sg)]
            }
            Op::AddScalar(a, _) => vec![(*a, g)],
            Op::Relu(a) => {
                let z = S::zero();
                let mask = self.nodes[a.0].value.mapv(|x| if x > z { S::one() } else { z });
                let mg = self.mul_mask(g, Arc::new(mask));
                vec![(*a, mg)]
            }
            Op::LeakyRelu(a, alpha) => {
                let (z, al) = (S::zero(), *alpha);
                let mask = self.nodes[a.0].value.mapv(|x| if x > z { S::one() } else { al });
                let mg = self.mul_mask(g, Arc::new(mask));
                vec![(*a, mg)]
            }
            Op::Tanh(a) => {
                // d tanh = 1 - tanh^2, built from the output node.
                let y2 = self.square(out);
                let ny2 = self.neg(y2);
                let d = self.add_scalar(ny2, S::one());
                let mg = self.mul(g, d);
                vec![(*a, mg)]
            }
            Op::Exp(a) => {
                let mg = self.mul(g, out);
                vec![(*a, mg)]
            }
            Op::Ln(a) => {
                let a = *a;
                let la = self.ln(a);
                let nla = self.neg(la);
                let inv = self.exp(nla);
                let mg = self.mul(g, inv);
                vec![(a, mg)]
            }
            Op::Sqrt(a) => {
                // d sqrt = 1/(2 y), from the output node.
                let ly = self.ln(out);
                let nly = self.neg(ly);
                let inv = self.exp(nly);
                let half = self.scale(inv, S::from_f64(0.5));
                let mg = self.mul(g, half);
                vec![(*a, mg)]
            }
            Op::Square(a) => {
                let a = *a;
                let two_a = self.scale(a, S::from_f64(2.0));
                let mg = self.mul(g, two_a);
                vec![(a, mg)]
            }
            Op::Abs(a) => {
                let z = S::zero();
                let mask = self.nodes[a.0]
                    .value
                    .mapv(|x| if x > z { S::one() } else if x < z { S::zero() - S::one() } else { z });
                let mg = self.mul_mask(g, Arc::new(mask));
                vec![(*a, mg)]
            }
            Op::MulMask(a, mask) => {
                let mg = self.mul_mask(g, mask.clone());
                vec![(*a, mg)]
            }
            Op::SumAxes(a, _) => {
                let target = self.shape(*a).to_vec();
                let eg = self.expand(g, &target);
                vec![(*a, eg)]
            }
            Op::Expand(a, _) => {
                let src = self.shape(*a).to_vec();
                let gshape = self.shape(g).to_vec();
                let axes: Vec<usize> = src
                    .iter()
                    .zip(&gshape)
                    .enumerate()
                    .filter(|(_, (s, t))| s != t)
                    .map(|(i, _)| i)
                    .collect();
                let sg = self.sum_axes(g, &axes);
                vec![(*a, sg)]
            }
            Op::Reshape(a, _) => {
                let src = self.shape(*a).to_vec();
                let rg = self.reshape(g, &src);
                vec![(*a, rg)]
            }
            Op::ConcatC(xs) => {
                let mut start = 0;
                let mut res = Vec::with_capacity(xs.len());
                for &x in xs {
                    let len = self.shape(x)[1];
                    let sg = self.slice_c(g, start, len);
                    res.push((x, sg));
                    start += len;
                }
                res
            }
            Op::SliceC(a, start, len) => {
                // Scatter back: pad with zero constants on either side.
                let (a, start, len) = (*a, *start, *len);
                let total = self.shape(a)[1];
                let mut parts = Vec::new();
                if start > 0 {
                    let mut sh = self.shape(g).to_vec();
                    sh[1] = start;
                    parts.push(self.constant(ArrayD::zeros(IxDyn(&sh))));
                }
                parts.push(g);
                if start + len < total {
                    let mut sh = self.shape(g).to_vec();
                    sh[1] = total - start - len;
                    parts.push(self.constant(ArrayD::zeros(IxDyn(&sh))));
                }
                let padded = self.concat_c(&parts);
                vec![(a, padded)]
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (x, w, s, p) = (*x, *w, *stride, *pad);
                let wsh = self.shape(w).to_vec();
                let (kh, kw) = (wsh[2], wsh[3]);
                // output padding recovers rows the strided conv dropped
                let xh = self.shape(x)[2];
                let gh = self.shape(g)[2];
                let opad = xh - ((gh - 1) * s + kh - 2 * p);
                let gx = self.conv_transpose2d_opad(g, w, s, p, opad);
                let gw = self.wgrad(x, g, s, p, kh, kw);
                vec![(x, gx), (w, gw)]
            }
            Op::ConvT2d { x, w, stride, pad, .. } => {
                let (x, w, s, p) = (*x, *w, *stride, *pad);
                let wsh = self.shape(w).to_vec();
                let gx = self.conv2d(g, w, s, p);
                let gw = self.wgrad(g, x, s, p, wsh[2], wsh[3]);
                vec![(x, gx), (w, gw)]
            }
            Op::WGrad { a, b, stride, pad, kh, .. } => {
                let (a, b, s, p, kh) = (*a, *b, *stride, *pad, *kh);
                let ah = self.shape(a)[2];
                let bh = self.shape(b)[2];
                let opad = ah - ((bh - 1) * s + kh - 2 * p);
                let ga = self.conv_transpose2d_opad(b, g, s, p, opad);
                let gb = self.conv2d(a, g, s, p);
                vec![(a, ga), (b, gb)]
            }
        }
    }
}

/// Result of a backward pass: gradient node per tape position.
pub struct Gradients {
    grads: Vec<Option<NodeId>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<NodeId> {
        self.grads.get(id.0).copied().flatten()
    }
}

// ---- convolution kernels (im2col + GEMM) ----

fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Gather conv patches of `x[n]` into a `[c*kh*kw, oh*ow]` matrix.
fn im2col<S: Scalar>(
    x: &ndarray::ArrayView4<S>,
    n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<S> {
    let (_, c, h, w) = x.dim();
    let mut cols = Array2::<S>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let ih = oi * stride + ki;
                    if ih < pad || ih >= h + pad {
                        continue;
                    }
                    let ih = ih - pad;
                    for oj in 0..ow {
                        let iw = oj * stride + kj;
                        if iw < pad || iw >= w + pad {
                            continue;
                        }
                        let iw = iw - pad;
                        cols[[row, oi * ow + oj]] = x[[n, ci, ih, iw]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the column matrix back into an image (adjoint of `im2col`).
fn col2im_add<S: Scalar>(
    cols: &Array2<S>,
    out: &mut Array4<S>,
    n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let (_, c, h, w) = out.dim();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let ih = oi * stride + ki;
                    if ih < pad || ih >= h + pad {
                        continue;
                    }
                    let ih = ih - pad;
                    for oj in 0..ow {
                        let iw = oj * stride + kj;
                        if iw < pad || iw >= w + pad {
                            continue;
                        }
                        let iw = iw - pad;
                        out[[n, ci, ih, iw]] = out[[n, ci, ih, iw]] + cols[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
}

fn conv2d_val<S: Scalar>(
    x: ndarray::ArrayView4<S>,
    w: ndarray::ArrayView4<S>,
    stride: usize,
    pad: usize,
) -> Array4<S> {
    let (n, ci, h, wi) = x.dim();
    let (co, ci_w, kh, kw) = w.dim();
    assert_eq!(ci, ci_w, "conv2d: channel mismatch");
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(wi, kw, stride, pad);
    let w_mat = w.into_shape_with_order((co, ci * kh * kw)).unwrap();
    let mut out = Array4::<S>::zeros((n, co, oh, ow));
    for b in 0..n {
        let cols = im2col(&x, b, kh, kw, stride, pad, oh, ow);
        let mut y = Array2::<S>::zeros((co, oh * ow));
        ndarray::linalg::general_mat_mul(S::one(), &w_mat, &cols, S::zero(), &mut y);
        out.index_axis_mut(Axis(0), b)
            .assign(&y.into_shape_with_order((co, oh, ow)).unwrap());
    }
    out
}

/// Adjoint of `conv2d_val` in its input: `x` plays the role of the output
/// cotangent, weight layout `[ci_of_result_as_in, co_of_x? ...]` — concretely
/// `w: [c_in, c_out, kh, kw]` where `c_in` matches `x`'s channels.
fn conv_transpose2d_val<S: Scalar>(
    x: ndarray::ArrayView4<S>,
    w: ndarray::ArrayView4<S>,
    stride: usize,
    pad: usize,
    opad: usize,
) -> Array4<S> {
    let (n, ci, ih, iw) = x.dim();
    let (ci_w, co, kh, kw) = w.dim();
    assert_eq!(ci, ci_w, "conv_transpose2d: channel mismatch");
    let oh = (ih - 1) * stride + kh - 2 * pad + opad;
    let ow = (iw - 1) * stride + kw - 2 * pad + opad;
    let w_mat = w.into_shape_with_order((ci, co * kh * kw)).unwrap();
    let mut out = Array4::<S>::zeros((n, co, oh, ow));
    for b in 0..n {
        let x_n = x
            .index_axis(Axis(0), b)
            .into_shape_with_order((ci, ih * iw))
            .unwrap()
            .to_owned();
        let mut cols = Array2::<S>::zeros((co * kh * kw, ih * iw));
        ndarray::linalg::general_mat_mul(S::one(), &w_mat.t(), &x_n, S::zero(), &mut cols);
        col2im_add(&cols, &mut out, b, kh, kw, stride, pad, ih, iw);
    }
    out
}

/// Weight gradient of conv: `a` is the conv input, `b` the output cotangent;
/// result `[c_b, c_a, kh, kw]`.
fn wgrad_val<S: Scalar>(
    a: ndarray::ArrayView4<S>,
    b: ndarray::ArrayView4<S>,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Array4<S> {
    let (n, ca, _, _) = a.dim();
    let (nb, cb, oh, ow) = b.dim();
    assert_eq!(n, nb, "wgrad: batch mismatch");
    let mut dw = Array2::<S>::zeros((cb, ca * kh * kw));
    for bi in 0..n {
        let cols = im2col(&a, bi, kh, kw, stride, pad, oh, ow);
        let b_n = b
            .index_axis(Axis(0), bi)
            .into_shape_with_order((cb, oh * ow))
            .unwrap()
            .to_owned();
        ndarray::linalg::general_mat_mul(S::one(), &b_n, &cols.t(), S::one(), &mut dw);
    }
    dw.into_shape_with_order((cb, ca, kh, kw)).unwrap()
}
