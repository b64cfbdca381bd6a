//! Reverse-mode automatic differentiation on dense CPU tensors.
//!
//! A [`Graph`] is a flat tape of nodes. Values are computed eagerly as ops
//! are pushed, so every node always carries its forward value; calling
//! [`Graph::backward`] on a scalar node then fills gradients for every leaf
//! that was created with `requires_grad = true`.
//!
//! The engine is generic over the element type: training runs in `f32`,
//! while gradient checks against central finite differences run in `f64`.
//! All kernels are single-threaded and evaluate in a fixed order, so a
//! fixed seed reproduces runs bit-for-bit.
//!
//! ```
//! use wda::autograd::Graph;
//! use ndarray::arr1;
//!
//! let mut g: Graph<f64> = Graph::new();
//! let x = g.leaf(arr1(&[1.0, 2.0, 3.0]).into_dyn(), true);
//! let y = g.square(x);
//! let s = g.sum_all(y); // x1^2 + x2^2 + x3^2
//! g.backward(s);
//! assert_eq!(g.scalar(s), 14.0);
//! assert_eq!(g.grad(x).unwrap().as_slice().unwrap(), &[2.0, 4.0, 6.0]);
//! ```

use ndarray::{ArrayD, Axis, IxDyn};

pub mod conv;

use conv::ConvCfg;

/// Element type the tape can differentiate through.
///
/// The only non-trivial requirement is a dense row-major GEMM; `f32` maps
/// to `matrixmultiply::sgemm`, `f64` to `dgemm`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + 'static
{
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Shorthand for converting literals.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Offset(NodeId, T),
    /// `[B,C,H,W] + [C]`, bias broadcast over batch and space.
    AddBias(NodeId, NodeId),
    Conv2d(NodeId, NodeId, ConvCfg),
    /// Weight shape `[C,1,kh,kw]`, one filter per input channel.
    DepthwiseConv2d(NodeId, NodeId, ConvCfg),
    LeakyRelu(NodeId, T),
    Relu(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    /// `ln(clamp(x, lo, hi))`; gradient is zero outside `(lo, hi)`.
    LnClamped(NodeId, T, T),
    /// Softmax over axis 1 of `[B,C,H,W]`.
    SoftmaxCh(NodeId),
    Square(NodeId),
    /// 2x2 max pooling, stride 2; saves the winning corner per output cell.
    MaxPool2(NodeId, Vec<u8>),
    UpsampleNearest2(NodeId),
    ConcatCh(NodeId, NodeId),
    SumAll(NodeId),
    /// `[B,C,H,W] -> [B]`.
    SumPerImage(NodeId),
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    grad: Option<ArrayD<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of eagerly evaluated tensor ops supporting one reverse sweep.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    scratch: Vec<T>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), scratch: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> T {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1);
        v.iter().copied().next().unwrap()
    }

    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<ArrayD<T>> {
        self.nodes[id.0].grad.take()
    }

    pub fn leaf(&mut self, value: ArrayD<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, v: T) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub: shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul: shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn offset(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::Offset(a, c), rg)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        assert_eq!(xs.len(), 4, "add_bias: x must be [B,C,H,W]");
        assert_eq!(bs, [xs[1]], "add_bias: bias must be [C]");
        let mut v = self.nodes[x.0].value.clone();
        {
            let b = &self.nodes[bias.0].value;
            let bsl = b.as_slice().unwrap();
            let (ba, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let vs = v.as_slice_mut().unwrap();
            for bi in 0..ba {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    let bv = bsl[ci];
                    for p in &mut vs[base..base + h * w] {
                        *p = *p + bv;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(v, Op::AddBias(x, bias), rg)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, cfg: ConvCfg) -> NodeId {
        let v = conv::conv2d_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, cfg, &mut self.scratch);
        let rg = self.rg(x) || self.rg(w);
        self.push(v, Op::Conv2d(x, w, cfg), rg)
    }

    pub fn depthwise_conv2d(&mut self, x: NodeId, w: NodeId, cfg: ConvCfg) -> NodeId {
        let v = conv::depthwise_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, cfg);
        let rg = self.rg(x) || self.rg(w);
        self.push(v, Op::DepthwiseConv2d(x, w, cfg), rg)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// `ln(1 + e^x)`, computed stably for large |x|.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(softplus_val);
        let rg = self.rg(a);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(sigmoid_val);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn ln_clamped(&mut self, a: NodeId, lo: T, hi: T) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| clamp(x, lo, hi).ln());
        let rg = self.rg(a);
        self.push(v, Op::LnClamped(a, lo, hi), rg)
    }

    pub fn softmax_ch(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.ndim(), 4, "softmax_ch: expected [B,C,H,W]");
        let mut v = x.clone();
        softmax_ch_inplace(&mut v);
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxCh(a), rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn maxpool2(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let s = x.shape();
        assert_eq!(s.len(), 4);
        assert!(s[2] % 2 == 0 && s[3] % 2 == 0, "maxpool2: H and W must be even");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xs = x.as_slice().unwrap();
        let mut v = vec![T::zero(); b * c * oh * ow];
        let mut arg = vec![0u8; b * c * oh * ow];
        for bc in 0..b * c {
            let ib = bc * h * w;
            let ob = bc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i00 = ib + (2 * oy) * w + 2 * ox;
                    let cand = [xs[i00], xs[i00 + 1], xs[i00 + w], xs[i00 + w + 1]];
                    let mut best = 0usize;
                    for k in 1..4 {
                        if cand[k] > cand[best] {
                            best = k;
                        }
                    }
                    v[ob + oy * ow + ox] = cand[best];
                    arg[ob + oy * ow + ox] = best as u8;
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), v).unwrap();
        let rg = self.rg(a);
        self.push(v, Op::MaxPool2(a, arg), rg)
    }

    pub fn upsample_nearest2(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let s = x.shape();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xs = x.as_slice().unwrap();
        let mut v = vec![T::zero(); b * c * 4 * h * w];
        let ow = 2 * w;
        for bc in 0..b * c {
            let ib = bc * h * w;
            let ob = bc * 4 * h * w;
            for y in 0..h {
                for x_ in 0..w {
                    let val = xs[ib + y * w + x_];
                    let o = ob + (2 * y) * ow + 2 * x_;
                    v[o] = val;
                    v[o + 1] = val;
                    v[o + ow] = val;
                    v[o + ow + 1] = val;
                }
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&[b, c, 2 * h, 2 * w]), v).unwrap();
        let rg = self.rg(a);
        self.push(v, Op::UpsampleNearest2(a), rg)
    }

    pub fn concat_ch(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa.len(), 4);
        assert!(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3], "concat_ch: spatial/batch mismatch");
        let v = ndarray::concatenate(Axis(1), &[self.nodes[a.0].value.view(), self.nodes[b.0].value.view()])
            .unwrap()
            .as_standard_layout()
            .to_owned();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::ConcatCh(a, b), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len().max(1);
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::c(n as f64))
    }

    pub fn sum_per_image(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.ndim(), 4);
        let b = x.shape()[0];
        let per = x.len() / b;
        let xs = x.as_slice().unwrap();
        let v: Vec<T> = (0..b).map(|i| xs[i * per..(i + 1) * per].iter().copied().sum()).collect();
        let rg = self.rg(a);
        self.push(ArrayD::from_shape_vec(IxDyn(&[b]), v).unwrap(), Op::SumPerImage(a), rg)
    }

    /// Reverse sweep from a single-element node. Gradients accumulate into
    /// every `requires_grad` leaf reachable from `out`.
    pub fn backward(&mut self, out: NodeId) {
        assert_eq!(self.nodes[out.0].value.len(), 1, "backward: output must be scalar");
        let shape = self.nodes[out.0].value.raw_dim();
        self.nodes[out.0].grad = Some(ArrayD::from_elem(shape, T::one()));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.nodes[i].grad.take() else { continue };
            // Reads of input values borrow disjoint nodes (inputs always
            // precede node i on the tape); route through raw parts.
            macro_rules! acc {
                ($id:expr, $g:expr) => {{
                    let id: NodeId = $id;
                    if self.nodes[id.0].requires_grad {
                        let g = $g;
                        match &mut self.nodes[id.0].grad {
                            Some(dst) => *dst += &g,
                            slot @ None => *slot = Some(g),
                        }
                    }
                }};
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            match &op {
                Op::Leaf => {
                    // restore gradient taken above
                    self.nodes[i].grad = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    acc!(*a, gy.clone());
                    acc!(*b, gy.clone());
                }
                Op::Sub(a, b) => {
                    acc!(*a, gy.clone());
                    acc!(*b, gy.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let g = &gy * &self.nodes[b.0].value;
                        acc!(*a, g);
                    }
                    if self.rg(*b) {
                        let g = &gy * &self.nodes[a.0].value;
                        acc!(*b, g);
                    }
                }
                Op::Scale(a, c) => acc!(*a, gy.mapv(|v| v * *c)),
                Op::Offset(a, _) => acc!(*a, gy.clone()),
                Op::AddBias(x, bias) => {
                    if self.rg(*bias) {
                        let s = gy.shape();
                        let (ba, c, hw) = (s[0], s[1], s[2] * s[3]);
                        let gsl = gy.as_slice().unwrap();
                        let mut gb = vec![T::zero(); c];
                        for bi in 0..ba {
                            for ci in 0..c {
                                let base = (bi * c + ci) * hw;
                                gb[ci] = gb[ci] + gsl[base..base + hw].iter().copied().sum();
                            }
                        }
                        acc!(*bias, ArrayD::from_shape_vec(IxDyn(&[c]), gb).unwrap());
                    }
                    acc!(*x, gy.clone());
                }
                Op::Conv2d(x, w, cfg) => {
                    let (dx, dw) = conv::conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &gy,
                        *cfg,
                        self.rg(*x),
                        self.rg(*w),
                        &mut self.scratch,
                    );
                    if let Some(dx) = dx {
                        acc!(*x, dx);
                    }
                    if let Some(dw) = dw {
                        acc!(*w, dw);
                    }
                }
                Op::DepthwiseConv2d(x, w, cfg) => {
                    let (dx, dw) = conv::depthwise_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &gy,
                        *cfg,
                        self.rg(*x),
                        self.rg(*w),
                    );
                    if let Some(dx) = dx {
                        acc!(*x, dx);
                    }
                    if let Some(dw) = dw {
                        acc!(*w, dw);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let g = ndarray::Zip::from(&gy)
                        .and(&self.nodes[a.0].value)
                        .map_collect(|&g, &x| if x > T::zero() { g } else { g * *slope });
                    acc!(*a, g);
                }
                Op::Relu(a) => {
                    let g = ndarray::Zip::from(&gy)
                        .and(&self.nodes[a.0].value)
                        .map_collect(|&g, &x| if x > T::zero() { g } else { T::zero() });
                    acc!(*a, g);
                }
                Op::Softplus(a) => {
                    let g = ndarray::Zip::from(&gy)
                        .and(&self.nodes[a.0].value)
                        .map_collect(|&g, &x| g * sigmoid_val(x));
                    acc!(*a, g);
                }
                Op::Sigmoid(a) => {
                    let g = ndarray::Zip::from(&gy)
                        .and(&self.nodes[i].value)
                        .map_collect(|&g, &y| g * y * (T::one() - y));
                    acc!(*a, g);
                }
                Op::LnClamped(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let g = ndarray::Zip::from(&gy)
                        .and(&self.nodes[a.0].value)
                        .map_collect(|&g, &x| if x > lo && x < hi { g / x } else { T::zero() });
                    acc!(*a, g);
                }
                Op::SoftmaxCh(a) => {
                    // dx_c = y_c * (g_c - sum_k g_k y_k)
                    let y = &self.nodes[i].value;
                    let s = y.shape();
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let ys = y.as_slice().unwrap();
                    let gs = gy.as_slice().unwrap();
                    let mut dx = vec![T::zero(); ys.len()];
                    let hw = h * w;
                    for bi in 0..b {
                        for p in 0..hw {
                            let mut dot = T::zero();
                            for ci in 0..c {
                                let idx = (bi * c + ci) * hw + p;
                                dot = dot + gs[idx] * ys[idx];
                            }
                            for ci in 0..c {
                                let idx = (bi * c + ci) * hw + p;
                                dx[idx] = ys[idx] * (gs[idx] - dot);
                            }
                        }
                    }
                    acc!(*a, ArrayD::from_shape_vec(y.raw_dim(), dx).unwrap());
                }
                Op::Square(a) => {
                    let two = T::c(2.0);
                    let g = ndarray::Zip::from(&gy)
                        .and(&self.nodes[a.0].value)
                        .map_collect(|&g, &x| g * two * x);
                    acc!(*a, g);
                }
                Op::MaxPool2(a, arg) => {
                    let xs = self.nodes[a.0].value.shape();
                    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let gs = gy.as_slice().unwrap();
                    let mut dx = vec![T::zero(); b * c * h * w];
                    for bc in 0..b * c {
                        let ob = bc * oh * ow;
                        let ib = bc * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let k = arg[ob + oy * ow + ox] as usize;
                                let (dy, dxo) = (k / 2, k % 2);
                                dx[ib + (2 * oy + dy) * w + 2 * ox + dxo] = gs[ob + oy * ow + ox];
                            }
                        }
                    }
                    acc!(*a, ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).unwrap());
                }
                Op::UpsampleNearest2(a) => {
                    let xs = self.nodes[a.0].value.shape();
                    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let gs = gy.as_slice().unwrap();
                    let ow = 2 * w;
                    let mut dx = vec![T::zero(); b * c * h * w];
                    for bc in 0..b * c {
                        let ib = bc * h * w;
                        let ob = bc * 4 * h * w;
                        for y in 0..h {
                            for x_ in 0..w {
                                let o = ob + (2 * y) * ow + 2 * x_;
                                dx[ib + y * w + x_] = gs[o] + gs[o + 1] + gs[o + ow] + gs[o + ow + 1];
                            }
                        }
                    }
                    acc!(*a, ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).unwrap());
                }
                Op::ConcatCh(a, b) => {
                    let ca = self.nodes[a.0].value.shape()[1];
                    let ga = gy.slice_axis(Axis(1), ndarray::Slice::from(0..ca)).to_owned();
                    let gb = gy.slice_axis(Axis(1), ndarray::Slice::from(ca..)).to_owned();
                    acc!(*a, ga);
                    acc!(*b, gb);
                }
                Op::SumAll(a) => {
                    let g0 = gy.iter().copied().next().unwrap();
                    let shape = self.nodes[a.0].value.raw_dim();
                    acc!(*a, ArrayD::from_elem(shape, g0));
                }
                Op::SumPerImage(a) => {
                    let xs = self.nodes[a.0].value.shape().to_vec();
                    let per = xs[1] * xs[2] * xs[3];
                    let gs = gy.as_slice().unwrap();
                    let mut dx = vec![T::zero(); xs.iter().product()];
                    for (bi, &g) in gs.iter().enumerate() {
                        for v in &mut dx[bi * per..(bi + 1) * per] {
                            *v = g;
                        }
                    }
                    acc!(*a, ArrayD::from_shape_vec(IxDyn(&xs), dx).unwrap());
                }
            }
            self.nodes[i].op = op;
        }
    }
}

fn clamp<T: Scalar>(x: T, lo: T, hi: T) -> T {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

pub(crate) fn sigmoid_val<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus_val<T: Scalar>(x: T) -> T {
    // ln(1+e^x) = max(x,0) + ln(1+e^-|x|)
    let m = if x > T::zero() { x } else { T::zero() };
    m + ((-x.abs()).exp() + T::one()).ln()
}

fn softmax_ch_inplace<T: Scalar>(v: &mut ArrayD<T>) {
    let s = v.shape().to_vec();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let vs = v.as_slice_mut().unwrap();
    for bi in 0..b {
        for p in 0..hw {
            let mut mx = vs[(bi * c) * hw + p];
            for ci in 1..c {
                let x = vs[(bi * c + ci) * hw + p];
                if x > mx {
                    mx = x;
                }
            }
            let mut sum = T::zero();
            for ci in 0..c {
                let idx = (bi * c + ci) * hw + p;
                let e = (vs[idx] - mx).exp();
                vs[idx] = e;
                sum = sum + e;
            }
            for ci in 0..c {
                let idx = (bi * c + ci) * hw + p;
                vs[idx] = vs[idx] / sum;
            }
        }
    }
}

#[cfg(test)]
mod tests;
