//! Reverse-mode tape and the differentiable [`Var`] handle.

use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::{self, around_axis, Conv2dGeometry};
use crate::tensor::{broadcast_shape, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Silu(usize),
    Gelu(usize),
    Powf(usize, f64),
    SumAll(usize),
    SumAxis { x: usize, axis: usize },
    Softmax(usize),
    LogSoftmax(usize),
    MatMul(usize, usize),
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Concat { xs: Vec<usize>, axis: usize },
    IndexSelect { x: usize, axis: usize, indices: Rc<Vec<usize>> },
    Narrow { x: usize, axis: usize, start: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, geo: Conv2dGeometry },
    Upsample { x: usize, factor: usize },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations so that gradients can be computed in reverse order.
///
/// A tape is single-threaded and meant to live for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
///
/// Shape errors in operations are programming errors and panic, like
/// indexing errors on slices.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the output
    /// or was recorded as a constant.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zeros when absent.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Trainable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&self, x: Var<'_>, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.requires(x.id);
        self.push(value, op, rg)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Back-propagates from a scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(output.tape, self), "output belongs to another tape");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.len(), 1, "backward requires a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape().to_vec(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let out = &node.value;
            let val = |i: usize| nodes[i].value.clone();
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, g.sum_to_shape(nodes[*a].value.shape()));
                    acc(&mut grads, &nodes, *b, g.sum_to_shape(nodes[*b].value.shape()));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *a, g.sum_to_shape(nodes[*a].value.shape()));
                    acc(&mut grads, &nodes, *b, g.scale(-1.0).sum_to_shape(nodes[*b].value.shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let ga = g.broadcast_zip(&vb, |x, y| x * y).sum_to_shape(va.shape());
                        acc(&mut grads, &nodes, *a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let gb = g.broadcast_zip(&va, |x, y| x * y).sum_to_shape(vb.shape());
                        acc(&mut grads, &nodes, *b, gb);
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let ga = g.broadcast_zip(&vb, |x, y| x / y).sum_to_shape(va.shape());
                        acc(&mut grads, &nodes, *a, ga);
                    }
                    if nodes[*b].requires_grad {
                        // d(a/b)/db = -out / b
                        let t = out.broadcast_zip(&vb, |o, y| -o / y);
                        let gb = g.zip_map(&t, |x, y| x * y).sum_to_shape(vb.shape());
                        acc(&mut grads, &nodes, *b, gb);
                    }
                }
                Op::Neg(x) => acc(&mut grads, &nodes, *x, g.scale(-1.0)),
                Op::Scale(x, s) => acc(&mut grads, &nodes, *x, g.scale(*s)),
                Op::AddScalar(x) => acc(&mut grads, &nodes, *x, g.clone()),
                Op::Exp(x) => acc(&mut grads, &nodes, *x, g.zip_map(out, |g, y| g * y)),
                Op::Log(x) => acc(&mut grads, &nodes, *x, g.zip_map(&val(*x), |g, v| g / v)),
                Op::Tanh(x) => acc(&mut grads, &nodes, *x, g.zip_map(out, |g, y| g * (1.0 - y * y))),
                Op::Sigmoid(x) => acc(&mut grads, &nodes, *x, g.zip_map(out, |g, y| g * y * (1.0 - y))),
                Op::Relu(x) => acc(&mut grads, &nodes, *x, g.zip_map(&val(*x), |g, v| if v > 0.0 { g } else { 0.0 })),
                Op::Silu(x) => acc(
                    &mut grads,
                    &nodes,
                    *x,
                    g.zip_map(&val(*x), |g, v| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        g * (s + v * s * (1.0 - s))
                    }),
                ),
                Op::Gelu(x) => acc(&mut grads, &nodes, *x, g.zip_map(&val(*x), |g, v| g * gelu_grad(v))),
                Op::Powf(x, p) => {
                    let p = *p;
                    acc(&mut grads, &nodes, *x, g.zip_map(&val(*x), |g, v| g * p * v.powf(p - 1.0)))
                }
                Op::SumAll(x) => {
                    let gx = Tensor::full(nodes[*x].value.shape().to_vec(), g.item());
                    acc(&mut grads, &nodes, *x, gx);
                }
                Op::SumAxis { x, axis } => {
                    let shape = nodes[*x].value.shape().to_vec();
                    let (outer, dim, inner) = around_axis(&shape, *axis);
                    let mut gx = vec![0.0; outer * dim * inner];
                    for o in 0..outer {
                        for d in 0..dim {
                            let dst = &mut gx[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                            dst.copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                        }
                    }
                    acc(&mut grads, &nodes, *x, Tensor::new(shape, gx));
                }
                Op::Softmax(x) => {
                    let c = *out.shape().last().unwrap();
                    let mut gx = vec![0.0; out.len()];
                    for ((gr, yr), dst) in g.data().chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dst[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, &nodes, *x, Tensor::new(out.shape().to_vec(), gx));
                }
                Op::LogSoftmax(x) => {
                    let c = *out.shape().last().unwrap();
                    let mut gx = vec![0.0; out.len()];
                    for ((gr, yr), dst) in g.data().chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            dst[j] = gr[j] - yr[j].exp() * s;
                        }
                    }
                    acc(&mut grads, &nodes, *x, Tensor::new(out.shape().to_vec(), gx));
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = kernels::matmul_backward(&val(*a), &val(*b), &g);
                    acc(&mut grads, &nodes, *a, ga);
                    acc(&mut grads, &nodes, *b, gb);
                }
                Op::Reshape(x) => {
                    let shape = nodes[*x].value.shape().to_vec();
                    acc(&mut grads, &nodes, *x, g.reshape(shape));
                }
                Op::Permute { x, perm } => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    acc(&mut grads, &nodes, *x, g.permute(&inv));
                }
                Op::Concat { xs, axis } => {
                    let (outer, total, inner) = around_axis(out.shape(), *axis);
                    let mut start = 0;
                    for &x in xs {
                        let shape = nodes[x].value.shape().to_vec();
                        let d = shape[*axis];
                        let mut gx = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            gx.extend_from_slice(&g.data()[base..base + d * inner]);
                        }
                        start += d;
                        acc(&mut grads, &nodes, x, Tensor::new(shape, gx));
                    }
                }
                Op::IndexSelect { x, axis, indices } => {
                    let shape = nodes[*x].value.shape().to_vec();
                    let (outer, dim, inner) = around_axis(&shape, *axis);
                    let k = indices.len();
                    let mut gx = vec![0.0; outer * dim * inner];
                    for o in 0..outer {
                        for (j, &i) in indices.iter().enumerate() {
                            let src = &g.data()[(o * k + j) * inner..(o * k + j + 1) * inner];
                            let dst = &mut gx[(o * dim + i) * inner..(o * dim + i + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    acc(&mut grads, &nodes, *x, Tensor::new(shape, gx));
                }
                Op::Narrow { x, axis, start } => {
                    let shape = nodes[*x].value.shape().to_vec();
                    let (outer, dim, inner) = around_axis(&shape, *axis);
                    let len = out.shape()[*axis];
                    let mut gx = vec![0.0; outer * dim * inner];
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    acc(&mut grads, &nodes, *x, Tensor::new(shape, gx));
                }
                Op::Conv2d { x, w, b, geo } => {
                    let (gx, gw, gb) = kernels::conv2d_backward(&val(*x), &val(*w), &g, *geo);
                    acc(&mut grads, &nodes, *x, gx);
                    acc(&mut grads, &nodes, *w, gw);
                    if let Some(b) = b {
                        acc(&mut grads, &nodes, *b, gb);
                    }
                }
                Op::Upsample { x, factor } => {
                    acc(&mut grads, &nodes, *x, kernels::upsample_nearest_backward(&g, *factor))
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
}

fn gelu_grad(v: f64) -> f64 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Current value (shared, cheap to clone).
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn binary(self, other: Var<'t>, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let v = self.value().broadcast_zip(&other.value(), f);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(v, op, rg)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn neg(self) -> Var<'t> {
        let v = self.value().map(|x| -x);
        self.tape.unary(self, v, Op::Neg(self.id))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.tape.unary(self, v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        self.tape.unary(self, v, Op::AddScalar(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.tape.unary(self, v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.tape.unary(self, v, Op::Log(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.tape.unary(self, v, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.tape.unary(self, v, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.tape.unary(self, v, Op::Relu(self.id))
    }

    pub fn silu(self) -> Var<'t> {
        let v = self.value().map(|x| x / (1.0 + (-x).exp()));
        self.tape.unary(self, v, Op::Silu(self.id))
    }

    pub fn gelu(self) -> Var<'t> {
        let v = self.value().map(gelu);
        self.tape.unary(self, v, Op::Gelu(self.id))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let v = self.value().map(|x| x.powf(p));
        self.tape.unary(self, v, Op::Powf(self.id, p))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self)
    }

    /// Sum of all elements, as a rank-0 var.
    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.unary(self, v, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`; the axis is removed.
    pub fn sum_axis(self, axis: usize) -> Var<'t> {
        let x = self.value();
        let shape = x.shape();
        let (outer, dim, inner) = around_axis(shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &x.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += s;
                }
            }
        }
        let mut oshape = shape.to_vec();
        oshape.remove(axis);
        self.tape.unary(self, Tensor::new(oshape, out), Op::SumAxis { x: self.id, axis })
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    /// Like `mean_axis` but keeps a unit-length axis for broadcasting.
    pub fn mean_axis_keepdim(self, axis: usize) -> Var<'t> {
        let mut shape = self.shape();
        shape[axis] = 1;
        self.mean_axis(axis).reshape(shape)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let v = kernels::softmax_last(&self.value());
        self.tape.unary(self, v, Op::Softmax(self.id))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let v = kernels::log_softmax_last(&self.value());
        self.tape.unary(self, v, Op::LogSoftmax(self.id))
    }

    /// Product of the trailing two axes; `other` may be a shared rank-2 matrix.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let v = kernels::matmul(&self.value(), &other.value());
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(v, Op::MatMul(self.id, other.id), rg)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'t> {
        let v = self.value().reshape(shape);
        self.tape.unary(self, v, Op::Reshape(self.id))
    }

    pub fn permute(self, perm: &[usize]) -> Var<'t> {
        let v = self.value().permute(perm);
        self.tape.unary(self, v, Op::Permute { x: self.id, perm: perm.to_vec() })
    }

    /// Swap the last two axes.
    pub fn t(self) -> Var<'t> {
        let r = self.shape().len();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(xs: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!xs.is_empty(), "concat of nothing");
        let tape = xs[0].tape;
        let values: Vec<Rc<Tensor>> = xs.iter().map(|x| x.value()).collect();
        let mut shape = values[0].shape().to_vec();
        for v in &values[1..] {
            let mut s = v.shape().to_vec();
            s[axis] = shape[axis];
            assert_eq!(s, shape, "concat shape mismatch on axis {axis}");
        }
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let (outer, total, inner) = around_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let d = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let rg = xs.iter().any(|x| x.requires_grad());
        tape.push(Tensor::new(shape, data), Op::Concat { xs: xs.iter().map(|x| x.id).collect(), axis }, rg)
    }

    /// Gather entries `indices` along `axis` (repeats allowed).
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Var<'t> {
        let x = self.value();
        let (outer, dim, inner) = around_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                assert!(i < dim, "index {i} out of range for axis of length {dim}");
                data.extend_from_slice(&x.data()[(o * dim + i) * inner..(o * dim + i + 1) * inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = indices.len();
        self.tape.unary(
            self,
            Tensor::new(shape, data),
            Op::IndexSelect { x: self.id, axis, indices: Rc::new(indices.to_vec()) },
        )
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let (outer, dim, inner) = around_axis(x.shape(), axis);
        assert!(start + len <= dim, "narrow {start}+{len} out of range {dim}");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        self.tape.unary(self, Tensor::new(shape, data), Op::Narrow { x: self.id, axis, start })
    }

    /// 2-D convolution, `self: [b, cin, h, w]`, `weight: [cout, cin, kh, kw]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize) -> Var<'t> {
        let geo = Conv2dGeometry { stride, padding };
        let bias_val = bias.map(|b| b.value());
        let v = kernels::conv2d(&self.value(), &weight.value(), bias_val.as_deref(), geo);
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        self.tape.push(v, Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), geo }, rg)
    }

    /// Nearest-neighbour upsampling of `[b, c, h, w]` by `factor`.
    pub fn upsample_nearest(self, factor: usize) -> Var<'t> {
        let v = kernels::upsample_nearest(&self.value(), factor);
        self.tape.unary(self, v, Op::Upsample { x: self.id, factor })
    }

    /// Copy of the value that gradients do not flow through.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    /// `[b, c, h, w]` to `[b, c]` by spatial averaging.
    pub fn global_avg_pool(self) -> Var<'t> {
        let s = self.shape();
        assert_eq!(s.len(), 4, "global_avg_pool expects [b, c, h, w]");
        self.reshape([s[0], s[1], s[2] * s[3]]).mean_axis(2)
    }

    /// Row broadcasting helper: `self + bias` where bias matches the last axis.
    pub fn add_bias(self, bias: Var<'t>) -> Var<'t> {
        debug_assert_eq!(broadcast_shape(&self.shape(), &bias.shape()), Some(self.shape()));
        self.add(bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_product_rule() {
        let tape = Tape::new();
        let x = tape.var(Tensor::new([3], vec![1.0, 2.0, 3.0]));
        let y = tape.var(Tensor::new([3], vec![4.0, 5.0, 6.0]));
        let z = x.mul(y).sum();
        let g = tape.backward(z);
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(g.get(y).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::new([2], vec![1.0, 2.0]));
        let z = x.mul(x.detach()).sum();
        let g = tape.backward(z);
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([2], vec![1.0, 2.0]));
        let w = tape.var(Tensor::new([2], vec![3.0, 4.0]));
        let g = tape.backward(x.mul(w).sum());
        assert!(g.get(x).is_none());
        assert!(g.get(w).is_some());
    }

    #[test]
    fn softmax_rows_sum_to_one_at_large_logits() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([2, 3], vec![100.0, -100.0, 50.0, 1e3, 1e3, 1e3]));
        let s = x.softmax().value();
        for r in 0..2 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
