//! Reverse-mode differentiation graph over dense tensors.
//!
//! Values are computed eagerly; each node records the operation and its
//! parents. The backward pass walks nodes in reverse creation order (parents
//! always precede children, so the graph is acyclic by construction) and
//! builds cotangents *as graph values*. Because every primitive's
//! vector-Jacobian product is itself expressed through these primitives, a
//! gradient can be differentiated again — which is what the critic's
//! gradient-norm penalty needs.
//!
//! A graph is confined to one thread (`Rc` interior); independent graphs may
//! run in parallel on parameter copies.

use std::cell::RefCell;
use std::rc::Rc;

use crate::conv;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

type NodeId = usize;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    DivScalar(NodeId, f64),
    AddScalar(NodeId),
    MulConst(NodeId, Rc<Tensor>),
    LeakyRelu(NodeId, f64),
    Abs(NodeId),
    Tanh(NodeId),
    SqrtEps(NodeId),
    Matmul(NodeId, NodeId),
    Transpose2d(NodeId),
    Conv {
        input: NodeId,
        kernel: NodeId,
        stride: [usize; 3],
    },
    ConvInputVjp {
        grad: NodeId,
        kernel: NodeId,
        stride: [usize; 3],
    },
    ConvKernelVjp {
        input: NodeId,
        grad: NodeId,
        stride: [usize; 3],
    },
    BroadcastChannel(NodeId),
    SumExceptChannel(NodeId),
    BroadcastFill(NodeId),
    SumAll(NodeId),
    BroadcastPerSample(NodeId),
    SumPerSample(NodeId),
    RepeatChannel(NodeId),
    SumChannelToOne(NodeId),
    Narrow {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    PadScatter {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Reshape(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

struct GraphInner {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Handle to a differentiation graph. Cheap to clone; not `Send`.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// A node in the graph: a tensor plus provenance for differentiation.
#[derive(Clone)]
pub struct Value {
    graph: Graph,
    id: NodeId,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                backward_done: false,
            })),
        }
    }

    /// Number of nodes currently recorded.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts a leaf tensor. Rejects NaN/Inf: the graph boundary is where
    /// non-finite data is caught.
    pub fn leaf(&self, tensor: Tensor, requires_grad: bool) -> Result<Value> {
        if !tensor.all_finite() {
            return Err(Error::NonFinite(format!(
                "leaf tensor with shape {:?} contains NaN or Inf",
                tensor.shape()
            )));
        }
        Ok(self.push(Op::Leaf, tensor, requires_grad))
    }

    /// A leaf that never requires gradients.
    pub fn constant(&self, tensor: Tensor) -> Result<Value> {
        self.leaf(tensor, false)
    }

    pub fn scalar(&self, v: f64) -> Result<Value> {
        self.leaf(Tensor::scalar(v), false)
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Value {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Value {
            graph: self.clone(),
            id,
        }
    }

    fn requires(&self, id: NodeId) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    fn value_of(&self, id: NodeId) -> Value {
        Value {
            graph: self.clone(),
            id,
        }
    }

    /// Clears stored gradients and re-arms `backward`.
    pub fn reset_gradients(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.backward_done = false;
        for n in &mut inner.nodes {
            n.grad = None;
        }
    }

    /// Builds cotangent values for `root` (a scalar) with respect to every
    /// grad-requiring ancestor. Entry `i` of the result is the cotangent of
    /// node `i`, when one exists.
    fn build_cotangents(&self, root: NodeId) -> Result<Vec<Option<Value>>> {
        let (root_numel, root_shape, node_count) = {
            let inner = self.inner.borrow();
            let n = &inner.nodes[root];
            (n.value.numel(), n.value.shape().to_vec(), inner.nodes.len())
        };
        if root_numel != 1 {
            return Err(Error::graph(format!(
                "backward root must be scalar, got shape {:?}",
                root_shape
            )));
        }
        let mut cot: Vec<Option<Value>> = vec![None; node_count];
        cot[root] = Some(self.constant(Tensor::filled(&root_shape, 1.0))?);

        for id in (0..=root).rev() {
            let Some(cot_id) = cot[id].clone() else {
                continue;
            };
            if !self.requires(id) {
                continue;
            }
            let op = self.inner.borrow().nodes[id].op.clone();
            for (parent, contrib) in self.vjp(id, &op, &cot_id)? {
                if !self.requires(parent) {
                    continue;
                }
                cot[parent] = Some(match cot[parent].take() {
                    None => contrib,
                    Some(prev) => prev.add(&contrib)?,
                });
            }
        }
        Ok(cot)
    }

    /// Differentiable gradients of a scalar `root` with respect to `wrt`.
    /// Targets unreachable from the root get zero cotangents. The returned
    /// values live in this graph and can be differentiated again.
    pub fn grad_values(&self, root: &Value, wrt: &[&Value]) -> Result<Vec<Value>> {
        self.check_owns(root)?;
        for v in wrt {
            self.check_owns(v)?;
        }
        let cot = self.build_cotangents(root.id)?;
        wrt.iter()
            .map(|v| match cot.get(v.id).and_then(|c| c.clone()) {
                Some(c) => Ok(c),
                None => self.constant(Tensor::zeros(&v.shape())),
            })
            .collect()
    }

    fn check_owns(&self, v: &Value) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &v.graph.inner) {
            return Err(Error::graph(
                "value belongs to a different graph".to_string(),
            ));
        }
        Ok(())
    }

    fn vjp(&self, id: NodeId, op: &Op, cot: &Value) -> Result<Vec<(NodeId, Value)>> {
        use Op::*;
        let out = match *op {
            Leaf => vec![],
            Add(a, b) => vec![(a, cot.clone()), (b, cot.clone())],
            Sub(a, b) => vec![(a, cot.clone()), (b, cot.neg())],
            Mul(a, b) => vec![
                (a, cot.mul(&self.value_of(b))?),
                (b, cot.mul(&self.value_of(a))?),
            ],
            Div(a, b) => {
                let av = self.value_of(a);
                let bv = self.value_of(b);
                let da = cot.div(&bv)?;
                let db = cot.mul(&av)?.div(&bv.mul(&bv)?)?.neg();
                vec![(a, da), (b, db)]
            }
            Neg(a) => vec![(a, cot.neg())],
            Scale(a, c) => vec![(a, cot.scale(c))],
            DivScalar(a, c) => vec![(a, cot.div_scalar(c))],
            AddScalar(a) => vec![(a, cot.clone())],
            MulConst(a, ref t) => vec![(a, cot.mul_const_rc(t.clone())?)],
            LeakyRelu(a, alpha) => {
                let mask = {
                    let inner = self.inner.borrow();
                    inner.nodes[a]
                        .value
                        .map(|x| if x > 0.0 { 1.0 } else { alpha })
                };
                vec![(a, cot.mul_const(mask)?)]
            }
            Abs(a) => {
                let sign = {
                    let inner = self.inner.borrow();
                    inner.nodes[a].value.map(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                };
                vec![(a, cot.mul_const(sign)?)]
            }
            Tanh(a) => {
                // d tanh = 1 - tanh^2, built from this node's own output.
                let t = self.value_of(id);
                let one_minus_t2 = t.mul(&t)?.neg().add_scalar(1.0);
                vec![(a, cot.mul(&one_minus_t2)?)]
            }
            SqrtEps(a) => {
                let s = self.value_of(id);
                vec![(a, cot.scale(0.5).div(&s)?)]
            }
            Matmul(a, b) => {
                let av = self.value_of(a);
                let bv = self.value_of(b);
                vec![
                    (a, cot.matmul(&bv.transpose2d()?)?),
                    (b, av.transpose2d()?.matmul(cot)?),
                ]
            }
            Transpose2d(a) => vec![(a, cot.transpose2d()?)],
            Conv {
                input,
                kernel,
                stride,
            } => {
                let (isp, ksp) = {
                    let inner = self.inner.borrow();
                    let is = inner.nodes[input].value.shape().to_vec();
                    let ks = inner.nodes[kernel].value.shape().to_vec();
                    ([is[2], is[3], is[4]], [ks[2], ks[3], ks[4]])
                };
                vec![
                    (
                        input,
                        cot.conv_input_vjp(&self.value_of(kernel), stride, isp)?,
                    ),
                    (
                        kernel,
                        self.value_of(input).conv_kernel_vjp(cot, stride, ksp)?,
                    ),
                ]
            }
            ConvInputVjp {
                grad,
                kernel,
                stride,
            } => {
                let ksp = {
                    let inner = self.inner.borrow();
                    let ks = inner.nodes[kernel].value.shape().to_vec();
                    [ks[2], ks[3], ks[4]]
                };
                vec![
                    (grad, cot.conv_core(&self.value_of(kernel), stride)?),
                    (
                        kernel,
                        cot.conv_kernel_vjp(&self.value_of(grad), stride, ksp)?,
                    ),
                ]
            }
            ConvKernelVjp {
                input,
                grad,
                stride,
            } => {
                let isp = {
                    let inner = self.inner.borrow();
                    let is = inner.nodes[input].value.shape().to_vec();
                    [is[2], is[3], is[4]]
                };
                vec![
                    (
                        input,
                        self.value_of(grad).conv_input_vjp(cot, stride, isp)?,
                    ),
                    (grad, self.value_of(input).conv_core(cot, stride)?),
                ]
            }
            BroadcastChannel(a) => vec![(a, cot.sum_except_channel()?)],
            SumExceptChannel(a) => {
                let shape = self.shape_of(a);
                vec![(a, cot.broadcast_channel(&shape)?)]
            }
            BroadcastFill(a) => vec![(a, cot.sum_all()?)],
            SumAll(a) => {
                let shape = self.shape_of(a);
                vec![(a, cot.broadcast_fill(&shape)?)]
            }
            BroadcastPerSample(a) => vec![(a, cot.sum_per_sample()?)],
            SumPerSample(a) => {
                let shape = self.shape_of(a);
                vec![(a, cot.broadcast_per_sample(&shape)?)]
            }
            RepeatChannel(a) => vec![(a, cot.sum_channel_to_one()?)],
            SumChannelToOne(a) => {
                let channels = self.shape_of(a)[1];
                vec![(a, cot.repeat_channel(channels)?)]
            }
            Narrow { x, axis, start } => {
                let full = self.shape_of(x)[axis];
                vec![(x, cot.pad_scatter(axis, start, full)?)]
            }
            PadScatter { x, axis, start } => {
                let len = self.shape_of(x)[axis];
                vec![(x, cot.narrow(axis, start, len)?)]
            }
            Reshape(a) => {
                let shape = self.shape_of(a);
                vec![(a, cot.reshape(&shape)?)]
            }
        };
        Ok(out)
    }

    fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.inner.borrow().nodes[id].value.shape().to_vec()
    }
}

impl Value {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].value.numel()
    }

    /// Clone of the forward tensor.
    pub fn tensor(&self) -> Tensor {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn item(&self) -> Result<f64> {
        self.graph.inner.borrow().nodes[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// Gradient stored by the last `backward` pass, if any.
    pub fn grad(&self) -> Option<Tensor> {
        self.graph.inner.borrow().nodes[self.id].grad.clone()
    }

    /// Reverse accumulation from a scalar root. Stores a gradient on every
    /// reachable grad-requiring node; shapes are asserted to match their
    /// values. Calling it twice without `Graph::reset_gradients` is an error.
    /// Cycles cannot occur: parents always precede children by construction.
    pub fn backward(&self) -> Result<()> {
        if self.graph.inner.borrow().backward_done {
            return Err(Error::graph(
                "backward already ran on this graph; call reset_gradients first".to_string(),
            ));
        }
        let cot = self.graph.build_cotangents(self.id)?;
        let mut inner = self.graph.inner.borrow_mut();
        inner.backward_done = true;
        for (id, c) in cot.into_iter().enumerate() {
            let Some(c) = c else { continue };
            if !inner.nodes[id].requires_grad {
                continue;
            }
            let g = inner.nodes[c.id].value.clone();
            assert_eq!(
                g.shape(),
                inner.nodes[id].value.shape(),
                "gradient shape must equal value shape"
            );
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of node {id} contains NaN or Inf"
                )));
            }
            inner.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn binary_map(
        &self,
        other: &Value,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.graph.check_owns(other)?;
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id].value;
        let b = &inner.nodes[other.id].value;
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        a.zip_map(b, f)
    }

    fn unary_map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        self.graph.inner.borrow().nodes[self.id].value.map(f)
    }

    fn push_unary(&self, op: Op, value: Tensor) -> Value {
        let requires = self.graph.requires(self.id);
        self.graph.push(op, value, requires)
    }

    fn push_binary(&self, other: &Value, op: Op, value: Tensor) -> Value {
        let requires = self.graph.requires(self.id) || self.graph.requires(other.id);
        self.graph.push(op, value, requires)
    }

    pub fn add(&self, other: &Value) -> Result<Value> {
        let v = self.binary_map(other, "add", |x, y| x + y)?;
        Ok(self.push_binary(other, Op::Add(self.id, other.id), v))
    }

    pub fn sub(&self, other: &Value) -> Result<Value> {
        let v = self.binary_map(other, "sub", |x, y| x - y)?;
        Ok(self.push_binary(other, Op::Sub(self.id, other.id), v))
    }

    pub fn mul(&self, other: &Value) -> Result<Value> {
        let v = self.binary_map(other, "mul", |x, y| x * y)?;
        Ok(self.push_binary(other, Op::Mul(self.id, other.id), v))
    }

    pub fn div(&self, other: &Value) -> Result<Value> {
        let v = self.binary_map(other, "div", |x, y| x / y)?;
        Ok(self.push_binary(other, Op::Div(self.id, other.id), v))
    }

    pub fn neg(&self) -> Value {
        let v = self.unary_map(|x| -x);
        self.push_unary(Op::Neg(self.id), v)
    }

    pub fn scale(&self, c: f64) -> Value {
        let v = self.unary_map(|x| c * x);
        self.push_unary(Op::Scale(self.id, c), v)
    }

    /// Elementwise division by a scalar constant; exact where `x/c` is.
    pub fn div_scalar(&self, c: f64) -> Value {
        let v = self.unary_map(|x| x / c);
        self.push_unary(Op::DivScalar(self.id, c), v)
    }

    pub fn add_scalar(&self, c: f64) -> Value {
        let v = self.unary_map(|x| x + c);
        self.push_unary(Op::AddScalar(self.id), v)
    }

    pub fn square(&self) -> Result<Value> {
        self.mul(self)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, t: Tensor) -> Result<Value> {
        self.mul_const_rc(Rc::new(t))
    }

    fn mul_const_rc(&self, t: Rc<Tensor>) -> Result<Value> {
        let v = {
            let inner = self.graph.inner.borrow();
            inner.nodes[self.id].value.zip_map(&t, |x, c| x * c)
        }
        .map_err(|_| {
            Error::shape(format!(
                "mul_const: value shape {:?} vs const shape {:?}",
                self.shape(),
                t.shape()
            ))
        })?;
        Ok(self.push_unary(Op::MulConst(self.id, t), v))
    }

    /// `max(0,x) - alpha*max(0,-x)`; the subgradient at 0 is the left value.
    pub fn leaky_relu(&self, alpha: f64) -> Result<Value> {
        if !(alpha >= 0.0) {
            return Err(Error::config(format!(
                "leaky_relu slope must be >= 0, got {alpha}"
            )));
        }
        let v = self.unary_map(|x| if x > 0.0 { x } else { alpha * x });
        Ok(self.push_unary(Op::LeakyRelu(self.id, alpha), v))
    }

    pub fn relu(&self) -> Value {
        self.leaky_relu(0.0).expect("alpha 0 is valid")
    }

    pub fn abs(&self) -> Value {
        let v = self.unary_map(f64::abs);
        self.push_unary(Op::Abs(self.id), v)
    }

    pub fn tanh(&self) -> Value {
        let v = self.unary_map(f64::tanh);
        self.push_unary(Op::Tanh(self.id), v)
    }

    /// `sqrt(x + eps)`; the guard keeps the derivative finite at zero.
    pub fn sqrt_eps(&self, eps: f64) -> Result<Value> {
        let t = self.tensor();
        if t.data().iter().any(|&x| x + eps <= 0.0) {
            return Err(Error::Numeric(format!(
                "sqrt_eps input not strictly positive after epsilon guard {eps}"
            )));
        }
        let v = t.map(|x| (x + eps).sqrt());
        Ok(self.push_unary(Op::SqrtEps(self.id), v))
    }

    pub fn matmul(&self, other: &Value) -> Result<Value> {
        self.graph.check_owns(other)?;
        let (a, b) = (self.tensor(), other.tensor());
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(Error::shape(format!(
                "matmul expects rank-2 operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (p, q) = (a.shape()[0], a.shape()[1]);
        let (q2, r) = (b.shape()[0], b.shape()[1]);
        if q != q2 {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = Tensor::zeros(&[p, r]);
        {
            let ad = a.data();
            let bd = b.data();
            let od = out.data_mut();
            for i in 0..p {
                let out_row = &mut od[i * r..][..r];
                for k in 0..q {
                    let aik = ad[i * q + k];
                    let b_row = &bd[k * r..][..r];
                    for (o, bv) in out_row.iter_mut().zip(b_row) {
                        *o += aik * *bv;
                    }
                }
            }
        }
        Ok(self.push_binary(other, Op::Matmul(self.id, other.id), out))
    }

    pub fn transpose2d(&self) -> Result<Value> {
        let a = self.tensor();
        if a.shape().len() != 2 {
            return Err(Error::shape(format!(
                "transpose2d expects rank 2, got {:?}",
                a.shape()
            )));
        }
        let (p, q) = (a.shape()[0], a.shape()[1]);
        let mut out = Tensor::zeros(&[q, p]);
        for i in 0..p {
            for j in 0..q {
                out.data_mut()[j * p + i] = a.data()[i * q + j];
            }
        }
        Ok(self.push_unary(Op::Transpose2d(self.id), out))
    }

    /// Bias-free strided valid convolution (see [`crate::conv`] for layout).
    pub fn conv_core(&self, kernel: &Value, stride: [usize; 3]) -> Result<Value> {
        self.graph.check_owns(kernel)?;
        let v = {
            let inner = self.graph.inner.borrow();
            conv::conv3d_forward(
                &inner.nodes[self.id].value,
                &inner.nodes[kernel.id].value,
                stride,
            )?
        };
        Ok(self.push_binary(
            kernel,
            Op::Conv {
                input: self.id,
                kernel: kernel.id,
                stride,
            },
            v,
        ))
    }

    /// Adjoint of `conv_core` in the input argument; `self` is the output
    /// cotangent.
    pub fn conv_input_vjp(
        &self,
        kernel: &Value,
        stride: [usize; 3],
        input_spatial: [usize; 3],
    ) -> Result<Value> {
        self.graph.check_owns(kernel)?;
        let v = {
            let inner = self.graph.inner.borrow();
            conv::conv3d_input_vjp(
                &inner.nodes[self.id].value,
                &inner.nodes[kernel.id].value,
                stride,
                input_spatial,
            )?
        };
        Ok(self.push_binary(
            kernel,
            Op::ConvInputVjp {
                grad: self.id,
                kernel: kernel.id,
                stride,
            },
            v,
        ))
    }

    /// Adjoint of `conv_core` in the kernel argument; `self` is the input,
    /// `grad` the output cotangent.
    pub fn conv_kernel_vjp(
        &self,
        grad: &Value,
        stride: [usize; 3],
        kernel_spatial: [usize; 3],
    ) -> Result<Value> {
        self.graph.check_owns(grad)?;
        let v = {
            let inner = self.graph.inner.borrow();
            conv::conv3d_kernel_vjp(
                &inner.nodes[self.id].value,
                &inner.nodes[grad.id].value,
                stride,
                kernel_spatial,
            )?
        };
        Ok(self.push_binary(
            grad,
            Op::ConvKernelVjp {
                input: self.id,
                grad: grad.id,
                stride,
            },
            v,
        ))
    }

    /// `[C] -> shape` with the channel axis at position 1.
    pub fn broadcast_channel(&self, shape: &[usize]) -> Result<Value> {
        let x = self.tensor();
        if x.shape().len() != 1 || shape.len() < 2 || shape[1] != x.shape()[0] {
            return Err(Error::shape(format!(
                "broadcast_channel: {:?} into {:?} (axis 1 must match)",
                x.shape(),
                shape
            )));
        }
        let c = shape[1];
        let batch = shape[0];
        let rest: usize = shape[2..].iter().product();
        let mut out = Tensor::zeros(shape);
        {
            let od = out.data_mut();
            for b in 0..batch {
                for ci in 0..c {
                    let v = x.data()[ci];
                    for o in od[(b * c + ci) * rest..][..rest].iter_mut() {
                        *o = v;
                    }
                }
            }
        }
        Ok(self.push_unary(Op::BroadcastChannel(self.id), out))
    }

    /// Sums every axis except axis 1: `[B,C,...] -> [C]`.
    pub fn sum_except_channel(&self) -> Result<Value> {
        let x = self.tensor();
        if x.shape().len() < 2 {
            return Err(Error::shape(format!(
                "sum_except_channel expects rank >= 2, got {:?}",
                x.shape()
            )));
        }
        let (batch, c) = (x.shape()[0], x.shape()[1]);
        let rest: usize = x.shape()[2..].iter().product();
        let mut out = Tensor::zeros(&[c]);
        for b in 0..batch {
            for ci in 0..c {
                let s: f64 = x.data()[(b * c + ci) * rest..][..rest].iter().sum();
                out.data_mut()[ci] += s;
            }
        }
        Ok(self.push_unary(Op::SumExceptChannel(self.id), out))
    }

    /// Scalar -> constant-filled tensor of `shape`.
    pub fn broadcast_fill(&self, shape: &[usize]) -> Result<Value> {
        let x = self.tensor();
        if x.numel() != 1 {
            return Err(Error::shape(format!(
                "broadcast_fill expects a scalar, got {:?}",
                x.shape()
            )));
        }
        let out = Tensor::filled(shape, x.data()[0]);
        Ok(self.push_unary(Op::BroadcastFill(self.id), out))
    }

    pub fn sum_all(&self) -> Result<Value> {
        let x = self.tensor();
        if x.numel() == 0 {
            return Err(Error::EmptyTensor("sum over empty tensor".to_string()));
        }
        let s: f64 = x.data().iter().sum();
        Ok(self.push_unary(Op::SumAll(self.id), Tensor::scalar(s)))
    }

    pub fn mean_all(&self) -> Result<Value> {
        let n = self.numel();
        if n == 0 {
            return Err(Error::EmptyTensor("mean over empty tensor".to_string()));
        }
        Ok(self.sum_all()?.div_scalar(n as f64))
    }

    /// `[B] -> shape` replicating each sample's scalar across its block.
    pub fn broadcast_per_sample(&self, shape: &[usize]) -> Result<Value> {
        let x = self.tensor();
        if x.shape().len() != 1 || shape.is_empty() || shape[0] != x.shape()[0] {
            return Err(Error::shape(format!(
                "broadcast_per_sample: {:?} into {:?} (axis 0 must match)",
                x.shape(),
                shape
            )));
        }
        let batch = shape[0];
        let rest: usize = shape[1..].iter().product();
        let mut out = Tensor::zeros(shape);
        for b in 0..batch {
            let v = x.data()[b];
            for o in out.data_mut()[b * rest..][..rest].iter_mut() {
                *o = v;
            }
        }
        Ok(self.push_unary(Op::BroadcastPerSample(self.id), out))
    }

    /// Sums all non-batch axes: `[B,...] -> [B]`.
    pub fn sum_per_sample(&self) -> Result<Value> {
        let x = self.tensor();
        if x.shape().is_empty() || x.numel() == 0 {
            return Err(Error::shape(format!(
                "sum_per_sample expects non-empty rank >= 1, got {:?}",
                x.shape()
            )));
        }
        let batch = x.shape()[0];
        let rest: usize = x.shape()[1..].iter().product();
        let mut out = Tensor::zeros(&[batch]);
        for b in 0..batch {
            out.data_mut()[b] = x.data()[b * rest..][..rest].iter().sum();
        }
        Ok(self.push_unary(Op::SumPerSample(self.id), out))
    }

    /// `[B,1,...] -> [B,times,...]`.
    pub fn repeat_channel(&self, times: usize) -> Result<Value> {
        let x = self.tensor();
        if x.shape().len() < 2 || x.shape()[1] != 1 || times == 0 {
            return Err(Error::shape(format!(
                "repeat_channel x{} expects rank >= 2 with channel extent 1, got {:?}",
                times,
                x.shape()
            )));
        }
        let batch = x.shape()[0];
        let rest: usize = x.shape()[2..].iter().product();
        let mut shape = x.shape().to_vec();
        shape[1] = times;
        let mut out = Tensor::zeros(&shape);
        for b in 0..batch {
            let src = &x.data()[b * rest..][..rest];
            for t in 0..times {
                out.data_mut()[(b * times + t) * rest..][..rest].copy_from_slice(src);
            }
        }
        Ok(self.push_unary(Op::RepeatChannel(self.id), out))
    }

    /// `[B,C,...] -> [B,1,...]` summing over the channel axis.
    pub fn sum_channel_to_one(&self) -> Result<Value> {
        let x = self.tensor();
        if x.shape().len() < 2 {
            return Err(Error::shape(format!(
                "sum_channel_to_one expects rank >= 2, got {:?}",
                x.shape()
            )));
        }
        let (batch, c) = (x.shape()[0], x.shape()[1]);
        let rest: usize = x.shape()[2..].iter().product();
        let mut shape = x.shape().to_vec();
        shape[1] = 1;
        let mut out = Tensor::zeros(&shape);
        for b in 0..batch {
            for ci in 0..c {
                let src = &x.data()[(b * c + ci) * rest..][..rest];
                for (o, s) in out.data_mut()[b * rest..][..rest].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        Ok(self.push_unary(Op::SumChannelToOne(self.id), out))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Value> {
        let x = self.tensor();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow axis {axis} range {start}..{} out of bounds for {:?}",
                start + len,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Tensor::zeros(&out_shape);
        for o in 0..outer {
            let src = &x.data()[(o * ext + start) * inner..][..len * inner];
            out.data_mut()[o * len * inner..][..len * inner].copy_from_slice(src);
        }
        Ok(self.push_unary(
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            out,
        ))
    }

    /// Embeds this tensor into a zero tensor whose `axis` extent is `full`,
    /// at offset `start`. Adjoint of `narrow`.
    pub fn pad_scatter(&self, axis: usize, start: usize, full: usize) -> Result<Value> {
        let x = self.tensor();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + shape[axis] > full {
            return Err(Error::shape(format!(
                "pad_scatter axis {axis} start {start} full {full} incompatible with {:?}",
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = full;
        let mut out = Tensor::zeros(&out_shape);
        for o in 0..outer {
            let src = &x.data()[o * len * inner..][..len * inner];
            out.data_mut()[(o * full + start) * inner..][..len * inner].copy_from_slice(src);
        }
        Ok(self.push_unary(
            Op::PadScatter {
                x: self.id,
                axis,
                start,
            },
            out,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Value> {
        let v = self.tensor().reshaped(shape.to_vec())?;
        Ok(self.push_unary(Op::Reshape(self.id), v))
    }

    /// Flattens all non-batch axes and takes the per-sample L2 norm, with an
    /// epsilon guard inside the square root.
    pub fn l2_norm_per_sample(&self, eps: f64) -> Result<Value> {
        self.square()?.sum_per_sample()?.sqrt_eps(eps)
    }

    /// Internal id, for tests and debugging.
    pub fn id(&self) -> usize {
        self.id
    }
}

/// Valid 3D convolution with bias: `input [B,C,D,H,W]`, `kernel
/// [F,C,kd,kh,kw]`, `bias [F]`.
pub fn conv3d(input: &Value, kernel: &Value, bias: &Value, stride: [usize; 3]) -> Result<Value> {
    let core = input.conv_core(kernel, stride)?;
    let shape = core.shape();
    let b = bias.broadcast_channel(&shape)?;
    core.add(&b)
}

/// Valid 2D convolution with bias, routed through the 3D kernels with a unit
/// depth axis: `input [B,C,H,W]`, `kernel [F,C,kh,kw]`, `bias [F]`.
pub fn conv2d(input: &Value, kernel: &Value, bias: &Value, stride: [usize; 2]) -> Result<Value> {
    let ishape = input.shape();
    let kshape = kernel.shape();
    if ishape.len() != 4 || kshape.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d expects rank-4 input/kernel, got {:?} and {:?}",
            ishape, kshape
        )));
    }
    let x5 = input.reshape(&[ishape[0], ishape[1], 1, ishape[2], ishape[3]])?;
    let k5 = kernel.reshape(&[kshape[0], kshape[1], 1, kshape[2], kshape[3]])?;
    let out = conv3d(&x5, &k5, bias, [1, stride[0], stride[1]])?;
    let os = out.shape();
    out.reshape(&[os[0], os[1], os[3], os[4]])
}

/// Affine map `input [B,N] * weight [M,N]^T + bias [M]`.
pub fn dense(input: &Value, weight: &Value, bias: &Value) -> Result<Value> {
    let ishape = input.shape();
    let wshape = weight.shape();
    if ishape.len() != 2 || wshape.len() != 2 || ishape[1] != wshape[1] {
        return Err(Error::shape(format!(
            "dense: input {:?} and weight {:?} inner extents must agree",
            ishape, wshape
        )));
    }
    let out = input.matmul(&weight.transpose2d()?)?;
    let b = bias.broadcast_channel(&out.shape())?;
    out.add(&b)
}
