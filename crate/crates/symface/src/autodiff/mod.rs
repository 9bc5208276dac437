//! Minimal reverse-mode automatic differentiation on dynamic ndarrays.
//!
//! A `Graph` records define-by-run: every op computes its value eagerly and
//! pushes a node; `backward` walks the tape in reverse creation order. The op
//! set is exactly what the networks and losses in this crate need, nothing
//! more. Nodes carry optional structural tags so the generator can be audited
//! for skip connections after the fact.

pub mod check;
pub mod kernels;

use std::collections::HashMap;

use ndarray::{ArrayD, Axis, IxDyn, ScalarOperand, Slice};
use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating scalar the graph is generic over. Training runs at f32,
/// gradient checking at f64.
pub trait Real:
    Float
    + FromPrimitive
    + ScalarOperand
    + ndarray::LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn of_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn of_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Structural label used by the generator graph audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Merge,
    Expand,
}

#[derive(Debug, Clone)]
enum Op<F: Real> {
    Leaf { trainable: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, F),
    AddScalar(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    LeakyRelu(NodeId, F),
    Clamp(NodeId, F, F),
    Sum(NodeId),
    Mean(NodeId),
    MeanSpatial(NodeId),
    AddRowBias(NodeId, NodeId),
    AddChanBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    BatchMatMul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    SoftmaxLast(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Roll {
        x: NodeId,
        shift: [isize; 2],
        axes: [usize; 2],
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    SliceBatch(NodeId, usize),
    StopGrad(NodeId),
}

impl<F: Real> Op<F> {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf { .. } => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRowBias(a, b) | AddChanBias(a, b)
            | MatMul(a, b) | BatchMatMul(a, b) => vec![*a, *b],
            Neg(a) | Scale(a, _) | AddScalar(a) | Abs(a) | Square(a) | Log(a) | Sigmoid(a)
            | Tanh(a) | Gelu(a) | LeakyRelu(a, _) | Clamp(a, _, _) | Sum(a) | Mean(a)
            | MeanSpatial(a) | SoftmaxLast(a) | Reshape(a) | Permute(a, _)
            | SliceBatch(a, _) | StopGrad(a) => vec![*a],
            Conv2d { x, w, .. } => vec![*x, *w],
            LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Roll { x, .. } => vec![*x],
            Concat { parts, .. } => parts.clone(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf { .. } => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Neg(..) => "neg",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            Abs(..) => "abs",
            Square(..) => "square",
            Log(..) => "log",
            Sigmoid(..) => "sigmoid",
            Tanh(..) => "tanh",
            Gelu(..) => "gelu",
            LeakyRelu(..) => "leaky_relu",
            Clamp(..) => "clamp",
            Sum(..) => "sum",
            Mean(..) => "mean",
            MeanSpatial(..) => "mean_spatial",
            AddRowBias(..) => "add_row_bias",
            AddChanBias(..) => "add_chan_bias",
            MatMul(..) => "matmul",
            BatchMatMul(..) => "batch_matmul",
            Conv2d { .. } => "conv2d",
            LayerNorm { .. } => "layer_norm",
            SoftmaxLast(..) => "softmax",
            Reshape(..) => "reshape",
            Permute(..) => "permute",
            Roll { .. } => "roll",
            Concat { .. } => "concat",
            SliceBatch(..) => "slice_batch",
            StopGrad(..) => "stop_grad",
        }
    }
}

struct Node<F: Real> {
    value: ArrayD<F>,
    op: Op<F>,
    needs_grad: bool,
    tag: Option<Tag>,
}

/// Binding mode for parameter stores: trainable leaves receive gradients,
/// frozen ones are constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BindMode {
    Trainable,
    Frozen,
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<ArrayD<F>>>,
    pub(crate) bind_cache: HashMap<(u64, BindMode), crate::params::Binding>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bind_cache: HashMap::new(),
        }
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf { trainable } => *trainable,
            Op::StopGrad(_) => false,
            other => other
                .inputs()
                .iter()
                .any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            tag: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf (a parameter or checked input).
    pub fn leaf(&mut self, value: ArrayD<F>) -> NodeId {
        self.push(value, Op::Leaf { trainable: true })
    }

    /// Constant leaf; never receives gradient.
    pub fn constant(&mut self, value: ArrayD<F>) -> NodeId {
        self.push(value, Op::Leaf { trainable: false })
    }

    /// 0-d constant.
    pub fn scalar_const(&mut self, v: F) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, id: NodeId) -> F {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        *v.iter().next().expect("scalar node")
    }

    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { .. })
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn inputs_of(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    pub fn set_tag(&mut self, id: NodeId, tag: Tag) {
        self.nodes[id.0].tag = Some(tag);
    }

    pub fn tag(&self, id: NodeId) -> Option<Tag> {
        self.nodes[id.0].tag
    }

    pub fn assert_finite(&self, id: NodeId, what: &str) -> Result<()> {
        if self.nodes[id.0].value.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { term: what.into() })
        }
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa == sb {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")))
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.abs());
        self.push(v, Op::Abs(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.ln());
        self.push(v, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = F::one();
        let v = self.nodes[a.0].value.mapv(|x| one / (one + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(gelu_val);
        self.push(v, Op::Gelu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: F) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x > F::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn clamp(&mut self, a: NodeId, lo: F, hi: F) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x < lo { lo } else if x > hi { hi } else { x });
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Forward identity that blocks gradient flow.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.clone();
        self.push(v, Op::StopGrad(a))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: F = self.nodes[a.0].value.iter().copied().sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len().max(1);
        let s: F = self.nodes[a.0].value.iter().copied().sum();
        let m = s / F::of_f64(n as f64);
        self.push(ArrayD::from_elem(IxDyn(&[]), m), Op::Mean(a))
    }

    /// [N,C,H,W] -> [N,C] mean over the spatial axes (global average pool).
    pub fn mean_spatial(&mut self, a: NodeId) -> Result<NodeId> {
        let x = kernels::as4(&self.nodes[a.0].value, "mean_spatial")?;
        let v = x.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap();
        Ok(self.push(v.into_dyn(), Op::MeanSpatial(a)))
    }

    // ---- linear algebra ----

    /// x [.., D] + bias [D].
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let bs = self.nodes[bias.0].value.shape().to_vec();
        let d = *xs.last().ok_or_else(|| Error::Shape("add_row_bias on scalar".into()))?;
        if bs != [d] {
            return Err(Error::Shape(format!(
                "add_row_bias: bias {bs:?} vs last dim {d}"
            )));
        }
        let b = &self.nodes[bias.0].value;
        let mut v = self.nodes[x.0].value.clone();
        let last = Axis(v.ndim() - 1);
        let b1 = b.view().into_shape_with_order(d).expect("bias shape");
        for mut row in v.lanes_mut(last) {
            for (r, bv) in row.iter_mut().zip(b1.iter()) {
                *r += *bv;
            }
        }
        Ok(self.push(v, Op::AddRowBias(x, bias)))
    }

    /// x [N,C,H,W] + bias [C].
    pub fn add_chan_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let x4 = kernels::as4(&self.nodes[x.0].value, "add_chan_bias")?;
        let (_, c, _, _) = x4.dim();
        let bs = self.nodes[bias.0].value.shape().to_vec();
        if bs != [c] {
            return Err(Error::Shape(format!(
                "add_chan_bias: bias {bs:?} vs channels {c}"
            )));
        }
        let b = self.nodes[bias.0]
            .value
            .view()
            .into_shape_with_order(c)
            .expect("bias shape")
            .to_owned();
        let mut v = x4;
        for (ci, mut lane) in v.axis_iter_mut(Axis(1)).enumerate() {
            lane += b[ci];
        }
        Ok(self.push(v.into_dyn(), Op::AddChanBias(x, bias)))
    }

    /// [N,K] x [K,M].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let a2 = kernels::as2(&self.nodes[a.0].value, "matmul lhs")?;
        let b2 = kernels::as2(&self.nodes[b.0].value, "matmul rhs")?;
        if a2.dim().1 != b2.dim().0 {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                a2.dim(),
                b2.dim()
            )));
        }
        let v = a2.dot(&b2);
        Ok(self.push(v.into_dyn(), Op::MatMul(a, b)))
    }

    /// [..,N,K] x [..,K,M] with equal leading dims.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::batch_matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(v, Op::BatchMatMul(a, b)))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let x4 = kernels::as4(&self.nodes[x.0].value, "conv2d input")?;
        let w4 = kernels::as4(&self.nodes[w.0].value, "conv2d weight")?;
        let v = kernels::conv2d_raw(&x4, &w4, stride, pad)?;
        Ok(self.push(v.into_dyn(), Op::Conv2d { x, w, stride, pad }))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let d = *self.nodes[x.0]
            .value
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on scalar".into()))?;
        for (nm, p) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[p.0].value.len() != d {
                return Err(Error::Shape(format!(
                    "layer_norm {nm} len {} vs feature dim {d}",
                    self.nodes[p.0].value.len()
                )));
            }
        }
        let v = kernels::layer_norm_forward(
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta }))
    }

    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let v = kernels::softmax_last(&self.nodes[a.0].value);
        self.push(v, Op::SoftmaxLast(a))
    }

    // ---- layout ----

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].value.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?}",
                self.nodes[a.0].value.shape()
            )));
        }
        let v = self.nodes[a.0]
            .value
            .view()
            .into_shape_with_order(shape)
            .expect("checked reshape")
            .to_owned();
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let r = self.nodes[a.0].value.ndim();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&ax| ax >= r || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::Shape(format!(
                "permute axes {axes:?} invalid for rank {r}"
            )));
        }
        let v = self.nodes[a.0]
            .value
            .view()
            .permuted_axes(axes.to_vec())
            .as_standard_layout()
            .to_owned();
        Ok(self.push(v, Op::Permute(a, axes.to_vec())))
    }

    pub fn roll2(&mut self, a: NodeId, shift: [isize; 2], axes: [usize; 2]) -> Result<NodeId> {
        let r = self.nodes[a.0].value.ndim();
        if axes.iter().any(|&ax| ax >= r) {
            return Err(Error::Shape(format!("roll axes {axes:?} for rank {r}")));
        }
        let v = kernels::roll2(&self.nodes[a.0].value, shift, axes);
        Ok(self.push(v, Op::Roll { x: a, shift, axes }))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero parts".into()));
        }
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views)
            .map_err(|e| Error::Shape(format!("concat: {e}")))?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Single index along axis 0, keeping the axis (length 1).
    pub fn slice_batch(&mut self, a: NodeId, idx: usize) -> Result<NodeId> {
        let n = self.nodes[a.0]
            .value
            .shape()
            .first()
            .copied()
            .ok_or_else(|| Error::Shape("slice_batch on scalar".into()))?;
        if idx >= n {
            return Err(Error::Shape(format!("slice_batch index {idx} of {n}")));
        }
        let v = self.nodes[a.0]
            .value
            .slice_axis(Axis(0), Slice::from(idx..idx + 1))
            .to_owned();
        Ok(self.push(v, Op::SliceBatch(a, idx)))
    }

    // ---- backward ----

    /// Reverse pass from a one-element output node. Gradients are then
    /// available through `grad`.
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        let ov = &self.nodes[out.0].value;
        if ov.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                ov.shape()
            )));
        }
        if !ov.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                term: "backward objective".into(),
            });
        }
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(ArrayD::from_elem(ov.raw_dim(), F::one()));

        for id in (0..=out.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &gout, &mut grads)?;
            grads[id] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(
        &self,
        id: usize,
        gout: &ArrayD<F>,
        grads: &mut [Option<ArrayD<F>>],
    ) -> Result<()> {
        use Op::*;

        let live = |s: &Self, n: NodeId| s.nodes[n.0].needs_grad;
        fn acc<F: Real>(grads: &mut [Option<ArrayD<F>>], id: NodeId, delta: ArrayD<F>) {
            match &mut grads[id.0] {
                Some(g) => *g += &delta,
                slot @ None => *slot = Some(delta),
            }
        }

        match &self.nodes[id].op {
            Leaf { .. } | StopGrad(_) => {}
            Add(a, b) => {
                if live(self, *a) {
                    acc(grads, *a, gout.clone());
                }
                if live(self, *b) {
                    acc(grads, *b, gout.clone());
                }
            }
            Sub(a, b) => {
                if live(self, *a) {
                    acc(grads, *a, gout.clone());
                }
                if live(self, *b) {
                    acc(grads, *b, gout.mapv(|v| -v));
                }
            }
            Mul(a, b) => {
                if live(self, *a) {
                    acc(grads, *a, gout * &self.nodes[b.0].value);
                }
                if live(self, *b) {
                    acc(grads, *b, gout * &self.nodes[a.0].value);
                }
            }
            Neg(a) => {
                if live(self, *a) {
                    acc(grads, *a, gout.mapv(|v| -v));
                }
            }
            Scale(a, c) => {
                if live(self, *a) {
                    let c = *c;
                    acc(grads, *a, gout.mapv(|v| v * c));
                }
            }
            AddScalar(a) => {
                if live(self, *a) {
                    acc(grads, *a, gout.clone());
                }
            }
            Abs(a) => {
                if live(self, *a) {
                    let sign = self.nodes[a.0].value.mapv(|x| {
                        if x > F::zero() {
                            F::one()
                        } else if x < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        }
                    });
                    acc(grads, *a, gout * &sign);
                }
            }
            Square(a) => {
                if live(self, *a) {
                    let two = F::of_f64(2.0);
                    acc(grads, *a, gout * &self.nodes[a.0].value.mapv(|x| x * two));
                }
            }
            Log(a) => {
                if live(self, *a) {
                    acc(grads, *a, gout / &self.nodes[a.0].value);
                }
            }
            Sigmoid(a) => {
                if live(self, *a) {
                    let y = &self.nodes[id].value;
                    acc(grads, *a, gout * &y.mapv(|v| v * (F::one() - v)));
                }
            }
            Tanh(a) => {
                if live(self, *a) {
                    let y = &self.nodes[id].value;
                    acc(grads, *a, gout * &y.mapv(|v| F::one() - v * v));
                }
            }
            Gelu(a) => {
                if live(self, *a) {
                    acc(grads, *a, gout * &self.nodes[a.0].value.mapv(gelu_grad));
                }
            }
            LeakyRelu(a, s) => {
                if live(self, *a) {
                    let s = *s;
                    let d = self.nodes[a.0]
                        .value
                        .mapv(|x| if x > F::zero() { F::one() } else { s });
                    acc(grads, *a, gout * &d);
                }
            }
            Clamp(a, lo, hi) => {
                if live(self, *a) {
                    let (lo, hi) = (*lo, *hi);
                    let d = self.nodes[a.0]
                        .value
                        .mapv(|x| if x > lo && x < hi { F::one() } else { F::zero() });
                    acc(grads, *a, gout * &d);
                }
            }
            Sum(a) => {
                if live(self, *a) {
                    let g = *gout.iter().next().expect("scalar grad");
                    acc(
                        grads,
                        *a,
                        ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), g),
                    );
                }
            }
            Mean(a) => {
                if live(self, *a) {
                    let n = F::of_f64(self.nodes[a.0].value.len().max(1) as f64);
                    let g = *gout.iter().next().expect("scalar grad") / n;
                    acc(
                        grads,
                        *a,
                        ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), g),
                    );
                }
            }
            MeanSpatial(a) => {
                if live(self, *a) {
                    let xs = self.nodes[a.0].value.shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let inv = F::of_f64((h * w) as f64).recip();
                    let mut dx = ArrayD::<F>::zeros(self.nodes[a.0].value.raw_dim());
                    for ni in 0..n {
                        for ci in 0..c {
                            let g = gout[[ni, ci]] * inv;
                            dx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(g);
                        }
                    }
                    acc(grads, *a, dx);
                }
            }
            AddRowBias(x, b) => {
                if live(self, *x) {
                    acc(grads, *x, gout.clone());
                }
                if live(self, *b) {
                    let d = *gout.shape().last().expect("row bias grad");
                    let g2 = gout
                        .view()
                        .into_shape_with_order((gout.len() / d, d))
                        .expect("fold rows");
                    acc(grads, *b, g2.sum_axis(Axis(0)).into_dyn());
                }
            }
            AddChanBias(x, b) => {
                if live(self, *x) {
                    acc(grads, *x, gout.clone());
                }
                if live(self, *b) {
                    let g4 = kernels::as4(gout, "chan bias grad")?;
                    let db = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    acc(grads, *b, db.into_dyn());
                }
            }
            MatMul(a, b) => {
                let ga = kernels::as2(gout, "matmul grad")?;
                if live(self, *a) {
                    let bv = kernels::as2(&self.nodes[b.0].value, "matmul rhs")?;
                    acc(grads, *a, ga.dot(&bv.t()).into_dyn());
                }
                if live(self, *b) {
                    let av = kernels::as2(&self.nodes[a.0].value, "matmul lhs")?;
                    acc(grads, *b, av.t().dot(&ga).into_dyn());
                }
            }
            BatchMatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if live(self, *a) {
                    let bt = swap_last_two(bv);
                    acc(grads, *a, kernels::batch_matmul(gout, &bt)?);
                }
                if live(self, *b) {
                    let at = swap_last_two(av);
                    acc(grads, *b, kernels::batch_matmul(&at, gout)?);
                }
            }
            Conv2d { x, w, stride, pad } => {
                let x4 = kernels::as4(&self.nodes[x.0].value, "conv input")?;
                let w4 = kernels::as4(&self.nodes[w.0].value, "conv weight")?;
                let g4 = kernels::as4(gout, "conv grad")?;
                let (dx, dw) = kernels::conv2d_backward(&x4, &w4, *stride, *pad, &g4)?;
                if live(self, *x) {
                    acc(grads, *x, dx.into_dyn());
                }
                if live(self, *w) {
                    acc(grads, *w, dw.into_dyn());
                }
            }
            LayerNorm { x, gamma, beta } => {
                let (dx, dg, db) = kernels::layer_norm_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[gamma.0].value,
                    gout,
                );
                if live(self, *x) {
                    acc(grads, *x, dx);
                }
                if live(self, *gamma) {
                    let shaped = dg
                        .into_shape_with_order(self.nodes[gamma.0].value.raw_dim())
                        .expect("gamma grad shape");
                    acc(grads, *gamma, shaped);
                }
                if live(self, *beta) {
                    let shaped = db
                        .into_shape_with_order(self.nodes[beta.0].value.raw_dim())
                        .expect("beta grad shape");
                    acc(grads, *beta, shaped);
                }
            }
            SoftmaxLast(a) => {
                if live(self, *a) {
                    acc(
                        grads,
                        *a,
                        kernels::softmax_last_backward(&self.nodes[id].value, gout),
                    );
                }
            }
            Reshape(a) => {
                if live(self, *a) {
                    let shaped = gout
                        .view()
                        .into_shape_with_order(self.nodes[a.0].value.raw_dim())
                        .expect("reshape grad")
                        .to_owned();
                    acc(grads, *a, shaped);
                }
            }
            Permute(a, axes) => {
                if live(self, *a) {
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    let g = gout
                        .view()
                        .permuted_axes(inv)
                        .as_standard_layout()
                        .to_owned();
                    acc(grads, *a, g);
                }
            }
            Roll { x, shift, axes } => {
                if live(self, *x) {
                    acc(
                        grads,
                        *x,
                        kernels::roll2(gout, [-shift[0], -shift[1]], *axes),
                    );
                }
            }
            Concat { parts, axis } => {
                let mut offset = 0usize;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    if live(self, *p) {
                        let slice = gout
                            .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                            .to_owned();
                        acc(grads, *p, slice);
                    }
                    offset += len;
                }
            }
            SliceBatch(a, idx) => {
                if live(self, *a) {
                    let mut dx = ArrayD::<F>::zeros(self.nodes[a.0].value.raw_dim());
                    dx.slice_axis_mut(Axis(0), Slice::from(*idx..*idx + 1))
                        .assign(gout);
                    acc(grads, *a, dx);
                }
            }
        }
        Ok(())
    }
}

fn swap_last_two<F: Real>(x: &ArrayD<F>) -> ArrayD<F> {
    let r = x.ndim();
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 2, r - 1);
    x.view().permuted_axes(axes).as_standard_layout().to_owned()
}

fn gelu_val<F: Real>(x: F) -> F {
    // tanh approximation; the derivative below matches it exactly
    let c = F::of_f64(0.7978845608028654); // sqrt(2/pi)
    let a = F::of_f64(0.044715);
    let half = F::of_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of_f64(0.7978845608028654);
    let a = F::of_f64(0.044715);
    let half = F::of_f64(0.5);
    let three = F::of_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

/// Names of every differentiable operation the network stack relies on.
/// Each entry is exercised with gradients by the contract tests.
pub fn required_op_set() -> &'static [&'static str] {
    &[
        "conv2d",
        "matmul",
        "add_row_bias",
        "add_chan_bias",
        "layer_norm",
        "softmax",
        "gelu",
        "leaky_relu",
        "sigmoid",
        "tanh",
        "log",
        "add",
        "sub",
        "mul",
        "abs",
        "square",
        "clamp",
        "mean",
        "sum",
        "mean_spatial",
        "reshape",
        "permute",
        "roll",
        "concat",
        "slice_batch",
        "batch_matmul",
        "window_partition",
        "window_reverse",
        "attention_bias_add",
        "stop_grad",
    ]
}


#[cfg(test)]
mod tests {
    use super::check::grad_check;
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randu(shape: &[usize], seed: u64, lo: f64, hi: f64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(lo..hi))
    }

    /// Values bounded away from zero so |x| and leaky-relu kinks are safe
    /// for finite differences.
    fn randu_signed_away(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            let mag = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
    }

    const EPS: f64 = 1e-6;
    const TOL64: f64 = 1e-5;

    #[test]
    fn grad_sum_of_squares_closed_form() {
        let x = randu(&[4, 3], 7, -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let xid = g.leaf(x.clone());
        let sq = g.square(xid);
        let out = g.sum(sq);
        g.backward(out).unwrap();
        let grad = g.grad(xid).unwrap();
        for (gv, xv) in grad.iter().zip(x.iter()) {
            assert!((gv - 2.0 * xv).abs() < 1e-12);
        }
        // and against finite differences per the contract
        let err = grad_check(
            |g, x| {
                let sq = g.square(x);
                Ok(g.sum(sq))
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "sum(x^2) grad err {err}");
    }

    #[test]
    fn stop_grad_blocks_ancestors() {
        let x = randu(&[3, 3], 1, -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let xid = g.leaf(x);
        let sq = g.square(xid);
        let sg = g.stop_grad(sq);
        let m = g.mean(sg);
        // mix with a live path so backward has something to do
        let live = g.mean(xid);
        let out = g.add(m, live).unwrap();
        g.backward(out).unwrap();
        let grad = g.grad(xid).unwrap();
        // only the live mean path contributes: exactly 1/9 per element
        for gv in grad.iter() {
            assert_eq!(*gv, 1.0 / 9.0);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = randu(&[5, 7], 3, -4.0, 4.0);
        let mut g = Graph::<f64>::new();
        let xid = g.constant(x);
        let sm = g.softmax_last(xid);
        for row in g.value(sm).rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_identity_kernel_preserves_input() {
        // 3x3 kernel with centered 1 per matching channel, pad 1 stride 1
        let x = randu(&[1, 2, 5, 5], 5, -1.0, 1.0);
        let mut w = ArrayD::<f64>::zeros(IxDyn(&[2, 2, 3, 3]));
        w[[0, 0, 1, 1]] = 1.0;
        w[[1, 1, 1, 1]] = 1.0;
        let mut g = Graph::<f64>::new();
        let xid = g.constant(x.clone());
        let wid = g.constant(w);
        let y = g.conv2d(xid, wid, 1, 1).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn gradcheck_elementwise_ops() {
        let x = randu_signed_away(&[3, 4], 11);
        let c = randu(&[3, 4], 12, 0.2, 1.0);
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, NodeId) -> crate::error::Result<NodeId>>)> = vec![
            ("add", Box::new({
                let c = c.clone();
                move |g, x| {
                    let cc = g.constant(c.clone());
                    let y = g.add(x, cc)?;
                    let w = g.mul(y, x)?;
                    Ok(g.mean(w))
                }
            })),
            ("sub", Box::new({
                let c = c.clone();
                move |g, x| {
                    let cc = g.constant(c.clone());
                    let y = g.sub(x, cc)?;
                    let w = g.mul(y, y)?;
                    Ok(g.mean(w))
                }
            })),
            ("mul", Box::new(|g, x| {
                let y = g.mul(x, x)?;
                Ok(g.mean(y))
            })),
            ("neg", Box::new(|g, x| {
                let y = g.neg(x);
                let z = g.mul(y, x)?;
                Ok(g.mean(z))
            })),
            ("scale", Box::new(|g, x| {
                let y = g.scale(x, 3.5);
                let z = g.mul(y, x)?;
                Ok(g.sum(z))
            })),
            ("abs", Box::new(|g, x| {
                let y = g.abs(x);
                let z = g.mul(y, y)?;
                Ok(g.mean(z))
            })),
            ("square", Box::new(|g, x| {
                let y = g.square(x);
                Ok(g.mean(y))
            })),
            ("sigmoid", Box::new(|g, x| {
                let y = g.sigmoid(x);
                let z = g.mul(y, x)?;
                Ok(g.mean(z))
            })),
            ("tanh", Box::new(|g, x| {
                let y = g.tanh(x);
                let z = g.mul(y, x)?;
                Ok(g.mean(z))
            })),
            ("gelu", Box::new(|g, x| {
                let y = g.gelu(x);
                Ok(g.mean(y))
            })),
            ("leaky_relu", Box::new(|g, x| {
                let y = g.leaky_relu(x, 0.2);
                let z = g.mul(y, y)?;
                Ok(g.mean(z))
            })),
        ];
        for (name, build) in cases {
            let err = grad_check(build.as_ref(), &x, EPS).unwrap();
            assert!(err < TOL64, "{name} grad err {err}");
        }
    }

    #[test]
    fn gradcheck_log_clamp() {
        let x = randu(&[3, 3], 21, 0.2, 0.9);
        let err = grad_check(
            |g, x| {
                let y = g.log(x);
                Ok(g.mean(y))
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < TOL64, "log grad err {err}");
        // clamp: half the values clamped, none near the boundary
        let x = randu_signed_away(&[4, 4], 22);
        let err = grad_check(
            |g, x| {
                let y = g.clamp(x, -0.5, 0.5);
                let z = g.mul(y, x)?;
                Ok(g.mean(z))
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < TOL64, "clamp grad err {err}");
    }

    #[test]
    fn gradcheck_reductions_layout() {
        let x = randu(&[2, 3, 4, 4], 31, -1.0, 1.0);
        let c = randu(&[2, 3], 32, -1.0, 1.0);
        let err = grad_check(
            |g, x| {
                let m = g.mean_spatial(x)?;
                let cc = g.constant(c.clone());
                let w = g.mul(m, cc)?;
                Ok(g.sum(w))
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < TOL64, "mean_spatial grad err {err}");

        let probe = randu(&[2, 3, 4, 4], 33, -1.0, 1.0);
        let err = grad_check(
            |g, x| {
                let r = g.reshape(x, &[2, 3, 16])?;
                let p = g.permute(r, &[2, 0, 1])?;
                let r2 = g.reshape(p, &[16, 6])?;
                let rolled = g.reshape(r2, &[2, 3, 4, 4])?;
                let rolled = g.roll2(rolled, [1, -2], [2, 3])?;
                let cc = g.constant(probe.clone());
                let w = g.mul(rolled, cc)?;
                Ok(g.mean(w))
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < TOL64, "layout chain grad err {err}");

        let err = grad_check(
            |g, x| {
                let a = g.slice_batch(x, 0)?;
                let b = g.slice_batch(x, 1)?;
                let cat = g.concat(&[a, b], 0)?;
                let sq = g.square(cat);
                Ok(g.mean(sq))
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < TOL64, "concat/slice grad err {err}");
    }

    #[test]
    fn gradcheck_linear_ops_both_sides() {
        let a = randu(&[3, 4], 41, -1.0, 1.0);
        let b = randu(&[4, 2], 42, -1.0, 1.0);
        let err = grad_check(
            |g, x| {
                let bc = g.constant(b.clone());
                let y = g.matmul(x, bc)?;
                let sq = g.square(y);
                Ok(g.mean(sq))
            },
            &a,
            EPS,
        )
        .unwrap();
        assert!(err < TOL64, "matmul lhs grad err {err}");
        let err = grad_check(
            |g, x| {
                let ac = g.constant(a.clone());
                let y = g.matmul(ac, x)?;
                let sq = g.square(y);
                Ok(g.mean(sq))
            },
            &b,
            EPS,
        )
        .unwrap();
        assert!(err < TOL64, "matmul rhs grad err {err}");

        let ab = randu(&[2, 3, 4], 43, -1.0, 1.0);
        let bb = randu(&[2, 4, 2], 44, -1.0, 1.0);
        for lhs in [true, false] {
            let err = grad_check(
                |g, x| {
                    let other = g.constant(if lhs { bb.clone() } else { ab.clone() });
                    let y = if lhs {
                        g.batch_matmul(x, other)?
                    } else {
                        g.batch_matmul(other, x)?
                    };
                    let sq = g.square(y);
                    Ok(g.mean(sq))
                },
                if lhs { &ab } else { &bb },
                EPS,
            )
            .unwrap();
            assert!(err < TOL64, "batch_matmul grad err {err}");
        }

        // biases
        let x = randu(&[5, 3], 45, -1.0, 1.0);
        let bias = randu(&[3], 46, -0.5, 0.5);
        let err = grad_check(
            |g, bid| {
                let xc = g.constant(x.clone());
                let y = g.add_row_bias(xc, bid)?;
                let sq = g.square(y);
                Ok(g.mean(sq))
            },
            &bias,
            EPS,
        )
        .unwrap();
        assert!(err < TOL64, "row bias grad err {err}");

        let x4 = randu(&[2, 3, 4, 4], 47, -1.0, 1.0);
        let cbias = randu(&[3], 48, -0.5, 0.5);
        let err = grad_check(
            |g, bid| {
                let xc = g.constant(x4.clone());
                let y = g.add_chan_bias(xc, bid)?;
                let sq = g.square(y);
                Ok(g.mean(sq))
            },
            &cbias,
            EPS,
        )
        .unwrap();
        assert!(err < TOL64, "chan bias grad err {err}");
    }

    #[test]
    fn gradcheck_conv_layernorm_softmax() {
        let x = randu(&[1, 2, 6, 6], 51, -1.0, 1.0);
        let w = randu(&[3, 2, 3, 3], 52, -0.5, 0.5);
        for (stride, pad) in [(1usize, 1usize), (2, 1)] {
            let err = grad_check(
                |g, xid| {
                    let wc = g.constant(w.clone());
                    let y = g.conv2d(xid, wc, stride, pad)?;
                    let sq = g.square(y);
                    Ok(g.mean(sq))
                },
                &x,
                EPS,
            )
            .unwrap();
            assert!(err < TOL64, "conv input grad err {err} (s={stride})");
            let err = grad_check(
                |g, wid| {
                    let xc = g.constant(x.clone());
                    let y = g.conv2d(xc, wid, stride, pad)?;
                    let sq = g.square(y);
                    Ok(g.mean(sq))
                },
                &w,
                EPS,
            )
            .unwrap();
            assert!(err < TOL64, "conv weight grad err {err} (s={stride})");
        }

        let x = randu(&[4, 6], 53, -1.0, 1.0);
        let gamma = randu(&[6], 54, 0.5, 1.5);
        let beta = randu(&[6], 55, -0.5, 0.5);
        let probe = randu(&[4, 6], 56, -1.0, 1.0);
        let err = grad_check(
            |g, xid| {
                let gc = g.constant(gamma.clone());
                let bc = g.constant(beta.clone());
                let y = g.layer_norm(xid, gc, bc)?;
                let pc = g.constant(probe.clone());
                let z = g.mul(y, pc)?;
                Ok(g.mean(z))
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < TOL64, "layer_norm x grad err {err}");
        let err = grad_check(
            |g, gid| {
                let xc = g.constant(x.clone());
                let bc = g.constant(beta.clone());
                let y = g.layer_norm(xc, gid, bc)?;
                let pc = g.constant(probe.clone());
                let z = g.mul(y, pc)?;
                Ok(g.mean(z))
            },
            &gamma,
            EPS,
        )
        .unwrap();
        assert!(err < TOL64, "layer_norm gamma grad err {err}");
        let err = grad_check(
            |g, bid| {
                let xc = g.constant(x.clone());
                let gc = g.constant(gamma.clone());
                let y = g.layer_norm(xc, gc, bid)?;
                let pc = g.constant(probe.clone());
                let z = g.mul(y, pc)?;
                Ok(g.mean(z))
            },
            &beta,
            EPS,
        )
        .unwrap();
        assert!(err < TOL64, "layer_norm beta grad err {err}");

        let x = randu(&[3, 5], 57, -2.0, 2.0);
        let probe = randu(&[3, 5], 58, -1.0, 1.0);
        let err = grad_check(
            |g, xid| {
                let y = g.softmax_last(xid);
                let pc = g.constant(probe.clone());
                let z = g.mul(y, pc)?;
                Ok(g.sum(z))
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(err < TOL64, "softmax grad err {err}");
    }

    #[test]
    fn gradcheck_f32_coarse_tolerance() {
        // components with gradients bounded away from zero, so the check
        // measures op correctness rather than f32 cancellation noise
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let x = ArrayD::<f32>::from_shape_simple_fn(IxDyn(&[1, 2, 6, 6]), || {
            rng.gen_range(0.2f32..1.0)
        });
        let w = ArrayD::<f32>::from_shape_simple_fn(IxDyn(&[2, 2, 3, 3]), || {
            rng.gen_range(0.1f32..0.5)
        });
        let err = grad_check(
            |g, xid| {
                let wc = g.constant(w.clone());
                let y = g.conv2d(xid, wc, 1, 1)?;
                Ok(g.mean(y))
            },
            &x,
            1e-3f32,
        )
        .unwrap();
        assert!(err < 1e-2, "f32 conv grad err {err}");

        let x2 = ArrayD::<f32>::from_shape_simple_fn(IxDyn(&[4, 4]), || {
            rng.gen_range(0.5f32..1.5)
        });
        let err = grad_check(
            |g, xid| {
                let y = g.gelu(xid);
                Ok(g.mean(y))
            },
            &x2,
            1e-3f32,
        )
        .unwrap();
        assert!(err < 1e-2, "f32 gelu grad err {err}");
    }

    #[test]
    fn gradient_accumulates_over_shared_nodes() {
        // y = mean(x) + mean(x): gradient 2/n exactly
        let x = randu(&[4], 71, -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let xid = g.leaf(x);
        let m1 = g.mean(xid);
        let m2 = g.mean(xid);
        let out = g.add(m1, m2).unwrap();
        g.backward(out).unwrap();
        for v in g.grad(xid).unwrap().iter() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn shape_errors_reported() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(ArrayD::zeros(IxDyn(&[2, 3])));
        let b = g.constant(ArrayD::zeros(IxDyn(&[3, 2])));
        assert!(g.add(a, b).is_err());
        assert!(g.reshape(a, &[4, 2]).is_err());
        assert!(g.permute(a, &[0, 0]).is_err());
        let out = g.sum(a);
        assert!(matches!(g.backward(a), Err(crate::Error::Shape(_))) || g.backward(out).is_ok());
    }

    #[test]
    fn backward_rejects_nonfinite_objective() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[2]), 0.0));
        let l = g.log(x); // -inf
        let out = g.mean(l);
        assert!(matches!(
            g.backward(out),
            Err(crate::Error::NonFinite { .. })
        ));
    }

    #[test]
    fn required_op_set_is_stable() {
        let ops = required_op_set();
        assert!(ops.contains(&"conv2d"));
        assert!(ops.contains(&"stop_grad"));
        assert!(ops.contains(&"window_partition"));
        assert_eq!(ops.len(), 30);
    }
}
