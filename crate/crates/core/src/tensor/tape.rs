use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::{axis_extents, Precision, Tensor};
use crate::error::{Error, Result};

/// Elementwise operation kinds.
///
/// Binary kinds accept either equal shapes or a right operand whose last
/// axis is 1 (broadcast along that axis).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Relu,
    Neg,
    Scale(f64),
    Offset(f64),
    Sqrt,
    ClampMin(f64),
}

impl ElementwiseKind {
    fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Backward rule for an op whose forward value is computed outside the tape.
pub trait CustomBackward {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Binary {
        kind: ElementwiseKind,
        a: usize,
        b: usize,
        broadcast: bool,
    },
    Unary {
        kind: ElementwiseKind,
        a: usize,
    },
    Reduce {
        kind: ReduceKind,
        a: usize,
        axis: Option<usize>,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        lo: usize,
    },
    Transpose {
        a: usize,
        ax1: usize,
        ax2: usize,
    },
    Reshape {
        a: usize,
    },
    Repeat {
        a: usize,
        axis: usize,
    },
    Custom {
        inputs: Vec<usize>,
        rule: Box<dyn CustomBackward>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Binary { kind, .. } | Op::Unary { kind, .. } => match kind {
                ElementwiseKind::Add => "add",
                ElementwiseKind::Sub => "sub",
                ElementwiseKind::Mul => "mul",
                ElementwiseKind::Div => "div",
                ElementwiseKind::Exp => "exp",
                ElementwiseKind::Log => "log",
                ElementwiseKind::Relu => "relu",
                ElementwiseKind::Neg => "neg",
                ElementwiseKind::Scale(_) => "scale",
                ElementwiseKind::Offset(_) => "offset",
                ElementwiseKind::Sqrt => "sqrt",
                ElementwiseKind::ClampMin(_) => "clamp_min",
            },
            Op::Reduce { .. } => "reduce",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Repeat { .. } => "broadcast_repeat",
            Op::Custom { rule, .. } => rule.name(),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
///
/// A tape lives for one forward/backward cycle and is confined to a single
/// thread. Parameters are bound by name, so repeated lookups of the same
/// parameter return the same leaf and their gradients accumulate.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, usize>>,
    precision: Precision,
    consumed: Cell<bool>,
    fault: RefCell<Option<(&'static str, f64)>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("precision", &self.precision)
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(Precision::default())
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            precision,
            consumed: Cell::new(false),
            fault: RefCell::new(None),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiplies the backward contribution of every op named `op` by
    /// `factor`. Only used to check that gradient checks catch broken rules.
    #[doc(hidden)]
    pub fn inject_backward_fault(&self, op: &'static str, factor: f64) {
        *self.fault.borrow_mut() = Some((op, factor));
    }

    fn push(&self, mut value: Tensor, op: Op, requires_grad: bool) -> Result<Var<'_>> {
        self.precision.round(&mut value.data);
        if let Some(i) = value.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "{} produced a non-finite value at flat index {i}",
                op.name()
            )));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Registers an input tensor.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, false)
    }

    /// Binds a named parameter, reusing the existing leaf on repeated calls.
    pub fn param(&self, name: &str, value: &Tensor, trainable: bool) -> Result<Var<'_>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var { tape: self, id });
        }
        let var = self.leaf(value.clone(), trainable)?;
        self.params.borrow_mut().insert(name.to_string(), var.id);
        Ok(var)
    }

    /// Makes later [`Tape::param`] lookups of `name` return `var`.
    pub fn alias_param(&self, name: &str, var: Var<'_>) {
        self.params.borrow_mut().insert(name.to_string(), var.id);
    }

    /// Appends a node whose forward value was computed by the caller.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        output: Tensor,
        rule: Box<dyn CustomBackward>,
    ) -> Result<Var<'t>> {
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        let inputs = inputs.iter().map(|v| v.id).collect();
        self.push(output, Op::Custom { inputs, rule }, requires_grad)
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar `loss`, seeded with 1.
    ///
    /// A tape supports exactly one backward pass.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Autodiff("loss belongs to a different tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::Autodiff(
                "tape already consumed by a backward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape
            )));
        }
        let fault = *self.fault.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let scale = match fault {
                Some((name, factor)) if name == node.op.name() => factor,
                _ => 1.0,
            };
            backward_node(&nodes, node, &g, scale, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.filter(|_| matches!(nodes[id].op, Op::Leaf))
                    .map(|data| Tensor {
                        shape: nodes[id].value.shape.clone(),
                        data,
                    })
            })
            .collect();
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn backward_node(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    scale: f64,
    grads: &mut [Option<Vec<f64>>],
) {
    let emit = |grads: &mut [Option<Vec<f64>>], id: usize, mut delta: Vec<f64>| {
        if scale != 1.0 {
            delta.iter_mut().for_each(|d| *d *= scale);
        }
        accumulate(grads, nodes, id, delta);
    };
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.shape[0], av.shape[1]);
            let n = bv.shape[1];
            if nodes[*a].requires_grad {
                // dA = G · Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += gij * bv.data[p * n + j];
                        }
                    }
                }
                emit(grads, *a, da);
            }
            if nodes[*b].requires_grad {
                // dB = Aᵀ · G
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = av.data[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                emit(grads, *b, db);
            }
        }
        Op::Binary {
            kind,
            a,
            b,
            broadcast,
        } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let inner = if *broadcast { *av.shape.last().unwrap() } else { 1 };
            let bidx = |i: usize| if *broadcast { i / inner } else { i };
            if nodes[*a].requires_grad {
                let da: Vec<f64> = match kind {
                    ElementwiseKind::Add | ElementwiseKind::Sub => g.to_vec(),
                    ElementwiseKind::Mul => {
                        g.iter().enumerate().map(|(i, gi)| gi * bv.data[bidx(i)]).collect()
                    }
                    ElementwiseKind::Div => {
                        g.iter().enumerate().map(|(i, gi)| gi / bv.data[bidx(i)]).collect()
                    }
                    _ => unreachable!(),
                };
                emit(grads, *a, da);
            }
            if nodes[*b].requires_grad {
                let mut db = vec![0.0; bv.numel()];
                for (i, gi) in g.iter().enumerate() {
                    let j = bidx(i);
                    db[j] += match kind {
                        ElementwiseKind::Add => *gi,
                        ElementwiseKind::Sub => -gi,
                        ElementwiseKind::Mul => gi * av.data[i],
                        ElementwiseKind::Div => -gi * av.data[i] / (bv.data[j] * bv.data[j]),
                        _ => unreachable!(),
                    };
                }
                emit(grads, *b, db);
            }
        }
        Op::Unary { kind, a } => {
            let av = &nodes[*a].value;
            let da = g
                .iter()
                .zip(av.data.iter().zip(&out.data))
                .map(|(gi, (&x, &y))| {
                    gi * match kind {
                        ElementwiseKind::Exp => y,
                        ElementwiseKind::Log => 1.0 / x,
                        ElementwiseKind::Relu => {
                            if x > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        ElementwiseKind::Neg => -1.0,
                        ElementwiseKind::Scale(c) => *c,
                        ElementwiseKind::Offset(_) => 1.0,
                        ElementwiseKind::Sqrt => 0.5 / y,
                        ElementwiseKind::ClampMin(c) => {
                            if x >= *c {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        _ => unreachable!(),
                    }
                })
                .collect();
            emit(grads, *a, da);
        }
        Op::Reduce { kind, a, axis } => {
            let av = &nodes[*a].value;
            let da = match axis {
                None => {
                    let w = match kind {
                        ReduceKind::Sum => g[0],
                        ReduceKind::Mean => g[0] / av.numel() as f64,
                    };
                    vec![w; av.numel()]
                }
                Some(axis) => {
                    let (outer, dim, inner) = axis_extents(&av.shape, *axis);
                    let norm = match kind {
                        ReduceKind::Sum => 1.0,
                        ReduceKind::Mean => 1.0 / dim as f64,
                    };
                    let mut da = vec![0.0; av.numel()];
                    for o in 0..outer {
                        for d in 0..dim {
                            for i in 0..inner {
                                da[(o * dim + d) * inner + i] = g[o * inner + i] * norm;
                            }
                        }
                    }
                    da
                }
            };
            emit(grads, *a, da);
        }
        Op::Softmax { a, axis } => {
            let (outer, dim, inner) = axis_extents(&out.shape, *axis);
            let y = &out.data;
            let mut da = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |d: usize| (o * dim + d) * inner + i;
                    let dot: f64 = (0..dim).map(|d| g[at(d)] * y[at(d)]).sum();
                    for d in 0..dim {
                        da[at(d)] = y[at(d)] * (g[at(d)] - dot);
                    }
                }
            }
            emit(grads, *a, da);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_extents(&out.shape, *axis);
            let mut offset = 0;
            for &id in inputs {
                let dim = nodes[id].value.shape[*axis];
                if nodes[id].requires_grad {
                    let mut da = Vec::with_capacity(outer * dim * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        da.extend_from_slice(&g[start..start + dim * inner]);
                    }
                    emit(grads, id, da);
                }
                offset += dim;
            }
        }
        Op::Slice { a, axis, lo } => {
            let av = &nodes[*a].value;
            let (outer, dim, inner) = axis_extents(&av.shape, *axis);
            let width = out.shape[*axis];
            let mut da = vec![0.0; av.numel()];
            for o in 0..outer {
                let dst = (o * dim + lo) * inner;
                let src = o * width * inner;
                da[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
            }
            emit(grads, *a, da);
        }
        Op::Transpose { a, ax1, ax2 } => {
            // The transpose is its own inverse.
            let da = permute(g, &out.shape, *ax1, *ax2);
            emit(grads, *a, da);
        }
        Op::Reshape { a } => emit(grads, *a, g.to_vec()),
        Op::Repeat { a, axis } => {
            let (outer, n, inner) = axis_extents(&out.shape, *axis);
            let mut da = vec![0.0; outer * inner];
            for o in 0..outer {
                for r in 0..n {
                    for i in 0..inner {
                        da[o * inner + i] += g[(o * n + r) * inner + i];
                    }
                }
            }
            emit(grads, *a, da);
        }
        Op::Custom { inputs, rule } => {
            let values: Vec<&Tensor> = inputs.iter().map(|&id| &*nodes[id].value).collect();
            let gt = Tensor {
                shape: out.shape.clone(),
                data: g.to_vec(),
            };
            let parts = rule.backward(&values, out, &gt);
            for (&id, part) in inputs.iter().zip(parts) {
                emit(grads, id, part.data);
            }
        }
    }
}

/// Swaps axes `ax1` and `ax2` of row-major `data` with the given `shape`.
fn permute(data: &[f64], shape: &[usize], ax1: usize, ax2: usize) -> Vec<f64> {
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax1, ax2);
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut strides = in_strides.clone();
    strides.swap(ax1, ax2);
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Gradients produced by one backward pass, keyed by leaf node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn by_node(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    /// Gradient of a parameter bound with [`Tape::param`].
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|&id| self.by_node(id))
    }

    /// Moves out all parameter gradients.
    pub fn into_params(mut self) -> HashMap<String, Tensor> {
        self.params
            .into_iter()
            .filter_map(|(name, id)| self.grads[id].take().map(|g| (name, g)))
            .collect()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

// Fallible, so these cannot be the std operator traits.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Autodiff("operands live on different tapes".into()))
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let a = self.value();
        let b = other.value();
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul of {:?} by {:?}: inner dimensions differ",
                a.shape, b.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            rg,
        )
    }

    /// Applies an elementwise op. Binary kinds take `other`.
    pub fn elementwise(self, kind: ElementwiseKind, other: Option<Var<'t>>) -> Result<Var<'t>> {
        if kind.is_binary() {
            let other = other.ok_or_else(|| {
                Error::Shape(format!("{kind:?} needs a second operand"))
            })?;
            return self.binary(kind, other);
        }
        if other.is_some() {
            return Err(Error::Shape(format!("{kind:?} takes one operand")));
        }
        let a = self.value();
        let mut data = Vec::with_capacity(a.numel());
        for (i, &x) in a.data.iter().enumerate() {
            let y = match kind {
                ElementwiseKind::Exp => x.exp(),
                ElementwiseKind::Log => {
                    if x <= 0.0 {
                        return Err(Error::Domain(format!(
                            "log of non-positive value {x} at flat index {i}"
                        )));
                    }
                    x.ln()
                }
                ElementwiseKind::Relu => x.max(0.0),
                ElementwiseKind::Neg => -x,
                ElementwiseKind::Scale(c) => c * x,
                ElementwiseKind::Offset(c) => x + c,
                ElementwiseKind::Sqrt => {
                    if x <= 0.0 {
                        return Err(Error::Domain(format!(
                            "sqrt of non-positive value {x} at flat index {i}"
                        )));
                    }
                    x.sqrt()
                }
                ElementwiseKind::ClampMin(c) => x.max(c),
                _ => unreachable!(),
            };
            data.push(y);
        }
        self.tape.push(
            Tensor {
                shape: a.shape.clone(),
                data,
            },
            Op::Unary { kind, a: self.id },
            self.requires_grad(),
        )
    }

    fn binary(self, kind: ElementwiseKind, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let a = self.value();
        let b = other.value();
        let broadcast = if a.shape == b.shape {
            false
        } else if a.rank() == b.rank()
            && a.rank() > 0
            && b.shape.last() == Some(&1)
            && a.shape[..a.rank() - 1] == b.shape[..b.rank() - 1]
        {
            true
        } else {
            return Err(Error::Shape(format!(
                "{kind:?} of {:?} and {:?}: shapes neither equal nor trailing-1 broadcastable",
                a.shape, b.shape
            )));
        };
        let inner = if broadcast { *a.shape.last().unwrap() } else { 1 };
        let mut data = Vec::with_capacity(a.numel());
        for (i, &x) in a.data.iter().enumerate() {
            let j = if broadcast { i / inner } else { i };
            let y = b.data[j];
            data.push(match kind {
                ElementwiseKind::Add => x + y,
                ElementwiseKind::Sub => x - y,
                ElementwiseKind::Mul => x * y,
                ElementwiseKind::Div => {
                    if y == 0.0 {
                        return Err(Error::Domain(format!(
                            "division by zero at divisor flat index {j}"
                        )));
                    }
                    x / y
                }
                _ => unreachable!(),
            });
        }
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(
            Tensor {
                shape: a.shape.clone(),
                data,
            },
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                broadcast,
            },
            rg,
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(ElementwiseKind::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(ElementwiseKind::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(ElementwiseKind::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(ElementwiseKind::Div, other)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.elementwise(ElementwiseKind::Exp, None)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.elementwise(ElementwiseKind::Log, None)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.elementwise(ElementwiseKind::Relu, None)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.elementwise(ElementwiseKind::Neg, None)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.elementwise(ElementwiseKind::Scale(c), None)
    }

    pub fn offset(self, c: f64) -> Result<Var<'t>> {
        self.elementwise(ElementwiseKind::Offset(c), None)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.elementwise(ElementwiseKind::Sqrt, None)
    }

    pub fn clamp_min(self, c: f64) -> Result<Var<'t>> {
        self.elementwise(ElementwiseKind::ClampMin(c), None)
    }

    /// Sum or mean over one axis (which is removed) or over everything.
    pub fn reduce(self, kind: ReduceKind, axis: Option<usize>) -> Result<Var<'t>> {
        let a = self.value();
        let (shape, data) = match axis {
            None => {
                let s: f64 = a.data.iter().sum();
                let v = match kind {
                    ReduceKind::Sum => s,
                    ReduceKind::Mean => s / a.numel() as f64,
                };
                (Vec::new(), vec![v])
            }
            Some(axis) => {
                if axis >= a.rank() {
                    return Err(Error::Shape(format!(
                        "reduce axis {axis} out of range for shape {:?}",
                        a.shape
                    )));
                }
                let (outer, dim, inner) = axis_extents(&a.shape, axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        for i in 0..inner {
                            out[o * inner + i] += a.data[(o * dim + d) * inner + i];
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    out.iter_mut().for_each(|x| *x /= dim as f64);
                }
                let mut shape = a.shape.clone();
                shape.remove(axis);
                (shape, out)
            }
        };
        self.tape.push(
            Tensor { shape, data },
            Op::Reduce {
                kind,
                a: self.id,
                axis,
            },
            self.requires_grad(),
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Sum, None)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Mean, None)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Sum, Some(axis))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Mean, Some(axis))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for shape {:?}",
                a.shape
            )));
        }
        if let Some(i) = a.data.iter().position(|x| x.is_nan()) {
            return Err(Error::Domain(format!("softmax input is NaN at flat index {i}")));
        }
        let (outer, dim, inner) = axis_extents(&a.shape, axis);
        let mut out = vec![0.0; a.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let max = (0..dim).map(|d| a.data[at(d)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for d in 0..dim {
                    let e = (a.data[at(d)] - max).exp();
                    out[at(d)] = e;
                    z += e;
                }
                for d in 0..dim {
                    out[at(d)] /= z;
                }
            }
        }
        self.tape.push(
            Tensor {
                shape: a.shape.clone(),
                data: out,
            },
            Op::Softmax { a: self.id, axis },
            self.requires_grad(),
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let rank = values[0].rank();
        if axis >= rank {
            return Err(Error::Shape(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            let compatible = v.rank() == rank
                && (0..rank).all(|d| d == axis || v.shape[d] == values[0].shape[d]);
            if !compatible {
                return Err(Error::Shape(format!(
                    "cannot concat {:?} with {:?} along axis {axis}",
                    values[0].shape, v.shape
                )));
            }
        }
        let total: usize = values.iter().map(|v| v.shape[axis]).sum();
        let mut shape = values[0].shape.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let w = v.shape[axis] * inner;
                data.extend_from_slice(&v.data[o * w..(o + 1) * w]);
            }
        }
        let rg = parts.iter().any(Var::requires_grad);
        first.tape.push(
            Tensor { shape, data },
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        )
    }

    /// Half-open range `lo..hi` along `axis`.
    pub fn slice(self, axis: usize, lo: usize, hi: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.rank() || lo >= hi || hi > a.shape[axis] {
            return Err(Error::Shape(format!(
                "slice {lo}..{hi} along axis {axis} out of range for shape {:?}",
                a.shape
            )));
        }
        let (outer, dim, inner) = axis_extents(&a.shape, axis);
        let width = hi - lo;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let start = (o * dim + lo) * inner;
            data.extend_from_slice(&a.data[start..start + width * inner]);
        }
        let mut shape = a.shape.clone();
        shape[axis] = width;
        self.tape.push(
            Tensor { shape, data },
            Op::Slice {
                a: self.id,
                axis,
                lo,
            },
            self.requires_grad(),
        )
    }

    pub fn transpose(self, ax1: usize, ax2: usize) -> Result<Var<'t>> {
        let a = self.value();
        if ax1 >= a.rank() || ax2 >= a.rank() {
            return Err(Error::Shape(format!(
                "transpose axes ({ax1}, {ax2}) out of range for shape {:?}",
                a.shape
            )));
        }
        let data = permute(&a.data, &a.shape, ax1, ax2);
        let mut shape = a.shape.clone();
        shape.swap(ax1, ax2);
        self.tape.push(
            Tensor { shape, data },
            Op::Transpose {
                a: self.id,
                ax1,
                ax2,
            },
            self.requires_grad(),
        )
    }

    /// Matrix transpose.
    pub fn t(self) -> Result<Var<'t>> {
        self.transpose(0, 1)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.value().reshaped(shape)?;
        self.tape
            .push(value, Op::Reshape { a: self.id }, self.requires_grad())
    }

    /// Inserts a new axis at `axis` holding `n` copies of the input.
    pub fn broadcast_repeat(self, axis: usize, n: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis > a.rank() || n == 0 {
            return Err(Error::Shape(format!(
                "cannot repeat {n} times at axis {axis} of shape {:?}",
                a.shape
            )));
        }
        let mut shape = a.shape.clone();
        shape.insert(axis, n);
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let block = &a.data[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(block);
            }
        }
        self.tape.push(
            Tensor { shape, data },
            Op::Repeat { a: self.id, axis },
            self.requires_grad(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape64() -> Tape {
        Tape::new(Precision::Double)
    }

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let tape = tape64();
        let i = tape.constant(Tensor::eye(2)).unwrap();
        let b = tape.constant(mat(&[&[3.0, 4.0], &[5.0, 6.0]])).unwrap();
        assert_eq!(i.matmul(b).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);
        let x = tape.constant(mat(&[&[2.0]])).unwrap();
        let y = tape.constant(mat(&[&[3.0]])).unwrap();
        assert_eq!(x.matmul(y).unwrap().item(), 6.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = tape64();
        let a = tape.constant(Tensor::zeros([2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros([2, 3])).unwrap();
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn elementwise_examples() {
        let tape = tape64();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        let r = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(r.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn domain_errors_report_index() {
        let tape = tape64();
        let a = tape.constant(Tensor::vector(vec![1.0, -2.0])).unwrap();
        let err = a.log().unwrap_err();
        assert!(matches!(err, Error::Domain(ref m) if m.contains("index 1")), "{err}");
        let z = tape.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let err = a.div(z).unwrap_err();
        assert!(matches!(err, Error::Domain(ref m) if m.contains("index 1")), "{err}");
    }

    #[test]
    fn trailing_one_broadcast() {
        let tape = tape64();
        let a = tape.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0]]), true).unwrap();
        let b = tape.leaf(mat(&[&[10.0], &[20.0]]), true).unwrap();
        let y = a.mul(b).unwrap();
        assert_eq!(y.value().data(), &[10.0, 20.0, 60.0, 80.0]);
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[10.0, 10.0, 20.0, 20.0]);
        assert_eq!(g.get(b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn reduce_examples() {
        let tape = tape64();
        let a = tape.constant(Tensor::vector(vec![2.0, 4.0])).unwrap();
        assert_eq!(a.mean().unwrap().item(), 3.0);
        let m = tape.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        assert_eq!(m.sum_axis(0).unwrap().value().data(), &[4.0, 6.0]);
        assert!(m.sum_axis(2).is_err());
    }

    #[test]
    fn softmax_examples() {
        let tape = tape64();
        let a = tape.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(a.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        let big = tape.constant(Tensor::vector(vec![1000.0, 1000.0])).unwrap();
        assert_eq!(big.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        let nan = tape.constant(Tensor::vector(vec![f64::NAN, 0.0]));
        assert!(nan.is_err(), "non-finite leaves are rejected at registration");
    }

    #[test]
    fn structural_examples() {
        let tape = tape64();
        let a = tape.constant(mat(&[&[1.0]])).unwrap();
        let b = tape.constant(mat(&[&[2.0]])).unwrap();
        let c = Var::concat(&[a, b], 0).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.value().data(), &[1.0, 2.0]);
        let v = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let r = v.broadcast_repeat(0, 3).unwrap();
        assert_eq!(r.shape(), vec![3, 2]);
        assert_eq!(r.value().data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(v.slice(0, 1, 3).is_err());
        let x = tape.constant(Tensor::zeros([2, 3])).unwrap();
        let y = tape.constant(Tensor::zeros([3, 3])).unwrap();
        assert!(Var::concat(&[x, y], 1).is_err());
    }

    #[test]
    fn backward_examples() {
        let tape = tape64();
        let x = tape.leaf(Tensor::zeros([2, 3]), true).unwrap();
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);

        let tape = tape64();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true).unwrap();
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let tape = tape64();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        assert!(tape.backward(x).is_err());
        let tape = tape64();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let s = x.sum().unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Autodiff(_))));
    }

    #[test]
    fn non_grad_leaf_gets_no_gradient() {
        let tape = tape64();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let g = tape.backward(x.mul(c).unwrap().sum().unwrap()).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn params_are_memoized_by_name() {
        let tape = tape64();
        let w = Tensor::vector(vec![1.0, 2.0]);
        let a = tape.param("w", &w, true).unwrap();
        let b = tape.param("w", &w, true).unwrap();
        assert_eq!(a.id(), b.id());
        let g = tape.backward(a.add(b).unwrap().sum().unwrap()).unwrap();
        assert_eq!(g.param("w").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn permute_swaps_axes_of_rank3() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let out = permute(&data, &[2, 3, 4], 0, 2);
        // out shape [4, 3, 2]; out[i][j][k] = in[k][j][i]
        for i in 0..4 {
            for j in 0..3 {
                for k in 0..2 {
                    assert_eq!(out[(i * 3 + j) * 2 + k], data[(k * 3 + j) * 4 + i]);
                }
            }
        }
    }
}
