use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels::{self, Broadcast, MatRef};
use super::tensor::numel;
use super::{Scalar, Tensor};

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    name: String,
    value: Arc<Tensor<T>>,
    grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            name: name.into(),
            value: Arc::new(value),
            grad,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    /// Mutable access to the value. Copies only if a graph still holds it.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor<T> {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn cast<U: Scalar>(&self) -> Parameter<U> {
        Parameter::new(self.name.clone(), self.value.cast())
    }

    pub(crate) fn rename(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }
}

/// A value flowing through a [`Graph`]; carries a tape slot when it
/// participates in differentiation.
#[derive(Clone, Debug)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    id: Option<usize>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

enum Node<T> {
    Param(String),
    Input,
    Op(Op<T>),
}

enum Op<T> {
    MatMul { a: Var<T>, b: Var<T> },
    Add { a: Var<T>, b: Var<T> },
    Mul { a: Var<T>, b: Var<T> },
    Scale { x: Var<T>, factor: T },
    AddScalar { x: Var<T> },
    Log { x: Var<T> },
    Softmax { x: Var<T>, y: Arc<Tensor<T>> },
    Gelu { x: Var<T> },
    LayerNorm {
        x: Var<T>,
        gamma: Var<T>,
        beta: Var<T>,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: Var<T>,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Permute { x: Var<T>, axes: Vec<usize> },
    Reshape { x: Var<T> },
    IndexAxis { x: Var<T>, axis: usize, index: usize },
    GatherRows { x: Var<T>, rows: Vec<usize> },
    ScatterRows { x: Var<T>, rows: Vec<usize> },
    MeanAxis0 { x: Var<T> },
    Sum { x: Var<T> },
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    params: HashMap<String, Tensor<T>>,
    inputs: HashMap<usize, Tensor<T>>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a parameter bound with [`Graph::param`], if reachable.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Gradient for a leaf created with [`Graph::input`], if reachable.
    pub fn wrt(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.inputs.get(&id))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    /// Iteration order is unspecified; sort by name where order matters.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Tape slots in the order the backward sweep processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

/// Records differentiable operations for a reverse sweep.
///
/// A graph built with [`Graph::inference`] evaluates the same operations
/// without recording anything, so intermediate values are freed as soon
/// as they go out of scope.
pub struct Graph<T> {
    recording: bool,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            recording: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn inference() -> Self {
        Self {
            recording: false,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded tape slots.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn emit(&self, value: Tensor<T>, track: bool, op: impl FnOnce() -> Op<T>) -> Var<T> {
        let id = (self.recording && track).then(|| self.push(Node::Op(op())));
        Var {
            value: Arc::new(value),
            id,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            value: Arc::new(value),
            id: None,
        }
    }

    /// A differentiable leaf that is not a model parameter.
    pub fn input(&self, value: Tensor<T>) -> Var<T> {
        let id = self.recording.then(|| self.push(Node::Input));
        Var {
            value: Arc::new(value),
            id,
        }
    }

    /// Binds a parameter; its gradient is reported under its name.
    pub fn param(&self, p: &Parameter<T>) -> Var<T> {
        let id = self.recording.then(|| self.push(Node::Param(p.name.clone())));
        Var {
            value: Arc::clone(&p.value),
            id,
        }
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a plain matrix shared by every leading index of `a`, or
    /// has exactly the same leading axes as `a`.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![T::zero(); numel(&out_shape)];
        if sb.len() == 2 {
            let m = a.value.len() / k.max(1);
            kernels::gemm(
                m,
                k,
                n,
                MatRef::n(a.value.data()),
                MatRef::n(b.value.data()),
                T::zero(),
                &mut out,
            );
        } else if sa.len() == sb.len() && sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            let m = sa[sa.len() - 2];
            let batches = numel(&sa[..sa.len() - 2]);
            for j in 0..batches {
                kernels::gemm(
                    m,
                    k,
                    n,
                    MatRef::n(&a.value.data()[j * m * k..(j + 1) * m * k]),
                    MatRef::n(&b.value.data()[j * k * n..(j + 1) * k * n]),
                    T::zero(),
                    &mut out[j * m * n..(j + 1) * m * n],
                );
            }
        } else {
            return Err(Error::shape("matmul", sa, sb));
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.emit(value, a.tracked() || b.tracked(), || Op::MatMul {
            a: a.clone(),
            b: b.clone(),
        }))
    }

    /// `a + b` with `b` broadcast against `a`.
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if !kernels::broadcasts_to(a.shape(), b.shape()) {
            return Err(Error::shape("add", a.shape(), b.shape()));
        }
        let bc = kernels::classify_broadcast(a.shape(), b.shape());
        let bd = b.value.data();
        let data = a
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[bc.index(i)])
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.emit(value, a.tracked() || b.tracked(), || Op::Add {
            a: a.clone(),
            b: b.clone(),
        }))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let neg = self.scale(b, -T::one());
        self.add(a, &neg)
    }

    /// `a ⊙ b` with `b` broadcast against `a`.
    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if !kernels::broadcasts_to(a.shape(), b.shape()) {
            return Err(Error::shape("mul", a.shape(), b.shape()));
        }
        let bc = kernels::classify_broadcast(a.shape(), b.shape());
        let bd = b.value.data();
        let data = a
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[bc.index(i)])
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.emit(value, a.tracked() || b.tracked(), || Op::Mul {
            a: a.clone(),
            b: b.clone(),
        }))
    }

    pub fn scale(&self, x: &Var<T>, factor: T) -> Var<T> {
        let value = x.value.map(|v| v * factor);
        self.emit(value, x.tracked(), || Op::Scale {
            x: x.clone(),
            factor,
        })
    }

    pub fn add_scalar(&self, x: &Var<T>, c: T) -> Var<T> {
        let value = x.value.map(|v| v + c);
        self.emit(value, x.tracked(), || Op::AddScalar { x: x.clone() })
    }

    /// Natural logarithm; non-positive entries are a domain error.
    pub fn log(&self, x: &Var<T>) -> Result<Var<T>> {
        if let Some(v) = x.value.data().iter().find(|v| !(**v > T::zero())) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        let value = x.value.map(|v| v.ln());
        Ok(self.emit(value, x.tracked(), || Op::Log { x: x.clone() }))
    }

    pub fn softmax_lastdim(&self, x: &Var<T>) -> Result<Var<T>> {
        let width = x.value.last_dim();
        if width == 0 {
            return Err(Error::shape("softmax_lastdim", x.shape(), &[1]));
        }
        let mut out = vec![T::zero(); x.value.len()];
        kernels::softmax_rows(x.value.data(), width, &mut out);
        let y = Arc::new(Tensor::new(x.shape().to_vec(), out)?);
        let id = (self.recording && x.tracked()).then(|| {
            self.push(Node::Op(Op::Softmax {
                x: x.clone(),
                y: Arc::clone(&y),
            }))
        });
        Ok(Var { value: y, id })
    }

    pub fn gelu(&self, x: &Var<T>) -> Var<T> {
        let value = x.value.map(kernels::gelu);
        self.emit(value, x.tracked(), || Op::Gelu { x: x.clone() })
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
        let width = x.value.last_dim();
        if gamma.shape() != [width] || beta.shape() != [width] {
            return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
        }
        if eps < T::zero() {
            return Err(Error::Domain(format!("layer_norm eps {eps} < 0")));
        }
        let track = self.recording && (x.tracked() || gamma.tracked() || beta.tracked());
        let mut out = vec![T::zero(); x.value.len()];
        let stats = kernels::layer_norm_rows(
            x.value.data(),
            gamma.value.data(),
            beta.value.data(),
            eps,
            &mut out,
            track,
        );
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.emit(value, track, || {
            let st = stats.expect("stats kept when tracking");
            Op::LayerNorm {
                x: x.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                x_hat: st.x_hat,
                inv_std: st.inv_std,
            }
        }))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&self, logits: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
        let [batch, classes] = logits.shape()[..] else {
            return Err(Error::shape("cross_entropy", logits.shape(), &[labels.len()]));
        };
        if batch != labels.len() || batch == 0 {
            return Err(Error::shape("cross_entropy", logits.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                bound: classes,
            });
        }
        let data = logits.value.data();
        let mut probs = vec![T::zero(); data.len()];
        kernels::softmax_rows(data, classes, &mut probs);
        let mut total = T::zero();
        for (row, &label) in data.chunks_exact(classes).zip(labels) {
            total = total + kernels::logsumexp(row) - row[label];
        }
        let loss = total / T::from_usize(batch).expect("batch");
        Ok(self.emit(Tensor::scalar(loss), logits.tracked(), || Op::CrossEntropy {
            logits: logits.clone(),
            labels: labels.to_vec(),
            probs,
        }))
    }

    pub fn permute(&self, x: &Var<T>, axes: &[usize]) -> Result<Var<T>> {
        let shape = x.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let mut out = vec![T::zero(); x.value.len()];
        kernels::permute_into(x.value.data(), shape, axes, &mut out);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.emit(value, x.tracked(), || Op::Permute {
            x: x.clone(),
            axes: axes.to_vec(),
        }))
    }

    pub fn transpose_last2(&self, x: &Var<T>) -> Result<Var<T>> {
        let r = x.shape().len();
        if r < 2 {
            return Err(Error::shape("transpose", x.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let value = (*x.value).clone().reshape(shape.to_vec())?;
        Ok(self.emit(value, x.tracked(), || Op::Reshape { x: x.clone() }))
    }

    /// Picks `index` along `axis`, dropping that axis.
    pub fn index_axis(&self, x: &Var<T>, axis: usize, index: usize) -> Result<Var<T>> {
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::shape("index_axis", shape, &[axis]));
        }
        if index >= shape[axis] {
            return Err(Error::Index {
                what: "index_axis",
                index,
                bound: shape[axis],
            });
        }
        let outer = numel(&shape[..axis]);
        let dim = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let src = x.value.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * dim + index) * inner;
            out.extend_from_slice(&src[start..start + inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.emit(value, x.tracked(), || Op::IndexAxis {
            x: x.clone(),
            axis,
            index,
        }))
    }

    /// Selects rows along axis 0 (repeats allowed).
    pub fn gather_rows(&self, x: &Var<T>, rows: &[usize]) -> Result<Var<T>> {
        let shape = x.shape();
        let Some(&n) = shape.first() else {
            return Err(Error::shape("gather_rows", shape, rows));
        };
        let stride = numel(&shape[1..]);
        let src = x.value.data();
        let mut out = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "gather row",
                    index: r,
                    bound: n,
                });
            }
            out.extend_from_slice(&src[r * stride..(r + 1) * stride]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = rows.len();
        let value = Tensor::new(out_shape, out)?;
        Ok(self.emit(value, x.tracked(), || Op::GatherRows {
            x: x.clone(),
            rows: rows.to_vec(),
        }))
    }

    /// Places row `i` of `x` at row `rows[i]` of a zero tensor with
    /// `total` rows; repeated targets accumulate.
    pub fn scatter_rows(&self, x: &Var<T>, rows: &[usize], total: usize) -> Result<Var<T>> {
        let shape = x.shape();
        if shape.first() != Some(&rows.len()) {
            return Err(Error::shape("scatter_rows", shape, &[rows.len()]));
        }
        let stride = numel(&shape[1..]);
        let mut out_shape = shape.to_vec();
        out_shape[0] = total;
        let mut out = vec![T::zero(); total * stride];
        let src = x.value.data();
        for (i, &r) in rows.iter().enumerate() {
            if r >= total {
                return Err(Error::Index {
                    what: "scatter row",
                    index: r,
                    bound: total,
                });
            }
            for (d, &s) in out[r * stride..(r + 1) * stride]
                .iter_mut()
                .zip(&src[i * stride..(i + 1) * stride])
            {
                *d = *d + s;
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.emit(value, x.tracked(), || Op::ScatterRows {
            x: x.clone(),
            rows: rows.to_vec(),
        }))
    }

    pub fn mean_axis0(&self, x: &Var<T>) -> Result<Var<T>> {
        let shape = x.shape();
        let Some(&n) = shape.first().filter(|&&n| n > 0) else {
            return Err(Error::shape("mean_axis0", shape, &[]));
        };
        let stride = numel(&shape[1..]);
        let mut out = vec![T::zero(); stride];
        for row in x.value.data().chunks_exact(stride) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let inv = T::one() / T::from_usize(n).expect("rows");
        out.iter_mut().for_each(|o| *o = *o * inv);
        let value = Tensor::new(shape[1..].to_vec(), out)?;
        Ok(self.emit(value, x.tracked(), || Op::MeanAxis0 { x: x.clone() }))
    }

    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let value = Tensor::scalar(x.value.sum());
        self.emit(value, x.tracked(), || Op::Sum { x: x.clone() })
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::Usage("backward on a graph that is not recording".into()));
        }
        let Some(root) = loss.id else {
            return Err(Error::Usage("backward from a value that was not recorded".into()));
        };
        if loss.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Tensor::full(loss.shape().to_vec(), T::one()));
        let mut out = Gradients {
            params: HashMap::new(),
            inputs: HashMap::new(),
            visited: Vec::new(),
        };
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            out.visited.push(id);
            match &nodes[id] {
                Node::Param(name) => accumulate_named(&mut out.params, name, g)?,
                Node::Input => {
                    out.inputs.insert(id, g);
                }
                Node::Op(op) => {
                    for (target, delta) in op_backward(op, &g)? {
                        let slot = &mut grads[target];
                        match slot {
                            Some(existing) => existing.add_assign(&delta)?,
                            None => *slot = Some(delta),
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate_named<T: Scalar>(
    map: &mut HashMap<String, Tensor<T>>,
    name: &str,
    g: Tensor<T>,
) -> Result<()> {
    match map.get_mut(name) {
        Some(existing) => existing.add_assign(&g),
        None => {
            map.insert(name.to_string(), g);
            Ok(())
        }
    }
}

/// Input-slot contributions of one op given the gradient of its output.
fn op_backward<T: Scalar>(op: &Op<T>, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
    let mut out = Vec::with_capacity(2);
    let gd = g.data();
    match op {
        Op::MatMul { a, b } => {
            let (sa, sb) = (a.shape(), b.shape());
            let k = sa[sa.len() - 1];
            let n = sb[sb.len() - 1];
            if sb.len() == 2 {
                let m = a.value.len() / k.max(1);
                if let Some(id) = a.id {
                    let mut da = vec![T::zero(); a.value.len()];
                    kernels::gemm(m, n, k, MatRef::n(gd), MatRef::t(b.value.data()), T::zero(), &mut da);
                    out.push((id, Tensor::new(sa.to_vec(), da)?));
                }
                if let Some(id) = b.id {
                    let mut db = vec![T::zero(); b.value.len()];
                    kernels::gemm(k, m, n, MatRef::t(a.value.data()), MatRef::n(gd), T::zero(), &mut db);
                    out.push((id, Tensor::new(sb.to_vec(), db)?));
                }
            } else {
                let m = sa[sa.len() - 2];
                let batches = numel(&sa[..sa.len() - 2]);
                let (ad, bd) = (a.value.data(), b.value.data());
                if let Some(id) = a.id {
                    let mut da = vec![T::zero(); ad.len()];
                    for j in 0..batches {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            MatRef::n(&gd[j * m * n..(j + 1) * m * n]),
                            MatRef::t(&bd[j * k * n..(j + 1) * k * n]),
                            T::zero(),
                            &mut da[j * m * k..(j + 1) * m * k],
                        );
                    }
                    out.push((id, Tensor::new(sa.to_vec(), da)?));
                }
                if let Some(id) = b.id {
                    let mut db = vec![T::zero(); bd.len()];
                    for j in 0..batches {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            MatRef::t(&ad[j * m * k..(j + 1) * m * k]),
                            MatRef::n(&gd[j * m * n..(j + 1) * m * n]),
                            T::zero(),
                            &mut db[j * k * n..(j + 1) * k * n],
                        );
                    }
                    out.push((id, Tensor::new(sb.to_vec(), db)?));
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(id) = a.id {
                out.push((id, g.clone()));
            }
            if let Some(id) = b.id {
                out.push((id, reduce_broadcast(g, a.shape(), b.shape(), None)?));
            }
        }
        Op::Mul { a, b } => {
            let bc = kernels::classify_broadcast(a.shape(), b.shape());
            if let Some(id) = a.id {
                let bd = b.value.data();
                let da = gd.iter().enumerate().map(|(i, &gv)| gv * bd[bc.index(i)]).collect();
                out.push((id, Tensor::new(a.shape().to_vec(), da)?));
            }
            if let Some(id) = b.id {
                out.push((id, reduce_broadcast(g, a.shape(), b.shape(), Some(a.value.data()))?));
            }
        }
        Op::Scale { x, factor } => {
            if let Some(id) = x.id {
                out.push((id, g.map(|v| v * *factor)));
            }
        }
        Op::AddScalar { x } => {
            if let Some(id) = x.id {
                out.push((id, g.clone()));
            }
        }
        Op::Log { x } => {
            if let Some(id) = x.id {
                let dx = gd.iter().zip(x.value.data()).map(|(&gv, &xv)| gv / xv).collect();
                out.push((id, Tensor::new(x.shape().to_vec(), dx)?));
            }
        }
        Op::Softmax { x, y } => {
            if let Some(id) = x.id {
                let mut dx = vec![T::zero(); gd.len()];
                kernels::softmax_rows_backward(y.data(), gd, y.last_dim(), &mut dx);
                out.push((id, Tensor::new(x.shape().to_vec(), dx)?));
            }
        }
        Op::Gelu { x } => {
            if let Some(id) = x.id {
                let dx = gd
                    .iter()
                    .zip(x.value.data())
                    .map(|(&gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                out.push((id, Tensor::new(x.shape().to_vec(), dx)?));
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            x_hat,
            inv_std,
        } => {
            let width = gamma.value.len();
            let n = T::from_usize(width).expect("width");
            if let Some(id) = x.id {
                let gam = gamma.value.data();
                let mut dx = vec![T::zero(); gd.len()];
                let mut dxh = vec![T::zero(); width];
                for (r, (grow, xh)) in gd.chunks_exact(width).zip(x_hat.chunks_exact(width)).enumerate() {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for i in 0..width {
                        dxh[i] = grow[i] * gam[i];
                        mean_d = mean_d + dxh[i];
                        mean_dx = mean_dx + dxh[i] * xh[i];
                    }
                    mean_d = mean_d / n;
                    mean_dx = mean_dx / n;
                    let row = &mut dx[r * width..(r + 1) * width];
                    for i in 0..width {
                        row[i] = inv_std[r] * (dxh[i] - mean_d - xh[i] * mean_dx);
                    }
                }
                out.push((id, Tensor::new(x.shape().to_vec(), dx)?));
            }
            if let Some(id) = gamma.id {
                let mut dg = vec![T::zero(); width];
                for (grow, xh) in gd.chunks_exact(width).zip(x_hat.chunks_exact(width)) {
                    for i in 0..width {
                        dg[i] = dg[i] + grow[i] * xh[i];
                    }
                }
                out.push((id, Tensor::new([width], dg)?));
            }
            if let Some(id) = beta.id {
                let mut db = vec![T::zero(); width];
                for grow in gd.chunks_exact(width) {
                    for i in 0..width {
                        db[i] = db[i] + grow[i];
                    }
                }
                out.push((id, Tensor::new([width], db)?));
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            if let Some(id) = logits.id {
                let classes = logits.value.last_dim();
                let scale = gd[0] / T::from_usize(labels.len()).expect("batch");
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * classes + l] = dl[r * classes + l] - scale;
                }
                out.push((id, Tensor::new(logits.shape().to_vec(), dl)?));
            }
        }
        Op::Permute { x, axes } => {
            if let Some(id) = x.id {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let mut dx = vec![T::zero(); gd.len()];
                kernels::permute_into(gd, g.shape(), &inverse, &mut dx);
                out.push((id, Tensor::new(x.shape().to_vec(), dx)?));
            }
        }
        Op::Reshape { x } => {
            if let Some(id) = x.id {
                out.push((id, g.clone().reshape(x.shape().to_vec())?));
            }
        }
        Op::IndexAxis { x, axis, index } => {
            if let Some(id) = x.id {
                let shape = x.shape();
                let outer = numel(&shape[..*axis]);
                let dim = shape[*axis];
                let inner = numel(&shape[axis + 1..]);
                let mut dx = vec![T::zero(); x.value.len()];
                for o in 0..outer {
                    let start = (o * dim + index) * inner;
                    dx[start..start + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
                out.push((id, Tensor::new(shape.to_vec(), dx)?));
            }
        }
        Op::GatherRows { x, rows } => {
            if let Some(id) = x.id {
                let stride = numel(&x.shape()[1..]);
                let mut dx = vec![T::zero(); x.value.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for (d, &s) in dx[r * stride..(r + 1) * stride]
                        .iter_mut()
                        .zip(&gd[i * stride..(i + 1) * stride])
                    {
                        *d = *d + s;
                    }
                }
                out.push((id, Tensor::new(x.shape().to_vec(), dx)?));
            }
        }
        Op::ScatterRows { x, rows } => {
            if let Some(id) = x.id {
                let stride = numel(&x.shape()[1..]);
                let mut dx = Vec::with_capacity(x.value.len());
                for &r in rows {
                    dx.extend_from_slice(&gd[r * stride..(r + 1) * stride]);
                }
                out.push((id, Tensor::new(x.shape().to_vec(), dx)?));
            }
        }
        Op::MeanAxis0 { x } => {
            if let Some(id) = x.id {
                let n = x.shape()[0];
                let inv = T::one() / T::from_usize(n).expect("rows");
                let mut dx = Vec::with_capacity(x.value.len());
                for _ in 0..n {
                    dx.extend(gd.iter().map(|&v| v * inv));
                }
                out.push((id, Tensor::new(x.shape().to_vec(), dx)?));
            }
        }
        Op::Sum { x } => {
            if let Some(id) = x.id {
                out.push((id, Tensor::full(x.shape().to_vec(), gd[0])));
            }
        }
    }
    Ok(out)
}

/// Sums `g` (shape `big`) down to shape `small`, optionally weighting each
/// element by `weights` (for the broadcast operand of a product).
fn reduce_broadcast<T: Scalar>(
    g: &Tensor<T>,
    big: &[usize],
    small: &[usize],
    weights: Option<&[T]>,
) -> Result<Tensor<T>> {
    let mut acc = vec![T::zero(); numel(small)];
    let bc = kernels::classify_broadcast(big, small);
    let gd = g.data();
    match (&bc, weights) {
        (Broadcast::Same, None) => acc.copy_from_slice(gd),
        _ => {
            for (i, &gv) in gd.iter().enumerate() {
                let w = weights.map_or(T::one(), |w| w[i]);
                let j = bc.index(i);
                acc[j] = acc[j] + gv * w;
            }
        }
    }
    Tensor::new(small.to_vec(), acc)
}
