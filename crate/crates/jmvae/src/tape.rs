//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records every forward operation together with the node ids of
//! its inputs and the resulting activation. Losses are scalars over many
//! parameters, so gradients are obtained by a single reverse sweep over the
//! recorded nodes. A tape and its [`Var`]s belong to one logical thread for
//! the duration of a forward/backward pass; detached [`Tensor`]s are freely
//! shareable.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    /// Identical shapes.
    None,
    /// Left is `[m, n]`, right is `[n]`: right is applied to every row.
    RhsRow,
    /// Right holds a single element applied everywhere.
    RhsScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Exp,
    Ln,
    Sigmoid,
    Softplus,
    Neg,
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Constant,
    MatMul { a: usize, b: usize },
    Bin { kind: BinKind, bcast: Bcast, a: usize, b: usize },
    Unary { kind: UnaryKind, a: usize },
    LeakyRelu { a: usize, slope: T },
    AddScalar { a: usize },
    MulScalar { a: usize, c: T },
    SumRows { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    LogSumExpRows { a: usize },
    SoftmaxRows { a: usize },
    ConcatCols { a: usize, b: usize, a_cols: usize, b_cols: usize },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Bin { kind: BinKind::Add, .. } => "add",
            Op::Bin { kind: BinKind::Sub, .. } => "sub",
            Op::Bin { kind: BinKind::Mul, .. } => "mul",
            Op::Unary { kind: UnaryKind::Exp, .. } => "exp",
            Op::Unary { kind: UnaryKind::Ln, .. } => "ln",
            Op::Unary { kind: UnaryKind::Sigmoid, .. } => "sigmoid",
            Op::Unary { kind: UnaryKind::Softplus, .. } => "softplus",
            Op::Unary { kind: UnaryKind::Neg, .. } => "neg",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::AddScalar { .. } => "add_scalar",
            Op::MulScalar { .. } => "mul_scalar",
            Op::SumRows { .. } => "sum_rows",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::LogSumExpRows { .. } => "logsumexp",
            Op::SoftmaxRows { .. } => "softmax",
            Op::ConcatCols { .. } => "concat_cols",
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    needs_grad: bool,
}

struct Inner<T: Scalar> {
    nodes: Vec<Node<T>>,
    // Buffer identity -> node id, so a parameter attaches exactly once per tape.
    leaves: HashMap<usize, usize>,
}

/// Recording tape for one forward/backward pass.
pub struct Tape<T: Scalar> {
    inner: RefCell<Inner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradient of every reachable node after a reverse sweep. Unreached nodes
/// report zeros of the node's shape.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn by_id(&self, id: usize) -> Tensor<T> {
        let shape = &self.shapes[id];
        match &self.grads[id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape consistent"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get(&self, var: Var<'_, T>) -> Tensor<T> {
        self.by_id(var.id)
    }
}

// Interpret rank-1 [n] as a single row, rank-2 as [m, n].
fn as_rows(shape: &[usize]) -> Option<(usize, usize)> {
    match shape.len() {
        1 => Some((1, shape[0])),
        2 => Some((shape[0], shape[1])),
        _ => None,
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn stable_softplus<T: Scalar>(x: T) -> T {
    x.maximum(T::ZERO) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                leaves: HashMap::new(),
            }),
        }
    }

    fn push(&self, op: Op<T>, shape: Vec<usize>, data: Vec<T>, needs_grad: bool) -> usize {
        self.push_arc(op, shape, Arc::new(data), needs_grad)
    }

    fn push_arc(&self, op: Op<T>, shape: Vec<usize>, data: Arc<Vec<T>>, needs_grad: bool) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            op,
            shape,
            data,
            needs_grad,
        });
        inner.nodes.len() - 1
    }

    /// Attach a trainable tensor. The node shares the tensor's buffer (which
    /// also keeps the address-keyed cache sound), and repeated calls with the
    /// same buffer return the same node, so gradients accumulate in one place.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        let key = t.buffer_id();
        if let Some(&id) = self.inner.borrow().leaves.get(&key) {
            return Var { tape: self, id };
        }
        let id = self.push_arc(Op::Leaf, t.shape().to_vec(), t.buffer(), true);
        self.inner.borrow_mut().leaves.insert(key, id);
        Var { tape: self, id }
    }

    /// Attach a non-trainable input (data batch, noise draw).
    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        let id = self.push_arc(Op::Constant, t.shape().to_vec(), t.buffer(), false);
        Var { tape: self, id }
    }

    /// Node id a tensor was attached under, if `leaf` was called for it.
    pub fn leaf_id(&self, t: &Tensor<T>) -> Option<usize> {
        self.inner.borrow().leaves.get(&t.buffer_id()).copied()
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// First node holding a NaN/Inf value, as (node id, op name), if any.
    /// Used for loss-divergence diagnostics.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        let inner = self.inner.borrow();
        for (id, node) in inner.nodes.iter().enumerate() {
            if !node.data.iter().all(|v| v.is_finite()) {
                return Some((id, node.op.name()));
            }
        }
        None
    }

    /// Reverse sweep from a scalar loss. Returns the gradient of every node
    /// that participates in the loss; other nodes report zeros.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let loss_node = &nodes[loss.id];
        if loss_node.data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.shape.clone(),
            });
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![T::ONE]);

        for id in (0..=loss.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }

            // Accumulate into a parent's gradient buffer.
            macro_rules! acc {
                ($pid:expr, $f:expr) => {{
                    let pid = $pid;
                    if nodes[pid].needs_grad {
                        let buf = grads[pid]
                            .get_or_insert_with(|| vec![T::ZERO; nodes[pid].data.len()]);
                        #[allow(clippy::redundant_closure_call)]
                        ($f)(buf.as_mut_slice());
                    }
                }};
            }

            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let n = nodes[*b].shape[1];
                    let av = &nodes[*a].data;
                    let bv = &nodes[*b].data;
                    acc!(*a, |ga: &mut [T]| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = T::ZERO;
                                for j in 0..n {
                                    s = s + g[i * n + j] * bv[p * n + j];
                                }
                                ga[i * k + p] = ga[i * k + p] + s;
                            }
                        }
                    });
                    acc!(*b, |gb: &mut [T]| {
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = T::ZERO;
                                for i in 0..m {
                                    s = s + av[i * k + p] * g[i * n + j];
                                }
                                gb[p * n + j] = gb[p * n + j] + s;
                            }
                        }
                    });
                }
                Op::Bin { kind, bcast, a, b } => {
                    let (kind, bcast) = (*kind, *bcast);
                    let av = &nodes[*a].data;
                    let bv = &nodes[*b].data;
                    let cols = match bcast {
                        Bcast::RhsRow => nodes[*b].data.len(),
                        _ => 0,
                    };
                    acc!(*a, |ga: &mut [T]| {
                        for (i, gi) in g.iter().enumerate() {
                            let d = match (kind, bcast) {
                                (BinKind::Add, _) | (BinKind::Sub, _) => *gi,
                                (BinKind::Mul, Bcast::None) => *gi * bv[i],
                                (BinKind::Mul, Bcast::RhsRow) => *gi * bv[i % cols],
                                (BinKind::Mul, Bcast::RhsScalar) => *gi * bv[0],
                            };
                            ga[i] = ga[i] + d;
                        }
                    });
                    acc!(*b, |gb: &mut [T]| {
                        for (i, gi) in g.iter().enumerate() {
                            let j = match bcast {
                                Bcast::None => i,
                                Bcast::RhsRow => i % cols,
                                Bcast::RhsScalar => 0,
                            };
                            let d = match kind {
                                BinKind::Add => *gi,
                                BinKind::Sub => -*gi,
                                BinKind::Mul => *gi * av[i],
                            };
                            gb[j] = gb[j] + d;
                        }
                    });
                }
                Op::Unary { kind, a } => {
                    let xv = &nodes[*a].data;
                    let yv = &node.data;
                    let kind = *kind;
                    acc!(*a, |ga: &mut [T]| {
                        for (i, gi) in g.iter().enumerate() {
                            let d = match kind {
                                UnaryKind::Exp => *gi * yv[i],
                                UnaryKind::Ln => *gi / xv[i],
                                UnaryKind::Sigmoid => *gi * yv[i] * (T::ONE - yv[i]),
                                UnaryKind::Softplus => *gi * stable_sigmoid(xv[i]),
                                UnaryKind::Neg => -*gi,
                            };
                            ga[i] = ga[i] + d;
                        }
                    });
                }
                Op::LeakyRelu { a, slope } => {
                    let xv = &nodes[*a].data;
                    let slope = *slope;
                    acc!(*a, |ga: &mut [T]| {
                        for (i, gi) in g.iter().enumerate() {
                            let d = if xv[i] > T::ZERO { *gi } else { *gi * slope };
                            ga[i] = ga[i] + d;
                        }
                    });
                }
                Op::AddScalar { a } => {
                    acc!(*a, |ga: &mut [T]| {
                        for (i, gi) in g.iter().enumerate() {
                            ga[i] = ga[i] + *gi;
                        }
                    });
                }
                Op::MulScalar { a, c } => {
                    let c = *c;
                    acc!(*a, |ga: &mut [T]| {
                        for (i, gi) in g.iter().enumerate() {
                            ga[i] = ga[i] + *gi * c;
                        }
                    });
                }
                Op::SumRows { a } => {
                    let (m, n) = as_rows(&nodes[*a].shape).expect("recorded with valid shape");
                    acc!(*a, |ga: &mut [T]| {
                        for i in 0..m {
                            for j in 0..n {
                                ga[i * n + j] = ga[i * n + j] + g[i];
                            }
                        }
                    });
                }
                Op::SumAll { a } => {
                    acc!(*a, |ga: &mut [T]| {
                        for v in ga.iter_mut() {
                            *v = *v + g[0];
                        }
                    });
                }
                Op::MeanAll { a } => {
                    let scale = T::ONE / T::from_f64(nodes[*a].data.len() as f64);
                    acc!(*a, |ga: &mut [T]| {
                        for v in ga.iter_mut() {
                            *v = *v + g[0] * scale;
                        }
                    });
                }
                Op::LogSumExpRows { a } => {
                    let (m, n) = as_rows(&nodes[*a].shape).expect("recorded with valid shape");
                    let xv = &nodes[*a].data;
                    let yv = &node.data;
                    acc!(*a, |ga: &mut [T]| {
                        for i in 0..m {
                            for j in 0..n {
                                let w = (xv[i * n + j] - yv[i]).exp();
                                ga[i * n + j] = ga[i * n + j] + g[i] * w;
                            }
                        }
                    });
                }
                Op::SoftmaxRows { a } => {
                    let (m, n) = as_rows(&nodes[*a].shape).expect("recorded with valid shape");
                    let yv = &node.data;
                    acc!(*a, |ga: &mut [T]| {
                        for i in 0..m {
                            let mut dot = T::ZERO;
                            for j in 0..n {
                                dot = dot + g[i * n + j] * yv[i * n + j];
                            }
                            for j in 0..n {
                                let d = yv[i * n + j] * (g[i * n + j] - dot);
                                ga[i * n + j] = ga[i * n + j] + d;
                            }
                        }
                    });
                }
                Op::ConcatCols { a, b, a_cols, b_cols } => {
                    let (a_cols, b_cols) = (*a_cols, *b_cols);
                    let total = a_cols + b_cols;
                    let m = node.data.len() / total;
                    acc!(*a, |ga: &mut [T]| {
                        for i in 0..m {
                            for j in 0..a_cols {
                                ga[i * a_cols + j] = ga[i * a_cols + j] + g[i * total + j];
                            }
                        }
                    });
                    acc!(*b, |gb: &mut [T]| {
                        for i in 0..m {
                            for j in 0..b_cols {
                                gb[i * b_cols + j] = gb[i * b_cols + j] + g[i * total + a_cols + j];
                            }
                        }
                    });
                }
            }
            grads[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    /// Detached copy of the node's value.
    pub fn value(&self) -> Tensor<T> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        Tensor::new(&node.shape, node.data.to_vec()).expect("node shape consistent")
    }

    fn same_tape(&self, rhs: &Var<'t, T>, op: &'static str) -> Result<(), TensorError> {
        if std::ptr::eq(self.tape, rhs.tape) {
            Ok(())
        } else {
            Err(TensorError::Construction {
                detail: format!("{op}: operands recorded on different tapes"),
            })
        }
    }

    fn with_node<R>(&self, f: impl FnOnce(&Node<T>) -> R) -> R {
        let inner = self.tape.inner.borrow();
        f(&inner.nodes[self.id])
    }

    fn bin(&self, rhs: Var<'t, T>, kind: BinKind) -> Result<Var<'t, T>, TensorError> {
        let op_name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        self.same_tape(&rhs, op_name)?;
        let (ls, lv) = self.with_node(|n| (n.shape.clone(), n.data.clone()));
        let (rs, rv, r_grad) = rhs.with_node(|n| (n.shape.clone(), n.data.clone(), n.needs_grad));
        let l_grad = self.with_node(|n| n.needs_grad);

        let bcast = if ls == rs {
            Bcast::None
        } else if rv.len() == 1 {
            Bcast::RhsScalar
        } else if ls.len() == 2 && rs.len() == 1 && rs[0] == ls[1] {
            Bcast::RhsRow
        } else {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: ls,
                rhs: rs,
            });
        };

        let cols = match bcast {
            Bcast::RhsRow => rv.len(),
            _ => 0,
        };
        let data: Vec<T> = lv
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let b = match bcast {
                    Bcast::None => rv[i],
                    Bcast::RhsRow => rv[i % cols],
                    Bcast::RhsScalar => rv[0],
                };
                match kind {
                    BinKind::Add => a + b,
                    BinKind::Sub => a - b,
                    BinKind::Mul => a * b,
                }
            })
            .collect();

        let id = self.tape.push(
            Op::Bin { kind, bcast, a: self.id, b: rhs.id },
            ls,
            data,
            l_grad || r_grad,
        );
        Ok(Var { tape: self.tape, id })
    }

    pub fn add(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.bin(rhs, BinKind::Add)
    }

    pub fn sub(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.bin(rhs, BinKind::Sub)
    }

    pub fn mul(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.bin(rhs, BinKind::Mul)
    }

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(&rhs, "matmul")?;
        let (ls, lv, l_grad) = self.with_node(|n| (n.shape.clone(), n.data.clone(), n.needs_grad));
        let (rs, rv, r_grad) = rhs.with_node(|n| (n.shape.clone(), n.data.clone(), n.needs_grad));
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ls,
                rhs: rs,
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let mut data = vec![T::ZERO; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = lv[i * k + p];
                if a == T::ZERO {
                    continue;
                }
                let brow = &rv[p * n..(p + 1) * n];
                let crow = &mut data[i * n..(i + 1) * n];
                for (c, b) in crow.iter_mut().zip(brow) {
                    *c = *c + a * *b;
                }
            }
        }
        let id = self.tape.push(
            Op::MatMul { a: self.id, b: rhs.id },
            vec![m, n],
            data,
            l_grad || r_grad,
        );
        Ok(Var { tape: self.tape, id })
    }

    fn unary(&self, kind: UnaryKind) -> Result<Var<'t, T>, TensorError> {
        let (shape, xv, needs_grad) =
            self.with_node(|n| (n.shape.clone(), n.data.clone(), n.needs_grad));
        if kind == UnaryKind::Ln {
            if let Some(bad) = xv.iter().find(|v| **v <= T::ZERO) {
                return Err(TensorError::Domain {
                    op: "ln",
                    detail: format!("requires strictly positive input, got {bad}"),
                });
            }
        }
        let data: Vec<T> = xv
            .iter()
            .map(|&x| match kind {
                UnaryKind::Exp => x.exp(),
                UnaryKind::Ln => x.ln(),
                UnaryKind::Sigmoid => stable_sigmoid(x),
                UnaryKind::Softplus => stable_softplus(x),
                UnaryKind::Neg => -x,
            })
            .collect();
        let id = self
            .tape
            .push(Op::Unary { kind, a: self.id }, shape, data, needs_grad);
        Ok(Var { tape: self.tape, id })
    }

    pub fn exp(&self) -> Result<Var<'t, T>, TensorError> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(&self) -> Result<Var<'t, T>, TensorError> {
        self.unary(UnaryKind::Ln)
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>, TensorError> {
        self.unary(UnaryKind::Sigmoid)
    }

    /// `ln(1 + exp(x))`, computed without overflow.
    pub fn softplus(&self) -> Result<Var<'t, T>, TensorError> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn neg(&self) -> Result<Var<'t, T>, TensorError> {
        self.unary(UnaryKind::Neg)
    }

    pub fn leaky_relu(&self, slope: T) -> Result<Var<'t, T>, TensorError> {
        let (shape, xv, needs_grad) =
            self.with_node(|n| (n.shape.clone(), n.data.clone(), n.needs_grad));
        let data: Vec<T> = xv
            .iter()
            .map(|&x| if x > T::ZERO { x } else { x * slope })
            .collect();
        let id = self.tape.push(
            Op::LeakyRelu { a: self.id, slope },
            shape,
            data,
            needs_grad,
        );
        Ok(Var { tape: self.tape, id })
    }

    pub fn add_scalar(&self, c: T) -> Result<Var<'t, T>, TensorError> {
        let (shape, xv, needs_grad) =
            self.with_node(|n| (n.shape.clone(), n.data.clone(), n.needs_grad));
        let data: Vec<T> = xv.iter().map(|&x| x + c).collect();
        let id = self
            .tape
            .push(Op::AddScalar { a: self.id }, shape, data, needs_grad);
        Ok(Var { tape: self.tape, id })
    }

    pub fn mul_scalar(&self, c: T) -> Result<Var<'t, T>, TensorError> {
        let (shape, xv, needs_grad) =
            self.with_node(|n| (n.shape.clone(), n.data.clone(), n.needs_grad));
        let data: Vec<T> = xv.iter().map(|&x| x * c).collect();
        let id = self
            .tape
            .push(Op::MulScalar { a: self.id, c }, shape, data, needs_grad);
        Ok(Var { tape: self.tape, id })
    }

    fn rows_op(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        let shape = self.shape();
        as_rows(&shape).ok_or(TensorError::ShapeMismatch {
            op,
            lhs: shape,
            rhs: vec![],
        })
    }

    /// Row sums: `[m, n] -> [m]` (a rank-1 input counts as one row).
    pub fn sum_rows(&self) -> Result<Var<'t, T>, TensorError> {
        let (m, n) = self.rows_op("sum_rows")?;
        let (xv, needs_grad) = self.with_node(|nd| (nd.data.clone(), nd.needs_grad));
        let data: Vec<T> = (0..m)
            .map(|i| {
                let mut s = T::ZERO;
                for j in 0..n {
                    s = s + xv[i * n + j];
                }
                s
            })
            .collect();
        let id = self
            .tape
            .push(Op::SumRows { a: self.id }, vec![m], data, needs_grad);
        Ok(Var { tape: self.tape, id })
    }

    pub fn sum_all(&self) -> Result<Var<'t, T>, TensorError> {
        let (xv, needs_grad) = self.with_node(|nd| (nd.data.clone(), nd.needs_grad));
        let mut s = T::ZERO;
        for &v in xv.iter() {
            s = s + v;
        }
        let id = self
            .tape
            .push(Op::SumAll { a: self.id }, vec![1], vec![s], needs_grad);
        Ok(Var { tape: self.tape, id })
    }

    pub fn mean_all(&self) -> Result<Var<'t, T>, TensorError> {
        let (xv, needs_grad) = self.with_node(|nd| (nd.data.clone(), nd.needs_grad));
        let mut s = T::ZERO;
        for &v in xv.iter() {
            s = s + v;
        }
        let mean = s / T::from_f64(xv.len() as f64);
        let id = self
            .tape
            .push(Op::MeanAll { a: self.id }, vec![1], vec![mean], needs_grad);
        Ok(Var { tape: self.tape, id })
    }

    /// Row-wise `log sum exp`: `[m, n] -> [m]`, shifted by the row max so
    /// large logits do not overflow.
    pub fn logsumexp_rows(&self) -> Result<Var<'t, T>, TensorError> {
        let (m, n) = self.rows_op("logsumexp")?;
        let (xv, needs_grad) = self.with_node(|nd| (nd.data.clone(), nd.needs_grad));
        let data: Vec<T> = (0..m)
            .map(|i| {
                let row = &xv[i * n..(i + 1) * n];
                let mut hi = T::neg_infinity();
                for &v in row {
                    hi = hi.maximum(v);
                }
                let mut s = T::ZERO;
                for &v in row {
                    s = s + (v - hi).exp();
                }
                hi + s.ln()
            })
            .collect();
        let id =
            self.tape
                .push(Op::LogSumExpRows { a: self.id }, vec![m], data, needs_grad);
        Ok(Var { tape: self.tape, id })
    }

    /// Row-wise softmax, same shape as input.
    pub fn softmax_rows(&self) -> Result<Var<'t, T>, TensorError> {
        let (m, n) = self.rows_op("softmax")?;
        let (shape, xv, needs_grad) =
            self.with_node(|nd| (nd.shape.clone(), nd.data.clone(), nd.needs_grad));
        let mut data = vec![T::ZERO; xv.len()];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mut hi = T::neg_infinity();
            for &v in row {
                hi = hi.maximum(v);
            }
            let mut s = T::ZERO;
            for &v in row {
                s = s + (v - hi).exp();
            }
            for j in 0..n {
                data[i * n + j] = (row[j] - hi).exp() / s;
            }
        }
        let id = self
            .tape
            .push(Op::SoftmaxRows { a: self.id }, shape, data, needs_grad);
        Ok(Var { tape: self.tape, id })
    }

    /// Concatenate along columns: `[m, p] ++ [m, q] -> [m, p + q]`.
    pub fn concat_cols(&self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(&rhs, "concat_cols")?;
        let (ls, lv, l_grad) = self.with_node(|n| (n.shape.clone(), n.data.clone(), n.needs_grad));
        let (rs, rv, r_grad) = rhs.with_node(|n| (n.shape.clone(), n.data.clone(), n.needs_grad));
        let (lm, lc) = as_rows(&ls).ok_or(TensorError::ShapeMismatch {
            op: "concat_cols",
            lhs: ls.clone(),
            rhs: rs.clone(),
        })?;
        let (rm, rc) = as_rows(&rs).ok_or(TensorError::ShapeMismatch {
            op: "concat_cols",
            lhs: ls.clone(),
            rhs: rs.clone(),
        })?;
        if lm != rm {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: ls,
                rhs: rs,
            });
        }
        let mut data = Vec::with_capacity(lm * (lc + rc));
        for i in 0..lm {
            data.extend_from_slice(&lv[i * lc..(i + 1) * lc]);
            data.extend_from_slice(&rv[i * rc..(i + 1) * rc]);
        }
        let id = self.tape.push(
            Op::ConcatCols { a: self.id, b: rhs.id, a_cols: lc, b_cols: rc },
            vec![lm, lc + rc],
            data,
            l_grad || r_grad,
        );
        Ok(Var { tape: self.tape, id })
    }
}

/// Maximum relative disagreement between the tape gradient of `f` at `point`
/// and central finite differences with step `eps`:
/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i| + |numeric_i|)`.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, eps: T) -> Result<T, TensorError>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>, TensorError>,
{
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(point);
        let y = f(&tape, x)?;
        let grads = tape.backward(y)?;
        grads.get(x)
    };

    let eval = |values: &[T]| -> Result<T, TensorError> {
        let tape = Tape::new();
        let t = Tensor::new(point.shape(), values.to_vec())?;
        let x = tape.leaf(&t);
        let y = f(&tape, x)?;
        Ok(y.value().item())
    };

    let mut worst = T::ZERO;
    let mut probe = point.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = eval(&probe)?;
        probe[i] = orig - eps;
        let down = eval(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (eps + eps);
        let a = analytic.data()[i];
        let denom = T::ONE.maximum(a.abs() + numeric.abs());
        worst = worst.maximum((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = x.softmax_rows().unwrap().value();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn logsumexp_does_not_overflow() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap());
        let y = x.logsumexp_rows().unwrap().value().item();
        assert!((y - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn logsumexp_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x = rand_tensor(&mut rng, &[4, 5]);
            let c: f64 = rng.gen_range(-3.0..3.0);
            let tape = Tape::new();
            let base = tape.constant(&x).logsumexp_rows().unwrap().value();
            let shifted = tape
                .constant(&x)
                .add_scalar(c)
                .unwrap()
                .logsumexp_rows()
                .unwrap()
                .value();
            for (b, s) in base.data().iter().zip(shifted.data()) {
                assert!((b + c - s).abs() < 1e-12, "lse(x + c) != lse(x) + c");
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let x = rand_tensor(&mut rng, &[3, 7]);
            let tape = Tape::new();
            let y = tape.constant(&x).softmax_rows().unwrap().value();
            for i in 0..3 {
                let row = y.row(i);
                assert!(row.iter().all(|&v| v > 0.0));
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    // Independent naive triple loop used as the matmul oracle.
    fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_hand_multiplication_on_random_integer_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let m = rng.gen_range(1..5);
            let k = rng.gen_range(1..5);
            let n = rng.gen_range(1..5);
            let a = Tensor::new(
                &[m, k],
                (0..m * k).map(|_| rng.gen_range(-9..10) as f64).collect(),
            )
            .unwrap();
            let b = Tensor::new(
                &[k, n],
                (0..k * n).map(|_| rng.gen_range(-9..10) as f64).collect(),
            )
            .unwrap();
            let tape = Tape::new();
            let c = tape
                .constant(&a)
                .matmul(tape.constant(&b))
                .unwrap()
                .value();
            assert_eq!(c.data(), matmul_oracle(&a, &b).as_slice());
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[4, 2]));
        match a.matmul(b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn ln_rejects_non_positive_input() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(x.ln(), Err(TensorError::Domain { op: "ln", .. })));
    }

    #[test]
    fn square_gradient_is_two_x() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0f64));
        let y = x.mul(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::<f64>::zeros(&[3]));
        let y = x.add_scalar(1.0).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0f64));
        let unused = tape.leaf(&Tensor::<f64>::zeros(&[4]));
        let y = x.mul(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0; 4]);
    }

    #[test]
    fn grad_of_sum_is_exactly_one() {
        // Integer point and power-of-two step keep the central difference
        // exact in floating point, so the disagreement is exactly zero.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = Tensor::new(&[6], (0..6).map(|_| rng.gen_range(-9..10) as f64).collect()).unwrap();
        let err = grad_check(|_, x| x.sum_all(), &p, 2f64.powi(-17)).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_of_dense_sigmoid_layer_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let x = rand_tensor(&mut rng, &[2, 4]);
        // Check with respect to the input batch.
        let err = grad_check(
            |tape, xv| {
                let wv = tape.constant(&w);
                let bv = tape.constant(&b);
                xv.matmul(wv)?.add(bv)?.sigmoid()?.sum_all()
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
        // And with respect to the weights.
        let err = grad_check(
            |tape, wv| {
                let xv = tape.constant(&x);
                let bv = tape.constant(&b);
                xv.matmul(wv)?.add(bv)?.sigmoid()?.sum_all()
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn every_op_passes_grad_check_on_random_inputs() {
        type Builder = for<'t> fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>, TensorError>;
        let cases: Vec<(&str, Builder)> = vec![
            ("exp", |_, x| x.exp()?.sum_all()),
            ("sigmoid", |_, x| x.sigmoid()?.sum_all()),
            ("softplus", |_, x| x.softplus()?.sum_all()),
            ("neg", |_, x| x.neg()?.sum_all()),
            ("leaky_relu", |_, x| x.leaky_relu(0.01)?.sum_all()),
            ("softmax", |_, x| {
                // Weighted so the gradient is not trivially zero.
                let y = x.softmax_rows()?;
                let w = y.tape().constant(
                    &Tensor::new(&[5], vec![0.3, -1.2, 2.0, 0.7, -0.4]).unwrap(),
                );
                y.mul(w)?.sum_all()
            }),
            ("logsumexp", |_, x| x.logsumexp_rows()?.sum_all()),
            ("sum_rows", |_, x| x.sum_rows()?.sum_all()),
            ("mean_all", |_, x| x.mean_all()),
            ("mul_scalar", |_, x| x.mul_scalar(-1.7)?.sum_all()),
            ("add_scalar", |_, x| x.add_scalar(0.9)?.sum_all()),
            ("square", |_, x| x.mul(x)?.sum_all()),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for (name, f) in &cases {
            for _ in 0..20 {
                let p = rand_tensor(&mut rng, &[3, 5]);
                let err = grad_check(*f, &p, 1e-5).unwrap();
                assert!(err < 1e-4, "{name}: rel err {err}");
            }
        }
    }

    #[test]
    fn binary_ops_with_broadcast_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let other = rand_tensor(&mut rng, &[4]);
            let scalar = rand_tensor(&mut rng, &[1]);
            let mat = rand_tensor(&mut rng, &[3, 4]);
            let p = rand_tensor(&mut rng, &[3, 4]);
            let row = rand_tensor(&mut rng, &[4]);
            let cases = [
                (
                    "add_row",
                    grad_check(
                        |t: &Tape<f64>, x: Var<'_, f64>| {
                            x.add(t.constant(&other))?.mul(x)?.sum_all()
                        },
                        &p,
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "sub_same_shape",
                    grad_check(
                        |t: &Tape<f64>, x: Var<'_, f64>| {
                            let d = x.sub(t.constant(&mat))?;
                            d.mul(d)?.sum_all()
                        },
                        &p,
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "sub_rhs_row_grad",
                    grad_check(
                        |t: &Tape<f64>, b: Var<'_, f64>| {
                            t.constant(&mat).sub(b)?.sigmoid()?.sum_all()
                        },
                        &row,
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "mul_scalar_bcast",
                    grad_check(
                        |t: &Tape<f64>, x: Var<'_, f64>| {
                            x.mul(t.constant(&scalar))?.exp()?.sum_all()
                        },
                        &p,
                        1e-5,
                    )
                    .unwrap(),
                ),
            ];
            for (name, err) in cases {
                assert!(err < 1e-4, "{name}: rel err {err}");
            }
        }
    }

    #[test]
    fn broadcast_row_gradient_reaches_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let err = grad_check(
            |t, b| t.constant(&x).add(b)?.sigmoid()?.sum_all(),
            &rand_tensor(&mut rng, &[4]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn concat_cols_routes_gradients_to_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let right = rand_tensor(&mut rng, &[2, 3]);
        let p = rand_tensor(&mut rng, &[2, 2]);
        let err = grad_check(
            |t, x| {
                let r = t.leaf(&right);
                x.concat_cols(r)?.sigmoid()?.sum_all()
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let w = rand_tensor(&mut rng, &[5, 4]);
        let x = rand_tensor(&mut rng, &[3, 5]);
        let run = || {
            let tape = Tape::new();
            let wv = tape.leaf(&w);
            let loss = tape
                .constant(&x)
                .matmul(wv)
                .unwrap()
                .sigmoid()
                .unwrap()
                .sum_all()
                .unwrap();
            let grads = tape.backward(loss).unwrap();
            grads.get(wv)
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn leaf_attaches_once_per_tape() {
        let tape = Tape::new();
        let t = Tensor::scalar(1.5f64);
        let a = tape.leaf(&t);
        let b = tape.leaf(&t);
        assert_eq!(a.id(), b.id());
        // Gradient accumulates on the single shared node.
        let y = a.mul(b).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(a).item(), 3.0);
    }

    #[test]
    fn mixing_tapes_is_rejected() {
        let t1 = Tape::<f64>::new();
        let t2 = Tape::<f64>::new();
        let a = t1.constant(&Tensor::scalar(1.0));
        let b = t2.constant(&Tensor::scalar(2.0));
        assert!(matches!(
            a.add(b),
            Err(TensorError::Construction { .. })
        ));
    }
}
