use std::collections::HashMap;
use std::fmt;

use crate::linalg::gemm;
use crate::tensor::check_shape;
use crate::{Error, ParamRef, ParamStore, Result, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag, used in diagnostics and by the gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
    Softmax,
    LayerNorm,
    GatherRows,
    Concat,
    Slice,
    Sum,
    SumLast,
    Mean,
    Exp,
    Log,
    Neg,
    Scale,
    AddScalar,
    ClampMin,
    Square,
    Reshape,
    Transpose,
}

impl OpKind {
    pub const ALL: [OpKind; 26] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Softplus,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::GatherRows,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Sum,
        OpKind::SumLast,
        OpKind::Mean,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Neg,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::ClampMin,
        OpKind::Square,
        OpKind::Reshape,
        OpKind::Transpose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::GatherRows => "gather_rows",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Sum => "sum",
            OpKind::SumLast => "sum_last",
            OpKind::Mean => "mean",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Neg => "neg",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::ClampMin => "clamp_min",
            OpKind::Square => "square",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamRef>),
    Binary {
        kind: OpKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: OpKind,
        x: Var,
        c: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    Concat {
        parts: Vec<(Var, usize)>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumLast {
        x: Var,
    },
    Reshape {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Vec<f64>>,
    params: Vec<(ParamRef, Vec<f64>)>,
    visited: usize,
}

impl Gradients {
    /// Gradient of a plain (non-parameter) leaf created with [`Graph::leaf`].
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var).map(Vec::as_slice)
    }

    pub fn param(&self, r: ParamRef) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == r)
            .map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamRef, &[f64])> {
        self.params.iter().map(|(r, g)| (*r, g.as_slice()))
    }

    /// Number of tape nodes the backward pass walked over.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

/// Tape of recorded operations. Single-owner; not shared across threads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamRef, Var>,
    fault: Option<OpKind>,
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
    }

    /// Test hook: scales the local derivative of `kind` by 1.5 so that the
    /// gradient checker has something to catch.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// First element of `v`; intended for scalar losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Detached copy of a recorded value.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).unwrap()
    }

    /// Records a leaf. It takes part in differentiation iff the tensor
    /// requires gradients.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.is_requires_grad(),
            Op::Leaf(None),
        )
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf(None))
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        check_shape(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf(None)))
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, false, Op::Leaf(None))
    }

    /// Copies parameter `index` of `store` onto the tape. Repeated calls for the
    /// same parameter return the same variable, so gradients from every use are
    /// summed.
    pub fn param(&mut self, store: &ParamStore, index: usize) -> Var {
        let r = store.param_ref(index);
        if let Some(v) = self.param_vars.get(&r) {
            return *v;
        }
        let t = store.get(index);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.is_requires_grad(),
            Op::Leaf(Some(r)),
        );
        self.param_vars.insert(r, v);
        v
    }

    // ---- elementwise binary ------------------------------------------------

    fn binary(&mut self, kind: OpKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = if sa == sb || is_suffix(sb, sa) {
            sa.to_vec()
        } else if is_suffix(sa, sb) {
            sb.to_vec()
        } else {
            return Err(Error::ShapeMismatch {
                op: kind,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let (va, vb) = (self.value(a), self.value(b));
        let n: usize = out_shape.iter().product();
        let (na, nb) = (va.len(), vb.len());
        let f: fn(f64, f64) -> f64 = match kind {
            OpKind::Add => |x, y| x + y,
            OpKind::Sub => |x, y| x - y,
            OpKind::Mul => |x, y| x * y,
            OpKind::Div => |x, y| x / y,
            _ => unreachable!(),
        };
        let value = if na == n && nb == n {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(va[i % na], vb[i % nb])).collect()
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out_shape, value, rg, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Div, a, b)
    }

    // ---- elementwise unary -------------------------------------------------

    fn unary(&mut self, kind: OpKind, x: Var, c: f64) -> Var {
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            OpKind::Tanh => Box::new(f64::tanh),
            OpKind::Relu => Box::new(|v: f64| v.max(0.0)),
            OpKind::Sigmoid => Box::new(sigmoid),
            OpKind::Softplus => Box::new(softplus),
            OpKind::Exp => Box::new(f64::exp),
            OpKind::Log => Box::new(f64::ln),
            OpKind::Neg => Box::new(|v: f64| -v),
            OpKind::Scale => Box::new(move |v: f64| v * c),
            OpKind::AddScalar => Box::new(move |v: f64| v + c),
            OpKind::ClampMin => Box::new(move |v: f64| v.max(c)),
            OpKind::Square => Box::new(|v: f64| v * v),
            _ => unreachable!(),
        };
        let n = self.node(x);
        let value = n.value.iter().map(|&v| f(v)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, value, rg, Op::Unary { kind, x, c })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(OpKind::Tanh, x, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(OpKind::Relu, x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(OpKind::Sigmoid, x, 0.0)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(OpKind::Softplus, x, 0.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(OpKind::Exp, x, 0.0)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(OpKind::Log, x, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(OpKind::Neg, x, 0.0)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(OpKind::Scale, x, c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(OpKind::AddScalar, x, c)
    }

    /// `max(x, c)` elementwise; the gradient is zero where `x <= c`.
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        self.unary(OpKind::ClampMin, x, c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(OpKind::Square, x, 0.0)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m,k]·[k,n]`, `[B,m,k]·[k,n]` (weights shared over the batch) or
    /// `[B,m,k]·[B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: OpKind::MatMul,
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k, n, b_batched, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1], false, vec![sa[0], sb[1]]),
            (3, 2) if sa[2] == sb[0] => (
                1,
                sa[0] * sa[1],
                sa[2],
                sb[1],
                false,
                vec![sa[0], sa[1], sb[1]],
            ),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => {
                (sa[0], sa[1], sa[2], sb[2], true, vec![sa[0], sa[1], sb[2]])
            }
            _ => return Err(mismatch()),
        };
        let mut value = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for bi in 0..batch {
                let bo = if b_batched { bi * k * n } else { 0 };
                gemm(
                    m,
                    k,
                    n,
                    &va[bi * m * k..],
                    false,
                    &vb[bo..],
                    false,
                    &mut value[bi * m * n..],
                    false,
                );
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            out_shape,
            value,
            rg,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
            },
        ))
    }

    /// Swaps the last two axes of a 2-D or 3-D value.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, rows, cols) = match shape.len() {
            2 => (1, shape[0], shape[1]),
            3 => (shape[0], shape[1], shape[2]),
            _ => {
                return Err(Error::InvalidArgument {
                    op: OpKind::Transpose,
                    msg: format!("expected a 2-D or 3-D value, got shape {shape:?}"),
                })
            }
        };
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for b in 0..batch {
            let off = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[off + j * rows + i] = v[off + i * cols + j];
                }
            }
        }
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape.swap(r - 1, r - 2);
        let rg = self.requires_grad(x);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.node(x);
        if check_shape(shape, n.value.len()).is_err() {
            return Err(Error::ShapeMismatch {
                op: OpKind::Reshape,
                lhs: n.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let (value, rg) = (n.value.clone(), n.requires_grad);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape { x }))
    }

    // ---- row-wise ops over the last axis -----------------------------------

    pub fn softmax(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let w = last_dim(&n.shape);
        let mut out = n.value.clone();
        for row in out.chunks_mut(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, rg, Op::Softmax { x })
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let w = last_dim(&n.shape);
        let mut out = n.value.clone();
        let mut inv_std = Vec::with_capacity(out.len() / w);
        for row in out.chunks_mut(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, rg, Op::LayerNorm { x, inv_std })
    }

    /// Sums over the last axis, dropping it (a 1-D input yields shape `[1]`).
    pub fn sum_last(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let w = last_dim(&n.shape);
        let value: Vec<f64> = n.value.chunks(w).map(|r| r.iter().sum()).collect();
        let mut shape = n.shape[..n.shape.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = n.requires_grad;
        self.push(shape, value, rg, Op::SumLast { x })
    }

    /// Rows `idx` of a 2-D table, shape `[idx.len(), width]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let n = self.node(table);
        if n.shape.len() != 2 || idx.is_empty() {
            return Err(Error::InvalidArgument {
                op: OpKind::GatherRows,
                msg: format!(
                    "need a 2-D table and at least one index, got shape {:?}",
                    n.shape
                ),
            });
        }
        let (rows, w) = (n.shape[0], n.shape[1]);
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument {
                op: OpKind::GatherRows,
                msg: format!("row {bad} out of range for table of {rows} rows"),
            });
        }
        let mut value = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            value.extend_from_slice(&n.value[i * w..(i + 1) * w]);
        }
        let rg = n.requires_grad;
        Ok(self.push(
            vec![idx.len(), w],
            value,
            rg,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument {
                op: OpKind::Concat,
                msg: "nothing to concatenate".into(),
            });
        };
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: OpKind::Concat,
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(last_dim(s));
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            shape,
            value,
            rg,
            Op::Concat {
                parts: parts.iter().copied().zip(widths).collect(),
            },
        ))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.node(x);
        let w = last_dim(&n.shape);
        if len == 0 || start + len > w {
            return Err(Error::InvalidArgument {
                op: OpKind::Slice,
                msg: format!(
                    "range {start}..{} outside last axis of {:?}",
                    start + len,
                    n.shape
                ),
            });
        }
        let value: Vec<f64> = n
            .value
            .chunks(w)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut shape = n.shape.clone();
        *shape.last_mut().unwrap() = len;
        let rg = n.requires_grad;
        Ok(self.push(shape, value, rg, Op::Slice { x, start }))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let s = n.value.iter().sum();
        let rg = n.requires_grad;
        self.push(vec![1], vec![s], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let rg = n.requires_grad;
        self.push(vec![1], vec![s], rg, Op::Mean { x })
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from the scalar `loss`. Visits every node exactly once in
    /// reverse insertion order, then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::NonScalarLoss(self.node(loss).shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..self.nodes.len()).rev() {
            out.visited += 1;
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, node, g, &mut grads, &mut out);
        }
        self.clear();
        Ok(out)
    }

    fn propagate(
        &self,
        index: usize,
        node: &Node,
        mut g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let fault = |kind: OpKind, d: &mut [f64]| {
            if self.fault == Some(kind) {
                d.iter_mut().for_each(|v| *v *= 1.5);
            }
        };
        let mut send = |v: Var, delta: &[f64]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => add_into(acc, delta),
                slot @ None => *slot = Some(delta.to_vec()),
            }
        };
        match &node.op {
            Op::Leaf(param) => match param {
                Some(r) => out.params.push((*r, g)),
                None => {
                    out.leaves.insert(Var(index), g);
                }
            },
            Op::Binary { kind, a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (na, nb, n) = (va.len(), vb.len(), g.len());
                let mut da = vec![0.0; na];
                let mut db = vec![0.0; nb];
                for i in 0..n {
                    let (x, y, gi) = (va[i % na], vb[i % nb], g[i]);
                    let (ga, gb) = match kind {
                        OpKind::Add => (gi, gi),
                        OpKind::Sub => (gi, -gi),
                        OpKind::Mul => (gi * y, gi * x),
                        OpKind::Div => (gi / y, -gi * x / (y * y)),
                        _ => unreachable!(),
                    };
                    da[i % na] += ga;
                    db[i % nb] += gb;
                }
                fault(*kind, &mut da);
                fault(*kind, &mut db);
                send(*a, &da);
                send(*b, &db);
            }
            Op::Unary { kind, x, c } => {
                let xv = self.value(*x);
                let y = &node.value;
                for (i, gi) in g.iter_mut().enumerate() {
                    let d = match kind {
                        OpKind::Tanh => 1.0 - y[i] * y[i],
                        OpKind::Relu => {
                            if xv[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        OpKind::Sigmoid => y[i] * (1.0 - y[i]),
                        OpKind::Softplus => sigmoid(xv[i]),
                        OpKind::Exp => y[i],
                        OpKind::Log => 1.0 / xv[i],
                        OpKind::Neg => -1.0,
                        OpKind::Scale => *c,
                        OpKind::AddScalar => 1.0,
                        OpKind::ClampMin => {
                            if xv[i] > *c {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        OpKind::Square => 2.0 * xv[i],
                        _ => unreachable!(),
                    };
                    *gi *= d;
                }
                fault(*kind, &mut g);
                send(*x, &g);
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; va.len()];
                    for bi in 0..batch {
                        let bo = if *b_batched { bi * k * n } else { 0 };
                        // dA = dC · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            false,
                            &vb[bo..],
                            true,
                            &mut da[bi * m * k..],
                            false,
                        );
                    }
                    fault(OpKind::MatMul, &mut da);
                    send(*a, &da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; vb.len()];
                    for bi in 0..batch {
                        let bo = if *b_batched { bi * k * n } else { 0 };
                        // dB = Aᵀ · dC
                        gemm(
                            k,
                            m,
                            n,
                            &va[bi * m * k..],
                            true,
                            &g[bi * m * n..],
                            false,
                            &mut db[bo..],
                            !*b_batched && bi > 0,
                        );
                    }
                    fault(OpKind::MatMul, &mut db);
                    send(*b, &db);
                }
            }
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            } => {
                let (rows, cols) = (*rows, *cols);
                let mut d = vec![0.0; g.len()];
                for b in 0..*batch {
                    let off = b * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            d[off + i * cols + j] = g[off + j * rows + i];
                        }
                    }
                }
                fault(OpKind::Transpose, &mut d);
                send(*x, &d);
            }
            Op::Reshape { x } => {
                fault(OpKind::Reshape, &mut g);
                send(*x, &g);
            }
            Op::Softmax { x } => {
                let w = last_dim(&node.shape);
                for (gr, yr) in g.chunks_mut(w).zip(node.value.chunks(w)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gr.iter_mut()
                        .zip(yr)
                        .for_each(|(gi, yi)| *gi = yi * (*gi - dot));
                }
                fault(OpKind::Softmax, &mut g);
                send(*x, &g);
            }
            Op::LayerNorm { x, inv_std } => {
                let w = last_dim(&node.shape);
                let wf = w as f64;
                for ((gr, yr), is) in g.chunks_mut(w).zip(node.value.chunks(w)).zip(inv_std) {
                    let mean_g = gr.iter().sum::<f64>() / wf;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / wf;
                    gr.iter_mut()
                        .zip(yr)
                        .for_each(|(gi, yi)| *gi = is * (*gi - mean_g - yi * mean_gy));
                }
                fault(OpKind::LayerNorm, &mut g);
                send(*x, &g);
            }
            Op::SumLast { x } => {
                let xs = &self.nodes[x.0].shape;
                let w = last_dim(xs);
                let mut d = vec![0.0; g.len() * w];
                for (row, gi) in d.chunks_mut(w).zip(&g) {
                    row.fill(*gi);
                }
                fault(OpKind::SumLast, &mut d);
                send(*x, &d);
            }
            Op::GatherRows { table, idx } => {
                let tn = &self.nodes[table.0];
                let w = tn.shape[1];
                let mut d = vec![0.0; tn.value.len()];
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut d[i * w..(i + 1) * w], &g[r * w..(r + 1) * w]);
                }
                fault(OpKind::GatherRows, &mut d);
                send(*table, &d);
            }
            Op::Concat { parts } => {
                let total = last_dim(&node.shape);
                let rows = g.len() / total;
                let mut off = 0;
                for &(p, w) in parts {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    fault(OpKind::Concat, &mut d);
                    send(p, &d);
                    off += w;
                }
            }
            Op::Slice { x, start } => {
                let w_in = last_dim(&self.nodes[x.0].shape);
                let w = last_dim(&node.shape);
                let mut d = vec![0.0; self.nodes[x.0].value.len()];
                for (row, gr) in d.chunks_mut(w_in).zip(g.chunks(w)) {
                    row[*start..start + w].copy_from_slice(gr);
                }
                fault(OpKind::Slice, &mut d);
                send(*x, &d);
            }
            Op::Sum { x } => {
                let mut d = vec![g[0]; self.nodes[x.0].value.len()];
                fault(OpKind::Sum, &mut d);
                send(*x, &d);
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.len();
                let mut d = vec![g[0] / n as f64; n];
                fault(OpKind::Mean, &mut d);
                send(*x, &d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(&t(&[2, 2], &[1.5, -2.0, 3.25, 4.0]));
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn tanh_of_zero_and_uniform_softmax() {
        let mut g = Graph::new();
        let z = g.constant(&Tensor::zeros(&[3, 2]));
        let y = g.tanh(z);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
        let ones = g.constant(&Tensor::full(&[3], 1.0));
        let s = g.softmax(ones);
        for &v in g.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::vector(&[3.0]).requires_grad(true));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w), Some(&[6.0][..]));
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::vector(&[1.0, 1.0]).requires_grad(true));
        let a = g.sum(w);
        let b = g.sum(w);
        let loss = g.add(a, b).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w), Some(&[2.0, 2.0][..]));
    }

    #[test]
    fn mean_matmul_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2], 1.0, &mut rng);
        let err_w = finite_diff_check(
            |g, wv| {
                let xv = g.constant(&x);
                let y = g.matmul(xv, wv)?;
                Ok(g.mean(y))
            },
            &w,
            1e-5,
        )
        .unwrap();
        let err_x = finite_diff_check(
            |g, xv| {
                let wv = g.constant(&w);
                let y = g.matmul(xv, wv)?;
                Ok(g.mean(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err_w <= 1e-4 && err_x <= 1e-4, "{err_w:e} {err_x:e}");
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::vector(&[1.0, 2.0]).requires_grad(true));
        assert_eq!(g.backward(w).unwrap_err(), Error::NonScalarLoss(vec![2]));
        let mut empty = Graph::new();
        assert_eq!(empty.backward(Var(0)).unwrap_err(), Error::EmptyGraph);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err.to_string(),
            "matmul: incompatible shapes [2, 3] and [2, 3]"
        );
        let c = g.constant(&Tensor::zeros(&[2]));
        let err = g.add(a, c).unwrap_err();
        assert!(err.to_string().starts_with("add:"));
    }

    #[test]
    fn backward_visits_every_node_once_and_clears() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::vector(&[0.5, -1.0]).requires_grad(true));
        let mut x = w;
        for _ in 0..10 {
            x = g.tanh(x);
        }
        let unused = g.exp(w);
        let _ = unused;
        let loss = g.sum(x);
        let n = g.len();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.visited(), n);
        assert!(g.is_empty());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(&Tensor::vector(&[1.0, 2.0]));
        let w = g.leaf(&Tensor::vector(&[3.0, 4.0]).requires_grad(true));
        let p = g.mul(c, w).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w), Some(&[1.0, 2.0][..]));
    }

    #[test]
    fn params_are_shared_within_a_graph() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(&[2.0]));
        let mut g = Graph::new();
        let a = g.param(&store, 0);
        let b = g.param(&store, 0);
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        store.accumulate(&grads);
        assert_eq!(store.get(0).grad(), Some(&[4.0][..]));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::vector(&[2.0]).requires_grad(true));
        let d = g.detach(w);
        let p = g.mul(w, d).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w), Some(&[2.0][..]));
    }

    #[test]
    fn masked_softmax_ignores_neg_infinity() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[1, 3], &[0.3, f64::NEG_INFINITY, 0.3]));
        let s = g.softmax(x);
        assert_eq!(g.value(s), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn identical_op_sequences_are_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut g = Graph::new();
            let a = g.leaf(&Tensor::uniform(&[3, 4], 1.0, &mut rng).requires_grad(true));
            let b = g.constant(&Tensor::uniform(&[4, 5], 1.0, &mut rng));
            let y = g.matmul(a, b).unwrap();
            let y = g.layer_norm(y);
            let y = g.softmax(y);
            let loss = g.mean(y);
            let value = g.scalar(loss).to_bits();
            let grads = g.backward(loss).unwrap();
            let bits: Vec<u64> = grads.get(a).unwrap().iter().map(|v| v.to_bits()).collect();
            (value, bits)
        };
        assert_eq!(run(), run());
    }
}
