use std::cell::{Ref, RefCell};

use super::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    L2Normalize { x: Var, norms: Vec<f64> },
    Dot(Var, Var),
    LogSumExp { x: Var, mask: Option<Vec<bool>> },
    Clamp { x: Var, lo: f64, hi: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, start: usize },
    Transpose(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    // Accumulated leaf gradients, indexed like `nodes`.
    grads: Vec<Option<Vec<f64>>>,
}

/// Recording of primitive operations for reverse-mode differentiation.
///
/// Every op returns a new [`Var`]. An op's output requires a gradient iff
/// any of its inputs does; otherwise it is a constant of the recording and
/// backward skips it.
#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A frozen leaf.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.inner.borrow(), |inner| &inner.nodes[v.0].value)
    }

    /// Copy of the value behind `v`.
    pub fn tensor(&self, v: Var) -> Tensor {
        self.value(v).clone()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; zeros if nothing has flowed into it.
    pub fn grad(&self, v: Var) -> Tensor {
        let inner = self.inner.borrow();
        let shape = inner.nodes[v.0].value.shape().to_vec();
        match &inner.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        inner.grads.push(None);
        Var(inner.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let inner = self.inner.borrow();
        vars.iter().any(|v| inner.nodes[v.0].requires_grad)
    }

    fn unary(&self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = {
            let xv = self.value(x);
            Tensor {
                shape: xv.shape().to_vec(),
                data: xv.data().iter().map(|&v| f(v)).collect(),
            }
        };
        let rg = self.any_grad(&[x]);
        self.push(value, rg, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, &sa, &sb));
        }
        Ok(())
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            Tensor {
                shape: av.shape().to_vec(),
                data: av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            }
        };
        let rg = self.any_grad(&[a, b]);
        self.push(value, rg, op)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let data = matmul_raw(
            self.value(a).data(),
            self.value(b).data(),
            sa[0],
            sa[1],
            sb[1],
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![sa[0], sb[1]],
                data,
            },
            rg,
            Op::MatMul(a, b),
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    /// Adds a `[n]` row vector to every row of a `[.., n]` tensor.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr.len() != 1 || sx.last() != sr.first() {
            return Err(Error::shape("add_row", &sx, &sr));
        }
        let value = {
            let (xv, rv) = (self.value(x), self.value(row));
            let n = sr[0];
            let data = xv
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + rv.data()[i % n])
                .collect();
            Tensor { shape: sx, data }
        };
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(value, rg, Op::AddRow(x, row)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        if let Some(bad) = self
            .value(x)
            .data()
            .iter()
            .find(|&&v| v <= 0.0 || v.is_nan())
        {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let m = {
            let xv = self.value(x);
            xv.data().iter().sum::<f64>() / xv.len() as f64
        };
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(m), rg, Op::Mean(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Rescales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&self, x: Var) -> Result<Var> {
        let (value, norms) = {
            let xv = self.value(x);
            let mut data = Vec::with_capacity(xv.len());
            let mut norms = Vec::with_capacity(xv.outer_len());
            for (i, row) in xv.rows().enumerate() {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 || !n.is_finite() {
                    return Err(Error::domain(
                        "l2_normalize",
                        format!("row {i} has norm {n}"),
                    ));
                }
                data.extend(row.iter().map(|v| v / n));
                norms.push(n);
            }
            (
                Tensor {
                    shape: xv.shape().to_vec(),
                    data,
                },
                norms,
            )
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::L2Normalize { x, norms }))
    }

    /// Row-wise inner product along the last axis: `[.., d] . [.., d] -> [..]`.
    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            let data = av
                .rows()
                .zip(bv.rows())
                .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x * y).sum())
                .collect();
            let shape = av.shape()[..av.shape().len().saturating_sub(1)].to_vec();
            Tensor { shape, data }
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Dot(a, b)))
    }

    /// Stable `log Σ exp` along the last axis.
    pub fn logsumexp(&self, x: Var) -> Result<Var> {
        self.logsumexp_impl(x, None)
    }

    /// `logsumexp` restricted to entries where `mask` is true. The mask has
    /// the full shape of `x`; every row must keep at least one entry.
    pub fn logsumexp_masked(&self, x: Var, mask: Vec<bool>) -> Result<Var> {
        self.logsumexp_impl(x, Some(mask))
    }

    fn logsumexp_impl(&self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            if let Some(m) = &mask {
                if m.len() != xv.len() {
                    return Err(Error::shape("logsumexp", xv.shape(), &[m.len()]));
                }
            }
            let d = xv.last_dim();
            let mut data = Vec::with_capacity(xv.outer_len());
            for (i, row) in xv.rows().enumerate() {
                let keep = |j: usize| mask.as_ref().map_or(true, |m| m[i * d + j]);
                let max = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| keep(*j))
                    .map(|(_, &v)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::domain(
                        "logsumexp",
                        format!("row {i} is fully masked"),
                    ));
                }
                let s: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| keep(*j))
                    .map(|(_, &v)| (v - max).exp())
                    .sum();
                data.push(max + s.ln());
            }
            let shape = xv.shape()[..xv.shape().len().saturating_sub(1)].to_vec();
            Tensor { shape, data }
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::LogSumExp { x, mask }))
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Concatenates along `axis` (0 for any rank, 1 for matrices).
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::domain("concat", "no inputs"))?;
        let base = self.shape(*first);
        if axis >= base.len() || axis > 1 || (axis == 1 && base.len() != 2) {
            return Err(Error::domain(
                "concat",
                format!("axis {axis} for shape {base:?}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, &s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(shape.iter().product());
        if axis == 0 {
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
        } else {
            let rows = base[0];
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Rows `[start, end)` along axis 0.
    pub fn slice(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, end)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Slice { x, start }))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", &s, &[2]));
        }
        let data = transpose_raw(self.value(x).data(), s[0], s[1]);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![s[1], s[0]],
                data,
            },
            rg,
            Op::Transpose(x),
        ))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.tensor(x).reshaped(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Backpropagates from a scalar `loss`, adding `d loss / d leaf` into the
    /// gradient of every leaf that requires one.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        let Inner { nodes, grads } = &mut *inner;
        let root = &nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut work: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = work[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, contribution) in node_backward(nodes, node, &g) {
                if !nodes[input.0].requires_grad {
                    continue;
                }
                match &mut work[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn node_backward(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let bt = transpose_raw(bv.data(), k, n);
            let at = transpose_raw(av.data(), m, k);
            vec![
                (*a, matmul_raw(g, &bt, m, n, k)),
                (*b, matmul_raw(&at, g, k, m, n)),
            ]
        }
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::AddRow(x, row) => {
            let n = val(*row).len();
            let mut gr = vec![0.0; n];
            for (i, &gi) in g.iter().enumerate() {
                gr[i % n] += gi;
            }
            vec![(*x, g.to_vec()), (*row, gr)]
        }
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            vec![
                (*a, g.iter().zip(bv).map(|(g, y)| g * y).collect()),
                (*b, g.iter().zip(av).map(|(g, x)| g * x).collect()),
            ]
        }
        Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
        Op::AddScalar(x) => vec![(*x, g.to_vec())],
        Op::Exp(x) => vec![(*x, g.iter().zip(out.data()).map(|(g, y)| g * y).collect())],
        Op::Log(x) => vec![(
            *x,
            g.iter().zip(val(*x).data()).map(|(g, v)| g / v).collect(),
        )],
        Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
        Op::Mean(x) => {
            let n = val(*x).len();
            vec![(*x, vec![g[0] / n as f64; n])]
        }
        Op::Relu(x) => vec![(
            *x,
            g.iter()
                .zip(val(*x).data())
                .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                .collect(),
        )],
        Op::Tanh(x) => vec![(
            *x,
            g.iter()
                .zip(out.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect(),
        )],
        Op::Sigmoid(x) => vec![(
            *x,
            g.iter()
                .zip(out.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect(),
        )],
        Op::L2Normalize { x, norms } => {
            let d = out.last_dim();
            let mut gx = vec![0.0; out.len()];
            for (i, &n) in norms.iter().enumerate() {
                let y = out.row(i);
                let gi = &g[i * d..(i + 1) * d];
                let proj: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    gx[i * d + j] = (gi[j] - y[j] * proj) / n;
                }
            }
            vec![(*x, gx)]
        }
        Op::Dot(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let d = av.last_dim();
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            for (i, &gi) in g.iter().enumerate() {
                for j in 0..d {
                    ga[i * d + j] = gi * bv.data()[i * d + j];
                    gb[i * d + j] = gi * av.data()[i * d + j];
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::LogSumExp { x, mask } => {
            let xv = val(*x);
            let d = xv.last_dim();
            let mut gx = vec![0.0; xv.len()];
            for (i, row) in xv.rows().enumerate() {
                let lse = out.data()[i];
                for (j, &v) in row.iter().enumerate() {
                    if mask.as_ref().map_or(true, |m| m[i * d + j]) {
                        gx[i * d + j] = g[i] * (v - lse).exp();
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::Clamp { x, lo, hi } => vec![(
            *x,
            g.iter()
                .zip(val(*x).data())
                .map(|(g, &v)| if v >= *lo && v <= *hi { *g } else { 0.0 })
                .collect(),
        )],
        Op::Concat { parts, axis } => {
            let mut res = Vec::with_capacity(parts.len());
            if *axis == 0 {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    res.push((p, g[off..off + n].to_vec()));
                    off += n;
                }
            } else {
                let total = out.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let s = val(p).shape();
                    let (rows, cols) = (s[0], s[1]);
                    let mut gp = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + col..r * total + col + cols]);
                    }
                    res.push((p, gp));
                    col += cols;
                }
            }
            res
        }
        Op::Slice { x, start } => {
            let xv = val(*x);
            let stride = xv.len() / xv.shape()[0];
            let mut gx = vec![0.0; xv.len()];
            gx[start * stride..start * stride + g.len()].copy_from_slice(g);
            vec![(*x, gx)]
        }
        Op::Transpose(x) => {
            let s = out.shape();
            vec![(*x, transpose_raw(g, s[0], s[1]))]
        }
        Op::Reshape(x) => vec![(*x, g.to_vec())],
    }
}
