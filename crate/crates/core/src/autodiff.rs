//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every evaluation owns its own [`Graph`]. Nodes are appended in creation
//! order, so parents always precede children. [`Graph::gradient`] writes the
//! backward pass into the same graph as ordinary nodes; the returned adjoints
//! can therefore be differentiated again (Hessian-vector products, training
//! through an expression that already contains a gradient).
//!
//! All node values are 2-D. Elementwise binary operations broadcast a `1 x c`,
//! `r x 1` or `1 x 1` operand against the other one. Shape errors inside the
//! graph are programming errors and panic; public entry points that accept
//! user data validate shapes before building nodes.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Recip(Var),
    Sqrt(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Broadcast(Var),
    SliceCols { src: Var, start: usize },
    PadCols { src: Var, start: usize },
}

impl Op {
    fn parents(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | MatMulNT(a, b) | MatMulTN(a, b) => [Some(a), Some(b)],
            Neg(a)
            | Scale(a, _)
            | Shift(a)
            | Tanh(a)
            | Sigmoid(a)
            | Softplus(a)
            | Exp(a)
            | Log(a)
            | Sin(a)
            | Cos(a)
            | Recip(a)
            | Sqrt(a)
            | SumAll(a)
            | SumRows(a)
            | SumCols(a)
            | Broadcast(a) => [Some(a), None],
            SliceCols { src, .. } | PadCols { src, .. } => [Some(src), None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn broadcast_value(src: &Tensor, rows: usize, cols: usize) -> Tensor {
    let (sr, sc) = src.dims();
    assert!(
        (sr == rows || sr == 1) && (sc == cols || sc == 1),
        "cannot broadcast {sr}x{sc} to {rows}x{cols}"
    );
    let s = src.values();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let si = if sr == 1 { 0 } else { i };
        for j in 0..cols {
            let sj = if sc == 1 { 0 } else { j };
            out.push(s[si * sc + sj]);
        }
    }
    Tensor::matrix(rows, cols, out).expect("broadcast dims")
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Inserts an input. Inputs and constants are both leaves; any node can be
    /// a differentiation target.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let value = if value.shape().len() == 2 {
            value
        } else {
            let (r, c) = value.dims();
            Tensor::matrix(r, c, value.into_values()).expect("2-D view")
        };
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    pub fn contains(&self, v: Var) -> bool {
        v.0 < self.nodes.len()
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(op, value)
    }

    /// Expands `v` to `rows x cols`; no-op if it already has that shape.
    pub fn broadcast(&mut self, v: Var, rows: usize, cols: usize) -> Var {
        if self.dims(v) == (rows, cols) {
            return v;
        }
        let value = broadcast_value(self.value(v), rows, cols);
        self.push(Op::Broadcast(v), value)
    }

    fn align(&mut self, a: Var, b: Var) -> (Var, Var) {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if (ar, ac) == (br, bc) {
            return (a, b);
        }
        let rows = ar.max(br);
        let cols = ac.max(bc);
        (self.broadcast(a, rows, cols), self.broadcast(b, rows, cols))
    }

    fn binary(&mut self, a: Var, b: Var, make: fn(Var, Var) -> Op, f: fn(f64, f64) -> f64) -> Var {
        let (a, b) = self.align(a, b);
        let value = self.value(a).zip_map(self.value(b), f).expect("aligned shapes");
        self.push(make(a, b), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let r = self.recip(b);
        self.mul(a, r)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    /// `a + s` elementwise.
    pub fn shift(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + s)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul {m}x{k} by {k2}x{n}");
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).values(), self.value(b).values(), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out).expect("dims"))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_nt {m}x{k} by ({n}x{k2})^T");
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a).values(), self.value(b).values(), &mut out, m, k, n);
        self.push(Op::MatMulNT(a, b), Tensor::matrix(m, n, out).expect("dims"))
    }

    /// `a^T * b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let (k, m) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul_tn ({k}x{m})^T by {k2}x{n}");
        let mut out = vec![0.0; m * n];
        kernels::matmul_tn(self.value(a).values(), self.value(b).values(), &mut out, m, k, n);
        self.push(Op::MatMulTN(a, b), Tensor::matrix(m, n, out).expect("dims"))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// `x * sigmoid(x)`
    pub fn swish(&mut self, a: Var) -> Var {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a).values();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(&v[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        self.push(Op::SumRows(a), Tensor::row(out))
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a).values();
        let out = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
        self.push(Op::SumCols(a), Tensor::column(out))
    }

    /// Row-wise inner product: `r x c, r x c -> r x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum_cols(p)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(start + len <= c, "slice_cols {start}+{len} > {c}");
        let v = self.value(a).values();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        self.push(
            Op::SliceCols { src: a, start },
            Tensor::matrix(r, len, out).expect("dims"),
        )
    }

    /// Places `a` at column offset `start` of a zero matrix with `total` columns.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(start + c <= total, "pad_cols {start}+{c} > {total}");
        let v = self.value(a).values();
        let mut out = vec![0.0; r * total];
        for i in 0..r {
            out[i * total + start..i * total + start + c].copy_from_slice(&v[i * c..(i + 1) * c]);
        }
        self.push(
            Op::PadCols { src: a, start },
            Tensor::matrix(r, total, out).expect("dims"),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut offset = 0;
        let mut acc: Option<Var> = None;
        for &p in parts {
            let c = self.dims(p).1;
            let padded = if c == total { p } else { self.pad_cols(p, offset, total) };
            offset += c;
            acc = Some(match acc {
                None => padded,
                Some(a) => self.add(a, padded),
            });
        }
        acc.expect("concat_cols needs at least one part")
    }

    /// Row-wise log-sum-exp over a list of `r x 1` columns. The per-row maximum
    /// is used as a constant shift.
    pub fn logsumexp_cols(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty());
        let r = self.dims(terms[0]).0;
        let mut m = vec![f64::NEG_INFINITY; r];
        for &t in terms {
            for (mi, &v) in m.iter_mut().zip(self.value(t).values()) {
                *mi = mi.max(v);
            }
        }
        for mi in m.iter_mut() {
            if !mi.is_finite() {
                *mi = 0.0;
            }
        }
        let shift = self.constant(Tensor::column(m));
        let mut acc: Option<Var> = None;
        for &t in terms {
            let d = self.sub(t, shift);
            let e = self.exp(d);
            acc = Some(match acc {
                None => e,
                Some(a) => self.add(a, e),
            });
        }
        let l = self.log(acc.expect("non-empty"));
        self.add(l, shift)
    }

    fn accumulate(&mut self, slot: &mut Option<Var>, g: Var) {
        *slot = Some(match *slot {
            None => g,
            Some(prev) => self.add(prev, g),
        });
    }

    /// Reduces an adjoint of broadcast shape back to `(rows, cols)`.
    fn reduce_to(&mut self, g: Var, rows: usize, cols: usize) -> Var {
        let (gr, gc) = self.dims(g);
        if (gr, gc) == (rows, cols) {
            return g;
        }
        match (rows == 1 && gr != 1, cols == 1 && gc != 1) {
            (true, true) => self.sum(g),
            (true, false) => self.sum_rows(g),
            (false, true) => self.sum_cols(g),
            (false, false) => g,
        }
    }

    /// Gradient of the scalar `output` with respect to each node in `wrt`.
    ///
    /// The backward pass is recorded as graph nodes, so each returned `Var`
    /// can itself be differentiated.
    pub fn gradient(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        for &w in wrt.iter().chain(std::iter::once(&output)) {
            if !self.contains(w) {
                return Err(Error::UnknownNode(w.0));
            }
        }
        let (r, c) = self.dims(output);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarOutput { rows: r, cols: c });
        }

        let n = output.0 + 1;
        // Nodes that depend on some target.
        let mut depends = vec![false; n];
        for &w in wrt {
            if w.0 < n {
                depends[w.0] = true;
            }
        }
        for i in 0..n {
            if depends[i] {
                continue;
            }
            depends[i] = self.nodes[i].op.parents().iter().flatten().any(|p| depends[p.0]);
        }
        // Nodes the output depends on.
        let mut reaches = vec![false; n];
        reaches[output.0] = true;
        for i in (0..n).rev() {
            if !reaches[i] {
                continue;
            }
            for p in self.nodes[i].op.parents().into_iter().flatten() {
                reaches[p.0] = true;
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        adj[output.0] = Some(self.scalar(1.0));

        for i in (0..n).rev() {
            if !(depends[i] && reaches[i]) {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op.clone();
            let me = Var(i);
            use Op::*;
            match op {
                Leaf => {}
                Add(a, b) => {
                    if depends[a.0] {
                        let mut s = adj[a.0];
                        self.accumulate(&mut s, g);
                        adj[a.0] = s;
                    }
                    if depends[b.0] {
                        let mut s = adj[b.0];
                        self.accumulate(&mut s, g);
                        adj[b.0] = s;
                    }
                }
                Sub(a, b) => {
                    if depends[a.0] {
                        let mut s = adj[a.0];
                        self.accumulate(&mut s, g);
                        adj[a.0] = s;
                    }
                    if depends[b.0] {
                        let ng = self.neg(g);
                        let mut s = adj[b.0];
                        self.accumulate(&mut s, ng);
                        adj[b.0] = s;
                    }
                }
                Mul(a, b) => {
                    if depends[a.0] {
                        let ga = self.mul(g, b);
                        self.add_adj(&mut adj, a, ga);
                    }
                    if depends[b.0] {
                        let gb = self.mul(g, a);
                        self.add_adj(&mut adj, b, gb);
                    }
                }
                Neg(a) => {
                    let ga = self.neg(g);
                    self.add_adj(&mut adj, a, ga);
                }
                Scale(a, s) => {
                    let ga = self.scale(g, s);
                    self.add_adj(&mut adj, a, ga);
                }
                Shift(a) => self.add_adj(&mut adj, a, g),
                MatMul(a, b) => {
                    if depends[a.0] {
                        let ga = self.matmul_nt(g, b);
                        self.add_adj(&mut adj, a, ga);
                    }
                    if depends[b.0] {
                        let gb = self.matmul_tn(a, g);
                        self.add_adj(&mut adj, b, gb);
                    }
                }
                MatMulNT(a, b) => {
                    if depends[a.0] {
                        let ga = self.matmul(g, b);
                        self.add_adj(&mut adj, a, ga);
                    }
                    if depends[b.0] {
                        let gb = self.matmul_tn(g, a);
                        self.add_adj(&mut adj, b, gb);
                    }
                }
                MatMulTN(a, b) => {
                    if depends[a.0] {
                        let ga = self.matmul_nt(b, g);
                        self.add_adj(&mut adj, a, ga);
                    }
                    if depends[b.0] {
                        let gb = self.matmul(a, g);
                        self.add_adj(&mut adj, b, gb);
                    }
                }
                Tanh(a) => {
                    // 1 - tanh^2
                    let y2 = self.square(me);
                    let d = self.scale(y2, -1.0);
                    let d = self.shift(d, 1.0);
                    let ga = self.mul(g, d);
                    self.add_adj(&mut adj, a, ga);
                }
                Sigmoid(a) => {
                    let one_minus = self.scale(me, -1.0);
                    let one_minus = self.shift(one_minus, 1.0);
                    let d = self.mul(me, one_minus);
                    let ga = self.mul(g, d);
                    self.add_adj(&mut adj, a, ga);
                }
                Softplus(a) => {
                    let d = self.sigmoid(a);
                    let ga = self.mul(g, d);
                    self.add_adj(&mut adj, a, ga);
                }
                Exp(a) => {
                    let ga = self.mul(g, me);
                    self.add_adj(&mut adj, a, ga);
                }
                Log(a) => {
                    let ga = self.div(g, a);
                    self.add_adj(&mut adj, a, ga);
                }
                Sin(a) => {
                    let d = self.cos(a);
                    let ga = self.mul(g, d);
                    self.add_adj(&mut adj, a, ga);
                }
                Cos(a) => {
                    let s = self.sin(a);
                    let d = self.neg(s);
                    let ga = self.mul(g, d);
                    self.add_adj(&mut adj, a, ga);
                }
                Recip(a) => {
                    let y2 = self.square(me);
                    let d = self.neg(y2);
                    let ga = self.mul(g, d);
                    self.add_adj(&mut adj, a, ga);
                }
                Sqrt(a) => {
                    let inv = self.recip(me);
                    let d = self.scale(inv, 0.5);
                    let ga = self.mul(g, d);
                    self.add_adj(&mut adj, a, ga);
                }
                SumAll(a) | SumRows(a) | SumCols(a) => {
                    let (ar, ac) = self.dims(a);
                    let ga = self.broadcast(g, ar, ac);
                    self.add_adj(&mut adj, a, ga);
                }
                Broadcast(a) => {
                    let (ar, ac) = self.dims(a);
                    let ga = self.reduce_to(g, ar, ac);
                    self.add_adj(&mut adj, a, ga);
                }
                SliceCols { src, start } => {
                    let total = self.dims(src).1;
                    let ga = self.pad_cols(g, start, total);
                    self.add_adj(&mut adj, src, ga);
                }
                PadCols { src, start } => {
                    let len = self.dims(src).1;
                    let ga = self.slice_cols(g, start, len);
                    self.add_adj(&mut adj, src, ga);
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.dims(w);
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect())
    }

    fn add_adj(&mut self, adj: &mut [Option<Var>], target: Var, g: Var) {
        let mut s = adj[target.0];
        self.accumulate(&mut s, g);
        adj[target.0] = s;
    }

    /// Gradient values, for callers that do not differentiate further.
    pub fn gradient_values(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.gradient(output, wrt)?;
        Ok(grads.into_iter().map(|g| self.value(g).clone()).collect())
    }
}
